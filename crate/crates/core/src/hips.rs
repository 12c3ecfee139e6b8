//! Histogram-landmark polynomial synthesis of WMn-like contrast from T1.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::image::stats::{percentiles_sorted, rank_value};
use crate::image::Volume3D;

pub const HISTOGRAM_BINS: usize = 256;
pub const DEFAULT_DEGREE: usize = 3;
/// Fits whose Vandermonde condition estimate exceeds this fall back to
/// degree 1.
pub const MAX_CONDITION: f64 = 1e10;
const MIN_FOREGROUND_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkRole {
    Background,
    Csf,
    Gm,
    Wm,
    High,
}

impl LandmarkRole {
    pub const ALL: [LandmarkRole; 5] = [
        LandmarkRole::Background,
        LandmarkRole::Csf,
        LandmarkRole::Gm,
        LandmarkRole::Wm,
        LandmarkRole::High,
    ];
}

/// Landmark intensities in role order.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramLandmarks {
    pub points: Vec<(f64, LandmarkRole)>,
}

impl HistogramLandmarks {
    pub fn new(points: Vec<(f64, LandmarkRole)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidParameter("need at least two landmarks".into()));
        }
        if points.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(Error::NonMonotoneLandmarks(points.iter().map(|p| p.0).collect()));
        }
        Ok(HistogramLandmarks { points })
    }

    pub fn intensities(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn get(&self, role: LandmarkRole) -> Option<f64> {
        self.points.iter().find(|p| p.1 == role).map(|p| p.0)
    }

    pub fn background_cutoff(&self) -> f64 {
        self.get(LandmarkRole::Background).unwrap_or(0.0)
    }
}

fn bin_of(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

fn bin_center(b: usize) -> f64 {
    (b as f64 + 0.5) / HISTOGRAM_BINS as f64
}

fn histogram(values: &[f64]) -> Vec<u64> {
    let mut h = vec![0u64; HISTOGRAM_BINS];
    for v in values {
        h[bin_of(*v)] += 1;
    }
    h
}

/// Lowest threshold of a four-class Otsu partition (background and three
/// tissue classes): the last bin of the background class.
fn otsu_background(h: &[u64]) -> usize {
    let n = h.len();
    let mut w = vec![0.0; n + 1];
    let mut m = vec![0.0; n + 1];
    for i in 0..n {
        w[i + 1] = w[i] + h[i] as f64;
        m[i + 1] = m[i] + i as f64 * h[i] as f64;
    }
    // Between-class term of the class covering bins a..b (exclusive).
    let term = |a: usize, b: usize| {
        let wc = w[b] - w[a];
        if wc > 0.0 {
            let mc = m[b] - m[a];
            mc * mc / wc
        } else {
            0.0
        }
    };
    let (mut best, mut best_val) = (0, f64::NEG_INFINITY);
    for t1 in 1..n - 2 {
        let first = term(0, t1);
        for t2 in t1 + 1..n - 1 {
            let second = first + term(t1, t2);
            for t3 in t2 + 1..n {
                let v = second + term(t2, t3) + term(t3, n);
                if v > best_val {
                    best_val = v;
                    best = t1 - 1;
                }
            }
        }
    }
    best
}

fn mode_in(h: &[u64], lo: usize, hi: usize) -> usize {
    let mut best = lo;
    for b in lo..=hi {
        if h[b] > h[best] {
            best = b;
        }
    }
    best
}

/// Intensity span of the WM peak skirt on one side of `mode`: twice the
/// distance (in bins) at which the histogram first drops below half the
/// peak height. Keeps noise-broadened WM out of the GM landmark.
fn peak_skirt(h: &[u64], mode: usize, towards_lower: bool) -> f64 {
    let half = h[mode] / 2;
    let mut d = 0;
    loop {
        let next = if towards_lower { mode.checked_sub(d + 1) } else { Some(mode + d + 1).filter(|b| *b < h.len()) };
        match next {
            Some(b) if h[b] > half => d += 1,
            _ => break,
        }
    }
    2.0 * d as f64 / HISTOGRAM_BINS as f64
}

struct Foreground {
    cutoff: f64,
    sorted: Vec<f64>,
    hist: Vec<u64>,
}

/// Background cutoff of a normalised volume: the lowest threshold of a
/// four-class Otsu partition of its 256-bin histogram.
pub fn background_cutoff(volume: &Volume3D) -> Result<f64> {
    if volume.is_constant() {
        return Err(Error::ConstantImage);
    }
    let t = otsu_background(&histogram(volume.data()));
    Ok((t + 1) as f64 / HISTOGRAM_BINS as f64)
}

fn foreground(volume: &Volume3D, cutoff: Option<f64>) -> Result<Foreground> {
    let cutoff = match cutoff {
        Some(c) => c,
        None => background_cutoff(volume)?,
    };
    if volume.is_constant() {
        return Err(Error::ConstantImage);
    }
    let data = volume.data();
    let mut fg: Vec<f64> = data.iter().copied().filter(|v| *v >= cutoff).collect();
    if (fg.len() as f64) < MIN_FOREGROUND_FRACTION * data.len() as f64 || fg.is_empty() {
        return Err(Error::NoForeground);
    }
    percentiles_sorted(&mut fg, &[]);
    let hist = histogram(&fg);
    Ok(Foreground {
        cutoff,
        sorted: fg,
        hist,
    })
}

fn median_between(sorted: &[f64], lo: f64, hi: f64) -> Option<f64> {
    let a = sorted.partition_point(|v| *v <= lo);
    let b = sorted.partition_point(|v| *v < hi);
    (b > a).then(|| rank_value(&sorted[a..b], 50.0))
}

/// Landmarks of a normalised T1-weighted volume: Otsu background cutoff,
/// CSF = 5th foreground percentile, GM = median of foreground between CSF
/// and the lower skirt of the WM peak, WM = histogram mode above the foreground median,
/// high = 99th foreground percentile.
pub fn estimate_landmarks(volume: &Volume3D) -> Result<HistogramLandmarks> {
    landmarks_from(foreground(volume, None)?)
}

/// As [`estimate_landmarks`] with a background cutoff measured elsewhere,
/// typically on the uncropped volume when `volume` is a crop with little
/// or no background.
pub fn estimate_landmarks_with_cutoff(volume: &Volume3D, cutoff: f64) -> Result<HistogramLandmarks> {
    landmarks_from(foreground(volume, Some(cutoff))?)
}

fn landmarks_from(fg: Foreground) -> Result<HistogramLandmarks> {
    let csf = rank_value(&fg.sorted, 5.0);
    let p50 = rank_value(&fg.sorted, 50.0);
    let high = rank_value(&fg.sorted, 99.0);
    let mode = mode_in(&fg.hist, bin_of(p50), HISTOGRAM_BINS - 1);
    let wm = bin_center(mode);
    let gm = median_between(&fg.sorted, csf, wm - peak_skirt(&fg.hist, mode, true))
        .or_else(|| median_between(&fg.sorted, csf, wm))
        .unwrap_or(f64::NAN);
    HistogramLandmarks::new(vec![
        (fg.cutoff, LandmarkRole::Background),
        (csf, LandmarkRole::Csf),
        (gm, LandmarkRole::Gm),
        (wm, LandmarkRole::Wm),
        (high, LandmarkRole::High),
    ])
}

/// Target intensities for each T1 landmark role, read from a normalised
/// WMn volume where the tissue order is reversed: CSF = 95th foreground
/// percentile, WM = histogram mode below the foreground median, GM =
/// median of foreground between them, high = 1st foreground percentile.
pub fn estimate_target_landmarks(wmn: &Volume3D) -> Result<Vec<f64>> {
    target_landmarks_from(foreground(wmn, None)?)
}

pub fn estimate_target_landmarks_with_cutoff(wmn: &Volume3D, cutoff: f64) -> Result<Vec<f64>> {
    target_landmarks_from(foreground(wmn, Some(cutoff))?)
}

fn target_landmarks_from(fg: Foreground) -> Result<Vec<f64>> {
    let csf = rank_value(&fg.sorted, 95.0);
    let p50 = rank_value(&fg.sorted, 50.0);
    let high = rank_value(&fg.sorted, 1.0);
    let mode = mode_in(&fg.hist, 0, bin_of(p50));
    let wm = bin_center(mode);
    let gm = median_between(&fg.sorted, wm + peak_skirt(&fg.hist, mode, false), csf)
        .or_else(|| median_between(&fg.sorted, wm, csf))
        .ok_or_else(|| {
        Error::NonMonotoneLandmarks(vec![fg.cutoff, csf, f64::NAN, wm, high])
    })?;
    Ok(vec![fg.cutoff, csf, gm, wm, high])
}

/// Polynomial `c0 + c1 x + … + cd x^d` on [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialTransform {
    coefficients: Vec<f64>,
    /// Largest absolute residual at the fitted points.
    pub residual: f64,
    /// Condition estimate of the design matrix actually used.
    pub condition: f64,
    /// True when the requested degree was ill-conditioned and degree 1 was used.
    pub fell_back: bool,
}

impl PolynomialTransform {
    pub fn from_coefficients(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.is_empty() || coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("polynomial needs finite coefficients".into()));
        }
        Ok(PolynomialTransform {
            coefficients,
            residual: 0.0,
            condition: 1.0,
            fell_back: false,
        })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// Unclamped value.
    pub fn raw(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    /// Value at `x` clamped to [0, 1], input clamped likewise.
    pub fn eval(&self, x: f64) -> f64 {
        self.raw(x.clamp(0.0, 1.0)).clamp(0.0, 1.0)
    }
}

fn solve(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolynomialTransform> {
    let a = DMatrix::from_fn(xs.len(), degree + 1, |r, c| xs[r].powi(c as i32));
    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smin = sv.min();
    let condition = if smin > 0.0 { sv.max() / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned(condition));
    }
    let b = DVector::from_column_slice(ys);
    let c = svd
        .solve(&b, 0.0)
        .map_err(|e| Error::InvalidParameter(format!("polynomial solve failed: {e}")))?;
    let coefficients: Vec<f64> = c.iter().copied().collect();
    let mut p = PolynomialTransform::from_coefficients(coefficients)?;
    p.residual = xs.iter().zip(ys).map(|(x, y)| (p.raw(*x) - y).abs()).fold(0.0, f64::max);
    p.condition = condition;
    Ok(p)
}

/// Least-squares polynomial through `(xs[i], ys[i])`; exact interpolation
/// when there are `degree + 1` points. Falls back to degree 1 when the
/// requested degree is ill-conditioned.
pub fn fit_points(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolynomialTransform> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < degree + 1 {
        return Err(Error::InvalidParameter(format!(
            "{} points cannot determine a degree-{degree} polynomial",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite landmark".into()));
    }
    for i in 0..xs.len() {
        for j in 0..i {
            if (xs[i] - xs[j]).abs() < 1e-12 {
                return Err(Error::DuplicateSourceLandmark(xs[i]));
            }
        }
    }
    match solve(xs, ys, degree) {
        Err(Error::IllConditioned(_)) if degree > 1 => {
            let mut p = solve(xs, ys, 1)?;
            p.fell_back = true;
            Ok(p)
        }
        other => other,
    }
}

pub fn fit_polynomial(source: &HistogramLandmarks, target: &[f64], degree: usize) -> Result<PolynomialTransform> {
    fit_points(&source.intensities(), target, degree)
}

/// Apply `poly` voxelwise (clamped to [0, 1]); voxels below
/// `background_cutoff` become 0.
pub fn synthesize_wmn(volume: &Volume3D, poly: &PolynomialTransform, background_cutoff: f64) -> Volume3D {
    volume.map(|v| if v < background_cutoff { 0.0 } else { poly.eval(v) })
}

/// Landmarks, fitted map and synthesized volume for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct HipsResult {
    pub landmarks: HistogramLandmarks,
    pub polynomial: PolynomialTransform,
}

/// Fit the cubic through the tissue landmarks only. The background pair
/// sits on the background/CSF step, which no low-degree polynomial can
/// follow; the cutoff masks voxels in [`synthesize_wmn`] instead.
fn fit_tissue(landmarks: HistogramLandmarks, target: &[f64]) -> Result<HipsResult> {
    if target.len() != landmarks.points.len() {
        return Err(Error::InvalidParameter(format!(
            "{} target landmarks for {} source landmarks",
            target.len(),
            landmarks.points.len()
        )));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = landmarks
        .points
        .iter()
        .zip(target)
        .filter(|(p, _)| p.1 != LandmarkRole::Background)
        .map(|(p, t)| (p.0, *t))
        .unzip();
    let polynomial = fit_points(&xs, &ys, DEFAULT_DEGREE)?;
    Ok(HipsResult { landmarks, polynomial })
}

/// Estimate landmarks on `reference` (normalised T1) and fit the map onto
/// `target` landmark intensities.
pub fn fit_hips(reference: &Volume3D, target: &[f64]) -> Result<HipsResult> {
    fit_tissue(estimate_landmarks(reference)?, target)
}

/// [`fit_hips`] with the background cutoff supplied by the caller.
pub fn fit_hips_with_cutoff(reference: &Volume3D, target: &[f64], cutoff: f64) -> Result<HipsResult> {
    fit_tissue(estimate_landmarks_with_cutoff(reference, cutoff)?, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Grid;

    fn trimodal() -> Volume3D {
        // 30% background, then CSF/GM/WM at 15/30/55% of foreground.
        let n = 40 * 40 * 10;
        let g = Grid::axis_aligned([40, 40, 10], [1.0; 3], [0.0; 3]).unwrap();
        let data = (0..n)
            .map(|i| {
                let f = i as f64 / n as f64;
                let jitter = ((i * 7919) % 101) as f64 / 100.0 * 0.02 - 0.01;
                if f < 0.3 {
                    0.0
                } else if f < 0.405 {
                    0.2 + jitter
                } else if f < 0.615 {
                    0.5 + jitter
                } else {
                    0.8 + jitter
                }
            })
            .collect();
        Volume3D::new(g, data).unwrap()
    }

    #[test]
    fn wm_peak_found_within_one_bin() {
        let l = estimate_landmarks(&trimodal()).unwrap();
        let wm = l.get(LandmarkRole::Wm).unwrap();
        assert!((wm - 0.8).abs() <= 1.5 / HISTOGRAM_BINS as f64, "{wm}");
        assert!(l.background_cutoff() > 0.0 && l.background_cutoff() < 0.2);
    }

    #[test]
    fn constant_image_is_rejected() {
        let g = Grid::axis_aligned([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3D::new(g, vec![0.3; 64]).unwrap();
        assert!(matches!(estimate_landmarks(&v), Err(Error::ConstantImage)));
    }

    #[test]
    fn line_through_two_points() {
        let p = fit_points(&[0.0, 1.0], &[1.0, 0.0], 1).unwrap();
        assert!((p.coefficients()[0] - 1.0).abs() < 1e-12);
        assert!((p.coefficients()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicates_and_shortage_rejected() {
        assert!(matches!(
            fit_points(&[0.2, 0.2, 0.5], &[0.0, 0.1, 0.2], 1),
            Err(Error::DuplicateSourceLandmark(_))
        ));
        assert!(fit_points(&[0.2, 0.5], &[0.0, 0.1], 3).is_err());
    }

    #[test]
    fn ill_conditioned_falls_back_to_linear() {
        let xs = [0.5, 0.5 + 1e-5, 0.5 + 2e-5, 0.5 + 3e-5];
        let p = fit_points(&xs, &[0.1, 0.2, 0.3, 0.4], 3).unwrap();
        assert!(p.fell_back);
        assert_eq!(p.degree(), 1);
    }

    #[test]
    fn synthesis_inverts_and_zeroes_background() {
        let inv = PolynomialTransform::from_coefficients(vec![1.0, -1.0]).unwrap();
        let g = Grid::axis_aligned([3, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3D::new(g, vec![0.0, 0.5, 0.8]).unwrap();
        let out = synthesize_wmn(&v, &inv, 0.1);
        assert_eq!(out.data()[0], 0.0);
        assert!((out.data()[2] - 0.2).abs() < 1e-12);
        assert!(out.data()[2] < out.data()[1]);
    }
}
