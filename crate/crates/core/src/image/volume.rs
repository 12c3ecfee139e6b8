use rayon::prelude::*;

use super::grid::{BoundingBox, Grid};
use super::stats::percentiles_sorted;
use crate::error::{Error, Result};
use crate::labels::LabelDictionary;
use crate::registration::AffineTransform;

/// Interpolation used when sampling off-grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

/// Scalar volume with geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidGeometry(format!(
                "data length {} does not match grid {:?}",
                data.len(),
                grid.dims()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite voxel value {v}")));
        }
        Ok(Volume3D { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Volume3D {
            grid,
            data: vec![0.0; n],
        }
    }

    /// Fill from a function of the voxel index triple.
    pub fn from_fn<F>(grid: Grid, f: F) -> Self
    where
        F: Fn(usize, usize, usize) -> f64 + Sync,
    {
        let data = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let [i, j, k] = grid.coords(idx);
                f(i, j, k)
            })
            .collect();
        Volume3D { grid, data }
    }

    pub(crate) fn from_parts_unchecked(grid: Grid, data: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        Volume3D { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    #[inline]
    fn at_or_zero(&self, i: i64, j: i64, k: i64) -> f64 {
        if self.grid.contains(i, j, k) {
            self.data[self.grid.index(i as usize, j as usize, k as usize)]
        } else {
            0.0
        }
    }

    /// Sample at a continuous voxel coordinate; voxels outside the grid
    /// read as 0.
    #[inline]
    pub fn sample(&self, p: [f64; 3], mode: Interpolation) -> f64 {
        match mode {
            Interpolation::Nearest => {
                self.at_or_zero(p[0].round() as i64, p[1].round() as i64, p[2].round() as i64)
            }
            Interpolation::Trilinear => trilinear(&self.data, self.grid.dims(), p),
        }
    }

    pub fn map<F>(&self, f: F) -> Volume3D
    where
        F: Fn(f64) -> f64 + Sync,
    {
        Volume3D {
            grid: self.grid.clone(),
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn crop(&self, bbox: &BoundingBox) -> Result<Volume3D> {
        let (grid, idx) = crop_indices(&self.grid, bbox)?;
        let data = idx.into_par_iter().map(|i| self.data[i]).collect();
        Ok(Volume3D { grid, data })
    }

    /// Min and max voxel value.
    pub fn range(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn is_constant(&self) -> bool {
        let (lo, hi) = self.range();
        lo == hi
    }

    /// Intensity-weighted centroid in world coordinates (negative values
    /// clamped to zero). Falls back to the grid centre for an empty image.
    pub fn center_of_mass(&self) -> [f64; 3] {
        let g = &self.grid;
        let sums = super::stats::det_sum_vec::<4, _>(self.data.len(), |idx, acc| {
            let w = self.data[idx].max(0.0);
            if w > 0.0 {
                let [i, j, k] = g.coords(idx);
                acc[0] += w * i as f64;
                acc[1] += w * j as f64;
                acc[2] += w * k as f64;
                acc[3] += w;
            }
        });
        if sums[3] <= 0.0 {
            return g.center_world();
        }
        g.voxel_to_world([sums[0] / sums[3], sums[1] / sums[3], sums[2] / sums[3]])
    }
}

/// Trilinear interpolation on an x-fastest buffer with zero fill.
#[inline]
pub(crate) fn trilinear(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let fx = p[0].floor();
    let fy = p[1].floor();
    let fz = p[2].floor();
    if !(fx.is_finite() && fy.is_finite() && fz.is_finite()) {
        return 0.0;
    }
    let (x0, y0, z0) = (fx as i64, fy as i64, fz as i64);
    let (tx, ty, tz) = (p[0] - fx, p[1] - fy, p[2] - fz);
    let (nx, ny, nz) = (dims[0] as i64, dims[1] as i64, dims[2] as i64);
    if x0 < -1 || y0 < -1 || z0 < -1 || x0 >= nx || y0 >= ny || z0 >= nz {
        return 0.0;
    }
    let sx = nx as usize;
    let sxy = (nx * ny) as usize;
    if x0 >= 0 && y0 >= 0 && z0 >= 0 && x0 + 1 < nx && y0 + 1 < ny && z0 + 1 < nz {
        let b = x0 as usize + sx * y0 as usize + sxy * z0 as usize;
        let c000 = data[b];
        let c100 = data[b + 1];
        let c010 = data[b + sx];
        let c110 = data[b + sx + 1];
        let c001 = data[b + sxy];
        let c101 = data[b + sxy + 1];
        let c011 = data[b + sxy + sx];
        let c111 = data[b + sxy + sx + 1];
        let c00 = c000 + tx * (c100 - c000);
        let c10 = c010 + tx * (c110 - c010);
        let c01 = c001 + tx * (c101 - c001);
        let c11 = c011 + tx * (c111 - c011);
        let c0 = c00 + ty * (c10 - c00);
        let c1 = c01 + ty * (c11 - c01);
        return c0 + tz * (c1 - c0);
    }
    let get = |i: i64, j: i64, k: i64| -> f64 {
        if i >= 0 && j >= 0 && k >= 0 && i < nx && j < ny && k < nz {
            data[i as usize + sx * j as usize + sxy * k as usize]
        } else {
            0.0
        }
    };
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                let w = wx * wy * wz;
                if w != 0.0 {
                    acc += w * get(x0 + dx, y0 + dy, z0 + dz);
                }
            }
        }
    }
    acc
}

fn crop_indices(grid: &Grid, bbox: &BoundingBox) -> Result<(Grid, Vec<usize>)> {
    let b = bbox.clamped(grid)?;
    let min = b.min.map(|v| v as usize);
    let ext = b.extents();
    let sub = grid.subgrid(min, ext)?;
    let idx = (0..sub.len())
        .map(|n| {
            let [i, j, k] = sub.coords(n);
            grid.index(min[0] + i, min[1] + j, min[2] + k)
        })
        .collect();
    Ok((sub, idx))
}

/// Integer label volume with geometry and a structure dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    labels: Vec<u16>,
    dictionary: LabelDictionary,
}

impl LabelVolume {
    /// Every nonzero label must appear in `dictionary`.
    pub fn new(grid: Grid, labels: Vec<u16>, dictionary: LabelDictionary) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::InvalidGeometry(format!(
                "label length {} does not match grid {:?}",
                labels.len(),
                grid.dims()
            )));
        }
        let v = LabelVolume {
            grid,
            labels,
            dictionary,
        };
        if let Some(missing) = v.present_labels().into_iter().find(|l| !v.dictionary.contains(*l)) {
            return Err(Error::DictionaryConflict(format!(
                "label {missing} is not in the dictionary"
            )));
        }
        Ok(v)
    }

    pub fn empty(grid: Grid, dictionary: LabelDictionary) -> Self {
        let n = grid.len();
        LabelVolume {
            grid,
            labels: vec![0; n],
            dictionary,
        }
    }

    pub(crate) fn from_parts_unchecked(grid: Grid, labels: Vec<u16>, dictionary: LabelDictionary) -> Self {
        LabelVolume {
            grid,
            labels,
            dictionary,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn dictionary(&self) -> &LabelDictionary {
        &self.dictionary
    }

    pub fn with_dictionary(mut self, dictionary: LabelDictionary) -> Result<Self> {
        self.dictionary = dictionary;
        LabelVolume::new(self.grid, self.labels, self.dictionary)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u16 {
        self.labels[self.grid.index(i, j, k)]
    }

    /// Nearest-neighbour lookup at a continuous voxel coordinate, 0 outside.
    #[inline]
    pub fn sample_nearest(&self, p: [f64; 3]) -> u16 {
        let (i, j, k) = (p[0].round() as i64, p[1].round() as i64, p[2].round() as i64);
        if self.grid.contains(i, j, k) {
            self.labels[self.grid.index(i as usize, j as usize, k as usize)]
        } else {
            0
        }
    }

    /// Sorted distinct nonzero labels.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=u16::MAX).filter(|&l| seen[l as usize]).collect()
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn crop(&self, bbox: &BoundingBox) -> Result<LabelVolume> {
        let (grid, idx) = crop_indices(&self.grid, bbox)?;
        let labels = idx.into_iter().map(|i| self.labels[i]).collect();
        Ok(LabelVolume {
            grid,
            labels,
            dictionary: self.dictionary.clone(),
        })
    }

    /// Bounding box of all nonzero voxels, if any.
    pub fn foreground_box(&self) -> Option<BoundingBox> {
        let mut min = [i64::MAX; 3];
        let mut max = [i64::MIN; 3];
        let mut any = false;
        for (idx, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                any = true;
                let c = self.grid.coords(idx);
                for a in 0..3 {
                    min[a] = min[a].min(c[a] as i64);
                    max[a] = max[a].max(c[a] as i64);
                }
            }
        }
        any.then_some(BoundingBox::new(min, max))
    }
}

/// Map the eight corners of `template_box` through `template_to_input`
/// (world coordinates) into input voxel space, take the axis-aligned hull,
/// dilate by `margin_mm` (per-axis voxel count rounded up) and clamp.
pub fn propagate_crop_box(
    template_box: &BoundingBox,
    template_grid: &Grid,
    template_to_input: &AffineTransform,
    margin_mm: f64,
    input_grid: &Grid,
) -> Result<BoundingBox> {
    if !template_to_input.is_invertible() {
        return Err(Error::DegenerateAffine);
    }
    if !(margin_mm >= 0.0) {
        return Err(Error::InvalidParameter(format!("negative margin {margin_mm}")));
    }
    const EPS: f64 = 1e-6;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for corner in 0..8 {
        let c = [0, 1, 2].map(|a| {
            if corner & (1 << a) == 0 {
                template_box.min[a] as f64
            } else {
                template_box.max[a] as f64
            }
        });
        let w = template_to_input.apply(template_grid.voxel_to_world(c));
        let v = input_grid.world_to_voxel(w);
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let sp = input_grid.spacing();
    let margin = [0, 1, 2].map(|a| (margin_mm / sp[a] - EPS).ceil().max(0.0) as i64);
    let hull = BoundingBox::new(
        [0, 1, 2].map(|a| (lo[a] + EPS).floor() as i64),
        [0, 1, 2].map(|a| (hi[a] - EPS).ceil() as i64),
    );
    hull.dilated(margin).clamped(input_grid)
}

/// Affinely map the `p_low` / `p_high` percentiles (nearest rank) to 0 / 1
/// and clamp to [0, 1].
pub fn robust_normalize(volume: &Volume3D, p_low: f64, p_high: f64) -> Result<Volume3D> {
    if !(0.0..100.0).contains(&p_low) || !(p_low < p_high && p_high <= 100.0) {
        return Err(Error::InvalidParameter(format!(
            "percentiles must satisfy 0 <= low < high <= 100, got ({p_low}, {p_high})"
        )));
    }
    if volume.is_constant() {
        return Err(Error::ConstantImage);
    }
    let mut sorted = volume.data().to_vec();
    let p = percentiles_sorted(&mut sorted, &[p_low, p_high]);
    let (lo, hi) = (p[0], p[1]);
    if hi <= lo {
        return Err(Error::ConstantImage);
    }
    let scale = hi - lo;
    Ok(volume.map(|v| ((v - lo) / scale).clamp(0.0, 1.0)))
}
