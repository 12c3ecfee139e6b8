//! Label fusion: majority voting and joint label fusion (JLF).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Grid, LabelVolume, Volume3D};
use crate::labels::LabelDictionary;

/// Scores within this distance of the best are treated as tied; ties go to
/// the smaller label index.
pub const TIE_TOLERANCE: f64 = 1e-4;

/// Centered patches with a sum of squares at or below this are constant and
/// normalise to the zero vector.
const FLAT_PATCH: f64 = 1e-10;

/// One atlas warped onto the target grid.
#[derive(Debug, Clone)]
pub struct AtlasVote {
    pub id: String,
    pub labels: LabelVolume,
    pub image: Volume3D,
}

impl AtlasVote {
    pub fn new(id: impl Into<String>, image: Volume3D, labels: LabelVolume) -> Result<Self> {
        image.grid().check_same(labels.grid(), "atlas vote image/labels")?;
        Ok(AtlasVote {
            id: id.into(),
            labels,
            image,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.labels.grid()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Majority,
    Jlf,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(FusionMode::Majority),
            "jlf" => Ok(FusionMode::Jlf),
            other => Err(Error::InvalidParameter(format!("unknown fusion mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Majority => "majority",
            FusionMode::Jlf => "jlf",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// Patch radius in voxels.
    pub patch_radius: usize,
    /// Local search radius in voxels.
    pub search_radius: usize,
    pub beta: f64,
    pub alpha: f64,
    pub mode: FusionMode,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            patch_radius: 2,
            search_radius: 2,
            beta: 2.0,
            alpha: 0.1,
            mode: FusionMode::Jlf,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.mode == FusionMode::Jlf && self.alpha <= 0.0 {
            return Err(Error::InvalidParameter("joint label fusion needs alpha > 0".into()));
        }
        Ok(())
    }

    pub fn describe(&self) -> Vec<(String, String)> {
        vec![
            ("fusion.mode".into(), self.mode.to_string()),
            ("fusion.patch_radius".into(), self.patch_radius.to_string()),
            ("fusion.search_radius".into(), self.search_radius.to_string()),
            ("fusion.beta".into(), self.beta.to_string()),
            ("fusion.alpha".into(), self.alpha.to_string()),
        ]
    }
}

fn check_votes(votes: &[AtlasVote]) -> Result<&Grid> {
    let first = votes.first().ok_or(Error::EmptyVoteSet)?;
    let grid = first.grid();
    for v in votes {
        grid.check_same(v.labels.grid(), &format!("vote {}", v.id))?;
        grid.check_same(v.image.grid(), &format!("vote {} image", v.id))?;
    }
    Ok(grid)
}

fn merged_dictionary(votes: &[AtlasVote]) -> LabelDictionary {
    let mut d = LabelDictionary::new();
    for v in votes {
        for (i, name) in v.labels.dictionary().iter() {
            if !d.contains(i) {
                d.insert(i, name);
            }
        }
    }
    d
}

/// Pick the label with the highest score; scores within [`TIE_TOLERANCE`]
/// of the maximum tie and the smallest label wins. `scored` must be sorted
/// by label.
fn pick(scored: &[(u16, f64)]) -> u16 {
    let best = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    scored
        .iter()
        .find(|s| s.1 >= best - TIE_TOLERANCE)
        .map(|s| s.0)
        .unwrap_or(0)
}

/// Accumulate `weight` per label at voxel `idx`, sorted by label.
fn tally(votes: &[AtlasVote], idx: usize, weights: Option<&[f64]>) -> Vec<(u16, f64)> {
    let mut scored: Vec<(u16, f64)> = Vec::with_capacity(votes.len());
    for (a, v) in votes.iter().enumerate() {
        let l = v.labels.labels()[idx];
        let w = weights.map_or(1.0, |w| w[a]);
        match scored.iter_mut().find(|s| s.0 == l) {
            Some(s) => s.1 += w,
            None => scored.push((l, w)),
        }
    }
    scored.sort_by_key(|s| s.0);
    scored
}

fn unanimous(votes: &[AtlasVote], idx: usize) -> Option<u16> {
    let l = votes[0].labels.labels()[idx];
    votes.iter().all(|v| v.labels.labels()[idx] == l).then_some(l)
}

/// Per-voxel plurality; ties go to the smallest label (background included).
pub fn majority_vote(votes: &[AtlasVote]) -> Result<LabelVolume> {
    let grid = check_votes(votes)?;
    let labels = (0..grid.len())
        .into_par_iter()
        .map(|idx| unanimous(votes, idx).unwrap_or_else(|| pick(&tally(votes, idx, None))))
        .collect();
    Ok(LabelVolume::from_parts_unchecked(grid.clone(), labels, merged_dictionary(votes)))
}

/// JLF weights from per-atlas residual vectors: M_ij = sgn(d)|d|^β with
/// d = ⟨e_i, e_j⟩, w = (M + αI)⁻¹·1 normalised to sum 1. Falls back to
/// uniform weights when the system is singular or the raw weights sum to 0.
pub fn jlf_weights(residuals: &[Vec<f64>], beta: f64, alpha: f64) -> Vec<f64> {
    let n = residuals.len();
    if n == 0 {
        return Vec::new();
    }
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let d: f64 = residuals[i].iter().zip(&residuals[j]).map(|(a, b)| a * b).sum();
            let v = d.signum() * d.abs().powf(beta);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m[(i, i)] += alpha;
    }
    let uniform = vec![1.0 / n as f64; n];
    let Some(w) = m.lu().solve(&DVector::from_element(n, 1.0)) else {
        return uniform;
    };
    let s: f64 = w.iter().sum();
    if !s.is_finite() || s.abs() < 1e-300 {
        return uniform;
    }
    w.iter().map(|x| x / s).collect()
}

/// Patch sampler over one volume with border-replicated coordinates.
struct Patches<'a> {
    data: &'a [f64],
    dims: [usize; 3],
    radius: usize,
}

impl Patches<'_> {
    fn len(&self) -> usize {
        (2 * self.radius + 1).pow(3)
    }

    /// Zero-mean, unit-variance patch centred at `c` written into `out`;
/// near-constant patches become all zeros.
    fn normalised(&self, c: [usize; 3], out: &mut [f64]) {
        let r = self.radius as i64;
        let d = self.dims;
        let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
        let mut t = 0;
        for dz in -r..=r {
            let z = clamp(c[2] as i64 + dz, d[2]);
            for dy in -r..=r {
                let y = clamp(c[1] as i64 + dy, d[1]);
                let row = d[0] * (y + d[1] * z);
                for dx in -r..=r {
                    out[t] = self.data[row + clamp(c[0] as i64 + dx, d[0])];
                    t += 1;
                }
            }
        }
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        let mut ss = 0.0;
        for v in out.iter_mut() {
            *v -= mean;
            ss += *v * *v;
        }
        let n = out.len() as f64;
        if ss / n <= FLAT_PATCH {
            out.fill(0.0);
        } else {
            let inv = (n / ss).sqrt();
            out.iter_mut().for_each(|v| *v *= inv);
        }
    }
}

/// Best-matching residual for one atlas: exhaustive scan of in-grid search
/// centres in z, y, x order; the first minimum wins.
fn best_residual(atlas: &Patches<'_>, target: &[f64], c: [usize; 3], search: usize, scratch: &mut [f64]) -> Vec<f64> {
    let d = atlas.dims;
    let s = search as i64;
    let mut best = f64::INFINITY;
    let mut best_patch = vec![0.0; target.len()];
    for dz in -s..=s {
        let z = c[2] as i64 + dz;
        if z < 0 || z >= d[2] as i64 {
            continue;
        }
        for dy in -s..=s {
            let y = c[1] as i64 + dy;
            if y < 0 || y >= d[1] as i64 {
                continue;
            }
            for dx in -s..=s {
                let x = c[0] as i64 + dx;
                if x < 0 || x >= d[0] as i64 {
                    continue;
                }
                atlas.normalised([x as usize, y as usize, z as usize], scratch);
                let ssd: f64 = scratch.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
                if ssd < best {
                    best = ssd;
                    best_patch.copy_from_slice(scratch);
                }
            }
        }
    }
    best_patch.iter_mut().zip(target).for_each(|(a, b)| *a -= b);
    best_patch
}

/// Joint label fusion. Weights come from intensity patches around each
/// voxel; labels are read at the voxel itself. Voxels where every atlas
/// agrees take that label directly.
pub fn joint_label_fusion(target: &Volume3D, votes: &[AtlasVote], params: &FusionParams) -> Result<LabelVolume> {
    let grid = check_votes(votes)?;
    if params.alpha <= 0.0 {
        return Err(Error::InvalidParameter("joint label fusion needs alpha > 0".into()));
    }
    FusionParams { mode: FusionMode::Jlf, ..params.clone() }.validate()?;
    grid.check_same(target.grid(), "fusion target")?;
    let dims = grid.dims();
    let tp = Patches {
        data: target.data(),
        dims,
        radius: params.patch_radius,
    };
    let aps: Vec<Patches<'_>> = votes
        .iter()
        .map(|v| Patches {
            data: v.image.data(),
            dims,
            radius: params.patch_radius,
        })
        .collect();
    let plen = tp.len();
    let labels = (0..grid.len())
        .into_par_iter()
        .map_init(
            || (vec![0.0; plen], vec![0.0; plen]),
            |(tbuf, scratch), idx| {
                if let Some(l) = unanimous(votes, idx) {
                    return l;
                }
                let c = grid.coords(idx);
                tp.normalised(c, tbuf);
                let residuals: Vec<Vec<f64>> = aps
                    .iter()
                    .map(|ap| best_residual(ap, tbuf, c, params.search_radius, scratch))
                    .collect();
                let w = jlf_weights(&residuals, params.beta, params.alpha);
                pick(&tally(votes, idx, Some(&w)))
            },
        )
        .collect();
    Ok(LabelVolume::from_parts_unchecked(grid.clone(), labels, merged_dictionary(votes)))
}

/// Dispatch on `params.mode` after validating the parameters.
pub fn fuse(target: &Volume3D, votes: &[AtlasVote], params: &FusionParams) -> Result<LabelVolume> {
    params.validate()?;
    match params.mode {
        FusionMode::Majority => majority_vote(votes),
        FusionMode::Jlf => joint_label_fusion(target, votes, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::axis_aligned([3, 1, 1], [1.0; 3], [0.0; 3]).unwrap()
    }

    fn vote(labels: [u16; 3], image: [f64; 3]) -> AtlasVote {
        let g = grid();
        let d = LabelDictionary::for_indices(labels);
        AtlasVote::new(
            "a",
            Volume3D::new(g.clone(), image.to_vec()).unwrap(),
            LabelVolume::new(g, labels.to_vec(), d).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn majority_counts_and_ties() {
        let v = [vote([5, 2, 2], [0.0; 3]), vote([5, 2, 7], [0.0; 3]), vote([5, 7, 7], [0.0; 3])];
        assert_eq!(majority_vote(&v).unwrap().labels(), &[5, 2, 7]);
        let four = [2u16, 7, 7, 2].map(|l| vote([l, 0, 0], [0.0; 3]));
        assert_eq!(majority_vote(&four).unwrap().labels()[0], 2);
        assert!(matches!(majority_vote(&[]), Err(Error::EmptyVoteSet)));
    }

    #[test]
    fn weights_hand_solved() {
        let w = jlf_weights(&[vec![2.0, 0.0], vec![0.0, 1.0]], 1.0, 0.0);
        assert!((w[0] - 0.2).abs() < 1e-12 && (w[1] - 0.8).abs() < 1e-12);
        let same = jlf_weights(&[vec![0.3, -0.1], vec![0.3, -0.1]], 2.0, 0.1);
        assert!((same[0] - 0.5).abs() < 1e-12);
        assert_eq!(jlf_weights(&[vec![0.4, 1.0]], 2.0, 0.1), vec![1.0]);
    }

    #[test]
    fn jlf_single_atlas_and_alpha_check() {
        let a = vote([1, 2, 0], [0.1, 0.5, 0.9]);
        let target = a.image.clone();
        let out = joint_label_fusion(&target, std::slice::from_ref(&a), &FusionParams::default()).unwrap();
        assert_eq!(out.labels(), a.labels.labels());
        let bad = FusionParams { alpha: 0.0, ..Default::default() };
        assert!(matches!(fuse(&target, &[a], &bad), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn jlf_prefers_matching_intensity() {
        // atlas 1 matches the target pattern, atlas 2 is inverted
        let target = Volume3D::new(grid(), vec![0.1, 0.5, 0.9]).unwrap();
        let good = vote([3, 3, 3], [0.1, 0.5, 0.9]);
        let bad = vote([4, 4, 4], [0.9, 0.5, 0.1]);
        let p = FusionParams { patch_radius: 1, search_radius: 0, ..Default::default() };
        let out = joint_label_fusion(&target, &[bad, good], &p).unwrap();
        assert_eq!(out.labels(), &[3, 3, 3]);
    }
}
