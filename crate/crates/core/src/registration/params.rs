use crate::error::{Error, Result};
use crate::image::filter::downsample2;
use crate::image::Volume3D;

/// Normaliser κ in the demons denominator `|∇|² + diff²/κ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemonsNormalizer {
    /// κ = 1 voxel²: each raw update is at most half a voxel, independent of
    /// intensity scale.
    UnitVoxel,
    /// κ = mean squared intensity difference at the start of each iteration.
    MeanSquaredDifference,
}

/// Registration hyperparameters. Per-level iteration lists run from the
/// coarsest level to the finest.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationParams {
    /// Pyramid levels, each halving resolution.
    pub levels: usize,
    pub affine_iterations: Vec<usize>,
    pub demons_iterations: Vec<usize>,
    /// Local NCC window radius in voxels.
    pub ncc_radius: usize,
    pub normalizer: DemonsNormalizer,
    /// Multiplier on the demons force.
    pub demons_step: f64,
    /// Per-voxel cap on one demons update, in voxels.
    pub max_update: f64,
    /// Gaussian sigma (mm) applied to each update field.
    pub fluid_sigma_mm: f64,
    /// Gaussian sigma (mm) applied to the accumulated velocity field.
    pub diffusion_sigma_mm: f64,
    /// Accumulate updates in a stationary velocity field and exponentiate
    /// (diffeomorphic); otherwise add to the displacement directly.
    pub velocity_field: bool,
}

/// Squarings used when exponentiating a velocity field.
pub const SQUARINGS: u32 = 6;

impl Default for RegistrationParams {
    fn default() -> Self {
        RegistrationParams {
            levels: 3,
            affine_iterations: vec![150, 100, 60],
            demons_iterations: vec![80, 100, 100],
            ncc_radius: 2,
            normalizer: DemonsNormalizer::UnitVoxel,
            demons_step: 4.0,
            max_update: 1.0,
            fluid_sigma_mm: 1.0,
            diffusion_sigma_mm: 1.5,
            velocity_field: true,
        }
    }
}

impl RegistrationParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidParameter("levels must be >= 1".into()));
        }
        if self.affine_iterations.len() != self.levels || self.demons_iterations.len() != self.levels {
            return Err(Error::InvalidParameter(format!(
                "iteration lists must have one entry per level ({})",
                self.levels
            )));
        }
        if !(self.fluid_sigma_mm >= 0.0) || !(self.diffusion_sigma_mm >= 0.0) {
            return Err(Error::InvalidParameter("smoothing sigmas must be >= 0".into()));
        }
        if !(self.demons_step > 0.0) || !(self.max_update > 0.0) {
            return Err(Error::InvalidParameter("demons step and update cap must be > 0".into()));
        }
        Ok(())
    }

    /// Same schedule with every demons level set to `n` iterations.
    pub fn with_demons_iterations(mut self, n: usize) -> Self {
        self.demons_iterations = vec![n; self.levels];
        self
    }

    /// Render as `key value` lines for provenance files.
    pub fn describe(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("registration.levels".into(), self.levels.to_string()),
            ("registration.affine_iterations".into(), list(&self.affine_iterations)),
            ("registration.demons_iterations".into(), list(&self.demons_iterations)),
            ("registration.ncc_radius".into(), self.ncc_radius.to_string()),
            ("registration.normalizer".into(), format!("{:?}", self.normalizer)),
            ("registration.demons_step".into(), self.demons_step.to_string()),
            ("registration.max_update".into(), self.max_update.to_string()),
            ("registration.fluid_sigma_mm".into(), self.fluid_sigma_mm.to_string()),
            ("registration.diffusion_sigma_mm".into(), self.diffusion_sigma_mm.to_string()),
            ("registration.velocity_field".into(), self.velocity_field.to_string()),
        ]
    }
}

/// Gaussian pyramid, finest level first.
pub(crate) fn pyramid(volume: &Volume3D, levels: usize) -> Vec<Volume3D> {
    let mut out = vec![volume.clone()];
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let (data, _) = downsample2(prev.data(), prev.dims());
        let grid = prev.grid().downsampled();
        out.push(Volume3D::from_parts_unchecked(grid, data));
    }
    out
}
