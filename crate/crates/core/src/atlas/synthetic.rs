//! Seeded digital-phantom atlases for tests and demonstrations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::phantom::{render, Frame, RenderOptions, SmoothWarp};
use super::{AtlasBundle, AtlasPrior};
use crate::error::{Error, Result};
use crate::image::{robust_normalize, BoundingBox, Grid, Volume3D, DEFAULT_PERCENTILES};
use crate::labels::LabelDictionary;
use crate::registration::DisplacementField;

use super::template::target_landmarks_for;

/// Per-prior variation. Lengths are fractions of the phantom frame scale
/// (half the smallest grid extent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticOptions {
    pub max_rotation_deg: f64,
    pub max_shift: f64,
    pub max_scale: f64,
    pub wave_amplitude: f64,
    pub min_wavelength: f64,
    pub noise_sigma: f64,
    /// Gain drawn uniformly from `1 ± gain_jitter`.
    pub gain_jitter: f64,
    /// Template crop box margin around the canonical labels, in voxels.
    pub crop_margin: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            max_rotation_deg: 3.0,
            max_shift: 0.04,
            max_scale: 0.03,
            wave_amplitude: 0.03,
            min_wavelength: 0.8,
            noise_sigma: 0.01,
            gain_jitter: 0.05,
            crop_margin: 2,
        }
    }
}

/// A synthetic bundle plus the per-prior T1 renderings and the true
/// subject→canonical deformations used to draw each prior.
#[derive(Debug, Clone)]
pub struct SyntheticAtlas {
    pub bundle: AtlasBundle,
    pub t1: Vec<Volume3D>,
    pub deformations: Vec<SmoothWarp>,
}

impl SyntheticAtlas {
    /// Deformation `i` sampled as a voxel-unit field on the bundle grid.
    pub fn deformation_field(&self, i: usize) -> DisplacementField {
        let g = self.bundle.template.grid().clone();
        let w = &self.deformations[i];
        let gg = g.clone();
        DisplacementField::from_fn(g, move |c| {
            let x = c.map(|v| v as f64);
            let y = gg.world_to_voxel(w.apply(gg.voxel_to_world(x)));
            [y[0] - x[0], y[1] - x[1], y[2] - x[2]]
        })
    }
}

/// `n` priors drawn from the canonical phantom under independent smooth
/// random deformations, gain changes and noise. The template is the
/// canonical WMn rendering (the group's mean shape by construction) with
/// noise reduced by √n; warps are not precomputed.
pub fn build_synthetic_atlas(n: usize, grid: &Grid, seed: u64) -> Result<SyntheticAtlas> {
    build_synthetic_atlas_with(n, grid, seed, &SyntheticOptions::default())
}

pub fn build_synthetic_atlas_with(n: usize, grid: &Grid, seed: u64, opts: &SyntheticOptions) -> Result<SyntheticAtlas> {
    if n == 0 {
        return Err(Error::EmptyPriorSet);
    }
    let (plo, phi) = DEFAULT_PERCENTILES;
    let frame = Frame::for_grid(grid);
    let s = frame.scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);


    let mut priors = Vec::with_capacity(n);
    let mut t1 = Vec::with_capacity(n);
    let mut deformations = Vec::with_capacity(n);
    for i in 0..n {
        let warp = SmoothWarp::random(
            &mut rng,
            frame.center,
            opts.max_rotation_deg,
            opts.max_shift * s,
            opts.max_scale,
            opts.wave_amplitude * s,
            opts.min_wavelength * s,
        );
        let gain = 1.0 + rng.random_range(-opts.gain_jitter..=opts.gain_jitter);
        let noise_seed: u64 = rng.random();
        let ropts = RenderOptions {
            noise_sigma: opts.noise_sigma,
            gain,
            ..Default::default()
        };
        let w = warp.clone();
        let ph = render(grid, &frame, &move |p| w.apply(p), &ropts, noise_seed);
        let id = format!("p{i:02}");
        priors.push(AtlasPrior::new(
            id,
            robust_normalize(&ph.wmn, plo, phi)?,
            ph.labels_left,
            ph.labels_right,
        )?);
        t1.push(robust_normalize(&ph.t1, plo, phi)?);
        deformations.push(warp);
    }

    // Mean-shape template carrying the residual noise of an n-subject average.
    let topts = RenderOptions {
        noise_sigma: opts.noise_sigma / (n as f64).sqrt(),
        ..Default::default()
    };
    let canonical = render(grid, &frame, &|p| p, &topts, rng.random());
    let template = robust_normalize(&canonical.wmn, plo, phi)?;

    let boxes = [&canonical.labels_left, &canonical.labels_right].map(|l| l.foreground_box());
    let [Some(a), Some(b)] = boxes else {
        return Err(Error::InvalidGeometry(format!("grid {:?} too small for the phantom", grid.dims())));
    };
    let hull = BoundingBox::new([0, 1, 2].map(|k| a.min[k].min(b.min[k])), [0, 1, 2].map(|k| a.max[k].max(b.max[k])));
    let crop_box = hull.dilated([opts.crop_margin as i64; 3]).clamped(grid)?;
    let target_landmarks = target_landmarks_for(&template, &crop_box)?;
    let bundle = AtlasBundle::new(template, crop_box, priors, LabelDictionary::standard(), target_landmarks)?;
    Ok(SyntheticAtlas {
        bundle,
        t1,
        deformations,
    })
}
