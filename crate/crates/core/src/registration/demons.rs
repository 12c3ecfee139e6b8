//! Log-domain demons: a stationary velocity field is accumulated from
//! smoothed demons forces and exponentiated by scaling and squaring.

use rayon::prelude::*;

use super::metric::local_ncc;
use super::params::{pyramid, DemonsNormalizer, RegistrationParams, SQUARINGS};
use super::transform::{warp_image, AffineTransform, DisplacementField, TransformChain};
use crate::error::{Error, Result};
use crate::image::filter::{gaussian_smooth, gradient};
use crate::image::stats::det_sum_by;
use crate::image::{trilinear, Grid, Interpolation, Volume3D};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffeomorphicRegistration {
    /// Fixed-grid field with the initial affine folded in; resolves
    /// fixed-space points to moving-space points.
    pub field: DisplacementField,
    pub initial_metric: f64,
    pub final_metric: f64,
    /// Smallest Jacobian determinant over interior voxels.
    pub min_jacobian: f64,
}

type Vec3Field = [Vec<f64>; 3];

#[inline]
fn clamped_sample(f: &Vec3Field, dims: [usize; 3], p: [f64; 3]) -> [f64; 3] {
    let q = [0, 1, 2].map(|a| p[a].clamp(0.0, (dims[a] - 1) as f64));
    [trilinear(&f[0], dims, q), trilinear(&f[1], dims, q), trilinear(&f[2], dims, q)]
}

fn split(v: Vec<[f64; 3]>) -> Vec3Field {
    let mut out: Vec3Field = [Vec::with_capacity(v.len()), Vec::with_capacity(v.len()), Vec::with_capacity(v.len())];
    for d in v {
        out[0].push(d[0]);
        out[1].push(d[1]);
        out[2].push(d[2]);
    }
    out
}

fn coords(idx: usize, dims: [usize; 3]) -> [f64; 3] {
    [
        (idx % dims[0]) as f64,
        ((idx / dims[0]) % dims[1]) as f64,
        (idx / (dims[0] * dims[1])) as f64,
    ]
}

/// `exp(v)` by scaling and squaring: `d = v / 2^n`, then `n` times
/// `d(x) ← d(x) + d(x + d(x))`.
fn exp_field(v: &Vec3Field, dims: [usize; 3]) -> Vec3Field {
    let scale = 1.0 / f64::from(1u32 << SQUARINGS);
    let mut d: Vec3Field = [0, 1, 2].map(|a| v[a].par_iter().map(|x| x * scale).collect());
    for _ in 0..SQUARINGS {
        let next: Vec<[f64; 3]> = (0..d[0].len())
            .into_par_iter()
            .map(|idx| {
                let x = coords(idx, dims);
                let own = [d[0][idx], d[1][idx], d[2][idx]];
                let q = clamped_sample(&d, dims, [x[0] + own[0], x[1] + own[1], x[2] + own[2]]);
                [own[0] + q[0], own[1] + q[1], own[2] + q[2]]
            })
            .collect();
        d = split(next);
    }
    d
}

/// Exponentiate a stationary velocity field (voxel units on its grid).
pub fn exponentiate(velocity: &DisplacementField) -> DisplacementField {
    let dims = velocity.grid().dims();
    let d = exp_field(velocity.components(), dims);
    DisplacementField::from_parts_unchecked(velocity.grid().clone(), d)
}

fn warp_by(m: &[f64], dims: [usize; 3], d: &Vec3Field) -> Vec<f64> {
    (0..m.len())
        .into_par_iter()
        .map(|idx| {
            let x = coords(idx, dims);
            trilinear(m, dims, [x[0] + d[0][idx], x[1] + d[1][idx], x[2] + d[2][idx]])
        })
        .collect()
}

fn smooth_field(f: &Vec3Field, dims: [usize; 3], sigma_vox: [f64; 3]) -> Vec3Field {
    if sigma_vox.iter().all(|s| *s <= 0.0) {
        return f.clone();
    }
    [0, 1, 2].map(|a| gaussian_smooth(&f[a], dims, sigma_vox))
}

fn upsample(v: &Vec3Field, coarse: [usize; 3], fine: [usize; 3]) -> Vec3Field {
    let n = fine[0] * fine[1] * fine[2];
    let up: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let x = coords(idx, fine);
            let c = clamped_sample(v, coarse, [x[0] / 2.0, x[1] / 2.0, x[2] / 2.0]);
            [2.0 * c[0], 2.0 * c[1], 2.0 * c[2]]
        })
        .collect();
    split(up)
}

fn demons_level(
    fixed: &[f64],
    moving: &[f64],
    grid: &Grid,
    mut v: Vec3Field,
    iterations: usize,
    params: &RegistrationParams,
) -> Vec3Field {
    let dims = grid.dims();
    let sp = grid.spacing();
    let fluid = [0, 1, 2].map(|a| params.fluid_sigma_mm / sp[a]);
    let diffusion = [0, 1, 2].map(|a| params.diffusion_sigma_mm / sp[a]);
    let n = fixed.len();
    for _ in 0..iterations {
        let d = if params.velocity_field { exp_field(&v, dims) } else { v.clone() };
        let warped = warp_by(moving, dims, &d);
        let g = gradient(&warped, dims);
        let mse = det_sum_by(n, |i| (fixed[i] - warped[i]).powi(2)) / n as f64;
        if !(mse > 1e-20) {
            break;
        }
        let kappa = match params.normalizer {
            DemonsNormalizer::UnitVoxel => 1.0,
            DemonsNormalizer::MeanSquaredDifference => mse,
        };
        let cap = params.max_update;
        let u: Vec<[f64; 3]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let diff = fixed[i] - warped[i];
                let gv = [g[0][i], g[1][i], g[2][i]];
                let g2 = gv[0] * gv[0] + gv[1] * gv[1] + gv[2] * gv[2];
                let denom = g2 + diff * diff / kappa;
                if denom < 1e-12 {
                    return [0.0; 3];
                }
                let s = params.demons_step * diff / denom;
                let mut u = [s * gv[0], s * gv[1], s * gv[2]];
                let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
                if norm > cap {
                    let r = cap / norm;
                    u.iter_mut().for_each(|x| *x *= r);
                }
                u
            })
            .collect();
        let u = smooth_field(&split(u), dims, fluid);
        for a in 0..3 {
            v[a].par_iter_mut().zip(u[a].par_iter()).for_each(|(x, y)| *x += y);
        }
        v = smooth_field(&v, dims, diffusion);
    }
    v
}

/// Non-linear registration of `moving` onto `fixed`, starting from `init`
/// (fixed world → moving world).
pub fn register_diffeomorphic(
    fixed: &Volume3D,
    moving: &Volume3D,
    init: &AffineTransform,
    params: &RegistrationParams,
) -> Result<DiffeomorphicRegistration> {
    params.validate()?;
    if fixed.is_constant() || moving.is_constant() {
        return Err(Error::ConstantImage);
    }
    let init_chain = TransformChain::from_affine(*init);
    let moving_aff = warp_image(moving, &init_chain, fixed.grid(), Interpolation::Trilinear);

    let fixed_pyr = pyramid(fixed, params.levels);
    let moving_pyr = pyramid(&moving_aff, params.levels);

    let coarsest = &fixed_pyr[params.levels - 1];
    let mut v: Vec3Field = [0, 1, 2].map(|_| vec![0.0; coarsest.grid().len()]);
    let mut prev_dims = coarsest.dims();
    for level in (0..params.levels).rev() {
        let f = &fixed_pyr[level];
        let m = &moving_pyr[level];
        if f.dims() != prev_dims {
            v = upsample(&v, prev_dims, f.dims());
            prev_dims = f.dims();
        }
        let iters = params.demons_iterations[params.levels - 1 - level];
        v = demons_level(f.data(), m.data(), f.grid(), v, iters, params);
    }

    let dims = fixed.dims();
    let d = if params.velocity_field { exp_field(&v, dims) } else { v };
    let core = DisplacementField::from_parts_unchecked(fixed.grid().clone(), d);
    let candidate = core.followed_by_affine(init);
    let baseline = DisplacementField::from_affine(fixed.grid().clone(), init);

    let initial_metric = local_ncc(fixed, &moving_aff, params.ncc_radius)?;
    let warped = warp_image(
        moving,
        &TransformChain::from_field(candidate.clone()),
        fixed.grid(),
        Interpolation::Trilinear,
    );
    let final_metric = local_ncc(fixed, &warped, params.ncc_radius)?;
    let (field, final_metric) = if final_metric >= initial_metric {
        (candidate, final_metric)
    } else {
        (baseline, initial_metric)
    };
    let min_jacobian = field
        .jacobian_determinants()
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    Ok(DiffeomorphicRegistration {
        field,
        initial_metric,
        final_metric,
        min_jacobian,
    })
}
