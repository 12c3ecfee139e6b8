//! Twelve-parameter affine registration by local-NCC gradient ascent.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::metric::{local_ncc_raw, local_ncc_with_gradient};
use super::params::{pyramid, RegistrationParams};
use super::transform::AffineTransform;
use crate::error::{Error, Result};
use crate::image::filter::gradient;
use crate::image::stats::det_sum_vec;
use crate::image::{trilinear, Volume3D};

/// Outcome of an affine registration. `transform` maps fixed-space world
/// points to moving-space world points.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineRegistration {
    pub transform: AffineTransform,
    /// Whether the step length shrank below tolerance before the
    /// iteration budget ran out at the finest level.
    pub converged: bool,
    pub initial_metric: f64,
    pub final_metric: f64,
}

/// Parameterisation: `q = L (p - c) + c + t` with `theta = [R·L (row-major), t]`.
/// Scaling the linear part by a radius `R` gives all twelve parameters mm units.
#[derive(Clone, Copy)]
struct Param {
    center: [f64; 3],
    radius: f64,
}

impl Param {
    fn transform(&self, theta: &[f64; 12]) -> AffineTransform {
        let l = Matrix3::from_row_slice(&theta[..9]) / self.radius;
        let c = Vector3::from(self.center);
        let t = Vector3::new(theta[9], theta[10], theta[11]);
        let trans = c + t - l * c;
        AffineTransform::from_parts(l, [trans[0], trans[1], trans[2]])
    }
}

struct Level<'a> {
    fixed: &'a Volume3D,
    moving: &'a Volume3D,
    grad: [Vec<f64>; 3],
    radius: usize,
}

impl Level<'_> {
    fn warp_positions(&self, t: &AffineTransform) -> Vec<[f64; 3]> {
        let fg = self.fixed.grid();
        let mg = self.moving.grid();
        (0..fg.len())
            .into_par_iter()
            .map(|idx| {
                let x = fg.coords(idx).map(|v| v as f64);
                mg.world_to_voxel(t.apply(fg.voxel_to_world(x)))
            })
            .collect()
    }

    fn metric(&self, t: &AffineTransform) -> f64 {
        let ys = self.warp_positions(t);
        let md = self.moving.data();
        let dims = self.moving.dims();
        let w: Vec<f64> = ys.par_iter().map(|y| trilinear(md, dims, *y)).collect();
        local_ncc_raw(self.fixed.data(), &w, self.fixed.dims(), self.radius)
    }

    fn metric_and_gradient(&self, p: &Param, theta: &[f64; 12]) -> (f64, [f64; 12]) {
        let t = p.transform(theta);
        let ys = self.warp_positions(&t);
        let md = self.moving.data();
        let mdims = self.moving.dims();
        let w: Vec<f64> = ys.par_iter().map(|y| trilinear(md, mdims, *y)).collect();
        let (value, dw) = local_ncc_with_gradient(self.fixed.data(), &w, self.fixed.dims(), self.radius);
        let fg = self.fixed.grid();
        let minv = self.moving.grid().inverse_affine().fixed_view::<3, 3>(0, 0).transpose();
        let grad = det_sum_vec::<12, _>(ys.len(), |idx, acc| {
            let g = dw[idx];
            if g == 0.0 {
                return;
            }
            let y = ys[idx];
            let gv = Vector3::new(
                trilinear(&self.grad[0], mdims, y),
                trilinear(&self.grad[1], mdims, y),
                trilinear(&self.grad[2], mdims, y),
            );
            let gw = minv * gv;
            let x = fg.coords(idx).map(|v| v as f64);
            let pw = fg.voxel_to_world(x);
            let rel = [
                (pw[0] - p.center[0]) / p.radius,
                (pw[1] - p.center[1]) / p.radius,
                (pw[2] - p.center[2]) / p.radius,
            ];
            for a in 0..3 {
                let s = g * gw[a];
                acc[3 * a] += s * rel[0];
                acc[3 * a + 1] += s * rel[1];
                acc[3 * a + 2] += s * rel[2];
                acc[9 + a] += s;
            }
        });
        (value, grad)
    }
}

fn check_non_constant(v: &Volume3D) -> Result<()> {
    if v.is_constant() {
        Err(Error::ConstantImage)
    } else {
        Ok(())
    }
}

/// Affine alignment of `moving` onto `fixed`, initialised by matching
/// centres of mass and refined coarse-to-fine.
pub fn register_affine(fixed: &Volume3D, moving: &Volume3D, params: &RegistrationParams) -> Result<AffineRegistration> {
    params.validate()?;
    check_non_constant(fixed)?;
    check_non_constant(moving)?;

    let cf = fixed.center_of_mass();
    let cm = moving.center_of_mass();
    let fg = fixed.grid();
    let radius = (0..3)
        .map(|a| (fg.dims()[a] as f64 - 1.0) * fg.spacing()[a] / 2.0)
        .sum::<f64>()
        / 3.0;
    let p = Param {
        center: cf,
        radius: radius.max(1.0),
    };
    let mut theta = [0.0; 12];
    theta[0] = p.radius;
    theta[4] = p.radius;
    theta[8] = p.radius;
    for a in 0..3 {
        theta[9 + a] = cm[a] - cf[a];
    }
    let init_theta = theta;

    let fixed_pyr = pyramid(fixed, params.levels);
    let moving_pyr = pyramid(moving, params.levels);
    let mut converged = false;

    for level in (0..params.levels).rev() {
        let f = &fixed_pyr[level];
        let m = &moving_pyr[level];
        let lvl = Level {
            fixed: f,
            moving: m,
            grad: gradient(m.data(), m.dims()),
            radius: params.ncc_radius,
        };
        let iters = params.affine_iterations[params.levels - 1 - level];
        let spacing = f.grid().spacing().iter().sum::<f64>() / 3.0;
        let max_step = 2.0 * spacing;
        let mut step = max_step;
        let min_step = 1e-3 * spacing;
        let (mut value, mut grad) = lvl.metric_and_gradient(&p, &theta);
        let mut level_converged = false;
        for _ in 0..iters {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                level_converged = true;
                break;
            }
            let mut trial = theta;
            for k in 0..12 {
                trial[k] += step * grad[k] / norm;
            }
            let (tv, tg) = lvl.metric_and_gradient(&p, &trial);
            if tv > value {
                theta = trial;
                value = tv;
                grad = tg;
                step = (step * 1.25).min(max_step);
            } else {
                step *= 0.5;
                if step < min_step {
                    level_converged = true;
                    break;
                }
            }
        }
        if level == 0 {
            converged = level_converged;
        }
    }

    let finest = Level {
        fixed,
        moving,
        grad: Default::default(),
        radius: params.ncc_radius,
    };
    let init_t = p.transform(&init_theta);
    let final_t = p.transform(&theta);
    let initial_metric = finest.metric(&init_t);
    let final_metric = finest.metric(&final_t);
    let (transform, final_metric) = if final_metric >= initial_metric {
        (final_t, final_metric)
    } else {
        (init_t, initial_metric)
    };
    if !transform.is_invertible() {
        return Err(Error::DegenerateAffine);
    }
    Ok(AffineRegistration {
        transform,
        converged,
        initial_metric,
        final_metric,
    })
}
