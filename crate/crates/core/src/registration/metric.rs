//! Local normalised cross-correlation.

use rayon::prelude::*;

use crate::error::Result;
use crate::image::filter::{box_count, box_sum};
use crate::image::stats::det_sum;
use crate::image::Volume3D;

const VAR_EPS: f64 = 1e-5;

struct Windows {
    count: Vec<f64>,
    sf: Vec<f64>,
    sj: Vec<f64>,
    sff: Vec<f64>,
    sjj: Vec<f64>,
    sfj: Vec<f64>,
}

fn windows(fixed: &[f64], warped: &[f64], dims: [usize; 3], radius: usize) -> Windows {
    let ff: Vec<f64> = fixed.par_iter().map(|v| v * v).collect();
    let jj: Vec<f64> = warped.par_iter().map(|v| v * v).collect();
    let fj: Vec<f64> = fixed.par_iter().zip(warped.par_iter()).map(|(a, b)| a * b).collect();
    Windows {
        count: box_count(dims, radius),
        sf: box_sum(fixed, dims, radius),
        sj: box_sum(warped, dims, radius),
        sff: box_sum(&ff, dims, radius),
        sjj: box_sum(&jj, dims, radius),
        sfj: box_sum(&fj, dims, radius),
    }
}

impl Windows {
    /// Centred second moments (A = var F, B = var J, C = cov) times count.
    #[inline]
    fn moments(&self, i: usize) -> (f64, f64, f64, f64, f64) {
        let n = self.count[i];
        let mf = self.sf[i] / n;
        let mj = self.sj[i] / n;
        let a = self.sff[i] - self.sf[i] * mf;
        let b = self.sjj[i] - self.sj[i] * mj;
        let c = self.sfj[i] - self.sf[i] * mj;
        (a, b, c, mf, mj)
    }
}

#[inline]
fn cc(a: f64, b: f64, c: f64) -> f64 {
    if a > VAR_EPS && b > VAR_EPS {
        (c * c / (a * b)).min(1.0)
    } else {
        0.0
    }
}

/// Mean over voxels of the squared local correlation coefficient in
/// (2r+1)³ windows. Windows with (near-)zero variance contribute 0.
pub fn local_ncc_raw(fixed: &[f64], warped: &[f64], dims: [usize; 3], radius: usize) -> f64 {
    let w = windows(fixed, warped, dims, radius);
    let vals: Vec<f64> = (0..fixed.len())
        .into_par_iter()
        .map(|i| {
            let (a, b, c, _, _) = w.moments(i);
            cc(a, b, c)
        })
        .collect();
    det_sum(&vals) / fixed.len() as f64
}

pub fn local_ncc(fixed: &Volume3D, warped: &Volume3D, radius: usize) -> Result<f64> {
    fixed.grid().check_same(warped.grid(), "local NCC")?;
    Ok(local_ncc_raw(fixed.data(), warped.data(), fixed.dims(), radius))
}

/// Metric value and its derivative with respect to each warped voxel
/// (the usual local-window approximation holding window statistics fixed).
pub(crate) fn local_ncc_with_gradient(
    fixed: &[f64],
    warped: &[f64],
    dims: [usize; 3],
    radius: usize,
) -> (f64, Vec<f64>) {
    let w = windows(fixed, warped, dims, radius);
    let n_total = fixed.len() as f64;
    let pairs: Vec<(f64, f64)> = (0..fixed.len())
        .into_par_iter()
        .map(|i| {
            let (a, b, c, mf, mj) = w.moments(i);
            if a > VAR_EPS && b > VAR_EPS {
                let val = (c * c / (a * b)).min(1.0);
                let g = 2.0 * c / (a * b) * ((fixed[i] - mf) - c / b * (warped[i] - mj));
                (val, g / n_total)
            } else {
                (0.0, 0.0)
            }
        })
        .collect();
    let vals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let grads = pairs.into_iter().map(|p| p.1).collect();
    (det_sum(&vals) / n_total, grads)
}
