//! Separable filters on x-fastest 3D buffers.

use rayon::prelude::*;

fn strides(dims: [usize; 3]) -> [usize; 3] {
    [1, dims[0], dims[0] * dims[1]]
}

/// Correlate every line along `axis` with `kernel` (centred, odd length).
/// Taps falling outside the grid are dropped and, if `normalize`, the
/// remaining weights renormalised.
fn convolve_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64], normalize: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let stride = strides(dims)[axis];
    let n_axis = dims[axis] as i64;
    let nx = dims[0];
    let ny = dims[1];
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(nx).enumerate().for_each(|(row, out_row)| {
        let j = row % ny;
        let k = row / ny;
        let base = nx * (j + ny * k);
        for (i, o) in out_row.iter_mut().enumerate() {
            let idx = base + i;
            let pos = [i, j, k][axis] as i64;
            let lo = (-r).max(-pos);
            let hi = r.min(n_axis - 1 - pos);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for t in lo..=hi {
                let w = kernel[(t + r) as usize];
                let src = (idx as i64 + t * stride as i64) as usize;
                acc += w * data[src];
                wsum += w;
            }
            *o = if normalize && wsum > 0.0 { acc / wsum } else { acc };
        }
    });
    out
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Gaussian smoothing with per-axis sigma in voxels.
pub fn gaussian_smooth(data: &[f64], dims: [usize; 3], sigma_vox: [f64; 3]) -> Vec<f64> {
    let mut cur = data.to_vec();
    for axis in 0..3 {
        if sigma_vox[axis] > 0.0 && dims[axis] > 1 {
            let k = gaussian_kernel(sigma_vox[axis]);
            cur = convolve_axis(&cur, dims, axis, &k, true);
        }
    }
    cur
}

/// Windowed sums over a (2r+1)³ box truncated at the grid border.
pub fn box_sum(data: &[f64], dims: [usize; 3], radius: usize) -> Vec<f64> {
    let k = vec![1.0; 2 * radius + 1];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        cur = convolve_axis(&cur, dims, axis, &k, false);
    }
    cur
}

/// Number of in-grid voxels in each truncated box window.
pub fn box_count(dims: [usize; 3], radius: usize) -> Vec<f64> {
    let per_axis = |n: usize, p: usize| -> f64 {
        let lo = p.saturating_sub(radius);
        let hi = (p + radius).min(n - 1);
        (hi - lo + 1) as f64
    };
    let len = dims[0] * dims[1] * dims[2];
    (0..len)
        .into_par_iter()
        .map(|idx| {
            let i = idx % dims[0];
            let j = (idx / dims[0]) % dims[1];
            let k = idx / (dims[0] * dims[1]);
            per_axis(dims[0], i) * per_axis(dims[1], j) * per_axis(dims[2], k)
        })
        .collect()
}

/// Central-difference gradient in voxel units (one-sided at the border).
pub fn gradient(data: &[f64], dims: [usize; 3]) -> [Vec<f64>; 3] {
    let st = strides(dims);
    let mut out: [Vec<f64>; 3] = Default::default();
    for axis in 0..3 {
        let n = dims[axis];
        let s = st[axis];
        out[axis] = (0..data.len())
            .into_par_iter()
            .map(|idx| {
                if n < 2 {
                    return 0.0;
                }
                let pos = (idx / s) % n;
                if pos == 0 {
                    data[idx + s] - data[idx]
                } else if pos == n - 1 {
                    data[idx] - data[idx - s]
                } else {
                    0.5 * (data[idx + s] - data[idx - s])
                }
            })
            .collect();
    }
    out
}

/// Smooth with sigma 1 voxel and keep every second voxel.
pub fn downsample2(data: &[f64], dims: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let smooth = gaussian_smooth(data, dims, [1.0; 3]);
    let nd = dims.map(|d| d.div_ceil(2));
    let out = (0..nd[0] * nd[1] * nd[2])
        .into_par_iter()
        .map(|idx| {
            let i = idx % nd[0];
            let j = (idx / nd[0]) % nd[1];
            let k = idx / (nd[0] * nd[1]);
            smooth[2 * i + dims[0] * (2 * j + dims[1] * 2 * k)]
        })
        .collect();
    (out, nd)
}
