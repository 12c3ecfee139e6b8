use rayon::prelude::*;

const SUM_CHUNK: usize = 4096;

/// Sum with a fixed reduction tree: fixed-size chunks summed sequentially,
/// then the chunk sums in order. Bit-identical for any thread count.
pub fn det_sum(values: &[f64]) -> f64 {
    if values.len() <= SUM_CHUNK {
        return values.iter().sum();
    }
    let partial: Vec<f64> = values
        .par_chunks(SUM_CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect();
    partial.iter().sum()
}

/// Deterministic sum of `f(i)` over `0..n`.
pub fn det_sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(SUM_CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * SUM_CHUNK;
            let hi = (lo + SUM_CHUNK).min(n);
            (lo..hi).map(&f).sum::<f64>()
        })
        .collect();
    partial.iter().sum()
}

/// Deterministic sum of fixed-width vectors produced by `f(i)`.
pub fn det_sum_vec<const N: usize, F>(n: usize, f: F) -> [f64; N]
where
    F: Fn(usize, &mut [f64; N]) + Sync,
{
    let chunks = n.div_ceil(SUM_CHUNK);
    let partial: Vec<[f64; N]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * SUM_CHUNK;
            let hi = (lo + SUM_CHUNK).min(n);
            let mut acc = [0.0; N];
            for i in lo..hi {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = [0.0; N];
    for p in &partial {
        for k in 0..N {
            out[k] += p[k];
        }
    }
    out
}

/// Nearest-rank percentiles (`p` in 0..=100) of `values`, which is sorted
/// in place. Index is `round(p/100 * (n-1))`.
pub fn percentiles_sorted(values: &mut [f64], ps: &[f64]) -> Vec<f64> {
    values.par_sort_unstable_by(|a, b| a.total_cmp(b));
    ps.iter().map(|&p| rank_value(values, p)).collect()
}

pub(crate) fn rank_value(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let idx = ((p / 100.0) * (n as f64 - 1.0)).round() as usize;
    sorted[idx.min(n - 1)]
}

pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    percentiles_sorted(&mut v, &[p])[0]
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    det_sum(values) / values.len() as f64
}

/// Pearson correlation of two equally long samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ma = mean(a);
    let mb = mean(b);
    let sab = det_sum_by(a.len(), |i| (a[i] - ma) * (b[i] - mb));
    let saa = det_sum_by(a.len(), |i| (a[i] - ma).powi(2));
    let sbb = det_sum_by(b.len(), |i| (b[i] - mb).powi(2));
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}
