use nucleiseg::hips::fit_points;
use proptest::prelude::*;

/// Cubic through four points by Lagrange's formula, expanded to monomial
/// coefficients.
fn lagrange_cubic(xs: &[f64; 4], ys: &[f64; 4]) -> [f64; 4] {
    let mut c = [0.0; 4];
    for i in 0..4 {
        // product of (x - xj) over j != i, as monomial coefficients
        let mut p = vec![1.0];
        let mut denom = 1.0;
        for j in (0..4).filter(|&j| j != i) {
            let mut q = vec![0.0; p.len() + 1];
            for (k, a) in p.iter().enumerate() {
                q[k] -= a * xs[j];
                q[k + 1] += a;
            }
            p = q;
            denom *= xs[i] - xs[j];
        }
        for k in 0..4 {
            c[k] += ys[i] * p[k] / denom;
        }
    }
    c
}

proptest! {
    #[test]
    fn cubic_through_four_landmarks_interpolates(
        gaps in [0.05f64..0.3, 0.05f64..0.3, 0.05f64..0.3],
        start in 0.0f64..0.1,
        ys in [0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0],
    ) {
        let xs = [start, start + gaps[0], start + gaps[0] + gaps[1], start + gaps[0] + gaps[1] + gaps[2]];
        let p = fit_points(&xs, &ys, 3).unwrap();
        prop_assert!(!p.fell_back);
        prop_assert!(p.residual < 1e-9);
        for (x, y) in xs.iter().zip(&ys) {
            prop_assert!((p.raw(*x) - y).abs() < 1e-9);
        }
        let oracle = lagrange_cubic(&xs, &ys);
        for k in 0..4 {
            prop_assert!((p.coefficients()[k] - oracle[k]).abs() < 1e-6 * (1.0 + oracle[k].abs()));
        }
    }
}
