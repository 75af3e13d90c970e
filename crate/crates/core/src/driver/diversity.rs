//! Log-determinant diversity penalty over the class weight vectors.

use nalgebra::DMatrix;

/// Diagonal jitter that keeps the kernel invertible when classes coincide.
pub const JITTER: f64 = 1e-8;

fn kernel(c: &[Vec<f64>]) -> DMatrix<f64> {
    let m = c.len();
    DMatrix::from_fn(m, m, |i, j| {
        let d2: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| (a - b).powi(2)).sum();
        (-0.5 * d2).exp()
    })
}

/// `f = -log det(L + eps I)` with `L_ij = exp(-|c_i - c_j|^2 / 2)`, and
/// `df/dc_i = 2 sum_j G_ij L_ij (c_i - c_j)` where `G = (L + eps I)^-1`.
pub fn diversity_penalty(c: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let m = c.len();
    let l = kernel(c);
    let shifted = &l + DMatrix::identity(m, m) * JITTER;
    let chol = shifted
        .cholesky()
        .expect("jittered Gaussian kernel is positive definite");
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let g = chol.inverse();
    let grad = (0..m)
        .map(|i| {
            let mut gi = vec![0.0; c[i].len()];
            for j in 0..m {
                let w = 2.0 * g[(i, j)] * l[(i, j)];
                for (k, slot) in gi.iter_mut().enumerate() {
                    *slot += w * (c[i][k] - c[j][k]);
                }
            }
            gi
        })
        .collect();
    (-logdet, grad)
}

/// Smallest pairwise distance between class vectors (infinite for one class).
pub fn min_pairwise_distance(c: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            let d: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| (a - b).powi(2)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_class_is_near_zero() {
        let (f, g) = diversity_penalty(&[vec![0.3, 0.7]]);
        assert!((f + (1.0f64 + JITTER).ln()).abs() < 1e-15);
        assert!(g[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_orthogonal_classes() {
        let (f, _) = diversity_penalty(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let exact = -(1.0 - (-2.0f64).exp()).ln();
        assert!((exact - 0.145413).abs() < 1e-6);
        assert!((f - exact).abs() < 1e-7);
    }

    #[test]
    fn coincident_classes_are_finite_and_large() {
        let (f, g) = diversity_penalty(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(f.is_finite() && f > 15.0);
        assert!(g.iter().flatten().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(
            flat in proptest::collection::vec(0.0f64..1.0, 6),
        ) {
            let c: Vec<Vec<f64>> = flat.chunks(2).map(|s| s.to_vec()).collect();
            prop_assume!(min_pairwise_distance(&c) > 0.2);
            let (_, g) = diversity_penalty(&c);
            let h = 1e-5;
            let (mut err, mut scale) = (0.0f64, 0.0f64);
            for i in 0..3 {
                for k in 0..2 {
                    let mut cp = c.clone();
                    cp[i][k] += h;
                    let mut cm = c.clone();
                    cm[i][k] -= h;
                    let fd = (diversity_penalty(&cp).0 - diversity_penalty(&cm).0) / (2.0 * h);
                    err = err.max((fd - g[i][k]).abs());
                    scale = scale.max(g[i][k].abs());
                }
            }
            prop_assert!(err <= 1e-6 * scale, "max error {err} against gradient scale {scale}");
        }
    }
}
