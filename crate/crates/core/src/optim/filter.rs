//! Cone-weighted radial filter over a regular element grid.

use rayon::prelude::*;

/// Precomputed neighbourhoods with weights `max(0, r_min - dist)`.
///
/// Elements are indexed `e = j * nx + i`, matching [`crate::fea::MacroMesh`].
#[derive(Debug, Clone)]
pub struct RadialFilter {
    nx: usize,
    ny: usize,
    r_min: f64,
    /// Per element: (neighbour, w / Σw).
    rows: Vec<Vec<(usize, f64)>>,
}

impl RadialFilter {
    pub fn new(nx: usize, ny: usize, r_min: f64) -> Self {
        let reach = r_min.max(0.0).ceil() as isize;
        let rows = (0..nx * ny)
            .map(|e| {
                let (i, j) = ((e % nx) as isize, (e / nx) as isize);
                let mut row = Vec::new();
                for dj in -reach..=reach {
                    for di in -reach..=reach {
                        let (p, q) = (i + di, j + dj);
                        if p < 0 || q < 0 || p >= nx as isize || q >= ny as isize {
                            continue;
                        }
                        let dist = ((di * di + dj * dj) as f64).sqrt();
                        let w = (r_min - dist).max(0.0);
                        if w > 0.0 {
                            row.push((q as usize * nx + p as usize, w));
                        }
                    }
                }
                // r_min <= 1 leaves only the element itself
                if row.is_empty() {
                    row.push((e, 1.0));
                }
                let total: f64 = row.iter().map(|r| r.1).sum();
                row.iter_mut().for_each(|r| r.1 /= total);
                row
            })
            .collect();
        Self {
            nx,
            ny,
            r_min,
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    /// Chain weights `∂f̂_e/∂f_i` for element `e`.
    pub fn weights(&self, e: usize) -> &[(usize, f64)] {
        &self.rows[e]
    }

    pub fn apply(&self, field: &[f64]) -> Vec<f64> {
        assert_eq!(field.len(), self.len(), "field length");
        self.rows
            .par_iter()
            .map(|row| row.iter().map(|&(i, w)| w * field[i]).sum())
            .collect()
    }

    /// Maps a gradient with respect to the filtered field back to the raw one.
    pub fn backprop(&self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.len(), "gradient length");
        let mut out = vec![0.0; self.len()];
        for (e, row) in self.rows.iter().enumerate() {
            for &(i, w) in row {
                out[i] += w * grad[e];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_field_is_preserved() {
        let f = RadialFilter::new(7, 5, 2.5);
        let out = f.apply(&vec![0.37; 35]);
        assert!(out.iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn small_radius_is_identity() {
        for r in [0.0, 0.5, 1.0] {
            let f = RadialFilter::new(4, 3, r);
            let x: Vec<f64> = (0..12).map(|k| k as f64 * 0.1).collect();
            assert_eq!(f.apply(&x), x);
        }
    }

    #[test]
    fn spike_spreads_with_cone_weights() {
        // interior element of a 5x5 grid, r_min = 1.5: self weight 1.5, four
        // edge neighbours 0.5 and four diagonal neighbours 1.5 - √2
        let f = RadialFilter::new(5, 5, 1.5);
        let mut x = vec![0.0; 25];
        x[12] = 1.0;
        let y = f.apply(&x);
        let d = 1.5 - 2f64.sqrt();
        let interior = 1.5 + 4.0 * 0.5 + 4.0 * d;
        assert!((y[12] - 1.5 / interior).abs() < 1e-15);
        // element 7 (2,1) is interior too
        assert!((y[7] - 0.5 / interior).abs() < 1e-15);
        assert!((y[6] - d / interior).abs() < 1e-15);
        assert_eq!(y[2], 0.0);
    }

    proptest! {
        #[test]
        fn backprop_is_the_adjoint(
            x in proptest::collection::vec(-1.0f64..1.0, 24),
            g in proptest::collection::vec(-1.0f64..1.0, 24),
            r in 0.5f64..3.5,
        ) {
            let f = RadialFilter::new(6, 4, r);
            let lhs: f64 = f.apply(&x).iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = f.backprop(&g).iter().zip(&x).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
