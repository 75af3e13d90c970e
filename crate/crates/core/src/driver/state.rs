//! Design variables of the two-scale problem.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// `(D - 1) M` class weights, `M - 1` distribution fields and one volume and
/// one macro density field over `n_el` elements.
pub fn variable_count(d: usize, m: usize, n_el: usize) -> usize {
    (d - 1) * m + (m + 1) * n_el
}

/// Free weights that make all `n` simplex entries equal, for both the class
/// weights and the distribution fields.
pub fn equal_share_weights(n: usize) -> Vec<f64> {
    (1..n)
        .map(|k| (n - k) as f64 / (n - k + 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignState {
    pub nx: usize,
    pub ny: usize,
    pub n_basis: usize,
    /// Class weights `c^(m)`, `M x (D - 1)`.
    pub c: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    /// Distribution fields `xi^(m)`, `(M - 1) x N`.
    pub xi: Vec<Vec<f64>>,
    /// Macro densities, `1` or `X_MIN`.
    pub x: Vec<f64>,
}

impl DesignState {
    /// Equal classes nudged apart by a seeded perturbation of size `perturb`,
    /// equal class shares everywhere and a solid macro domain.
    pub fn initial(
        nx: usize,
        ny: usize,
        d: usize,
        m: usize,
        v0: f64,
        perturb: f64,
        seed: u64,
    ) -> Result<Self> {
        if d < 2 || m < 1 || nx == 0 || ny == 0 {
            return invalid(format!(
                "need D >= 2, M >= 1 and a non-empty mesh, got D={d} M={m} {nx}x{ny}"
            ));
        }
        let n = nx * ny;
        let base = equal_share_weights(d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = (0..m)
            .map(|_| {
                base.iter()
                    .map(|&b| {
                        let r: f64 = if perturb > 0.0 {
                            rng.gen_range(-perturb..perturb)
                        } else {
                            0.0
                        };
                        (b + r).clamp(0.0, 1.0)
                    })
                    .collect()
            })
            .collect();
        let xi = equal_share_weights(m)
            .into_iter()
            .map(|s| vec![s; n])
            .collect();
        Ok(Self {
            nx,
            ny,
            n_basis: d,
            c,
            v: vec![v0; n],
            xi,
            x: vec![1.0; n],
        })
    }

    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_classes(&self) -> usize {
        self.c.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, d) = (self.n_elements(), self.n_classes(), self.n_basis);
        if m == 0 || self.c.iter().any(|c| c.len() + 1 != d) {
            return invalid(format!(
                "class weights must be {m} vectors of length {}",
                d.saturating_sub(1)
            ));
        }
        if self.v.len() != n
            || self.x.len() != n
            || self.xi.len() + 1 != m
            || self.xi.iter().any(|f| f.len() != n)
        {
            return invalid("design fields do not match the mesh");
        }
        let unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.c.iter().flatten().all(unit)
            || !self.xi.iter().flatten().all(unit)
            || !self.v.iter().all(unit)
        {
            return invalid("design variables must lie in [0, 1]");
        }
        Ok(())
    }

    /// Number of continuous (MMA) variables.
    pub fn n_continuous(&self) -> usize {
        (self.n_basis - 1) * self.n_classes() + self.n_classes() * self.n_elements()
    }

    /// `[c, v, xi]` flattened row by row.
    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_continuous());
        self.c.iter().for_each(|c| out.extend_from_slice(c));
        out.extend_from_slice(&self.v);
        self.xi.iter().for_each(|f| out.extend_from_slice(f));
        out
    }

    pub fn unpack(&mut self, p: &[f64]) {
        let dm1 = self.n_basis - 1;
        let n = self.n_elements();
        let mut it = p.iter().copied();
        for c in &mut self.c {
            c.iter_mut().for_each(|s| *s = it.next().unwrap());
        }
        self.v.iter_mut().for_each(|s| *s = it.next().unwrap());
        for f in &mut self.xi {
            f.iter_mut().for_each(|s| *s = it.next().unwrap());
        }
        debug_assert_eq!(p.len(), dm1 * self.c.len() + n * self.c.len());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blend::{global_interpolate, normalize_weights};

    #[test]
    fn variable_count_example() {
        assert_eq!(variable_count(5, 2, 40 * 16), 1928);
    }

    #[test]
    fn equal_shares() {
        for n in 2..7 {
            let w = normalize_weights(&equal_share_weights(n));
            for v in &w.c_tilde {
                assert!((v - 1.0 / n as f64).abs() < 1e-14);
            }
        }
        let classes: Vec<Vec<f64>> = (0..3).map(|m| vec![m as f64, 1.0]).collect();
        let ew = global_interpolate(&classes, &equal_share_weights(3)).unwrap();
        for s in &ew.shares {
            assert!((s - 1.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn pack_round_trip_and_count() {
        let s = DesignState::initial(4, 2, 3, 2, 0.95, 0.05, 7).unwrap();
        s.validate().unwrap();
        assert_eq!(s.n_continuous() + s.n_elements(), variable_count(3, 2, 8));
        let p = s.pack();
        assert_eq!(p.len(), s.n_continuous());
        let mut t = s.clone();
        t.unpack(&vec![0.25; p.len()]);
        t.unpack(&p);
        assert_eq!(s, t);
        assert_ne!(s.c[0], s.c[1]);
        assert_eq!(DesignState::initial(4, 2, 3, 2, 0.95, 0.05, 7).unwrap(), s);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = DesignState::initial(3, 2, 4, 3, 0.5, 0.05, 1).unwrap();
        let p = dir.path().join("state.json");
        s.save(&p).unwrap();
        assert_eq!(DesignState::load(&p).unwrap(), s);
        assert!(matches!(
            DesignState::load(&dir.path().join("none.json")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
