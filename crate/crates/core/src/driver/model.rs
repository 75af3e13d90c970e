//! Per-element microstructure evaluation: filtering, class interpolation,
//! realized volume and surrogate stiffness, with derivatives.

use rayon::prelude::*;

use super::state::DesignState;
use crate::basis::BasisSet;
use crate::blend::{
    global_interpolate, lower_union_volume, normalize_weights, BlendParams, ElementWeights,
};
use crate::error::{invalid, Result};
use crate::homogenize::EffectiveStiffness;
use crate::optim::RadialFilter;
use crate::surrogate::SurrogateModel;

pub type Comp6 = [f64; 6];

pub(crate) fn comp6(c: &EffectiveStiffness) -> Comp6 {
    c.components6()
}

pub(crate) fn dot6(a: &Comp6, b: &Comp6) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `max(v, m)` and its derivative with respect to `v`; the derivative
/// with respect to `m` is one minus that.
pub fn realized_volume(v: f64, m: f64) -> (f64, f64) {
    if v < m {
        (m, 0.0)
    } else {
        (v, 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct ElementMicro {
    pub weights: ElementWeights,
    pub v_hat: f64,
    /// Smallest volume reachable with these weights.
    pub min_volume: f64,
    /// Realized volume `max(v_hat, min_volume)`, also the surrogate input.
    pub volume: f64,
    /// `v_hat` lies below `min_volume`.
    pub clamped: bool,
    pub stiffness: EffectiveStiffness,
    /// Total derivatives of the stiffness components and of `volume`.
    pub dc_dchat: Vec<Comp6>,
    pub dc_dvhat: Comp6,
    pub dvol_dchat: Vec<f64>,
    pub dvol_dvhat: f64,
}

#[derive(Debug, Clone)]
pub struct MicroField {
    pub c_tilde: Vec<Vec<f64>>,
    /// `d c_tilde^(m) / d c^(m)`, `M x D x (D - 1)`.
    pub c_jac: Vec<Vec<Vec<f64>>>,
    pub xi_hat: Vec<Vec<f64>>,
    pub elems: Vec<ElementMicro>,
}

impl MicroField {
    pub fn volumes(&self) -> Vec<f64> {
        self.elems.iter().map(|e| e.volume).collect()
    }

    pub fn stiffness(&self) -> Vec<EffectiveStiffness> {
        self.elems.iter().map(|e| e.stiffness).collect()
    }
}

/// Everything needed to map design variables onto element stiffness.
pub struct MicroModel<'a> {
    pub basis: &'a BasisSet,
    pub surrogate: &'a SurrogateModel,
    pub params: BlendParams,
    pub filter: RadialFilter,
}

impl<'a> MicroModel<'a> {
    pub fn new(
        basis: &'a BasisSet,
        surrogate: &'a SurrogateModel,
        params: BlendParams,
        nx: usize,
        ny: usize,
        r_min: f64,
    ) -> Result<Self> {
        if surrogate.n_classes() != basis.len() {
            return invalid(format!(
                "surrogate was trained on {} basis classes, the basis set has {}",
                surrogate.n_classes(),
                basis.len()
            ));
        }
        params.validate()?;
        Ok(Self {
            basis,
            surrogate,
            params,
            filter: RadialFilter::new(nx, ny, r_min),
        })
    }

    /// Smallest volume any element can realize.
    pub fn v_min(&self) -> f64 {
        self.basis
            .v_lower
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    fn check(&self, s: &DesignState) -> Result<()> {
        s.validate()?;
        if s.n_basis != self.basis.len() || self.filter.shape() != (s.nx, s.ny) {
            return invalid("design state does not match the basis set or mesh");
        }
        Ok(())
    }

    pub fn evaluate(&self, s: &DesignState) -> Result<MicroField> {
        self.check(s)?;
        let norm: Vec<_> = s.c.iter().map(|c| normalize_weights(c)).collect();
        let c_tilde: Vec<Vec<f64>> = norm.iter().map(|w| w.c_tilde.clone()).collect();
        let c_jac = norm.into_iter().map(|w| w.jacobian).collect();
        let v_hat = self.filter.apply(&s.v);
        let xi_hat: Vec<Vec<f64>> = s.xi.iter().map(|f| self.filter.apply(f)).collect();
        let d = self.basis.len();
        let elems = (0..s.n_elements())
            .into_par_iter()
            .map(|e| {
                let xi_e: Vec<f64> = xi_hat.iter().map(|f| f[e]).collect();
                let weights = global_interpolate(&c_tilde, &xi_e)?;
                let lower = lower_union_volume(&weights.c_hat, self.basis, &self.params)?;
                let clamped = v_hat[e] < lower.volume;
                let (volume, w) = realized_volume(v_hat[e], lower.volume);
                let (c, dc, dv) = self
                    .surrogate
                    .predict_with_gradients(&weights.c_hat, volume)?;
                let dv6 = comp6(&dv);
                let dvol_dchat: Vec<f64> = lower.grad.iter().map(|g| (1.0 - w) * g).collect();
                let dc_dchat = (0..d)
                    .map(|k| {
                        let mut g = comp6(&dc[k]);
                        g.iter_mut()
                            .zip(&dv6)
                            .for_each(|(a, b)| *a += b * dvol_dchat[k]);
                        g
                    })
                    .collect();
                let dc_dvhat = dv6.map(|v| v * w);
                let dvol_dvhat = w;
                Ok(ElementMicro {
                    weights,
                    v_hat: v_hat[e],
                    min_volume: lower.volume,
                    volume,
                    clamped,
                    stiffness: c,
                    dc_dchat,
                    dc_dvhat,
                    dvol_dchat,
                    dvol_dvhat,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MicroField {
            c_tilde,
            c_jac,
            xi_hat,
            elems,
        })
    }

    /// Chains per-element gradients w.r.t. `c_hat_e` and `v_hat_e` back to the
    /// packed `[c, v, xi]` variables.
    pub fn backprop(
        &self,
        s: &DesignState,
        field: &MicroField,
        g_chat: &[Vec<f64>],
        g_vhat: &[f64],
    ) -> Vec<f64> {
        let (m, d, n) = (s.n_classes(), s.n_basis, s.n_elements());
        let mut out = Vec::with_capacity(s.n_continuous());
        for cls in 0..m {
            let mut g_ct = vec![0.0; d];
            for (el, g) in field.elems.iter().zip(g_chat) {
                let share = el.weights.shares[cls];
                g_ct.iter_mut().zip(g).for_each(|(a, b)| *a += share * b);
            }
            let jac = &field.c_jac[cls];
            for k in 0..d - 1 {
                out.push((0..d).map(|i| g_ct[i] * jac[i][k]).sum());
            }
        }
        out.extend(self.filter.backprop(g_vhat));
        for k in 0..m - 1 {
            let g_xi: Vec<f64> = (0..n)
                .map(|e| {
                    (0..d)
                        .map(|i| g_chat[e][i] * field.elems[e].weights.dxi[i][k])
                        .sum()
                })
                .collect();
            out.extend(self.filter.backprop(&g_xi));
        }
        out
    }
}
