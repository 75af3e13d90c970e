//! Multiclass shape blending.
//!
//! A microstructure is generated from basis fields in two steps: a weighted
//! sum of the representative fields shifted by an isovalue, then a soft-max
//! union with the lower feasible bounds of the bases whose weight clears an
//! adaptive threshold. Class weights are kept on the simplex through a
//! telescoping product parametrization, both per class and when classes are
//! interpolated across the macro mesh.

use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::error::{invalid, Error, Result};
use crate::field::ScalarField2D;
use crate::sdf::bisect_monotone;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendParams {
    /// Sigmoid sharpness of the relaxed volume.
    pub beta1: f64,
    /// Sharpness of the soft-max union and of the Heaviside activation.
    pub beta2: f64,
    /// Percentile of the element weights used as the activation threshold.
    pub eta_percentile: f64,
}

impl Default for BlendParams {
    fn default() -> Self {
        Self {
            beta1: 64.0,
            beta2: 32.0,
            eta_percentile: 0.75,
        }
    }
}

impl BlendParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta2 > 0.0) {
            return invalid("beta1 and beta2 must be positive");
        }
        if !(0.0..=1.0).contains(&self.eta_percentile) {
            return invalid("eta_percentile must be in [0, 1]");
        }
        Ok(())
    }
}

/// Per-class weights on the simplex together with `d c_tilde / d c`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWeights {
    pub c_tilde: Vec<f64>,
    /// `jacobian[d][k] = d c_tilde[d] / d c[k]`, shape `D x (D-1)`.
    pub jacobian: Vec<Vec<f64>>,
}

/// Running products `P_j = prod_{k<j} x_k` for `j = 0..=len`, and their
/// partial derivatives `dP_j / dx_k`.
fn prefix_products(x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = x.len();
    let mut p = vec![1.0; n + 1];
    for j in 0..n {
        p[j + 1] = p[j] * x[j];
    }
    let mut dp = vec![vec![0.0; n]; n + 1];
    for (j, row) in dp.iter_mut().enumerate() {
        for (k, slot) in row.iter_mut().enumerate().take(j) {
            *slot = (0..j).filter(|&l| l != k).map(|l| x[l]).product();
        }
    }
    (p, dp)
}

/// Maps `D - 1` free weights in `[0, 1]` onto `D` simplex weights.
///
/// `c_tilde = z1 + sum_j (z_{j+1} - z_j) prod_{k<=j} c_k`, so entry `d` is the
/// difference of consecutive running products.
pub fn normalize_weights(c: &[f64]) -> NormalizedWeights {
    let dm1 = c.len();
    let d = dm1 + 1;
    let (p, dp) = prefix_products(c);
    let mut c_tilde = vec![0.0; d];
    let mut jacobian = vec![vec![0.0; dm1]; d];
    for i in 0..d {
        let next = if i < dm1 { p[i + 1] } else { 0.0 };
        c_tilde[i] = p[i] - next;
        for k in 0..dm1 {
            let dnext = if i < dm1 { dp[i + 1][k] } else { 0.0 };
            jacobian[i][k] = dp[i][k] - dnext;
        }
    }
    NormalizedWeights { c_tilde, jacobian }
}

/// Globally interpolated weights of one macro element.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementWeights {
    pub c_hat: Vec<f64>,
    /// Coefficient of class `m` in `c_hat`; `d c_hat / d c_tilde[m] = shares[m] * I`.
    pub shares: Vec<f64>,
    /// `d c_hat[d] / d xi_hat[k]`, shape `D x (M-1)`.
    pub dxi: Vec<Vec<f64>>,
}

/// Blends `M` class weight vectors with the element's `M - 1` distribution values.
pub fn global_interpolate(c_tilde_all: &[Vec<f64>], xi_hat: &[f64]) -> Result<ElementWeights> {
    let m = c_tilde_all.len();
    if m == 0 || xi_hat.len() + 1 != m {
        return invalid(format!(
            "{} classes need {} distribution values, got {}",
            m,
            m.saturating_sub(1),
            xi_hat.len()
        ));
    }
    let d = c_tilde_all[0].len();
    let (q, dq) = prefix_products(xi_hat);
    let mut shares = vec![0.0; m];
    let mut dshare = vec![vec![0.0; m - 1]; m];
    for j in 0..m {
        let (next, dnext) = if j + 1 < m {
            (q[j + 1], dq[j + 1].clone())
        } else {
            (0.0, vec![0.0; m - 1])
        };
        shares[j] = q[j] - next;
        for k in 0..m - 1 {
            dshare[j][k] = dq[j][k] - dnext[k];
        }
    }
    let mut c_hat = vec![0.0; d];
    let mut dxi = vec![vec![0.0; m - 1]; d];
    for (j, ct) in c_tilde_all.iter().enumerate() {
        for i in 0..d {
            c_hat[i] += shares[j] * ct[i];
            for k in 0..m - 1 {
                dxi[i][k] += dshare[j][k] * ct[i];
            }
        }
    }
    Ok(ElementWeights { c_hat, shares, dxi })
}

/// Smoothed Heaviside activation mapping `[0, 1]` onto `[0, 1]` with threshold `eta`.
pub fn heaviside(c: f64, beta: f64, eta: f64) -> f64 {
    let den = (beta * eta).tanh() + (beta * (1.0 - eta)).tanh();
    ((beta * eta).tanh() + (beta * (c - eta)).tanh()) / den
}

pub fn heaviside_derivative(c: f64, beta: f64, eta: f64) -> f64 {
    let den = (beta * eta).tanh() + (beta * (1.0 - eta)).tanh();
    let th = (beta * (c - eta)).tanh();
    beta * (1.0 - th * th) / den
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let pos = p.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Activation weights `a_d` for the lower feasible bounds, and the threshold used.
pub fn activations(c_hat: &[f64], params: &BlendParams) -> (Vec<f64>, f64) {
    let eta = percentile(c_hat, params.eta_percentile);
    let a = c_hat
        .iter()
        .map(|&c| heaviside(c, params.beta2, eta))
        .collect();
    (a, eta)
}

/// `d H / d eta`.
pub fn heaviside_eta_derivative(c: f64, beta: f64, eta: f64) -> f64 {
    let (te, tc, t1) = (
        (beta * eta).tanh(),
        (beta * (c - eta)).tanh(),
        (beta * (1.0 - eta)).tanh(),
    );
    let num = te + tc;
    let den = te + t1;
    let dnum = beta * ((1.0 - te * te) - (1.0 - tc * tc));
    let dden = beta * ((1.0 - te * te) - (1.0 - t1 * t1));
    (dnum * den - num * dden) / (den * den)
}

/// `d percentile / d values[k]` for the linear-interpolation percentile.
pub fn percentile_gradient(values: &[f64], p: f64) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let pos = p.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let f = pos - lo as f64;
    let mut g = vec![0.0; values.len()];
    g[idx[lo]] += 1.0 - f;
    g[idx[hi]] += f;
    g
}

/// Activations and the full Jacobian `d a_d / d c_hat_k`, including the
/// dependence of the threshold on the weights.
pub fn activation_jacobian(c_hat: &[f64], params: &BlendParams) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (a, eta) = activations(c_hat, params);
    let deta = percentile_gradient(c_hat, params.eta_percentile);
    let jac = c_hat
        .iter()
        .enumerate()
        .map(|(d, &c)| {
            let dh_deta = heaviside_eta_derivative(c, params.beta2, eta);
            let mut row: Vec<f64> = deta.iter().map(|g| dh_deta * g).collect();
            row[d] += heaviside_derivative(c, params.beta2, eta);
            row
        })
        .collect();
    (a, jac)
}

/// Relaxed volume of the activated lower-bound union, i.e. the smallest
/// volume a blend with these weights can reach, and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerVolume {
    pub volume: f64,
    pub grad: Vec<f64>,
}

pub fn lower_union_volume(
    c_hat: &[f64],
    basis: &BasisSet,
    params: &BlendParams,
) -> Result<LowerVolume> {
    check_weights(c_hat, basis)?;
    let (a, jac) = activation_jacobian(c_hat, params);
    let (beta, n, dn) = (params.beta2, basis.cells(), c_hat.len());
    let mut volume = 0.0;
    let mut g_a = vec![0.0; dn];
    let mut e = vec![0.0; dn];
    for u in 0..n {
        let mut m = f64::NEG_INFINITY;
        for d in 0..dn {
            e[d] = beta * basis.phi_lower(d).values()[u];
            if a[d] > 0.0 {
                m = m.max(e[d] + a[d].ln());
            }
        }
        if !m.is_finite() {
            return Err(Error::Numerical(
                "no active lower bound in the blend".into(),
            ));
        }
        let s: f64 = (0..dn)
            .filter(|&d| a[d] > 0.0)
            .map(|d| (e[d] + a[d].ln() - m).exp())
            .sum();
        let lu = (m + s.ln()) / beta;
        let sg = sigmoid(lu, params.beta1);
        volume += sg;
        let ds = params.beta1 * sg * (1.0 - sg);
        for d in 0..dn {
            g_a[d] += ds * (e[d] - m).exp() / (beta * s);
        }
    }
    let nf = n as f64;
    let grad = (0..dn)
        .map(|k| (0..dn).map(|d| g_a[d] * jac[d][k]).sum::<f64>() / nf)
        .collect();
    Ok(LowerVolume {
        volume: volume / nf,
        grad,
    })
}

/// Precomputed t-independent parts of one element's blend.
struct BlendTerms<'a> {
    beta: f64,
    /// Weighted sum of representative fields (no isovalue yet).
    inner: Vec<f64>,
    /// `log(sum_d a_d exp(beta * phi_lower_d))`, or `-inf` when nothing is active.
    lower: Vec<f64>,
    basis: &'a BasisSet,
}

impl<'a> BlendTerms<'a> {
    fn new(c_hat: &[f64], basis: &'a BasisSet, beta: f64, a: &[f64]) -> Self {
        let n = basis.cells();
        let mut inner = vec![0.0; n];
        for (d, &w) in c_hat.iter().enumerate() {
            if w != 0.0 {
                for (acc, v) in inner.iter_mut().zip(basis.phi_star(d).values()) {
                    *acc += w * v;
                }
            }
        }
        let mut lower = vec![f64::NEG_INFINITY; n];
        for (u, slot) in lower.iter_mut().enumerate() {
            let mut m = f64::NEG_INFINITY;
            for (d, &ad) in a.iter().enumerate() {
                if ad > 0.0 {
                    m = m.max(beta * basis.phi_lower(d).values()[u] + ad.ln());
                }
            }
            if m.is_finite() {
                let mut s = 0.0;
                for (d, &ad) in a.iter().enumerate() {
                    if ad > 0.0 {
                        s += (beta * basis.phi_lower(d).values()[u] + ad.ln() - m).exp();
                    }
                }
                *slot = m + s.ln();
            }
        }
        Self {
            beta,
            inner,
            lower,
            basis,
        }
    }

    #[inline]
    fn value(&self, u: usize, t: f64) -> f64 {
        let a0 = self.beta * (self.inner[u] + t);
        let l = self.lower[u];
        let m = a0.max(l);
        if m == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        (m + ((a0 - m).exp() + (l - m).exp()).ln()) / self.beta
    }

    fn volume(&self, t: f64) -> f64 {
        let solid = (0..self.inner.len())
            .filter(|&u| self.value(u, t) >= 0.0)
            .count();
        solid as f64 / self.inner.len() as f64
    }

    fn field(&self, t: f64) -> Result<ScalarField2D> {
        let vals: Vec<f64> = (0..self.inner.len()).map(|u| self.value(u, t)).collect();
        if let Some(u) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "blend produced a non-finite value at cell {u} (beta2 = {})",
                self.beta
            )));
        }
        ScalarField2D::new(self.basis.nx(), self.basis.ny(), vals)
    }

    fn inner_range(&self) -> f64 {
        self.inner.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn check_weights(c_hat: &[f64], basis: &BasisSet) -> Result<()> {
    if c_hat.len() != basis.len() {
        return invalid(format!(
            "weight vector has {} entries for {} basis classes",
            c_hat.len(),
            basis.len()
        ));
    }
    if c_hat.iter().any(|c| !c.is_finite()) {
        return invalid("non-finite blend weight");
    }
    Ok(())
}

/// Blends with explicitly given activations.
pub fn blend_with_activations(
    c_hat: &[f64],
    t: f64,
    basis: &BasisSet,
    beta2: f64,
    a: &[f64],
) -> Result<ScalarField2D> {
    check_weights(c_hat, basis)?;
    BlendTerms::new(c_hat, basis, beta2, a).field(t)
}

/// Final blended field of one microstructure at isovalue `t`.
pub fn blend(
    c_hat: &[f64],
    t: f64,
    basis: &BasisSet,
    params: &BlendParams,
) -> Result<ScalarField2D> {
    let (a, _) = activations(c_hat, params);
    blend_with_activations(c_hat, t, basis, params.beta2, &a)
}

/// Field sensitivities of a blend.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendGradient {
    /// `d phi / d c_hat[d]`, one field (as a flat vector) per basis.
    pub dphi_dc: Vec<Vec<f64>>,
    /// `d phi / d t`.
    pub dphi_dt: Vec<f64>,
}

fn blend_grad_impl(
    c_hat: &[f64],
    t: f64,
    basis: &BasisSet,
    beta: f64,
    a: &[f64],
    da: &[f64],
) -> BlendGradient {
    let n = basis.cells();
    let dn = c_hat.len();
    let terms = BlendTerms::new(c_hat, basis, beta, a);
    let mut dphi_dc = vec![vec![0.0; n]; dn];
    let mut dphi_dt = vec![0.0; n];
    for u in 0..n {
        let a0 = beta * (terms.inner[u] + t);
        let l = terms.lower[u];
        let m = a0.max(l);
        let e0 = (a0 - m).exp();
        let sum = e0 + (l - m).exp();
        let w0 = e0 / sum;
        dphi_dt[u] = w0;
        for d in 0..dn {
            let el = (beta * basis.phi_lower(d).values()[u] - m).exp();
            dphi_dc[d][u] = w0 * basis.phi_star(d).values()[u] + da[d] * el / (beta * sum);
        }
    }
    BlendGradient { dphi_dc, dphi_dt }
}

/// Analytic `d phi / d c_hat`. The activation threshold is held fixed.
pub fn blend_grad(
    c_hat: &[f64],
    t: f64,
    basis: &BasisSet,
    params: &BlendParams,
) -> Result<BlendGradient> {
    check_weights(c_hat, basis)?;
    let (a, eta) = activations(c_hat, params);
    let da: Vec<f64> = c_hat
        .iter()
        .map(|&c| heaviside_derivative(c, params.beta2, eta))
        .collect();
    Ok(blend_grad_impl(c_hat, t, basis, params.beta2, &a, &da))
}

/// Gradient with explicitly given (constant) activations.
pub fn blend_grad_with_activations(
    c_hat: &[f64],
    t: f64,
    basis: &BasisSet,
    beta2: f64,
    a: &[f64],
) -> Result<BlendGradient> {
    check_weights(c_hat, basis)?;
    Ok(blend_grad_impl(
        c_hat,
        t,
        basis,
        beta2,
        a,
        &vec![0.0; a.len()],
    ))
}

#[inline]
pub fn sigmoid(x: f64, beta: f64) -> f64 {
    1.0 / (1.0 + (-beta * x).exp())
}

/// Sigmoid-relaxed volume fraction and its per-cell derivative.
pub fn relaxed_volume(phi: &[f64], beta1: f64) -> (f64, Vec<f64>) {
    let n = phi.len() as f64;
    let mut v = 0.0;
    let mut d = Vec::with_capacity(phi.len());
    for &p in phi {
        let s = sigmoid(p, beta1);
        v += s;
        d.push(beta1 * s * (1.0 - s) / n);
    }
    (v / n, d)
}

/// A blended microstructure matched to a volume fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeBlend {
    pub phi: ScalarField2D,
    pub t: f64,
    /// Sharp volume fraction of `phi >= 0`.
    pub volume: f64,
    /// Volume of the activated lower-bound union (smallest attainable).
    pub min_volume: f64,
    /// The request was below `min_volume` and got raised to it.
    pub clamped: bool,
}

/// Finds the isovalue `t_e` so that the blend has volume `v_target`.
pub fn blend_to_volume(
    c_hat: &[f64],
    v_target: f64,
    basis: &BasisSet,
    params: &BlendParams,
    tol: f64,
) -> Result<VolumeBlend> {
    check_weights(c_hat, basis)?;
    let (a, _) = activations(c_hat, params);
    let terms = BlendTerms::new(c_hat, basis, params.beta2, &a);
    let n = basis.cells() as f64;
    let tol = tol.max(0.5 / n);

    let lower_span = terms
        .lower
        .iter()
        .filter(|l| l.is_finite())
        .fold(0.0f64, |m, l| m.max(l.abs()))
        / params.beta2;
    let range = terms.inner_range();
    // at t_lo the weighted sum is negligible next to every active lower bound
    let t_lo = -(range + lower_span + 60.0 / params.beta2);
    let t_hi = range + 1.0;
    let min_volume = terms.volume(t_lo);
    let target = v_target.clamp(0.0, 1.0);
    let (t, volume, clamped) = if target <= min_volume + tol {
        (t_lo, min_volume, target < min_volume - tol)
    } else {
        let (t, v) = bisect_monotone(|t| terms.volume(t), target, tol, t_lo, t_hi);
        (t, v, false)
    };
    Ok(VolumeBlend {
        phi: terms.field(t)?,
        t,
        volume,
        min_volume,
        clamped,
    })
}
