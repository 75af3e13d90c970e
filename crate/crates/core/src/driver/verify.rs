//! Full-resolution assembly of a design and its check by direct
//! homogenization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::compliance::is_solid;
use super::model::realized_volume;
use super::state::DesignState;
use crate::basis::BasisSet;
use crate::blend::{
    blend_to_volume, global_interpolate, lower_union_volume, normalize_weights, BlendParams,
};
use crate::error::{invalid, Result};
use crate::fea::{assemble_solve, BoundaryConditions, MacroMesh};
use crate::field::{BinaryGrid, ScalarField2D};
use crate::homogenize::{
    element_stiffness_from_c, homogenize_binary, EffectiveStiffness, Mat8, MaterialModel,
};
use crate::optim::RadialFilter;

/// Bisection tolerance on the microstructure volume.
const VOLUME_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizedElement {
    pub c_hat: Vec<f64>,
    pub shares: Vec<f64>,
    /// `max(v_hat, min_volume)`.
    pub volume: f64,
    pub min_volume: f64,
}

/// Element weights and realized volumes of a design, without a surrogate.
pub fn realize(
    s: &DesignState,
    basis: &BasisSet,
    params: &BlendParams,
    r_min: f64,
) -> Result<Vec<RealizedElement>> {
    s.validate()?;
    if s.n_basis != basis.len() {
        return invalid(format!(
            "design uses {} basis classes, the basis set has {}",
            s.n_basis,
            basis.len()
        ));
    }
    let filter = RadialFilter::new(s.nx, s.ny, r_min);
    let c_tilde: Vec<Vec<f64>> = s.c.iter().map(|c| normalize_weights(c).c_tilde).collect();
    let v_hat = filter.apply(&s.v);
    let xi_hat: Vec<Vec<f64>> = s.xi.iter().map(|f| filter.apply(f)).collect();
    (0..s.n_elements())
        .into_par_iter()
        .map(|e| {
            let xi: Vec<f64> = xi_hat.iter().map(|f| f[e]).collect();
            let w = global_interpolate(&c_tilde, &xi)?;
            let lower = lower_union_volume(&w.c_hat, basis, params)?;
            Ok(RealizedElement {
                volume: realized_volume(v_hat[e], lower.volume).0,
                min_volume: lower.volume,
                c_hat: w.c_hat,
                shares: w.shares,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceAudit {
    /// Edges between two solid macro elements.
    pub interfaces: usize,
    pub connected: usize,
    /// Interfaces whose elements have different dominant classes.
    pub mixed: usize,
    pub mixed_connected: usize,
}

impl InterfaceAudit {
    pub fn connected_fraction(&self) -> f64 {
        if self.interfaces == 0 {
            1.0
        } else {
            self.connected as f64 / self.interfaces as f64
        }
    }

    pub fn mixed_connected_fraction(&self) -> f64 {
        if self.mixed == 0 {
            1.0
        } else {
            self.mixed_connected as f64 / self.mixed as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub f_c_verified: f64,
    /// Compliance of the same layout with the given (surrogate) stiffness,
    /// if supplied.
    pub f_c_surrogate: Option<f64>,
    pub rel_deviation: Option<f64>,
    pub degenerate: bool,
    pub v_global: f64,
    pub v_beso: f64,
    pub interfaces: InterfaceAudit,
    pub image_nx: usize,
    pub image_ny: usize,
}

#[derive(Debug, Clone)]
pub struct Verified {
    pub image: BinaryGrid,
    pub stiffness: Vec<EffectiveStiffness>,
    pub elements: Vec<RealizedElement>,
    pub report: VerifyReport,
}

fn dominant(shares: &[f64]) -> usize {
    let mut best = 0;
    for (m, s) in shares.iter().enumerate() {
        if *s > shares[best] {
            best = m;
        }
    }
    best
}

/// Whether two tiles placed side by side (or `b` above `a`) share solid
/// pixels across their common edge.
fn tiles_touch(a: &ScalarField2D, b: &ScalarField2D, horizontal: bool) -> bool {
    let n = if horizontal { a.ny() } else { a.nx() };
    (0..n).any(|k| {
        let (pa, pb) = if horizontal {
            (a.get(a.nx() - 1, k), b.get(0, k))
        } else {
            (a.get(k, a.ny() - 1), b.get(k, 0))
        };
        pa >= 0.0 && pb >= 0.0
    })
}

/// Blends every solid element at its realized weights and volume, tiles the
/// cells into one image, homogenizes each cell directly and re-solves the
/// macro problem.
#[allow(clippy::too_many_arguments)]
pub fn assemble_and_verify(
    s: &DesignState,
    basis: &BasisSet,
    params: &BlendParams,
    mat: &MaterialModel,
    bcs: &BoundaryConditions,
    r_min: f64,
    surrogate_stiffness: Option<&[EffectiveStiffness]>,
) -> Result<Verified> {
    let elements = realize(s, basis, params, r_min)?;
    let mesh = MacroMesh::new(s.nx, s.ny)?;
    let cells: Vec<Option<(ScalarField2D, EffectiveStiffness)>> = elements
        .par_iter()
        .zip(s.x.par_iter())
        .map(|(el, &x)| {
            if !is_solid(x) {
                return Ok(None);
            }
            let b = blend_to_volume(&el.c_hat, el.volume, basis, params, VOLUME_TOL)?;
            let h = homogenize_binary(&b.phi, mat)?;
            Ok(Some((b.phi, h.stiffness)))
        })
        .collect::<Result<_>>()?;
    let stiffness: Vec<EffectiveStiffness> = cells
        .iter()
        .map(|c| c.as_ref().map_or_else(|| mat.solid(), |(_, k)| *k))
        .collect();
    let ke: Vec<Mat8> = stiffness.iter().map(element_stiffness_from_c).collect();
    let sol = assemble_solve(&mesh, &ke, &s.x, bcs)?;
    let f_c_surrogate = match surrogate_stiffness {
        Some(c) if c.len() == stiffness.len() => {
            let ks: Vec<Mat8> = c.iter().map(element_stiffness_from_c).collect();
            Some(assemble_solve(&mesh, &ks, &s.x, bcs)?.compliance)
        }
        Some(_) => return invalid("surrogate stiffness does not match the mesh"),
        None => None,
    };

    let (n, nx, ny) = (basis.nx(), s.nx, s.ny);
    let image = BinaryGrid::from_fn(nx * n, ny * n, |i, j| {
        cells[(j / n) * nx + i / n]
            .as_ref()
            .is_some_and(|(phi, _)| phi.get(i % n, j % n) >= 0.0)
    })?;

    let mut audit = InterfaceAudit {
        interfaces: 0,
        connected: 0,
        mixed: 0,
        mixed_connected: 0,
    };
    for e in 0..s.n_elements() {
        let (i, j) = (e % nx, e / nx);
        for (nb, horizontal) in [(i + 1 < nx).then(|| e + 1), (j + 1 < ny).then(|| e + nx)]
            .into_iter()
            .zip([true, false])
            .filter_map(|(nb, h)| nb.map(|nb| (nb, h)))
        {
            if let (Some((a, _)), Some((b, _))) = (&cells[e], &cells[nb]) {
                let ok = tiles_touch(a, b, horizontal);
                let mixed = dominant(&elements[e].shares) != dominant(&elements[nb].shares);
                audit.interfaces += 1;
                audit.connected += ok as usize;
                audit.mixed += mixed as usize;
                audit.mixed_connected += (mixed && ok) as usize;
            }
        }
    }

    let nf = s.n_elements() as f64;
    let solid: Vec<bool> = s.x.iter().map(|&x| is_solid(x)).collect();
    let v_global = elements
        .iter()
        .zip(&solid)
        .filter(|(_, s)| **s)
        .map(|(el, _)| el.volume)
        .sum::<f64>()
        / nf;
    let v_beso = solid.iter().filter(|s| **s).count() as f64 / nf;
    let report = VerifyReport {
        f_c_verified: sol.compliance,
        rel_deviation: f_c_surrogate.map(|f| (sol.compliance - f) / f),
        f_c_surrogate,
        degenerate: sol.degenerate,
        v_global,
        v_beso,
        interfaces: audit,
        image_nx: image.nx(),
        image_ny: image.ny(),
    };
    Ok(Verified {
        image,
        stiffness,
        elements,
        report,
    })
}
