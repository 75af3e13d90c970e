//! Two-stage shape matching: target properties from a displacement profile,
//! then the microstructure design that realizes them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diversity::{diversity_penalty, min_pairwise_distance};
use super::model::MicroModel;
use super::state::DesignState;
use crate::basis::BasisSet;
use crate::blend::{percentile, BlendParams};
use crate::error::{invalid, Error, Result};
use crate::fea::{assemble_solve, centerline_dofs, BoundaryConditions, MacroMesh};
use crate::homogenize::{element_stiffness_from_c, EffectiveStiffness, Mat8};
use crate::optim::mma::Constraints;
use crate::optim::{MmaParams, MmaState};
use crate::surrogate::SurrogateModel;

/// Positions of the 4- or 6-component vectors inside the Voigt 6-vector.
pub fn component_slots(n: usize) -> &'static [usize] {
    if n == 4 {
        &[0, 1, 3, 5]
    } else {
        &[0, 1, 2, 3, 4, 5]
    }
}

/// `A sin(2 pi i / wavelength)` at the centerline nodes `i = 0..=nx`.
pub fn sine_profile(nx: usize, amplitude: f64, wavelength: f64) -> Vec<f64> {
    (0..=nx)
        .map(|i| amplitude * (2.0 * std::f64::consts::PI * i as f64 / wavelength).sin())
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Attainable stiffness components as a point cloud, with the coverage field
/// `phi(C) = r_cov - d_k(C)` where `d_k` is the distance to the `k`-th
/// nearest point after scaling every component to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct PropertyCloud {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    points: Vec<Vec<f64>>,
    pub k: usize,
    pub r_cov: f64,
}

impl PropertyCloud {
    /// `r_cov` is the `coverage` percentile of the cloud's own `k`-NN distances.
    pub fn new(raw: &[Vec<f64>], k: usize, coverage: f64) -> Result<Self> {
        let dim = raw.first().map_or(0, Vec::len);
        if raw.len() <= k || k == 0 || dim == 0 || raw.iter().any(|r| r.len() != dim) {
            return invalid(format!(
                "property cloud needs more than k = {k} points of equal length"
            ));
        }
        let mut lo = raw[0].clone();
        let mut hi = raw[0].clone();
        for r in raw {
            for j in 0..dim {
                lo[j] = lo[j].min(r[j]);
                hi[j] = hi[j].max(r[j]);
            }
        }
        let mut cloud = Self {
            lo,
            hi,
            points: Vec::new(),
            k,
            r_cov: 0.0,
        };
        cloud.points = raw.iter().map(|r| cloud.scale(r)).collect();
        let own: Vec<f64> = (0..cloud.points.len())
            .into_par_iter()
            .map(|i| cloud.kth(&cloud.points[i], Some(i)).0)
            .collect();
        cloud.r_cov = percentile(&own, coverage);
        Ok(cloud)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn span(&self, j: usize) -> f64 {
        let s = self.hi[j] - self.lo[j];
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn scale(&self, c: &[f64]) -> Vec<f64> {
        c.iter()
            .enumerate()
            .map(|(j, v)| (v - self.lo[j]) / self.span(j))
            .collect()
    }

    pub fn unscale(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(j, v)| self.lo[j] + v * self.span(j))
            .collect()
    }

    /// `(d_k, index)` of the `k`-th nearest point to scaled `z`.
    fn kth(&self, z: &[f64], skip: Option<usize>) -> (f64, usize) {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(self.k + 1);
        for (i, p) in self.points.iter().enumerate() {
            if Some(i) == skip {
                continue;
            }
            let d2: f64 = p.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
            if best.len() < self.k || d2 < best[best.len() - 1].0 {
                let pos = best.partition_point(|&(v, j)| (v, j) < (d2, i));
                best.insert(pos, (d2, i));
                best.truncate(self.k);
            }
        }
        let (d2, i) = best[best.len() - 1];
        (d2.sqrt(), i)
    }

    /// `phi` and its gradient in scaled coordinates.
    pub fn phi_scaled(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let (d, i) = self.kth(z, None);
        let grad = if d > 0.0 {
            z.iter()
                .zip(&self.points[i])
                .map(|(a, b)| -(a - b) / d)
                .collect()
        } else {
            vec![0.0; z.len()]
        };
        (self.r_cov - d, grad)
    }

    pub fn phi(&self, c: &[f64]) -> f64 {
        self.phi_scaled(&self.scale(c)).0
    }

    /// Moves scaled `z` towards the nearest well-covered cloud point until
    /// `phi >= 0`.
    pub fn project_scaled(&self, z: &[f64]) -> Vec<f64> {
        if self.phi_scaled(z).0 >= 0.0 {
            return z.to_vec();
        }
        let anchor = self
            .points
            .iter()
            .filter(|p| self.phi_scaled(p).0 >= 0.0)
            .min_by(|a, b| {
                let da: f64 = a.iter().zip(z).map(|(x, y)| (x - y).powi(2)).sum();
                let db: f64 = b.iter().zip(z).map(|(x, y)| (x - y).powi(2)).sum();
                da.total_cmp(&db)
            })
            .expect("cloud has covered points")
            .clone();
        let at = |t: f64| -> Vec<f64> {
            z.iter()
                .zip(&anchor)
                .map(|(a, b)| a + t * (b - a))
                .collect()
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.phi_scaled(&at(mid)).0 >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        at(hi)
    }

    pub fn mean_scaled(&self) -> Vec<f64> {
        let n = self.points.len() as f64;
        (0..self.dim())
            .map(|j| self.points.iter().map(|p| p[j]).sum::<f64>() / n)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Options {
    pub max_iter: usize,
    pub k_nn: usize,
    pub coverage: f64,
    pub move_limit: f64,
    /// Stop when the relative MSE improvement over 10 iterations falls below this.
    pub objective_tol: f64,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Self {
            max_iter: 200,
            k_nn: 5,
            coverage: 0.9,
            move_limit: 0.1,
            objective_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Row {
    pub iter: usize,
    pub mse: f64,
    pub max_violation: f64,
    pub change: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Result {
    pub targets: Vec<EffectiveStiffness>,
    pub mse_initial: f64,
    pub mse_final: f64,
    pub max_violation: f64,
    pub centerline: Vec<f64>,
    pub history: Vec<Stage1Row>,
}

/// Centerline mismatch of a stiffness field and its gradient with respect to
/// the scaled components of every element.
pub struct CenterlineFit<'a> {
    pub mesh: &'a MacroMesh,
    pub bcs: &'a BoundaryConditions,
    pub target: &'a [f64],
    pub cloud: &'a PropertyCloud,
    dofs: Vec<usize>,
    kb: Vec<Mat8>,
}

impl<'a> CenterlineFit<'a> {
    pub fn new(
        mesh: &'a MacroMesh,
        bcs: &'a BoundaryConditions,
        target: &'a [f64],
        cloud: &'a PropertyCloud,
    ) -> Result<Self> {
        let dofs = centerline_dofs(mesh)?;
        if target.len() != dofs.len() {
            return invalid(format!(
                "target profile needs {} values, got {}",
                dofs.len(),
                target.len()
            ));
        }
        if cloud.dim() != 4 && cloud.dim() != 6 {
            return invalid("property cloud must hold 4 or 6 components");
        }
        let kb = (0..cloud.dim())
            .map(|j| element_stiffness_from_c(&EffectiveStiffness::component_basis(cloud.dim(), j)))
            .collect();
        Ok(Self {
            mesh,
            bcs,
            target,
            cloud,
            dofs,
            kb,
        })
    }

    pub fn stiffness(&self, z: &[Vec<f64>]) -> Result<Vec<EffectiveStiffness>> {
        z.iter()
            .map(|ze| EffectiveStiffness::from_components(&self.cloud.unscale(ze)))
            .collect()
    }

    /// Centerline vertical displacements of a stiffness field.
    pub fn centerline(&self, c: &[EffectiveStiffness]) -> Result<Vec<f64>> {
        let ke: Vec<Mat8> = c.iter().map(element_stiffness_from_c).collect();
        let sol = assemble_solve(self.mesh, &ke, &vec![1.0; c.len()], self.bcs)?;
        Ok(self.dofs.iter().map(|&d| sol.u[d]).collect())
    }

    /// `(mse, d mse / d z_e)`.
    pub fn eval(&self, z: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        let c = self.stiffness(z)?;
        let ke: Vec<Mat8> = c.iter().map(element_stiffness_from_c).collect();
        let n_el = c.len();
        let sol = assemble_solve(self.mesh, &ke, &vec![1.0; n_el], self.bcs)?;
        let n = self.dofs.len() as f64;
        let mut g = vec![0.0; sol.u.len()];
        let mut mse = 0.0;
        for (&d, t) in self.dofs.iter().zip(self.target) {
            let r = sol.u[d] - t;
            mse += r * r / n;
            g[d] += 2.0 * r / n;
        }
        let lam = sol.system.solve_free(&g);
        let grad = (0..n_el)
            .into_par_iter()
            .map(|e| {
                let ue = sol.element_u(self.mesh, e);
                let le = self.mesh.edofs(e).map(|d| lam[d]);
                (0..self.cloud.dim())
                    .map(|j| -crate::fea::quad_form(&self.kb[j], &le, &ue) * self.cloud.span(j))
                    .collect()
            })
            .collect();
        Ok((mse, grad))
    }
}

const OBJECTIVE_SCALE: f64 = 100.0;

/// Per-element stiffness that reproduces a centerline profile while staying
/// inside the attainable property set.
pub fn shape_match_stage1(
    mesh: &MacroMesh,
    bcs: &BoundaryConditions,
    target: &[f64],
    cloud: &PropertyCloud,
    opts: &Stage1Options,
) -> Result<Stage1Result> {
    let fit = CenterlineFit::new(mesh, bcs, target, cloud)?;
    let n_el = mesh.n_elements();
    let dim = cloud.dim();
    let start = cloud.project_scaled(&cloud.mean_scaled());
    let mut z: Vec<Vec<f64>> = vec![start; n_el];
    let nv = n_el * dim;
    let mut mma = MmaState::new(
        nv,
        n_el,
        MmaParams {
            move_limit: opts.move_limit,
            ..Default::default()
        },
    );
    let (lo, hi) = (vec![0.0; nv], vec![1.0; nv]);
    let mut history = Vec::new();
    let mut change = f64::NAN;
    let (mse0, _) = fit.eval(&z)?;
    // objective held near 100 so the subproblem is not flat against the constraints
    let scale = if mse0 > 0.0 {
        OBJECTIVE_SCALE / mse0
    } else {
        1.0
    };
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for iter in 1..=opts.max_iter {
        let (mse, grad) = fit.eval(&z)?;
        let phis: Vec<(f64, Vec<f64>)> = z.par_iter().map(|ze| cloud.phi_scaled(ze)).collect();
        let max_violation = phis.iter().map(|p| -p.0).fold(f64::NEG_INFINITY, f64::max);
        history.push(Stage1Row {
            iter,
            mse,
            max_violation,
            change,
        });
        if max_violation <= 1e-6 && best.as_ref().is_none_or(|b| mse < b.0) {
            best = Some((mse, z.clone()));
        }
        if mse <= 1e-14 * target.iter().map(|t| t * t).sum::<f64>().max(1e-300) {
            break;
        }
        if history.len() > 10 {
            let old = history[history.len() - 11].mse;
            if (old - mse) <= opts.objective_tol * old && max_violation <= 1e-6 {
                break;
            }
        }
        if iter == opts.max_iter {
            break;
        }
        let x: Vec<f64> = z.iter().flatten().copied().collect();
        let df0: Vec<f64> = grad.iter().flatten().map(|g| g * scale).collect();
        // -phi / r_cov <= 0, one constraint per element
        let values: Vec<f64> = phis.iter().map(|p| -p.0 / cloud.r_cov).collect();
        let grads: Vec<Vec<f64>> = (0..n_el)
            .map(|e| {
                let mut row = vec![0.0; nv];
                for j in 0..dim {
                    row[e * dim + j] = -phis[e].1[j] / cloud.r_cov;
                }
                row
            })
            .collect();
        let next = mma.update(
            &x,
            &lo,
            &hi,
            &df0,
            Constraints {
                values: &values,
                grads: &grads,
            },
        )?;
        change = x
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        z = next.chunks(dim).map(|c| c.to_vec()).collect();
    }
    let z = match best {
        Some((_, bz)) => bz,
        None => z.iter().map(|ze| cloud.project_scaled(ze)).collect(),
    };
    let targets = fit.stiffness(&z)?;
    let (mse_final, _) = fit.eval(&z)?;
    let max_violation = z
        .iter()
        .map(|ze| -cloud.phi_scaled(ze).0)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Stage1Result {
        centerline: fit.centerline(&targets)?,
        targets,
        mse_initial: history[0].mse,
        mse_final,
        max_violation,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Options {
    pub classes: usize,
    pub v_init: f64,
    pub v_max: f64,
    pub r_min: f64,
    /// Level of `k * f_div` relative to the current property mismatch.
    pub penalty_level: f64,
    pub penalty_every: usize,
    pub max_iter: usize,
    pub move_limit: f64,
    pub perturbation: f64,
    pub seed: u64,
    pub change_tol: f64,
    pub objective_tol: f64,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Self {
            classes: 3,
            v_init: 0.5,
            v_max: 0.95,
            r_min: 3.0,
            penalty_level: 0.05,
            penalty_every: 10,
            max_iter: 200,
            move_limit: 0.2,
            perturbation: 0.05,
            seed: 0,
            change_tol: 0.01,
            objective_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Row {
    pub iter: usize,
    pub f: f64,
    pub mse: f64,
    pub f_div: f64,
    pub k: f64,
    pub change: f64,
    pub min_class_distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Result {
    pub state: DesignState,
    pub mse_initial: f64,
    pub mse_final: f64,
    pub history: Vec<Stage2Row>,
    pub stiffness: Vec<EffectiveStiffness>,
    pub volumes: Vec<f64>,
}

/// Scaled property mismatch `(1/N) sum_e |(C_e - C_t,e) / span|^2` of a
/// design and its gradient over the packed variables.
pub fn property_mismatch(
    model: &MicroModel<'_>,
    s: &DesignState,
    targets: &[Vec<f64>],
    spans: &[f64],
) -> Result<(f64, Vec<f64>, super::model::MicroField)> {
    let micro = model.evaluate(s)?;
    let slots = component_slots(spans.len());
    let nf = s.n_elements() as f64;
    let mut mse = 0.0;
    let mut g_chat = Vec::with_capacity(micro.elems.len());
    let mut g_vhat = Vec::with_capacity(micro.elems.len());
    for (el, t) in micro.elems.iter().zip(targets) {
        let c = el.stiffness.components6();
        let r: Vec<f64> = slots
            .iter()
            .zip(t)
            .zip(spans)
            .map(|((&k, tv), sp)| (c[k] - tv) / sp)
            .collect();
        mse += r.iter().map(|v| v * v).sum::<f64>() / nf;
        // d mse / d C6
        let mut dc = [0.0; 6];
        for ((&k, rv), sp) in slots.iter().zip(&r).zip(spans) {
            dc[k] = 2.0 * rv / (sp * nf);
        }
        g_chat.push(
            el.dc_dchat
                .iter()
                .map(|d| super::model::dot6(d, &dc))
                .collect::<Vec<f64>>(),
        );
        g_vhat.push(super::model::dot6(&el.dc_dvhat, &dc));
    }
    let grad = model.backprop(s, &micro, &g_chat, &g_vhat);
    Ok((mse, grad, micro))
}

/// Microstructure classes, distributions and volumes whose predicted
/// stiffness matches per-element targets on a fixed, fully solid layout.
#[allow(clippy::too_many_arguments)]
pub fn shape_match_stage2(
    targets: &[EffectiveStiffness],
    nx: usize,
    ny: usize,
    basis: &BasisSet,
    surrogate: &SurrogateModel,
    params: BlendParams,
    cloud: &PropertyCloud,
    opts: &Stage2Options,
) -> Result<Stage2Result> {
    if targets.len() != nx * ny {
        return invalid(format!(
            "{} targets for {} elements",
            targets.len(),
            nx * ny
        ));
    }
    if surrogate.n_outputs() != cloud.dim() {
        return invalid("surrogate outputs and property cloud differ in size");
    }
    let model = MicroModel::new(basis, surrogate, params, nx, ny, opts.r_min)?;
    let d = basis.len();
    let m = opts.classes;
    let mut s = DesignState::initial(nx, ny, d, m, opts.v_init, opts.perturbation, opts.seed)?;
    let n = s.n_elements();
    // a volume below the blend's own minimum realizes that minimum but carries no
    // gradient; start just above it so the realized design is unchanged
    let floor = model
        .evaluate(&s)?
        .elems
        .iter()
        .map(|el| el.min_volume)
        .fold(0.0, f64::max);
    s.v.iter_mut()
        .for_each(|v| *v = v.max((floor + 1e-3).min(opts.v_max)));
    let n_c = (d - 1) * m;
    let t: Vec<Vec<f64>> = targets.iter().map(|c| c.components(cloud.dim())).collect();
    let spans: Vec<f64> = (0..cloud.dim()).map(|j| cloud.span(j)).collect();
    let mut lo = vec![0.0; s.n_continuous()];
    let mut hi = vec![1.0; s.n_continuous()];
    let v_min = model.v_min().min(opts.v_init);
    lo[n_c..n_c + n].iter_mut().for_each(|v| *v = v_min);
    hi[n_c..n_c + n].iter_mut().for_each(|v| *v = opts.v_max);
    let mut mma = MmaState::new(
        s.n_continuous(),
        0,
        MmaParams {
            move_limit: opts.move_limit,
            ..Default::default()
        },
    );
    let mut history: Vec<Stage2Row> = Vec::new();
    let mut change = f64::NAN;
    let mut k = 0.0;
    let mut scale = None;
    let mut best: Option<(f64, DesignState, super::model::MicroField, f64)> = None;
    for iter in 1..=opts.max_iter {
        let (mse, grad, micro) = property_mismatch(&model, &s, &t, &spans)?;
        if !mse.is_finite() {
            return Err(Error::Numerical(format!(
                "property mismatch not finite at iteration {iter}"
            )));
        }
        let sc = *scale.get_or_insert(if mse > 0.0 { 1.0 / mse } else { 1.0 });
        let (f_div, g_div) = diversity_penalty(&s.c);
        if (iter - 1) % opts.penalty_every == 0 {
            k = if opts.penalty_level > 0.0 && m > 1 {
                opts.penalty_level * mse * sc / f_div.max(1e-2)
            } else {
                0.0
            };
        }
        let f = mse * sc + k * f_div;
        history.push(Stage2Row {
            iter,
            f,
            mse,
            f_div,
            k,
            change,
            min_class_distance: min_pairwise_distance(&s.c),
        });
        if best.as_ref().is_none_or(|b| f < b.0) {
            best = Some((f, s.clone(), micro, mse));
        }
        let plateau = history.len() > 20 && {
            let fs: Vec<f64> = history.iter().map(|r| r.f).collect();
            let a = fs[fs.len() - 10..].iter().sum::<f64>() / 10.0;
            let b = fs[fs.len() - 20..fs.len() - 10].iter().sum::<f64>() / 10.0;
            (a - b).abs() < opts.objective_tol * a.abs()
        };
        if change < opts.change_tol || plateau || iter == opts.max_iter {
            break;
        }
        let p = s.pack();
        let mut df0: Vec<f64> = grad.iter().map(|g| g * sc).collect();
        for (cls, g) in g_div.iter().enumerate() {
            for (j, gj) in g.iter().enumerate() {
                df0[cls * (d - 1) + j] += k * gj;
            }
        }
        let next = mma.update(&p, &lo, &hi, &df0, Constraints::NONE)?;
        change = p
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        s.unpack(&next);
    }
    let (_, state, micro, mse_final) = best.expect("at least one iteration");
    Ok(Stage2Result {
        volumes: micro.volumes(),
        stiffness: micro.stiffness(),
        state,
        mse_initial: history[0].mse,
        mse_final,
        history,
    })
}

/// Centerline profile of a fully solid layout with the given stiffness.
pub fn centerline_of(
    mesh: &MacroMesh,
    bcs: &BoundaryConditions,
    c: &[EffectiveStiffness],
) -> Result<Vec<f64>> {
    let ke: Vec<Mat8> = c.iter().map(element_stiffness_from_c).collect();
    let sol = assemble_solve(mesh, &ke, &vec![1.0; c.len()], bcs)?;
    Ok(centerline_dofs(mesh)?.iter().map(|&d| sol.u[d]).collect())
}
