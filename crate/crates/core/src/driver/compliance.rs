//! Concurrent compliance minimization: BESO on the macro layout, MMA on the
//! classes, their distribution and the element volumes.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diversity::{diversity_penalty, min_pairwise_distance};
use super::model::{comp6, dot6, Comp6, MicroField, MicroModel};
use super::schedule::Schedules;
use super::state::DesignState;
use crate::basis::BasisSet;
use crate::blend::BlendParams;
use crate::error::{invalid, Error, Result};
use crate::fea::{assemble_solve, quad_form, BoundaryConditions, MacroMesh, SolveResult};
use crate::homogenize::{element_stiffness_from_c, EffectiveStiffness, Mat8};
use crate::optim::mma::Constraints;
use crate::optim::{BesoState, MmaParams, MmaState};
use crate::surrogate::SurrogateModel;

/// Element matrices of the six unit Voigt components; `k(C)` is linear in `C`.
pub fn stiffness_basis() -> Vec<Mat8> {
    (0..6)
        .map(|j| element_stiffness_from_c(&EffectiveStiffness::component_basis(6, j)))
        .collect()
}

/// `W_e[j] = u_e^T k(E_j) u_e`, so that `u_e^T k(C) u_e = C . W_e`.
pub fn element_energies(mesh: &MacroMesh, sol: &SolveResult, kb: &[Mat8]) -> Vec<Comp6> {
    (0..mesh.n_elements())
        .into_par_iter()
        .map(|e| {
            let ue = sol.element_u(mesh, e);
            let mut w = [0.0; 6];
            for (j, k) in kb.iter().enumerate() {
                w[j] = quad_form(k, &ue, &ue);
            }
            w
        })
        .collect()
}

pub fn is_solid(x: f64) -> bool {
    x >= 0.5
}

#[derive(Debug, Clone)]
pub struct ComplianceEval {
    pub micro: MicroField,
    pub u: Vec<f64>,
    pub f_c: f64,
    pub energy: Vec<Comp6>,
    /// `sum_e x_e v_e / N` over solid elements, with realized volumes.
    pub v_global: f64,
    pub v_beso: f64,
    /// BESO sensitivity numbers `x_e^(p-1) u_e^T k_e u_e` with `p = 3`.
    pub alpha: Vec<f64>,
    /// Gradients over the packed `[c, v, xi]` variables.
    pub d_fc: Vec<f64>,
    pub d_vglobal: Vec<f64>,
}

pub fn evaluate_compliance(
    model: &MicroModel<'_>,
    bcs: &BoundaryConditions,
    s: &DesignState,
    kb: &[Mat8],
) -> Result<ComplianceEval> {
    let micro = model.evaluate(s)?;
    let mesh = MacroMesh::new(s.nx, s.ny)?;
    let ke: Vec<Mat8> = micro
        .elems
        .par_iter()
        .map(|el| element_stiffness_from_c(&el.stiffness))
        .collect();
    let sol = assemble_solve(&mesh, &ke, &s.x, bcs)?;
    if !sol.compliance.is_finite() {
        return Err(Error::Numerical("compliance is not finite".into()));
    }
    let energy = element_energies(&mesh, &sol, kb);
    let n = s.n_elements();
    let nf = n as f64;
    let mut g_chat = Vec::with_capacity(n);
    let mut g_vhat = Vec::with_capacity(n);
    let mut v_chat = Vec::with_capacity(n);
    let mut v_vhat = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let (mut v_global, mut solid) = (0.0, 0usize);
    for (e, el) in micro.elems.iter().enumerate() {
        let w = &energy[e];
        let xe = s.x[e];
        g_chat.push(
            el.dc_dchat
                .iter()
                .map(|dc| -xe * dot6(dc, w))
                .collect::<Vec<f64>>(),
        );
        g_vhat.push(-xe * dot6(&el.dc_dvhat, w));
        alpha.push(xe * xe * dot6(&comp6(&el.stiffness), w).max(0.0));
        let on = if is_solid(xe) { 1.0 } else { 0.0 };
        v_global += on * el.volume;
        solid += on as usize;
        v_chat.push(
            el.dvol_dchat
                .iter()
                .map(|g| on * g / nf)
                .collect::<Vec<f64>>(),
        );
        v_vhat.push(on * el.dvol_dvhat / nf);
    }
    let d_fc = model.backprop(s, &micro, &g_chat, &g_vhat);
    let d_vglobal = model.backprop(s, &micro, &v_chat, &v_vhat);
    Ok(ComplianceEval {
        micro,
        u: sol.u,
        f_c: sol.compliance,
        energy,
        v_global: v_global / nf,
        v_beso: solid as f64 / nf,
        alpha,
        d_fc,
        d_vglobal,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComplianceOptions {
    /// Number of new classes `M`.
    pub classes: usize,
    pub volume_target: f64,
    pub v_init: f64,
    pub v_max: f64,
    pub r_min: f64,
    pub er: f64,
    /// Level of `k * f_div` relative to the current compliance term.
    pub penalty_level: f64,
    pub penalty_every: usize,
    pub max_iter: usize,
    pub patience: usize,
    pub change_tol: f64,
    pub objective_tol: f64,
    pub perturbation: f64,
    pub seed: u64,
    pub move_limit: f64,
    /// Class weights held fixed (single-class baselines).
    pub fixed_classes: Option<Vec<Vec<f64>>>,
}

impl Default for ComplianceOptions {
    fn default() -> Self {
        Self {
            classes: 2,
            volume_target: 0.36,
            v_init: 0.95,
            v_max: 0.95,
            r_min: 3.0,
            er: 0.05,
            penalty_level: 0.05,
            penalty_every: 10,
            max_iter: 200,
            patience: 20,
            change_tol: 0.01,
            objective_tol: 0.01,
            perturbation: 0.05,
            seed: 0,
            move_limit: 0.2,
            fixed_classes: None,
        }
    }
}

impl ComplianceOptions {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return invalid("at least one class is required");
        }
        if !(self.volume_target > 0.0 && self.volume_target < self.v_max && self.v_max <= 1.0) {
            return invalid(format!(
                "volume target {} must lie in (0, v_max)",
                self.volume_target
            ));
        }
        if !(self.v_init > 0.0 && self.v_init <= self.v_max) {
            return invalid("v_init must lie in (0, v_max]");
        }
        if !(self.er > 0.0 && self.er <= 1.0) || self.penalty_level < 0.0 || self.penalty_every == 0
        {
            return invalid("er must be in (0, 1], penalty_level >= 0 and penalty_every >= 1");
        }
        if !(self.move_limit > 0.0 && self.move_limit <= 1.0) || self.max_iter == 0 {
            return invalid("move_limit must be in (0, 1] and max_iter positive");
        }
        if let Some(f) = &self.fixed_classes {
            if f.len() != self.classes {
                return invalid(format!(
                    "{} fixed classes given for M = {}",
                    f.len(),
                    self.classes
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub f: f64,
    pub f_c: f64,
    pub f_div: f64,
    pub k: f64,
    pub v_global: f64,
    pub v_beso: f64,
    pub v_global_limit: f64,
    pub v_beso_limit: f64,
    /// Largest change of the continuous variables in the previous update.
    pub change: f64,
    pub class_change: f64,
    pub min_class_distance: f64,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    DesignChange,
    ObjectivePlateau,
    NoImprovement,
    MaxIterations,
}

impl StopReason {
    pub fn converged(self) -> bool {
        self != StopReason::MaxIterations
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplianceRun {
    pub state: DesignState,
    pub history: Vec<HistoryRow>,
    pub stop: StopReason,
    pub f_c: f64,
    pub v_global: f64,
    pub v_beso: f64,
    /// Realized element volumes of the final state.
    pub volumes: Vec<f64>,
    pub stiffness: Vec<EffectiveStiffness>,
}

impl ComplianceRun {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    /// First iteration after which the class weights never move by
    /// `tol` or more again.
    pub fn class_settle_iteration(&self, tol: f64) -> usize {
        self.history
            .iter()
            .rposition(|r| r.class_change >= tol)
            .map_or(1, |p| self.history[p].iter + 1)
    }

    pub fn min_class_distance(&self) -> f64 {
        min_pairwise_distance(&self.state.c)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn run_compliance(
    basis: &BasisSet,
    surrogate: &SurrogateModel,
    params: BlendParams,
    mesh: &MacroMesh,
    bcs: &BoundaryConditions,
    opts: &ComplianceOptions,
) -> Result<ComplianceRun> {
    opts.validate()?;
    let model = MicroModel::new(basis, surrogate, params, mesh.nx, mesh.ny, opts.r_min)?;
    let d = basis.len();
    let m = opts.classes;
    let n = mesh.n_elements();
    let mut s = DesignState::initial(
        mesh.nx,
        mesh.ny,
        d,
        m,
        opts.v_init,
        opts.perturbation,
        opts.seed,
    )?;
    if let Some(f) = &opts.fixed_classes {
        s.c = f.clone();
    }
    s.validate()?;
    let n_c = (d - 1) * m;
    let v_min = model.v_min().min(opts.v_init);
    let mut lo = vec![0.0; s.n_continuous()];
    let mut hi = vec![1.0; s.n_continuous()];
    lo[n_c..n_c + n].iter_mut().for_each(|v| *v = v_min);
    hi[n_c..n_c + n].iter_mut().for_each(|v| *v = opts.v_max);
    if opts.fixed_classes.is_some() {
        let p = s.pack();
        lo[..n_c].copy_from_slice(&p[..n_c]);
        hi[..n_c].copy_from_slice(&p[..n_c]);
    }
    let kb = stiffness_basis();
    let mut mma = MmaState::new(
        s.n_continuous(),
        1,
        MmaParams {
            move_limit: opts.move_limit,
            ..Default::default()
        },
    );
    let mut beso = BesoState::new(n, opts.er)?;
    let mut sched = Schedules::new(
        opts.volume_target,
        opts.volume_target / opts.v_max,
        opts.penalty_level,
    );
    let mut history: Vec<HistoryRow> = Vec::new();
    let (mut change, mut class_change) = (f64::NAN, f64::NAN);
    let mut f_scale = None;
    let mut met_at: Option<usize> = None;
    let mut best = (f64::INFINITY, 0usize);

    let mut kept: Option<(f64, DesignState, ComplianceEval)> = None;

    for i in 1.. {
        s.x.clone_from(&beso.x);
        let ev = evaluate_compliance(&model, bcs, &s, &kb)?;
        sched.adaptive_volume_update(i, ev.v_global, ev.v_beso);
        // keep the global limit reachable with the volumes the classes allow
        let solid_min: Vec<f64> = ev
            .micro
            .elems
            .iter()
            .zip(&s.x)
            .filter(|(_, x)| is_solid(**x))
            .map(|(el, _)| el.min_volume)
            .collect();
        if !solid_min.is_empty() {
            let reach = sched.global_current / mean(&solid_min);
            sched.beso_current = sched.beso_current.min(reach.max(sched.beso_target));
        }
        let (f_div, g_div) = diversity_penalty(&s.c);
        let scale = *f_scale.get_or_insert(ev.f_c);
        if (i - 1) % opts.penalty_every == 0 {
            sched.rescale_penalty(f_div, ev.f_c / scale);
        }
        let f = ev.f_c / scale + sched.k * f_div;
        if !f.is_finite() {
            return Err(Error::Numerical(format!(
                "objective not finite at iteration {i}"
            )));
        }
        history.push(HistoryRow {
            iter: i,
            f,
            f_c: ev.f_c,
            f_div,
            k: sched.k,
            v_global: ev.v_global,
            v_beso: ev.v_beso,
            v_global_limit: sched.global_current,
            v_beso_limit: sched.beso_current,
            change,
            class_change,
            min_class_distance: min_pairwise_distance(&s.c),
        });
        log::debug!(
            "iter {i}: f_c {:.4} V {:.4}/{:.4} B {:.4}/{:.4}",
            ev.f_c,
            ev.v_global,
            sched.global_current,
            ev.v_beso,
            sched.beso_current
        );

        let feasible = sched.global_reached()
            && ev.v_global <= opts.volume_target + 1e-3
            && ev.v_beso <= sched.beso_current + 1.0 / n as f64 + 1e-12;
        let mut stop = None;
        if feasible {
            let t0 = *met_at.get_or_insert(i);
            if kept.as_ref().is_none_or(|k| f < k.0) {
                best = (f, i);
                kept = Some((f, s.clone(), ev.clone()));
            }
            if change < opts.change_tol {
                stop = Some(StopReason::DesignChange);
            } else if i >= t0 + 10 && history.len() >= 20 {
                let fs: Vec<f64> = history.iter().map(|r| r.f).collect();
                let (a, b) = (
                    mean(&fs[fs.len() - 10..]),
                    mean(&fs[fs.len() - 20..fs.len() - 10]),
                );
                if (a - b).abs() / a.abs().max(1e-300) < opts.objective_tol {
                    stop = Some(StopReason::ObjectivePlateau);
                }
            }
            if stop.is_none() && i >= best.1 + opts.patience {
                stop = Some(StopReason::NoImprovement);
            }
        }
        if stop.is_none() && i >= opts.max_iter {
            stop = Some(StopReason::MaxIterations);
        }
        if let Some(stop) = stop {
            // the best feasible iterate if there is one, else the last
            let (state, ev) = match kept {
                Some((_, ks, kev)) => (ks, kev),
                None => (s, ev),
            };
            return Ok(ComplianceRun {
                volumes: ev.micro.volumes(),
                stiffness: ev.micro.stiffness(),
                state,
                history,
                stop,
                f_c: ev.f_c,
                v_global: ev.v_global,
                v_beso: ev.v_beso,
            });
        }

        beso.update(&ev.alpha, sched.beso_current, Some(&model.filter))?;
        let p = s.pack();
        let mut df0: Vec<f64> = ev.d_fc.iter().map(|g| g / scale).collect();
        for (cls, g) in g_div.iter().enumerate() {
            for (k, gk) in g.iter().enumerate() {
                df0[cls * (d - 1) + k] += sched.k * gk;
            }
        }
        let vlim = sched.global_current;
        let g1 = [ev.v_global / vlim - 1.0];
        let dg1 = [ev.d_vglobal.iter().map(|g| g / vlim).collect::<Vec<f64>>()];
        let next = mma.update(
            &p,
            &lo,
            &hi,
            &df0,
            Constraints {
                values: &g1,
                grads: &dg1,
            },
        )?;
        change = p
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        class_change = p[..n_c]
            .iter()
            .zip(&next[..n_c])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        s.unpack(&next);
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::audit::{audit_state, fd_rel_err, smoke_surrogate};
    use crate::driver::testutil::basis20;
    use crate::fea::X_MIN;

    fn setup() -> (SurrogateModel, BlendParams) {
        (smoke_surrogate(3, 2).unwrap(), BlendParams::default())
    }

    #[test]
    fn clamped_elements_have_exact_gradients() {
        let (sur, bp) = setup();
        let model = MicroModel::new(basis20(), &sur, bp, 4, 2, 1.0).unwrap();
        let mesh = MacroMesh::new(4, 2).unwrap();
        let bcs = BoundaryConditions::cantilever(&mesh, 1.0);
        let kb = stiffness_basis();
        let mut s = audit_state(&model, 4, 2, 2, 3).unwrap();
        s.v[1] = model.v_min();
        s.v[6] = model.v_min();
        let ev = evaluate_compliance(&model, &bcs, &s, &kb).unwrap();
        assert!(ev.micro.elems[1].clamped && ev.micro.elems[6].clamped);
        assert!(ev.micro.elems.iter().any(|e| !e.clamped));
        let p = s.pack();
        let idx: Vec<usize> = (0..p.len()).filter(|&i| i != 4 + 1 && i != 4 + 6).collect();
        let at = |q: &[f64]| {
            let mut t = s.clone();
            t.unpack(q);
            evaluate_compliance(&model, &bcs, &t, &kb).unwrap()
        };
        assert!(fd_rel_err(|q| at(q).f_c, &p, &ev.d_fc, 1e-6, &idx) < 1e-4);
        assert!(fd_rel_err(|q| at(q).v_global, &p, &ev.d_vglobal, 1e-6, &idx) < 1e-4);
        // clamped volume variables have no effect
        assert_eq!(ev.d_fc[4 + 1], 0.0);
    }

    #[test]
    fn void_elements_carry_no_gradient() {
        let (sur, bp) = setup();
        let model = MicroModel::new(basis20(), &sur, bp, 4, 2, 1.0).unwrap();
        let mesh = MacroMesh::new(4, 2).unwrap();
        let bcs = BoundaryConditions::cantilever(&mesh, 1.0);
        let mut s = audit_state(&model, 4, 2, 2, 3).unwrap();
        s.x[5] = X_MIN;
        let ev = evaluate_compliance(&model, &bcs, &s, &stiffness_basis()).unwrap();
        let gmax = ev.d_fc[4..12].iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(ev.d_fc[4 + 5].abs() < 1e-6 * gmax);
        assert_eq!(ev.d_vglobal[4 + 5], 0.0);
        assert!((ev.v_beso - 6.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_design_on_symmetric_problem_has_symmetric_gradient() {
        let (sur, bp) = setup();
        let model = MicroModel::new(basis20(), &sur, bp, 4, 2, 1.5).unwrap();
        let mesh = MacroMesh::new(4, 2).unwrap();
        // clamped left, pulled right: mirror-symmetric about the mid-height line
        let bcs = BoundaryConditions::clamped_stretch(&mesh, 0.1);
        let s = DesignState::initial(4, 2, 3, 1, 0.8, 0.0, 0).unwrap();
        let ev = evaluate_compliance(&model, &bcs, &s, &stiffness_basis()).unwrap();
        let gv = &ev.d_fc[2..10];
        for i in 0..4 {
            assert!((gv[i] - gv[4 + i]).abs() <= 1e-9 * gv[i].abs().max(1e-12));
        }
    }

    #[test]
    fn rejects_mismatched_surrogate() {
        let sur = smoke_surrogate(4, 1).unwrap();
        assert!(MicroModel::new(basis20(), &sur, BlendParams::default(), 4, 2, 1.5).is_err());
    }
}
