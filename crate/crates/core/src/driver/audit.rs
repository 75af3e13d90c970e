//! Central finite-difference checks of the optimizer sensitivities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::compliance::{evaluate_compliance, stiffness_basis};
use super::model::MicroModel;
use super::shape_match::{property_mismatch, sine_profile, CenterlineFit, PropertyCloud};
use super::state::DesignState;
use crate::basis::BasisSet;
use crate::blend::BlendParams;
use crate::error::Result;
use crate::fea::{BoundaryConditions, MacroMesh, X_MIN};
use crate::surrogate::{Activation, SurrogateModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
}

impl AuditEntry {
    pub fn pass(&self) -> bool {
        self.rel_err <= self.tol
    }
}

/// `max |fd - g| / max |g|` over the coordinates in `idx`.
pub fn fd_rel_err(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    h: f64,
    idx: &[usize],
) -> f64 {
    let (mut err, mut scale) = (0.0f64, 0.0f64);
    let mut xp = x.to_vec();
    for &i in idx {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        err = err.max((fd - grad[i]).abs());
        scale = scale.max(grad[i].abs()).max(fd.abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        err / scale
    }
}

/// Small randomly initialized network with outputs spread over a plausible
/// orthotropic stiffness range; used where a trained model is not needed.
pub fn smoke_surrogate(d: usize, seed: u64) -> Result<SurrogateModel> {
    let mut m = SurrogateModel::init(d + 1, &[8], 4, Activation::Tanh, seed)?;
    m.input_norm.lo = vec![0.0; d + 1];
    m.input_norm.hi = vec![1.0; d + 1];
    m.output_norm.lo = vec![0.15, 0.02, 0.15, 0.04];
    m.output_norm.hi = vec![0.45, 0.10, 0.45, 0.12];
    if let Some(last) = m.layers.last_mut() {
        last.w.iter_mut().for_each(|w| *w *= 0.4);
    }
    Ok(m)
}

/// Interior random design on an `nx x ny` mesh with one void element.
pub fn audit_state(
    model: &MicroModel<'_>,
    nx: usize,
    ny: usize,
    m: usize,
    seed: u64,
) -> Result<DesignState> {
    let d = model.basis.len();
    let mut s = DesignState::initial(nx, ny, d, m, 0.9, 0.15, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa0d1);
    let lo = model.v_min() + 0.1;
    s.v.iter_mut().for_each(|v| *v = rng.gen_range(lo..0.95));
    s.xi.iter_mut()
        .flatten()
        .for_each(|v| *v = rng.gen_range(0.2..0.8));
    s.x[nx * ny / 2] = X_MIN;
    Ok(s)
}

/// Compliance and global-volume gradients on a 4x2 cantilever.
pub fn compliance_audit(
    basis: &BasisSet,
    surrogate: &SurrogateModel,
    params: BlendParams,
) -> Result<Vec<AuditEntry>> {
    let (nx, ny) = (4, 2);
    let model = MicroModel::new(basis, surrogate, params, nx, ny, 1.5)?;
    let mesh = MacroMesh::new(nx, ny)?;
    let bcs = BoundaryConditions::cantilever(&mesh, 1.0);
    let kb = stiffness_basis();
    let s = audit_state(&model, nx, ny, 2, 11)?;
    let ev = evaluate_compliance(&model, &bcs, &s, &kb)?;
    let p = s.pack();
    let idx: Vec<usize> = (0..p.len()).collect();
    let at = |q: &[f64]| {
        let mut t = s.clone();
        t.unpack(q);
        evaluate_compliance(&model, &bcs, &t, &kb).expect("perturbed design evaluates")
    };
    let h = 1e-6;
    let fc = fd_rel_err(|q| at(q).f_c, &p, &ev.d_fc, h, &idx);
    let vg = fd_rel_err(|q| at(q).v_global, &p, &ev.d_vglobal, h, &idx);
    Ok(vec![
        AuditEntry {
            name: "compliance".into(),
            rel_err: fc,
            tol: 1e-3,
        },
        AuditEntry {
            name: "global_volume".into(),
            rel_err: vg,
            tol: 1e-3,
        },
    ])
}

/// Property cloud sampled from a surrogate at random blends and volumes.
pub fn smoke_cloud(surrogate: &SurrogateModel, n: usize, seed: u64) -> Result<PropertyCloud> {
    let d = surrogate.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = Vec::with_capacity(n);
    for _ in 0..n {
        let w: Vec<f64> = (0..d).map(|_| -rng.gen_range(1e-9f64..1.0).ln()).collect();
        let sum: f64 = w.iter().sum();
        let c: Vec<f64> = w.iter().map(|v| v / sum).collect();
        let c = surrogate.predict(&c, rng.gen_range(0.3..0.95))?;
        raw.push(c.components(surrogate.n_outputs()));
    }
    PropertyCloud::new(&raw, 5, 0.9)
}

/// Centerline-mismatch adjoint on a 4x2 stretched strip.
pub fn stage1_audit(cloud: &PropertyCloud, seed: u64) -> Result<AuditEntry> {
    let mesh = MacroMesh::new(4, 2)?;
    let bcs = BoundaryConditions::clamped_stretch(&mesh, 0.8);
    let target = sine_profile(4, 0.01, 4.0);
    let fit = CenterlineFit::new(&mesh, &bcs, &target, cloud)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = cloud.dim();
    let p: Vec<f64> = (0..mesh.n_elements() * dim)
        .map(|_| rng.gen_range(0.2..0.8))
        .collect();
    let split = |q: &[f64]| -> Vec<Vec<f64>> { q.chunks(dim).map(<[f64]>::to_vec).collect() };
    let (_, g) = fit.eval(&split(&p))?;
    let g: Vec<f64> = g.concat();
    let idx: Vec<usize> = (0..p.len()).collect();
    let err = fd_rel_err(
        |q| fit.eval(&split(q)).expect("stiffness stays valid").0,
        &p,
        &g,
        1e-6,
        &idx,
    );
    Ok(AuditEntry {
        name: "stage1_adjoint".into(),
        rel_err: err,
        tol: 1e-4,
    })
}

/// Property-mismatch gradient on a 4x2 layout against random cloud targets.
pub fn stage2_audit(
    basis: &BasisSet,
    surrogate: &SurrogateModel,
    params: BlendParams,
    cloud: &PropertyCloud,
) -> Result<AuditEntry> {
    let (nx, ny) = (4, 2);
    let model = MicroModel::new(basis, surrogate, params, nx, ny, 1.5)?;
    let s = audit_state(&model, nx, ny, 2, 17)?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let targets: Vec<Vec<f64>> = (0..nx * ny)
        .map(|_| {
            cloud.unscale(
                &(0..cloud.dim())
                    .map(|_| rng.gen_range(0.2..0.8))
                    .collect::<Vec<f64>>(),
            )
        })
        .collect();
    let spans: Vec<f64> = (0..cloud.dim()).map(|j| cloud.span(j)).collect();
    let (_, g, _) = property_mismatch(&model, &s, &targets, &spans)?;
    let p = s.pack();
    let idx: Vec<usize> = (0..p.len()).collect();
    let at = |q: &[f64]| {
        let mut t = s.clone();
        t.unpack(q);
        property_mismatch(&model, &t, &targets, &spans)
            .expect("perturbed design evaluates")
            .0
    };
    let err = fd_rel_err(at, &p, &g, 1e-6, &idx);
    Ok(AuditEntry {
        name: "stage2_mismatch".into(),
        rel_err: err,
        tol: 1e-3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::testutil::basis20;

    #[test]
    fn smoke_problem_passes() {
        let sur = smoke_surrogate(3, 5).unwrap();
        for e in compliance_audit(basis20(), &sur, BlendParams::default()).unwrap() {
            assert!(e.pass(), "{}: {}", e.name, e.rel_err);
        }
    }

    #[test]
    fn shape_matching_gradients() {
        let sur = smoke_surrogate(3, 5).unwrap();
        let cloud = smoke_cloud(&sur, 300, 1).unwrap();
        let e1 = stage1_audit(&cloud, 3).unwrap();
        assert!(e1.pass(), "{}", e1.rel_err);
        let e2 = stage2_audit(basis20(), &sur, BlendParams::default(), &cloud).unwrap();
        assert!(e2.pass(), "{}", e2.rel_err);
    }
}
