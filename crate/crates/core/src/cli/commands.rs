//! Subcommand bodies. Each reads declared upstream artifacts, writes its own
//! outputs under the output directory and a manifest next to them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::io::{
    read_json, sha256_file, sha256_hex, write_csv, write_grid_pgm, write_json, write_pgm, Manifest,
};
use crate::basis::{prepare_basis_set, truss_basis, BasisSet};
use crate::dataset::{generate_dataset, sample_weight_slices, Dataset};
use crate::driver::shape_match::{
    centerline_of, pearson, shape_match_stage1, shape_match_stage2, sine_profile, PropertyCloud,
};
use crate::driver::verify::{assemble_and_verify, realize, VerifyReport};
use crate::driver::{run_compliance, DesignState, MicroModel, StopReason};
use crate::error::{invalid, Result};
use crate::fea::{BoundaryConditions, MacroMesh};
use crate::surrogate::{train_lm, SurrogateModel};

pub const STATE_FILE: &str = "state.json";
pub const RUN_FILE: &str = "run.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const VERIFY_FILE: &str = "verify.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Optimize,
    Match,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeSummary {
    pub stop: StopReason,
    pub iterations: usize,
    pub f_c: f64,
    pub v_global: f64,
    pub v_beso: f64,
    pub min_class_distance: Option<f64>,
    pub class_settle_iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub target: Vec<f64>,
    pub stage1_mse_initial: f64,
    pub stage1_mse_final: f64,
    pub stage1_max_violation: f64,
    pub stage1_iterations: usize,
    pub stage2_mse_initial: f64,
    pub stage2_mse_final: f64,
    pub stage2_iterations: usize,
    /// Centerline of the surrogate stiffness field against the target.
    pub pearson_surrogate: f64,
}

/// Macro problem and design produced by `optimize` or `match`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: RunKind,
    pub nx: usize,
    pub ny: usize,
    pub bcs: BoundaryConditions,
    pub r_min: f64,
    pub state_sha256: String,
    pub optimize: Option<OptimizeSummary>,
    #[serde(rename = "match")]
    pub matching: Option<MatchSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutput {
    pub kind: RunKind,
    pub state_sha256: String,
    pub report: VerifyReport,
    pub centerline: Option<Vec<f64>>,
    pub pearson: Option<f64>,
}

/// Everything a subcommand needs besides its own arguments.
pub struct Context {
    pub config: RunConfig,
    pub config_sha256: String,
}

impl Context {
    pub fn new(config: RunConfig) -> Self {
        // the output location is not part of what a run computes
        let mut hashed = config.clone();
        hashed.paths.out_dir = PathBuf::new();
        let config_sha256 = sha256_hex(hashed.to_toml().as_bytes());
        Self {
            config,
            config_sha256,
        }
    }

    fn out(&self) -> &Path {
        &self.config.paths.out_dir
    }

    fn at(&self, name: &str) -> PathBuf {
        self.out().join(name)
    }

    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, &self.config_sha256, self.config.seed)
    }

    fn finish(&self, m: Manifest) -> Result<PathBuf> {
        let path = self.at(&format!("manifests/{}.json", m.command));
        write_json(&path, &m)?;
        Ok(path)
    }

    fn basis(&self, m: &mut Manifest) -> Result<BasisSet> {
        let dir = self.config.resolve(&self.config.paths.basis_dir);
        let b = BasisSet::load(&dir)?;
        m.input(self.out(), &dir)?;
        Ok(b)
    }

    fn model(&self, m: &mut Manifest) -> Result<SurrogateModel> {
        let path = self.config.resolve(&self.config.paths.model);
        let s = SurrogateModel::load(&path)?;
        m.input(self.out(), &path)?;
        Ok(s)
    }

    fn dataset(&self, m: &mut Manifest) -> Result<Dataset> {
        let path = self.config.resolve(&self.config.paths.dataset);
        let d = Dataset::read_csv(&path)?;
        m.input(self.out(), &path)?;
        Ok(d)
    }

    fn run_record(&self, m: &mut Manifest) -> Result<(RunRecord, DesignState)> {
        let (rp, sp) = (self.at(RUN_FILE), self.at(STATE_FILE));
        let rec: RunRecord = read_json(&rp)?;
        let state = DesignState::load(&sp)?;
        let hash = sha256_file(&sp)?;
        if hash != rec.state_sha256 {
            return invalid(format!(
                "{} does not match the design recorded in {}",
                sp.display(),
                rp.display()
            ));
        }
        m.input(self.out(), &rp)?;
        m.input(self.out(), &sp)?;
        Ok((rec, state))
    }
}

pub fn prepare_basis(ctx: &Context) -> Result<PathBuf> {
    let c = &ctx.config;
    let mut m = ctx.manifest("prepare-basis");
    let bases = c
        .basis
        .presets
        .iter()
        .map(|p| truss_basis(p, c.basis.resolution, c.basis.halfwidth))
        .collect::<Result<_>>()?;
    let set = prepare_basis_set(bases, &c.basis.prepare_options())?;
    let dir = c.resolve(&c.paths.basis_dir);
    set.save(&dir)?;
    m.output(ctx.out(), &dir)?;
    log::info!("basis: {} classes, v_min {:.3}", set.len(), set.v_min);
    ctx.finish(m)
}

pub fn gen_dataset(ctx: &Context) -> Result<PathBuf> {
    let c = &ctx.config;
    let mut m = ctx.manifest("gen-dataset");
    let basis = ctx.basis(&mut m)?;
    let w = sample_weight_slices(basis.len(), c.dataset.per_slice, c.seed)?;
    let (ds, report) = generate_dataset(
        &basis,
        &w,
        &c.blend,
        &c.material,
        &c.dataset.options(c.seed),
    )?;
    let path = c.resolve(&c.paths.dataset);
    ds.write_csv(&path)?;
    let rp = ctx.at("dataset_report.json");
    write_json(&rp, &report)?;
    m.output(ctx.out(), &path)?;
    m.output(ctx.out(), &rp)?;
    log::info!("dataset: {} records", report.records);
    ctx.finish(m)
}

pub fn train(ctx: &Context) -> Result<PathBuf> {
    let c = &ctx.config;
    let mut m = ctx.manifest("train");
    let ds = ctx.dataset(&mut m)?;
    let (model, report) = train_lm(&ds.train_data(), &c.train.options(c.seed))?;
    let path = c.resolve(&c.paths.model);
    model.save(&path)?;
    let rp = ctx.at("train_report.json");
    write_json(&rp, &report)?;
    m.output(ctx.out(), &path)?;
    m.output(ctx.out(), &rp)?;
    log::info!("train: test R2 {:?}", report.test.r2);
    ctx.finish(m)
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn optimize(ctx: &Context) -> Result<PathBuf> {
    let c = &ctx.config;
    let mut m = ctx.manifest("optimize");
    let basis = ctx.basis(&mut m)?;
    let model = ctx.model(&mut m)?;
    let (mesh, bcs) = c.optimize.problem()?;
    let opts = crate::driver::ComplianceOptions {
        seed: c.seed,
        ..c.optimize.options.clone()
    };
    let run = run_compliance(&basis, &model, c.blend, &mesh, &bcs, &opts)?;
    let sp = ctx.at(STATE_FILE);
    run.state.save(&sp)?;
    let hp = ctx.at(HISTORY_FILE);
    write_csv(&hp, &run.history)?;
    let rec = RunRecord {
        kind: RunKind::Optimize,
        nx: mesh.nx,
        ny: mesh.ny,
        bcs,
        r_min: opts.r_min,
        state_sha256: sha256_file(&sp)?,
        optimize: Some(OptimizeSummary {
            stop: run.stop,
            iterations: run.iterations(),
            f_c: run.f_c,
            v_global: run.v_global,
            v_beso: run.v_beso,
            min_class_distance: finite(run.min_class_distance()),
            class_settle_iteration: run.class_settle_iteration(0.01),
        }),
        matching: None,
    };
    let rp = ctx.at(RUN_FILE);
    write_json(&rp, &rec)?;
    for p in [&sp, &hp, &rp] {
        m.output(ctx.out(), p)?;
    }
    log::info!(
        "optimize: {:?} after {} iterations, f_c {:.4}",
        run.stop,
        run.iterations(),
        run.f_c
    );
    ctx.finish(m)
}

pub fn match_shape(ctx: &Context) -> Result<PathBuf> {
    let c = &ctx.config;
    let mc = &c.matching;
    let mut m = ctx.manifest("match");
    let basis = ctx.basis(&mut m)?;
    let model = ctx.model(&mut m)?;
    let ds = ctx.dataset(&mut m)?;
    let raw: Vec<Vec<f64>> = ds.records.iter().map(|r| r.c.clone()).collect();
    let cloud = PropertyCloud::new(&raw, mc.stage1.k_nn, mc.stage1.coverage)?;
    let (mesh, bcs) = mc.problem()?;
    let target = sine_profile(mc.nx, mc.amplitude, mc.wavelength());
    let s1 = shape_match_stage1(&mesh, &bcs, &target, &cloud, &mc.stage1)?;
    let o2 = crate::driver::shape_match::Stage2Options {
        seed: c.seed,
        ..mc.stage2.clone()
    };
    let s2 = shape_match_stage2(
        &s1.targets,
        mc.nx,
        mc.ny,
        &basis,
        &model,
        c.blend,
        &cloud,
        &o2,
    )?;
    let u_sur = centerline_of(&mesh, &bcs, &s2.stiffness)?;

    let tp = ctx.at("stage1.json");
    write_json(&tp, &s1)?;
    let h1 = ctx.at("stage1_history.csv");
    write_csv(&h1, &s1.history)?;
    let sp = ctx.at(STATE_FILE);
    s2.state.save(&sp)?;
    let hp = ctx.at(HISTORY_FILE);
    write_csv(&hp, &s2.history)?;
    let rec = RunRecord {
        kind: RunKind::Match,
        nx: mc.nx,
        ny: mc.ny,
        bcs,
        r_min: o2.r_min,
        state_sha256: sha256_file(&sp)?,
        optimize: None,
        matching: Some(MatchSummary {
            target: target.clone(),
            stage1_mse_initial: s1.mse_initial,
            stage1_mse_final: s1.mse_final,
            stage1_max_violation: s1.max_violation,
            stage1_iterations: s1.history.len(),
            stage2_mse_initial: s2.mse_initial,
            stage2_mse_final: s2.mse_final,
            stage2_iterations: s2.history.len(),
            pearson_surrogate: pearson(&u_sur, &target),
        }),
    };
    let rp = ctx.at(RUN_FILE);
    write_json(&rp, &rec)?;
    for p in [&tp, &h1, &sp, &hp, &rp] {
        m.output(ctx.out(), p)?;
    }
    log::info!(
        "match: stage 1 MSE {:.3e} -> {:.3e}, stage 2 MSE {:.3e} -> {:.3e}",
        s1.mse_initial,
        s1.mse_final,
        s2.mse_initial,
        s2.mse_final
    );
    ctx.finish(m)
}

pub fn verify(ctx: &Context) -> Result<PathBuf> {
    let c = &ctx.config;
    let mut m = ctx.manifest("verify");
    let (rec, state) = ctx.run_record(&mut m)?;
    let basis = ctx.basis(&mut m)?;
    let model = ctx.model(&mut m)?;
    let micro = MicroModel::new(&basis, &model, c.blend, rec.nx, rec.ny, rec.r_min)?;
    let predicted = micro.evaluate(&state)?.stiffness();
    let v = assemble_and_verify(
        &state,
        &basis,
        &c.blend,
        &c.material,
        &rec.bcs,
        rec.r_min,
        Some(&predicted),
    )?;
    let (centerline, corr) = match &rec.matching {
        Some(ms) => {
            let mesh = MacroMesh::new(rec.nx, rec.ny)?;
            let u = centerline_of(&mesh, &rec.bcs, &v.stiffness)?;
            let r = pearson(&u, &ms.target);
            (Some(u), Some(r))
        }
        None => (None, None),
    };
    let out = VerifyOutput {
        kind: rec.kind,
        state_sha256: rec.state_sha256,
        report: v.report,
        centerline,
        pearson: corr,
    };
    let vp = ctx.at(VERIFY_FILE);
    write_json(&vp, &out)?;
    m.output(ctx.out(), &vp)?;
    log::info!("verify: f_c {:.4}", out.report.f_c_verified);
    ctx.finish(m)
}

/// Full-resolution structure image plus one share image per class.
pub fn export(ctx: &Context, format: &str) -> Result<PathBuf> {
    if format != "pgm" {
        return invalid(format!("unsupported export format '{format}'"));
    }
    let c = &ctx.config;
    let mut m = ctx.manifest("export");
    let (rec, state) = ctx.run_record(&mut m)?;
    let basis = ctx.basis(&mut m)?;
    let v = assemble_and_verify(
        &state,
        &basis,
        &c.blend,
        &c.material,
        &rec.bcs,
        rec.r_min,
        None,
    )?;
    let dir = ctx.at("images");
    let sp = dir.join("structure.pgm");
    write_grid_pgm(&sp, &v.image)?;
    m.output(ctx.out(), &sp)?;
    let elems = realize(&state, &basis, &c.blend, rec.r_min)?;
    let n = basis.nx();
    let (w, h) = (state.nx * n, state.ny * n);
    for k in 0..state.n_classes() {
        let px: Vec<f64> = (0..w * h)
            .map(|p| {
                let e = (p / w / n) * state.nx + (p % w) / n;
                if crate::driver::compliance::is_solid(state.x[e]) {
                    elems[e].shares[k]
                } else {
                    0.0
                }
            })
            .collect();
        let path = dir.join(format!("class_{k}.pgm"));
        write_pgm(&path, w, h, &px)?;
        m.output(ctx.out(), &path)?;
    }
    ctx.finish(m)
}
