//! Run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basis::{PrepareOptions, TRUSS_PRESETS};
use crate::blend::BlendParams;
use crate::dataset::{DatasetOptions, Responses};
use crate::driver::shape_match::{Stage1Options, Stage2Options};
use crate::driver::ComplianceOptions;
use crate::error::{invalid, Error, Result};
use crate::fea::{BoundaryConditions, MacroMesh};
use crate::homogenize::MaterialModel;
use crate::surrogate::TrainOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    /// Seeds dataset sampling, training and optimizer initialization.
    pub seed: u64,
    pub paths: Paths,
    pub basis: BasisConfig,
    pub blend: BlendParams,
    pub material: MaterialModel,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub optimize: OptimizeConfig,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
}


/// Artifact locations; relative paths are taken inside the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub basis_dir: PathBuf,
    pub dataset: PathBuf,
    pub model: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: "out".into(),
            basis_dir: "basis".into(),
            dataset: "dataset.csv".into(),
            model: "model.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub presets: Vec<String>,
    /// Microcell resolution `n` (cells per side).
    pub resolution: usize,
    /// Bar half-width as a fraction of the cell.
    pub halfwidth: f64,
    pub v_star: f64,
    pub min_feature_px: usize,
    pub v_max: f64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        let p = PrepareOptions::default();
        Self {
            presets: TRUSS_PRESETS.iter().map(|s| s.to_string()).collect(),
            resolution: 50,
            halfwidth: 0.1,
            v_star: p.v_star,
            min_feature_px: p.min_feature_px,
            v_max: p.v_max,
        }
    }
}

impl BasisConfig {
    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            v_star: self.v_star,
            min_feature_px: self.min_feature_px,
            v_max: self.v_max,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Weight samples per nonempty subset of the bases.
    pub per_slice: usize,
    pub n_volumes: usize,
    pub v_max: f64,
    pub responses: Responses,
    pub orthotropic_rtol: f64,
    pub split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let d = DatasetOptions::default();
        Self {
            per_slice: d.per_slice,
            n_volumes: d.n_volumes,
            v_max: d.v_max,
            responses: d.responses,
            orthotropic_rtol: d.orthotropic_rtol,
            split: d.split,
        }
    }
}

impl DatasetConfig {
    pub fn options(&self, seed: u64) -> DatasetOptions {
        DatasetOptions {
            per_slice: self.per_slice,
            n_volumes: self.n_volumes,
            v_max: self.v_max,
            seed,
            responses: self.responses,
            orthotropic_rtol: self.orthotropic_rtol,
            split: self.split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub mu_init: f64,
    pub mu_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            hidden: t.hidden,
            max_epochs: t.max_epochs,
            patience: t.patience,
            mu_init: t.mu_init,
            mu_max: t.mu_max,
        }
    }
}

impl TrainConfig {
    pub fn options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            hidden: self.hidden.clone(),
            seed,
            max_epochs: self.max_epochs,
            mu_init: self.mu_init,
            mu_max: self.mu_max,
            patience: self.patience,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadCase {
    /// Half MBB beam loaded at the top of the symmetry edge.
    Mbb,
    Cantilever,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    pub nx: usize,
    pub ny: usize,
    pub load_case: LoadCase,
    pub load: f64,
    /// The seed here is replaced by the run seed.
    pub options: ComplianceOptions,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            nx: 20,
            ny: 8,
            load_case: LoadCase::Mbb,
            load: 1.0,
            options: ComplianceOptions::default(),
        }
    }
}

impl OptimizeConfig {
    pub fn problem(&self) -> Result<(MacroMesh, BoundaryConditions)> {
        let mesh = MacroMesh::new(self.nx, self.ny)?;
        let bcs = match self.load_case {
            LoadCase::Mbb => BoundaryConditions::mbb_half(&mesh, self.load),
            LoadCase::Cantilever => BoundaryConditions::cantilever(&mesh, self.load),
        };
        Ok((mesh, bcs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub nx: usize,
    pub ny: usize,
    /// Horizontal displacement imposed on the right edge.
    pub stretch: f64,
    /// Target profile `amplitude * sin(2 pi i / wavelength)` along the centerline.
    pub amplitude: f64,
    /// Defaults to the strip length.
    pub wavelength: Option<f64>,
    pub stage1: Stage1Options,
    /// The seed here is replaced by the run seed.
    pub stage2: Stage2Options,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            nx: 16,
            ny: 4,
            stretch: 0.8,
            amplitude: 0.04,
            wavelength: None,
            stage1: Stage1Options::default(),
            stage2: Stage2Options::default(),
        }
    }
}

impl MatchConfig {
    pub fn problem(&self) -> Result<(MacroMesh, BoundaryConditions)> {
        let mesh = MacroMesh::new(self.nx, self.ny)?;
        let bcs = BoundaryConditions::clamped_stretch(&mesh, self.stretch);
        Ok((mesh, bcs))
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength.unwrap_or(self.nx as f64)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Invalid(msg) => Error::Invalid(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.blend.validate()?;
        self.material.validate()?;
        if self.basis.presets.is_empty() {
            return invalid("basis.presets is empty");
        }
        for p in &self.basis.presets {
            if !TRUSS_PRESETS.contains(&p.as_str()) {
                return invalid(format!("unknown basis preset '{p}'"));
            }
        }
        if self.basis.resolution < 4 {
            return invalid("basis.resolution must be at least 4");
        }
        if !(self.basis.halfwidth > 0.0 && self.basis.halfwidth < 0.5) {
            return invalid("basis.halfwidth must be in (0, 0.5)");
        }
        if self.train.hidden.is_empty() || self.train.hidden.contains(&0) {
            return invalid("train.hidden needs at least one nonzero layer");
        }
        self.optimize.options.validate()?;
        if self.optimize.nx == 0 || self.optimize.ny == 0 {
            return invalid("optimize mesh must be nonempty");
        }
        let m = &self.matching;
        if m.nx == 0 || m.ny == 0 || !m.ny.is_multiple_of(2) {
            return invalid("match mesh must be nonempty with an even ny");
        }
        if !(m.wavelength() > 0.0) {
            return invalid("match.wavelength must be positive");
        }
        Ok(())
    }

    /// `path` itself when absolute, else inside the output directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.paths.out_dir.join(path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_parameters() {
        let c = RunConfig::default();
        assert_eq!((c.blend.beta1, c.blend.beta2), (64.0, 32.0));
        assert_eq!(c.optimize.options.r_min, 3.0);
        assert_eq!(c.optimize.options.er, 0.05);
        assert_eq!(c.optimize.options.v_max, 0.95);
        assert_eq!(c.basis.min_feature_px, 4);
        assert_eq!(crate::fea::X_MIN, 1e-9);
        c.validate().unwrap();
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 3").is_err());
        assert!(RunConfig::from_toml("[optimize.options]\nrmin = 1.5").is_err());
        assert!(RunConfig::from_toml("[blend]\nbeta3 = 1.0").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_toml(
            "seed = 4\n[blend]\nbeta1 = 32.0\n[optimize.options]\nr_min = 1.5",
        )
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.blend.beta1, 32.0);
        assert_eq!(c.blend.beta2, 32.0);
        assert_eq!(c.optimize.options.r_min, 1.5);
        assert_eq!(
            c.optimize.options.volume_target,
            ComplianceOptions::default().volume_target
        );
    }

    #[test]
    fn round_trip() {
        let text = "seed = 7\n[basis]\npresets = [\"x\", \"star\", \"cross\"]\nresolution = 20\nmin_feature_px = 2\n\
                    [match]\namplitude = 0.05\nwavelength = 8.0\n[dataset]\nresponses = \"four\"\n";
        let c = RunConfig::from_toml(text).unwrap();
        let again = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.to_toml(), c.to_toml());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[basis]\npresets = [\"hexagon\"]").is_err());
        assert!(RunConfig::from_toml("[blend]\neta_percentile = 1.5").is_err());
        assert!(RunConfig::from_toml("[match]\nny = 3").is_err());
    }
}
