//! Pipeline configuration: one JSON document with a block per stage.

use std::path::{Path, PathBuf};

use fos_core::fpca::AlternationConfig;
use fos_core::fun_registration::DemonsConfig;
use fos_core::geo_registration::{RegistrationConfig, SimilarityKind};
use fos_core::kernels::GaussianKernel;
use fos_core::optimize::OptimizerConfig;
use fos_core::synthdata::SimSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    RegisterGeo,
    RegisterFun,
    FpcaGeo,
    FpcaFun,
    Cca,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Simulate, Stage::RegisterGeo, Stage::RegisterFun, Stage::FpcaGeo, Stage::FpcaFun, Stage::Cca];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::RegisterGeo => "register-geo",
            Stage::RegisterFun => "register-fun",
            Stage::FpcaGeo => "fpca-geo",
            Stage::FpcaFun => "fpca-fun",
            Stage::Cca => "cca",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunctionalStage {
    pub demons: DemonsConfig,
    /// When non-empty, the demons λ is chosen from these values by the
    /// principal-direction rotation rule and `demons.lambda` is ignored.
    pub lambda_candidates: Vec<f64>,
    pub selection_iterations: usize,
    pub max_rotation_degrees: f64,
    /// Re-express the composed geometric and functional deformation as
    /// momenta before the geometric fPCA.
    pub reencode_geometry: bool,
    pub reencode_lambda: f64,
    /// Write the aligned fields and template after every iteration.
    pub write_history: bool,
}

impl Default for FunctionalStage {
    fn default() -> Self {
        Self {
            demons: DemonsConfig { lambda: 3000.0, ..DemonsConfig::default() },
            lambda_candidates: Vec::new(),
            selection_iterations: 3,
            max_rotation_degrees: 5.0,
            reencode_geometry: true,
            reencode_lambda: 1e-4,
            write_history: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometricPcStage {
    pub components: usize,
}

impl Default for GeometricPcStage {
    fn default() -> Self {
        Self { components: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunctionalPcStage {
    pub components: usize,
    /// Fixed smoothing weight; cross-validated over `lambda_grid` when unset.
    pub lambda: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    pub alternation: AlternationConfig,
}

impl Default for FunctionalPcStage {
    fn default() -> Self {
        Self { components: 3, lambda: None, lambda_grid: vec![0.0, 1.0, 10.0, 100.0, 1000.0], folds: 5, alternation: AlternationConfig::default() }
    }
}

pub fn default_registration() -> RegistrationConfig {
    let mut cfg = RegistrationConfig::new(SimilarityKind::Current, GaussianKernel::new(25.0).expect("positive width"));
    cfg.lambda = 1e-4;
    cfg.sigma_z = Some(10.0);
    cfg.steps = 10;
    cfg.optimizer = OptimizerConfig { max_iterations: 30, ..OptimizerConfig::default() };
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every stage draws from a seed derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Stages to run; all of them when empty.
    pub stages: Vec<Stage>,
    pub simulate: SimSpec,
    pub register_geo: RegistrationConfig,
    /// Template field for functional-current registration; defaults to the
    /// simulated mean field.
    pub template_field: Option<PathBuf>,
    pub register_fun: FunctionalStage,
    pub fpca_geo: GeometricPcStage,
    pub fpca_fun: FunctionalPcStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("fos-run"),
            stages: Vec::new(),
            simulate: SimSpec::default(),
            register_geo: default_registration(),
            template_field: None,
            register_fun: FunctionalStage::default(),
            fpca_geo: GeometricPcStage::default(),
            fpca_fun: FunctionalPcStage::default(),
        }
    }
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Validation(msg.to_string()))
    }
}

impl PipelineConfig {
    /// Reads a config; relative paths inside it are resolved against the
    /// directory holding the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_text(path)?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.template_field = cfg.template_field.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: fos_core::Error| CliError::Validation(e.to_string());
        self.simulate.validate().map_err(invalid)?;
        self.register_geo.validate().map_err(invalid)?;
        let fun = &self.register_fun;
        fun.demons.validate().map_err(invalid)?;
        check(fun.lambda_candidates.iter().all(|l| *l > 0.0 && l.is_finite()), "register_fun.lambda_candidates must be positive")?;
        check(fun.reencode_lambda >= 0.0 && fun.reencode_lambda.is_finite(), "register_fun.reencode_lambda must be non-negative")?;
        check(fun.selection_iterations >= 1, "register_fun.selection_iterations must be at least 1")?;
        check(fun.max_rotation_degrees > 0.0, "register_fun.max_rotation_degrees must be positive")?;
        check(self.fpca_geo.components >= 1, "fpca_geo.components must be at least 1")?;
        let f = &self.fpca_fun;
        check(f.components >= 1, "fpca_fun.components must be at least 1")?;
        check(f.lambda.is_none_or(|l| l >= 0.0 && l.is_finite()), "fpca_fun.lambda must be non-negative")?;
        check(f.lambda.is_some() || !f.lambda_grid.is_empty(), "fpca_fun.lambda_grid is empty")?;
        check(f.lambda_grid.iter().all(|l| *l >= 0.0 && l.is_finite()), "fpca_fun.lambda_grid values must be non-negative")?;
        check(f.folds >= 2, "fpca_fun.folds must be at least 2")?;
        let n = self.simulate.n;
        check(self.fpca_geo.components + f.components < n, "the CCA needs more subjects than geometric plus functional components")
    }

    pub fn stages(&self) -> Vec<Stage> {
        let mut s = if self.stages.is_empty() { Stage::ALL.to_vec() } else { self.stages.clone() };
        s.sort();
        s.dedup();
        s
    }

    /// SHA-256 of the parameters, leaving out the stage selection and the
    /// output location.
    pub fn parameter_hash(&self) -> String {
        let mut p = self.clone();
        p.stages.clear();
        p.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&p).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Seed of one stage, derived from the root seed and the stage name.
pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.name().as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
