//! Runs the stages in order and records what they wrote.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{stage_seed, PipelineConfig, Stage};
use crate::error::{CliError, Result};
use crate::io;
use crate::stages::{self, Cohort, COHORT_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Paths relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub parameter_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub failed_stage: Option<Stage>,
    pub wall_time_seconds: f64,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&io::read_text(path)?).map_err(|e| CliError::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }
}

/// Directory holding the artifacts of `stage`.
pub fn stage_dir(out: &Path, stage: Stage) -> PathBuf {
    out.join(stage.name())
}

fn require(path: PathBuf, stage: Stage) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Validation(format!("{} is missing; run stage `{}` first", path.display(), stage.name())))
    }
}

fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<stages::Artifacts> {
    let out = &cfg.out_dir;
    let dir = stage_dir(out, stage);
    let sim = stage_dir(out, Stage::Simulate);
    let template = || require(sim.join("template.off"), Stage::Simulate);
    match stage {
        Stage::Simulate => {
            let spec = fos_core::synthdata::SimSpec { seed: stage_seed(cfg.seed, stage), ..cfg.simulate.clone() };
            stages::simulate(&spec, &dir)
        }
        Stage::RegisterGeo => {
            let cohort = Cohort::load(&require(sim.join(COHORT_FILE), Stage::Simulate)?)?;
            let tf = match (&cfg.template_field, cfg.register_geo.similarity) {
                (Some(p), _) => Some(p.clone()),
                (None, fos_core::geo_registration::SimilarityKind::Fcurrent) => Some(require(sim.join("truth").join("mean.csv"), Stage::Simulate)?),
                (None, _) => None,
            };
            stages::register_geo(&cohort, &cfg.register_geo, tf.as_deref(), &dir)
        }
        Stage::RegisterFun => {
            let geo = stage_dir(out, Stage::RegisterGeo);
            let fields = require(geo.join("fields.json"), Stage::RegisterGeo)?;
            let momenta = require(geo.join("momenta.json"), Stage::RegisterGeo)?;
            stages::register_fun(&template()?, &fields, Some(&momenta), &cfg.register_geo, &cfg.register_fun, &dir)
        }
        Stage::FpcaGeo => {
            let list = require(stage_dir(out, Stage::RegisterFun).join("momenta.json"), Stage::RegisterFun)?;
            stages::fpca_geo(&list, cfg.fpca_geo.components, &dir)
        }
        Stage::FpcaFun => {
            let list = require(stage_dir(out, Stage::RegisterFun).join("fields.json"), Stage::RegisterFun)?;
            stages::fpca_fun(&template()?, &list, &cfg.fpca_fun, stage_seed(cfg.seed, stage), &dir)
        }
        Stage::Cca => {
            let g = require(stage_dir(out, Stage::FpcaGeo).join("scores.csv"), Stage::FpcaGeo)?;
            let f = require(stage_dir(out, Stage::FpcaFun).join("scores.csv"), Stage::FpcaFun)?;
            stages::cca_stage(&g, &f, &dir.join("cca.json"))
        }
    }
}

/// Validates the config, runs the selected stages and writes the manifest.
/// Records of stages not re-run are carried over from an earlier manifest
/// with the same parameter hash.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let start = Instant::now();
    let hash = cfg.parameter_hash();
    let manifest_path = cfg.out_dir.join(MANIFEST_FILE);
    let selected = cfg.stages();
    let mut records: Vec<StageRecord> = match Manifest::load(&manifest_path) {
        Ok(m) if m.parameter_hash == hash => m.stages.into_iter().filter(|r| !selected.contains(&r.stage)).collect(),
        _ => Vec::new(),
    };
    let mut failed = None;
    let mut error = None;
    for &stage in &selected {
        let t = Instant::now();
        match run_stage(cfg, stage) {
            Ok(a) => {
                let artifacts = a.0.iter().map(|p| p.strip_prefix(&cfg.out_dir).unwrap_or(p).to_path_buf()).collect();
                records.push(StageRecord { stage, artifacts, wall_time_seconds: t.elapsed().as_secs_f64() });
            }
            Err(e) => {
                failed = Some(stage);
                error = Some(e.in_stage(stage.name()));
                break;
            }
        }
    }
    records.sort_by_key(|r| r.stage);
    let manifest = Manifest { parameter_hash: hash, seed: cfg.seed, stages: records, failed_stage: failed, wall_time_seconds: start.elapsed().as_secs_f64() };
    io::write_text(&manifest_path, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    match error {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}
