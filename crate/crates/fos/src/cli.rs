//! Command-line definitions and dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fos_core::synthdata::SimSpec;

use crate::config::{PipelineConfig, Stage};
use crate::error::{CliError, Result};
use crate::io;
use crate::pipeline::run_pipeline;
use crate::stages::{self, Cohort, ModeSource};

#[derive(Debug, Parser)]
#[command(name = "fos", version, about = "Registration, principal components and co-variation of functions on surfaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Pipeline config (JSON); only the block for this command is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<PipelineConfig> {
        let cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with known modes.
    Simulate {
        /// Simulation spec (JSON); defaults are used for missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register the template to one surface or to every subject of a cohort.
    RegisterGeo {
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long, conflicts_with = "subjects", requires = "template")]
        target: Option<PathBuf>,
        /// Field on the target, pulled back onto the template.
        #[arg(long, requires = "target")]
        target_field: Option<PathBuf>,
        /// Cohort list as written by `simulate` (subjects.json).
        #[arg(long)]
        subjects: Option<PathBuf>,
        /// Template field, needed for the functional current.
        #[arg(long)]
        template_field: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align fields on the template with the demons algorithm.
    RegisterFun {
        #[arg(long, required_unless_present = "emit_sphere_benchmark")]
        template: Option<PathBuf>,
        /// JSON list of field CSVs.
        #[arg(long, required_unless_present = "emit_sphere_benchmark")]
        fields: Option<PathBuf>,
        /// JSON list of momenta CSVs to re-encode with the alignment.
        #[arg(long)]
        momenta: Option<PathBuf>,
        /// Run the sphere benchmark instead (half ring onto a C shape).
        #[arg(long)]
        emit_sphere_benchmark: bool,
        /// Icosphere subdivision level of the benchmark.
        #[arg(long, default_value_t = 3)]
        level: usize,
        /// Also dump the finite-element matrices of the first benchmark step.
        #[arg(long)]
        dump_fem: bool,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Principal components of registration momenta.
    FpcaGeo {
        /// JSON list of momenta CSVs.
        #[arg(long)]
        momenta: PathBuf,
        #[arg(short, long)]
        k: Option<usize>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Smoothed principal components of fields on the template.
    FpcaFun {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        fields: PathBuf,
        #[arg(short, long)]
        k: Option<usize>,
        /// Fixed smoothing weight; cross-validated when omitted.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Canonical correlations between two score matrices.
    Cca {
        #[arg(long)]
        geo: PathBuf,
        #[arg(long)]
        fun: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mesh and field sequence along a mode of co-variation.
    Covary {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        fpca_geo: PathBuf,
        #[arg(long)]
        fpca_fun: PathBuf,
        #[arg(long)]
        cca: PathBuf,
        /// Mode number, starting at 1.
        #[arg(long, default_value_t = 1)]
        mode: usize,
        /// start:end:count
        #[arg(long, default_value = "-3:3:7", allow_hyphen_values = true)]
        grid: String,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mesh and field sequence along one principal component.
    VizMode {
        #[arg(long)]
        template: PathBuf,
        #[arg(long, conflicts_with = "fpca_fun", required_unless_present = "fpca_fun")]
        fpca_geo: Option<PathBuf>,
        #[arg(long)]
        fpca_fun: Option<PathBuf>,
        /// Component number, starting at 1.
        #[arg(long, default_value_t = 1)]
        component: usize,
        /// start:end:count, in standard deviations.
        #[arg(long, default_value = "-2:2:5", allow_hyphen_values = true)]
        grid: String,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the stages end to end.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the output directory of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this stage using the artifacts already on disk.
        #[arg(long, value_enum)]
        from: Option<Stage>,
    },
}

fn one_based(n: usize, what: &str) -> Result<usize> {
    n.checked_sub(1).ok_or_else(|| CliError::Validation(format!("{what} numbers start at 1")))
}

fn report(artifacts: &stages::Artifacts, out: &Path) {
    println!("wrote {} files under {}", artifacts.0.len(), out.display());
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { spec, seed, out } => {
            let mut spec: SimSpec = match spec {
                Some(p) => serde_json::from_str(&io::read_text(&p)?).map_err(|e| CliError::Parse { path: p.clone(), line: e.line(), msg: e.to_string() })?,
                None => SimSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            report(&stages::simulate(&spec, &out)?, &out);
        }
        Command::RegisterGeo { template, target, target_field, subjects, template_field, config, out } => {
            let cfg = config.load()?;
            let tf = template_field.or(cfg.template_field.clone());
            let a = match (subjects, target) {
                (Some(list), None) => {
                    let mut cohort = Cohort::load(&list)?;
                    if let Some(t) = template {
                        cohort.template = t;
                    }
                    stages::register_geo(&cohort, &cfg.register_geo, tf.as_deref(), &out)?
                }
                (None, Some(target)) => {
                    let template = io::read_mesh(template.as_deref().expect("clap requires --template"))?;
                    let mesh = io::read_mesh(&target)?;
                    let field = match &target_field {
                        Some(p) => io::read_field(p)?,
                        None => vec![0.0; mesh.vertex_count()],
                    };
                    let tvals = match &tf {
                        Some(p) => Some(io::read_field(p)?),
                        None => None,
                    };
                    cfg.register_geo.validate().map_err(|e| CliError::Validation(e.to_string()))?;
                    let mut a = stages::Artifacts::default();
                    stages::register_subject(&template, tvals.as_deref(), &mesh, &field, &cfg.register_geo, &out, 0, &mut a)?;
                    a
                }
                _ => return Err(CliError::Validation("give either --target or --subjects".into())),
            };
            report(&a, &out);
        }
        Command::RegisterFun { template, fields, momenta, emit_sphere_benchmark, level, dump_fem, config, out } => {
            let cfg = config.load()?;
            let a = if emit_sphere_benchmark {
                let demons = if config.config.is_some() { cfg.register_fun.demons.clone() } else { fos_core::fun_registration::DemonsConfig { lambda: 0.1, ..Default::default() } };
                stages::sphere_benchmark(level, &demons, dump_fem, &out)?
            } else {
                let (t, f) = (template.expect("clap requires --template"), fields.expect("clap requires --fields"));
                stages::register_fun(&t, &f, momenta.as_deref(), &cfg.register_geo, &cfg.register_fun, &out)?
            };
            report(&a, &out);
        }
        Command::FpcaGeo { momenta, k, config, out } => {
            let cfg = config.load()?;
            report(&stages::fpca_geo(&momenta, k.unwrap_or(cfg.fpca_geo.components), &out)?, &out);
        }
        Command::FpcaFun { template, fields, k, lambda, seed, config, out } => {
            let cfg = config.load()?;
            let mut stage = cfg.fpca_fun.clone();
            if let Some(k) = k {
                stage.components = k;
            }
            if let Some(l) = lambda {
                if !(l >= 0.0 && l.is_finite()) {
                    return Err(CliError::Validation(format!("--lambda must be non-negative, got {l}")));
                }
                stage.lambda = Some(l);
            }
            let seed = seed.unwrap_or_else(|| crate::config::stage_seed(cfg.seed, Stage::FpcaFun));
            report(&stages::fpca_fun(&template, &fields, &stage, seed, &out)?, &out);
        }
        Command::Cca { geo, fun, out } => {
            stages::cca_stage(&geo, &fun, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Covary { template, fpca_geo, fpca_fun, cca, mode, grid, steps, out } => {
            let grid = stages::parse_grid(&grid)?;
            report(&stages::covary(&template, &fpca_geo, &fpca_fun, &cca, one_based(mode, "mode")?, &grid, steps, &out)?, &out);
        }
        Command::VizMode { template, fpca_geo, fpca_fun, component, grid, steps, out } => {
            let grid = stages::parse_grid(&grid)?;
            let source = match (&fpca_geo, &fpca_fun) {
                (Some(g), _) => ModeSource::Geometric(g),
                (None, Some(f)) => ModeSource::Functional(f),
                (None, None) => return Err(CliError::Validation("give --fpca-geo or --fpca-fun".into())),
            };
            report(&stages::viz_mode(&template, source, one_based(component, "component")?, &grid, steps, &out)?, &out);
        }
        Command::Pipeline { config, out, from } => {
            let mut cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            };
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(first) = from {
                cfg.stages = Stage::ALL.iter().copied().filter(|s| *s >= first).collect();
            }
            let m = run_pipeline(&cfg)?;
            for r in &m.stages {
                println!("{:<13} {:>4} files  {:8.2} s", r.stage.name(), r.artifacts.len(), r.wall_time_seconds);
            }
            let cca = cfg.out_dir.join(Stage::Cca.name()).join("cca.json");
            if let Ok(c) = stages::CcaFile::load(&cca) {
                let p: Vec<String> = c.bartlett.p_values.iter().map(|p| format!("{p:.3e}")).collect();
                println!("canonical correlations {:.4?}", c.correlations);
                println!("Bartlett p-values {}", p.join(" "));
            }
        }
    }
    Ok(())
}
