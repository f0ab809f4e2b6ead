//! The analysis stages, each reading and writing files in its own directory.

use std::path::{Path, PathBuf};

use fos_core::covariation::{cca, covariation_sequence, BartlettResult, CcaResult};
use fos_core::fpca::{cross_validate_lambda, functional_fpca, geometric_fpca, FunctionalOperators, FunctionalPcResult, GeometricPcResult};
use fos_core::fun_registration::{compose_with_geometry, register_functions, select_lambda, surface_gradient, DemonsConfig, SurfaceDomain};
use fos_core::geo_registration::{pull_back_function, reencode_deformation, register_geometry, register_geometry_functional, RegistrationConfig, SimilarityKind};
use fos_core::lddmm::{deform_mesh, inverted_faces, shoot, InitialMomenta};
use fos_core::mesh::{ScalarField, TriangleMesh};
use fos_core::synthdata::{generate_dataset, SimSpec};
use fos_core::tangent_fem::FemSystem;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::FunctionalStage;
use crate::error::{CliError, Result};
use crate::io;

/// Collects the paths of every file a stage writes.
#[derive(Debug, Default)]
pub struct Artifacts(pub Vec<PathBuf>);

impl Artifacts {
    fn text(&mut self, path: PathBuf, text: &str) -> Result<()> {
        io::write_text(&path, text)?;
        self.0.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.text(path, &text)
    }

    fn mesh(&mut self, path: PathBuf, mesh: &TriangleMesh) -> Result<()> {
        io::write_mesh(&path, mesh)?;
        self.0.push(path);
        Ok(())
    }

    fn field(&mut self, path: PathBuf, values: &[f64]) -> Result<()> {
        io::write_field(&path, values)?;
        self.0.push(path);
        Ok(())
    }

    fn momenta(&mut self, path: PathBuf, m: &InitialMomenta) -> Result<()> {
        io::write_momenta(&path, m)?;
        self.0.push(io::kernel_sidecar(&path));
        self.0.push(path);
        Ok(())
    }

    fn scores(&mut self, path: PathBuf, s: &DMatrix<f64>) -> Result<()> {
        io::write_scores(&path, s)?;
        self.0.push(path);
        Ok(())
    }

    /// A list file: a JSON array of paths relative to the list's directory.
    fn list(&mut self, path: PathBuf, entries: &[PathBuf]) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel: Vec<String> = entries.iter().map(|p| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()).collect();
        self.json(path, &rel)
    }
}

/// Reads a list file written by [`Artifacts::list`] or by hand.
pub fn read_list(path: &Path) -> Result<Vec<PathBuf>> {
    let text = io::read_text(path)?;
    let rel: Vec<PathBuf> = serde_json::from_str(&text).map_err(|e| CliError::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })?;
    if rel.is_empty() {
        return Err(CliError::Validation(format!("{} lists no files", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(rel.into_iter().map(|p| base.join(p)).collect())
}

fn numbered(dir: &Path, stem: &str, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{i:03}.{ext}"))
}

fn read_fields(paths: &[PathBuf], len: usize) -> Result<Vec<Vec<f64>>> {
    paths
        .iter()
        .map(|p| {
            let f = io::read_field(p)?;
            if f.len() != len {
                return Err(CliError::Validation(format!("{} has {} values, the template has {len} vertices", p.display(), f.len())));
            }
            Ok(f)
        })
        .collect()
}

/// Subject list of a simulated or user-supplied cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cohort {
    pub template: PathBuf,
    pub meshes: Vec<PathBuf>,
    pub fields: Vec<PathBuf>,
}

impl Cohort {
    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_text(path)?;
        let c: Cohort = serde_json::from_str(&text).map_err(|e| CliError::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })?;
        if c.meshes.len() != c.fields.len() || c.meshes.is_empty() {
            return Err(CliError::Validation(format!("{}: need one field per mesh and at least one subject", path.display())));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        let abs = |p: PathBuf| base.join(p);
        Ok(Cohort { template: abs(c.template), meshes: c.meshes.into_iter().map(abs).collect(), fields: c.fields.into_iter().map(abs).collect() })
    }
}

pub const COHORT_FILE: &str = "subjects.json";

/// Writes a synthetic cohort: template, subject meshes and fields, the true
/// scores and the planted modes.
pub fn simulate(spec: &SimSpec, out: &Path) -> Result<Artifacts> {
    spec.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    let ds = generate_dataset(spec)?;
    let mut a = Artifacts::default();
    a.mesh(out.join("template.off"), &ds.template)?;
    let mut cohort = Cohort { template: "template.off".into(), meshes: vec![], fields: vec![] };
    let mut truth = String::from("subject,a1,a2,redraws\n");
    for (i, s) in ds.subjects.iter().enumerate() {
        let mesh = numbered(&out.join("subjects"), "mesh", i, "off");
        let field = numbered(&out.join("subjects"), "field", i, "csv");
        a.mesh(mesh.clone(), &s.mesh)?;
        a.field(field.clone(), &s.field)?;
        cohort.meshes.push(mesh.strip_prefix(out).unwrap_or(&mesh).to_path_buf());
        cohort.fields.push(field.strip_prefix(out).unwrap_or(&field).to_path_buf());
        truth.push_str(&format!("{i},{:.16e},{:.16e},{}\n", s.a1, s.a2, s.redraws));
    }
    a.text(out.join("truth.csv"), &truth)?;
    let t = out.join("truth");
    a.momenta(t.join("psi_g1.csv"), &ds.modes.psi_g[0])?;
    a.momenta(t.join("psi_g2.csv"), &ds.modes.psi_g[1])?;
    a.field(t.join("psi_f.csv"), &ds.modes.psi_f)?;
    a.field(t.join("mean.csv"), &ds.modes.mean)?;
    a.json(out.join(COHORT_FILE), &cohort)?;
    Ok(a)
}

#[derive(Debug, Serialize)]
struct GeoDiagnostics<'a> {
    #[serde(flatten)]
    diagnostics: &'a fos_core::geo_registration::RegistrationDiagnostics,
    inverted_faces: usize,
}

/// Outcome of registering one subject.
pub struct GeoFit {
    pub momenta: InitialMomenta,
    pub pulled: Vec<f64>,
}

/// Registers the template to one subject and pulls its field back.
pub fn register_subject(
    template: &TriangleMesh,
    template_field: Option<&[f64]>,
    mesh: &TriangleMesh,
    field: &[f64],
    cfg: &RegistrationConfig,
    out: &Path,
    i: usize,
    a: &mut Artifacts,
) -> Result<GeoFit> {
    let target_field = ScalarField::new(mesh, field.to_vec())?;
    let (momenta, diag) = match cfg.similarity {
        SimilarityKind::Fcurrent => {
            let tf = template_field.ok_or_else(|| CliError::Validation("functional-current registration needs a template field".into()))?;
            register_geometry_functional(template, &ScalarField::new(template, tf.to_vec())?, mesh, &target_field, cfg, None)?
        }
        _ => register_geometry(template, mesh, cfg)?,
    };
    let deformed = shoot(&momenta, cfg.steps)?.flow_points(template.vertices())?;
    let pulled = pull_back_function(mesh, &target_field, &deformed)?;
    a.momenta(numbered(&out.join("momenta"), "momenta", i, "csv"), &momenta)?;
    a.json(numbered(&out.join("diagnostics"), "diagnostics", i, "json"), &GeoDiagnostics { diagnostics: &diag, inverted_faces: inverted_faces(template, &deformed) })?;
    a.field(numbered(&out.join("pulled"), "field", i, "csv"), &pulled)?;
    Ok(GeoFit { momenta, pulled })
}

/// Registers the template to every subject of a cohort; writes momenta,
/// diagnostics, pulled-back fields and the lists `momenta.json` and
/// `fields.json`.
pub fn register_geo(cohort: &Cohort, cfg: &RegistrationConfig, template_field: Option<&Path>, out: &Path) -> Result<Artifacts> {
    cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    let template = io::read_mesh(&cohort.template)?;
    let tf = match template_field {
        Some(p) => Some(read_fields(&[p.to_path_buf()], template.vertex_count())?.remove(0)),
        None => None,
    };
    let mut a = Artifacts::default();
    let (mut momenta, mut fields) = (vec![], vec![]);
    for (i, (mp, fp)) in cohort.meshes.iter().zip(&cohort.fields).enumerate() {
        let mesh = io::read_mesh(mp)?;
        let field = io::read_field(fp)?;
        register_subject(&template, tf.as_deref(), &mesh, &field, cfg, out, i, &mut a)?;
        momenta.push(numbered(&out.join("momenta"), "momenta", i, "csv"));
        fields.push(numbered(&out.join("pulled"), "field", i, "csv"));
    }
    a.list(out.join("momenta.json"), &momenta)?;
    a.list(out.join("fields.json"), &fields)?;
    Ok(a)
}

#[derive(Debug, Serialize)]
struct DemonsTrace<'a> {
    lambda: f64,
    iterations: usize,
    stopped_early: bool,
    eigenvalues: &'a [Vec<f64>],
    subjects: &'a [fos_core::fun_registration::SubjectTrace],
}

/// Demons alignment of fields on the template. With `momenta`, the
/// composed deformations are also re-encoded as momenta.
pub fn register_fun(
    template_path: &Path,
    fields_list: &Path,
    momenta_list: Option<&Path>,
    geo: &RegistrationConfig,
    stage: &FunctionalStage,
    out: &Path,
) -> Result<Artifacts> {
    let template = io::read_mesh(template_path)?;
    let field_paths = read_list(fields_list)?;
    let fields = read_fields(&field_paths, template.vertex_count())?;
    let domain = SurfaceDomain::new(template.clone())?;
    let lambda = if stage.lambda_candidates.is_empty() {
        stage.demons.lambda
    } else {
        select_lambda(&domain, &fields, &stage.demons, &stage.lambda_candidates, stage.selection_iterations, stage.max_rotation_degrees)?
    };
    let cfg = DemonsConfig { lambda, ..stage.demons.clone() };
    let res = register_functions(&domain, &fields, &cfg)?;
    let mut a = Artifacts::default();
    let mut aligned = vec![];
    for (i, f) in res.aligned.iter().enumerate() {
        let p = numbered(&out.join("aligned"), "field", i, "csv");
        a.field(p.clone(), f)?;
        aligned.push(p);
    }
    a.list(out.join("fields.json"), &aligned)?;
    if stage.write_history {
        for (k, (fields, t)) in res.history.iter().zip(&res.templates).enumerate() {
            let dir = out.join("history").join(format!("iter_{k:02}"));
            a.field(dir.join("template.csv"), t)?;
            for (i, f) in fields.iter().enumerate() {
                a.field(numbered(&dir, "field", i, "csv"), f)?;
            }
        }
    }
    a.json(out.join("trace.json"), &DemonsTrace { lambda, iterations: res.iterations, stopped_early: res.stopped_early, eigenvalues: &res.eigenvalues, subjects: &res.subjects })?;

    if let Some(list) = momenta_list {
        let paths = read_list(list)?;
        if paths.len() != fields.len() {
            return Err(CliError::Validation(format!("{} momenta for {} fields", paths.len(), fields.len())));
        }
        let mut out_paths = vec![];
        for (i, p) in paths.iter().enumerate() {
            let m0 = io::read_momenta(p)?;
            let path = if stage.reencode_geometry {
                let geodesic = shoot(&m0, geo.steps)?;
                let (targets, _) = compose_with_geometry(&domain, &geodesic, &res.updates[i], cfg.flow_steps)?;
                let (m, _) = reencode_deformation(&template, &targets, stage.reencode_lambda, geo, Some(&m0))?;
                let q = numbered(&out.join("momenta"), "momenta", i, "csv");
                a.momenta(q.clone(), &m)?;
                q
            } else {
                p.clone()
            };
            out_paths.push(path);
        }
        a.list(out.join("momenta.json"), &out_paths)?;
    }
    Ok(a)
}

/// Runs the sphere benchmark: a half ring registered onto a C shape.
pub fn sphere_benchmark(level: usize, demons: &DemonsConfig, dump_fem: bool, out: &Path) -> Result<Artifacts> {
    let (mesh, moving, fixed) = fos_core::fun_registration::c_shape_benchmark(level);
    let domain = SurfaceDomain::new(mesh.clone())?;
    let res = fos_core::fun_registration::register_to_fixed(&domain, &moving, &fixed, demons)?;
    let mut a = Artifacts::default();
    a.mesh(out.join("sphere.off"), &mesh)?;
    a.field(out.join("moving.csv"), &moving)?;
    a.field(out.join("fixed.csv"), &fixed)?;
    for (k, f) in res.history.iter().enumerate() {
        a.field(out.join("history").join(format!("aligned_{k:02}.csv")), &f[0])?;
    }
    a.json(out.join("trace.json"), &DemonsTrace { lambda: demons.lambda, iterations: res.iterations, stopped_early: res.stopped_early, eigenvalues: &res.eigenvalues, subjects: &res.subjects })?;
    if dump_fem {
        let j = surface_gradient(&domain, &moving)?;
        let residual: Vec<f64> = fixed.iter().zip(&moving).map(|(f, m)| f - m).collect();
        let sys = FemSystem::assemble(&mesh, domain.atlas(), &j, &residual)?;
        for (name, m) in [("r0", &sys.r0), ("r1", &sys.r1), ("theta2", &sys.theta2)] {
            let p = out.join("fem").join(format!("{name}.txt"));
            io::write_triplets(&p, m)?;
            a.0.push(p);
        }
    }
    Ok(a)
}

#[derive(Debug, Serialize, Deserialize)]
struct GeoSummary {
    variances: Vec<f64>,
    truncated_from: Option<usize>,
}

pub fn fpca_geo(momenta_list: &Path, k: usize, out: &Path) -> Result<Artifacts> {
    let momenta: Vec<InitialMomenta> = read_list(momenta_list)?.iter().map(|p| io::read_momenta(p)).collect::<Result<_>>()?;
    let pc = geometric_fpca(&momenta, k)?;
    let mut a = Artifacts::default();
    a.momenta(out.join("mean.csv"), &pc.mean)?;
    for (j, c) in pc.components.iter().enumerate() {
        a.momenta(out.join(format!("pc_{}.csv", j + 1)), c)?;
    }
    a.scores(out.join("scores.csv"), &pc.scores)?;
    a.json(out.join("summary.json"), &GeoSummary { variances: pc.variances.clone(), truncated_from: pc.truncated_from })?;
    Ok(a)
}

pub fn load_fpca_geo(dir: &Path) -> Result<GeometricPcResult> {
    let s: GeoSummary = serde_json::from_str(&io::read_text(&dir.join("summary.json"))?)?;
    let components = (1..=s.variances.len()).map(|j| io::read_momenta(&dir.join(format!("pc_{j}.csv")))).collect::<Result<_>>()?;
    Ok(GeometricPcResult { mean: io::read_momenta(&dir.join("mean.csv"))?, components, variances: s.variances, scores: io::read_scores(&dir.join("scores.csv"))?, truncated_from: s.truncated_from })
}

#[derive(Debug, Serialize, Deserialize)]
struct FunSummary {
    lambda: f64,
    converged: Vec<bool>,
    /// Held-out error per grid value when λ was cross-validated.
    cv_curve: Option<Vec<(f64, f64)>>,
}

pub fn fpca_fun(template_path: &Path, fields_list: &Path, stage: &crate::config::FunctionalPcStage, seed: u64, out: &Path) -> Result<Artifacts> {
    let template = io::read_mesh(template_path)?;
    let fields = read_fields(&read_list(fields_list)?, template.vertex_count())?;
    let ops = FunctionalOperators::new(&template)?;
    let (lambda, cv_curve) = match stage.lambda {
        Some(l) => (l, None),
        None => {
            let cv = cross_validate_lambda(&ops, &fields, stage.components, &stage.lambda_grid, stage.folds, seed, &stage.alternation)?;
            (cv.lambda, Some(cv.curve))
        }
    };
    let pc = functional_fpca(&ops, &fields, stage.components, lambda, &stage.alternation)?;
    let mut a = Artifacts::default();
    a.field(out.join("mean.csv"), &pc.mean)?;
    for (j, c) in pc.components.iter().enumerate() {
        a.field(out.join(format!("pc_{}.csv", j + 1)), c)?;
    }
    a.scores(out.join("scores.csv"), &pc.scores)?;
    a.json(out.join("summary.json"), &FunSummary { lambda, converged: pc.converged.clone(), cv_curve })?;
    Ok(a)
}

pub fn load_fpca_fun(dir: &Path) -> Result<FunctionalPcResult> {
    let s: FunSummary = serde_json::from_str(&io::read_text(&dir.join("summary.json"))?)?;
    let k = s.converged.len();
    let components = (1..=k).map(|j| io::read_field(&dir.join(format!("pc_{j}.csv")))).collect::<Result<_>>()?;
    Ok(FunctionalPcResult { mean: io::read_field(&dir.join("mean.csv"))?, components, scores: io::read_scores(&dir.join("scores.csv"))?, lambdas: vec![s.lambda; k], converged: s.converged })
}

/// CCA result as stored on disk.
#[derive(Debug, Serialize, Deserialize)]
pub struct CcaFile {
    pub n: usize,
    pub correlations: Vec<f64>,
    pub weights_g: Vec<Vec<f64>>,
    pub weights_f: Vec<Vec<f64>>,
    pub loadings_g: Vec<Vec<f64>>,
    pub loadings_f: Vec<Vec<f64>>,
    pub bartlett: BartlettResult,
}

impl CcaFile {
    fn from_result(r: &CcaResult) -> Self {
        let v = |x: &[DVector<f64>]| x.iter().map(|w| w.as_slice().to_vec()).collect();
        Self { n: r.n, correlations: r.correlations.clone(), weights_g: v(&r.weights_g), weights_f: v(&r.weights_f), loadings_g: v(&r.loadings_g), loadings_f: v(&r.loadings_f), bartlett: r.bartlett.clone() }
    }

    pub fn into_result(self) -> CcaResult {
        let v = |x: Vec<Vec<f64>>| x.into_iter().map(DVector::from_vec).collect();
        CcaResult { correlations: self.correlations, weights_g: v(self.weights_g), weights_f: v(self.weights_f), loadings_g: v(self.loadings_g), loadings_f: v(self.loadings_f), bartlett: self.bartlett, n: self.n }
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&io::read_text(path)?).map_err(|e| CliError::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })
    }
}

pub fn cca_stage(geo_scores: &Path, fun_scores: &Path, out_file: &Path) -> Result<Artifacts> {
    let (g, f) = (io::read_scores(geo_scores)?, io::read_scores(fun_scores)?);
    if g.nrows() != f.nrows() {
        return Err(CliError::Validation(format!("score files have {} and {} rows", g.nrows(), f.nrows())));
    }
    let r = cca(&g, &f)?;
    let mut a = Artifacts::default();
    a.json(out_file.to_path_buf(), &CcaFile::from_result(&r))?;
    Ok(a)
}

/// Evenly spaced grid from `start:end:count`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || CliError::Validation(format!("grid `{text}` must look like start:end:count"));
    let parts: Vec<&str> = text.split(':').collect();
    let [s, e, n] = parts.as_slice() else { return Err(bad()) };
    let (s, e): (f64, f64) = (s.parse().map_err(|_| bad())?, e.parse().map_err(|_| bad())?);
    let n: usize = n.parse().map_err(|_| bad())?;
    if n == 0 || !s.is_finite() || !e.is_finite() {
        return Err(bad());
    }
    Ok((0..n).map(|i| if n == 1 { s } else { s + (e - s) * i as f64 / (n - 1) as f64 }).collect())
}

#[derive(Debug, Serialize)]
struct FrameIndex {
    c: Vec<f64>,
    dropped: Vec<f64>,
}

fn write_frames(frames: &[(f64, TriangleMesh, Vec<f64>)], dropped: Vec<f64>, out: &Path) -> Result<Artifacts> {
    let mut a = Artifacts::default();
    for (i, (_, mesh, field)) in frames.iter().enumerate() {
        a.mesh(numbered(out, "frame", i, "off"), mesh)?;
        a.field(numbered(out, "frame", i, "csv"), field)?;
    }
    a.json(out.join("frames.json"), &FrameIndex { c: frames.iter().map(|f| f.0).collect(), dropped })?;
    Ok(a)
}

/// Mesh and field sequence of co-variation mode `mode` (0-based).
pub fn covary(template: &Path, geo_dir: &Path, fun_dir: &Path, cca_file: &Path, mode: usize, grid: &[f64], steps: usize, out: &Path) -> Result<Artifacts> {
    let template = io::read_mesh(template)?;
    let (pg, pf) = (load_fpca_geo(geo_dir)?, load_fpca_fun(fun_dir)?);
    let r = CcaFile::load(cca_file)?.into_result();
    if mode >= r.mode_count() {
        return Err(CliError::Validation(format!("mode {} requested but the CCA has {} modes", mode + 1, r.mode_count())));
    }
    let seq = covariation_sequence(mode, grid, &pg, &pf, &r, &template, steps)?;
    let frames: Vec<_> = seq.frames.into_iter().map(|f| (f.c, f.mesh, f.field)).collect();
    write_frames(&frames, seq.dropped, out)
}

/// Which principal component to visualize.
pub enum ModeSource<'a> {
    Geometric(&'a Path),
    Functional(&'a Path),
}

/// Frames along `c · √κ_j · ψ_j` for component `j` (0-based). Geometric
/// modes deform the template and carry a zero field; functional modes keep
/// the template and add to the mean field.
pub fn viz_mode(template: &Path, source: ModeSource, j: usize, grid: &[f64], steps: usize, out: &Path) -> Result<Artifacts> {
    let template = io::read_mesh(template)?;
    let mut frames = vec![];
    let mut dropped = vec![];
    match source {
        ModeSource::Geometric(dir) => {
            let pc = load_fpca_geo(dir)?;
            let sd = pc.variances.get(j).ok_or_else(|| CliError::Validation(format!("component {} not available", j + 1)))?.sqrt();
            for &c in grid {
                match deform_mesh(&template, &pc.mode_momenta(j, c * sd), steps) {
                    Ok(m) if inverted_faces(&template, m.vertices()) == 0 => frames.push((c, m, vec![0.0; template.vertex_count()])),
                    _ => dropped.push(c),
                }
            }
        }
        ModeSource::Functional(dir) => {
            let pc = load_fpca_fun(dir)?;
            let psi = pc.components.get(j).ok_or_else(|| CliError::Validation(format!("component {} not available", j + 1)))?;
            let col = pc.scores.column(j);
            let sd = (col.norm_squared() / (col.len() as f64 - 1.0).max(1.0)).sqrt();
            for &c in grid {
                frames.push((c, template.clone(), pc.mean.iter().zip(psi).map(|(m, p)| m + c * sd * p).collect()));
            }
        }
    }
    write_frames(&frames, dropped, out)
}
