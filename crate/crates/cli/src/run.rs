//! Experiment orchestration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pdmp_core::bounds::{constant_rate_envelope, envelope_check, nonconstant_envelope};
use pdmp_core::coupling::{couple_on_grid, couple_replica, coupled_paths_to_csv, default_companion_b};
use pdmp_core::metrics::mixture_curve;
use pdmp_core::rng::{replica_seed, rng_from_seed, splitmix64};
use pdmp_core::simulator::{moment_sup_estimate, replicate, simulate_replica, trajectories_to_csv};
use pdmp_core::switching::SpectralReport;
use pdmp_core::{BoundCurve, EnvelopeReport, HybridState, SwitchedModel};
use sha2::{Digest, Sha256};

use crate::config::{to_toml, ConfigError, ExperimentConfig, ExperimentKind};

/// Stream tags mixed into the master seed for auxiliary randomness.
const AUDIT_STREAM: u64 = 0xA0D1;
const MOMENT_STREAM: u64 = 0x3031;
const BOOTSTRAP_STREAM: u64 = 0xB007;

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Audit(String),
    Core(pdmp_core::Error),
    Io(String),
}

impl RunError {
    /// Process exit code: 2 for configuration/audit problems, 3 for numeric
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Core(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "config error: {m}"),
            RunError::Audit(m) => write!(f, "model audit failed: {m}"),
            RunError::Core(e) => write!(f, "{e}"),
            RunError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<pdmp_core::Error> for RunError {
    fn from(e: pdmp_core::Error) -> Self {
        match e {
            pdmp_core::Error::InvalidAssumption(m) => RunError::Audit(m),
            other => RunError::Core(other),
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub experiment: ExperimentKind,
    pub output_dir: PathBuf,
    pub files: Vec<ManifestEntry>,
    /// `None` when the experiment does not check an envelope.
    pub envelope_pass: Option<bool>,
    pub summary: String,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.envelope_pass == Some(false) {
            1
        } else {
            0
        }
    }
}

struct Writer {
    dir: PathBuf,
    files: Vec<ManifestEntry>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(|e| RunError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn put(&mut self, name: &str, contents: &str) -> Result<(), RunError> {
        write_atomic(&self.dir.join(name), contents.as_bytes())?;
        self.files.push(ManifestEntry {
            file: name.to_string(),
            bytes: contents.len(),
            sha256: hex::encode(Sha256::digest(contents.as_bytes())),
        });
        Ok(())
    }

    fn finish(self) -> Result<Vec<ManifestEntry>, RunError> {
        let mut m = String::new();
        for f in &self.files {
            let _ = writeln!(m, "[[file]]\nname = \"{}\"\nbytes = {}\nsha256 = \"{}\"\n", f.file, f.bytes, f.sha256);
        }
        write_atomic(&self.dir.join("manifest.toml"), m.as_bytes())?;
        Ok(self.files)
    }
}

/// Write to a sibling temporary file, then rename over the target.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| RunError::Io(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))
}

/// Runs `config` on a pool of `workers` threads (the global pool when
/// `None`). Outputs do not depend on the worker count.
pub fn run_experiment(config: &ExperimentConfig, workers: Option<usize>) -> Result<RunReport, RunError> {
    config.validate()?;
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| RunError::Config(format!("worker pool: {e}")))?;
            pool.install(|| run_inner(config))
        }
        None => run_inner(config),
    }
}

fn run_inner(cfg: &ExperimentConfig) -> Result<RunReport, RunError> {
    let model = cfg.build_model()?;
    let mut summary = String::new();
    let _ = writeln!(summary, "experiment = {}", cfg.experiment.as_str());
    let _ = writeln!(summary, "model = {}", cfg.model_name());
    let _ = writeln!(summary, "modes = {}", model.n_modes());
    let _ = writeln!(summary, "dimension = {}", model.dim());
    let _ = writeln!(summary, "replicas = {}", cfg.replicas);
    let _ = writeln!(summary, "master_seed = {}", cfg.master_seed);
    let _ = writeln!(summary, "horizon = {}", cfg.horizon);

    let (audit_text, audit_ok) = audit(&model, cfg)?;
    summary.push_str(&audit_text);
    let mut out = Writer::new(&cfg.output_dir)?;
    out.put("config.toml", &to_toml(cfg)?)?;
    if !audit_ok {
        out.put("summary.txt", &summary)?;
        out.finish()?;
        return Err(RunError::Audit(audit_text.lines().filter(|l| l.contains("FAIL")).collect::<Vec<_>>().join("; ")));
    }

    let (z0, zt0) = cfg.initial_states(&model);
    let csv_n = cfg.output.csv_replicas.unwrap_or(cfg.replicas).min(cfg.replicas);
    let mut envelope_pass = None;
    match cfg.experiment {
        ExperimentKind::Audit => {}
        ExperimentKind::Simulate => {
            let trajs = replicate(csv_n, cfg.master_seed, |k, _| {
                simulate_replica(&model, &z0, cfg.horizon, cfg.sample_dt, cfg.master_seed, k)
            })?;
            out.put("trajectories.csv", &trajectories_to_csv(&trajs, model.dim()))?;
            let jumps: usize = trajs.iter().map(|t| t.jump_count()).sum();
            let _ = writeln!(summary, "trajectories_written = {}", trajs.len());
            let _ = writeln!(summary, "mean_jumps = {}", jumps as f64 / trajs.len() as f64);
        }
        ExperimentKind::Bounds => {
            let grid = cfg.grid();
            let bound = bound_curve(&model, cfg, &z0, zt0.as_ref(), &grid)?;
            out.put("bound.csv", &bound.to_csv())?;
            out.put("bound_constants.txt", &bound.constants_sidecar())?;
            let _ = writeln!(summary, "bound: {}", bound.describe());
        }
        ExperimentKind::Couple | ExperimentKind::FullCheck => {
            let zt0 = zt0.as_ref().expect("validated: pair experiments have two starts");
            let grid = cfg.grid();
            let paths = replicate(csv_n, cfg.master_seed, |k, _| {
                couple_replica(&model, &z0, zt0, cfg.horizon, cfg.sample_dt, cfg.master_seed, k)
            })?;
            out.put("coupled.csv", &coupled_paths_to_csv(&paths, model.dim()))?;
            let states = replicate(cfg.replicas, cfg.master_seed, |_, rng| couple_on_grid(&model, &z0, zt0, &grid, rng))?;
            let curve = mixture_curve(&states, &grid, cfg.distance.p, splitmix64(cfg.master_seed ^ BOOTSTRAP_STREAM))?;
            out.put("distance.csv", &curve.to_csv())?;
            let merged = states.iter().filter(|row| row.last().is_some_and(|s| s.mode == s.mode_tilde)).count();
            let _ = writeln!(summary, "estimator = {}", curve.estimator);
            let _ = writeln!(summary, "p = {}", cfg.distance.p);
            let _ = writeln!(summary, "modes_matched_at_end = {merged}/{}", cfg.replicas);
            if cfg.experiment == ExperimentKind::FullCheck {
                let bound = bound_curve(&model, cfg, &z0, Some(zt0), &grid)?;
                out.put("bound.csv", &bound.to_csv())?;
                out.put("bound_constants.txt", &bound.constants_sidecar())?;
                let report = envelope_check(&curve, &bound, cfg.bounds.slack)?;
                out.put("envelope.csv", &report.to_csv())?;
                let _ = writeln!(summary, "bound: {}", bound.describe());
                summary.push_str(&envelope_summary(&report, cfg.bounds.slack));
                envelope_pass = Some(report.pass);
            }
        }
    }
    out.put("summary.txt", &summary)?;
    let files = out.finish()?;
    Ok(RunReport { experiment: cfg.experiment, output_dir: cfg.output_dir.clone(), files, envelope_pass, summary })
}

fn envelope_summary(report: &EnvelopeReport, slack: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "envelope_check = {} (slack = {slack}, worst ratio {:.6} at t = {})",
        if report.pass { "PASS" } else { "FAIL" },
        report.worst_ratio,
        report.worst_t
    );
    for p in report.failures() {
        let _ = writeln!(s, "  above envelope at t = {}: estimate {} > envelope {}", p.t, p.empirical, p.envelope);
    }
    s
}

/// Dissipativity and rate audits; lines are prefixed `audit.`.
fn audit(model: &SwitchedModel, cfg: &ExperimentConfig) -> Result<(String, bool), RunError> {
    let mut rng = rng_from_seed(splitmix64(cfg.master_seed ^ AUDIT_STREAM));
    let n = cfg.bounds.audit_samples;
    let mut text = String::new();
    let mut ok = true;
    for (mode, a) in model.audit_dissipativity(n, &mut rng)?.iter().enumerate() {
        // Large mode sets: report only failures and one aggregate line.
        if !a.pass || model.n_modes() <= 8 {
            let _ = writeln!(
                text,
                "audit.dissipativity[{mode}] = {} (alpha = {}, worst margin {:.3e}, samples {})",
                if a.pass { "PASS" } else { "FAIL" },
                model.alpha_vec()[mode],
                a.worst_margin,
                a.samples
            );
        }
        ok &= a.pass;
    }
    if model.n_modes() > 8 {
        let _ = writeln!(text, "audit.dissipativity = {} over {} modes", if ok { "PASS" } else { "FAIL" }, model.n_modes());
    }
    if let Some(g) = model.generator() {
        let irreducible = g.is_irreducible();
        let _ = writeln!(text, "audit.irreducible = {}", if irreducible { "PASS" } else { "FAIL" });
        ok &= irreducible;
    }
    if let Some(s) = model.state_rates() {
        let r = model.audit_rates(n, &mut rng)?;
        let _ = writeln!(
            text,
            "audit.rates = {} (declared lower {} / lipschitz {} / upper {}; measured min {} / lipschitz {} / max total {}; {} points)",
            if r.pass() { "PASS" } else { "FAIL" },
            s.lower,
            s.lipschitz,
            s.upper,
            r.measured_min,
            r.measured_lipschitz,
            r.measured_max_total,
            r.points
        );
        ok &= r.pass();
    }
    Ok((text, ok))
}

/// The envelope matching the model's rate type, with every constant recorded
/// in the curve.
pub fn bound_curve(
    model: &SwitchedModel,
    cfg: &ExperimentConfig,
    z0: &HybridState,
    zt0: Option<&HybridState>,
    grid: &[f64],
) -> Result<BoundCurve, RunError> {
    let p = cfg.distance.p;
    if let Some(g) = model.generator() {
        let q = cfg
            .bounds
            .q
            .ok_or_else(|| RunError::Config("constant-rate bounds need bounds.q".into()))?;
        let c2_grid = pdmp_core::stats::linspace(0.0, cfg.horizon, cfg.bounds.c2_points);
        let spectral = SpectralReport::compute(g, model.alpha_vec(), &[p, q], &c2_grid)?;
        let starts: Vec<HybridState> = std::iter::once(z0.clone()).chain(zt0.cloned()).collect();
        let moment_n = cfg.bounds.moment_replicas.unwrap_or(cfg.replicas);
        let m = moment_sup_estimate(model, &starts, q, grid, moment_n, splitmix64(cfg.master_seed ^ MOMENT_STREAM))?;
        let mut curve = constant_rate_envelope(&spectral, p, q, m, grid)?;
        curve.constants.insert("moment_replicas".into(), moment_n as f64);
        Ok(curve)
    } else {
        let s = model.state_rates().expect("rates are constant or state-dependent");
        let alpha = model.uniform_alpha()?;
        let r = model.invariant_radius()?;
        for z in std::iter::once(z0).chain(zt0) {
            if z.norm() > r * (1.0 + 1e-9) {
                return Err(RunError::Config(format!(
                    "state-dependent bounds need starts in the invariant ball of radius {r}; |x| = {}",
                    z.norm()
                )));
            }
        }
        let b = match cfg.bounds.b {
            Some(b) => b,
            None => default_companion_b(model)?,
        };
        Ok(nonconstant_envelope(alpha, b, s.lipschitz, r, grid)?)
    }
}

/// Seed used for replica `index`; exposed for documentation and tests.
pub fn seed_of(master: u64, index: usize) -> u64 {
    replica_seed(master, index as u64)
}
