//! Experiment configuration: a TOML document with typed sections.
//!
//! ```toml
//! experiment = "full-check"
//! replicas = 2000
//! horizon = 10.0
//! master-seed = 7
//!
//! [model]
//! kind = "toy"
//! lambda = [1.0, 1.0]
//! alpha = 1.0
//! a = [1.0]
//!
//! [initial]
//! first = { x = [0.0], mode = 0 }
//! second = { x = [1.0], mode = 1 }
//! ```

use std::fmt;
use std::path::PathBuf;

use pdmp_core::flows::VectorField;
use pdmp_core::model::{JumpSampler, SwitchedModel};
use pdmp_core::models::{self, MorrisLecarParams};
use pdmp_core::switching::SwitchGenerator;
use pdmp_core::{FlowIntegrator, HybridState};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Couple,
    Bounds,
    FullCheck,
    Audit,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Couple => "couple",
            ExperimentKind::Bounds => "bounds",
            ExperimentKind::FullCheck => "full-check",
            ExperimentKind::Audit => "audit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    pub horizon: f64,
    #[serde(default = "default_sample_dt")]
    pub sample_dt: f64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialConfig>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub distance: DistanceConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_replicas() -> usize {
    1
}

fn default_sample_dt() -> f64 {
    0.1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    /// Two modes, `F^i(x) = -alpha (x - i a)`, constant rates.
    Toy(ToyModel),
    /// Two modes with sinusoidal state-dependent rates.
    Sinusoidal(SinusoidalModel),
    MorrisLecar(MorrisLecarModel),
    /// Affine fields and a constant generator given row by row.
    Custom(CustomModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModel {
    /// Exit rates of modes 0 and 1.
    pub lambda: [f64; 2],
    pub alpha: f64,
    /// Fixed point of mode 1; its length sets the dimension.
    pub a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidalModel {
    pub alpha: f64,
    /// Fixed points of modes 0 and 1.
    pub centers: [Vec<f64>; 2],
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_amplitude() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct MorrisLecarModel {
    pub capacitance: f64,
    pub input_current: f64,
    pub conductance: [f64; 3],
    pub reversal: [f64; 3],
    pub rate_scale: [f64; 2],
    pub half_activation: [f64; 2],
    pub slope: [f64; 2],
    pub channels: usize,
    /// Largest accepted `K`.
    pub channel_cap: usize,
}

impl Default for MorrisLecarModel {
    fn default() -> Self {
        Self::from_params(&MorrisLecarParams::default())
    }
}

impl MorrisLecarModel {
    pub fn from_params(p: &MorrisLecarParams) -> Self {
        Self {
            capacitance: p.capacitance,
            input_current: p.input_current,
            conductance: p.conductance,
            reversal: p.reversal,
            rate_scale: p.rate_scale,
            half_activation: p.half_activation,
            slope: p.slope,
            channels: p.channels,
            channel_cap: models::MAX_CHANNELS,
        }
    }

    pub fn params(&self) -> MorrisLecarParams {
        MorrisLecarParams {
            capacitance: self.capacitance,
            input_current: self.input_current,
            conductance: self.conductance,
            reversal: self.reversal,
            rate_scale: self.rate_scale,
            half_activation: self.half_activation,
            slope: self.slope,
            channels: self.channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomModel {
    /// Off-diagonal rates `a(i, j)`; the diagonal is ignored.
    pub rates: Vec<Vec<f64>>,
    /// Contraction constant of each field (may be negative).
    pub alpha: Vec<f64>,
    pub fields: Vec<AffineField>,
}

/// `F(x) = M x + v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineField {
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConfig {
    pub x: Vec<f64>,
    #[serde(default)]
    pub mode: usize,
}

impl StateConfig {
    pub fn state(&self) -> HybridState {
        HybridState::new(self.x.clone(), self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub first: StateConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second: Option<StateConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerChoice {
    #[default]
    Thinning,
    Inversion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub step: f64,
    pub tolerance: f64,
    pub sampler: SamplerChoice,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        let d = FlowIntegrator::default();
        Self { step: d.step, tolerance: d.tolerance, sampler: SamplerChoice::Thinning }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Upper bound from the coupled pairs.
    #[default]
    Coupling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistanceConfig {
    pub p: f64,
    pub estimator: Estimator,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        Self { p: 1.0, estimator: Estimator::Coupling }
    }
}

/// `points` equally spaced times on `[start, end]`; `end` defaults to the
/// horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub start: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end: Option<f64>,
    pub points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { start: 0.0, end: None, points: 21 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct BoundsConfig {
    /// Moment order used by the constant-rate envelope.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    /// Relative slack of the envelope check (the CI half-width is added).
    pub slack: f64,
    /// Replicas for the moment plug-in; defaults to `replicas`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moment_replicas: Option<usize>,
    /// Coalescence rate of the lower-bound chain; computed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    /// Points of the grid used for the `C2` supremum.
    pub c2_points: usize,
    pub audit_samples: usize,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self { q: None, slack: 0.02, moment_replicas: None, b: None, c2_points: 401, audit_samples: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct OutputConfig {
    /// Replicas written to the path CSVs; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_replicas: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn plain(message: impl Into<String>) -> Self {
        Self { line: None, column: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = match e.span() {
            Some(span) => {
                // Unknown keys are reported at their table; point at the key.
                let mut start = span.start.min(text.len());
                if let Some(key) = e.message().strip_prefix("unknown field `").and_then(|m| m.split('`').next()) {
                    let mut offset = start;
                    for l in text[start..].split_inclusive('\n') {
                        if l.trim_start().strip_prefix(key).is_some_and(|r| r.trim_start().starts_with('=')) {
                            start = offset + (l.len() - l.trim_start().len());
                            break;
                        }
                        offset += l.len();
                    }
                }
                let before = &text[..start];
                let line = before.matches('\n').count() + 1;
                let column = before.len() - before.rfind('\n').map_or(0, |k| k + 1) + 1;
                (Some(line), Some(column))
            }
            None => (None, None),
        };
        ConfigError { line, column, message: e.message().to_string() }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// TOML text of a config; [`parse_config`] reads it back unchanged.
pub fn to_toml(cfg: &ExperimentConfig) -> Result<String, ConfigError> {
    toml::to_string(cfg).map_err(|e| ConfigError::plain(format!("cannot serialize config: {e}")))
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::plain(format!("{name} must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.replicas == 0 {
            return Err(ConfigError::plain("replicas must be at least 1"));
        }
        if self.master_seed > i64::MAX as u64 {
            return Err(ConfigError::plain("master-seed must fit in a TOML integer (< 2^63)"));
        }
        positive("horizon", self.horizon)?;
        positive("sample-dt", self.sample_dt)?;
        positive("integrator.step", self.integrator.step)?;
        positive("integrator.tolerance", self.integrator.tolerance)?;
        if !(self.distance.p >= 1.0) || !self.distance.p.is_finite() {
            return Err(ConfigError::plain("distance.p must be >= 1"));
        }
        let (start, end) = self.grid_bounds();
        if self.grid.points < 2 || !(start >= 0.0) || !(end > start) || end > self.horizon * (1.0 + 1e-12) {
            return Err(ConfigError::plain(format!(
                "grid needs >= 2 points on 0 <= start < end <= horizon (got {} points on [{start}, {end}])",
                self.grid.points
            )));
        }
        positive("bounds.slack", self.bounds.slack + f64::MIN_POSITIVE)?;
        if let Some(q) = self.bounds.q {
            if !(q > self.distance.p) {
                return Err(ConfigError::plain(format!("bounds.q must exceed distance.p, got {q}")));
            }
        }
        if let Some(b) = self.bounds.b {
            positive("bounds.b", b)?;
        }
        if self.bounds.moment_replicas == Some(0) || self.bounds.c2_points < 2 || self.bounds.audit_samples < 2 {
            return Err(ConfigError::plain("bounds sample counts must be at least 2 (moment-replicas at least 1)"));
        }
        if let ModelConfig::MorrisLecar(m) = &self.model {
            if m.channels > m.channel_cap {
                return Err(ConfigError::plain(format!(
                    "model.channels = {} exceeds channel-cap = {}",
                    m.channels, m.channel_cap
                )));
            }
        }
        let model = self.build_model()?;
        let needs_pair = matches!(self.experiment, ExperimentKind::Couple | ExperimentKind::FullCheck);
        let (first, second) = self.initial_states(&model);
        for z in std::iter::once(&first).chain(second.as_ref()) {
            model
                .check_state(z)
                .map_err(|e| ConfigError::plain(format!("initial state: {e}")))?;
        }
        if needs_pair && second.is_none() {
            return Err(ConfigError::plain(format!("{} needs initial.second", self.experiment.as_str())));
        }
        Ok(())
    }

    pub fn grid_bounds(&self) -> (f64, f64) {
        (self.grid.start, self.grid.end.unwrap_or(self.horizon))
    }

    pub fn grid(&self) -> Vec<f64> {
        let (start, end) = self.grid_bounds();
        pdmp_core::stats::linspace(start, end, self.grid.points)
    }

    /// Starting points; without an `[initial]` section the first copy starts
    /// at the origin in mode 0.
    pub fn initial_states(&self, model: &SwitchedModel) -> (HybridState, Option<HybridState>) {
        match &self.initial {
            Some(i) => (i.first.state(), i.second.as_ref().map(StateConfig::state)),
            None => (HybridState::new(vec![0.0; model.dim()], 0), None),
        }
    }

    pub fn model_name(&self) -> &'static str {
        match self.model {
            ModelConfig::Toy(_) => "toy",
            ModelConfig::Sinusoidal(_) => "sinusoidal",
            ModelConfig::MorrisLecar(_) => "morris-lecar",
            ModelConfig::Custom(_) => "custom",
        }
    }

    pub fn build_model(&self) -> Result<SwitchedModel, ConfigError> {
        let err = |e: pdmp_core::Error| ConfigError::plain(format!("model: {e}"));
        let model = match &self.model {
            ModelConfig::Toy(t) => models::toy_model(t.lambda[0], t.lambda[1], t.alpha, &t.a).map_err(err)?,
            ModelConfig::Sinusoidal(s) => {
                models::sinusoidal_model(s.alpha, &s.centers[0], &s.centers[1], s.amplitude).map_err(err)?
            }
            ModelConfig::MorrisLecar(m) => models::morris_lecar_model_with_cap(&m.params(), m.channel_cap).map_err(err)?,
            ModelConfig::Custom(c) => {
                let g = SwitchGenerator::from_rates(&c.rates).map_err(err)?;
                if c.fields.len() != g.n_modes() || c.alpha.len() != g.n_modes() {
                    return Err(ConfigError::plain("model: need one field and one alpha per mode"));
                }
                let fields = c
                    .fields
                    .iter()
                    .zip(&c.alpha)
                    .map(|(f, a)| VectorField::affine_from_rows(&f.matrix, &f.offset).map(|v| v.with_alpha(*a)))
                    .collect::<pdmp_core::Result<Vec<_>>>()
                    .map_err(err)?;
                SwitchedModel::new(fields, pdmp_core::Rates::Constant(g), c.alpha.clone()).map_err(err)?
            }
        };
        let integrator = FlowIntegrator::new(self.integrator.step, self.integrator.tolerance).map_err(err)?;
        let sampler = match self.integrator.sampler {
            SamplerChoice::Thinning => JumpSampler::Thinning,
            SamplerChoice::Inversion => JumpSampler::Inversion,
        };
        Ok(model.with_integrator(integrator).with_sampler(sampler))
    }
}
