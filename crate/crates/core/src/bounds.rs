//! Closed-form exponential envelopes and the check of an empirical distance
//! curve against them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::coupling::{companion_mean_bound, gamma_c_constants};
use crate::error::{Error, Result};
use crate::metrics::DistanceCurve;
use crate::switching::SpectralReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    /// Constant rates: `2^{p+1} M^{p/q} C2 exp(-theta_p t / (1 + s theta_p / rho))`.
    ConstantRate,
    /// State-dependent rates: `(1 + 2r)(1 + c t) exp(-alpha t / (1 + alpha / gamma))`.
    StateDependent,
    /// Mean of the companion process started at `D`.
    Companion,
}

impl BoundKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundKind::ConstantRate => "constant-rate",
            BoundKind::StateDependent => "state-dependent",
            BoundKind::Companion => "companion",
        }
    }
}

/// An envelope evaluated on a grid, with every constant that entered it.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCurve {
    pub kind: BoundKind,
    pub constants: BTreeMap<String, f64>,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl BoundCurve {
    /// Exponential decay rate of the envelope.
    pub fn rate(&self) -> f64 {
        self.constants.get("rate").copied().unwrap_or(f64::NAN)
    }

    /// `t,envelope`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,envelope\n");
        for (t, v) in self.grid.iter().zip(&self.values) {
            let _ = writeln!(out, "{t},{v}");
        }
        out
    }

    /// `key = value` lines, sorted by key.
    pub fn constants_sidecar(&self) -> String {
        let mut out = format!("kind = {}\n", self.kind.as_str());
        for (k, v) in &self.constants {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// One-line summary listing every constant.
    pub fn describe(&self) -> String {
        let parts: Vec<String> = self.constants.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{} envelope [{}]", self.kind.as_str(), parts.join(", "))
    }
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() || t_grid.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(Error::input("envelope grid must be non-empty, finite and non-negative"));
    }
    Ok(())
}

/// Envelope for constant rates at moment orders `p < q < kappa`.
///
/// `m_qm` bounds `sup_t E|X_t|^q` for both initial laws; `theta_p` and `C2`
/// are read from `spectral` at order `p`. With `s = q / (q - 1)` the rate is
/// `theta_p / (1 + s theta_p / rho)`, which tends to `theta_p` as `rho` grows.
pub fn constant_rate_envelope(spectral: &SpectralReport, p: f64, q: f64, m_qm: f64, t_grid: &[f64]) -> Result<BoundCurve> {
    check_grid(t_grid)?;
    if !(p >= 1.0) {
        return Err(Error::input(format!("moment order p must be >= 1, got {p}")));
    }
    if !(p < q) {
        return Err(Error::assumption(format!("need p < q, got p = {p}, q = {q}")));
    }
    if !(q < spectral.kappa_moment) {
        return Err(Error::assumption(format!(
            "need q < kappa, got q = {q} and kappa = {}",
            spectral.kappa_moment
        )));
    }
    if !(m_qm > 0.0) || !m_qm.is_finite() {
        return Err(Error::input(format!("moment bound must be positive and finite, got {m_qm}")));
    }
    let e = spectral
        .exponent(p)
        .ok_or_else(|| Error::input(format!("spectral report has no exponent at p = {p}")))?;
    let theta = e.theta;
    let rho = spectral.rho;
    let s = q / (q - 1.0);
    let rate = if rho.is_infinite() { theta } else { theta / (1.0 + s * theta / rho) };
    let beta = if rho.is_infinite() { 1.0 } else { theta / (theta + rho / s) };
    let prefactor = 2f64.powf(p + 1.0) * m_qm.powf(p / q) * e.c2;
    let values = t_grid.iter().map(|t| prefactor * (-rate * t).exp()).collect();
    let constants = BTreeMap::from([
        ("p".to_string(), p),
        ("q".to_string(), q),
        ("s".to_string(), s),
        ("theta_p".to_string(), theta),
        ("rho".to_string(), rho),
        ("rho_constant".to_string(), spectral.rho_constant),
        ("kappa".to_string(), spectral.kappa_moment),
        ("m_qm".to_string(), m_qm),
        ("c2".to_string(), e.c2),
        ("beta".to_string(), beta),
        ("prefactor".to_string(), prefactor),
        ("rate".to_string(), rate),
    ]);
    Ok(BoundCurve { kind: BoundKind::ConstantRate, constants, grid: t_grid.to_vec(), values })
}

/// Envelope for state-dependent rates with uniform contraction `alpha`,
/// coalescence constant `b`, Lipschitz constant `kappa_lip` and invariant
/// radius `r`: `(1 + 2r)(1 + c t) exp(-alpha t / (1 + alpha / gamma))` with
/// `p = exp(-2 r kappa_lip / alpha)`.
pub fn nonconstant_envelope(alpha: f64, b: f64, kappa_lip: f64, r: f64, t_grid: &[f64]) -> Result<BoundCurve> {
    check_grid(t_grid)?;
    if !(alpha > 0.0) || !(b > 0.0) || !(kappa_lip >= 0.0) || !(r >= 0.0) {
        return Err(Error::input(format!(
            "need alpha, b > 0 and kappa, r >= 0 (alpha = {alpha}, b = {b}, kappa = {kappa_lip}, r = {r})"
        )));
    }
    let p = (-2.0 * r * kappa_lip / alpha).exp();
    let (gamma, c) = gamma_c_constants(alpha, b, p)?;
    let rate = alpha * gamma / (alpha + gamma);
    let values = t_grid.iter().map(|t| (1.0 + 2.0 * r) * (1.0 + c * t) * (-rate * t).exp()).collect();
    let constants = BTreeMap::from([
        ("alpha".to_string(), alpha),
        ("b".to_string(), b),
        ("kappa_lip".to_string(), kappa_lip),
        ("r".to_string(), r),
        ("p".to_string(), p),
        ("gamma".to_string(), gamma),
        ("c".to_string(), c),
        ("beta".to_string(), alpha / (alpha + gamma)),
        ("rate".to_string(), rate),
    ]);
    Ok(BoundCurve { kind: BoundKind::StateDependent, constants, grid: t_grid.to_vec(), values })
}

/// Companion mean bound on a grid.
pub fn companion_envelope(d: f64, alpha: f64, b: f64, kappa_lip: f64, t_grid: &[f64]) -> Result<BoundCurve> {
    check_grid(t_grid)?;
    let values = t_grid
        .iter()
        .map(|t| companion_mean_bound(d, alpha, b, kappa_lip, *t))
        .collect::<Result<Vec<_>>>()?;
    let p = (-d * kappa_lip / alpha).exp();
    let (gamma, c) = gamma_c_constants(alpha, b, p)?;
    let constants = BTreeMap::from([
        ("d".to_string(), d),
        ("alpha".to_string(), alpha),
        ("b".to_string(), b),
        ("kappa_lip".to_string(), kappa_lip),
        ("p".to_string(), p),
        ("gamma".to_string(), gamma),
        ("c".to_string(), c),
        ("rate".to_string(), alpha * gamma / (alpha + gamma)),
    ]);
    Ok(BoundCurve { kind: BoundKind::Companion, constants, grid: t_grid.to_vec(), values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopePoint {
    pub t: f64,
    pub empirical: f64,
    pub half_width: f64,
    pub envelope: f64,
    pub pass: bool,
}

/// Point-by-point comparison of an empirical curve with an envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeReport {
    pub pass: bool,
    /// Largest `empirical / envelope` over the grid.
    pub worst_ratio: f64,
    pub worst_t: f64,
    pub slack: f64,
    pub points: Vec<EnvelopePoint>,
}

impl EnvelopeReport {
    pub fn failures(&self) -> impl Iterator<Item = &EnvelopePoint> {
        self.points.iter().filter(|p| !p.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,empirical,half_width,envelope,pass\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{},{}", p.t, p.empirical, p.half_width, p.envelope, p.pass);
        }
        out
    }
}

/// Passes at a grid time iff `empirical <= envelope (1 + slack) + half-width`.
pub fn envelope_check(empirical: &DistanceCurve, envelope: &BoundCurve, slack: f64) -> Result<EnvelopeReport> {
    if !(slack >= 0.0) {
        return Err(Error::input("slack must be non-negative"));
    }
    if empirical.points.len() != envelope.grid.len() {
        return Err(Error::GridMismatch(format!(
            "{} empirical points against {} envelope points",
            empirical.points.len(),
            envelope.grid.len()
        )));
    }
    let mut points = Vec::with_capacity(envelope.grid.len());
    let mut worst_ratio = f64::NEG_INFINITY;
    let mut worst_t = f64::NAN;
    for (e, (t, v)) in empirical.points.iter().zip(envelope.grid.iter().zip(&envelope.values)) {
        if (e.t - t).abs() > 1e-9 * t.abs().max(1.0) {
            return Err(Error::GridMismatch(format!("empirical time {} against envelope time {t}", e.t)));
        }
        let hw = e.half_width();
        let pass = e.estimate <= v * (1.0 + slack) + hw;
        let ratio = e.estimate / v;
        if ratio > worst_ratio {
            worst_ratio = ratio;
            worst_t = *t;
        }
        points.push(EnvelopePoint { t: *t, empirical: e.estimate, half_width: hw, envelope: *v, pass });
    }
    Ok(EnvelopeReport { pass: points.iter().all(|p| p.pass), worst_ratio, worst_t, slack, points })
}
