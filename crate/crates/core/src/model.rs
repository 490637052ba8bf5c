//! The full switched model: one vector field per mode, jump rates
//! `a(x, i, j)` (constant or state dependent) and the audits of the declared
//! rate constants.

use std::fmt;
use std::sync::Arc;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::flows::{self, sample_ball, DissipativityAudit, FlowIntegrator, VectorField};
use crate::rng::open_uniform;
use crate::switching::SwitchGenerator;

/// A point `(x, i)` of `R^d x E`.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridState {
    pub x: Vec<f64>,
    pub mode: usize,
}

impl HybridState {
    pub fn new(x: Vec<f64>, mode: usize) -> Self {
        Self { x, mode }
    }

    pub fn norm(&self) -> f64 {
        self.x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Position-dependent jump rates.
///
/// `outgoing` lists `(j, a(x, i, j))` for the possible targets `j != i` of
/// mode `i`. The list of targets (and their order) must not depend on `x`;
/// rates may be zero.
pub trait JumpRates: Send + Sync {
    fn n_modes(&self) -> usize;

    fn outgoing(&self, x: &[f64], mode: usize, out: &mut Vec<(usize, f64)>);

    /// `lambda(x, i) = sum_j a(x, i, j)`.
    fn total(&self, x: &[f64], mode: usize) -> f64 {
        let mut buf = Vec::new();
        self.outgoing(x, mode, &mut buf);
        buf.iter().map(|(_, r)| r).sum()
    }
}

type RateFn = Arc<dyn Fn(&[f64], usize, usize) -> f64 + Send + Sync>;

/// Dense rates from a closure `a(x, i, j)`; every `j != i` is a target.
#[derive(Clone)]
pub struct FnRates {
    n_modes: usize,
    f: RateFn,
}

impl FnRates {
    pub fn new(n_modes: usize, f: impl Fn(&[f64], usize, usize) -> f64 + Send + Sync + 'static) -> Self {
        Self { n_modes, f: Arc::new(f) }
    }
}

impl JumpRates for FnRates {
    fn n_modes(&self) -> usize {
        self.n_modes
    }

    fn outgoing(&self, x: &[f64], mode: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        for j in 0..self.n_modes {
            if j != mode {
                out.push((j, (self.f)(x, mode, j)));
            }
        }
    }
}

/// State-dependent rates with their declared constants: lower bound `a_min`
/// on every listed rate, Lipschitz constant `lipschitz` of
/// `x -> sum_j a(x, i, j)` in the `l1` sense, and upper bound `a_max` on the
/// total exit rate over the audit region.
#[derive(Clone)]
pub struct StateRates {
    pub rates: Arc<dyn JumpRates>,
    pub lower: f64,
    pub lipschitz: f64,
    pub upper: f64,
}

impl fmt::Debug for StateRates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StateRates")
            .field("n_modes", &self.rates.n_modes())
            .field("lower", &self.lower)
            .field("lipschitz", &self.lipschitz)
            .field("upper", &self.upper)
            .finish()
    }
}

impl StateRates {
    pub fn new(rates: impl JumpRates + 'static, lower: f64, lipschitz: f64, upper: f64) -> Result<Self> {
        if !(lower > 0.0) || !(lipschitz >= 0.0) || !(upper >= lower) || !upper.is_finite() {
            return Err(Error::input(format!(
                "need 0 < lower <= upper < inf and lipschitz >= 0, got lower {lower}, lipschitz {lipschitz}, upper {upper}"
            )));
        }
        Ok(Self { rates: Arc::new(rates), lower, lipschitz, upper })
    }
}

#[derive(Debug, Clone)]
pub enum Rates {
    Constant(SwitchGenerator),
    StateDependent(StateRates),
}

impl Rates {
    pub fn n_modes(&self) -> usize {
        match self {
            Rates::Constant(g) => g.n_modes(),
            Rates::StateDependent(s) => s.rates.n_modes(),
        }
    }

    pub fn outgoing(&self, x: &[f64], mode: usize, out: &mut Vec<(usize, f64)>) {
        match self {
            Rates::Constant(g) => {
                out.clear();
                for j in 0..g.n_modes() {
                    if j != mode {
                        out.push((j, g.rate(mode, j)));
                    }
                }
            }
            Rates::StateDependent(s) => s.rates.outgoing(x, mode, out),
        }
    }

    pub fn total(&self, x: &[f64], mode: usize) -> f64 {
        match self {
            Rates::Constant(g) => g.exit_rate(mode),
            Rates::StateDependent(s) => s.rates.total(x, mode),
        }
    }
}

/// Region on which rate constants are audited and trajectories are confined.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// Centered closed ball.
    Ball(f64),
    /// Axis-aligned box `[lo, hi]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Region {
    pub fn contains(&self, x: &[f64], tolerance: f64) -> bool {
        match self {
            Region::Ball(r) => x.iter().map(|v| v * v).sum::<f64>().sqrt() <= r + tolerance,
            Region::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (a, b))| *v >= a - tolerance && *v <= b + tolerance),
        }
    }

    /// Uniform point of the region.
    pub fn sample<R: RngCore + ?Sized>(&self, dim: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Region::Ball(r) => sample_ball(rng, dim, *r),
            Region::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(a, b)| a + (b - a) * open_uniform(rng))
                .collect(),
        }
    }

    /// `n` audit points: an even grid in one dimension, uniform draws otherwise.
    pub fn audit_points<R: RngCore + ?Sized>(&self, dim: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        if dim == 1 {
            let (a, b) = match self {
                Region::Ball(r) => (-r, *r),
                Region::Box { lo, hi } => (lo[0], hi[0]),
            };
            return crate::stats::linspace(a, b, n).into_iter().map(|v| vec![v]).collect();
        }
        (0..n).map(|_| self.sample(dim, rng)).collect()
    }
}

/// Jump-time sampler for state-dependent rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JumpSampler {
    /// Integrates the cumulative rate along the flow up to an `Exp(1)` level.
    Inversion,
    /// Proposes at the declared upper bound and accepts with the rate ratio.
    #[default]
    Thinning,
}

/// Fields, rates and dissipativity constants of a PDMP.
#[derive(Debug, Clone)]
pub struct SwitchedModel {
    dim: usize,
    fields: Vec<VectorField>,
    rates: Rates,
    alpha: Vec<f64>,
    integrator: FlowIntegrator,
    sampler: JumpSampler,
    region: Option<Region>,
}

impl SwitchedModel {
    /// `alpha` holds one contraction constant per mode.
    pub fn new(fields: Vec<VectorField>, rates: Rates, alpha: Vec<f64>) -> Result<Self> {
        let n = rates.n_modes();
        if fields.len() != n || alpha.len() != n {
            return Err(Error::input(format!(
                "{} fields and {} alpha values for {n} modes",
                fields.len(),
                alpha.len()
            )));
        }
        let dim = fields[0].dim();
        if fields.iter().any(|f| f.dim() != dim) {
            return Err(Error::input("all fields must share one dimension"));
        }
        if let Rates::Constant(g) = &rates {
            g.require_irreducible()?;
        }
        Ok(Self {
            dim,
            fields,
            rates,
            alpha,
            integrator: FlowIntegrator::default(),
            sampler: JumpSampler::default(),
            region: None,
        })
    }

    /// Fields carrying their own `alpha` via [`VectorField::with_alpha`].
    pub fn from_fields(fields: Vec<VectorField>, rates: Rates) -> Result<Self> {
        let alpha = fields
            .iter()
            .enumerate()
            .map(|(i, f)| f.alpha().ok_or_else(|| Error::input(format!("field {i} declares no alpha"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(fields, rates, alpha)
    }

    pub fn with_integrator(mut self, integrator: FlowIntegrator) -> Self {
        self.integrator = integrator;
        self
    }

    pub fn with_sampler(mut self, sampler: JumpSampler) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn with_region(mut self, region: Region) -> Self {
        self.region = Some(region);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_modes(&self) -> usize {
        self.fields.len()
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    pub fn field(&self, mode: usize) -> &VectorField {
        &self.fields[mode]
    }

    pub fn rates(&self) -> &Rates {
        &self.rates
    }

    pub fn generator(&self) -> Option<&SwitchGenerator> {
        match &self.rates {
            Rates::Constant(g) => Some(g),
            Rates::StateDependent(_) => None,
        }
    }

    pub fn state_rates(&self) -> Option<&StateRates> {
        match &self.rates {
            Rates::StateDependent(s) => Some(s),
            Rates::Constant(_) => None,
        }
    }

    pub fn alpha_vec(&self) -> &[f64] {
        &self.alpha
    }

    pub fn integrator(&self) -> &FlowIntegrator {
        &self.integrator
    }

    pub fn sampler(&self) -> JumpSampler {
        self.sampler
    }

    /// Uniform dissipativity constant `min_i alpha(i)`; must be positive.
    pub fn uniform_alpha(&self) -> Result<f64> {
        let a = self.alpha.iter().copied().fold(f64::INFINITY, f64::min);
        if a > 0.0 {
            Ok(a)
        } else {
            Err(Error::assumption(format!("no positive uniform dissipativity constant (min alpha = {a})")))
        }
    }

    /// `r = max_i |F^i(0)| / alpha`.
    pub fn invariant_radius(&self) -> Result<f64> {
        flows::invariant_radius(&self.fields, self.uniform_alpha()?)
    }

    /// Declared region, else the invariant ball. Without a positive uniform
    /// contraction there is no invariant ball; the audits then sample the
    /// ball of radius `max(1, max_i |F^i(0)|)`.
    pub fn region(&self) -> Result<Region> {
        if let Some(r) = &self.region {
            return Ok(r.clone());
        }
        match self.invariant_radius() {
            Ok(r) => Ok(Region::Ball(r)),
            Err(Error::InvalidAssumption(_)) => {
                let zero = vec![0.0; self.dim];
                let far = self.fields.iter().map(|f| f.eval(&zero).iter().map(|v| v * v).sum::<f64>().sqrt()).fold(1.0, f64::max);
                Ok(Region::Ball(far))
            }
            Err(e) => Err(e),
        }
    }

    pub fn check_state(&self, z: &HybridState) -> Result<()> {
        if z.x.len() != self.dim {
            return Err(Error::input(format!("state has dimension {}, model has {}", z.x.len(), self.dim)));
        }
        if z.mode >= self.n_modes() {
            return Err(Error::input(format!("mode {} out of range", z.mode)));
        }
        if z.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("initial state is not finite"));
        }
        Ok(())
    }

    /// Samples each field's declared contraction on the audit region.
    pub fn audit_dissipativity<R: RngCore + ?Sized>(&self, n_samples: usize, rng: &mut R) -> Result<Vec<DissipativityAudit>> {
        let region = self.region()?;
        self.fields
            .iter()
            .zip(&self.alpha)
            .map(|(f, a)| flows::audit_dissipativity_with(f, *a, n_samples, |r| region.sample(self.dim, r), rng))
            .collect()
    }

    /// Checks the declared rate constants on `n_points` points of the audit
    /// region times every mode. Constant-rate models pass trivially.
    pub fn audit_rates<R: RngCore + ?Sized>(&self, n_points: usize, rng: &mut R) -> Result<RateAudit> {
        let Rates::StateDependent(s) = &self.rates else {
            return Ok(RateAudit::trivial(n_points));
        };
        if n_points < 2 {
            return Err(Error::input("rate audit needs at least two points"));
        }
        let points = self.region()?.audit_points(self.dim, n_points, rng);
        let mut min_rate = f64::INFINITY;
        let mut max_total: f64 = 0.0;
        let mut max_slope: f64 = 0.0;
        let mut a = Vec::new();
        let mut b = Vec::new();
        for mode in 0..self.n_modes() {
            for (k, x) in points.iter().enumerate() {
                s.rates.outgoing(x, mode, &mut a);
                let total: f64 = a.iter().map(|(_, r)| r).sum();
                max_total = max_total.max(total);
                for (_, r) in &a {
                    min_rate = min_rate.min(*r);
                }
                // Neighbours on the 1-d grid, consecutive draws otherwise.
                let y = &points[if k + 1 < points.len() { k + 1 } else { 0 }];
                let dist = x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
                if dist > 0.0 {
                    s.rates.outgoing(y, mode, &mut b);
                    let diff: f64 = a.iter().zip(&b).map(|((_, r), (_, q))| (r - q).abs()).sum();
                    max_slope = max_slope.max(diff / dist);
                }
            }
        }
        let tol = 1e-12;
        Ok(RateAudit {
            lower_ok: min_rate >= s.lower * (1.0 - tol),
            upper_ok: max_total <= s.upper * (1.0 + tol),
            lipschitz_ok: max_slope <= s.lipschitz * (1.0 + tol) + tol,
            measured_min: min_rate,
            measured_max_total: max_total,
            measured_lipschitz: max_slope,
            points: n_points,
        })
    }
}

/// Measured rate constants against the declared ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateAudit {
    pub lower_ok: bool,
    pub upper_ok: bool,
    pub lipschitz_ok: bool,
    pub measured_min: f64,
    pub measured_max_total: f64,
    pub measured_lipschitz: f64,
    pub points: usize,
}

impl RateAudit {
    fn trivial(points: usize) -> Self {
        Self {
            lower_ok: true,
            upper_ok: true,
            lipschitz_ok: true,
            measured_min: f64::NAN,
            measured_max_total: f64::NAN,
            measured_lipschitz: 0.0,
            points,
        }
    }

    pub fn pass(&self) -> bool {
        self.lower_ok && self.upper_ok && self.lipschitz_ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn two_field_model(rates: Rates) -> SwitchedModel {
        let f0 = VectorField::linear_attractor(1.0, &[-1.0]).unwrap();
        let f1 = VectorField::linear_attractor(1.0, &[1.0]).unwrap();
        SwitchedModel::from_fields(vec![f0, f1], rates).unwrap()
    }

    fn sine_rates(lower: f64, lipschitz: f64, upper: f64) -> StateRates {
        let f = FnRates::new(2, |x, i, _| if i == 0 { 1.0 + 0.4 * x[0].sin() } else { 1.0 + 0.4 * x[0].cos() });
        StateRates::new(f, lower, lipschitz, upper).unwrap()
    }

    #[test]
    fn constant_rates_list_every_target() {
        let g = SwitchGenerator::from_rates(&[vec![0.0, 1.0, 2.0], vec![3.0, 0.0, 0.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let r = Rates::Constant(g);
        let mut out = Vec::new();
        r.outgoing(&[0.0], 0, &mut out);
        assert_eq!(out, vec![(1, 1.0), (2, 2.0)]);
        assert_eq!(r.total(&[5.0], 1), 3.0);
    }

    #[test]
    fn model_shape_checks() {
        let g = SwitchGenerator::two_state(1.0, 1.0).unwrap();
        let f = VectorField::linear_attractor(1.0, &[0.0]).unwrap();
        assert!(SwitchedModel::new(vec![f.clone()], Rates::Constant(g.clone()), vec![1.0]).is_err());
        let f2 = VectorField::linear_attractor(1.0, &[0.0, 0.0]).unwrap();
        assert!(SwitchedModel::new(vec![f, f2], Rates::Constant(g), vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn radius_and_region() {
        let m = two_field_model(Rates::Constant(SwitchGenerator::two_state(1.0, 1.0).unwrap()));
        assert!((m.invariant_radius().unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(m.region().unwrap(), Region::Ball(1.0));
        assert!(m.region().unwrap().contains(&[-1.0], 0.0));
        assert!(!m.region().unwrap().contains(&[1.01], 0.0));
    }

    #[test]
    fn rate_audit_accepts_valid_and_flags_wrong_constants() {
        let mut rng = rng_from_seed(1);
        let m = two_field_model(Rates::StateDependent(sine_rates(0.6, 0.4, 1.4)));
        let a = m.audit_rates(10_000, &mut rng).unwrap();
        assert!(a.pass(), "{a:?}");
        // On [-1, 1] the sine rate bottoms out at 1 - 0.4 sin 1.
        assert!((a.measured_min - (1.0 - 0.4 * 1f64.sin())).abs() < 1e-6);
        assert!(a.measured_lipschitz <= 0.4 + 1e-9 && a.measured_lipschitz > 0.39);

        let bad = two_field_model(Rates::StateDependent(sine_rates(0.7, 0.3, 1.2)));
        let a = bad.audit_rates(10_000, &mut rng).unwrap();
        assert!(!a.lower_ok && !a.lipschitz_ok && !a.upper_ok);
    }

    #[test]
    fn dissipativity_audit_per_mode() {
        let mut rng = rng_from_seed(2);
        let m = two_field_model(Rates::Constant(SwitchGenerator::two_state(1.0, 1.0).unwrap()));
        let audits = m.audit_dissipativity(1000, &mut rng).unwrap();
        assert!(audits.iter().all(|a| a.pass));
    }
}
