//! Bundled models: the two-flow toy process, a two-mode model with
//! sinusoidal state-dependent rates, the stochastic Morris–Lecar neuron and
//! the stationary density of two-mode affine flows on the line.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flows::VectorField;
use crate::model::{FnRates, JumpRates, Rates, Region, StateRates, SwitchedModel};
use crate::switching::SwitchGenerator;

/// Two modes with `F^i(x) = -alpha (x - i a)` and constant rates `lambda0`
/// (leaving mode 0) and `lambda1` (leaving mode 1).
pub fn toy_model(lambda0: f64, lambda1: f64, alpha: f64, a: &[f64]) -> Result<SwitchedModel> {
    if !(lambda0 > 0.0) || !(lambda1 > 0.0) || !(alpha > 0.0) || a.is_empty() {
        return Err(Error::input("toy model needs positive rates, positive alpha and a non-empty offset"));
    }
    let zero = vec![0.0; a.len()];
    let f0 = VectorField::linear_attractor(alpha, &zero)?;
    let f1 = VectorField::linear_attractor(alpha, a)?;
    SwitchedModel::from_fields(vec![f0, f1], Rates::Constant(SwitchGenerator::two_state(lambda0, lambda1)?))
}

/// Constant rates with `F^i(x) = -alpha(i) (x - c_i)`; modes with
/// `alpha(i) < 0` are expanding.
pub fn switched_linear_model(generator: SwitchGenerator, alpha: &[f64], centers: &[Vec<f64>]) -> Result<SwitchedModel> {
    if alpha.len() != generator.n_modes() || centers.len() != generator.n_modes() {
        return Err(Error::input("one alpha and one center per mode"));
    }
    let fields = alpha
        .iter()
        .zip(centers)
        .map(|(a, c)| VectorField::linear_attractor(*a, c))
        .collect::<Result<Vec<_>>>()?;
    SwitchedModel::from_fields(fields, Rates::Constant(generator))
}

/// Two modes with `F^i(x) = -alpha (x - c_i)` and rates
/// `a(x, 0, 1) = 1 + amp sin x_1`, `a(x, 1, 0) = 1 + amp cos x_1`.
///
/// Declared constants: lower bound `1 - amp`, Lipschitz constant `amp`,
/// upper bound `1 + amp`, all valid on the whole space.
pub fn sinusoidal_model(alpha: f64, center0: &[f64], center1: &[f64], amplitude: f64) -> Result<SwitchedModel> {
    if !(0.0..1.0).contains(&amplitude) {
        return Err(Error::input(format!("amplitude must lie in [0, 1), got {amplitude}")));
    }
    if !(alpha > 0.0) || center0.len() != center1.len() || center0.is_empty() {
        return Err(Error::input("need alpha > 0 and two centers of one dimension"));
    }
    let f0 = VectorField::linear_attractor(alpha, center0)?;
    let f1 = VectorField::linear_attractor(alpha, center1)?;
    let rates = FnRates::new(2, move |x, i, _| {
        if i == 0 {
            1.0 + amplitude * x[0].sin()
        } else {
            1.0 + amplitude * x[0].cos()
        }
    });
    let rates = StateRates::new(rates, 1.0 - amplitude, amplitude, 1.0 + amplitude)?;
    SwitchedModel::from_fields(vec![f0, f1], Rates::StateDependent(rates))
}

/// The toy process with the sinusoidal rates in place of the constant ones.
pub fn toy_state_dependent_model(alpha: f64, a: &[f64], amplitude: f64) -> Result<SwitchedModel> {
    sinusoidal_model(alpha, &vec![0.0; a.len()], a, amplitude)
}

/// Parameters of the stochastic Morris–Lecar neuron.
///
/// The defaults are the classic type-I values with every potential shifted
/// by +100 mV so that the invariant segment starts at 0. They are
/// illustrative, not fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct MorrisLecarParams {
    /// Membrane capacitance `C`.
    pub capacitance: f64,
    /// Input current `I`.
    pub input_current: f64,
    /// Conductances `(g1, g2, g3)`: calcium, potassium, leak.
    pub conductance: [f64; 3],
    /// Reversal potentials `(V1, V2, V3)`.
    pub reversal: [f64; 3],
    /// Rate scales `(c1, c2)`.
    pub rate_scale: [f64; 2],
    /// Half-activation potentials `(V'1, V'2)`.
    pub half_activation: [f64; 2],
    /// Slope potentials `(V''1, V''2)`.
    pub slope: [f64; 2],
    /// Channels per type `K`.
    pub channels: usize,
}

impl Default for MorrisLecarParams {
    fn default() -> Self {
        Self {
            capacitance: 20.0,
            input_current: 90.0,
            conductance: [4.4, 8.0, 2.0],
            reversal: [220.0, 16.0, 40.0],
            rate_scale: [0.5, 0.02],
            half_activation: [98.8, 102.0],
            slope: [18.0, 30.0],
            channels: 10,
        }
    }
}

/// Default cap on `K`; `(K + 1)^2` modes.
pub const MAX_CHANNELS: usize = 32;

impl MorrisLecarParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.capacitance, self.input_current]
            .into_iter()
            .chain(self.conductance)
            .chain(self.reversal)
            .chain(self.rate_scale)
            .chain(self.half_activation)
            .chain(self.slope);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::input("Morris–Lecar parameters must be finite"));
        }
        if !(self.capacitance > 0.0) || !(self.conductance[2] > 0.0) || self.channels == 0 {
            return Err(Error::input("need C > 0, g3 > 0 and K >= 1"));
        }
        if self.conductance.iter().any(|g| *g < 0.0) || self.rate_scale.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::input("conductances must be >= 0 and rate scales > 0"));
        }
        if self.slope.contains(&0.0) {
            return Err(Error::input("slope potentials must be non-zero"));
        }
        Ok(())
    }

    /// Uniform contraction `g3 / C` (leak channel always open).
    pub fn alpha(&self) -> f64 {
        self.conductance[2] / self.capacitance
    }

    /// The invariant segment `[0, max(V1, V2, V3 + (I + 1) / g3)]`.
    pub fn segment(&self) -> (f64, f64) {
        let [v1, v2, v3] = self.reversal;
        let top = v1.max(v2).max(v3 + (self.input_current + 1.0) / self.conductance[2]);
        (0.0, top)
    }

    /// Number of modes `(K + 1)^2`.
    pub fn n_modes(&self) -> usize {
        (self.channels + 1) * (self.channels + 1)
    }

    /// Flattened index of `(u1, u2) = (k1 / K, k2 / K)`, `u1`-major.
    pub fn mode_index(&self, k1: usize, k2: usize) -> usize {
        k1 * (self.channels + 1) + k2
    }

    /// `(k1, k2)` of a flattened mode.
    pub fn mode_counts(&self, mode: usize) -> (usize, usize) {
        (mode / (self.channels + 1), mode % (self.channels + 1))
    }

    /// Affine field `dV/dt = (I - sum_i g_i u_i (V - V_i)) / C` with `u3 = 1`.
    pub fn field(&self, mode: usize) -> Result<VectorField> {
        let (k1, k2) = self.mode_counts(mode);
        let k = self.channels as f64;
        let u = [k1 as f64 / k, k2 as f64 / k, 1.0];
        let mut slope = 0.0;
        let mut offset = self.input_current;
        for i in 0..3 {
            slope -= self.conductance[i] * u[i];
            offset += self.conductance[i] * u[i] * self.reversal[i];
        }
        VectorField::affine(
            DMatrix::from_element(1, 1, slope / self.capacitance),
            DVector::from_element(1, offset / self.capacitance),
        )
    }
}

/// Opening and closing rates `(alpha_1, beta_1, alpha_2, beta_2)` at `v`:
/// `alpha_i = c_i cosh((v - V'_i) / 2V''_i)(1 + tanh((v - V'_i) / V''_i))`,
/// `beta_i` with `1 - tanh`.
pub fn ml_rates(v: f64, params: &MorrisLecarParams) -> (f64, f64, f64, f64) {
    let one = |i: usize| {
        let z = (v - params.half_activation[i]) / params.slope[i];
        let c = params.rate_scale[i] * (0.5 * z).cosh();
        // 1 +- tanh z = 2 / (1 + e^{-+2z}) without cancellation.
        (2.0 * c / (1.0 + (-2.0 * z).exp()), 2.0 * c / (1.0 + (2.0 * z).exp()))
    };
    let (a1, b1) = one(0);
    let (a2, b2) = one(1);
    (a1, b1, a2, b2)
}

/// Birth–death rates of the two channel counts: `k -> k + 1` at
/// `K (1 - u) alpha(V)`, `k -> k - 1` at `K u beta(V)`.
#[derive(Debug, Clone)]
pub struct MorrisLecarRates {
    params: MorrisLecarParams,
}

impl JumpRates for MorrisLecarRates {
    fn n_modes(&self) -> usize {
        self.params.n_modes()
    }

    fn outgoing(&self, x: &[f64], mode: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let k = self.params.channels;
        let (k1, k2) = self.params.mode_counts(mode);
        let (a1, b1, a2, b2) = ml_rates(x[0], &self.params);
        if k1 < k {
            out.push((self.params.mode_index(k1 + 1, k2), (k - k1) as f64 * a1));
        }
        if k1 > 0 {
            out.push((self.params.mode_index(k1 - 1, k2), k1 as f64 * b1));
        }
        if k2 < k {
            out.push((self.params.mode_index(k1, k2 + 1), (k - k2) as f64 * a2));
        }
        if k2 > 0 {
            out.push((self.params.mode_index(k1, k2 - 1), k2 as f64 * b2));
        }
    }
}

/// Rate constants of the Morris–Lecar model measured on the segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MorrisLecarConstants {
    pub lower: f64,
    pub lipschitz: f64,
    pub upper: f64,
}

/// Grid audit of the rate constants over the segment times every mode.
///
/// Only transitions that exist (positive support) enter the lower bound.
/// Between grid points the rates move by at most `lipschitz * h / 2`, which
/// is added to the upper bound. The rates get tiny near the ends of the
/// segment, so the lower bound uses the slope of `ln rate` instead: a cell
/// loses at most a factor `exp(-L h / 2)`.
pub fn ml_rate_constants(params: &MorrisLecarParams, grid_points: usize) -> Result<MorrisLecarConstants> {
    params.validate()?;
    let (lo, hi) = params.segment();
    let n = grid_points.max(3);
    let h = (hi - lo) / (n - 1) as f64;
    let vals: Vec<(f64, f64, f64, f64)> = (0..n).map(|k| ml_rates(lo + h * k as f64, params)).collect();
    let k = params.channels as f64;
    let mut min_rate = f64::INFINITY;
    let mut max_total: f64 = 0.0;
    let (mut s1, mut s2): (f64, f64) = (0.0, 0.0);
    let mut log_slope: f64 = 0.0;
    for (idx, &(a1, b1, a2, b2)) in vals.iter().enumerate() {
        min_rate = min_rate.min(a1.min(b1).min(a2).min(b2));
        max_total = max_total.max(k * (a1.max(b1) + a2.max(b2)));
        if idx > 0 {
            let (p1, q1, p2, q2) = vals[idx - 1];
            s1 = s1.max((a1 - p1).abs().max((b1 - q1).abs()) / h);
            s2 = s2.max((a2 - p2).abs().max((b2 - q2).abs()) / h);
            for (u, w) in [(a1, p1), (b1, q1), (a2, p2), (b2, q2)] {
                log_slope = log_slope.max((u.ln() - w.ln()).abs() / h);
            }
        }
    }
    // Secant slopes under-read the derivative; 5% covers the curvature at
    // the default grid density.
    let lipschitz = 1.05 * k * (s1 + s2);
    let lower = min_rate * (-1.05 * log_slope * h / 2.0).exp();
    if !(lower > 0.0) {
        return Err(Error::assumption(format!(
            "Morris–Lecar rates are not bounded away from 0 on the segment (grid minimum {min_rate})"
        )));
    }
    Ok(MorrisLecarConstants { lower, lipschitz, upper: max_total + lipschitz * h / 2.0 })
}

/// The stochastic Morris–Lecar model with `K <= MAX_CHANNELS`.
pub fn morris_lecar_model(params: &MorrisLecarParams) -> Result<SwitchedModel> {
    morris_lecar_model_with_cap(params, MAX_CHANNELS)
}

/// [`morris_lecar_model`] with an explicit cap on `K`.
pub fn morris_lecar_model_with_cap(params: &MorrisLecarParams, cap: usize) -> Result<SwitchedModel> {
    params.validate()?;
    if params.channels > cap {
        return Err(Error::TooLarge(format!(
            "K = {} exceeds the cap of {cap} ({} modes)",
            params.channels,
            params.n_modes()
        )));
    }
    let constants = ml_rate_constants(params, 20_001)?;
    let fields = (0..params.n_modes()).map(|m| params.field(m)).collect::<Result<Vec<_>>>()?;
    let rates = StateRates::new(
        MorrisLecarRates { params: params.clone() },
        constants.lower,
        constants.lipschitz,
        constants.upper,
    )?;
    let (lo, hi) = params.segment();
    let alpha = vec![params.alpha(); params.n_modes()];
    Ok(SwitchedModel::new(fields, Rates::StateDependent(rates), alpha)?.with_region(Region::Box { lo: vec![lo], hi: vec![hi] }))
}

/// Tanh-sinh quadrature of `f(da, db)` over `[0, len]`, where `da` and `db`
/// are the distances to the two ends; passing distances instead of points
/// keeps integrable end singularities resolved.
fn tanh_sinh(len: f64, f: &impl Fn(f64, f64) -> f64) -> f64 {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let node = |t: f64| {
        let v = half_pi * t.sinh();
        // da = len / (1 + e^{-2v}), db = len / (1 + e^{2v})
        let da = len / (1.0 + (-2.0 * v).exp());
        let db = len / (1.0 + (2.0 * v).exp());
        let w = len * half_pi * t.cosh() / (2.0 * v.cosh().powi(2));
        (da, db, w)
    };
    let eval = |t: f64| {
        let (da, db, w) = node(t);
        if w == 0.0 || da == 0.0 || db == 0.0 {
            0.0
        } else {
            let y = f(da, db) * w;
            if y.is_finite() { y } else { 0.0 }
        }
    };
    let t_max = 6.5;
    let mut h = 0.5;
    let mut sum = eval(0.0);
    let mut k = 1;
    while k as f64 * h <= t_max {
        sum += eval(k as f64 * h) + eval(-(k as f64) * h);
        k += 1;
    }
    let mut estimate = sum * h;
    for _ in 0..10 {
        // Halving: only the new odd nodes are evaluated.
        h *= 0.5;
        let mut k = 1;
        while k as f64 * h <= t_max {
            sum += eval(k as f64 * h) + eval(-(k as f64) * h);
            k += 2;
        }
        let next = sum * h;
        let done = (next - estimate).abs() <= 1e-14 * next.abs();
        estimate = next;
        if done {
            break;
        }
    }
    estimate
}

/// Stationary law of the `X`-marginal for two affine contracting fields on
/// the line with constant rates, supported between the two fixed points.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub lo: f64,
    pub hi: f64,
    /// Nodes clustered at both ends.
    pub nodes: Vec<f64>,
    pub density: Vec<f64>,
    pub cdf: Vec<f64>,
    /// Exponents of the distances to `lo` and `hi` in the unnormalized
    /// density, and the field slopes there.
    shape: [f64; 4],
    norm: f64,
}

impl DensityTable {
    fn raw(shape: &[f64; 4], len: f64, da: f64, db: f64) -> f64 {
        let [ea, eb, ma, mb] = shape;
        let (ua, ub) = (da / len, db / len);
        // |x - c_a|^{e_a} |x - c_b|^{e_b} (1 / (|m_a| da) + 1 / (|m_b| db)).
        (ea * ua.ln() + eb * ub.ln()).exp() * (1.0 / (ma * ua) + 1.0 / (mb * ub))
    }

    /// Density at `x`; zero outside the open segment.
    pub fn density_at(&self, x: f64) -> f64 {
        if x <= self.lo || x >= self.hi {
            return 0.0;
        }
        let len = self.hi - self.lo;
        Self::raw(&self.shape, len, x - self.lo, self.hi - x) / self.norm
    }

    /// CDF by linear interpolation of the table.
    pub fn cdf_at(&self, x: f64) -> f64 {
        if x <= self.lo {
            return 0.0;
        }
        if x >= self.hi {
            return 1.0;
        }
        let k = self.nodes.partition_point(|v| *v <= x).clamp(1, self.nodes.len() - 1);
        let (x0, x1) = (self.nodes[k - 1], self.nodes[k]);
        let w = (x - x0) / (x1 - x0);
        self.cdf[k - 1] * (1.0 - w) + self.cdf[k] * w
    }

    /// Inverse CDF by linear interpolation of the table.
    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let k = self.cdf.partition_point(|c| *c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.nodes[k - 1] * (1.0 - w) + self.nodes[k] * w
    }

    /// `n` midpoint quantiles `F^{-1}((k + 1/2) / n)`.
    pub fn quantile_samples(&self, n: usize) -> Vec<f64> {
        (0..n).map(|k| self.quantile((k as f64 + 0.5) / n as f64)).collect()
    }
}

/// Solves the stationary transport balance of a two-mode affine model on the
/// line.
///
/// With `F_i(x) = m_i (x - c_i)`, `m_i < 0`, and exit rates `l_i`, zero net
/// flux forces `F_0 p_0 + F_1 p_1 = 0`, and `q = F_0 p_0` solves
/// `q' = -q (l_0 / F_0 + l_1 / F_1)`. The marginal is
/// `|q (1 / F_0 - 1 / F_1)|`, i.e. up to normalization
/// `|x - c_0|^{l_0/|m_0|} |x - c_1|^{l_1/|m_1|} (1/(|m_0||x - c_0|) + 1/(|m_1||x - c_1|))`.
pub fn stationary_density_1d(model: &SwitchedModel, nodes: usize) -> Result<DensityTable> {
    let g = model
        .generator()
        .ok_or_else(|| Error::Unsupported("stationary density needs constant rates".into()))?;
    if model.dim() != 1 || model.n_modes() != 2 {
        return Err(Error::Unsupported("stationary density needs d = 1 and two modes".into()));
    }
    let mut slopes = [0.0; 2];
    let mut centers = [0.0; 2];
    for i in 0..2 {
        let (m, v) = model
            .field(i)
            .affine_data()
            .ok_or_else(|| Error::Unsupported("stationary density needs affine fields".into()))?;
        let m = m[(0, 0)];
        if !(m < 0.0) {
            return Err(Error::Unsupported(format!("field {i} is not contracting (slope {m})")));
        }
        slopes[i] = m;
        centers[i] = -v[0] / m;
    }
    if centers[0] == centers[1] {
        return Err(Error::Unsupported("fixed points coincide; the stationary law is a point mass".into()));
    }
    let rates = [g.exit_rate(0), g.exit_rate(1)];
    let e = [rates[0] / -slopes[0], rates[1] / -slopes[1]];
    // Orient so that "a" is the lower end.
    let (a, b) = if centers[0] < centers[1] { (0, 1) } else { (1, 0) };
    let shape = [e[a], e[b], -slopes[a], -slopes[b]];
    let (lo, hi) = (centers[a], centers[b]);
    let len = hi - lo;
    let raw = |da: f64, db: f64| DensityTable::raw(&shape, len, da, db);
    let norm = tanh_sinh(len, &raw);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Numeric(format!("stationary density normalization failed ({norm})")));
    }
    let n = nodes.max(2);
    let grid: Vec<f64> = (0..=n)
        .map(|k| lo + len * 0.5 * (1.0 - (std::f64::consts::PI * k as f64 / n as f64).cos()))
        .collect();
    let mut cdf = vec![0.0; n + 1];
    for k in 1..=n {
        let (u, v) = (grid[k - 1] - lo, grid[k] - lo);
        let piece = tanh_sinh(v - u, &|da, db| raw(u + da, (len - v) + db));
        cdf[k] = cdf[k - 1] + piece / norm;
    }
    cdf[n] = 1.0;
    let mut table = DensityTable { lo, hi, nodes: grid, density: Vec::new(), cdf, shape, norm };
    table.density = table.nodes.iter().map(|x| table.density_at(*x)).collect();
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{audit_dissipativity_with, invariant_radius, FlowIntegrator};
    use crate::model::HybridState;
    use crate::rng::rng_from_seed;
    use crate::simulator::simulate;

    #[test]
    fn toy_defaults() {
        let m = toy_model(1.0, 1.0, 1.0, &[1.0, 0.0]).unwrap();
        assert_eq!(m.n_modes(), 2);
        assert_eq!(m.generator().unwrap().exit_rates(), vec![1.0, 1.0]);
        assert_eq!(m.field(1).eval(&[0.0, 0.0]), vec![1.0, 0.0]);
        assert_eq!(m.field(0).eval(&[0.5, 0.2]), vec![-0.5, -0.2]);
        // Fixed point of mode 1 is a.
        let y = m.field(1).flow(&[0.0, 0.0], 60.0, &FlowIntegrator::default()).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-15 && y[1].abs() < 1e-15);
        for alpha in [0.5, 2.0] {
            let m = toy_model(1.0, 1.0, alpha, &[3.0, 4.0]).unwrap();
            assert!((m.invariant_radius().unwrap() - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ml_rate_identities() {
        let p = MorrisLecarParams::default();
        for i in 0..2 {
            let (a1, b1, a2, b2) = ml_rates(p.half_activation[i], &p);
            let (a, b) = if i == 0 { (a1, b1) } else { (a2, b2) };
            assert!((a - p.rate_scale[i]).abs() < 1e-15 && (b - p.rate_scale[i]).abs() < 1e-15);
        }
        for v in [0.0, 37.5, 98.8, 150.0, 220.0] {
            let (a1, b1, a2, b2) = ml_rates(v, &p);
            let z1 = (v - p.half_activation[0]) / p.slope[0];
            let z2 = (v - p.half_activation[1]) / p.slope[1];
            // 1 - tanh^2 = 1 / cosh^2
            let prod1 = (p.rate_scale[0] * (0.5 * z1).cosh() / z1.cosh()).powi(2);
            let prod2 = (p.rate_scale[1] * (0.5 * z2).cosh() / z2.cosh()).powi(2);
            assert!((a1 * b1 - prod1).abs() < 1e-12 * prod1);
            assert!((a2 * b2 - prod2).abs() < 1e-12 * prod2);
            assert!((a1 + b1 - 2.0 * p.rate_scale[0] * (0.5 * z1).cosh()).abs() < 1e-12 * a1.max(1.0));
        }
    }

    #[test]
    fn ml_mode_layout() {
        let p = MorrisLecarParams { channels: 4, ..Default::default() };
        let m = morris_lecar_model(&p).unwrap();
        assert_eq!(m.n_modes(), 25);
        let r = m.state_rates().unwrap();
        let mut out = Vec::new();
        for mode in 0..25 {
            let (k1, k2) = p.mode_counts(mode);
            assert_eq!(p.mode_index(k1, k2), mode);
            r.rates.outgoing(&[100.0], mode, &mut out);
            for (j, rate) in &out {
                let (l1, l2) = p.mode_counts(*j);
                let moved = (l1 as i64 - k1 as i64).abs() + (l2 as i64 - k2 as i64).abs();
                assert_eq!(moved, 1);
                assert!(*rate > 0.0);
            }
        }
        assert!(matches!(
            morris_lecar_model(&MorrisLecarParams { channels: 40, ..Default::default() }),
            Err(Error::TooLarge(_))
        ));
        assert!(morris_lecar_model_with_cap(&MorrisLecarParams { channels: 40, ..Default::default() }, 64).is_ok());
    }

    #[test]
    fn ml_audits_pass_on_the_segment() {
        let p = MorrisLecarParams::default();
        let m = morris_lecar_model(&p).unwrap();
        let mut rng = rng_from_seed(1);
        let audit = m.audit_rates(10_000, &mut rng).unwrap();
        assert!(audit.pass(), "{audit:?}");
        let (lo, hi) = p.segment();
        for (mode, f) in m.fields().iter().enumerate() {
            let a = audit_dissipativity_with(f, p.alpha(), 500, |r| vec![lo + (hi - lo) * crate::rng::open_uniform(r)], &mut rng).unwrap();
            assert!(a.pass, "mode {mode}: {a:?}");
        }
        // Mode (0, 0) only has the leak: the constant is sharp there.
        let strict = audit_dissipativity_with(m.field(0), p.alpha() * 1.001, 500, |r| vec![lo + (hi - lo) * crate::rng::open_uniform(r)], &mut rng).unwrap();
        assert!(!strict.pass);
    }

    #[test]
    fn ml_fields_point_inward() {
        let p = MorrisLecarParams::default();
        let (lo, hi) = p.segment();
        for mode in 0..p.n_modes() {
            let f = p.field(mode).unwrap();
            assert!(f.eval(&[lo])[0] > 0.0);
            assert!(f.eval(&[hi])[0] < 0.0);
        }
    }

    #[test]
    fn ml_short_run_stays_in_segment() {
        let p = MorrisLecarParams::default();
        let m = morris_lecar_model(&p).unwrap();
        let (lo, hi) = p.segment();
        let mut rng = rng_from_seed(2);
        let tr = simulate(&m, &HybridState::new(vec![60.0], p.mode_index(5, 5)), 20.0, 0.5, &mut rng).unwrap();
        assert!(tr.jump_count() > 0);
        assert!(tr.events.iter().all(|e| e.x[0] >= lo && e.x[0] <= hi));
    }

    #[test]
    fn flat_oracle() {
        let m = toy_model(1.0, 1.0, 1.0, &[1.0]).unwrap();
        let d = stationary_density_1d(&m, 2000).unwrap();
        assert_eq!((d.lo, d.hi), (0.0, 1.0));
        for (x, v) in d.nodes.iter().zip(&d.density) {
            if *x > 0.0 && *x < 1.0 {
                assert!((v - 1.0).abs() < 1e-6, "density {v} at {x}");
            }
        }
        for x in [0.1, 0.37, 0.9] {
            assert!((d.cdf_at(x) - x).abs() < 1e-6);
        }
        assert_eq!(d.density_at(-0.1), 0.0);
        assert_eq!(d.density_at(1.5), 0.0);
    }

    #[test]
    fn beta_oracle_and_mass() {
        // lambda0 = 2, lambda1 = 0.5, alpha = 1: Beta(2, 1/2), CDF 1 - (1 - x)^{1/2}(1 + x/2).
        let m = toy_model(2.0, 0.5, 1.0, &[1.0]).unwrap();
        let d = stationary_density_1d(&m, 4000).unwrap();
        for x in [0.05, 0.3, 0.6, 0.95, 0.999] {
            let exact = 1.0 - (1.0f64 - x).sqrt() * (1.0 + x / 2.0);
            assert!((d.cdf_at(x) - exact).abs() < 1e-6, "x {x}: {} vs {exact}", d.cdf_at(x));
        }
        let doubled = toy_model(2.0, 2.0, 1.0, &[1.0]).unwrap();
        let d2 = stationary_density_1d(&doubled, 2000).unwrap();
        assert!((d2.cdf[d2.cdf.len() - 1] - 1.0).abs() < 1e-12);
        let mid = d2.density_at(0.5);
        assert!((mid - 1.5).abs() < 1e-6, "Beta(2, 2) at 1/2 is 3/2, got {mid}");
    }

    #[test]
    fn oracle_rejects_unsupported_models() {
        let g = SwitchGenerator::two_state(1.0, 1.0).unwrap();
        let expanding = switched_linear_model(g, &[1.0, -0.5], &[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(stationary_density_1d(&expanding, 100), Err(Error::Unsupported(_))));
        let planar = toy_model(1.0, 1.0, 1.0, &[1.0, 0.0]).unwrap();
        assert!(matches!(stationary_density_1d(&planar, 100), Err(Error::Unsupported(_))));
    }

    #[test]
    fn sinusoidal_constants() {
        let m = sinusoidal_model(1.0, &[-1.0], &[1.0], 0.4).unwrap();
        let s = m.state_rates().unwrap();
        assert_eq!((s.lower, s.lipschitz, s.upper), (0.6, 0.4, 1.4));
        assert!((invariant_radius(m.fields(), 1.0).unwrap() - 1.0).abs() < 1e-15);
        let toy = toy_state_dependent_model(1.0, &[1.0, 0.0], 0.4).unwrap();
        assert!((toy.invariant_radius().unwrap() - 1.0).abs() < 1e-15);
    }
}
