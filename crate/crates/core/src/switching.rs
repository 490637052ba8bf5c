//! Finite-state continuous-time generators: invariant law, the moment
//! exponent `theta_p`, the moment threshold `kappa`, the coalescence rate of
//! two independent copies and path sampling.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{categorical, unit_exponential};
use crate::stats::{self, MeanEstimate};

/// Generator `A` of a finite Markov chain: `A(i, j) = a(i, j) >= 0` for
/// `i != j` and zero row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchGenerator {
    matrix: DMatrix<f64>,
}

impl SwitchGenerator {
    /// Validates a full generator matrix.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if n == 0 || !matrix.is_square() {
            return Err(Error::input("generator must be a non-empty square matrix"));
        }
        for i in 0..n {
            let mut row_sum = 0.0;
            let mut scale: f64 = 1.0;
            for j in 0..n {
                let v = matrix[(i, j)];
                if !v.is_finite() {
                    return Err(Error::input(format!("generator entry ({i}, {j}) is not finite")));
                }
                if i != j && v < 0.0 {
                    return Err(Error::input(format!("negative off-diagonal rate at ({i}, {j}): {v}")));
                }
                row_sum += v;
                scale = scale.max(v.abs());
            }
            if row_sum.abs() > 1e-12 * scale {
                return Err(Error::input(format!("generator row {i} sums to {row_sum}, expected 0")));
            }
        }
        Ok(Self { matrix })
    }

    /// Generator from off-diagonal rates `a(i, j)`; the diagonal is ignored
    /// and recomputed so rows sum to zero.
    pub fn from_rates(rates: &[Vec<f64>]) -> Result<Self> {
        let n = rates.len();
        if n == 0 || rates.iter().any(|r| r.len() != n) {
            return Err(Error::input("rate matrix must be square and non-empty"));
        }
        let mut m = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let mut out = 0.0;
            for j in 0..n {
                if i != j {
                    m[(i, j)] = rates[i][j];
                    out += rates[i][j];
                }
            }
            m[(i, i)] = -out;
        }
        Self::from_matrix(m)
    }

    /// Generator `A(i, j) = lambda(i) P(i, j)` for `i != j`. Self-jumps in
    /// `P` are invisible and only lower the effective exit rate.
    pub fn from_lambda_jump(lambda: &[f64], jump: &[Vec<f64>]) -> Result<Self> {
        let n = lambda.len();
        if jump.len() != n || jump.iter().any(|r| r.len() != n) {
            return Err(Error::input("jump matrix must be n x n for n exit rates"));
        }
        for (i, row) in jump.iter().enumerate() {
            if lambda[i] < 0.0 || !lambda[i].is_finite() {
                return Err(Error::input(format!("exit rate {i} must be finite and >= 0")));
            }
            if row.iter().any(|p| *p < 0.0) {
                return Err(Error::input(format!("jump matrix row {i} has a negative entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::input(format!("jump matrix row {i} sums to {s}, expected 1")));
            }
        }
        let rates: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| lambda[i] * jump[i][j]).collect())
            .collect();
        Self::from_rates(&rates)
    }

    /// Two states with exit rates `l0` and `l1`.
    pub fn two_state(l0: f64, l1: f64) -> Result<Self> {
        Self::from_rates(&[vec![0.0, l0], vec![l1, 0.0]])
    }

    /// `rate * (uniform jump to the other n - 1 states - I)`.
    pub fn uniform(n: usize, rate: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::input("uniform generator needs two or more states"));
        }
        let off = rate / (n - 1) as f64;
        let rates: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { off }).collect())
            .collect();
        Self::from_rates(&rates)
    }

    pub fn n_modes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `a(i, j)` for `i != j`.
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            self.matrix[(i, j)]
        }
    }

    /// Total exit rate `lambda(i) = -A(i, i)`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.matrix[(i, i)]
    }

    pub fn exit_rates(&self) -> Vec<f64> {
        (0..self.n_modes()).map(|i| self.exit_rate(i)).collect()
    }

    /// Row `i` of the jump matrix `P`; all zeros when `lambda(i) = 0`.
    pub fn jump_row(&self, i: usize) -> Vec<f64> {
        let l = self.exit_rate(i);
        (0..self.n_modes())
            .map(|j| if l > 0.0 { self.rate(i, j) / l } else { 0.0 })
            .collect()
    }

    /// Off-diagonal rates as a dense row list, diagonal set to zero.
    pub fn rate_rows(&self) -> Vec<Vec<f64>> {
        let n = self.n_modes();
        (0..n).map(|i| (0..n).map(|j| self.rate(i, j)).collect()).collect()
    }

    fn reachable(&self, start: usize, transpose: bool) -> Vec<bool> {
        let n = self.n_modes();
        let mut seen = vec![false; n];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let r = if transpose { self.rate(j, i) } else { self.rate(i, j) };
                if r > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen
    }

    /// Strong connectivity of the support graph of `A`.
    pub fn is_irreducible(&self) -> bool {
        self.reachable(0, false).iter().all(|b| *b) && self.reachable(0, true).iter().all(|b| *b)
    }

    pub fn require_irreducible(&self) -> Result<()> {
        if self.is_irreducible() {
            Ok(())
        } else {
            let missing: Vec<usize> = self
                .reachable(0, false)
                .iter()
                .zip(self.reachable(0, true))
                .enumerate()
                .filter(|(_, (a, b))| !(**a && *b))
                .map(|(k, _)| k)
                .collect();
            Err(Error::Reducible(format!(
                "states {missing:?} are not mutually reachable with state 0"
            )))
        }
    }

    /// `A - p diag(alpha)`.
    pub fn tilted(&self, alpha: &[f64], p: f64) -> Result<DMatrix<f64>> {
        self.check_alpha(alpha)?;
        let mut m = self.matrix.clone();
        for (i, a) in alpha.iter().enumerate() {
            m[(i, i)] -= p * a;
        }
        Ok(m)
    }

    fn check_alpha(&self, alpha: &[f64]) -> Result<()> {
        if alpha.len() != self.n_modes() {
            return Err(Error::input(format!(
                "alpha has {} entries for {} modes",
                alpha.len(),
                self.n_modes()
            )));
        }
        Ok(())
    }
}

/// Invariant probability `nu` with `nu A = 0`, from the bordered system in
/// which one balance equation is replaced by `sum(nu) = 1`.
pub fn invariant_measure(generator: &SwitchGenerator) -> Result<Vec<f64>> {
    generator.require_irreducible()?;
    let n = generator.n_modes();
    let mut sys = generator.matrix().transpose();
    for j in 0..n {
        sys[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let nu = linalg::solve(&sys, &rhs)?;
    // Irreducibility makes nu > 0; only roundoff can push entries below.
    let clipped: Vec<f64> = nu.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    Ok(clipped.into_iter().map(|v| v / total).collect())
}

/// `sum_i alpha(i) nu(i)`.
pub fn averaged_dissipativity(generator: &SwitchGenerator, alpha: &[f64]) -> Result<f64> {
    generator.check_alpha(alpha)?;
    let nu = invariant_measure(generator)?;
    Ok(nu.iter().zip(alpha).map(|(n, a)| n * a).sum())
}

/// `theta_p = -max Re spec(A - p diag(alpha))`.
pub fn theta_p(generator: &SwitchGenerator, alpha: &[f64], p: f64) -> Result<f64> {
    if !(p > 0.0) {
        return Err(Error::input(format!("theta_p needs p > 0, got {p}")));
    }
    let m = generator.tilted(alpha, p)?;
    Ok(-linalg::spectral_abscissa(&m)?)
}

/// Absolute bisection tolerance of [`kappa_moment`].
pub const KAPPA_TOLERANCE: f64 = 1e-8;

/// Moment threshold `kappa`: `theta_p > 0` exactly for `p < kappa`.
///
/// `+inf` when every `alpha(i) >= 0`; otherwise the sign change of
/// `theta_p` on `(0, min{A_ii / alpha(i) : alpha(i) < 0})` located by
/// bisection.
pub fn kappa_moment(generator: &SwitchGenerator, alpha: &[f64]) -> Result<f64> {
    let avg = averaged_dissipativity(generator, alpha)?;
    if !(avg > 0.0) {
        return Err(Error::assumption(format!(
            "averaged dissipativity sum alpha(i) nu(i) = {avg} is not positive"
        )));
    }
    if alpha.iter().all(|a| *a >= 0.0) {
        return Ok(f64::INFINITY);
    }
    let hi_bound = alpha
        .iter()
        .enumerate()
        .filter(|(_, a)| **a < 0.0)
        .map(|(i, a)| generator.matrix()[(i, i)] / a)
        .fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (0.0, hi_bound);
    if theta_p(generator, alpha, hi)? > 0.0 {
        return Err(Error::Numeric(format!(
            "theta_p is still positive at the bracket end p = {hi}"
        )));
    }
    while hi - lo > KAPPA_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if theta_p(generator, alpha, mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Right-continuous path of the discrete chain on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtmcPath {
    /// `times[0] = 0`; `times[k]` is the k-th jump time.
    pub times: Vec<f64>,
    pub modes: Vec<usize>,
    pub horizon: f64,
}

impl CtmcPath {
    pub fn mode_at(&self, t: f64) -> usize {
        let k = self.times.partition_point(|s| *s <= t);
        self.modes[k.saturating_sub(1)]
    }

    pub fn jump_count(&self) -> usize {
        self.times.len() - 1
    }
}

/// Holding time in a state of exit rate `lambda`: `Exp(lambda)`, `+inf` when
/// `lambda = 0` (no randomness consumed).
pub fn holding_time<R: RngCore + ?Sized>(lambda: f64, rng: &mut R) -> f64 {
    if lambda > 0.0 {
        unit_exponential(rng) / lambda
    } else {
        f64::INFINITY
    }
}

/// Draws the successor of `i` with probabilities `P(i, .)`.
pub fn next_mode<R: RngCore + ?Sized>(generator: &SwitchGenerator, i: usize, rng: &mut R) -> usize {
    let n = generator.n_modes();
    categorical(rng, (0..n).map(|j| generator.rate(i, j))).unwrap_or(i)
}

/// Exponential holding times and `P`-distributed jumps up to `horizon`.
pub fn sample_ctmc_path<R: RngCore + ?Sized>(
    generator: &SwitchGenerator,
    i0: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<CtmcPath> {
    if i0 >= generator.n_modes() {
        return Err(Error::input(format!("initial mode {i0} out of range")));
    }
    if !(horizon >= 0.0) {
        return Err(Error::input("horizon must be >= 0"));
    }
    let mut times = vec![0.0];
    let mut modes = vec![i0];
    if horizon == 0.0 {
        return Ok(CtmcPath { times, modes, horizon });
    }
    let mut t = 0.0;
    let mut i = i0;
    loop {
        let hold = holding_time(generator.exit_rate(i), rng);
        if t + hold > horizon {
            break;
        }
        t += hold;
        i = next_mode(generator, i, rng);
        times.push(t);
        modes.push(i);
    }
    Ok(CtmcPath { times, modes, horizon })
}

/// `(exp(t A_p) 1)(i)` for every starting state `i`: the Feynman–Kac
/// representation of `E_i exp(-p int_0^t alpha(I_u) du)`.
pub fn e_pt_vector(generator: &SwitchGenerator, alpha: &[f64], p: f64, t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(Error::input("e(p, t) needs t >= 0"));
    }
    let m = generator.tilted(alpha, p)? * t;
    let e = linalg::expm(&m)?;
    Ok(e.row_iter().map(|r| r.sum()).collect())
}

/// `e(p, t) = max_i E_i exp(-p int_0^t alpha(I_u) du)`.
pub fn e_pt(generator: &SwitchGenerator, alpha: &[f64], p: f64, t: f64) -> Result<f64> {
    Ok(e_pt_vector(generator, alpha, p, t)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Monte Carlo estimate of `E_i exp(-p int_0^t alpha(I_u) du)` at each time
/// of `t_grid` (sorted ascending) from `n_paths` chains started at `start`.
pub fn e_pt_monte_carlo<R: RngCore + ?Sized>(
    generator: &SwitchGenerator,
    alpha: &[f64],
    p: f64,
    start: usize,
    t_grid: &[f64],
    n_paths: usize,
    rng: &mut R,
) -> Result<Vec<MeanEstimate>> {
    generator.check_alpha(alpha)?;
    if t_grid.windows(2).any(|w| w[1] < w[0]) || t_grid.iter().any(|t| *t < 0.0) {
        return Err(Error::input("time grid must be non-negative and sorted"));
    }
    let mut sums = vec![0.0; t_grid.len()];
    let mut sums2 = vec![0.0; t_grid.len()];
    for _ in 0..n_paths {
        let mut t = 0.0;
        let mut i = start;
        let mut integral = 0.0;
        let mut k = 0;
        while k < t_grid.len() {
            let hold = holding_time(generator.exit_rate(i), rng);
            let next = t + hold;
            while k < t_grid.len() && t_grid[k] <= next {
                let v = (-p * (integral + alpha[i] * (t_grid[k] - t))).exp();
                sums[k] += v;
                sums2[k] += v * v;
                k += 1;
            }
            if k == t_grid.len() {
                break;
            }
            integral += alpha[i] * hold;
            t = next;
            i = next_mode(generator, i, rng);
        }
    }
    let n = n_paths as f64;
    Ok(sums
        .iter()
        .zip(&sums2)
        .map(|(s, s2)| {
            let mean = s / n;
            let var = ((s2 / n - mean * mean) * n / (n - 1.0).max(1.0)).max(0.0);
            MeanEstimate { mean, std_error: (var / n).sqrt(), n: n_paths }
        })
        .collect())
}

/// Grid plug-in for `C_2(p)`: `max(1, max_t e(p, t) e^{theta_p t})`.
///
/// A grid maximum under-estimates the true constant.
pub fn c2_estimate(generator: &SwitchGenerator, alpha: &[f64], p: f64, t_grid: &[f64]) -> Result<f64> {
    if t_grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::input("C2 grid must be finite and non-negative"));
    }
    let theta = theta_p(generator, alpha, p)?;
    let mut best: f64 = 1.0;
    for t in t_grid {
        best = best.max(e_pt(generator, alpha, p, *t)? * (theta * t).exp());
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoalescenceMethod {
    /// Spectrum of the product chain killed on the diagonal.
    Exact,
    /// Tail fit of simulated meeting times.
    MonteCarlo { samples_per_pair: usize },
}

/// Envelope `P(T > t | I_0 = i, I~_0 = j) <= constant * exp(-rho t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoalescenceReport {
    pub rho: f64,
    pub constant: f64,
    pub method: CoalescenceMethod,
}

/// Generator of two independent copies restricted to the off-diagonal pairs;
/// the missing mass is the killing rate onto the diagonal.
pub fn killed_product_generator(generator: &SwitchGenerator) -> (DMatrix<f64>, Vec<(usize, usize)>) {
    let n = generator.n_modes();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
        .collect();
    let index = |i: usize, j: usize| pairs.iter().position(|p| *p == (i, j));
    let m = pairs.len();
    let mut q = DMatrix::<f64>::zeros(m, m);
    for (row, &(i, j)) in pairs.iter().enumerate() {
        q[(row, row)] = -(generator.exit_rate(i) + generator.exit_rate(j));
        for k in 0..n {
            if let Some(col) = index(k, j) {
                q[(row, col)] += generator.rate(i, k);
            }
            if let Some(col) = index(i, k) {
                q[(row, col)] += generator.rate(j, k);
            }
        }
    }
    (q, pairs)
}

/// First meeting time of independent chains from `i` and `j`, `+inf` if
/// they have not met by `cutoff`.
pub fn meeting_time<R: RngCore + ?Sized>(
    generator: &SwitchGenerator,
    i: usize,
    j: usize,
    cutoff: f64,
    rng: &mut R,
) -> f64 {
    let (mut a, mut b) = (i, j);
    let mut t = 0.0;
    while a != b {
        let la = generator.exit_rate(a);
        let lb = generator.exit_rate(b);
        let total = la + lb;
        if total <= 0.0 {
            return f64::INFINITY;
        }
        t += holding_time(total, rng);
        if t > cutoff {
            return f64::INFINITY;
        }
        if categorical(rng, [la, lb]) == Some(0) {
            a = next_mode(generator, a, rng);
        } else {
            b = next_mode(generator, b, rng);
        }
    }
    t
}

/// Coalescence rate `rho` of two independent copies of the chain, with the
/// worst-pair constant that makes `C exp(-rho t)` an envelope.
pub fn coalescence_rate<R: RngCore + ?Sized>(
    generator: &SwitchGenerator,
    method: CoalescenceMethod,
    rng: &mut R,
) -> Result<CoalescenceReport> {
    generator.require_irreducible()?;
    if generator.n_modes() == 1 {
        return Ok(CoalescenceReport { rho: f64::INFINITY, constant: 1.0, method });
    }
    match method {
        CoalescenceMethod::Exact => coalescence_exact(generator),
        CoalescenceMethod::MonteCarlo { samples_per_pair } => {
            if samples_per_pair < 10 {
                return Err(Error::input("Monte Carlo coalescence needs >= 10 samples per pair"));
            }
            let n = generator.n_modes();
            let mut per_pair = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let mut s: Vec<f64> = (0..samples_per_pair)
                            .map(|_| meeting_time(generator, i, j, 1e6, rng))
                            .collect();
                        s.sort_by(f64::total_cmp);
                        per_pair.push(s);
                    }
                }
            }
            let mut pooled: Vec<f64> = per_pair.iter().flatten().copied().collect();
            pooled.sort_by(f64::total_cmp);
            let threshold = stats::quantile(&pooled, 0.5);
            let (rho, _) = stats::exponential_tail_rate(&pooled, threshold)?;
            let t_max = stats::quantile(&pooled, 0.99);
            let mut constant: f64 = 1.0;
            for t in stats::linspace(0.0, t_max, 100) {
                for s in &per_pair {
                    let surv = (s.len() - s.partition_point(|v| *v <= t)) as f64 / s.len() as f64;
                    constant = constant.max(surv * (rho * t).exp());
                }
            }
            Ok(CoalescenceReport { rho, constant, method })
        }
    }
}

/// Exact route of [`coalescence_rate`]; needs no randomness.
pub fn coalescence_exact(generator: &SwitchGenerator) -> Result<CoalescenceReport> {
    generator.require_irreducible()?;
    let method = CoalescenceMethod::Exact;
    if generator.n_modes() == 1 {
        return Ok(CoalescenceReport { rho: f64::INFINITY, constant: 1.0, method });
    }
    let (q, _) = killed_product_generator(generator);
    let rho = -linalg::spectral_abscissa(&q)?;
    if !(rho > 0.0) {
        return Err(Error::Numeric(format!("killed product chain has rate {rho}")));
    }
    // sup_t max_pair P(T > t) e^{rho t}; the ratio settles within a few
    // multiples of the relaxation time, 40 / rho covers it generously.
    let mut constant: f64 = 1.0;
    for t in stats::linspace(0.0, 40.0 / rho, 401) {
        let surv = linalg::expm(&(&q * t))?;
        for r in surv.row_iter() {
            constant = constant.max(r.sum() * (rho * t).exp());
        }
    }
    Ok(CoalescenceReport { rho, constant, method })
}

/// `theta_p` and the grid `C_2(p)` at one moment order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentExponent {
    pub p: f64,
    pub theta: f64,
    pub c2: f64,
}

/// Spectral summary of a constant-rate model.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub nu: Vec<f64>,
    pub exponents: Vec<MomentExponent>,
    pub kappa_moment: f64,
    pub rho: f64,
    pub rho_constant: f64,
}

impl SpectralReport {
    /// Computes every quantity for the moment orders `ps`, with `C_2` maximized
    /// over `c2_grid`.
    pub fn compute(generator: &SwitchGenerator, alpha: &[f64], ps: &[f64], c2_grid: &[f64]) -> Result<Self> {
        let nu = invariant_measure(generator)?;
        let kappa_moment = kappa_moment(generator, alpha)?;
        let mut exponents = Vec::with_capacity(ps.len());
        for &p in ps {
            exponents.push(MomentExponent {
                p,
                theta: theta_p(generator, alpha, p)?,
                c2: c2_estimate(generator, alpha, p, c2_grid)?,
            });
        }
        let co = coalescence_exact(generator)?;
        Ok(Self {
            nu,
            exponents,
            kappa_moment,
            rho: co.rho,
            rho_constant: co.constant,
        })
    }

    pub fn exponent(&self, p: f64) -> Option<&MomentExponent> {
        self.exponents.iter().find(|e| e.p == p)
    }
}
