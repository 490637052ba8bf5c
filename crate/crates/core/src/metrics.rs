//! Empirical distances: `W_p` between samples, total variation between mode
//! histograms and the mixture distance realized by a coupling.

use std::fmt::Write as _;

use rand::RngCore;
use rayon::prelude::*;

use crate::coupling::CoupledState;
use crate::error::{Error, Result};
use crate::model::HybridState;
use crate::rng::rng_from_seed;
use crate::stats::quantile;

/// Largest sample size accepted by [`wasserstein_assignment`].
pub const ASSIGNMENT_CAP: usize = 4096;

/// Bootstrap resamples used for confidence half-widths.
pub const BOOTSTRAP_RESAMPLES: usize = 200;

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::input(format!("Wasserstein order must be a finite p >= 1, got {p}")));
    }
    Ok(())
}

/// `W_p` between two empirical measures on the line with equal weights per
/// sample.
///
/// Integrates `|F^{-1}(u) - G^{-1}(u)|^p` exactly over the common refinement
/// of the breakpoints `k / n` and `l / m`, which is the same as splitting every
/// atom into `lcm(n, m)` equal pieces.
pub fn wasserstein_1d(samples_a: &[f64], samples_b: &[f64], p: f64) -> Result<f64> {
    check_p(p)?;
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::input("Wasserstein distance of an empty sample"));
    }
    if samples_a.iter().chain(samples_b).any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite sample"));
    }
    let mut a = samples_a.to_vec();
    let mut b = samples_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as u128, b.len() as u128);
    // Positions are measured in units of 1 / (n m).
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos: u128 = 0;
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let end_a = (i as u128 + 1) * m;
        let end_b = (j as u128 + 1) * n;
        let end = end_a.min(end_b);
        acc += (end - pos) as f64 * (a[i] - b[j]).abs().powf(p);
        pos = end;
        if end == end_a {
            i += 1;
        }
        if end == end_b {
            j += 1;
        }
    }
    Ok((acc / (n * m) as f64).powf(1.0 / p))
}

fn point_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Minimum-cost perfect matching of a square cost matrix (row-major),
/// returned as `row -> column`. Shortest augmenting paths with potentials.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    const INF: f64 = f64::INFINITY;
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![INF; n + 1];
    let mut used = vec![false; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = INF);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            let base = (i0 - 1) * n;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[base + j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Exact `W_p` between two equal-size point clouds in `R^d` by optimal
/// assignment on the `|x - y|^p` costs.
pub fn wasserstein_assignment(samples_a: &[Vec<f64>], samples_b: &[Vec<f64>], p: f64) -> Result<f64> {
    check_p(p)?;
    let n = samples_a.len();
    if n == 0 || samples_b.len() != n {
        return Err(Error::input(format!(
            "assignment needs two non-empty samples of equal size, got {} and {}",
            n,
            samples_b.len()
        )));
    }
    if n > ASSIGNMENT_CAP {
        return Err(Error::TooLarge(format!(
            "{n} points exceed the assignment cap of {ASSIGNMENT_CAP}; subsample or use one-dimensional projections"
        )));
    }
    let d = samples_a[0].len();
    if samples_a.iter().chain(samples_b).any(|x| x.len() != d) {
        return Err(Error::input("points of mixed dimension"));
    }
    let mut cost = vec![0.0; n * n];
    cost.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, c) in row.iter_mut().enumerate() {
            *c = point_dist(&samples_a[i], &samples_b[j]).powf(p);
        }
    });
    let assignment = solve_assignment(&cost, n);
    let total: f64 = assignment.iter().enumerate().map(|(i, j)| cost[i * n + j]).sum();
    Ok((total / n as f64).powf(1.0 / p))
}

/// `(1/2) sum_i |mu(i) - nu(i)|`.
pub fn tv_discrete(mu: &[f64], nu: &[f64]) -> Result<f64> {
    if mu.len() != nu.len() {
        return Err(Error::input(format!("histograms over {} and {} modes", mu.len(), nu.len())));
    }
    Ok(0.5 * mu.iter().zip(nu).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPoint {
    pub x: Vec<f64>,
    pub mode: usize,
    pub weight: f64,
}

/// Weighted sample of hybrid states.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmpiricalMeasure {
    pub points: Vec<WeightedPoint>,
    pub normalized: bool,
}

impl EmpiricalMeasure {
    /// Equal weights `1 / n`.
    pub fn from_states(states: &[HybridState]) -> Self {
        let w = 1.0 / states.len().max(1) as f64;
        Self {
            points: states.iter().map(|s| WeightedPoint { x: s.x.clone(), mode: s.mode, weight: w }).collect(),
            normalized: !states.is_empty(),
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.points.iter().map(|p| p.weight).sum()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let total = self.total_weight();
        if !(total > 0.0) || self.points.iter().any(|p| p.weight < 0.0) {
            return Err(Error::input("cannot normalize a measure without positive mass"));
        }
        for p in &mut self.points {
            p.weight /= total;
        }
        self.normalized = true;
        Ok(())
    }

    /// Mass of each mode.
    pub fn mode_histogram(&self, n_modes: usize) -> Vec<f64> {
        let mut h = vec![0.0; n_modes];
        for p in &self.points {
            if p.mode < n_modes {
                h[p.mode] += p.weight;
            }
        }
        h
    }

    /// Coordinate `k` of every point.
    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        self.points.iter().map(|p| p.x[k]).collect()
    }
}

/// Coupling plug-in for the mixture distance at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureEstimate {
    /// `(mean |X - X~|^p)^{1/p} + P(I != I~)`.
    pub estimate: f64,
    pub wasserstein_term: f64,
    pub mismatch_term: f64,
    /// Half-width of the 95% percentile bootstrap interval.
    pub half_width: f64,
}

fn mixture_value(dist_p: &[f64], mismatch: &[f64], idx: impl Iterator<Item = usize>, p: f64) -> f64 {
    let (mut s, mut m, mut n) = (0.0, 0.0, 0usize);
    for k in idx {
        s += dist_p[k];
        m += mismatch[k];
        n += 1;
    }
    (s / n as f64).powf(1.0 / p) + m / n as f64
}

/// Upper bound on the mixture distance read off coupled states at a common
/// time, with a bootstrap half-width. `seed` drives the resampling only.
pub fn mixture_distance_upper(states: &[CoupledState], p: f64, seed: u64) -> Result<MixtureEstimate> {
    check_p(p)?;
    let n = states.len();
    if n == 0 {
        return Err(Error::input("no coupled replicas"));
    }
    let dist_p: Vec<f64> = states.iter().map(|s| s.distance().powf(p)).collect();
    let mismatch: Vec<f64> = states.iter().map(|s| (s.mode != s.mode_tilde) as u8 as f64).collect();
    let wasserstein_term = (dist_p.iter().sum::<f64>() / n as f64).powf(1.0 / p);
    let mismatch_term = mismatch.iter().sum::<f64>() / n as f64;
    let estimate = wasserstein_term + mismatch_term;
    let half_width = if n > 1 {
        let mut rng = rng_from_seed(seed);
        let mut boot: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
            .map(|_| {
                let idx: Vec<usize> = (0..n).map(|_| ((rng.next_u64() as u128 * n as u128) >> 64) as usize).collect();
                mixture_value(&dist_p, &mismatch, idx.into_iter(), p)
            })
            .collect();
        boot.sort_by(f64::total_cmp);
        0.5 * (quantile(&boot, 0.975) - quantile(&boot, 0.025))
    } else {
        0.0
    };
    Ok(MixtureEstimate { estimate, wasserstein_term, mismatch_term, half_width })
}

/// [`mixture_distance_upper`] from recorded paths at time `t`.
pub fn mixture_distance_from_paths(paths: &[crate::coupling::CoupledPath], p: f64, t: f64, seed: u64) -> Result<MixtureEstimate> {
    let states = paths.iter().map(|path| path.state_at(t).cloned()).collect::<Result<Vec<_>>>()?;
    mixture_distance_upper(&states, p, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistancePoint {
    pub t: f64,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl DistancePoint {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }
}

/// Estimated distance against time.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceCurve {
    pub estimator: String,
    pub points: Vec<DistancePoint>,
}

impl DistanceCurve {
    pub fn new(estimator: impl Into<String>) -> Self {
        Self { estimator: estimator.into(), points: Vec::new() }
    }

    pub fn push(&mut self, t: f64, m: &MixtureEstimate) {
        self.points.push(DistancePoint {
            t,
            estimate: m.estimate,
            ci_low: m.estimate - m.half_width,
            ci_high: m.estimate + m.half_width,
        });
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.t).collect()
    }

    /// `t,estimate,ci_low,ci_high,estimator_name`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,estimate,ci_low,ci_high,estimator_name\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{},{}", p.t, p.estimate, p.ci_low, p.ci_high, self.estimator);
        }
        out
    }
}

/// Mixture-distance curve from coupled states laid out as
/// `states[replica][grid index]`.
pub fn mixture_curve(states: &[Vec<CoupledState>], grid: &[f64], p: f64, seed: u64) -> Result<DistanceCurve> {
    let mut curve = DistanceCurve::new(format!("coupling-w{p}"));
    for (k, t) in grid.iter().enumerate() {
        let column: Vec<CoupledState> = states
            .iter()
            .map(|row| row.get(k).cloned().ok_or_else(|| Error::GridMismatch(format!("replica misses grid point {k}"))))
            .collect::<Result<_>>()?;
        let m = mixture_distance_upper(&column, p, crate::rng::splitmix64(seed ^ k as u64))?;
        curve.push(*t, &m);
    }
    Ok(curve)
}
