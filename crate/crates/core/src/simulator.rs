//! Trajectory sampling: deterministic flow between jumps, exact holding
//! times for constant rates, cumulative-rate inversion or thinning for
//! state-dependent rates.

use std::fmt::Write as _;

use rayon::prelude::*;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::flows::VectorField;
use crate::model::{HybridState, JumpSampler, Rates, SwitchedModel};
use crate::rng::{categorical, open_uniform, replica_rng, replica_seed, unit_exponential, SimRng};
use crate::stats::MeanEstimate;
use crate::switching::{holding_time, next_mode, sample_ctmc_path};

/// `Exp(lambda)` holding time, `+inf` for `lambda = 0`.
pub fn next_jump_time_constant<R: RngCore + ?Sized>(lambda: f64, rng: &mut R) -> f64 {
    holding_time(lambda, rng)
}

/// Holding time for a given unit-exponential level `e`: `e / lambda`.
pub fn jump_time_from_level(lambda: f64, e: f64) -> f64 {
    if lambda > 0.0 {
        e / lambda
    } else {
        f64::INFINITY
    }
}

/// Relative accuracy of the crossing time located by inversion.
pub const CROSSING_TOLERANCE: f64 = 1e-10;

/// Result of integrating `(x' = F(x), l' = lambda(x))` toward a level.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LevelRun {
    elapsed: f64,
    accumulated: f64,
    crossed: bool,
}

struct AugScratch {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    start: Vec<f64>,
    buf: Vec<(usize, f64)>,
}

impl AugScratch {
    fn new(d: usize) -> Self {
        Self {
            k: [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]],
            tmp: vec![0.0; d],
            start: vec![0.0; d],
            buf: Vec::new(),
        }
    }
}

/// One RK4 step of the augmented system from `x`; returns the rate integral.
fn aug_rk4_step(field: &VectorField, rates: &Rates, mode: usize, x: &mut [f64], h: f64, s: &mut AugScratch) -> f64 {
    let d = x.len();
    let mut l = [0.0; 4];
    s.tmp.copy_from_slice(x);
    for stage in 0..4 {
        if stage > 0 {
            let c = if stage == 3 { h } else { 0.5 * h };
            for i in 0..d {
                s.tmp[i] = x[i] + c * s.k[stage - 1][i];
            }
        }
        field.eval_into(&s.tmp, &mut s.k[stage]);
        rates.outgoing(&s.tmp, mode, &mut s.buf);
        l[stage] = s.buf.iter().map(|(_, r)| r).sum();
    }
    for i in 0..d {
        x[i] += h / 6.0 * (s.k[0][i] + 2.0 * s.k[1][i] + 2.0 * s.k[2][i] + s.k[3][i]);
    }
    h / 6.0 * (l[0] + 2.0 * l[1] + 2.0 * l[2] + l[3])
}

/// Flows `x` in mode `mode` until the cumulative rate reaches `level` or
/// `max_dt` elapses, whichever comes first.
fn integrate_to_level(
    model: &SwitchedModel,
    x: &mut [f64],
    mode: usize,
    level: f64,
    max_dt: f64,
    s: &mut AugScratch,
) -> Result<LevelRun> {
    let field = model.field(mode);
    let rates = model.rates();
    let step = model.integrator().step;
    let mut elapsed = 0.0;
    let mut acc = 0.0;
    while elapsed < max_dt {
        let h = step.min(max_dt - elapsed);
        s.start.copy_from_slice(x);
        let dl = aug_rk4_step(field, rates, mode, x, h, s);
        if x.iter().any(|v| !v.is_finite()) || !dl.is_finite() {
            return Err(Error::IntegrationDiverged { t: elapsed });
        }
        if acc + dl < level {
            acc += dl;
            elapsed += h;
            continue;
        }
        // Crossing inside this step: bisect on a shortened single RK4 step.
        let target = level - acc;
        let (mut lo, mut hi) = (0.0, h);
        let tol = CROSSING_TOLERANCE * (elapsed + h);
        let start = s.start.clone();
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            x.copy_from_slice(&start);
            if aug_rk4_step(field, rates, mode, x, mid, s) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        x.copy_from_slice(&start);
        aug_rk4_step(field, rates, mode, x, hi, s);
        return Ok(LevelRun { elapsed: elapsed + hi, accumulated: level, crossed: true });
    }
    Ok(LevelRun { elapsed, accumulated: acc, crossed: false })
}

/// Jump time by inversion of the cumulative rate from `(x, mode)`.
///
/// Returns `(None, x_max)` when the level `E ~ Exp(1)` is not reached
/// within `max_time`, the integrable-rate case with `T = +inf`.
pub fn next_jump_inversion<R: RngCore + ?Sized>(
    model: &SwitchedModel,
    x: &[f64],
    mode: usize,
    max_time: f64,
    rng: &mut R,
) -> Result<(Option<f64>, Vec<f64>)> {
    let e = unit_exponential(rng);
    next_jump_inversion_at_level(model, x, mode, e, max_time)
}

/// [`next_jump_inversion`] for a given level.
pub fn next_jump_inversion_at_level(
    model: &SwitchedModel,
    x: &[f64],
    mode: usize,
    level: f64,
    max_time: f64,
) -> Result<(Option<f64>, Vec<f64>)> {
    let mut y = x.to_vec();
    let mut s = AugScratch::new(x.len());
    let run = integrate_to_level(model, &mut y, mode, level, max_time, &mut s)?;
    Ok((run.crossed.then_some(run.elapsed), y))
}

fn bound_of(model: &SwitchedModel) -> Result<f64> {
    model
        .state_rates()
        .map(|s| s.upper)
        .ok_or_else(|| Error::input("thinning needs state-dependent rates with an upper bound"))
}

/// Accept-reject at one candidate point; `Some(target)` on acceptance.
fn thinning_trial<R: RngCore + ?Sized>(
    rates: &Rates,
    bound: f64,
    y: &[f64],
    mode: usize,
    buf: &mut Vec<(usize, f64)>,
    rng: &mut R,
) -> Result<Option<usize>> {
    rates.outgoing(y, mode, buf);
    let lambda: f64 = buf.iter().map(|(_, r)| r).sum();
    if lambda > bound * (1.0 + 1e-9) {
        return Err(Error::BoundViolation { observed: lambda, bound });
    }
    if open_uniform(rng) * bound >= lambda {
        return Ok(None);
    }
    Ok(categorical(rng, buf.iter().map(|(_, r)| *r)).map(|k| buf[k].0))
}

/// First accepted jump by thinning against the declared upper bound.
///
/// `None` when nothing is accepted within `max_time`.
pub fn next_jump_thinning<R: RngCore + ?Sized>(
    model: &SwitchedModel,
    x: &[f64],
    mode: usize,
    max_time: f64,
    rng: &mut R,
) -> Result<Option<(f64, Vec<f64>, usize)>> {
    let bound = bound_of(model)?;
    let mut y = x.to_vec();
    let mut t = 0.0;
    let mut buf = Vec::new();
    loop {
        let dt = unit_exponential(rng) / bound;
        if t + dt > max_time {
            return Ok(None);
        }
        model.field(mode).flow_in_place(&mut y, dt, model.integrator())?;
        t += dt;
        if let Some(j) = thinning_trial(model.rates(), bound, &y, mode, &mut buf, rng)? {
            return Ok(Some((t, y, j)));
        }
    }
}

enum Clock {
    /// Absolute time of the next jump.
    Constant(f64),
    /// Absolute time of the next candidate.
    Thinning { next: f64, bound: f64 },
    /// Cumulative rate still to be spent before the next jump.
    Inversion(f64),
}

/// Online sampler of one trajectory: advances `(x, mode)` to requested times
/// and reports every jump on the way.
pub(crate) struct Cursor<'m> {
    model: &'m SwitchedModel,
    pub x: Vec<f64>,
    pub mode: usize,
    pub t: f64,
    clock: Clock,
    buf: Vec<(usize, f64)>,
    scratch: AugScratch,
}

impl<'m> Cursor<'m> {
    pub(crate) fn new<R: RngCore + ?Sized>(model: &'m SwitchedModel, z0: &HybridState, rng: &mut R) -> Result<Self> {
        model.check_state(z0)?;
        let clock = match model.rates() {
            Rates::Constant(g) => Clock::Constant(holding_time(g.exit_rate(z0.mode), rng)),
            Rates::StateDependent(s) => match model.sampler() {
                JumpSampler::Thinning => Clock::Thinning { next: unit_exponential(rng) / s.upper, bound: s.upper },
                JumpSampler::Inversion => Clock::Inversion(unit_exponential(rng)),
            },
        };
        Ok(Self {
            model,
            x: z0.x.clone(),
            mode: z0.mode,
            t: 0.0,
            clock,
            buf: Vec::new(),
            scratch: AugScratch::new(z0.x.len()),
        })
    }

    fn flow_to(&mut self, t: f64) -> Result<()> {
        let dt = t - self.t;
        self.model
            .field(self.mode)
            .flow_in_place(&mut self.x, dt, self.model.integrator())
            .map_err(|e| match e {
                Error::IntegrationDiverged { .. } => Error::IntegrationDiverged { t },
                other => other,
            })?;
        self.t = t;
        Ok(())
    }

    /// Moves to time `target`, calling `on_jump(t, x, new_mode)` after each jump.
    pub(crate) fn advance<R: RngCore + ?Sized>(
        &mut self,
        target: f64,
        rng: &mut R,
        mut on_jump: impl FnMut(f64, &[f64], usize),
    ) -> Result<()> {
        loop {
            match self.clock {
                Clock::Constant(next) => {
                    if next > target {
                        return self.flow_to(target);
                    }
                    self.flow_to(next)?;
                    let g = self.model.generator().expect("constant clock on constant rates");
                    self.mode = next_mode(g, self.mode, rng);
                    self.clock = Clock::Constant(next + holding_time(g.exit_rate(self.mode), rng));
                    on_jump(self.t, &self.x, self.mode);
                }
                Clock::Thinning { next, bound } => {
                    if next > target {
                        return self.flow_to(target);
                    }
                    self.flow_to(next)?;
                    let hit = thinning_trial(self.model.rates(), bound, &self.x, self.mode, &mut self.buf, rng)?;
                    self.clock = Clock::Thinning { next: next + unit_exponential(rng) / bound, bound };
                    if let Some(j) = hit {
                        self.mode = j;
                        on_jump(self.t, &self.x, self.mode);
                    }
                }
                Clock::Inversion(remaining) => {
                    if self.t >= target {
                        return Ok(());
                    }
                    let run = integrate_to_level(self.model, &mut self.x, self.mode, remaining, target - self.t, &mut self.scratch)
                        .map_err(|_| Error::IntegrationDiverged { t: self.t })?;
                    self.t = if run.crossed { self.t + run.elapsed } else { target };
                    if !run.crossed {
                        self.clock = Clock::Inversion(remaining - run.accumulated);
                        return Ok(());
                    }
                    self.model.rates().outgoing(&self.x, self.mode, &mut self.buf);
                    if let Some(k) = categorical(rng, self.buf.iter().map(|(_, r)| *r)) {
                        self.mode = self.buf[k].0;
                        on_jump(self.t, &self.x, self.mode);
                    }
                    self.clock = Clock::Inversion(unit_exponential(rng));
                }
            }
        }
    }

    pub(crate) fn state(&self) -> HybridState {
        HybridState { x: self.x.clone(), mode: self.mode }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Start,
    Jump,
    Sample,
    End,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Start => "start",
            EventKind::Jump => "jump",
            EventKind::Sample => "sample",
            EventKind::End => "end",
        }
    }
}

/// One record of a trajectory. `mode` is the mode right after the event.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEvent {
    pub t: f64,
    pub x: Vec<f64>,
    pub mode: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub events: Vec<TrajectoryEvent>,
    pub seed: Option<u64>,
    pub replica: usize,
}

impl Trajectory {
    pub fn horizon(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.t)
    }

    pub fn jump_count(&self) -> usize {
        self.events.iter().filter(|e| e.kind == EventKind::Jump).count()
    }

    /// Non-jump record closest to `t`.
    pub fn sample_nearest(&self, t: f64) -> Result<&TrajectoryEvent> {
        let h = self.horizon();
        if t < 0.0 || t > h * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::OutOfRange { t, horizon: h });
        }
        self.events
            .iter()
            .filter(|e| e.kind != EventKind::Jump)
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .ok_or_else(|| Error::input("trajectory has no sample records"))
    }

    /// Appends CSV rows `t, x_1..x_d, mode, event_kind, replica`.
    pub fn write_csv_rows(&self, out: &mut String) {
        for e in &self.events {
            let _ = write!(out, "{}", e.t);
            for v in &e.x {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{},{}", e.mode, e.kind.as_str(), self.replica);
        }
    }
}

pub fn trajectory_csv_header(dim: usize) -> String {
    let mut h = String::from("t");
    for k in 1..=dim {
        let _ = write!(h, ",x_{k}");
    }
    h.push_str(",mode,event_kind,replica\n");
    h
}

/// Replica-major CSV of a batch of trajectories.
pub fn trajectories_to_csv(trajectories: &[Trajectory], dim: usize) -> String {
    let mut out = trajectory_csv_header(dim);
    for tr in trajectories {
        tr.write_csv_rows(&mut out);
    }
    out
}

/// Sample times `k * sample_dt` strictly inside `(0, horizon)`.
fn sample_times(horizon: f64, sample_dt: f64) -> Vec<f64> {
    let mut v = Vec::new();
    let mut k = 1u64;
    loop {
        let t = k as f64 * sample_dt;
        if t >= horizon {
            return v;
        }
        v.push(t);
        k += 1;
    }
}

fn check_times(horizon: f64, sample_dt: f64) -> Result<()> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::input(format!("horizon must be positive and finite, got {horizon}")));
    }
    if !(sample_dt > 0.0) {
        return Err(Error::input(format!("sample_dt must be positive, got {sample_dt}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    pub record_jumps: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { record_jumps: true }
    }
}

/// Interleaved sampler: flows and jumps in time order, every jump recorded
/// exactly, a sample every `sample_dt` and an end record at `horizon`.
pub fn simulate_joint<R: RngCore + ?Sized>(
    model: &SwitchedModel,
    z0: &HybridState,
    horizon: f64,
    sample_dt: f64,
    options: SimOptions,
    rng: &mut R,
) -> Result<Trajectory> {
    check_times(horizon, sample_dt)?;
    let mut cur = Cursor::new(model, z0, rng)?;
    let mut events = vec![TrajectoryEvent { t: 0.0, x: z0.x.clone(), mode: z0.mode, kind: EventKind::Start }];
    let mut stops = sample_times(horizon, sample_dt);
    stops.push(horizon);
    let last = stops.len() - 1;
    for (k, s) in stops.into_iter().enumerate() {
        cur.advance(s, rng, |t, x, mode| {
            if options.record_jumps {
                events.push(TrajectoryEvent { t, x: x.to_vec(), mode, kind: EventKind::Jump });
            }
        })?;
        push_sample(&mut events, &cur.x, cur.mode, s, k == last);
    }
    Ok(Trajectory { events, seed: None, replica: 0 })
}

fn push_sample(events: &mut Vec<TrajectoryEvent>, x: &[f64], mode: usize, t: f64, end: bool) {
    let kind = if end { EventKind::End } else { EventKind::Sample };
    if let Some(prev) = events.last_mut() {
        if prev.t == t {
            // A jump landed exactly on the sample time; keep one record.
            if end {
                prev.kind = EventKind::End;
            }
            return;
        }
    }
    events.push(TrajectoryEvent { t, x: x.to_vec(), mode, kind });
}

/// Samples a trajectory on `[0, horizon]`.
///
/// Constant-rate models draw the discrete chain first and then rebuild `X`
/// along it, which gives the same trajectory as [`simulate_joint`] for the
/// same generator state. State-dependent models use the configured jump
/// sampler.
pub fn simulate<R: RngCore + ?Sized>(
    model: &SwitchedModel,
    z0: &HybridState,
    horizon: f64,
    sample_dt: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    simulate_with(model, z0, horizon, sample_dt, SimOptions::default(), rng)
}

pub fn simulate_with<R: RngCore + ?Sized>(
    model: &SwitchedModel,
    z0: &HybridState,
    horizon: f64,
    sample_dt: f64,
    options: SimOptions,
    rng: &mut R,
) -> Result<Trajectory> {
    let Some(g) = model.generator() else {
        return simulate_joint(model, z0, horizon, sample_dt, options, rng);
    };
    check_times(horizon, sample_dt)?;
    model.check_state(z0)?;
    let path = sample_ctmc_path(g, z0.mode, horizon, rng)?;
    let mut events = vec![TrajectoryEvent { t: 0.0, x: z0.x.clone(), mode: z0.mode, kind: EventKind::Start }];
    let mut x = z0.x.clone();
    let mut t = 0.0;
    let mut mode = z0.mode;
    let mut jumps = path.times.iter().zip(&path.modes).skip(1).peekable();
    let mut stops = sample_times(horizon, sample_dt);
    stops.push(horizon);
    let last = stops.len() - 1;
    for (k, s) in stops.into_iter().enumerate() {
        while let Some((&tj, &mj)) = jumps.next_if(|(tj, _)| **tj <= s) {
            model.field(mode).flow_in_place(&mut x, tj - t, model.integrator())?;
            t = tj;
            mode = mj;
            if options.record_jumps {
                events.push(TrajectoryEvent { t, x: x.clone(), mode, kind: EventKind::Jump });
            }
        }
        model.field(mode).flow_in_place(&mut x, s - t, model.integrator())?;
        t = s;
        push_sample(&mut events, &x, mode, s, k == last);
    }
    Ok(Trajectory { events, seed: None, replica: 0 })
}

/// [`simulate`] for replica `index` of an experiment seeded with `master`.
pub fn simulate_replica(
    model: &SwitchedModel,
    z0: &HybridState,
    horizon: f64,
    sample_dt: f64,
    master: u64,
    index: usize,
) -> Result<Trajectory> {
    let mut rng = replica_rng(master, index as u64);
    let mut tr = simulate(model, z0, horizon, sample_dt, &mut rng)?;
    tr.seed = Some(replica_seed(master, index as u64));
    tr.replica = index;
    Ok(tr)
}

/// States at the sorted times `grid` without storing the path.
pub fn simulate_on_grid<R: RngCore + ?Sized>(
    model: &SwitchedModel,
    z0: &HybridState,
    grid: &[f64],
    rng: &mut R,
) -> Result<Vec<HybridState>> {
    check_grid(grid)?;
    let mut cur = Cursor::new(model, z0, rng)?;
    let mut out = Vec::with_capacity(grid.len());
    for &s in grid {
        cur.advance(s, rng, |_, _, _| {})?;
        out.push(cur.state());
    }
    Ok(out)
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::input("time grid must be finite, non-negative and sorted"));
    }
    Ok(())
}

/// Runs `f(index, rng)` for `n` replicas on the current rayon pool.
///
/// Each replica owns the generator derived from `(master, index)` and results
/// come back in index order, so the output does not depend on scheduling.
pub fn replicate<T, F>(n: usize, master: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut SimRng) -> Result<T> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = replica_rng(master, k as u64);
            f(k, &mut rng)
        })
        .collect()
}

/// `E|X_t|^q` from the non-jump record nearest `t` of each trajectory, with a
/// jackknife standard error.
pub fn moment_estimate(trajectories: &[Trajectory], q: f64, t: f64) -> Result<MeanEstimate> {
    if !(q >= 1.0) {
        return Err(Error::input(format!("moment order must be >= 1, got {q}")));
    }
    let values = trajectories
        .iter()
        .map(|tr| tr.sample_nearest(t).map(|e| norm(&e.x).powf(q)))
        .collect::<Result<Vec<_>>>()?;
    MeanEstimate::jackknife(&values)
}

/// `E|X|^q` over a batch of states.
pub fn moment_of_states(states: &[HybridState], q: f64) -> Result<MeanEstimate> {
    let values: Vec<f64> = states.iter().map(|s| s.norm().powf(q)).collect();
    MeanEstimate::jackknife(&values)
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Inflation applied to the Monte Carlo supremum of the moments.
pub const MOMENT_INFLATION: f64 = 1.1;

/// Plug-in for `sup_t E|X_t|^q`: the largest Monte Carlo moment over `grid`
/// and over the starting points, times [`MOMENT_INFLATION`].
pub fn moment_sup_estimate(
    model: &SwitchedModel,
    starts: &[HybridState],
    q: f64,
    grid: &[f64],
    replicas: usize,
    master: u64,
) -> Result<f64> {
    let mut best: f64 = 0.0;
    for (s, z0) in starts.iter().enumerate() {
        let paths = replicate(replicas, master ^ (s as u64).wrapping_mul(0x9E37_79B9), |_, rng| {
            simulate_on_grid(model, z0, grid, rng)
        })?;
        for k in 0..grid.len() {
            let states: Vec<HybridState> = paths.iter().map(|p| p[k].clone()).collect();
            best = best.max(moment_of_states(&states, q)?.mean);
        }
    }
    Ok(best * MOMENT_INFLATION)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FnRates, StateRates};
    use crate::rng::rng_from_seed;
    use crate::stats::{ks_statistic, ks_two_sample};
    use crate::switching::SwitchGenerator;

    fn constant_model(l0: f64, l1: f64) -> SwitchedModel {
        let f0 = VectorField::linear_attractor(1.0, &[0.0, 0.0]).unwrap();
        let f1 = VectorField::linear_attractor(1.0, &[1.0, 0.0]).unwrap();
        SwitchedModel::from_fields(vec![f0, f1], Rates::Constant(SwitchGenerator::two_state(l0, l1).unwrap())).unwrap()
    }

    fn state_model(f: FnRates, lower: f64, upper: f64, sampler: JumpSampler) -> SwitchedModel {
        let f0 = VectorField::linear_attractor(1.0, &[0.0]).unwrap();
        let f1 = VectorField::linear_attractor(1.0, &[0.0]).unwrap();
        let rates = StateRates::new(f, lower, 1.0, upper).unwrap();
        SwitchedModel::from_fields(vec![f0, f1], Rates::StateDependent(rates))
            .unwrap()
            .with_sampler(sampler)
            .with_integrator(crate::flows::FlowIntegrator::new(1e-2, 1e-10).unwrap())
    }

    #[test]
    fn constant_jump_time_examples() {
        let mut rng = rng_from_seed(1);
        assert_eq!(next_jump_time_constant(0.0, &mut rng), f64::INFINITY);
        assert_eq!(jump_time_from_level(1.0, 0.7), 0.7);
        let n = 1_000_000;
        let mean = (0..n).map(|_| next_jump_time_constant(4.0, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.25).abs() < 0.001, "mean {mean}");
    }

    #[test]
    fn inversion_with_constant_rate_is_exponential() {
        let f = FnRates::new(2, |_, _, _| 2.0);
        let m = state_model(f, 2.0, 2.0, JumpSampler::Inversion);
        let mut rng = rng_from_seed(2);
        let samples: Vec<f64> = (0..100_000)
            .map(|_| next_jump_inversion(&m, &[0.3], 0, 100.0, &mut rng).unwrap().0.unwrap())
            .collect();
        let ks = ks_statistic(&samples, |t| 1.0 - (-2.0 * t).exp()).unwrap();
        assert!(ks < 0.01, "ks {ks}");
    }

    #[test]
    fn inversion_with_integrable_rate_never_jumps_with_probability_e_inv() {
        // F = -x, lambda(x) = x from x = 1: lambda along the flow is e^{-s}.
        let f = FnRates::new(2, |x, _, _| x[0].max(0.0));
        let m = state_model(f, 1e-9, 1.0, JumpSampler::Inversion);
        let mut rng = rng_from_seed(3);
        let n = 100_000;
        let never = (0..n)
            .filter(|_| next_jump_inversion(&m, &[1.0], 0, 40.0, &mut rng).unwrap().0.is_none())
            .count() as f64
            / n as f64;
        let p = (-1.0f64).exp();
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((never - p).abs() < 3.0 * sigma, "P(T = inf) {never}");
    }

    #[test]
    fn inversion_crossing_is_exact_for_known_level() {
        let f = FnRates::new(2, |x, _, _| x[0].max(0.0));
        let m = state_model(f, 1e-9, 1.0, JumpSampler::Inversion);
        // int_0^T e^{-s} ds = 1 - e^{-T} = 0.5 at T = ln 2.
        let (t, x) = next_jump_inversion_at_level(&m, &[1.0], 0, 0.5, 10.0).unwrap();
        assert!((t.unwrap() - 2f64.ln()).abs() < 1e-9);
        assert!((x[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn smallest_level_gives_positive_time() {
        let f = FnRates::new(2, |_, _, _| 1.0);
        let m = state_model(f, 1.0, 1.0, JumpSampler::Inversion);
        let e = crate::rng::unit_exponential_from_uniform(0.0f64.max(1.0 / (1u64 << 53) as f64));
        let (t, _) = next_jump_inversion_at_level(&m, &[0.0], 0, e, 1.0).unwrap();
        assert!(t.unwrap() > 0.0);
    }

    #[test]
    fn thinning_examples() {
        let mut rng = rng_from_seed(4);
        // Rate equal to the bound: Exp(bound).
        let full = state_model(FnRates::new(2, |_, _, _| 3.0), 3.0, 3.0, JumpSampler::Thinning);
        let s: Vec<f64> = (0..100_000)
            .map(|_| next_jump_thinning(&full, &[0.0], 0, 1e3, &mut rng).unwrap().unwrap().0)
            .collect();
        assert!(ks_statistic(&s, |t| 1.0 - (-3.0 * t).exp()).unwrap() < 0.01);

        // Rate half the bound: mean 2 / bound.
        let half = state_model(FnRates::new(2, |_, _, _| 1.5), 1.5, 3.0, JumpSampler::Thinning);
        let s: Vec<f64> = (0..100_000)
            .map(|_| next_jump_thinning(&half, &[0.0], 0, 1e3, &mut rng).unwrap().unwrap().0)
            .collect();
        let m = MeanEstimate::from_samples(&s).unwrap();
        assert!(m.z_against(2.0 / 3.0) < 3.0, "{m:?}");

        // Selection ratio 2:1 between two targets.
        let f = FnRates::new(3, |_, _, j| if j == 1 { 2.0 } else { 1.0 });
        let fields: Vec<VectorField> = (0..3).map(|_| VectorField::linear_attractor(1.0, &[0.0]).unwrap()).collect();
        let three = SwitchedModel::from_fields(fields, Rates::StateDependent(StateRates::new(f, 1.0, 0.0, 3.0).unwrap())).unwrap();
        let n = 30_000;
        let to_one = (0..n)
            .filter(|_| next_jump_thinning(&three, &[0.0], 0, 1e3, &mut rng).unwrap().unwrap().2 == 1)
            .count() as f64;
        let p = 2.0 / 3.0;
        assert!((to_one / n as f64 - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt());
    }

    #[test]
    fn thinning_reports_bound_violation() {
        let m = state_model(FnRates::new(2, |_, _, _| 5.0), 1.0, 2.0, JumpSampler::Thinning);
        let mut rng = rng_from_seed(5);
        assert!(matches!(
            next_jump_thinning(&m, &[0.0], 0, 10.0, &mut rng),
            Err(Error::BoundViolation { .. })
        ));
    }

    #[test]
    fn thinning_and_inversion_agree() {
        let f = FnRates::new(2, |x, i, _| if i == 0 { 1.0 + 0.4 * x[0].sin() } else { 1.0 + 0.4 * x[0].cos() });
        let f0 = VectorField::linear_attractor(1.0, &[-1.0]).unwrap();
        let f1 = VectorField::linear_attractor(1.0, &[1.0]).unwrap();
        let rates = StateRates::new(f, 0.6, 0.4, 1.4).unwrap();
        let base = SwitchedModel::from_fields(vec![f0, f1], Rates::StateDependent(rates))
            .unwrap()
            .with_integrator(crate::flows::FlowIntegrator::new(1e-2, 1e-10).unwrap());
        let inv = base.clone().with_sampler(JumpSampler::Inversion);
        let mut rng = rng_from_seed(6);
        let n = 100_000;
        let a: Vec<f64> = (0..n).map(|_| next_jump_inversion(&inv, &[0.7], 0, 1e3, &mut rng).unwrap().0.unwrap()).collect();
        let b: Vec<f64> = (0..n).map(|_| next_jump_thinning(&base, &[0.7], 0, 1e3, &mut rng).unwrap().unwrap().0).collect();
        let ks = ks_two_sample(&a, &b).unwrap();
        assert!(ks < 0.01, "ks {ks}");
    }

    #[test]
    fn pure_flow_without_jumps() {
        let f = VectorField::linear_attractor(1.0, &[0.0]).unwrap();
        let g = SwitchGenerator::from_matrix(nalgebra::DMatrix::zeros(1, 1)).unwrap();
        let m = SwitchedModel::from_fields(vec![f], Rates::Constant(g)).unwrap();
        let mut rng = rng_from_seed(7);
        let tr = simulate(&m, &HybridState::new(vec![1.0], 0), 1.0, 0.1, &mut rng).unwrap();
        let end = tr.events.last().unwrap();
        assert_eq!(end.kind, EventKind::End);
        assert!((end.x[0] - (-1.0f64).exp()).abs() < 1e-6);
        assert_eq!(tr.jump_count(), 0);
        assert!(tr.events.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn toy_model_stays_on_the_segment() {
        let m = constant_model(1.0, 1.0);
        let mut rng = rng_from_seed(8);
        for _ in 0..50 {
            let tr = simulate(&m, &HybridState::new(vec![0.5, 0.0], 0), 30.0, 0.25, &mut rng).unwrap();
            for e in &tr.events {
                assert!(e.x[1] == 0.0);
                assert!(e.x[0] >= -1e-12 && e.x[0] <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn jump_count_is_poisson_mean() {
        let m = constant_model(1.0, 1.0);
        let counts = replicate(1000, 9, |_, rng| {
            Ok(simulate(&m, &HybridState::new(vec![0.0, 0.0], 0), 100.0, 10.0, rng)?.jump_count() as f64)
        })
        .unwrap();
        let est = MeanEstimate::from_samples(&counts).unwrap();
        assert!(est.z_against(100.0) < 3.0, "{est:?}");
    }

    #[test]
    fn chain_first_equals_joint() {
        let m = constant_model(1.3, 0.7);
        for seed in 0..20 {
            let z0 = HybridState::new(vec![0.2, -0.4], 1);
            let a = simulate(&m, &z0, 15.0, 0.3, &mut rng_from_seed(seed)).unwrap();
            let b = simulate_joint(&m, &z0, 15.0, 0.3, SimOptions::default(), &mut rng_from_seed(seed)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn grid_states_match_trajectory_samples() {
        let m = constant_model(1.0, 2.0);
        let z0 = HybridState::new(vec![0.0, 0.0], 0);
        let grid = [0.5, 1.0, 1.5];
        let g = simulate_on_grid(&m, &z0, &grid, &mut rng_from_seed(10)).unwrap();
        let tr = simulate_joint(&m, &z0, 1.5, 0.5, SimOptions::default(), &mut rng_from_seed(10)).unwrap();
        for (k, t) in grid.iter().enumerate() {
            let e = tr.sample_nearest(*t).unwrap();
            assert_eq!(e.x, g[k].x);
            assert_eq!(e.mode, g[k].mode);
        }
    }

    #[test]
    fn replicas_are_scheduling_independent() {
        let m = constant_model(1.0, 1.0);
        let z0 = HybridState::new(vec![0.0, 0.0], 0);
        let run = || replicate(32, 77, |k, _| simulate_replica(&m, &z0, 5.0, 0.5, 77, k)).unwrap();
        let a = run();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(run);
        assert_eq!(a, b);
        assert_eq!(trajectories_to_csv(&a, 2), trajectories_to_csv(&b, 2));
    }

    #[test]
    fn moment_examples() {
        let f = VectorField::linear_attractor(1.0, &[0.0]).unwrap();
        let g = SwitchGenerator::from_matrix(nalgebra::DMatrix::zeros(1, 1)).unwrap();
        let decay = SwitchedModel::from_fields(vec![f], Rates::Constant(g)).unwrap();
        let trs: Vec<Trajectory> = (0..4)
            .map(|k| simulate(&decay, &HybridState::new(vec![2.0], 0), 20.0, 1.0, &mut rng_from_seed(k)).unwrap())
            .collect();
        let early = moment_estimate(&trs, 1.0, 1.0).unwrap().mean;
        let late = moment_estimate(&trs, 1.0, 20.0).unwrap().mean;
        assert!(late < early && late < 1e-7);
        assert!(matches!(moment_estimate(&trs, 1.0, 25.0), Err(Error::OutOfRange { .. })));

        let toy = constant_model(1.0, 1.0);
        let trs = replicate(2000, 11, |_, rng| simulate(&toy, &HybridState::new(vec![0.0, 0.0], 0), 40.0, 1.0, rng)).unwrap();
        let m1 = moment_estimate(&trs, 1.0, 40.0).unwrap();
        assert!(m1.mean >= 0.0 && m1.mean <= 1.0);
        let a = moment_estimate(&trs, 2.0, 20.0).unwrap();
        let b = moment_estimate(&trs, 2.0, 40.0).unwrap();
        let z = (a.mean - b.mean).abs() / (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!(z < 3.0, "{a:?} vs {b:?}");
    }
}
