//! Couplings of two copies of a switched PDMP, the distance process
//! `Delta_t = |X_t - X~_t| + 1{I_t != I~_t}` and the one-dimensional companion
//! process that dominates it.
//!
//! Constant rates use the synchronous coupling: independent discrete chains
//! until they first meet, one shared chain afterwards. State-dependent rates
//! use the merge/defect coupling: while the modes differ the copies jump
//! independently; while they agree they jump together to `j` at rate
//! `min(a(x, i, j), a(x~, i, j))` and split at the positive and negative
//! parts of `a(x, i, j) - a(x~, i, j)`. All streams share one thinning clock
//! at twice the declared rate bound.

use std::fmt::Write as _;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::model::{HybridState, Rates, SwitchedModel};
use crate::rng::{categorical, replica_rng, replica_seed, unit_exponential};
use crate::simulator::{check_grid, norm};
use crate::switching::{holding_time, next_mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Independent,
    Merged,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Independent => "independent",
            Phase::Merged => "merged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledState {
    pub x: Vec<f64>,
    pub x_tilde: Vec<f64>,
    pub mode: usize,
    pub mode_tilde: usize,
    pub phase: Phase,
}

impl CoupledState {
    pub fn new(z: &HybridState, zt: &HybridState) -> Self {
        let phase = if z.mode == zt.mode { Phase::Merged } else { Phase::Independent };
        Self { x: z.x.clone(), x_tilde: zt.x.clone(), mode: z.mode, mode_tilde: zt.mode, phase }
    }

    /// `|x - x~|`.
    pub fn distance(&self) -> f64 {
        self.x.iter().zip(&self.x_tilde).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    /// `|x - x~| + 1{i != i~}`.
    pub fn delta(&self) -> f64 {
        self.distance() + if self.mode != self.mode_tilde { 1.0 } else { 0.0 }
    }

    pub fn first(&self) -> HybridState {
        HybridState { x: self.x.clone(), mode: self.mode }
    }

    pub fn second(&self) -> HybridState {
        HybridState { x: self.x_tilde.clone(), mode: self.mode_tilde }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoupledEventKind {
    Start,
    FlowSample,
    /// One copy jumps, the modes still differ.
    SingleJump,
    /// Both copies jump to the same mode.
    DoubleJump,
    /// One copy jumps onto the other's mode.
    Merge,
    /// One copy leaves the shared mode.
    Split,
    End,
}

impl CoupledEventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CoupledEventKind::Start => "start",
            CoupledEventKind::FlowSample => "flow-sample",
            CoupledEventKind::SingleJump => "single-jump",
            CoupledEventKind::DoubleJump => "double-jump",
            CoupledEventKind::Merge => "merge",
            CoupledEventKind::Split => "split",
            CoupledEventKind::End => "end",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledEvent {
    pub t: f64,
    pub state: CoupledState,
    pub kind: CoupledEventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPath {
    pub events: Vec<CoupledEvent>,
    pub seed: Option<u64>,
    pub replica: usize,
}

impl CoupledPath {
    pub fn horizon(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.t)
    }

    /// Record at time `t` (a sample, start or end record within `1e-9`).
    pub fn state_at(&self, t: f64) -> Result<&CoupledState> {
        if t > self.horizon() * (1.0 + 1e-12) + 1e-12 || t < 0.0 {
            return Err(Error::OutOfRange { t, horizon: self.horizon() });
        }
        self.events
            .iter()
            .rev()
            .find(|e| (e.t - t).abs() <= 1e-9 * t.abs().max(1.0))
            .map(|e| &e.state)
            .ok_or_else(|| Error::GridMismatch(format!("no coupled record at t = {t}")))
    }

    /// Appends rows `t, x.., x~.., i, i~, phase, delta, event_kind, replica`.
    pub fn write_csv_rows(&self, out: &mut String) {
        for e in &self.events {
            let s = &e.state;
            let _ = write!(out, "{}", e.t);
            for v in s.x.iter().chain(&s.x_tilde) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(
                out,
                ",{},{},{},{},{},{}",
                s.mode,
                s.mode_tilde,
                s.phase.as_str(),
                s.delta(),
                e.kind.as_str(),
                self.replica
            );
        }
    }
}

pub fn coupled_csv_header(dim: usize) -> String {
    let mut h = String::from("t");
    for k in 1..=dim {
        let _ = write!(h, ",x_{k}");
    }
    for k in 1..=dim {
        let _ = write!(h, ",xt_{k}");
    }
    h.push_str(",mode,mode_tilde,phase,delta,event_kind,replica\n");
    h
}

pub fn coupled_paths_to_csv(paths: &[CoupledPath], dim: usize) -> String {
    let mut out = coupled_csv_header(dim);
    for p in paths {
        p.write_csv_rows(&mut out);
    }
    out
}

/// `(t, Delta_t)` at every record of the path.
pub fn delta_process(path: &CoupledPath) -> Vec<(f64, f64)> {
    path.events.iter().map(|e| (e.t, e.state.delta())).collect()
}

enum CoupledClock {
    /// Next jump times of the two independent chains.
    Pair(f64, f64),
    /// Next jump of the shared chain.
    Shared(f64),
    /// Next candidate of the thinning clock at `2 * bound`.
    Thinning { next: f64, bound: f64 },
}

struct CoupledCursor<'m> {
    model: &'m SwitchedModel,
    s: CoupledState,
    t: f64,
    clock: CoupledClock,
    a: Vec<(usize, f64)>,
    b: Vec<(usize, f64)>,
    w: Vec<f64>,
}

impl<'m> CoupledCursor<'m> {
    fn new<R: RngCore + ?Sized>(model: &'m SwitchedModel, z: &HybridState, zt: &HybridState, rng: &mut R) -> Result<Self> {
        model.check_state(z)?;
        model.check_state(zt)?;
        let s = CoupledState::new(z, zt);
        let clock = match model.rates() {
            Rates::Constant(g) => match s.phase {
                Phase::Merged => CoupledClock::Shared(holding_time(g.exit_rate(s.mode), rng)),
                Phase::Independent => {
                    let a = holding_time(g.exit_rate(s.mode), rng);
                    CoupledClock::Pair(a, holding_time(g.exit_rate(s.mode_tilde), rng))
                }
            },
            Rates::StateDependent(r) => {
                CoupledClock::Thinning { next: unit_exponential(rng) / (2.0 * r.upper), bound: r.upper }
            }
        };
        Ok(Self { model, s, t: 0.0, clock, a: Vec::new(), b: Vec::new(), w: Vec::new() })
    }

    fn flow_to(&mut self, t: f64) -> Result<()> {
        let dt = t - self.t;
        let ig = self.model.integrator();
        self.model.field(self.s.mode).flow_in_place(&mut self.s.x, dt, ig)?;
        self.model.field(self.s.mode_tilde).flow_in_place(&mut self.s.x_tilde, dt, ig)?;
        self.t = t;
        Ok(())
    }

    fn after_single_jump(&mut self) -> CoupledEventKind {
        if self.s.mode == self.s.mode_tilde {
            self.s.phase = Phase::Merged;
            CoupledEventKind::Merge
        } else {
            self.s.phase = Phase::Independent;
            CoupledEventKind::SingleJump
        }
    }

    fn advance<R: RngCore + ?Sized>(
        &mut self,
        target: f64,
        rng: &mut R,
        mut on_event: impl FnMut(f64, &CoupledState, CoupledEventKind),
    ) -> Result<()> {
        loop {
            match self.clock {
                CoupledClock::Pair(ta, tb) => {
                    let next = ta.min(tb);
                    if next > target {
                        return self.flow_to(target);
                    }
                    self.flow_to(next)?;
                    let g = self.model.generator().expect("constant rates");
                    let kind;
                    if ta <= tb {
                        self.s.mode = next_mode(g, self.s.mode, rng);
                        kind = self.after_single_jump();
                        self.clock = match kind {
                            CoupledEventKind::Merge => CoupledClock::Shared(next + holding_time(g.exit_rate(self.s.mode), rng)),
                            _ => CoupledClock::Pair(next + holding_time(g.exit_rate(self.s.mode), rng), tb),
                        };
                    } else {
                        self.s.mode_tilde = next_mode(g, self.s.mode_tilde, rng);
                        kind = self.after_single_jump();
                        self.clock = match kind {
                            CoupledEventKind::Merge => CoupledClock::Shared(next + holding_time(g.exit_rate(self.s.mode), rng)),
                            _ => CoupledClock::Pair(ta, next + holding_time(g.exit_rate(self.s.mode_tilde), rng)),
                        };
                    }
                    on_event(self.t, &self.s, kind);
                }
                CoupledClock::Shared(next) => {
                    if next > target {
                        return self.flow_to(target);
                    }
                    self.flow_to(next)?;
                    let g = self.model.generator().expect("constant rates");
                    self.s.mode = next_mode(g, self.s.mode, rng);
                    self.s.mode_tilde = self.s.mode;
                    self.clock = CoupledClock::Shared(next + holding_time(g.exit_rate(self.s.mode), rng));
                    on_event(self.t, &self.s, CoupledEventKind::DoubleJump);
                }
                CoupledClock::Thinning { next, bound } => {
                    if next > target {
                        return self.flow_to(target);
                    }
                    self.flow_to(next)?;
                    let kind = self.thinning_trial(bound, rng)?;
                    self.clock = CoupledClock::Thinning { next: next + unit_exponential(rng) / (2.0 * bound), bound };
                    if let Some(kind) = kind {
                        on_event(self.t, &self.s, kind);
                    }
                }
            }
        }
    }

    /// One candidate of the shared clock at rate `2 * bound`.
    fn thinning_trial<R: RngCore + ?Sized>(&mut self, bound: f64, rng: &mut R) -> Result<Option<CoupledEventKind>> {
        let rates = self.model.rates();
        rates.outgoing(&self.s.x, self.s.mode, &mut self.a);
        rates.outgoing(&self.s.x_tilde, self.s.mode_tilde, &mut self.b);
        for list in [&self.a, &self.b] {
            let total: f64 = list.iter().map(|(_, r)| r).sum();
            if total > bound * (1.0 + 1e-9) {
                return Err(Error::BoundViolation { observed: total, bound });
            }
        }
        let n = self.a.len();
        let m = self.b.len();
        self.w.clear();
        match self.s.phase {
            Phase::Independent => {
                self.w.extend(self.a.iter().map(|(_, r)| *r));
                self.w.extend(self.b.iter().map(|(_, r)| *r));
            }
            Phase::Merged => {
                // Same mode, so both lists name the same targets in the same order.
                self.w.extend(self.a.iter().zip(&self.b).map(|((_, r), (_, q))| r.min(*q)));
                self.w.extend(self.a.iter().zip(&self.b).map(|((_, r), (_, q))| (r - q).max(0.0)));
                self.w.extend(self.a.iter().zip(&self.b).map(|((_, r), (_, q))| (q - r).max(0.0)));
            }
        }
        let used: f64 = self.w.iter().sum();
        self.w.push((2.0 * bound - used).max(0.0));
        let Some(k) = categorical(rng, self.w.iter().copied()) else {
            return Ok(None);
        };
        let kind = match self.s.phase {
            Phase::Independent => {
                if k < n {
                    self.s.mode = self.a[k].0;
                } else if k < n + m {
                    self.s.mode_tilde = self.b[k - n].0;
                } else {
                    return Ok(None);
                }
                self.after_single_jump()
            }
            Phase::Merged => {
                if k < n {
                    self.s.mode = self.a[k].0;
                    self.s.mode_tilde = self.a[k].0;
                    CoupledEventKind::DoubleJump
                } else if k < 2 * n {
                    self.s.mode = self.a[k - n].0;
                    self.after_single_jump();
                    CoupledEventKind::Split
                } else if k < 3 * n {
                    self.s.mode_tilde = self.a[k - 2 * n].0;
                    self.after_single_jump();
                    CoupledEventKind::Split
                } else {
                    return Ok(None);
                }
            }
        };
        Ok(Some(kind))
    }
}

fn couple_path<R: RngCore + ?Sized>(
    model: &SwitchedModel,
    z0: &HybridState,
    zt0: &HybridState,
    horizon: f64,
    sample_dt: f64,
    rng: &mut R,
) -> Result<CoupledPath> {
    if !(horizon > 0.0) || !(sample_dt > 0.0) {
        return Err(Error::input("horizon and sample_dt must be positive"));
    }
    let mut cur = CoupledCursor::new(model, z0, zt0, rng)?;
    let mut events = vec![CoupledEvent { t: 0.0, state: cur.s.clone(), kind: CoupledEventKind::Start }];
    let mut k = 1u64;
    loop {
        let s = (k as f64 * sample_dt).min(horizon);
        cur.advance(s, rng, |t, st, kind| events.push(CoupledEvent { t, state: st.clone(), kind }))?;
        let end = s >= horizon;
        let kind = if end { CoupledEventKind::End } else { CoupledEventKind::FlowSample };
        match events.last_mut() {
            Some(prev) if prev.t == s => {
                if end {
                    prev.kind = CoupledEventKind::End;
                }
            }
            _ => events.push(CoupledEvent { t: s, state: cur.s.clone(), kind }),
        }
        if end {
            break;
        }
        k += 1;
    }
    Ok(CoupledPath { events, seed: None, replica: 0 })
}

/// Synchronous coupling of a constant-rate model.
pub fn couple_constant<R: RngCore + ?Sized>(
    model: &SwitchedModel,
    z0: &HybridState,
    zt0: &HybridState,
    horizon: f64,
    sample_dt: f64,
    rng: &mut R,
) -> Result<CoupledPath> {
    if model.generator().is_none() {
        return Err(Error::input("synchronous coupling needs constant rates"));
    }
    couple_path(model, z0, zt0, horizon, sample_dt, rng)
}

/// Merge/defect coupling of a state-dependent model.
pub fn couple_state_dependent<R: RngCore + ?Sized>(
    model: &SwitchedModel,
    z0: &HybridState,
    zt0: &HybridState,
    horizon: f64,
    sample_dt: f64,
    rng: &mut R,
) -> Result<CoupledPath> {
    if model.state_rates().is_none() {
        return Err(Error::input("merge/defect coupling needs state-dependent rates"));
    }
    couple_path(model, z0, zt0, horizon, sample_dt, rng)
}

/// The coupling that matches the model's rate type.
pub fn couple<R: RngCore + ?Sized>(
    model: &SwitchedModel,
    z0: &HybridState,
    zt0: &HybridState,
    horizon: f64,
    sample_dt: f64,
    rng: &mut R,
) -> Result<CoupledPath> {
    couple_path(model, z0, zt0, horizon, sample_dt, rng)
}

/// [`couple`] for replica `index` of an experiment seeded with `master`.
pub fn couple_replica(
    model: &SwitchedModel,
    z0: &HybridState,
    zt0: &HybridState,
    horizon: f64,
    sample_dt: f64,
    master: u64,
    index: usize,
) -> Result<CoupledPath> {
    let mut rng = replica_rng(master, index as u64);
    let mut p = couple(model, z0, zt0, horizon, sample_dt, &mut rng)?;
    p.seed = Some(replica_seed(master, index as u64));
    p.replica = index;
    Ok(p)
}

/// Coupled states at the sorted times of `grid`, without storing the path.
pub fn couple_on_grid<R: RngCore + ?Sized>(
    model: &SwitchedModel,
    z0: &HybridState,
    zt0: &HybridState,
    grid: &[f64],
    rng: &mut R,
) -> Result<Vec<CoupledState>> {
    check_grid(grid)?;
    let mut cur = CoupledCursor::new(model, z0, zt0, rng)?;
    let mut out = Vec::with_capacity(grid.len());
    for &s in grid {
        cur.advance(s, rng, |_, _, _| {})?;
        out.push(cur.s.clone());
    }
    Ok(out)
}

/// State of the companion process on `[0, D] u {D + 1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompanionState {
    Level(f64),
    Top,
}

impl CompanionState {
    pub fn value(&self, d: f64) -> f64 {
        match self {
            CompanionState::Level(u) => *u,
            CompanionState::Top => d + 1.0,
        }
    }
}

/// Time to the jump to the top from level `u` for a unit-exponential level
/// `e`: the hazard `kappa * u e^{-alpha s}` integrates to
/// `(kappa u / alpha)(1 - e^{-alpha s})`, which reaches `e` at
/// `-(1/alpha) ln(1 - alpha e / (kappa u))`, or never when
/// `e >= kappa u / alpha`.
pub fn companion_jump_time_from(u: f64, kappa_lip: f64, alpha: f64, e: f64) -> f64 {
    let scale = kappa_lip * u;
    if !(scale > 0.0) || e * alpha >= scale {
        return f64::INFINITY;
    }
    -(-alpha * e / scale).ln_1p() / alpha
}

/// First jump time of the companion process started at `D`.
pub fn companion_jump_time<R: RngCore + ?Sized>(d: f64, kappa_lip: f64, alpha: f64, rng: &mut R) -> f64 {
    companion_jump_time_from(d, kappa_lip, alpha, unit_exponential(rng))
}

/// `P(T = inf) = exp(-D kappa / alpha)` for the start at `D`.
pub fn companion_never_jump_probability(d: f64, kappa_lip: f64, alpha: f64) -> f64 {
    (-d * kappa_lip / alpha).exp()
}

/// CDF of the first jump time from `D` conditioned on it being finite:
/// `(1 - exp(-(D kappa / alpha)(1 - e^{-alpha t}))) / (1 - exp(-D kappa / alpha))`.
pub fn companion_finite_cdf(d: f64, kappa_lip: f64, alpha: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let c = d * kappa_lip / alpha;
    let y = -(-alpha * t).exp_m1();
    (-c * y).exp_m1() / (-c).exp_m1()
}

fn check_companion(d: f64, alpha: f64, kappa_lip: f64, b: f64) -> Result<()> {
    if !(d > 0.0) || !(alpha > 0.0) || !(kappa_lip >= 0.0) || !(b > 0.0) {
        return Err(Error::input(format!(
            "companion process needs D, alpha, b > 0 and kappa >= 0 (D = {d}, alpha = {alpha}, kappa = {kappa_lip}, b = {b})"
        )));
    }
    Ok(())
}

/// Event sequence `(t, U_t)` of the companion process on `[0, horizon]`:
/// the start, every jump (state after the jump) and the end.
pub fn sample_companion<R: RngCore + ?Sized>(
    d: f64,
    alpha: f64,
    kappa_lip: f64,
    b: f64,
    u0: CompanionState,
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<(f64, CompanionState)>> {
    check_companion(d, alpha, kappa_lip, b)?;
    let mut out = vec![(0.0, u0)];
    let mut t = 0.0;
    let mut state = u0;
    loop {
        match state {
            CompanionState::Level(u) => {
                let s = companion_jump_time_from(u, kappa_lip, alpha, unit_exponential(rng));
                if t + s > horizon {
                    out.push((horizon, CompanionState::Level(u * (-alpha * (horizon - t)).exp())));
                    return Ok(out);
                }
                t += s;
                state = CompanionState::Top;
            }
            CompanionState::Top => {
                let s = holding_time(b, rng);
                if t + s > horizon {
                    out.push((horizon, CompanionState::Top));
                    return Ok(out);
                }
                t += s;
                state = CompanionState::Level(d);
            }
        }
        out.push((t, state));
    }
}

/// Values `U_t` at the sorted times of `grid`.
pub fn companion_on_grid<R: RngCore + ?Sized>(
    d: f64,
    alpha: f64,
    kappa_lip: f64,
    b: f64,
    u0: CompanionState,
    grid: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_companion(d, alpha, kappa_lip, b)?;
    check_grid(grid)?;
    let mut out = Vec::with_capacity(grid.len());
    let mut t = 0.0;
    let mut state = u0;
    let mut k = 0;
    while k < grid.len() {
        let next = match state {
            CompanionState::Level(u) => t + companion_jump_time_from(u, kappa_lip, alpha, unit_exponential(rng)),
            CompanionState::Top => t + holding_time(b, rng),
        };
        while k < grid.len() && grid[k] < next {
            out.push(match state {
                CompanionState::Level(u) => u * (-alpha * (grid[k] - t)).exp(),
                CompanionState::Top => d + 1.0,
            });
            k += 1;
        }
        t = next;
        state = match state {
            CompanionState::Level(_) => CompanionState::Top,
            CompanionState::Top => CompanionState::Level(d),
        };
    }
    Ok(out)
}

/// Rate `gamma` and prefactor slope `c` of the companion envelope:
/// `gamma` is the smaller root of `xi^2 - (alpha + b) xi + p alpha b` and
/// `c = alpha / (alpha + gamma) * e p alpha b / sqrt(disc)`.
pub fn gamma_c_constants(alpha: f64, b: f64, p: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0) || !(b > 0.0) || !(p > 0.0 && p <= 1.0) {
        return Err(Error::input(format!("need alpha, b > 0 and 0 < p <= 1 (alpha = {alpha}, b = {b}, p = {p})")));
    }
    let sum = alpha + b;
    let disc = sum * sum - 4.0 * p * alpha * b;
    if !(disc > 0.0) {
        return Err(Error::DoubleRoot { discriminant: disc });
    }
    let root = disc.sqrt();
    // Product of the roots is p alpha b; this form avoids cancellation.
    let gamma = 2.0 * p * alpha * b / (sum + root);
    let c = alpha / (alpha + gamma) * std::f64::consts::E * p * alpha * b / root;
    Ok((gamma, c))
}

/// Closed-form bound on `E(U_t | U_0 = D)`:
/// `(D + (D + 1) (p alpha b e / sqrt(disc)) alpha t / (alpha + gamma)) exp(-alpha t / (1 + alpha / gamma))`
/// with `p = exp(-D kappa / alpha)`.
pub fn companion_mean_bound(d: f64, alpha: f64, b: f64, kappa_lip: f64, t: f64) -> Result<f64> {
    check_companion(d, alpha, kappa_lip, b)?;
    let p = companion_never_jump_probability(d, kappa_lip, alpha);
    let (gamma, c) = gamma_c_constants(alpha, b, p)?;
    // c * t already carries alpha / (alpha + gamma).
    Ok((d + (d + 1.0) * c * t) * (-alpha * gamma * t / (alpha + gamma)).exp())
}

/// `b` for a general mode set: the coalescence rate of two independent
/// chains whose rates all sit at the lower bound `a_min` on the support of
/// the given targets. Two modes give `2 a_min`.
pub fn default_companion_b(model: &SwitchedModel) -> Result<f64> {
    let s = model
        .state_rates()
        .ok_or_else(|| Error::input("companion b needs state-dependent rates"))?;
    let n = model.n_modes();
    let x = vec![0.0; model.dim()];
    let mut rows = vec![vec![0.0; n]; n];
    let mut buf = Vec::new();
    for (i, row) in rows.iter_mut().enumerate() {
        s.rates.outgoing(&x, i, &mut buf);
        for (j, _) in &buf {
            row[*j] = s.lower;
        }
    }
    let g = crate::switching::SwitchGenerator::from_rates(&rows)?;
    Ok(crate::switching::coalescence_exact(&g)?.rho)
}

/// `|x|` of the first copy; used by confinement checks.
pub fn first_norm(s: &CoupledState) -> f64 {
    norm(&s.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::VectorField;
    use crate::model::{FnRates, StateRates};
    use crate::rng::rng_from_seed;
    use crate::stats::ks_statistic;
    use crate::switching::SwitchGenerator;

    fn constant_model() -> SwitchedModel {
        let f0 = VectorField::linear_attractor(1.0, &[0.0]).unwrap();
        let f1 = VectorField::linear_attractor(1.0, &[1.0]).unwrap();
        SwitchedModel::from_fields(vec![f0, f1], Rates::Constant(SwitchGenerator::two_state(1.0, 2.0).unwrap())).unwrap()
    }

    fn sine_model(amp: f64) -> SwitchedModel {
        let f = FnRates::new(2, move |x, i, _| if i == 0 { 1.0 + amp * x[0].sin() } else { 1.0 + amp * x[0].cos() });
        let f0 = VectorField::linear_attractor(1.0, &[-1.0]).unwrap();
        let f1 = VectorField::linear_attractor(1.0, &[1.0]).unwrap();
        let r = StateRates::new(f, 1.0 - amp, amp, 1.0 + amp).unwrap();
        SwitchedModel::from_fields(vec![f0, f1], Rates::StateDependent(r)).unwrap()
    }

    #[test]
    fn identical_starts_stay_identical() {
        let mut rng = rng_from_seed(1);
        let z = HybridState::new(vec![0.3], 0);
        for m in [constant_model(), sine_model(0.4)] {
            let p = couple(&m, &z, &z, 20.0, 0.5, &mut rng).unwrap();
            assert!(p.events.iter().all(|e| e.state.phase == Phase::Merged));
            assert!(delta_process(&p).iter().all(|(_, d)| *d == 0.0));
        }
    }

    #[test]
    fn same_mode_contracts_exactly() {
        let f = VectorField::linear_attractor(0.7, &[0.0]).unwrap();
        let g = SwitchGenerator::from_matrix(nalgebra::DMatrix::zeros(1, 1)).unwrap();
        let m = SwitchedModel::from_fields(vec![f], Rates::Constant(g)).unwrap();
        let mut rng = rng_from_seed(2);
        let p = couple_constant(&m, &HybridState::new(vec![2.0], 0), &HybridState::new(vec![-1.0], 0), 5.0, 0.5, &mut rng).unwrap();
        for e in &p.events {
            assert!((e.state.distance() - 3.0 * (-0.7 * e.t).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_coupling_merges_for_good() {
        let m = constant_model();
        let mut rng = rng_from_seed(3);
        for _ in 0..200 {
            let p = couple_constant(&m, &HybridState::new(vec![0.0], 0), &HybridState::new(vec![1.0], 1), 10.0, 0.5, &mut rng).unwrap();
            let mut merged = false;
            for e in &p.events {
                if merged {
                    assert_eq!(e.state.phase, Phase::Merged);
                    assert_eq!(e.state.mode, e.state.mode_tilde);
                }
                merged |= e.state.phase == Phase::Merged;
                assert!(e.kind != CoupledEventKind::Split);
            }
        }
    }

    #[test]
    fn merge_time_tail_is_sum_of_rates() {
        let m = constant_model();
        let n = 20_000;
        let grid = [0.5, 1.0, 1.5];
        let mut surv = [0usize; 3];
        for k in 0..n {
            let mut rng = replica_rng(4, k);
            let s = couple_on_grid(&m, &HybridState::new(vec![0.0], 0), &HybridState::new(vec![1.0], 1), &grid, &mut rng).unwrap();
            for (c, st) in surv.iter_mut().zip(&s) {
                *c += (st.phase == Phase::Independent) as usize;
            }
        }
        for (c, t) in surv.iter().zip(grid) {
            let p = (-3.0 * t).exp();
            let emp = *c as f64 / n as f64;
            assert!(emp <= p + 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "t {t}: {emp} vs {p}");
        }
    }

    #[test]
    fn constant_rates_never_split() {
        let f = FnRates::new(2, |_, _, _| 1.0);
        let f0 = VectorField::linear_attractor(1.0, &[-1.0]).unwrap();
        let f1 = VectorField::linear_attractor(1.0, &[1.0]).unwrap();
        let m = SwitchedModel::from_fields(vec![f0, f1], Rates::StateDependent(StateRates::new(f, 1.0, 0.0, 1.0).unwrap())).unwrap();
        let mut rng = rng_from_seed(5);
        let p = couple_state_dependent(&m, &HybridState::new(vec![-1.0], 0), &HybridState::new(vec![1.0], 0), 50.0, 1.0, &mut rng).unwrap();
        assert!(p.events.iter().all(|e| e.kind != CoupledEventKind::Split));
        assert!(p.events.iter().all(|e| e.state.phase == Phase::Merged));
    }

    #[test]
    fn split_raises_delta_by_one_and_merged_delta_decays() {
        let m = sine_model(0.4);
        let mut rng = rng_from_seed(6);
        let mut splits = 0;
        for _ in 0..300 {
            let p = couple_state_dependent(&m, &HybridState::new(vec![-1.0], 0), &HybridState::new(vec![1.0], 0), 20.0, 0.25, &mut rng).unwrap();
            for w in p.events.windows(2) {
                let (a, b) = (&w[0], &w[1]);
                if b.kind == CoupledEventKind::Split {
                    splits += 1;
                    assert!((b.state.delta() - b.state.distance() - 1.0).abs() < 1e-15);
                    assert_eq!(a.state.phase, Phase::Merged);
                }
                if a.state.phase == Phase::Merged && b.kind == CoupledEventKind::FlowSample {
                    let bound = a.state.distance() * (-(b.t - a.t)).exp();
                    assert!(b.state.distance() <= bound * (1.0 + 1e-12) + 1e-15);
                }
            }
        }
        assert!(splits > 0);
    }

    #[test]
    fn split_hazard_is_bounded_by_lipschitz_distance() {
        // Merged pair at fixed distance delta: count splits over a short window.
        let m = sine_model(0.4);
        let delta = 0.5;
        let n = 40_000;
        let dt = 0.02;
        let mut splits = 0usize;
        for k in 0..n {
            let mut rng = replica_rng(7, k);
            let s = couple_on_grid(&m, &HybridState::new(vec![-0.25], 0), &HybridState::new(vec![0.25], 0), &[dt], &mut rng).unwrap();
            splits += (s[0].mode != s[0].mode_tilde) as usize;
        }
        let hazard = splits as f64 / n as f64 / dt;
        let se = (splits as f64).sqrt() / n as f64 / dt;
        assert!(hazard <= 0.4 * delta + 3.0 * se, "hazard {hazard}");
    }

    #[test]
    fn companion_examples() {
        let mut rng = rng_from_seed(8);
        assert_eq!(companion_jump_time(2.0, 0.0, 1.0, &mut rng), f64::INFINITY);
        let z = companion_on_grid(2.0, 1.0, 1.0, 2.0, CompanionState::Level(0.0), &[1.0, 5.0], &mut rng).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
        let u = companion_on_grid(2.0, 0.5, 0.0, 2.0, CompanionState::Level(2.0), &[0.0, 1.0, 3.0], &mut rng).unwrap();
        for (v, t) in u.iter().zip([0.0f64, 1.0, 3.0]) {
            assert!((v - 2.0 * (-0.5 * t).exp()).abs() < 1e-15);
        }
        // From the top: Exp(b) holding, then exactly D.
        let n = 100_000;
        let mut holds = Vec::with_capacity(n);
        for _ in 0..n {
            let ev = sample_companion(2.0, 1.0, 1.0, 4.0, CompanionState::Top, 1e3, &mut rng).unwrap();
            assert_eq!(ev[1].1, CompanionState::Level(2.0));
            holds.push(ev[1].0);
        }
        let m = crate::stats::MeanEstimate::from_samples(&holds).unwrap();
        assert!(m.z_against(0.25) < 3.0);
    }

    #[test]
    fn companion_first_jump_law() {
        let mut rng = rng_from_seed(9);
        let n = 1_000_000;
        let mut finite = Vec::new();
        for _ in 0..n {
            let t = companion_jump_time(2.0, 1.0, 1.0, &mut rng);
            if t.is_finite() {
                finite.push(t);
            }
        }
        let p = (-2.0f64).exp();
        assert!((p - 0.1353352832).abs() < 1e-9);
        let emp = 1.0 - finite.len() as f64 / n as f64;
        assert!((emp - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt());
        finite.truncate(100_000);
        let ks = ks_statistic(&finite, |t| companion_finite_cdf(2.0, 1.0, 1.0, t)).unwrap();
        assert!(ks < 0.01, "ks {ks}");
    }

    #[test]
    fn gamma_c_examples() {
        let (g, c) = gamma_c_constants(1.0, 2.0, 0.5).unwrap();
        let g_direct = (3.0 - 5f64.sqrt()) / 2.0;
        assert!((g - g_direct).abs() < 1e-15);
        assert!((g - 0.381966).abs() < 1e-6);
        // Independent path: Newton on xi^2 - 3 xi + 1 from 0, then c by hand.
        let mut xi = 0.0f64;
        for _ in 0..50 {
            xi -= (xi * xi - 3.0 * xi + 1.0) / (2.0 * xi - 3.0);
        }
        assert!((g - xi).abs() < 1e-14);
        let c_hand = 1.0 / (1.0 + xi) * std::f64::consts::E / 5f64.sqrt();
        assert!((c - c_hand).abs() < 1e-14);
        assert!((c - 0.8796545).abs() < 1e-6, "c = {c}");

        assert!(gamma_c_constants(1.0, 2.0, 1e-12).unwrap().0 < 1e-11);
        assert!(matches!(gamma_c_constants(1.5, 1.5, 1.0), Err(Error::DoubleRoot { .. })));
    }

    #[test]
    fn companion_bound_examples() {
        assert!(companion_mean_bound(2.0, 1.0, 2.0, 1.0, 0.0).unwrap() >= 2.0);
        // kappa = 0: p = 1 and gamma = min(alpha, b).
        let p = companion_never_jump_probability(2.0, 0.0, 1.0);
        assert_eq!(p, 1.0);
        assert!((gamma_c_constants(1.0, 3.0, p).unwrap().0 - 1.0).abs() < 1e-15);
        assert!((gamma_c_constants(3.0, 1.0, p).unwrap().0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn domination_of_the_jump_time_cdf() {
        for (d, k, a) in [(2.0, 1.0, 1.0), (0.1, 5.0, 0.3), (7.0, 0.01, 4.0)] {
            for i in 0..1000 {
                let t = i as f64 * 0.01;
                assert!(companion_finite_cdf(d, k, a, t) >= -(-a * t).exp_m1() - 1e-12);
            }
        }
    }

    #[test]
    fn default_b_two_modes() {
        let m = sine_model(0.4);
        assert!((default_companion_b(&m).unwrap() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn csv_has_fixed_columns() {
        let m = constant_model();
        let mut rng = rng_from_seed(10);
        let p = couple(&m, &HybridState::new(vec![0.0], 0), &HybridState::new(vec![1.0], 1), 1.0, 0.5, &mut rng).unwrap();
        let csv = coupled_paths_to_csv(&[p], 1);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x_1,xt_1,mode,mode_tilde,phase,delta,event_kind,replica");
        assert!(lines.all(|l| l.split(',').count() == 9));
    }
}
