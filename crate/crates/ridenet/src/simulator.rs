//! Event-driven simulation of the finite-fleet Markov chain.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::model::{
    largest_remainder, validate, FluidState, Matrix, ModelError, NetworkParams, RoutingMatrix,
    Scenario, Schedule, SystemState, TravelTimeMode,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("policy `{policy}` chose region {choice} at t = {time} (only {regions} regions)")]
    InvalidDecision {
        policy: String,
        choice: usize,
        regions: usize,
        time: f64,
    },
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Chooses where a car that just dropped a passenger at `drop` goes next (`drop` = stay).
pub trait RoutingPolicy: Send + Sync {
    fn decide(
        &self,
        drop: usize,
        state: &SystemState,
        params: &NetworkParams,
        time: f64,
        rng: &mut dyn RngCore,
    ) -> usize;

    fn name(&self) -> String;
}

fn sample_row(q: &Matrix, row: usize, rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let last = (0..q.ncols()).rev().find(|&k| q[(row, k)] > 0.0).unwrap_or(row);
    for k in 0..q.ncols() {
        acc += q[(row, k)];
        if u < acc {
            return k;
        }
    }
    last
}

fn pick_uniform(options: &[usize], rng: &mut dyn RngCore) -> usize {
    options[rng.gen_range(0..options.len())]
}

/// Indices (excluding `skip`) whose score is within relative `1e-12` of the minimum.
fn argmin_excluding(scores: &[f64], skip: usize) -> (f64, Vec<usize>) {
    let best = scores
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != skip)
        .map(|(_, s)| *s)
        .fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * best.abs().max(1.0);
    let ties = (0..scores.len())
        .filter(|&k| k != skip && scores[k] <= best + tol)
        .collect();
    (best, ties)
}

/// State-independent routing: sample `k ~ Q[drop, .]`.
#[derive(Debug, Clone)]
pub struct StaticPolicy {
    pub q: RoutingMatrix,
}

impl RoutingPolicy for StaticPolicy {
    fn decide(&self, drop: usize, _: &SystemState, _: &NetworkParams, _: f64, rng: &mut dyn RngCore) -> usize {
        sample_row(self.q.matrix(), drop, rng)
    }

    fn name(&self) -> String {
        "static".into()
    }
}

pub fn policy_static(q: RoutingMatrix) -> StaticPolicy {
    StaticPolicy { q }
}

/// Join-the-least-congested-region with threshold `eta`; congestion of region `k` is
/// (idle at `k` + empty cars heading to `k`) / `lambda_k`.
#[derive(Debug, Clone)]
pub struct JlcrPolicy {
    pub eta: f64,
}

impl RoutingPolicy for JlcrPolicy {
    fn decide(&self, drop: usize, state: &SystemState, params: &NetworkParams, _: f64, rng: &mut dyn RngCore) -> usize {
        let r = state.regions();
        if r == 1 {
            return drop;
        }
        let congestion: Vec<f64> = (0..r)
            .map(|k| state.empty_toward(k) as f64 / params.lambda[k])
            .collect();
        let (best, ties) = argmin_excluding(&congestion, drop);
        if (1.0 - self.eta) * congestion[drop] <= best {
            drop
        } else {
            pick_uniform(&ties, rng)
        }
    }

    fn name(&self) -> String {
        format!("jlcr:{}", self.eta)
    }
}

pub fn policy_jlcr(eta: f64) -> Result<JlcrPolicy, SimError> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(SimError::Config(format!("jlcr threshold {eta} outside [0, 1]")));
    }
    Ok(JlcrPolicy { eta })
}

/// Shortest-wait: go where the estimated time until the next pickup is smallest.
#[derive(Debug, Clone, Default)]
pub struct ShortestWaitPolicy;

impl ShortestWaitPolicy {
    /// Estimated wait for a car dropped at `i` that drives to `j` (`j != i`).
    pub fn estimated_wait(i: usize, j: usize, state: &SystemState, params: &NetworkParams) -> f64 {
        let r = state.regions();
        let n = params.n_cars as f64;
        let t = 1.0 / params.mu[(i, j)];
        let arriving: f64 = (0..r)
            .filter(|&k| k != j)
            .map(|k| params.mu[(k, j)] * state.e_count[(k, j)] as f64)
            .sum();
        let queue = state.e_count[(j, j)] as f64 + t * arriving - n * params.lambda[j] * t;
        t + queue.max(0.0) / (n * params.lambda[j])
    }
}

impl RoutingPolicy for ShortestWaitPolicy {
    fn decide(&self, drop: usize, state: &SystemState, params: &NetworkParams, _: f64, rng: &mut dyn RngCore) -> usize {
        let r = state.regions();
        if r == 1 {
            return drop;
        }
        let stay = state.e_count[(drop, drop)] as f64 / (params.n_cars as f64 * params.lambda[drop]);
        let waits: Vec<f64> = (0..r)
            .map(|j| if j == drop { f64::INFINITY } else { Self::estimated_wait(drop, j, state, params) })
            .collect();
        let (best, ties) = argmin_excluding(&waits, drop);
        if stay <= best {
            drop
        } else {
            pick_uniform(&ties, rng)
        }
    }

    fn name(&self) -> String {
        "sw".into()
    }
}

pub fn policy_sw() -> ShortestWaitPolicy {
    ShortestWaitPolicy
}

/// Time-indexed static routing: uses the latest table entry at or before the decision time.
#[derive(Debug, Clone)]
pub struct LookaheadPolicy {
    table: Vec<(f64, RoutingMatrix)>,
}

impl LookaheadPolicy {
    pub fn active(&self, time: f64) -> &RoutingMatrix {
        let k = self.table.partition_point(|(t, _)| *t <= time);
        &self.table[k.saturating_sub(1)].1
    }

    pub fn table(&self) -> &[(f64, RoutingMatrix)] {
        &self.table
    }
}

impl RoutingPolicy for LookaheadPolicy {
    fn decide(&self, drop: usize, _: &SystemState, _: &NetworkParams, time: f64, rng: &mut dyn RngCore) -> usize {
        sample_row(self.active(time).matrix(), drop, rng)
    }

    fn name(&self) -> String {
        format!("lookahead[{}]", self.table.len())
    }
}

pub fn policy_lookahead(table: Vec<(f64, RoutingMatrix)>) -> Result<LookaheadPolicy, SimError> {
    if table.is_empty() {
        return Err(SimError::Config("lookahead table is empty".into()));
    }
    if table.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(SimError::Config("lookahead table is not time-sorted".into()));
    }
    Ok(LookaheadPolicy { table })
}

/// All cars idle, spread in proportion to `lambda` (largest remainder rounding).
pub fn initial_state_proportional(params: &NetworkParams) -> SystemState {
    let r = params.regions();
    let counts = largest_remainder(&params.lambda, params.n_cars);
    let mut s = SystemState::empty(r);
    for (i, c) in counts.into_iter().enumerate() {
        s.e_count[(i, i)] = c;
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Proportional,
    /// Rounded `N * (e, f)`.
    Fluid(FluidState),
    State(SystemState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Simulated time measured from the scenario start.
    pub horizon: f64,
    /// Defaults to 10% of the horizon.
    pub warmup: Option<f64>,
    pub seed: u64,
    pub replications: usize,
    /// Overrides the scenario's travel-time law.
    pub travel_time_mode: Option<TravelTimeMode>,
    pub initial: InitialCondition,
    /// Width of the request/fulfillment breakdown bins, from the scenario start.
    pub report_interval: Option<f64>,
}

impl SimConfig {
    pub fn new(horizon: f64, seed: u64, replications: usize) -> Self {
        SimConfig {
            horizon,
            warmup: None,
            seed,
            replications,
            travel_time_mode: None,
            initial: InitialCondition::Proportional,
            report_interval: None,
        }
    }

    pub fn warmup(&self) -> f64 {
        self.warmup.unwrap_or(0.1 * self.horizon)
    }

    fn check(&self) -> Result<(), SimError> {
        let w = self.warmup();
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SimError::Config(format!("horizon {} must be positive", self.horizon)));
        }
        if !(0.0..self.horizon).contains(&w) {
            return Err(SimError::Config(format!("warmup {w} must lie in [0, horizon)")));
        }
        if self.replications == 0 {
            return Err(SimError::Config("at least one replication required".into()));
        }
        if let Some(b) = self.report_interval {
            if !(b > 0.0) {
                return Err(SimError::Config(format!("report interval {b} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinMetrics {
    pub start: f64,
    pub end: f64,
    pub requests: u64,
    pub fulfilled: u64,
}

impl BinMetrics {
    pub fn fraction(&self) -> f64 {
        ratio(self.fulfilled, self.requests)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Measurements from one replication; counts exclude the warmup period.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMetrics {
    pub requests: Vec<u64>,
    pub fulfilled: Vec<u64>,
    pub fulfilled_fraction: Vec<f64>,
    /// Time-average of `1(E_ii > 0)`.
    pub idle_positive_fraction: Vec<f64>,
    /// Time-average `E / N`.
    pub mean_e: Matrix,
    /// Time-average `F / N`.
    pub mean_f: Matrix,
    pub utility: f64,
    pub bins: Vec<BinMetrics>,
    /// Routing decisions `drop region -> chosen region`.
    pub decisions: DMatrix<u64>,
    pub events: u64,
}

impl SimMetrics {
    pub fn total_fraction(&self) -> f64 {
        ratio(self.fulfilled.iter().sum(), self.requests.iter().sum())
    }
}

/// Mean, sample standard deviation and 95% Student-t half-width across replications.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std: f64,
    pub half_width: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Estimate {
                mean,
                std: 0.0,
                half_width: f64::INFINITY,
            };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        let t = StudentsT::new(0.0, 1.0, n - 1.0)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        Estimate {
            mean,
            std,
            half_width: t * std / n.sqrt(),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        (x - self.mean).abs() <= self.half_width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub policy: String,
    pub runs: Vec<SimMetrics>,
    pub utility: Estimate,
    pub fulfilled_fraction: Vec<Estimate>,
    /// Per-bin fulfilled fraction across replications.
    pub bins: Vec<(f64, f64, Estimate)>,
}

impl SimReport {
    fn from_runs(policy: String, runs: Vec<SimMetrics>) -> Self {
        let utility = Estimate::from_samples(&runs.iter().map(|m| m.utility).collect::<Vec<_>>());
        let r = runs[0].requests.len();
        let fulfilled_fraction = (0..r)
            .map(|i| Estimate::from_samples(&runs.iter().map(|m| m.fulfilled_fraction[i]).collect::<Vec<_>>()))
            .collect();
        let bins = (0..runs[0].bins.len())
            .map(|b| {
                let xs: Vec<f64> = runs.iter().map(|m| m.bins[b].fraction()).collect();
                (runs[0].bins[b].start, runs[0].bins[b].end, Estimate::from_samples(&xs))
            })
            .collect();
        SimReport {
            policy,
            runs,
            utility,
            fulfilled_fraction,
            bins,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Trip {
    time: f64,
    seq: u64,
    from: usize,
    to: usize,
    full: bool,
}

impl PartialEq for Trip {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Trip {}

impl PartialOrd for Trip {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Trip {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

/// Time integrals of cell counts, updated lazily when a cell changes.
struct Occupancy {
    from: f64,
    area: Vec<f64>,
    last: Vec<f64>,
}

impl Occupancy {
    fn new(cells: usize, from: f64, start: f64) -> Self {
        Occupancy {
            from,
            area: vec![0.0; cells],
            last: vec![start; cells],
        }
    }

    fn touch(&mut self, cell: usize, value: f64, now: f64) {
        let a = self.last[cell].max(self.from);
        let b = now.max(self.from);
        if b > a {
            self.area[cell] += value * (b - a);
        }
        self.last[cell] = now;
    }
}

struct Engine<'a> {
    schedule: &'a Schedule,
    static_params: bool,
    policy: &'a dyn RoutingPolicy,
    config: &'a SimConfig,
    mode: TravelTimeMode,
    rng: ChaCha8Rng,
    state: SystemState,
    heap: BinaryHeap<Reverse<Trip>>,
    seq: u64,
    slot: usize,
    start: f64,
    warm_abs: f64,
    end_abs: f64,
    occ_e: Occupancy,
    occ_f: Occupancy,
    occ_idle: Occupancy,
    requests: Vec<u64>,
    fulfilled: Vec<u64>,
    bins: Vec<BinMetrics>,
    decisions: DMatrix<u64>,
    events: u64,
}

impl<'a> Engine<'a> {
    fn params(&self) -> &'a NetworkParams {
        &self.schedule.slots[self.slot].params
    }

    fn travel_time(&mut self, i: usize, j: usize) -> f64 {
        let mu = self.params().mu[(i, j)];
        match self.mode {
            TravelTimeMode::Exponential => Exp::new(mu).expect("positive rate").sample(&mut self.rng),
            TravelTimeMode::Deterministic => 1.0 / mu,
        }
    }

    fn next_arrival(&mut self, now: f64) -> f64 {
        let rate = self.state.total_cars() as f64 * self.params().total_lambda();
        if rate > 0.0 {
            now + Exp::new(rate).expect("positive rate").sample(&mut self.rng)
        } else {
            f64::INFINITY
        }
    }

    fn set_e(&mut self, i: usize, j: usize, delta: isize, now: f64) {
        let r = self.state.regions();
        let old = self.state.e_count[(i, j)];
        self.occ_e.touch(i * r + j, old as f64, now);
        if i == j {
            self.occ_idle.touch(i, if old > 0 { 1.0 } else { 0.0 }, now);
        }
        self.state.e_count[(i, j)] = old.checked_add_signed(delta).expect("car counts stay nonnegative");
    }

    fn set_f(&mut self, i: usize, j: usize, delta: isize, now: f64) {
        let r = self.state.regions();
        let old = self.state.f_count[(i, j)];
        self.occ_f.touch(i * r + j, old as f64, now);
        self.state.f_count[(i, j)] = old.checked_add_signed(delta).expect("car counts stay nonnegative");
    }

    fn push(&mut self, time: f64, from: usize, to: usize, full: bool) {
        self.seq += 1;
        self.heap.push(Reverse(Trip {
            time,
            seq: self.seq,
            from,
            to,
            full,
        }));
    }

    fn bin_index(&self, now: f64) -> Option<usize> {
        let width = self.config.report_interval?;
        let k = ((now - self.start) / width).floor() as usize;
        (k < self.bins.len()).then_some(k)
    }

    fn arrival(&mut self, now: f64) {
        let params = self.params();
        let r = params.regions();
        let u: f64 = self.rng.gen::<f64>() * params.total_lambda();
        let mut acc = 0.0;
        let mut i = r - 1;
        for k in 0..r {
            acc += params.lambda[k];
            if u < acc {
                i = k;
                break;
            }
        }
        let served = self.state.e_count[(i, i)] > 0;
        if now >= self.warm_abs {
            self.requests[i] += 1;
            self.fulfilled[i] += served as u64;
            if let Some(b) = self.bin_index(now) {
                self.bins[b].requests += 1;
                self.bins[b].fulfilled += served as u64;
            }
        }
        if served {
            let j = sample_row(&params.p, i, &mut self.rng);
            self.set_e(i, i, -1, now);
            self.set_f(i, j, 1, now);
            let dt = self.travel_time(i, j);
            self.push(now + dt, i, j, true);
        }
    }

    fn trip_end(&mut self, trip: Trip) -> Result<(), SimError> {
        let now = trip.time;
        let (i, j) = (trip.from, trip.to);
        if !trip.full {
            self.set_e(i, j, -1, now);
            self.set_e(j, j, 1, now);
            return Ok(());
        }
        self.set_f(i, j, -1, now);
        self.state.time = now;
        let params = self.params();
        let k = self.policy.decide(j, &self.state, params, now, &mut self.rng);
        let r = self.state.regions();
        if k >= r {
            return Err(SimError::InvalidDecision {
                policy: self.policy.name(),
                choice: k,
                regions: r,
                time: now,
            });
        }
        self.decisions[(j, k)] += 1;
        if k == j {
            self.set_e(j, j, 1, now);
        } else {
            self.set_e(j, k, 1, now);
            let dt = self.travel_time(j, k);
            self.push(now + dt, j, k, false);
        }
        Ok(())
    }

    fn run(mut self) -> Result<SimMetrics, SimError> {
        let mut arrival = self.next_arrival(self.start);
        loop {
            let boundary = if self.slot + 1 < self.schedule.slots.len() {
                self.schedule.slots[self.slot].end
            } else {
                f64::INFINITY
            };
            let trip = self.heap.peek().map_or(f64::INFINITY, |t| t.0.time);
            let next = arrival.min(trip).min(boundary);
            if next >= self.end_abs {
                break;
            }
            self.events += 1;
            if next == boundary {
                self.slot += 1;
                arrival = self.next_arrival(boundary);
            } else if next == trip {
                let Reverse(t) = self.heap.pop().expect("peeked");
                self.trip_end(t)?;
            } else {
                self.arrival(arrival);
                arrival = self.next_arrival(arrival);
            }
        }
        self.finish()
    }

    fn finish(mut self) -> Result<SimMetrics, SimError> {
        let end = self.end_abs;
        let r = self.state.regions();
        for i in 0..r {
            for j in 0..r {
                self.occ_e.touch(i * r + j, self.state.e_count[(i, j)] as f64, end);
                self.occ_f.touch(i * r + j, self.state.f_count[(i, j)] as f64, end);
            }
            self.occ_idle
                .touch(i, if self.state.e_count[(i, i)] > 0 { 1.0 } else { 0.0 }, end);
        }
        let window = end - self.warm_abs;
        let n = self.state.total_cars().max(1) as f64;
        let scale = 1.0 / (window * n);
        let mean_e = Matrix::from_fn(r, r, |i, j| self.occ_e.area[i * r + j] * scale);
        let mean_f = Matrix::from_fn(r, r, |i, j| self.occ_f.area[i * r + j] * scale);
        let fulfilled_fraction: Vec<f64> = (0..r).map(|i| ratio(self.fulfilled[i], self.requests[i])).collect();
        let utility = if self.static_params {
            let params = &self.schedule.slots[0].params;
            crate::fluid_opt::utility(&fulfilled_fraction, params, &params.rewards_or_default())
        } else {
            ratio(self.fulfilled.iter().sum(), self.requests.iter().sum())
        };
        Ok(SimMetrics {
            requests: self.requests,
            fulfilled: self.fulfilled,
            fulfilled_fraction,
            idle_positive_fraction: self.occ_idle.area.iter().map(|a| a / window).collect(),
            mean_e,
            mean_f,
            utility,
            bins: self.bins,
            decisions: self.decisions,
            events: self.events,
        })
    }
}

fn check_params(params: &NetworkParams) -> Result<(), SimError> {
    let v: Vec<_> = validate(params).into_iter().filter(|v| v.field != "n_cars").collect();
    if v.is_empty() {
        Ok(())
    } else {
        Err(ModelError::Invalid(v).into())
    }
}

/// One replication with seed `config.seed + replication`.
pub fn simulate_once(
    scenario: &Scenario,
    policy: &dyn RoutingPolicy,
    config: &SimConfig,
    replication: usize,
) -> Result<SimMetrics, SimError> {
    config.check()?;
    let owned;
    let (schedule, static_params) = match scenario {
        Scenario::Static(p) => {
            owned = Schedule::constant(p.clone(), 0.0, config.horizon);
            (&owned, true)
        }
        Scenario::Scheduled(s) => (s, false),
    };
    for slot in &schedule.slots {
        check_params(&slot.params)?;
    }
    let first = &schedule.slots[0].params;
    let r = first.regions();
    let state = match &config.initial {
        InitialCondition::Proportional => initial_state_proportional(first),
        InitialCondition::Fluid(s) => s.to_counts(first.n_cars),
        InitialCondition::State(s) => s.clone(),
    };
    if state.regions() != r || state.total_cars() != first.n_cars {
        return Err(SimError::Config(format!(
            "initial state has {} cars in {} regions, scenario has {} cars in {r}",
            state.total_cars(),
            state.regions(),
            first.n_cars
        )));
    }
    let start = schedule.start();
    let mode = config.travel_time_mode.unwrap_or(schedule.travel_time_mode);
    let mut engine = Engine {
        schedule,
        static_params,
        policy,
        config,
        mode,
        rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(replication as u64)),
        state: SystemState { time: start, ..state },
        heap: BinaryHeap::new(),
        seq: 0,
        slot: 0,
        start,
        warm_abs: start + config.warmup(),
        end_abs: start + config.horizon,
        occ_e: Occupancy::new(r * r, start + config.warmup(), start),
        occ_f: Occupancy::new(r * r, start + config.warmup(), start),
        occ_idle: Occupancy::new(r, start + config.warmup(), start),
        requests: vec![0; r],
        fulfilled: vec![0; r],
        bins: Vec::new(),
        decisions: DMatrix::zeros(r, r),
        events: 0,
    };
    if let Some(width) = config.report_interval {
        let count = (config.horizon / width - 1e-9).ceil() as usize;
        engine.bins = (0..count)
            .map(|k| BinMetrics {
                start: start + k as f64 * width,
                end: (start + (k + 1) as f64 * width).min(start + config.horizon),
                requests: 0,
                fulfilled: 0,
            })
            .collect();
    }
    // Cars already travelling in the initial state.
    for i in 0..r {
        for j in 0..r {
            for _ in 0..engine.state.f_count[(i, j)] {
                let dt = engine.travel_time(i, j);
                engine.push(start + dt, i, j, true);
            }
            if i != j {
                for _ in 0..engine.state.e_count[(i, j)] {
                    let dt = engine.travel_time(i, j);
                    engine.push(start + dt, i, j, false);
                }
            }
        }
    }
    engine.run()
}

/// Runs `config.replications` independent replications in parallel.
pub fn simulate(
    scenario: &Scenario,
    policy: &dyn RoutingPolicy,
    config: &SimConfig,
) -> Result<SimReport, SimError> {
    config.check()?;
    let runs = (0..config.replications)
        .into_par_iter()
        .map(|rep| simulate_once(scenario, policy, config, rep))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SimReport::from_runs(policy.name(), runs))
}
