//! Domain types, validation, built-in scenarios, scenario files and parameter noise.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;

/// Tolerance for row-stochastic checks on user-provided matrices.
pub const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid parameters: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    Dimension {
        field: String,
        expected: String,
        found: String,
    },
    #[error("unknown scenario `{0}` (expected two_region, nine_region_didi, five_region_city or nine_region_shift)")]
    UnknownScenario(String),
    #[error("noise level sigma = {0} must lie in [0, 1)")]
    Sigma(f64),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// A single failed invariant, reported by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    pub index: Vec<usize>,
    pub residual: f64,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

/// Static market primitives. `lambda` is per car: region `i` sees requests at rate `n_cars * lambda[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub n_cars: usize,
    pub lambda: Vec<f64>,
    pub mu: Matrix,
    pub p: Matrix,
    pub rewards: Option<Matrix>,
}

impl NetworkParams {
    /// Builds validated parameters from mean travel times (`mu = 1 / mean_travel`).
    pub fn from_mean_travel(
        n_cars: usize,
        lambda: Vec<f64>,
        mean_travel: Matrix,
        p: Matrix,
    ) -> Result<Self, ModelError> {
        let mu = mean_travel.map(|t| 1.0 / t);
        let params = NetworkParams {
            n_cars,
            lambda,
            mu,
            p,
            rewards: None,
        };
        params.check()?;
        Ok(params)
    }

    pub fn regions(&self) -> usize {
        self.lambda.len()
    }

    pub fn mean_travel(&self) -> Matrix {
        self.mu.map(|m| 1.0 / m)
    }

    pub fn total_lambda(&self) -> f64 {
        self.lambda.iter().sum()
    }

    /// Explicit rewards, or the availability default `c_ij = 1 / sum_k lambda_k`.
    pub fn rewards_or_default(&self) -> Matrix {
        match &self.rewards {
            Some(c) => c.clone(),
            None => {
                let r = self.regions();
                Matrix::from_element(r, r, 1.0 / self.total_lambda())
            }
        }
    }

    /// Route demand `lambda_i * P_ij`.
    pub fn route_rates(&self) -> Matrix {
        let r = self.regions();
        Matrix::from_fn(r, r, |i, j| self.lambda[i] * self.p[(i, j)])
    }

    /// Full-car arrival rate into each region, `sum_k lambda_k P_ki`.
    pub fn dropoff_rates(&self) -> Vec<f64> {
        let r = self.regions();
        (0..r)
            .map(|i| (0..r).map(|k| self.lambda[k] * self.p[(k, i)]).sum())
            .collect()
    }

    /// Returns an error carrying every violation if the parameters are invalid.
    pub fn check(&self) -> Result<(), ModelError> {
        check_dims(self)?;
        let v = validate(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Invalid(v))
        }
    }

    pub fn with_n_cars(mut self, n_cars: usize) -> Self {
        self.n_cars = n_cars;
        self
    }

    pub fn with_rewards(mut self, rewards: Matrix) -> Self {
        self.rewards = Some(rewards);
        self
    }

    /// Multiplies every per-car arrival rate by `factor`.
    pub fn scale_lambda(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.lambda.iter_mut().for_each(|l| *l *= factor);
        out
    }
}

fn check_dims(params: &NetworkParams) -> Result<(), ModelError> {
    let r = params.regions();
    let square = |field: &str, m: &Matrix| {
        if m.nrows() != r || m.ncols() != r {
            Err(ModelError::Dimension {
                field: field.to_string(),
                expected: format!("{r}x{r}"),
                found: format!("{}x{}", m.nrows(), m.ncols()),
            })
        } else {
            Ok(())
        }
    };
    square("mu", &params.mu)?;
    square("p", &params.p)?;
    if let Some(c) = &params.rewards {
        square("rewards", c)?;
    }
    Ok(())
}

/// Lists every violated invariant of `params`; empty iff valid.
pub fn validate(params: &NetworkParams) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Err(ModelError::Dimension {
        field,
        expected,
        found,
    }) = check_dims(params)
    {
        out.push(Violation {
            field: "dimensions",
            index: vec![],
            residual: f64::NAN,
            message: format!("{field} has shape {found}, expected {expected}"),
        });
        return out;
    }
    let r = params.regions();
    if r == 0 {
        out.push(Violation {
            field: "regions",
            index: vec![],
            residual: 0.0,
            message: "regions must be at least 1".into(),
        });
    }
    if params.n_cars == 0 {
        out.push(Violation {
            field: "n_cars",
            index: vec![],
            residual: 0.0,
            message: "n_cars must be at least 1".into(),
        });
    }
    for (i, &l) in params.lambda.iter().enumerate() {
        if !(l > 0.0 && l.is_finite()) {
            out.push(Violation {
                field: "lambda",
                index: vec![i],
                residual: l,
                message: format!("lambda[{i}] not positive"),
            });
        }
    }
    for i in 0..r {
        for j in 0..r {
            let m = params.mu[(i, j)];
            if !(m > 0.0 && m.is_finite()) {
                out.push(Violation {
                    field: "mu",
                    index: vec![i, j],
                    residual: m,
                    message: format!("mu[{i}][{j}] not positive"),
                });
            }
        }
    }
    out.extend(stochastic_violations("p", &params.p, STOCHASTIC_TOL));
    if let Some(c) = &params.rewards {
        for i in 0..r {
            for j in 0..r {
                if !(c[(i, j)] >= 0.0) {
                    out.push(Violation {
                        field: "rewards",
                        index: vec![i, j],
                        residual: c[(i, j)],
                        message: format!("rewards[{i}][{j}] negative"),
                    });
                }
            }
        }
    }
    out
}

fn stochastic_violations(field: &'static str, m: &Matrix, tol: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let x = m[(i, j)];
            if !(x >= 0.0 && x.is_finite()) {
                out.push(Violation {
                    field,
                    index: vec![i, j],
                    residual: x,
                    message: format!("{field}[{i}][{j}] negative"),
                });
            }
        }
        let residual = 1.0 - m.row(i).sum();
        if residual.abs() > tol {
            out.push(Violation {
                field,
                index: vec![i],
                residual,
                message: format!("{field} row {i} sums to {} (residual {residual:.3e})", 1.0 - residual),
            });
        }
    }
    out
}

/// Row-stochastic empty-car routing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMatrix(Matrix);

impl RoutingMatrix {
    pub fn new(q: Matrix) -> Result<Self, ModelError> {
        if q.nrows() != q.ncols() {
            return Err(ModelError::Dimension {
                field: "q".into(),
                expected: "square".into(),
                found: format!("{}x{}", q.nrows(), q.ncols()),
            });
        }
        let v = stochastic_violations("q", &q, STOCHASTIC_TOL);
        if v.is_empty() {
            Ok(RoutingMatrix(q))
        } else {
            Err(ModelError::Invalid(v))
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, ModelError> {
        Self::new(matrix_from_rows(rows))
    }

    pub fn identity(r: usize) -> Self {
        RoutingMatrix(Matrix::identity(r, r))
    }

    pub fn regions(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

impl std::ops::Index<(usize, usize)> for RoutingMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TravelTimeMode {
    #[default]
    Exponential,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub start: f64,
    pub end: f64,
    pub params: NetworkParams,
}

/// Piecewise-constant parameters over contiguous time slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub slots: Vec<Slot>,
    pub travel_time_mode: TravelTimeMode,
}

impl Schedule {
    pub fn new(slots: Vec<Slot>, travel_time_mode: TravelTimeMode) -> Result<Self, ModelError> {
        let s = Schedule {
            slots,
            travel_time_mode,
        };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let first = self
            .slots
            .first()
            .ok_or_else(|| ModelError::Schedule("no slots".into()))?;
        for (k, slot) in self.slots.iter().enumerate() {
            if !(slot.end > slot.start) {
                return Err(ModelError::Schedule(format!("slot {k} has end <= start")));
            }
            if k > 0 && (slot.start - self.slots[k - 1].end).abs() > 1e-12 {
                return Err(ModelError::Schedule(format!(
                    "slot {k} does not start where slot {} ends",
                    k - 1
                )));
            }
            if slot.params.regions() != first.params.regions()
                || slot.params.n_cars != first.params.n_cars
            {
                return Err(ModelError::Schedule(format!(
                    "slot {k} differs in region count or fleet size"
                )));
            }
            slot.params.check()?;
        }
        Ok(())
    }

    pub fn start(&self) -> f64 {
        self.slots[0].start
    }

    pub fn end(&self) -> f64 {
        self.slots[self.slots.len() - 1].end
    }

    pub fn regions(&self) -> usize {
        self.slots[0].params.regions()
    }

    pub fn n_cars(&self) -> usize {
        self.slots[0].params.n_cars
    }

    /// Index of the slot in effect at `t`, clamped to the first and last slot.
    pub fn slot_index(&self, t: f64) -> usize {
        self.slots
            .iter()
            .rposition(|s| s.start <= t)
            .unwrap_or(0)
    }

    pub fn params_at(&self, t: f64) -> &NetworkParams {
        &self.slots[self.slot_index(t)].params
    }

    pub fn with_n_cars(mut self, n_cars: usize) -> Self {
        for s in &mut self.slots {
            s.params.n_cars = n_cars;
        }
        self
    }

    /// A one-slot schedule holding `params` over `[start, end)`.
    pub fn constant(params: NetworkParams, start: f64, end: f64) -> Self {
        Schedule {
            slots: vec![Slot { start, end, params }],
            travel_time_mode: TravelTimeMode::Exponential,
        }
    }
}

/// Integer car counts of the Markov chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub e_count: DMatrix<usize>,
    pub f_count: DMatrix<usize>,
    pub time: f64,
}

impl SystemState {
    pub fn empty(r: usize) -> Self {
        SystemState {
            e_count: DMatrix::zeros(r, r),
            f_count: DMatrix::zeros(r, r),
            time: 0.0,
        }
    }

    pub fn regions(&self) -> usize {
        self.e_count.nrows()
    }

    pub fn total_cars(&self) -> usize {
        self.e_count.iter().sum::<usize>() + self.f_count.iter().sum::<usize>()
    }

    /// Idle cars at `i` plus empty cars heading to `i`.
    pub fn empty_toward(&self, i: usize) -> usize {
        self.e_count.column(i).iter().sum()
    }
}

/// Scaled continuum state `(e, f)` on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidState {
    pub e: Matrix,
    pub f: Matrix,
}

impl FluidState {
    pub fn zeros(r: usize) -> Self {
        FluidState {
            e: Matrix::zeros(r, r),
            f: Matrix::zeros(r, r),
        }
    }

    /// All mass idle at region `i`.
    pub fn all_idle_at(r: usize, i: usize) -> Self {
        let mut s = Self::zeros(r);
        s.e[(i, i)] = 1.0;
        s
    }

    /// Uniform draw from the simplex over all `2 r^2` coordinates.
    pub fn random<R: Rng + ?Sized>(r: usize, rng: &mut R) -> Self {
        let mut s = Self::zeros(r);
        for x in s.e.iter_mut().chain(s.f.iter_mut()) {
            *x = rng.sample::<f64, _>(rand_distr::Exp1);
        }
        let total = s.mass();
        s.e /= total;
        s.f /= total;
        s
    }

    pub fn regions(&self) -> usize {
        self.e.nrows()
    }

    pub fn mass(&self) -> f64 {
        self.e.sum() + self.f.sum()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.e
            .iter()
            .chain(self.f.iter())
            .all(|&x| x >= -tol && x <= 1.0 + tol)
            && (self.mass() - 1.0).abs() <= tol
    }

    /// Rounds `n * (e, f)` to integer counts summing to `n` (largest remainder).
    pub fn to_counts(&self, n: usize) -> SystemState {
        let r = self.regions();
        let weights: Vec<f64> = self.e.iter().chain(self.f.iter()).copied().collect();
        let counts = largest_remainder(&weights, n);
        let (e, f) = counts.split_at(r * r);
        SystemState {
            e_count: DMatrix::from_column_slice(r, r, e),
            f_count: DMatrix::from_column_slice(r, r, f),
            time: 0.0,
        }
    }
}

/// Splits `total` into integers proportional to `weights`, largest remainders first
/// (ties to the smaller index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    if weights.is_empty() {
        return vec![];
    }
    if sum <= 0.0 {
        let mut out = vec![0; weights.len()];
        out[0] = total;
        return out;
    }
    let exact: Vec<f64> = weights
        .iter()
        .map(|w| w.max(0.0) / sum * total as f64)
        .collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(total.saturating_sub(assigned)) {
        out[k] += 1;
    }
    out
}

pub fn matrix_from_rows(rows: &[&[f64]]) -> Matrix {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    Matrix::from_fn(r, c, |i, j| rows[i][j])
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Divides each row by its sum.
fn normalize_rows(m: Matrix) -> Matrix {
    let mut m = m;
    for i in 0..m.nrows() {
        let s = m.row(i).sum();
        m.row_mut(i).iter_mut().for_each(|x| *x /= s);
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Static(NetworkParams),
    Scheduled(Schedule),
}

impl Scenario {
    pub fn regions(&self) -> usize {
        match self {
            Scenario::Static(p) => p.regions(),
            Scenario::Scheduled(s) => s.regions(),
        }
    }

    pub fn n_cars(&self) -> usize {
        match self {
            Scenario::Static(p) => p.n_cars,
            Scenario::Scheduled(s) => s.n_cars(),
        }
    }

    /// Parameters of a static scenario, or of the first slot of a schedule.
    pub fn base_params(&self) -> &NetworkParams {
        match self {
            Scenario::Static(p) => p,
            Scenario::Scheduled(s) => &s.slots[0].params,
        }
    }

    pub fn as_static(&self) -> Option<&NetworkParams> {
        match self {
            Scenario::Static(p) => Some(p),
            Scenario::Scheduled(_) => None,
        }
    }

    pub fn as_schedule(&self) -> Option<&Schedule> {
        match self {
            Scenario::Static(_) => None,
            Scenario::Scheduled(s) => Some(s),
        }
    }

    pub fn with_n_cars(self, n_cars: usize) -> Self {
        match self {
            Scenario::Static(p) => Scenario::Static(p.with_n_cars(n_cars)),
            Scenario::Scheduled(s) => Scenario::Scheduled(s.with_n_cars(n_cars)),
        }
    }
}

pub const BUILTIN_NAMES: [&str; 4] = [
    "two_region",
    "nine_region_didi",
    "five_region_city",
    "nine_region_shift",
];

pub fn builtin_scenario(name: &str) -> Result<Scenario, ModelError> {
    match name {
        "two_region" => Ok(Scenario::Static(two_region())),
        "nine_region_didi" => Ok(Scenario::Static(nine_region_didi())),
        "five_region_city" => Ok(Scenario::Scheduled(five_region_city())),
        "nine_region_shift" => Ok(Scenario::Scheduled(nine_region_shift())),
        other => Err(ModelError::UnknownScenario(other.to_string())),
    }
}

/// Two regions, 1200 cars, requests 800/400 per unit time, unit travel times.
pub fn two_region() -> NetworkParams {
    NetworkParams::from_mean_travel(
        1200,
        vec![2.0 / 3.0, 1.0 / 3.0],
        Matrix::from_element(2, 2, 1.0),
        matrix_from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]),
    )
    .expect("built-in two_region is valid")
}

const DIDI_LAMBDA: [f64; 9] = [
    0.0131, 0.0624, 0.0381, 0.0652, 0.0870, 0.1178, 0.0762, 0.1438, 0.2751,
];

const DIDI_LAMBDA_PERMUTED: [f64; 9] = [
    0.0131, 0.0624, 0.1178, 0.0870, 0.0652, 0.0381, 0.0762, 0.2751, 0.1438,
];

const DIDI_P: [[f64; 9]; 9] = [
    [0.230, 0.297, 0.372, 0.004, 0.026, 0.029, 0.009, 0.018, 0.015],
    [0.044, 0.655, 0.146, 0.005, 0.079, 0.038, 0.018, 0.005, 0.011],
    [0.165, 0.291, 0.288, 0.007, 0.054, 0.126, 0.017, 0.025, 0.027],
    [0.0013, 0.010, 0.006, 0.139, 0.031, 0.185, 0.101, 0.117, 0.409],
    [0.005, 0.096, 0.026, 0.037, 0.25, 0.333, 0.218, 0.012, 0.027],
    [0.004, 0.031, 0.032, 0.088, 0.121, 0.426, 0.148, 0.059, 0.092],
    [0.002, 0.023, 0.011, 0.066, 0.142, 0.269, 0.399, 0.020, 0.069],
    [0.004, 0.008, 0.023, 0.067, 0.011, 0.095, 0.019, 0.400, 0.374],
    [0.001, 0.004, 0.005, 0.095, 0.010, 0.059, 0.030, 0.185, 0.610],
];

const DIDI_MEAN_TRAVEL: [[f64; 9]; 9] = [
    [0.83, 1.87, 1.07, 3.89, 3.25, 2.79, 4.25, 2.94, 4.37],
    [1.78, 0.89, 1.18, 3.24, 1.24, 1.99, 2.89, 3.46, 4.18],
    [1.02, 1.31, 0.78, 2.82, 1.45, 1.36, 3.26, 2.17, 3.04],
    [3.52, 3.13, 2.76, 0.93, 1.5, 1.26, 1.49, 1.75, 1.6],
    [2.86, 1.42, 1.64, 1.55, 0.84, 1.04, 1.45, 2.88, 2.89],
    [2.61, 2.17, 1.54, 1.31, 1.15, 0.81, 1.86, 1.78, 2.2],
    [4.38, 3.02, 2.79, 1.36, 1.35, 1.65, 0.94, 3.1, 3.0],
    [2.93, 3.06, 2.26, 1.75, 2.69, 1.62, 3.23, 0.9, 1.48],
    [3.58, 4.18, 2.8, 1.49, 2.46, 2.02, 2.72, 1.43, 1.01],
];

fn array_matrix<const R: usize>(a: &[[f64; R]; R]) -> Matrix {
    Matrix::from_fn(R, R, |i, j| a[i][j])
}

/// The published destination rows are rounded to three decimals; rows are
/// rescaled to sum to one.
pub fn didi_destinations() -> Matrix {
    normalize_rows(array_matrix(&DIDI_P))
}

/// Nine-region proxy market (time unit 10 minutes), regions ordered 10, 11, 18, 13, 19, 27, 45, 47, 50.
pub fn nine_region_didi() -> NetworkParams {
    NetworkParams::from_mean_travel(
        2000,
        DIDI_LAMBDA.to_vec(),
        array_matrix(&DIDI_MEAN_TRAVEL),
        didi_destinations(),
    )
    .expect("built-in nine_region_didi is valid")
}

/// Four hours of the nine-region market: `0.3 lambda` for two hours, then
/// `0.85 lambda^p` with a permuted request profile; 1000 cars.
pub fn nine_region_shift() -> Schedule {
    let base = nine_region_didi().with_n_cars(1000);
    let mut early = base.clone();
    early.lambda = DIDI_LAMBDA.iter().map(|l| 0.3 * l).collect();
    let mut late = base;
    late.lambda = DIDI_LAMBDA_PERMUTED.iter().map(|l| 0.85 * l).collect();
    Schedule::new(
        vec![
            Slot {
                start: 0.0,
                end: 12.0,
                params: early,
            },
            Slot {
                start: 12.0,
                end: 24.0,
                params: late,
            },
        ],
        TravelTimeMode::Deterministic,
    )
    .expect("built-in nine_region_shift is valid")
}

const CITY_TA: [[f64; 5]; 5] = [
    [0.15, 0.25, 1.25, 0.2, 0.4],
    [0.25, 0.10, 1.1, 0.1, 0.3],
    [1.25, 1.1, 0.1, 1.0, 0.65],
    [0.25, 0.15, 1.0, 0.15, 0.25],
    [0.5, 0.4, 0.75, 0.25, 0.2],
];

const CITY_TB: [[f64; 5]; 5] = [
    [0.15, 0.25, 1.25, 0.2, 0.4],
    [0.25, 0.10, 1.1, 0.1, 0.3],
    [1.25, 1.1, 0.1, 1.0, 0.65],
    [0.2, 0.1, 1.0, 0.15, 0.25],
    [0.4, 0.3, 0.65, 0.25, 0.2],
];

/// Five-region city (three suburbs, midtown, downtown) from 5pm to 11pm; clock in hours.
pub fn five_region_city() -> Schedule {
    let slot = |start: f64, lambda: [f64; 5], p: [[f64; 5]; 5], t: &[[f64; 5]; 5]| Slot {
        start,
        end: start + 2.0,
        params: NetworkParams::from_mean_travel(
            1000,
            lambda.to_vec(),
            array_matrix(t),
            array_matrix(&p),
        )
        .expect("built-in five_region_city is valid"),
    };
    Schedule::new(
        vec![
            slot(
                17.0,
                [0.108, 0.108, 0.108, 0.108, 1.08],
                [
                    [0.6, 0.1, 0.0, 0.3, 0.0],
                    [0.1, 0.6, 0.0, 0.3, 0.0],
                    [0.0, 0.0, 0.7, 0.3, 0.0],
                    [0.2, 0.2, 0.2, 0.2, 0.2],
                    [0.3, 0.3, 0.3, 0.1, 0.0],
                ],
                &CITY_TA,
            ),
            slot(
                19.0,
                [0.72, 0.48, 0.48, 0.48, 0.12],
                [
                    [0.1, 0.0, 0.0, 0.9, 0.0],
                    [0.0, 0.1, 0.0, 0.9, 0.0],
                    [0.0, 0.0, 0.1, 0.9, 0.0],
                    [0.05, 0.05, 0.05, 0.8, 0.05],
                    [0.0, 0.0, 0.0, 0.9, 0.1],
                ],
                &CITY_TB,
            ),
            slot(
                21.0,
                [0.12, 0.12, 0.12, 1.32, 0.12],
                [
                    [0.9, 0.05, 0.0, 0.05, 0.0],
                    [0.05, 0.9, 0.0, 0.05, 0.0],
                    [0.0, 0.0, 0.9, 0.1, 0.0],
                    [0.3, 0.3, 0.3, 0.05, 0.05],
                    [0.0, 0.0, 0.0, 0.1, 0.9],
                ],
                &CITY_TB,
            ),
        ],
        TravelTimeMode::Deterministic,
    )
    .expect("built-in five_region_city is valid")
}

/// Noisy copy of `params`: route demand `lambda_i P_ij` scaled by `1 + sigma eta_ij` and mean
/// travel time by `1 + sigma xi_ij`, with Rademacher `eta`, `xi` drawn from `seed`.
pub fn perturb(params: &NetworkParams, sigma: f64, seed: u64) -> Result<NetworkParams, ModelError> {
    if !(0.0..1.0).contains(&sigma) {
        return Err(ModelError::Sigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(params.clone());
    }
    let r = params.regions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sign = || if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let mut route = params.route_rates();
    for i in 0..r {
        for j in 0..r {
            route[(i, j)] *= 1.0 + sigma * sign();
        }
    }
    let mut travel = params.mean_travel();
    for i in 0..r {
        for j in 0..r {
            travel[(i, j)] *= 1.0 + sigma * sign();
        }
    }
    let lambda: Vec<f64> = (0..r).map(|i| route.row(i).sum()).collect();
    let p = Matrix::from_fn(r, r, |i, j| route[(i, j)] / lambda[i]);
    Ok(NetworkParams {
        n_cars: params.n_cars,
        lambda,
        mu: travel.map(|t| 1.0 / t),
        p,
        rewards: params.rewards.clone(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SlotFile {
    start: f64,
    end: f64,
    lambda: Vec<f64>,
    mean_travel: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioFile {
    regions: usize,
    n_cars: usize,
    lambda: Vec<f64>,
    mean_travel: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rewards: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schedule: Option<Vec<SlotFile>>,
    #[serde(default)]
    travel_time_mode: TravelTimeMode,
}

/// A scenario read from disk, with the optional routing matrix stored next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub q: Option<RoutingMatrix>,
}

fn square_matrix(field: &str, rows: &[Vec<f64>], r: usize) -> Result<Matrix, ModelError> {
    let ok = rows.len() == r && rows.iter().all(|row| row.len() == r);
    if !ok {
        let cols = rows.iter().map(|x| x.len()).max().unwrap_or(0);
        return Err(ModelError::Dimension {
            field: field.to_string(),
            expected: format!("{r}x{r}"),
            found: format!("{}x{}", rows.len(), cols),
        });
    }
    Ok(Matrix::from_fn(r, r, |i, j| rows[i][j]))
}

fn params_from_parts(
    field: &str,
    r: usize,
    n_cars: usize,
    lambda: &[f64],
    mean_travel: &[Vec<f64>],
    p: &[Vec<f64>],
) -> Result<NetworkParams, ModelError> {
    if lambda.len() != r {
        return Err(ModelError::Dimension {
            field: format!("{field}lambda"),
            expected: r.to_string(),
            found: lambda.len().to_string(),
        });
    }
    let mean_travel = square_matrix(&format!("{field}mean_travel"), mean_travel, r)?;
    let p = square_matrix(&format!("{field}p"), p, r)?;
    NetworkParams::from_mean_travel(n_cars, lambda.to_vec(), mean_travel, p)
}

/// Parses the JSON scenario format.
pub fn parse_scenario(text: &str) -> Result<LoadedScenario, ModelError> {
    let file: ScenarioFile = serde_json::from_str(text)?;
    let r = file.regions;
    let mut base = params_from_parts("", r, file.n_cars, &file.lambda, &file.mean_travel, &file.p)?;
    if let Some(c) = &file.rewards {
        base.rewards = Some(square_matrix("rewards", c, r)?);
        base.check()?;
    }
    let q = file
        .q
        .as_ref()
        .map(|q| square_matrix("q", q, r).and_then(RoutingMatrix::new))
        .transpose()?;
    let scenario = match &file.schedule {
        None => Scenario::Static(base),
        Some(slots) => {
            let slots = slots
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let mut params = params_from_parts(
                        &format!("schedule[{k}]."),
                        r,
                        file.n_cars,
                        &s.lambda,
                        &s.mean_travel,
                        &s.p,
                    )?;
                    params.rewards = base.rewards.clone();
                    Ok(Slot {
                        start: s.start,
                        end: s.end,
                        params,
                    })
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            Scenario::Scheduled(Schedule::new(slots, file.travel_time_mode)?)
        }
    };
    Ok(LoadedScenario { scenario, q })
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<LoadedScenario, ModelError> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

pub fn scenario_to_json(scenario: &Scenario, q: Option<&RoutingMatrix>) -> String {
    let base = scenario.base_params();
    let (schedule, mode) = match scenario {
        Scenario::Static(_) => (None, TravelTimeMode::Exponential),
        Scenario::Scheduled(s) => (
            Some(
                s.slots
                    .iter()
                    .map(|slot| SlotFile {
                        start: slot.start,
                        end: slot.end,
                        lambda: slot.params.lambda.clone(),
                        mean_travel: matrix_to_rows(&slot.params.mean_travel()),
                        p: matrix_to_rows(&slot.params.p),
                    })
                    .collect(),
            ),
            s.travel_time_mode,
        ),
    };
    let file = ScenarioFile {
        regions: base.regions(),
        n_cars: base.n_cars,
        lambda: base.lambda.clone(),
        mean_travel: matrix_to_rows(&base.mean_travel()),
        p: matrix_to_rows(&base.p),
        q: q.map(|q| matrix_to_rows(q.matrix())),
        rewards: base.rewards.as_ref().map(matrix_to_rows),
        schedule,
        travel_time_mode: mode,
    };
    serde_json::to_string_pretty(&file).expect("scenario serializes")
}

pub fn save_scenario(
    scenario: &Scenario,
    q: Option<&RoutingMatrix>,
    path: impl AsRef<Path>,
) -> Result<(), ModelError> {
    std::fs::write(path, scenario_to_json(scenario, q))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_valid() {
        for name in BUILTIN_NAMES {
            match builtin_scenario(name).unwrap() {
                Scenario::Static(p) => assert!(validate(&p).is_empty(), "{name}"),
                Scenario::Scheduled(s) => {
                    for slot in &s.slots {
                        assert!(validate(&slot.params).is_empty(), "{name}");
                    }
                }
            }
        }
        assert!(builtin_scenario("three_region").is_err());
    }

    #[test]
    fn builtin_values() {
        let didi = nine_region_didi();
        assert_eq!(didi.lambda[8], 0.2751);
        assert_eq!(didi.n_cars, 2000);
        let two = two_region();
        assert!((two.n_cars as f64 * two.lambda[0] - 800.0).abs() < 1e-9);
        assert!((two.n_cars as f64 * two.lambda[1] - 400.0).abs() < 1e-9);
        let city = five_region_city();
        assert_eq!(city.slots[1].params.lambda, vec![0.72, 0.48, 0.48, 0.48, 0.12]);
        assert_eq!(city.n_cars(), 1000);
        assert_eq!(city.end() - city.start(), 6.0);
    }

    #[test]
    fn validate_reports_row_residual() {
        let mut p = two_region();
        p.p[(0, 1)] = 0.9;
        let v = validate(&p);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].index, vec![0]);
        assert!((v[0].residual - 0.1).abs() < 1e-12);
    }

    #[test]
    fn validate_reports_nonpositive_lambda() {
        let mut p = two_region();
        p.lambda[0] = 0.0;
        let v = validate(&p);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "lambda[0] not positive");
    }

    #[test]
    fn perturb_zero_sigma_is_identity() {
        let p = nine_region_didi();
        assert_eq!(perturb(&p, 0.0, 7).unwrap(), p);
        assert!(perturb(&p, 1.0, 7).is_err());
    }

    #[test]
    fn perturb_keeps_rows_stochastic() {
        let p = nine_region_didi();
        let q = perturb(&p, 0.05, 11).unwrap();
        for i in 0..9 {
            assert!((q.p.row(i).sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(q, perturb(&p, 0.05, 11).unwrap());
    }

    #[test]
    fn perturb_travel_times_on_support() {
        let p = nine_region_didi();
        let q = perturb(&p, 0.1, 3).unwrap();
        let (t0, t1) = (p.mean_travel(), q.mean_travel());
        for (a, b) in t0.iter().zip(t1.iter()) {
            let ratio = b / a;
            assert!((ratio - 0.9).abs() < 1e-12 || (ratio - 1.1).abs() < 1e-12);
        }
    }

    #[test]
    fn scenario_round_trip() {
        let dir = std::env::temp_dir().join(format!("ridenet-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("two.json");
        let s = builtin_scenario("two_region").unwrap();
        save_scenario(&s, Some(&RoutingMatrix::identity(2)), &path).unwrap();
        let back = load_scenario(&path).unwrap();
        let (a, b) = (s.base_params(), back.scenario.base_params());
        assert_eq!(a.n_cars, b.n_cars);
        assert!((&a.mu - &b.mu).amax() < 1e-12);
        assert!((&a.p - &b.p).amax() < 1e-12);
        assert_eq!(back.q, Some(RoutingMatrix::identity(2)));

        let city = builtin_scenario("five_region_city").unwrap();
        let back = parse_scenario(&scenario_to_json(&city, None)).unwrap();
        let (Scenario::Scheduled(a), Scenario::Scheduled(b)) = (&city, &back.scenario) else {
            panic!("schedule lost");
        };
        assert_eq!(a.slots.len(), b.slots.len());
        assert_eq!(b.travel_time_mode, TravelTimeMode::Deterministic);
        for (x, y) in a.slots.iter().zip(&b.slots) {
            assert!((&x.params.mu - &y.params.mu).amax() < 1e-12);
        }
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn missing_field_is_named() {
        let text = r#"{"regions": 1, "n_cars": 1, "lambda": [1.0], "mean_travel": [[1.0]]}"#;
        let err = parse_scenario(text).unwrap_err().to_string();
        assert!(err.contains("`p`"), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let text = r#"{"regions": 3, "n_cars": 5, "lambda": [1, 1, 1],
            "mean_travel": [[1, 1], [1, 1]], "p": [[1, 0, 0], [0, 1, 0], [0, 0, 1]]}"#;
        let err = parse_scenario(text).unwrap_err();
        assert!(matches!(err, ModelError::Dimension { ref field, .. } if field == "mean_travel"));
    }

    #[test]
    fn largest_remainder_hits_total() {
        assert_eq!(largest_remainder(&[2.0 / 3.0, 1.0 / 3.0], 1200), vec![800, 400]);
        assert_eq!(largest_remainder(&[0.2, 0.5, 0.3], 1), vec![0, 1, 0]);
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn schedule_lookup_clamps() {
        let city = five_region_city();
        assert_eq!(city.slot_index(16.0), 0);
        assert_eq!(city.slot_index(19.0), 1);
        assert_eq!(city.slot_index(30.0), 2);
    }
}
