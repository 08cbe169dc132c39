//! Fluid-based routing optimization: the relaxed LP, the idle-mass fix-up,
//! routing recovery and time-averaged lookahead LPs.

use rayon::prelude::*;
use thiserror::Error;

use crate::linprog::{self, LpError, LpProblem, LpStatus, Relation};
use crate::model::{Matrix, NetworkParams, RoutingMatrix, Schedule};

/// `a_i` within this distance of 1 counts as fully available.
pub const SATURATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FluidOptError {
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("fluid LP returned status {0:?} for valid parameters")]
    Status(LpStatus),
    #[error("idle mass {mass:.3e} at region {region} although no region is fully available")]
    Fixup { region: usize, mass: f64 },
    #[error("lookahead horizon must be positive, got {0}")]
    Horizon(f64),
    #[error("time {t} does not overlap the schedule [{start}, {end}]")]
    OutsideSchedule { t: f64, start: f64, end: f64 },
    #[error("lookahead step must be positive, got {0}")]
    Step(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidSolution {
    pub e_bar: Matrix,
    pub f_bar: Matrix,
    pub a_bar: Vec<f64>,
    pub value: f64,
    pub q_star: Option<RoutingMatrix>,
}

impl FluidSolution {
    pub fn regions(&self) -> usize {
        self.a_bar.len()
    }

    pub fn mass(&self) -> f64 {
        self.e_bar.sum() + self.f_bar.sum()
    }
}

/// LP coefficients; time-averaged for lookahead problems.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidCoefficients {
    /// `lambda_i P_ij c_ij`
    pub route_reward: Matrix,
    /// `lambda_i P_ij`
    pub route_rate: Matrix,
    pub mu: Matrix,
    pub lambda: Vec<f64>,
}

impl FluidCoefficients {
    pub fn from_params(params: &NetworkParams, rewards: &Matrix) -> Self {
        let route_rate = params.route_rates();
        FluidCoefficients {
            route_reward: route_rate.component_mul(rewards),
            route_rate,
            mu: params.mu.clone(),
            lambda: params.lambda.clone(),
        }
    }

    pub fn regions(&self) -> usize {
        self.lambda.len()
    }
}

/// Column layout of the relaxed LP: `e` row-major, then `f`, then `a`.
#[derive(Debug, Clone, Copy)]
pub struct LpLayout {
    pub r: usize,
}

impl LpLayout {
    pub fn e(&self, i: usize, j: usize) -> usize {
        i * self.r + j
    }

    pub fn f(&self, i: usize, j: usize) -> usize {
        self.r * self.r + i * self.r + j
    }

    pub fn a(&self, i: usize) -> usize {
        2 * self.r * self.r + i
    }

    pub fn n_vars(&self) -> usize {
        2 * self.r * self.r + self.r
    }
}

pub fn build_relaxed_lp(params: &NetworkParams, rewards: &Matrix) -> LpProblem {
    build_lp(&FluidCoefficients::from_params(params, rewards))
}

pub fn build_lp(c: &FluidCoefficients) -> LpProblem {
    let r = c.regions();
    let lay = LpLayout { r };
    let mut lp = LpProblem::new(lay.n_vars());
    for i in 0..r {
        lp.objective[lay.a(i)] = c.route_reward.row(i).sum();
        lp.bounds[lay.a(i)] = (0.0, 1.0);
    }
    let inflow_full = |i: usize| -> Vec<(usize, f64)> {
        (0..r).map(|k| (lay.f(k, i), c.mu[(k, i)])).collect()
    };
    let inflow_empty = |i: usize| -> Vec<(usize, f64)> {
        (0..r)
            .filter(|&k| k != i)
            .map(|k| (lay.e(k, i), c.mu[(k, i)]))
            .collect()
    };
    let neg = |terms: Vec<(usize, f64)>| -> Vec<(usize, f64)> {
        terms.into_iter().map(|(j, a)| (j, -a)).collect()
    };

    for i in 0..r {
        for j in 0..r {
            lp.add_sparse(
                &[(lay.a(i), c.route_rate[(i, j)]), (lay.f(i, j), -c.mu[(i, j)])],
                Relation::Eq,
                0.0,
            );
        }
    }
    for i in 0..r {
        for j in (0..r).filter(|&j| j != i) {
            let mut terms = vec![(lay.e(i, j), c.mu[(i, j)])];
            terms.extend(neg(inflow_full(i)));
            lp.add_sparse(&terms, Relation::Le, 0.0);
        }
    }
    for i in 0..r {
        let mut lower = inflow_empty(i);
        lower.push((lay.a(i), -c.lambda[i]));
        lp.add_sparse(&lower, Relation::Le, 0.0);

        let mut upper = vec![(lay.a(i), c.lambda[i])];
        upper.extend(neg(inflow_empty(i)));
        upper.extend(neg(inflow_full(i)));
        lp.add_sparse(&upper, Relation::Le, 0.0);
    }
    for i in 0..r {
        let mut terms = vec![(lay.a(i), c.lambda[i])];
        terms.extend((0..r).filter(|&j| j != i).map(|j| (lay.e(i, j), c.mu[(i, j)])));
        terms.extend(neg(inflow_empty(i)));
        terms.extend(neg(inflow_full(i)));
        lp.add_sparse(&terms, Relation::Eq, 0.0);
    }
    let all: Vec<(usize, f64)> = (0..2 * r * r).map(|j| (j, 1.0)).collect();
    lp.add_sparse(&all, Relation::Eq, 1.0);
    lp
}

/// Solves the relaxed LP, applies the boundary fix-up and recovers `q*`.
pub fn solve_fluid_optimum(
    params: &NetworkParams,
    rewards: &Matrix,
) -> Result<FluidSolution, FluidOptError> {
    solve_coefficients(&FluidCoefficients::from_params(params, rewards))
}

pub fn solve_coefficients(c: &FluidCoefficients) -> Result<FluidSolution, FluidOptError> {
    let lp = build_lp(c);
    let sol = linprog::solve(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(FluidOptError::Status(sol.status));
    }
    let r = c.regions();
    let lay = LpLayout { r };
    let raw = FluidSolution {
        e_bar: Matrix::from_fn(r, r, |i, j| sol.x[lay.e(i, j)]),
        f_bar: Matrix::from_fn(r, r, |i, j| sol.x[lay.f(i, j)]),
        a_bar: (0..r).map(|i| sol.x[lay.a(i)]).collect(),
        value: sol.objective,
        q_star: None,
    };
    let mut fixed = apply_boundary_fixup(raw)?;
    fixed.q_star = Some(recover_with(&fixed, &c.mu, &c.lambda));
    Ok(fixed)
}

/// Moves all idle mass onto the smallest-index fully available region.
pub fn apply_boundary_fixup(sol: FluidSolution) -> Result<FluidSolution, FluidOptError> {
    let r = sol.regions();
    let mut sol = sol;
    match sol.a_bar.iter().position(|&a| a >= 1.0 - SATURATION_TOL) {
        None => {
            for i in 0..r {
                let mass = sol.e_bar[(i, i)];
                if mass > 1e-8 {
                    return Err(FluidOptError::Fixup { region: i, mass });
                }
                sol.e_bar[(i, i)] = 0.0;
            }
        }
        Some(target) => {
            let idle: f64 = (0..r).map(|i| sol.e_bar[(i, i)]).sum();
            for i in 0..r {
                sol.e_bar[(i, i)] = 0.0;
            }
            sol.e_bar[(target, target)] = idle;
        }
    }
    Ok(sol)
}

pub fn recover_routing(sol: &FluidSolution, params: &NetworkParams) -> RoutingMatrix {
    recover_with(sol, &params.mu, &params.lambda)
}

fn recover_with(sol: &FluidSolution, mu: &Matrix, lambda: &[f64]) -> RoutingMatrix {
    let r = sol.regions();
    let mut q = Matrix::zeros(r, r);
    for i in 0..r {
        let full_in: f64 = (0..r).map(|k| mu[(k, i)] * sol.f_bar[(k, i)]).sum();
        if full_in <= 1e-12 {
            q[(i, i)] = 1.0;
            continue;
        }
        for j in (0..r).filter(|&j| j != i) {
            q[(i, j)] = (mu[(i, j)] * sol.e_bar[(i, j)] / full_in).max(0.0);
        }
        let empty_in: f64 = (0..r)
            .filter(|&k| k != i)
            .map(|k| mu[(k, i)] * sol.e_bar[(k, i)])
            .sum();
        q[(i, i)] = ((lambda[i] * sol.a_bar[i] - empty_in) / full_in).max(0.0);
        let s = q.row(i).sum();
        q.row_mut(i).iter_mut().for_each(|x| *x /= s);
    }
    RoutingMatrix::new(q).expect("recovered rows are normalized")
}

/// `sum_ij a_i lambda_i P_ij c_ij`.
pub fn utility(a_bar: &[f64], params: &NetworkParams, rewards: &Matrix) -> f64 {
    let r = params.regions();
    (0..r)
        .map(|i| {
            a_bar[i] * params.lambda[i] * (0..r).map(|j| params.p[(i, j)] * rewards[(i, j)]).sum::<f64>()
        })
        .sum()
}

/// Coefficients averaged over `[t, t + horizon]`; the last slot extends past the schedule end.
pub fn average_coefficients(
    schedule: &Schedule,
    t: f64,
    horizon: f64,
) -> Result<FluidCoefficients, FluidOptError> {
    if !(horizon > 0.0) {
        return Err(FluidOptError::Horizon(horizon));
    }
    if t < schedule.start() || t > schedule.end() {
        return Err(FluidOptError::OutsideSchedule {
            t,
            start: schedule.start(),
            end: schedule.end(),
        });
    }
    let r = schedule.regions();
    let mut avg = FluidCoefficients {
        route_reward: Matrix::zeros(r, r),
        route_rate: Matrix::zeros(r, r),
        mu: Matrix::zeros(r, r),
        lambda: vec![0.0; r],
    };
    let last = schedule.slots.len() - 1;
    for (k, slot) in schedule.slots.iter().enumerate() {
        let end = if k == last { f64::INFINITY } else { slot.end };
        let overlap = (t + horizon).min(end) - t.max(slot.start);
        if overlap <= 0.0 {
            continue;
        }
        let w = overlap / horizon;
        let c = FluidCoefficients::from_params(&slot.params, &slot.params.rewards_or_default());
        avg.route_reward += c.route_reward * w;
        avg.route_rate += c.route_rate * w;
        avg.mu += c.mu * w;
        for (a, l) in avg.lambda.iter_mut().zip(&c.lambda) {
            *a += w * l;
        }
    }
    Ok(avg)
}

pub fn build_lookahead_lp(
    schedule: &Schedule,
    t: f64,
    horizon: f64,
) -> Result<LpProblem, FluidOptError> {
    Ok(build_lp(&average_coefficients(schedule, t, horizon)?))
}

pub fn solve_lookahead(
    schedule: &Schedule,
    t: f64,
    horizon: f64,
) -> Result<FluidSolution, FluidOptError> {
    solve_coefficients(&average_coefficients(schedule, t, horizon)?)
}

/// Routing matrices `q*(k delta)` for `k = 0 .. (end - start) / delta`, solved in parallel.
pub fn lookahead_table(
    schedule: &Schedule,
    delta: f64,
    horizon: f64,
) -> Result<Vec<(f64, RoutingMatrix)>, FluidOptError> {
    if !(delta > 0.0) {
        return Err(FluidOptError::Step(delta));
    }
    let steps = ((schedule.end() - schedule.start()) / delta - 1e-9).ceil().max(1.0) as usize;
    (0..steps)
        .into_par_iter()
        .map(|k| {
            let t = schedule.start() + k as f64 * delta;
            let sol = solve_lookahead(schedule, t, horizon)?;
            Ok((t, sol.q_star.expect("solve_coefficients recovers q")))
        })
        .collect()
}

/// Per-slot optimal routing (the standard fluid policy for a schedule), as a table keyed by slot start.
pub fn slot_table(schedule: &Schedule) -> Result<Vec<(f64, RoutingMatrix)>, FluidOptError> {
    schedule
        .slots
        .par_iter()
        .map(|slot| {
            let sol = solve_fluid_optimum(&slot.params, &slot.params.rewards_or_default())?;
            Ok((slot.start, sol.q_star.expect("solve_coefficients recovers q")))
        })
        .collect()
}

/// Largest residual of the fluid constraints for a solution together with its routing `q`.
pub fn routing_residual(sol: &FluidSolution, params: &NetworkParams, q: &RoutingMatrix) -> f64 {
    let r = sol.regions();
    let mut worst: f64 = 0.0;
    let full_in: Vec<f64> = (0..r)
        .map(|i| (0..r).map(|k| params.mu[(k, i)] * sol.f_bar[(k, i)]).sum())
        .collect();
    for i in 0..r {
        for j in 0..r {
            worst = worst.max(
                (params.lambda[i] * params.p[(i, j)] * sol.a_bar[i] - params.mu[(i, j)] * sol.f_bar[(i, j)])
                    .abs(),
            );
            if i != j {
                worst = worst.max((params.mu[(i, j)] * sol.e_bar[(i, j)] - q[(i, j)] * full_in[i]).abs());
            }
        }
        let empty_in: f64 = (0..r)
            .filter(|&k| k != i)
            .map(|k| params.mu[(k, i)] * sol.e_bar[(k, i)])
            .sum();
        worst = worst.max((params.lambda[i] * sol.a_bar[i] - empty_in - q[(i, i)] * full_in[i]).abs());
        worst = worst.max(((1.0 - sol.a_bar[i]) * sol.e_bar[(i, i)]).abs());
        worst = worst.max(-sol.a_bar[i]).max(sol.a_bar[i] - 1.0);
    }
    for x in sol.e_bar.iter().chain(sol.f_bar.iter()) {
        worst = worst.max(-x);
    }
    worst.max((sol.mass() - 1.0).abs())
}
