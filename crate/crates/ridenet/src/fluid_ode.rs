//! Fluid dynamics of the scaled network with the idle-region regulator.

use thiserror::Error;

pub use crate::equilibrium::distance_to_equilibrium;
use crate::model::{FluidState, Matrix, NetworkParams, RoutingMatrix};

/// `e_ii` at or below this level counts as an empty idle pool.
pub const BOUNDARY_TOL: f64 = 1e-10;
/// Default Euler step.
pub const DEFAULT_DT: f64 = 1e-3;
/// Largest tolerated per-step mass drift before the integrator gives up.
pub const MAX_STEP_DRIFT: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum OdeError {
    #[error("step dt = {dt} too large: mass drifted by {drift:.3e} at t = {time}")]
    DtTooLarge { dt: f64, time: f64, drift: f64 },
    #[error("step size must be positive and finite, got {0}")]
    Step(f64),
    #[error("initial state is not on the simplex (mass {0})")]
    State(f64),
    #[error("state has {found} regions, parameters have {expected}")]
    Dimension { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Derivative {
    pub de: Matrix,
    pub df: Matrix,
    pub u_dot: Vec<f64>,
}

struct Flows {
    /// `sum_k mu_ki f_ki`
    full_in: Vec<f64>,
    /// `sum_{j != i} mu_ji e_ji + Q_ii full_in_i`
    inflow: Vec<f64>,
}

fn flows(state: &FluidState, params: &NetworkParams, q: &RoutingMatrix) -> Flows {
    let r = params.regions();
    let mu = &params.mu;
    let full_in: Vec<f64> = (0..r)
        .map(|i| (0..r).map(|k| mu[(k, i)] * state.f[(k, i)]).sum())
        .collect();
    let inflow = (0..r)
        .map(|i| {
            let empty: f64 = (0..r)
                .filter(|&j| j != i)
                .map(|j| mu[(j, i)] * state.e[(j, i)])
                .sum();
            empty + q[(i, i)] * full_in[i]
        })
        .collect();
    Flows { full_in, inflow }
}

fn rates(
    state: &FluidState,
    params: &NetworkParams,
    q: &RoutingMatrix,
    fl: &Flows,
    served: &[f64],
) -> (Matrix, Matrix) {
    let r = params.regions();
    let mu = &params.mu;
    let df = Matrix::from_fn(r, r, |i, j| served[i] * params.p[(i, j)] - mu[(i, j)] * state.f[(i, j)]);
    let de = Matrix::from_fn(r, r, |i, j| {
        if i == j {
            fl.inflow[i] - served[i]
        } else {
            q[(i, j)] * fl.full_in[i] - mu[(i, j)] * state.e[(i, j)]
        }
    });
    (de, df)
}

/// Right-hand side of the fluid equations with the reflection rule for `u`.
pub fn derivative(state: &FluidState, params: &NetworkParams, q: &RoutingMatrix) -> Derivative {
    let fl = flows(state, params, q);
    let u_dot: Vec<f64> = (0..params.regions())
        .map(|i| {
            if state.e[(i, i)] > BOUNDARY_TOL {
                0.0
            } else {
                (1.0 - fl.inflow[i] / params.lambda[i]).max(0.0)
            }
        })
        .collect();
    let served: Vec<f64> = u_dot
        .iter()
        .zip(&params.lambda)
        .map(|(u, l)| l * (1.0 - u))
        .collect();
    let (de, df) = rates(state, params, q, &fl, &served);
    Derivative { de, df, u_dot }
}

/// Explicit Euler stepper. Within a step, region `i` serves at rate `lambda_i` unless that
/// would drain `e_ii` below zero, in which case it serves exactly what lands `e_ii` at zero;
/// the shortfall is the regulator increment.
pub struct FluidIntegrator<'a> {
    params: &'a NetworkParams,
    q: &'a RoutingMatrix,
    dt: f64,
    pub time: f64,
    pub state: FluidState,
    pub u: Vec<f64>,
}

impl<'a> FluidIntegrator<'a> {
    pub fn new(
        state0: FluidState,
        params: &'a NetworkParams,
        q: &'a RoutingMatrix,
        dt: f64,
    ) -> Result<Self, OdeError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(OdeError::Step(dt));
        }
        let r = params.regions();
        if state0.regions() != r || q.regions() != r {
            return Err(OdeError::Dimension {
                expected: r,
                found: if state0.regions() != r { state0.regions() } else { q.regions() },
            });
        }
        if !state0.is_valid(1e-8) {
            return Err(OdeError::State(state0.mass()));
        }
        Ok(FluidIntegrator {
            params,
            q,
            dt,
            time: 0.0,
            state: state0,
            u: vec![0.0; r],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances one step and returns the regulator increments `du`.
    pub fn step(&mut self) -> Result<Vec<f64>, OdeError> {
        let (params, dt) = (self.params, self.dt);
        let r = params.regions();
        let fl = flows(&self.state, params, self.q);
        let served: Vec<f64> = (0..r)
            .map(|i| {
                let l = params.lambda[i];
                let idle = self.state.e[(i, i)];
                if idle + dt * (fl.inflow[i] - l) >= 0.0 {
                    l
                } else {
                    (fl.inflow[i] + idle / dt).clamp(0.0, l)
                }
            })
            .collect();
        let (de, df) = rates(&self.state, params, self.q, &fl, &served);
        self.state.e += de * dt;
        self.state.f += df * dt;
        for x in self.state.e.iter_mut().chain(self.state.f.iter_mut()) {
            *x = x.clamp(0.0, 1.0);
        }
        let mass = self.state.mass();
        let drift = (mass - 1.0).abs();
        if drift > MAX_STEP_DRIFT {
            return Err(OdeError::DtTooLarge {
                dt,
                time: self.time,
                drift,
            });
        }
        self.state.e /= mass;
        self.state.f /= mass;
        let du: Vec<f64> = (0..r)
            .map(|i| dt * (1.0 - served[i] / params.lambda[i]))
            .collect();
        for (u, d) in self.u.iter_mut().zip(&du) {
            *u += d;
        }
        self.time += dt;
        Ok(du)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<FluidState>,
    /// Cumulative regulator `u(t)` per grid point.
    pub u: Vec<Vec<f64>>,
}

impl FluidTrajectory {
    pub fn last(&self) -> &FluidState {
        self.states.last().expect("trajectory has the initial point")
    }
}

/// Integrates to `t_end`, recording every step.
pub fn integrate(
    state0: FluidState,
    params: &NetworkParams,
    q: &RoutingMatrix,
    t_end: f64,
    dt: f64,
) -> Result<FluidTrajectory, OdeError> {
    integrate_sampled(state0, params, q, t_end, dt, 1)
}

/// Integrates to `t_end`, recording the initial point and every `record_every`-th step
/// (and always the final one).
pub fn integrate_sampled(
    state0: FluidState,
    params: &NetworkParams,
    q: &RoutingMatrix,
    t_end: f64,
    dt: f64,
    record_every: usize,
) -> Result<FluidTrajectory, OdeError> {
    let mut it = FluidIntegrator::new(state0, params, q, dt)?;
    let steps = (t_end / dt).round() as usize;
    let every = record_every.max(1);
    let mut traj = FluidTrajectory {
        times: vec![0.0],
        states: vec![it.state.clone()],
        u: vec![it.u.clone()],
    };
    for k in 1..=steps {
        it.step()?;
        if k % every == 0 || k == steps {
            traj.times.push(k as f64 * dt);
            traj.states.push(it.state.clone());
            traj.u.push(it.u.clone());
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::equilibrium_point;
    use crate::model;

    fn two_region_half() -> (NetworkParams, RoutingMatrix) {
        let q = RoutingMatrix::from_rows(&[&[1.0, 0.0], &[0.5, 0.5]]).unwrap();
        (model::two_region(), q)
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let (p, q) = two_region_half();
        let eq = equilibrium_point(&p, &q).unwrap();
        let d = derivative(&eq.as_state(), &p, &q);
        assert!(d.de.amax() < 1e-10 && d.df.amax() < 1e-10);

        let q = RoutingMatrix::from_rows(&[&[1.0, 0.0], &[1.0 / 3.0, 2.0 / 3.0]]).unwrap();
        let eq = equilibrium_point(&p, &q).unwrap();
        let d = derivative(&eq.as_state(), &p, &q);
        assert!(d.de.amax() < 1e-10 && d.df.amax() < 1e-10);
        let traj = integrate(eq.as_state(), &p, &q, 5.0, 1e-3).unwrap();
        assert!((&traj.last().e - &eq.e_bar).amax() < 1e-6);
        assert!((&traj.last().f - &eq.f_bar).amax() < 1e-6);
    }

    #[test]
    fn reflection_cases() {
        let (p, q) = two_region_half();
        // Region 0 idle pool empty, lots of empty cars arriving: no regulation.
        let mut s = FluidState::zeros(2);
        s.e[(1, 0)] = 1.0;
        let d = derivative(&s, &p, &q);
        assert_eq!(d.u_dot[0], 0.0);
        assert!(d.de[(0, 0)] > 0.0);
        // Region 0 idle pool empty, weak inflow: absorbed at the boundary.
        let mut s = FluidState::zeros(2);
        s.e[(1, 0)] = 0.1;
        s.e[(1, 1)] = 0.9;
        let d = derivative(&s, &p, &q);
        assert!(d.u_dot[0] > 0.0);
        assert_eq!(d.de[(0, 0)], 0.0);
    }

    #[test]
    fn two_region_converges_from_corner() {
        let (p, q) = two_region_half();
        let eq = equilibrium_point(&p, &q).unwrap();
        let traj = integrate_sampled(FluidState::all_idle_at(2, 0), &p, &q, 200.0, 1e-3, 1000).unwrap();
        for s in &traj.states {
            assert!((s.mass() - 1.0).abs() < 1e-6);
        }
        for w in traj.u.windows(2) {
            assert!(w[0].iter().zip(&w[1]).all(|(a, b)| b >= a));
        }
        assert!(distance_to_equilibrium(traj.last(), &eq) < 1e-3);
    }

    #[test]
    fn bad_inputs() {
        let (p, q) = two_region_half();
        assert!(matches!(
            FluidIntegrator::new(FluidState::all_idle_at(2, 0), &p, &q, 0.0),
            Err(OdeError::Step(_))
        ));
        assert!(matches!(
            FluidIntegrator::new(FluidState::zeros(2), &p, &q, 1e-3),
            Err(OdeError::State(_))
        ));
    }

    #[test]
    fn oversized_step_is_detected() {
        let (p, q) = two_region_half();
        let p = p.scale_lambda(1e4);
        let mut s = FluidState::zeros(2);
        s.f[(0, 1)] = 0.5;
        s.e[(1, 0)] = 0.5;
        let mut p = p;
        p.mu *= 1e4;
        let mut it = FluidIntegrator::new(s, &p, &q, 1.0).unwrap();
        assert!(matches!(it.step(), Err(OdeError::DtTooLarge { .. })));
    }
}
