//! Fluid equilibrium for a fixed static routing matrix and the Lyapunov function.

use nalgebra::DVector;
use thiserror::Error;

use crate::fluid_opt::SATURATION_TOL;
use crate::model::{FluidState, Matrix, NetworkParams, RoutingMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum EquilibriumError {
    #[error("routing chain B = (PQ)^T is reducible")]
    Reducible,
    #[error("stationary system of the routing chain is singular")]
    Singular,
    #[error("routing matrix has {found} regions, parameters have {expected}")]
    Dimension { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumPoint {
    pub a_bar: Vec<f64>,
    pub e_bar: Matrix,
    pub f_bar: Matrix,
    /// Idle mass parked at fully available regions.
    pub m_bar: f64,
    pub chain_matrix: Matrix,
}

impl EquilibriumPoint {
    pub fn regions(&self) -> usize {
        self.a_bar.len()
    }

    pub fn saturated(&self, i: usize) -> bool {
        self.a_bar[i] >= 1.0 - SATURATION_TOL
    }

    pub fn as_state(&self) -> FluidState {
        FluidState {
            e: self.e_bar.clone(),
            f: self.f_bar.clone(),
        }
    }
}

/// `B_ij = sum_l P_jl Q_li`, i.e. `(P Q)^T`; column stochastic.
pub fn routing_chain(p: &Matrix, q: &RoutingMatrix) -> Matrix {
    (p * q.matrix()).transpose()
}

/// Strong connectivity of the directed graph with an edge `j -> i` when `B_ij > 0`.
pub fn is_irreducible(b: &Matrix) -> bool {
    let r = b.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; r];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(j) = stack.pop() {
            for i in 0..r {
                let w = if forward { b[(i, j)] } else { b[(j, i)] };
                if w > 0.0 && !seen[i] {
                    seen[i] = true;
                    stack.push(i);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    r > 0 && reach(true) && reach(false)
}

/// Probability vector `y` with `B y = y` for column-stochastic irreducible `B`.
pub(crate) fn stationary_vector(b: &Matrix) -> Result<Vec<f64>, EquilibriumError> {
    if !is_irreducible(b) {
        return Err(EquilibriumError::Reducible);
    }
    let r = b.nrows();
    let mut m = Matrix::identity(r, r) - b;
    m.row_mut(r - 1).fill(1.0);
    let mut rhs = DVector::zeros(r);
    rhs[r - 1] = 1.0;
    let y = m.lu().solve(&rhs).ok_or(EquilibriumError::Singular)?;
    Ok(y.iter().map(|v| v.max(0.0)).collect())
}

/// Constructs the equilibrium `(a, e, f)` reached under static routing `q`.
pub fn equilibrium_point(
    params: &NetworkParams,
    q: &RoutingMatrix,
) -> Result<EquilibriumPoint, EquilibriumError> {
    let r = params.regions();
    if q.regions() != r {
        return Err(EquilibriumError::Dimension {
            expected: r,
            found: q.regions(),
        });
    }
    let b = routing_chain(&params.p, q);
    let y = stationary_vector(&b)?;
    let mut a_star: Vec<f64> = (0..r).map(|i| y[i] / params.lambda[i]).collect();
    let top = a_star.iter().cloned().fold(0.0, f64::max);
    a_star.iter_mut().for_each(|a| *a /= top);

    let mu = &params.mu;
    let c_tilde: Vec<f64> = (0..r)
        .map(|k| {
            let full: f64 = (0..r).map(|j| params.p[(k, j)] / mu[(k, j)]).sum();
            let empty: f64 = (0..r)
                .map(|i| {
                    params.p[(k, i)]
                        * (0..r)
                            .filter(|&j| j != i)
                            .map(|j| q[(i, j)] / mu[(i, j)])
                            .sum::<f64>()
                })
                .sum();
            params.lambda[k] * (full + empty)
        })
        .collect();
    let load: f64 = c_tilde.iter().zip(&a_star).map(|(c, a)| c * a).sum();
    let scale = (1.0 / load).min(1.0);
    let a_bar: Vec<f64> = a_star.iter().map(|a| (scale * a).min(1.0)).collect();

    let f_bar = Matrix::from_fn(r, r, |i, j| {
        params.lambda[i] * params.p[(i, j)] * a_bar[i] / mu[(i, j)]
    });
    let full_in: Vec<f64> = (0..r)
        .map(|i| (0..r).map(|k| mu[(k, i)] * f_bar[(k, i)]).sum())
        .collect();
    let mut e_bar = Matrix::from_fn(r, r, |i, j| {
        if i == j {
            0.0
        } else {
            q[(i, j)] * full_in[i] / mu[(i, j)]
        }
    });
    let saturated: Vec<usize> = (0..r).filter(|&i| a_bar[i] >= 1.0 - SATURATION_TOL).collect();
    let m_bar = if saturated.is_empty() {
        0.0
    } else {
        (1.0 - f_bar.sum() - e_bar.sum()).max(0.0)
    };
    let weight: f64 = saturated.iter().map(|&i| params.lambda[i]).sum();
    for &i in &saturated {
        e_bar[(i, i)] = m_bar * params.lambda[i] / weight;
    }
    Ok(EquilibriumPoint {
        a_bar,
        e_bar,
        f_bar,
        m_bar,
        chain_matrix: b,
    })
}

/// Largest violation of the equilibrium equations, complementarity, bounds and total mass.
pub fn residuals(point: &EquilibriumPoint, params: &NetworkParams, q: &RoutingMatrix) -> f64 {
    let r = params.regions();
    let mu = &params.mu;
    let (a, e, f) = (&point.a_bar, &point.e_bar, &point.f_bar);
    let full_in: Vec<f64> = (0..r)
        .map(|i| (0..r).map(|k| mu[(k, i)] * f[(k, i)]).sum())
        .collect();
    let mut worst: f64 = 0.0;
    for i in 0..r {
        for j in 0..r {
            worst = worst.max((params.lambda[i] * params.p[(i, j)] * a[i] - mu[(i, j)] * f[(i, j)]).abs());
            if i != j {
                worst = worst.max((mu[(i, j)] * e[(i, j)] - q[(i, j)] * full_in[i]).abs());
            }
        }
        let empty_in: f64 = (0..r).filter(|&k| k != i).map(|k| mu[(k, i)] * e[(k, i)]).sum();
        worst = worst.max((params.lambda[i] * a[i] - empty_in - q[(i, i)] * full_in[i]).abs());
        worst = worst.max(((1.0 - a[i]) * e[(i, i)]).abs());
        worst = worst.max(-a[i]).max(a[i] - 1.0);
    }
    for x in e.iter().chain(f.iter()) {
        worst = worst.max(-x);
    }
    worst.max((e.sum() + f.sum() - 1.0).abs())
}

/// `V = |f - f_bar|_1 + |e_off - e_bar_off|_1 + idle mass at unsaturated regions
/// + |m_bar - idle mass at saturated regions|`.
pub fn lyapunov(point: &EquilibriumPoint, state: &FluidState) -> f64 {
    let r = point.regions();
    let mut v: f64 = (&state.f - &point.f_bar).abs().sum();
    let mut parked = 0.0;
    for i in 0..r {
        for j in 0..r {
            if i != j {
                v += (state.e[(i, j)] - point.e_bar[(i, j)]).abs();
            } else if point.saturated(i) {
                parked += state.e[(i, i)];
            } else {
                v += state.e[(i, i)];
            }
        }
    }
    v + (point.m_bar - parked).abs()
}

/// Max-norm analogue of [`lyapunov`]: the sup-distance to the equilibrium set.
pub fn distance_to_equilibrium(state: &FluidState, point: &EquilibriumPoint) -> f64 {
    let r = point.regions();
    let mut d: f64 = (&state.f - &point.f_bar).amax();
    let mut parked = 0.0;
    for i in 0..r {
        for j in 0..r {
            if i != j {
                d = d.max((state.e[(i, j)] - point.e_bar[(i, j)]).abs());
            } else if point.saturated(i) {
                parked += state.e[(i, i)];
            } else {
                d = d.max(state.e[(i, i)]);
            }
        }
    }
    d.max((parked - point.m_bar).abs())
}
