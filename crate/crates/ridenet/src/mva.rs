//! Exact mean value analysis of the closed network under a static routing matrix.

use rayon::prelude::*;
use thiserror::Error;

use crate::equilibrium::{routing_chain, stationary_vector, EquilibriumError};
use crate::model::{Matrix, NetworkParams, RoutingMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum MvaError {
    #[error(transparent)]
    Chain(#[from] EquilibriumError),
    #[error("population must be at least 1")]
    Population,
    #[error("station {0} has a nonpositive service rate")]
    Rate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StationKind {
    SingleServer,
    InfiniteServer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StationLabel {
    /// Idle cars waiting for passengers at a region.
    Idle(usize),
    /// Cars carrying a passenger from `.0` to `.1`.
    Full(usize, usize),
    /// Empty cars repositioning from `.0` to `.1`.
    Empty(usize, usize),
}

impl std::fmt::Display for StationLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StationLabel::Idle(i) => write!(f, "idle({})", i + 1),
            StationLabel::Full(i, j) => write!(f, "full({},{})", i + 1, j + 1),
            StationLabel::Empty(i, j) => write!(f, "empty({},{})", i + 1, j + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Station {
    pub kind: StationKind,
    pub rate: f64,
    pub label: StationLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationLayout {
    pub stations: Vec<Station>,
    /// Visit ratios, normalized so that `idle(1)` (or the first visited idle station) has 1.
    pub visit_ratios: Vec<f64>,
    /// Station-to-station transition probabilities of a single car.
    pub routing: Matrix,
}

impl StationLayout {
    pub fn position(&self, label: StationLabel) -> Option<usize> {
        self.stations.iter().position(|s| s.label == label)
    }

    /// Largest violation of `v = R^T v`.
    pub fn balance_residual(&self) -> f64 {
        let v = nalgebra::DVector::from_column_slice(&self.visit_ratios);
        (self.routing.transpose() * &v - &v).amax()
    }
}

/// Station network for population `n_cars`: idle stations serve at `n_cars * lambda_i`.
pub fn station_layout(
    params: &NetworkParams,
    q: &RoutingMatrix,
    n_cars: usize,
) -> Result<StationLayout, MvaError> {
    let r = params.regions();
    let b = routing_chain(&params.p, q);
    let mut x = stationary_vector(&b)?;
    let norm = x.iter().copied().find(|&v| v > 0.0).unwrap_or(1.0);
    x.iter_mut().for_each(|v| *v /= norm);

    let mut candidates: Vec<(Station, f64)> = Vec::with_capacity(2 * r * r);
    for i in 0..r {
        candidates.push((
            Station {
                kind: StationKind::SingleServer,
                rate: n_cars as f64 * params.lambda[i],
                label: StationLabel::Idle(i),
            },
            x[i],
        ));
    }
    for i in 0..r {
        for j in 0..r {
            candidates.push((
                Station {
                    kind: StationKind::InfiniteServer,
                    rate: params.mu[(i, j)],
                    label: StationLabel::Full(i, j),
                },
                x[i] * params.p[(i, j)],
            ));
        }
    }
    let dropoffs: Vec<f64> = (0..r)
        .map(|j| (0..r).map(|i| x[i] * params.p[(i, j)]).sum())
        .collect();
    for j in 0..r {
        for k in (0..r).filter(|&k| k != j) {
            candidates.push((
                Station {
                    kind: StationKind::InfiniteServer,
                    rate: params.mu[(j, k)],
                    label: StationLabel::Empty(j, k),
                },
                dropoffs[j] * q[(j, k)],
            ));
        }
    }
    let (stations, visit_ratios): (Vec<Station>, Vec<f64>) =
        candidates.into_iter().filter(|(_, v)| *v > 0.0).unzip();
    for s in &stations {
        if !(s.rate > 0.0) {
            return Err(MvaError::Rate(s.label.to_string()));
        }
    }

    let index = |label: StationLabel| stations.iter().position(|s| s.label == label);
    let n = stations.len();
    let mut routing = Matrix::zeros(n, n);
    for (a, s) in stations.iter().enumerate() {
        match s.label {
            StationLabel::Idle(i) => {
                for j in 0..r {
                    if let Some(b) = index(StationLabel::Full(i, j)) {
                        routing[(a, b)] = params.p[(i, j)];
                    }
                }
            }
            StationLabel::Full(_, j) => {
                for k in 0..r {
                    let target = if k == j {
                        StationLabel::Idle(j)
                    } else {
                        StationLabel::Empty(j, k)
                    };
                    if let Some(b) = index(target) {
                        routing[(a, b)] = q[(j, k)];
                    }
                }
            }
            StationLabel::Empty(_, k) => {
                if let Some(b) = index(StationLabel::Idle(k)) {
                    routing[(a, b)] = 1.0;
                }
            }
        }
    }
    Ok(StationLayout {
        stations,
        visit_ratios,
        routing,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvaResult {
    pub n_cars: usize,
    /// `P(E_ii > 0)` per region.
    pub availability: Vec<f64>,
    pub mean_queue: Vec<f64>,
    pub throughput: f64,
    pub layout: StationLayout,
}

/// Exact MVA recursion up to population `n_cars`.
pub fn analyze(params: &NetworkParams, q: &RoutingMatrix, n_cars: usize) -> Result<MvaResult, MvaError> {
    if n_cars == 0 {
        return Err(MvaError::Population);
    }
    let layout = station_layout(params, q, n_cars)?;
    let v = &layout.visit_ratios;
    let mut queue = vec![0.0; layout.stations.len()];
    let mut wait = vec![0.0; layout.stations.len()];
    let mut throughput = 0.0;
    for n in 1..=n_cars {
        for (k, s) in layout.stations.iter().enumerate() {
            wait[k] = match s.kind {
                StationKind::InfiniteServer => 1.0 / s.rate,
                StationKind::SingleServer => (1.0 + queue[k]) / s.rate,
            };
        }
        let cycle: f64 = v.iter().zip(&wait).map(|(a, b)| a * b).sum();
        throughput = n as f64 / cycle;
        for k in 0..queue.len() {
            queue[k] = throughput * v[k] * wait[k];
        }
    }
    let availability = (0..params.regions())
        .map(|i| match layout.position(StationLabel::Idle(i)) {
            Some(k) => (throughput * v[k] / (n_cars as f64 * params.lambda[i])).min(1.0),
            None => 0.0,
        })
        .collect();
    Ok(MvaResult {
        n_cars,
        availability,
        mean_queue: queue,
        throughput,
        layout,
    })
}

/// Availabilities at each population in `n_list` (each population scales the market).
pub fn availability_curve(
    params: &NetworkParams,
    q: &RoutingMatrix,
    n_list: &[usize],
) -> Result<Vec<(usize, Vec<f64>)>, MvaError> {
    n_list
        .par_iter()
        .map(|&n| analyze(params, q, n).map(|res| (n, res.availability)))
        .collect()
}
