//! Minimal fluid fleet for perfect availability, and a routing that attains it.

use thiserror::Error;

use crate::linprog::{self, LpError, LpProblem, LpStatus, Relation};
use crate::model::{Matrix, NetworkParams, RoutingMatrix};

#[derive(Debug, Error)]
pub enum FleetError {
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("fleet-sizing LP returned status {0:?}")]
    Status(LpStatus),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetSizingResult {
    /// Minimal total fluid mass; above 1 the current fleet cannot serve every request.
    pub kappa: f64,
    pub q_kappa: RoutingMatrix,
    pub e_kappa: Matrix,
    pub f_kappa: Matrix,
    pub triangle_ok: bool,
}

impl FleetSizingResult {
    /// Evaluates the flows induced by routing `q` at full availability.
    pub fn from_routing(params: &NetworkParams, q: RoutingMatrix) -> Self {
        let r = params.regions();
        let f = full_flows(params);
        let d = params.dropoff_rates();
        let e = Matrix::from_fn(r, r, |i, j| {
            if i == j {
                0.0
            } else {
                q[(i, j)] * d[i] / params.mu[(i, j)]
            }
        });
        FleetSizingResult {
            kappa: f.sum() + e.sum(),
            q_kappa: q,
            e_kappa: e,
            f_kappa: f,
            triangle_ok: triangle_holds(params),
        }
    }

    /// True when the fleet is too small for perfect availability.
    pub fn undersupplied(&self) -> bool {
        self.kappa > 1.0
    }
}

/// `f_ij = lambda_i P_ij / mu_ij`.
pub fn full_flows(params: &NetworkParams) -> Matrix {
    let r = params.regions();
    Matrix::from_fn(r, r, |i, j| params.lambda[i] * params.p[(i, j)] / params.mu[(i, j)])
}

/// `1/mu_ik <= 1/mu_ij + 1/mu_jk` for all distinct `i, j, k`.
pub fn triangle_holds(params: &NetworkParams) -> bool {
    let t = params.mean_travel();
    let r = params.regions();
    (0..r).all(|i| {
        (0..r).all(|j| {
            (0..r).all(|k| i == j || j == k || i == k || t[(i, k)] <= t[(i, j)] + t[(j, k)] + 1e-12)
        })
    })
}

/// Every car drives back empty along the reverse of the route it arrived on.
pub fn backhaul_routing(params: &NetworkParams) -> RoutingMatrix {
    let r = params.regions();
    let d = params.dropoff_rates();
    let mut q = Matrix::zeros(r, r);
    for i in 0..r {
        if d[i] <= 0.0 {
            q[(i, i)] = 1.0;
            continue;
        }
        for j in 0..r {
            q[(i, j)] = params.lambda[j] * params.p[(j, i)] / d[i];
        }
    }
    RoutingMatrix::new(q).expect("back-haul rows sum to one")
}

/// Largest residual of the perfect-availability flow equations for `result`.
pub fn fleet_residual(result: &FleetSizingResult, params: &NetworkParams) -> f64 {
    let r = params.regions();
    let d = params.dropoff_rates();
    let (q, e, f) = (&result.q_kappa, &result.e_kappa, &result.f_kappa);
    let mut worst: f64 = 0.0;
    for i in 0..r {
        let row: f64 = (0..r).map(|j| q[(i, j)]).sum();
        worst = worst.max((row - 1.0).abs());
        let empty_in: f64 = (0..r)
            .filter(|&k| k != i)
            .map(|k| params.mu[(k, i)] * e[(k, i)])
            .sum();
        worst = worst.max((params.lambda[i] - empty_in - q[(i, i)] * d[i]).abs());
        for j in 0..r {
            worst = worst.max((params.mu[(i, j)] * f[(i, j)] - params.lambda[i] * params.p[(i, j)]).abs());
            worst = worst.max(-q[(i, j)]).max(-e[(i, j)]);
            if i != j {
                worst = worst.max((params.mu[(i, j)] * e[(i, j)] - q[(i, j)] * d[i]).abs());
            }
        }
    }
    worst.max((result.kappa - f.sum() - e.sum()).abs())
}

/// Minimizes total mass `sum f + sum_{i != j} e` over routings that keep every region fully available.
pub fn min_fleet(params: &NetworkParams) -> Result<FleetSizingResult, FleetError> {
    let r = params.regions();
    let d = params.dropoff_rates();
    let qv = |i: usize, j: usize| i * r + j;
    let ev = |i: usize, j: usize| r * r + i * r + j;
    let mut lp = LpProblem::new(2 * r * r);
    for i in 0..r {
        for j in 0..r {
            if i == j {
                lp.bounds[ev(i, i)] = (0.0, 0.0);
            } else {
                lp.objective[ev(i, j)] = -1.0;
                lp.add_sparse(
                    &[(ev(i, j), params.mu[(i, j)]), (qv(i, j), -d[i])],
                    Relation::Eq,
                    0.0,
                );
            }
        }
    }
    for i in 0..r {
        let mut terms: Vec<(usize, f64)> = (0..r)
            .filter(|&k| k != i)
            .map(|k| (ev(k, i), params.mu[(k, i)]))
            .collect();
        terms.push((qv(i, i), d[i]));
        lp.add_sparse(&terms, Relation::Eq, params.lambda[i]);
        let row: Vec<(usize, f64)> = (0..r).map(|j| (qv(i, j), 1.0)).collect();
        lp.add_sparse(&row, Relation::Eq, 1.0);
    }
    let sol = linprog::solve(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(FleetError::Status(sol.status));
    }
    let mut q = Matrix::from_fn(r, r, |i, j| sol.x[qv(i, j)].max(0.0));
    for i in 0..r {
        let s = q.row(i).sum();
        q.row_mut(i).iter_mut().for_each(|x| *x /= s);
    }
    let q = RoutingMatrix::new(q).expect("LP rows sum to one");
    Ok(FleetSizingResult::from_routing(params, q))
}

/// Shifts routing mass so that every `q_ii > 0` without increasing the total mass.
/// Requires the triangle inequality on mean travel times; otherwise returns the input
/// with `triangle_ok = false`.
pub fn repair_diagonal(result: &FleetSizingResult, params: &NetworkParams) -> FleetSizingResult {
    if !triangle_holds(params) {
        let mut out = result.clone();
        out.triangle_ok = false;
        return out;
    }
    let r = params.regions();
    let d = params.dropoff_rates();
    let mut q = result.q_kappa.matrix().clone();
    let tiny = 1e-12;
    for i in 0..r {
        if q[(i, i)] > tiny {
            continue;
        }
        if d[i] <= 0.0 {
            q.row_mut(i).fill(0.0);
            q[(i, i)] = 1.0;
            continue;
        }
        let ell = (0..r).find(|&l| l != i && d[l] > 0.0 && q[(l, i)] > tiny);
        let m = (0..r).find(|&m| m != i && q[(i, m)] > tiny);
        let (Some(ell), Some(m)) = (ell, m) else {
            continue;
        };
        let rho = d[ell] / d[i];
        let eps = 0.5 * q[(ell, i)].min(q[(i, m)] / rho);
        q[(ell, i)] -= eps;
        q[(ell, m)] += eps;
        q[(i, m)] -= eps * rho;
        q[(i, i)] += eps * rho;
    }
    let q = RoutingMatrix::new(q).expect("repair preserves row sums");
    FleetSizingResult::from_routing(params, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, matrix_from_rows};

    fn balanced() -> NetworkParams {
        NetworkParams::from_mean_travel(
            10,
            vec![0.5, 0.5],
            Matrix::from_element(2, 2, 1.0),
            matrix_from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]),
        )
        .unwrap()
    }

    #[test]
    fn two_region_kappa() {
        let p = model::two_region();
        let res = min_fleet(&p).unwrap();
        assert!((res.kappa - 4.0 / 3.0).abs() < 1e-8, "{}", res.kappa);
        assert!((res.e_kappa[(1, 0)] - 1.0 / 3.0).abs() < 1e-8);
        assert!(fleet_residual(&res, &p) < 1e-8);
        assert!(res.undersupplied());
    }

    #[test]
    fn balanced_kappa_is_one() {
        let p = balanced();
        let res = min_fleet(&p).unwrap();
        assert!((res.kappa - 1.0).abs() < 1e-10);
        assert!(res.e_kappa.amax() < 1e-12);
    }

    #[test]
    fn kappa_floor_is_full_mass() {
        let p = model::nine_region_didi();
        let res = min_fleet(&p).unwrap();
        assert!(res.kappa >= full_flows(&p).sum() - 1e-12);
        assert!(fleet_residual(&res, &p) < 1e-8);
    }

    #[test]
    fn backhaul_is_feasible() {
        for p in [model::two_region(), model::nine_region_didi(), balanced()] {
            let res = FleetSizingResult::from_routing(&p, backhaul_routing(&p));
            assert!(fleet_residual(&res, &p) < 1e-12);
        }
    }

    #[test]
    fn repair_identity_when_diagonal_positive() {
        let p = model::two_region();
        let res = min_fleet(&p).unwrap();
        let fixed = repair_diagonal(&res, &p);
        assert!((0..2).all(|i| fixed.q_kappa[(i, i)] > 0.0));
        assert!((fixed.kappa - res.kappa).abs() < 1e-8);
    }

    /// Three regions on a line where moving an empty car 3 -> 1 costs the same as
    /// relaying it 3 -> 2 -> 1, so an optimum may leave `q_22 = 0`.
    fn line() -> (NetworkParams, RoutingMatrix) {
        let p = NetworkParams::from_mean_travel(
            10,
            vec![1.0, 1.0, 1.0],
            matrix_from_rows(&[&[1.0, 1.0, 2.0], &[1.0, 1.0, 1.0], &[2.0, 1.0, 1.0]]),
            matrix_from_rows(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0]]),
        )
        .unwrap();
        let q = RoutingMatrix::from_rows(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.5, 0.5]]).unwrap();
        (p, q)
    }

    #[test]
    fn repair_restores_positive_diagonal() {
        let (p, q) = line();
        let res = FleetSizingResult::from_routing(&p, q);
        let best = min_fleet(&p).unwrap();
        assert!((res.kappa - best.kappa).abs() < 1e-10);
        assert_eq!(res.q_kappa[(1, 1)], 0.0);
        let fixed = repair_diagonal(&res, &p);
        assert!((0..3).all(|i| fixed.q_kappa[(i, i)] > 0.0));
        assert!(fixed.kappa <= res.kappa + 1e-12);
        assert!(fleet_residual(&fixed, &p) < 1e-12);
        assert!((fixed.q_kappa[(1, 1)] - 0.5).abs() < 1e-12);
        assert!((fixed.q_kappa[(2, 0)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn repair_skipped_without_triangle() {
        let (mut p, q) = line();
        p.mu[(2, 0)] = 1.0 / 5.0;
        let res = FleetSizingResult::from_routing(&p, q);
        let out = repair_diagonal(&res, &p);
        assert!(!out.triangle_ok);
        assert_eq!(out.q_kappa, res.q_kappa);
    }
}
