use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use ridenet::equilibrium::equilibrium_point;
use ridenet::fluid_opt::{solve_fluid_optimum, utility};
use ridenet::model::{self, NetworkParams, RoutingMatrix};
use ridenet::mva::analyze;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Pos {
    Idle(usize),
    Full(usize, usize),
    Empty(usize, usize),
}

fn positions(r: usize) -> Vec<Pos> {
    let mut v: Vec<Pos> = (0..r).map(Pos::Idle).collect();
    for i in 0..r {
        for j in 0..r {
            v.push(Pos::Full(i, j));
            if i != j {
                v.push(Pos::Empty(i, j));
            }
        }
    }
    v
}

fn compositions(n: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![n]];
    }
    (0..=n)
        .flat_map(|k| {
            compositions(n - k, parts - 1).into_iter().map(move |mut rest| {
                rest.insert(0, k);
                rest
            })
        })
        .collect()
}

/// Availabilities from the stationary law of the full closed-network chain.
fn ctmc_availability(p: &NetworkParams, q: &RoutingMatrix, n: usize) -> Vec<f64> {
    let r = p.regions();
    let pos = positions(r);
    let at: HashMap<Pos, usize> = pos.iter().enumerate().map(|(k, x)| (*x, k)).collect();
    let states = compositions(n, pos.len());
    let index: HashMap<Vec<usize>, usize> = states.iter().enumerate().map(|(k, s)| (s.clone(), k)).collect();
    let m = states.len();
    let mut gen = DMatrix::<f64>::zeros(m, m);
    let q = q.matrix();
    for (s, from) in states.iter().enumerate() {
        let mut add = |src: Pos, dst: Pos, rate: f64| {
            if rate == 0.0 {
                return;
            }
            let mut to = from.clone();
            to[at[&src]] -= 1;
            to[at[&dst]] += 1;
            let t = index[&to];
            gen[(s, t)] += rate;
            gen[(s, s)] -= rate;
        };
        for (k, x) in pos.iter().enumerate() {
            let c = from[k] as f64;
            if c == 0.0 {
                continue;
            }
            match *x {
                Pos::Idle(i) => {
                    for j in 0..r {
                        add(*x, Pos::Full(i, j), n as f64 * p.lambda[i] * p.p[(i, j)]);
                    }
                }
                Pos::Full(i, j) => {
                    let rate = c * p.mu[(i, j)];
                    for k in 0..r {
                        let dst = if k == j { Pos::Idle(j) } else { Pos::Empty(j, k) };
                        add(*x, dst, rate * q[(j, k)]);
                    }
                }
                Pos::Empty(i, j) => add(*x, Pos::Idle(j), c * p.mu[(i, j)]),
            }
        }
    }
    let mut a = gen.transpose();
    let mut b = DVector::zeros(m);
    a.row_mut(m - 1).fill(1.0);
    b[m - 1] = 1.0;
    let pi = a.lu().solve(&b).unwrap();
    (0..r)
        .map(|i| {
            let k = at[&Pos::Idle(i)];
            states.iter().zip(pi.iter()).filter(|(s, _)| s[k] > 0).map(|(_, w)| w).sum()
        })
        .collect()
}

fn three_region() -> NetworkParams {
    let travel = model::matrix_from_rows(&[&[1.0, 2.0, 1.5], &[2.0, 0.5, 1.0], &[1.5, 1.0, 2.5]]);
    let p = model::matrix_from_rows(&[&[0.2, 0.5, 0.3], &[0.6, 0.1, 0.3], &[0.3, 0.3, 0.4]]);
    NetworkParams::from_mean_travel(3, vec![0.5, 0.3, 0.2], travel, p).unwrap()
}

#[test]
fn mva_matches_exact_chain() {
    let two = model::two_region();
    let q2 = RoutingMatrix::from_rows(&[&[0.7, 0.3], &[0.1, 0.9]]).unwrap();
    let three = three_region();
    let q3 = RoutingMatrix::from_rows(&[&[0.5, 0.25, 0.25], &[0.2, 0.8, 0.0], &[0.1, 0.3, 0.6]]).unwrap();
    for (p, q, ns) in [(&two, &q2, 1..=5), (&three, &q3, 1..=3)] {
        for n in ns {
            let exact = ctmc_availability(p, q, n);
            let mva = analyze(p, q, n).unwrap().availability;
            for (a, b) in exact.iter().zip(&mva) {
                assert!((a - b).abs() < 1e-10, "n = {n}: {exact:?} vs {mva:?}");
            }
        }
    }
}

#[test]
fn two_region_lp_beats_every_grid_routing() {
    let p = model::two_region();
    let rewards = p.rewards_or_default();
    let lp = solve_fluid_optimum(&p, &rewards).unwrap().value;
    let steps = 200;
    let mut best = 0.0f64;
    for a in 0..=steps {
        for b in 0..=steps {
            let (x, y) = (a as f64 / steps as f64, b as f64 / steps as f64);
            let q = RoutingMatrix::from_rows(&[&[1.0 - x, x], &[y, 1.0 - y]]).unwrap();
            if let Ok(eq) = equilibrium_point(&p, &q) {
                let u = utility(&eq.a_bar, &p, &rewards);
                assert!(u <= lp + 1e-9, "q = ({x}, {y}) gives {u} > {lp}");
                best = best.max(u);
            }
        }
    }
    assert!(lp - best < 1e-2, "grid best {best}, lp {lp}");
}
