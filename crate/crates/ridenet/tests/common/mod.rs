#![allow(dead_code)]

use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use ridenet::equilibrium::{equilibrium_point, residuals, routing_chain};
use ridenet::fleet_sizing::{backhaul_routing, fleet_residual, FleetSizingResult};
use ridenet::fluid_ode::{derivative, FluidIntegrator};
use ridenet::fluid_opt::{build_relaxed_lp, routing_residual, solve_fluid_optimum};
use ridenet::linprog;
use ridenet::model::{self, perturb, FluidState, Matrix, NetworkParams, RoutingMatrix, Scenario};
use ridenet::mva::analyze;
use ridenet::simulator::{policy_jlcr, policy_static, policy_sw, simulate_once, RoutingPolicy, SimConfig};

fn stochastic_rows(r: usize, raw: &[f64]) -> Matrix {
    let mut m = Matrix::from_fn(r, r, |i, j| raw[i * r + j]);
    for i in 0..r {
        let s = m.row(i).sum();
        m.row_mut(i).iter_mut().for_each(|x| *x /= s);
    }
    m
}

/// Random valid parameters with 2 to 4 regions.
pub fn params() -> impl Strategy<Value = NetworkParams> {
    (2usize..=4).prop_flat_map(|r| {
        (
            vec(0.1f64..1.0, r),
            vec(0.5f64..3.0, r * r),
            vec(0.05f64..1.0, r * r),
            1usize..60,
        )
            .prop_map(move |(lambda, travel, p, n)| {
                let travel = Matrix::from_fn(r, r, |i, j| travel[i * r + j]);
                NetworkParams::from_mean_travel(n, lambda, travel, stochastic_rows(r, &p)).unwrap()
            })
    })
}

/// Random parameters paired with a random routing matrix of matching size.
pub fn params_and_routing() -> impl Strategy<Value = (NetworkParams, RoutingMatrix)> {
    params().prop_flat_map(|p| {
        let r = p.regions();
        (Just(p), vec(0.05f64..1.0, r * r))
            .prop_map(move |(p, q)| (p, RoutingMatrix::new(stochastic_rows(r, &q)).unwrap()))
    })
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn row_sums_ok(m: &Matrix) -> bool {
    m.row_iter().all(|row| (row.sum() - 1.0).abs() < 1e-9) && m.iter().all(|x| *x >= 0.0)
}

/// Perturbed demand, optimal routing and the embedded chain stay stochastic.
pub fn stochastic_matrices(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(params(), 0.0f64..0.5, any::<u64>()), |(p, sigma, seed)| {
            let noisy = perturb(&p, sigma, seed).unwrap();
            prop_assert!(row_sums_ok(&noisy.p));
            let sol = solve_fluid_optimum(&p, &p.rewards_or_default()).unwrap();
            let q = sol.q_star.unwrap();
            prop_assert!(row_sums_ok(q.matrix()));
            let b = routing_chain(&p.p, &q);
            prop_assert!(row_sums_ok(&b.transpose()));
            prop_assert!(row_sums_ok(backhaul_routing(&p).matrix()));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// The fluid optimum satisfies its LP and routing constraints.
pub fn lp_residuals(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&params(), |p| {
            let lp = build_relaxed_lp(&p, &p.rewards_or_default());
            let raw = linprog::solve(&lp).unwrap();
            prop_assert!(raw.is_optimal());
            prop_assert!(lp.max_violation(&raw.x) < 1e-8);
            let sol = solve_fluid_optimum(&p, &p.rewards_or_default()).unwrap();
            let q = sol.q_star.clone().unwrap();
            prop_assert!(routing_residual(&sol, &p, &q) < 1e-8);
            prop_assert!((sol.mass() - 1.0).abs() < 1e-8);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Scaling an LP row by a positive factor leaves the optimum unchanged.
pub fn lp_row_scaling(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(params(), 0.01f64..100.0, any::<prop::sample::Index>()), |(p, c, idx)| {
            let lp = build_relaxed_lp(&p, &p.rewards_or_default());
            let mut scaled = lp.clone();
            let k = idx.index(scaled.constraints.len());
            let row = &mut scaled.constraints[k];
            row.coeffs.iter_mut().for_each(|a| *a *= c);
            row.rhs *= c;
            let a = linprog::solve(&lp).unwrap().objective;
            let b = linprog::solve(&scaled).unwrap().objective;
            prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Rescaling time (all rates by the same factor) leaves the fluid optimum unchanged.
pub fn time_scale_invariance(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(params(), 0.1f64..10.0), |(p, c)| {
            let mut fast = p.scale_lambda(c);
            fast.mu *= c;
            let a = solve_fluid_optimum(&p, &p.rewards_or_default()).unwrap().value;
            let b = solve_fluid_optimum(&fast, &fast.rewards_or_default()).unwrap().value;
            prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Euler steps keep the fluid mass at one and the regulator nondecreasing.
pub fn ode_conservation(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(params_and_routing(), any::<u64>()), |((p, q), seed)| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s0 = FluidState::random(p.regions(), &mut rng);
            let mut it = FluidIntegrator::new(s0, &p, &q, 1e-3).unwrap();
            for _ in 0..2000 {
                let du = it.step().unwrap();
                prop_assert!(du.iter().all(|d| *d >= 0.0));
                prop_assert!((it.state.mass() - 1.0).abs() < 1e-6);
                prop_assert!(it.state.e.iter().chain(it.state.f.iter()).all(|x| *x >= 0.0));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// The equilibrium point is a fixed point of the fluid equations.
pub fn equilibrium_fixed_point(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&params_and_routing(), |(p, q)| {
            let eq = equilibrium_point(&p, &q).unwrap();
            prop_assert!(residuals(&eq, &p, &q) < 1e-8);
            let d = derivative(&eq.as_state(), &p, &q);
            prop_assert!(d.de.amax() < 1e-8 && d.df.amax() < 1e-8);
            prop_assert!((eq.as_state().mass() - 1.0).abs() < 1e-9);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Mean queue lengths of the closed network sum to the population.
pub fn mva_population(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(params_and_routing(), 1usize..300), |((p, q), n)| {
            let res = analyze(&p, &q, n).unwrap();
            let total: f64 = res.mean_queue.iter().sum();
            prop_assert!((total - n as f64).abs() < 1e-6 * n as f64, "{} vs {}", total, n);
            prop_assert!(res.availability.iter().all(|a| (0.0..=1.0).contains(a)));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Simulated cars are conserved and the counters are consistent, for every policy.
pub fn simulator_conservation(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(params_and_routing(), 0usize..3, any::<u64>()), |((p, q), which, seed)| {
            let policy: Box<dyn RoutingPolicy> = match which {
                0 => Box::new(policy_static(q)),
                1 => Box::new(policy_jlcr(0.5).unwrap()),
                _ => Box::new(policy_sw()),
            };
            let cfg = SimConfig::new(30.0, seed, 1);
            let m = simulate_once(&Scenario::Static(p.clone()), policy.as_ref(), &cfg, 0).unwrap();
            let mass = m.mean_e.sum() + m.mean_f.sum();
            prop_assert!((mass - 1.0).abs() < 1e-9, "mass {}", mass);
            for i in 0..p.regions() {
                prop_assert!(m.fulfilled[i] <= m.requests[i]);
                prop_assert!((0.0..=1.0).contains(&m.fulfilled_fraction[i]));
            }
            prop_assert!((0.0..=1.0).contains(&m.utility));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Scenario files read back to the same scenario and routing.
pub fn scenario_round_trip(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&params_and_routing(), |(p, q)| {
            let sc = Scenario::Static(p);
            let text = model::scenario_to_json(&sc, Some(&q));
            let back = model::parse_scenario(&text).unwrap();
            prop_assert_eq!(back.scenario, sc);
            prop_assert_eq!(back.q, Some(q));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// The back-haul routing always satisfies the perfect-availability flow equations.
pub fn backhaul_feasible(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&params(), |p| {
            let res = FleetSizingResult::from_routing(&p, backhaul_routing(&p));
            prop_assert!(fleet_residual(&res, &p) < 1e-10);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

use rand::SeedableRng;

pub fn run_all(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    let props: [(&'static str, fn(u32) -> Result<(), String>); 10] = [
        ("stochastic_matrices", stochastic_matrices),
        ("lp_residuals", lp_residuals),
        ("lp_row_scaling", lp_row_scaling),
        ("time_scale_invariance", time_scale_invariance),
        ("ode_conservation", ode_conservation),
        ("equilibrium_fixed_point", equilibrium_fixed_point),
        ("mva_population", mva_population),
        ("simulator_conservation", simulator_conservation),
        ("scenario_round_trip", scenario_round_trip),
        ("backhaul_feasible", backhaul_feasible),
    ];
    props.iter().map(|(name, f)| (*name, f(cases))).collect()
}
