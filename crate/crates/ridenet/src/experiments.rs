//! Experiment drivers shared by the CLI and the acceptance tests.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::equilibrium::{equilibrium_point, EquilibriumError};
use crate::fluid_opt::{self, lookahead_table, slot_table, solve_fluid_optimum, FluidOptError};
use crate::model::{perturb, ModelError, NetworkParams, RoutingMatrix, Scenario, Schedule};
use crate::simulator::{
    self, policy_jlcr, policy_lookahead, policy_static, policy_sw, Estimate, RoutingPolicy, SimConfig,
    SimError, SimReport,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot parse policy `{0}` (expected static, jlcr:<eta>, sw or lookahead:<T>,<delta>)")]
    Policy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fluid(#[from] FluidOptError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// A routing policy named on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    /// Fluid-optimal static routing; per slot for schedules.
    Static,
    Jlcr(f64),
    Sw,
    Lookahead { horizon: f64, delta: f64 },
}

impl FromStr for PolicySpec {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ExperimentError::Policy(s.to_string());
        let (head, arg) = s.split_once(':').map_or((s, None), |(h, a)| (h, Some(a)));
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| bad());
        match (head.trim(), arg) {
            ("static", None) => Ok(PolicySpec::Static),
            ("sw", None) => Ok(PolicySpec::Sw),
            ("jlcr", Some(a)) => {
                let eta = num(a)?;
                if !(0.0..=1.0).contains(&eta) {
                    return Err(bad());
                }
                Ok(PolicySpec::Jlcr(eta))
            }
            ("lookahead", Some(a)) => {
                let (t, d) = a.split_once(',').ok_or_else(bad)?;
                let (horizon, delta) = (num(t)?, num(d)?);
                if !(horizon > 0.0 && delta > 0.0) {
                    return Err(bad());
                }
                Ok(PolicySpec::Lookahead { horizon, delta })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Static => write!(f, "static"),
            PolicySpec::Jlcr(eta) => write!(f, "jlcr:{eta}"),
            PolicySpec::Sw => write!(f, "sw"),
            PolicySpec::Lookahead { horizon, delta } => write!(f, "lookahead:{horizon},{delta}"),
        }
    }
}

/// Optimal static routing for the scenario's base parameters.
pub fn optimal_routing(params: &NetworkParams) -> Result<RoutingMatrix, ExperimentError> {
    let sol = solve_fluid_optimum(params, &params.rewards_or_default())?;
    Ok(sol.q_star.expect("solver recovers q"))
}

/// Builds the policy; `q` overrides the fluid-optimal matrix for `static` on a static scenario.
pub fn build_policy(
    spec: &PolicySpec,
    scenario: &Scenario,
    q: Option<&RoutingMatrix>,
) -> Result<Box<dyn RoutingPolicy>, ExperimentError> {
    Ok(match (spec, scenario) {
        (PolicySpec::Jlcr(eta), _) => Box::new(policy_jlcr(*eta)?),
        (PolicySpec::Sw, _) => Box::new(policy_sw()),
        (PolicySpec::Static | PolicySpec::Lookahead { .. }, Scenario::Static(p)) => {
            let q = match q {
                Some(q) => q.clone(),
                None => optimal_routing(p)?,
            };
            Box::new(policy_static(q))
        }
        (PolicySpec::Static, Scenario::Scheduled(s)) => Box::new(policy_lookahead(slot_table(s)?)?),
        (PolicySpec::Lookahead { horizon, delta }, Scenario::Scheduled(s)) => {
            Box::new(policy_lookahead(lookahead_table(s, *delta, *horizon)?)?)
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub sigma: f64,
    pub samples: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Fluid utility under the true parameters of the routing optimized for noisy estimates;
/// replication `k` perturbs with seed `seed + k`.
pub fn robustness(
    params: &NetworkParams,
    sigma: f64,
    reps: usize,
    seed: u64,
) -> Result<RobustnessRow, ExperimentError> {
    let rewards = params.rewards_or_default();
    let samples = (0..reps)
        .into_par_iter()
        .map(|k| {
            let noisy = perturb(params, sigma, seed.wrapping_add(k as u64))?;
            let q_hat = optimal_routing(&noisy)?;
            let eq = equilibrium_point(params, &q_hat)?;
            Ok(fluid_opt::utility(&eq.a_bar, params, &rewards))
        })
        .collect::<Result<Vec<f64>, ExperimentError>>()?;
    let est = Estimate::from_samples(&samples);
    Ok(RobustnessRow {
        sigma,
        mean: est.mean,
        std: est.std,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub policy: String,
    pub n_cars: usize,
    pub utility: Estimate,
}

/// Simulated utility of each policy at each fleet size.
pub fn compare(
    scenario: &Scenario,
    n_list: &[usize],
    specs: &[PolicySpec],
    config: &SimConfig,
) -> Result<Vec<CompareRow>, ExperimentError> {
    let mut rows = Vec::new();
    for spec in specs {
        let policy = build_policy(spec, scenario, None)?;
        for &n in n_list {
            let sc = scenario.clone().with_n_cars(n);
            let rep = simulator::simulate(&sc, policy.as_ref(), config)?;
            rows.push(CompareRow {
                policy: spec.to_string(),
                n_cars: n,
                utility: rep.utility,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookaheadRow {
    /// `None` for the per-slot standard fluid policy.
    pub horizon: Option<f64>,
    /// Fulfilled fraction per unit-length bin from the schedule start.
    pub per_bin: Vec<(f64, f64, Estimate)>,
    pub total: Estimate,
}

/// Standard fluid policy versus lookahead policies over a schedule; each row runs `seeds`
/// replications from the proportional start with no warmup.
pub fn lookahead_eval(
    schedule: &Schedule,
    horizons: &[f64],
    delta: f64,
    seeds: usize,
    seed: u64,
) -> Result<Vec<LookaheadRow>, ExperimentError> {
    let scenario = Scenario::Scheduled(schedule.clone());
    let mut config = SimConfig::new(schedule.end() - schedule.start(), seed, seeds);
    config.warmup = Some(0.0);
    config.report_interval = Some(1.0);
    let run = |spec: &PolicySpec| -> Result<SimReport, ExperimentError> {
        let policy = build_policy(spec, &scenario, None)?;
        Ok(simulator::simulate(&scenario, policy.as_ref(), &config)?)
    };
    let mut specs = vec![(None, PolicySpec::Static)];
    specs.extend(horizons.iter().map(|&h| (Some(h), PolicySpec::Lookahead { horizon: h, delta })));
    specs
        .iter()
        .map(|(h, spec)| {
            let rep = run(spec)?;
            Ok(LookaheadRow {
                horizon: *h,
                per_bin: rep.bins,
                total: rep.utility,
            })
        })
        .collect()
}
