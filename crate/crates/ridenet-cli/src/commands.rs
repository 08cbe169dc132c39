use std::path::{Path, PathBuf};

use serde_json::json;

use ridenet::equilibrium::{distance_to_equilibrium, equilibrium_point, lyapunov};
use ridenet::experiments::{self, PolicySpec};
use ridenet::fleet_sizing::{min_fleet, repair_diagonal};
use ridenet::fluid_ode::integrate_sampled;
use ridenet::fluid_opt::{solve_fluid_optimum, FluidSolution};
use ridenet::model::{self, FluidState, Matrix, NetworkParams, RoutingMatrix, Scenario};
use ridenet::mva;
use ridenet::simulator::{self, SimConfig};

use crate::error::CliError;
use crate::output::{emit, fmt, read_matrix, render, Manifest, Table};
use crate::{CompareArgs, FleetArgs, FluidArgs, LookaheadArgs, MvaArgs, OptimizeArgs, RobustnessArgs, SimulateArgs};

/// Trajectory rows written by `fluid`, at most.
const FLUID_ROWS: usize = 1000;
const STATIC_HORIZON: f64 = 1000.0;
const JLCR_SWEEP: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn load(spec: &str) -> Result<(Scenario, Option<RoutingMatrix>), CliError> {
    match spec.strip_prefix("builtin:") {
        Some(name) => Ok((model::builtin_scenario(name)?, None)),
        None => {
            let loaded = model::load_scenario(spec)?;
            Ok((loaded.scenario, loaded.q))
        }
    }
}

fn static_params<'a>(scenario: &'a Scenario, command: &str) -> Result<&'a NetworkParams, CliError> {
    scenario
        .as_static()
        .ok_or_else(|| CliError::Invalid(format!("`{command}` needs a static scenario, got a schedule")))
}

/// Each slot of a schedule, or the single static parameter set, with its time span.
fn slots(scenario: &Scenario) -> Vec<(f64, f64, &NetworkParams)> {
    match scenario {
        Scenario::Static(p) => vec![(0.0, f64::INFINITY, p)],
        Scenario::Scheduled(s) => s.slots.iter().map(|x| (x.start, x.end, &x.params)).collect(),
    }
}

fn square(path: &Path, r: usize) -> Result<Matrix, CliError> {
    let rows = read_matrix(path)?;
    if rows.len() != r || rows.iter().any(|row| row.len() != r) {
        return Err(CliError::Invalid(format!(
            "{}: expected a {r}x{r} matrix",
            path.display()
        )));
    }
    Ok(Matrix::from_fn(r, r, |i, j| rows[i][j]))
}

fn routing(
    choice: Option<&str>,
    params: &NetworkParams,
    from_file: Option<RoutingMatrix>,
) -> Result<RoutingMatrix, CliError> {
    match (choice, from_file) {
        (None, Some(q)) => Ok(q),
        (None, None) | (Some("optimal"), _) => Ok(experiments::optimal_routing(params)?),
        (Some("stay"), _) => Ok(RoutingMatrix::identity(params.regions())),
        (Some(path), _) => Ok(RoutingMatrix::new(square(Path::new(path), params.regions())?)?),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn solution_rows(table: &mut Table, slot: usize, sol: &FluidSolution) -> Result<(), CliError> {
    let r = sol.regions();
    let k = slot.to_string();
    table.row([k.as_str(), "value", "", "", &fmt(sol.value)])?;
    for i in 0..r {
        table.row([k.as_str(), "a_bar", &(i + 1).to_string(), "", &fmt(sol.a_bar[i])])?;
    }
    let mut matrix = |name: &str, m: &Matrix| -> Result<(), CliError> {
        for i in 0..r {
            for j in 0..r {
                let (si, sj) = ((i + 1).to_string(), (j + 1).to_string());
                table.row([k.as_str(), name, &si, &sj, &fmt(m[(i, j)])])?;
            }
        }
        Ok(())
    };
    matrix("e_bar", &sol.e_bar)?;
    matrix("f_bar", &sol.f_bar)?;
    if let Some(q) = &sol.q_star {
        matrix("q", q.matrix())?;
    }
    Ok(())
}

fn matrix_csv(m: &Matrix) -> Result<String, CliError> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in m.row_iter() {
        writer.write_record(row.iter().map(|x| fmt(*x)))?;
    }
    let bytes = writer.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn optimize(args: &OptimizeArgs) -> Result<(), CliError> {
    let (scenario, _) = load(&args.scenario)?;
    let rewards = args
        .rewards
        .as_deref()
        .map(|p| square(p, scenario.regions()))
        .transpose()?;
    let mut manifest = Manifest::new(
        "optimize",
        &args.scenario,
        json!({ "rewards": args.rewards, "out": args.out }),
    );
    let mut table = Table::new(["slot", "kind", "i", "j", "value"])?;
    let mut q_files = Vec::new();
    let scheduled = scenario.as_schedule().is_some();
    for (k, (_, _, params)) in slots(&scenario).into_iter().enumerate() {
        let params = match &rewards {
            Some(c) => {
                let p = params.clone().with_rewards(c.clone());
                p.check()?;
                p
            }
            None => params.clone(),
        };
        let sol = solve_fluid_optimum(&params, &params.rewards_or_default())?;
        solution_rows(&mut table, k, &sol)?;
        if let (Some(out), Some(q)) = (&args.out, &sol.q_star) {
            let name = if scheduled { format!(".slot{k}.q.csv") } else { ".q.csv".to_string() };
            q_files.push((with_suffix(out, &name), matrix_csv(q.matrix())?));
        }
    }
    let body = table.into_string()?;
    match &args.out {
        None => emit(&manifest, &body, None),
        Some(out) => {
            let solution = with_suffix(out, ".solution.csv");
            manifest.outputs = std::iter::once(&solution)
                .chain(q_files.iter().map(|(p, _)| p))
                .map(|p| p.display().to_string())
                .collect();
            emit(&manifest, &body, Some(&solution))?;
            for (path, text) in &q_files {
                std::fs::write(path, render(&manifest, text))?;
            }
            Ok(())
        }
    }
}

pub fn mva(args: &MvaArgs) -> Result<(), CliError> {
    let (scenario, file_q) = load(&args.scenario)?;
    let params = static_params(&scenario, "mva")?;
    let q = routing(args.q.as_deref(), params, file_q)?;
    let n_list = if args.n_list.is_empty() {
        vec![params.n_cars]
    } else {
        args.n_list.clone()
    };
    let curve = mva::availability_curve(params, &q, &n_list)?;
    let mut table = Table::new(["n", "region", "availability"])?;
    for (n, avail) in &curve {
        for (i, a) in avail.iter().enumerate() {
            table.row([n.to_string(), (i + 1).to_string(), fmt(*a)])?;
        }
    }
    let manifest = Manifest::new("mva", &args.scenario, json!({ "q": args.q, "n_list": n_list }));
    emit(&manifest, &table.into_string()?, None)
}

fn default_horizon(scenario: &Scenario) -> f64 {
    match scenario.as_schedule() {
        Some(s) => s.end() - s.start(),
        None => STATIC_HORIZON,
    }
}

fn seed_list(seed: u64, reps: usize) -> Vec<u64> {
    (0..reps as u64).map(|k| seed.wrapping_add(k)).collect()
}

fn parse_policy(s: &str) -> Result<PolicySpec, CliError> {
    Ok(s.parse::<PolicySpec>()?)
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let (scenario, file_q) = load(&args.scenario)?;
    let scenario = match args.n {
        Some(n) => scenario.with_n_cars(n),
        None => scenario,
    };
    let spec = parse_policy(&args.policy)?;
    let policy = experiments::build_policy(&spec, &scenario, file_q.as_ref())?;
    let horizon = args.horizon.unwrap_or_else(|| default_horizon(&scenario));
    let mut config = SimConfig::new(horizon, args.seed, args.reps);
    config.warmup = args.warmup;
    let report = simulator::simulate(&scenario, policy.as_ref(), &config)?;

    let mut table = Table::new(["region", "requests", "fulfilled", "fraction", "half_width"])?;
    let r = scenario.regions();
    let (mut req_all, mut ful_all) = (0u64, 0u64);
    for i in 0..r {
        let req: u64 = report.runs.iter().map(|m| m.requests[i]).sum();
        let ful: u64 = report.runs.iter().map(|m| m.fulfilled[i]).sum();
        req_all += req;
        ful_all += ful;
        let est = &report.fulfilled_fraction[i];
        table.row([(i + 1).to_string(), req.to_string(), ful.to_string(), fmt(est.mean), fmt(est.half_width)])?;
    }
    let total = if req_all == 0 { 0.0 } else { ful_all as f64 / req_all as f64 };
    table.row(["all".to_string(), req_all.to_string(), ful_all.to_string(), fmt(total), String::new()])?;
    table.row([
        "utility".to_string(),
        req_all.to_string(),
        ful_all.to_string(),
        fmt(report.utility.mean),
        fmt(report.utility.half_width),
    ])?;
    let manifest = Manifest::new(
        "simulate",
        &args.scenario,
        json!({
            "policy": spec.to_string(),
            "n": scenario.n_cars(),
            "horizon": horizon,
            "warmup": config.warmup(),
            "reps": args.reps,
        }),
    )
    .seeds(seed_list(args.seed, args.reps));
    emit(&manifest, &table.into_string()?, None)
}

/// Fluid optimum; for schedules, weighted by each slot's share of requests.
fn fluid_bound(scenario: &Scenario) -> Result<f64, CliError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (start, end, params) in slots(scenario) {
        let value = solve_fluid_optimum(params, &params.rewards_or_default())?.value;
        let weight = if end.is_finite() { (end - start) * params.total_lambda() } else { 1.0 };
        num += weight * value;
        den += weight;
    }
    Ok(num / den)
}

pub fn compare(args: &CompareArgs) -> Result<(), CliError> {
    let (scenario, _) = load(&args.scenario)?;
    let specs = if args.policies.is_empty() {
        let mut v = vec![PolicySpec::Static, PolicySpec::Sw];
        v.extend(JLCR_SWEEP.iter().map(|&eta| PolicySpec::Jlcr(eta)));
        v
    } else {
        args.policies.iter().map(|s| parse_policy(s)).collect::<Result<_, _>>()?
    };
    let n_list = if args.n_list.is_empty() {
        vec![scenario.n_cars()]
    } else {
        args.n_list.clone()
    };
    let horizon = args.horizon.unwrap_or_else(|| default_horizon(&scenario));
    let config = SimConfig::new(horizon, args.seed, args.seeds);
    let bound = fluid_bound(&scenario)?;
    let rows = experiments::compare(&scenario, &n_list, &specs, &config)?;

    let mut table = Table::new(["policy", "n", "utility", "std", "half_width"])?;
    for n in &n_list {
        table.row(["fluid_lp".to_string(), n.to_string(), fmt(bound), fmt(0.0), fmt(0.0)])?;
    }
    for row in &rows {
        table.row([
            row.policy.clone(),
            row.n_cars.to_string(),
            fmt(row.utility.mean),
            fmt(row.utility.std),
            fmt(row.utility.half_width),
        ])?;
    }
    let manifest = Manifest::new(
        "compare",
        &args.scenario,
        json!({
            "policies": specs.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            "n_list": n_list,
            "horizon": horizon,
            "reps": args.seeds,
        }),
    )
    .seeds(seed_list(args.seed, args.seeds));
    emit(&manifest, &table.into_string()?, None)
}

pub fn lookahead_eval(args: &LookaheadArgs) -> Result<(), CliError> {
    let (scenario, _) = load(&args.scenario)?;
    let scenario = match args.n {
        Some(n) => scenario.with_n_cars(n),
        None => scenario,
    };
    let schedule = scenario
        .as_schedule()
        .ok_or_else(|| CliError::Invalid("`lookahead-eval` needs a schedule scenario".into()))?;
    if let Some(t) = args.t_list.iter().find(|t| !(**t > 0.0)) {
        return Err(CliError::Invalid(format!("lookahead horizon must be positive, got {t}")));
    }
    if !(args.delta > 0.0) {
        return Err(CliError::Invalid(format!("delta must be positive, got {}", args.delta)));
    }
    let rows = experiments::lookahead_eval(schedule, &args.t_list, args.delta, args.seeds, args.seed)?;

    let mut table = Table::new(["policy", "bin", "start", "end", "fraction", "std", "half_width"])?;
    for row in &rows {
        let name = match row.horizon {
            None => "standard".to_string(),
            Some(h) => format!("lookahead:{h}"),
        };
        for (k, (start, end, est)) in row.per_bin.iter().enumerate() {
            table.row([
                name.clone(),
                (k + 1).to_string(),
                fmt(*start),
                fmt(*end),
                fmt(est.mean),
                fmt(est.std),
                fmt(est.half_width),
            ])?;
        }
        table.row([
            name,
            "total".to_string(),
            fmt(schedule.start()),
            fmt(schedule.end()),
            fmt(row.total.mean),
            fmt(row.total.std),
            fmt(row.total.half_width),
        ])?;
    }
    let manifest = Manifest::new(
        "lookahead-eval",
        &args.scenario,
        json!({
            "T_list": args.t_list,
            "delta": args.delta,
            "n": schedule.n_cars(),
            "reps": args.seeds,
        }),
    )
    .seeds(seed_list(args.seed, args.seeds));
    emit(&manifest, &table.into_string()?, None)
}

pub fn robustness(args: &RobustnessArgs) -> Result<(), CliError> {
    let (scenario, _) = load(&args.scenario)?;
    let params = static_params(&scenario, "robustness")?;
    let mut table = Table::new(["sigma", "reps", "mean", "std"])?;
    for &sigma in &args.sigma_list {
        let row = experiments::robustness(params, sigma, args.reps, args.seed)?;
        table.row([fmt(sigma), args.reps.to_string(), fmt(row.mean), fmt(row.std)])?;
    }
    let manifest = Manifest::new(
        "robustness",
        &args.scenario,
        json!({ "sigma_list": args.sigma_list, "reps": args.reps }),
    )
    .seeds(seed_list(args.seed, args.reps));
    emit(&manifest, &table.into_string()?, None)
}

pub fn fleet_size(args: &FleetArgs) -> Result<(), CliError> {
    let (scenario, _) = load(&args.scenario)?;
    let mut table = Table::new(["slot", "kind", "i", "j", "value"])?;
    for (k, (_, _, params)) in slots(&scenario).into_iter().enumerate() {
        let mut res = min_fleet(params)?;
        if res.triangle_ok {
            res = repair_diagonal(&res, params);
        }
        let slot = k.to_string();
        let verdict = if res.undersupplied() { "undersupplied" } else { "sufficient" };
        table.row([slot.as_str(), "kappa", "", "", &fmt(res.kappa)])?;
        table.row([slot.as_str(), "verdict", "", "", verdict])?;
        table.row([slot.as_str(), "triangle_ok", "", "", &res.triangle_ok.to_string()])?;
        let q = res.q_kappa.matrix();
        for i in 0..q.nrows() {
            for j in 0..q.ncols() {
                let (si, sj) = ((i + 1).to_string(), (j + 1).to_string());
                table.row([slot.as_str(), "q", &si, &sj, &fmt(q[(i, j)])])?;
            }
        }
    }
    let manifest = Manifest::new("fleet-size", &args.scenario, json!({}));
    emit(&manifest, &table.into_string()?, None)
}

fn initial_state(init: &str, params: &NetworkParams, eq: &FluidState) -> Result<FluidState, CliError> {
    let r = params.regions();
    match init {
        "equilibrium" => Ok(eq.clone()),
        "proportional" => {
            let total = params.total_lambda();
            let mut s = FluidState::zeros(r);
            for i in 0..r {
                s.e[(i, i)] = params.lambda[i] / total;
            }
            Ok(s)
        }
        other => {
            let region = other
                .strip_prefix("idle:")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|k| (1..=r).contains(k))
                .ok_or_else(|| {
                    CliError::Invalid(format!(
                        "bad --init `{other}` (expected proportional, equilibrium or idle:<1..{r}>)"
                    ))
                })?;
            Ok(FluidState::all_idle_at(r, region - 1))
        }
    }
}

pub fn fluid(args: &FluidArgs) -> Result<(), CliError> {
    let (scenario, file_q) = load(&args.scenario)?;
    let params = static_params(&scenario, "fluid")?;
    if !(args.t_end >= 0.0 && args.t_end.is_finite()) {
        return Err(CliError::Invalid(format!("--t-end must be nonnegative, got {}", args.t_end)));
    }
    let q = routing(args.q.as_deref(), params, file_q)?;
    let point = equilibrium_point(params, &q)?;
    let s0 = initial_state(&args.init, params, &point.as_state())?;
    let steps = (args.t_end / args.dt).round() as usize;
    let every = steps.div_ceil(FLUID_ROWS).max(1);
    let traj = integrate_sampled(s0, params, &q, args.t_end, args.dt, every)?;

    let r = params.regions();
    let mut header = vec!["t".to_string(), "mass".into(), "V".into(), "distance".into()];
    header.extend((1..=r).map(|i| format!("idle_{i}")));
    header.extend((1..=r).map(|i| format!("u_{i}")));
    let mut table = Table::new(&header)?;
    for ((t, s), u) in traj.times.iter().zip(&traj.states).zip(&traj.u) {
        let mut row = vec![
            fmt(*t),
            fmt(s.mass()),
            fmt(lyapunov(&point, s)),
            fmt(distance_to_equilibrium(s, &point)),
        ];
        row.extend((0..r).map(|i| fmt(s.e[(i, i)])));
        row.extend(u.iter().map(|x| fmt(*x)));
        table.row(&row)?;
    }
    let manifest = Manifest::new(
        "fluid",
        &args.scenario,
        json!({ "q": args.q, "t_end": args.t_end, "dt": args.dt, "init": args.init }),
    );
    emit(&manifest, &table.into_string()?, None)
}
