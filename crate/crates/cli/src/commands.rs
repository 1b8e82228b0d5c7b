//! Subcommand implementations. Every output file is written atomically.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use fedsim_core::bounds::{
    epsilon_terms, gradient_moments, lr_constraint, render_report, scheme_presets, BoundInputs,
    CONSTANTS_NOTE,
};
use fedsim_core::engine::{
    run, run_ensemble, EnsembleReport, Horizon, Seeds, Trajectory, FINAL_WINDOW,
};
use fedsim_core::export::{fmt_float, oracle_csv, shard_csv, trajectory_csv, write_atomic};
use fedsim_core::model::{distribution_weights, Fleet};
use fedsim_core::oracle::{phi, scheme_params, Oracle, OracleScheme, MAX_ORACLE_ROUNDS};
use fedsim_core::shards::make_synthetic_shards;
use fedsim_core::stats::Welford;
use fedsim_core::timing::{HardwareModel, WaitPolicy};
use fedsim_core::weights::{plan_weights, WeightScheme};
use fedsim_core::FedError;

use crate::config::{shard_config, Experiment, ExperimentConfig, SweepAxis, SCHEMA_VERSION};
use crate::error::{io_err, CliError};

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub quiet: bool,
}

impl Invocation {
    pub fn load(
        config: &Path,
        out: Option<PathBuf>,
        seed: Option<u64>,
        quiet: bool,
    ) -> Result<Self, CliError> {
        let mut config = ExperimentConfig::load(config)?;
        if let Some(seed) = seed {
            config.ensemble.base_seed = seed;
        }
        let out = out
            .or_else(|| config.outputs.dir.clone())
            .unwrap_or_else(|| PathBuf::from("fedsim-out"));
        Ok(Self { config, out, quiet })
    }

    fn say(&self, text: &str) {
        if !self.quiet {
            print!("{text}");
        }
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out).map_err(io_err(&self.out))?;
        let path = self.out.join(name);
        write_atomic(&path, contents.as_bytes()).map_err(io_err(&path))?;
        Ok(path)
    }
}

/// Federated loss over the final rounds. With several seeds `mean` and `std`
/// average the per-seed window statistics and `seed_std` is their spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinalWindow {
    pub mean: f64,
    pub std: f64,
    pub seed_std: Option<f64>,
    pub members: usize,
    pub diverged: usize,
}

fn final_window(
    exp: &Experiment,
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> Result<FinalWindow, CliError> {
    if let [seed] = seeds {
        let traj = run(&exp.run_config(cfg, *seed))?;
        return Ok(single_window(&traj));
    }
    let report = run_ensemble(&exp.run_config(cfg, seeds[0]), seeds)?;
    Ok(ensemble_window(&report))
}

fn ensemble_window(report: &EnsembleReport) -> FinalWindow {
    let means: Welford = report.final_losses.iter().map(|(_, s)| s.mean).collect();
    let stds: Welford = report
        .final_losses
        .iter()
        .map(|(_, s)| s.variance.sqrt())
        .collect();
    FinalWindow {
        mean: nan_if_empty(&means, means.mean()),
        std: nan_if_empty(&stds, stds.mean()),
        seed_std: Some(nan_if_empty(&means, means.std_dev())),
        members: report.final_losses.len(),
        diverged: report.diverged,
    }
}

fn nan_if_empty(acc: &Welford, value: f64) -> f64 {
    if acc.count() == 0 {
        f64::NAN
    } else {
        value
    }
}

fn single_window(traj: &Trajectory) -> FinalWindow {
    let summary = traj.final_window_loss(FINAL_WINDOW);
    let diverged = usize::from(traj.diverged());
    FinalWindow {
        mean: summary.map_or(f64::NAN, |s| s.mean),
        std: summary.map_or(f64::NAN, |s| s.variance.sqrt()),
        seed_std: None,
        members: 1 - diverged,
        diverged,
    }
}

#[derive(Debug, Serialize)]
struct SeedLog {
    base: u64,
    hardware: u64,
    batching: u64,
    sampling: u64,
}

#[derive(Debug, Serialize)]
struct DivergenceLog {
    round: usize,
    reason: String,
}

/// Everything needed to re-execute the run bit-identically.
#[derive(Debug, Serialize)]
struct RunLog<'a> {
    schema_version: u32,
    tool_version: &'static str,
    command: &'static str,
    config_hash: String,
    config: &'a ExperimentConfig,
    seeds: Vec<SeedLog>,
    wall_time_s: f64,
    diverged: bool,
    divergence: Option<DivergenceLog>,
    rounds: usize,
    final_time: f64,
    never_served: usize,
    final_window: FinalWindow,
}

fn seed_log(seeds: &[u64]) -> Vec<SeedLog> {
    seeds
        .iter()
        .map(|&base| {
            let s = Seeds::from_base(base);
            SeedLog {
                base,
                hardware: s.hardware,
                batching: s.batching,
                sampling: s.sampling,
            }
        })
        .collect()
}

fn render_window(prefix: &str, w: &FinalWindow) -> String {
    let mut out = format!(
        "{prefix}mean = {}\n{prefix}std = {}\n",
        fmt_float(w.mean),
        fmt_float(w.std)
    );
    if let Some(s) = w.seed_std {
        let _ = writeln!(out, "{prefix}seed_std = {}", fmt_float(s));
    }
    out
}

/// Runs the first seed with full output; with several seeds the summary and
/// `ensemble.csv` come from the whole ensemble.
pub fn simulate(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let exp = Experiment::build(cfg)?;
    let seeds = cfg.ensemble.seed_list(1);
    let started = Instant::now();
    let traj = run(&exp.run_config(cfg, seeds[0]))?;
    let window = if seeds.len() == 1 {
        single_window(&traj)
    } else {
        let report = run_ensemble(&exp.run_config(cfg, seeds[0]), &seeds)?;
        let mut csv = String::from("n,t_mean,dist_sq_mean,dist_sq_std_err\n");
        for n in 0..report.rows {
            let _ = writeln!(
                csv,
                "{n},{},{},{}",
                fmt_float(report.time[n].mean),
                fmt_float(report.dist_sq[n].mean),
                fmt_float(report.dist_sq[n].std_err)
            );
        }
        inv.write("ensemble.csv", &csv)?;
        ensemble_window(&report)
    };
    let wall = started.elapsed().as_secs_f64();
    let path = inv.write("trajectory.csv", &trajectory_csv(&traj))?;
    let log = RunLog {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        command: "simulate",
        config_hash: cfg.hash(),
        config: cfg,
        seeds: seed_log(&seeds),
        wall_time_s: wall,
        diverged: traj.diverged(),
        divergence: traj.divergence.as_ref().map(|d| DivergenceLog {
            round: d.round,
            reason: d.reason.clone(),
        }),
        rounds: traj.rounds(),
        final_time: traj.last().time,
        never_served: traj.never_served,
        final_window: window,
    };
    let json = serde_json::to_string_pretty(&log).expect("run log serializes");
    inv.write("run.json", &(json + "\n"))?;

    let mut out = format!("wrote {}\n", path.display());
    let _ = writeln!(out, "rounds = {}", traj.rounds());
    let _ = writeln!(out, "final_time = {}", fmt_float(traj.last().time));
    if let Some(d) = &traj.divergence {
        let _ = writeln!(out, "diverged at round {}: {}", d.round, d.reason);
    }
    if traj.never_served > 0 {
        let _ = writeln!(out, "warning: {} client(s) never served", traj.never_served);
    }
    out.push_str(&render_window("final_window.", &window));
    inv.say(&out);
    Ok(())
}

fn unsupported(msg: impl Into<String>) -> CliError {
    CliError::Sim(FedError::Unsupported(msg.into()))
}

/// Maps the configured run onto an oracle scheme, or explains why none fits.
fn oracle_scheme(exp: &Experiment) -> Result<(OracleScheme, Vec<f64>), CliError> {
    let fleet = &exp.fleet;
    let m = fleet.len();
    if fleet.dim() != 1 {
        return Err(unsupported(
            "the oracle needs scalar models (one optimum coordinate)",
        ));
    }
    let mut optima = Vec::with_capacity(m);
    for obj in fleet.objectives() {
        let quad = obj
            .as_quadratic()
            .ok_or_else(|| unsupported("the oracle needs quadratic clients"))?;
        if quad.curvature() != [0.5] || quad.noise_std() != 0.0 {
            return Err(unsupported(
                "the oracle needs noiseless clients ½(θ − θ_i*)² (curvature = 0.5, noise_std = 0)",
            ));
        }
        optima.push(quad.optimum().expect("positive curvature")[0]);
    }
    if fleet
        .importances()
        .iter()
        .any(|&p| (p * m as f64 - 1.0).abs() > 1e-12)
    {
        return Err(unsupported("the oracle needs equal importance p_i = 1/M"));
    }
    if fleet.has_phase_offsets() {
        return Err(unsupported(
            "the oracle needs every client started at t = 0",
        ));
    }
    let tau = fleet.compute_times();
    let equal_rates = tau.iter().all(|&t| t == tau[0]);
    let exponential = matches!(exp.hardware, HardwareModel::Exponential { .. });
    let scheme = match exp.policy {
        WaitPolicy::Synchronous => OracleScheme::Sync,
        WaitPolicy::SampleUniform { m } => OracleScheme::SyncUniform { m },
        WaitPolicy::Asynchronous | WaitPolicy::FedFix { .. } if !exponential => {
            return Err(unsupported(
                "the async and hybrid oracles assume memoryless exponential hardware",
            ))
        }
        WaitPolicy::Asynchronous | WaitPolicy::FedFix { .. } if !equal_rates => {
            return Err(unsupported(
                "heterogeneous-rate async: the oracle's staleness law holds only for identical exponential rates",
            ))
        }
        WaitPolicy::Asynchronous => OracleScheme::Async,
        WaitPolicy::FedFix { interval } => OracleScheme::Hybrid {
            window: interval / tau[0],
        },
        other => return Err(unsupported(format!("no oracle for the {} policy", other.name()))),
    };
    let d = scheme_params(&scheme, m)?.d;
    if exp.plan.d.iter().any(|&x| (x - d).abs() > 1e-12 * d) {
        return Err(unsupported(format!(
            "the {} oracle assumes d_i = {d} for every client; the config gives {:?}",
            scheme.name(),
            exp.plan.d
        )));
    }
    Ok((scheme, optima))
}

#[derive(Debug, Clone, PartialEq)]
struct CheckRow {
    round: usize,
    quantity: &'static str,
    oracle: f64,
    empirical: f64,
    std_err: f64,
    judged: bool,
    pass: bool,
}

/// Slack on top of 3 standard errors; lets deterministic schemes (zero
/// spread) pass on roundoff alone.
const ROUNDOFF_SLACK: f64 = 1e-9;

fn check_row(
    round: usize,
    quantity: &'static str,
    oracle: f64,
    empirical: f64,
    std_err: f64,
    judged: bool,
) -> CheckRow {
    let pass = (empirical - oracle).abs() <= 3.0 * std_err + ROUNDOFF_SLACK * (1.0 + oracle.abs());
    CheckRow {
        round,
        quantity,
        oracle,
        empirical,
        std_err,
        judged,
        pass,
    }
}

/// Compares ensemble moments with the closed-form recursions at rounds
/// 1, 5, 20 and N. The mean is judged for sync, uniform and async; the
/// second moment for sync and uniform. Other rows are informational.
pub fn oracle_check(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let exp = Experiment::build(cfg)?;
    let (scheme, optima) = oracle_scheme(&exp)?;
    let rounds = match exp.horizon {
        Horizon::Rounds(n) if (1..=MAX_ORACLE_ROUNDS).contains(&n) => n,
        Horizon::Rounds(n) => {
            return Err(CliError::Config(format!(
                "oracle-check needs 1 <= horizon.rounds <= {MAX_ORACLE_ROUNDS}, got {n}"
            )))
        }
        Horizon::Time(_) => {
            return Err(CliError::Config("oracle-check needs horizon.rounds".into()))
        }
    };
    let clients = optima.len();
    let contraction = phi(exp.local.lr, exp.local.steps);
    let oracle = Oracle::new(
        scheme.clone(),
        clients,
        contraction,
        cfg.optimization.server_lr,
    )?;
    let optimum = optima.iter().sum::<f64>() / clients as f64;
    let initial = cfg.optimization.initial.as_ref().map_or(0.0, |v| v[0]);
    let mean = oracle.expectation(rounds, optimum)?;
    let means = mean.mean(initial);
    let second = match scheme {
        OracleScheme::HybridEvo { .. } => None,
        _ => Some(oracle.second_moment(&optima, initial, rounds)?),
    };
    let mean_exact = matches!(
        scheme,
        OracleScheme::Sync | OracleScheme::SyncUniform { .. } | OracleScheme::Async
    );
    let second_exact = matches!(
        scheme,
        OracleScheme::Sync | OracleScheme::SyncUniform { .. }
    );

    let seeds = cfg.ensemble.seed_list(2);
    let report = run_ensemble(&exp.run_config(cfg, seeds[0]), &seeds)?;
    if report.rows <= rounds {
        return Err(CliError::CheckFailed(format!(
            "only {} of {} ensemble members reached round {rounds}",
            seeds.len() - report.diverged,
            seeds.len()
        )));
    }

    let mut checkpoints: Vec<usize> = [1, 5, 20, rounds]
        .into_iter()
        .filter(|&n| n <= rounds)
        .collect();
    checkpoints.dedup();
    let mut rows = Vec::new();
    for &n in &checkpoints {
        let emp = report.params[n][0];
        rows.push(check_row(
            n,
            "mean",
            means[n],
            emp.mean,
            emp.std_err,
            mean_exact,
        ));
        if let Some(second) = &second {
            let emp = report.dist_sq[n];
            rows.push(check_row(
                n,
                "second_moment",
                second.values[n],
                emp.mean,
                emp.std_err,
                second_exact,
            ));
        }
    }
    let overall = rows.iter().all(|r| !r.judged || r.pass);

    let mut csv = String::from("n,quantity,oracle,empirical,std_err,judged,pass\n");
    let mut table = format!(
        "scheme = {}\nclients = {clients}\nphi = {}\nseeds = {}\n",
        scheme.name(),
        fmt_float(contraction),
        seeds.len()
    );
    let _ = writeln!(
        table,
        "{:>6}  {:<13}  {:>24}  {:>24}  {:>10}  status",
        "n", "quantity", "oracle", "empirical", "std_err"
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.round,
            r.quantity,
            fmt_float(r.oracle),
            fmt_float(r.empirical),
            fmt_float(r.std_err),
            r.judged,
            r.pass
        );
        let status = match (r.judged, r.pass) {
            (true, true) => "pass",
            (true, false) => "FAIL",
            (false, _) => "info",
        };
        let _ = writeln!(
            table,
            "{:>6}  {:<13}  {:>24.16e}  {:>24.16e}  {:>10.3e}  {status}",
            r.round, r.quantity, r.oracle, r.empirical, r.std_err
        );
    }
    let _ = writeln!(table, "overall = {}", if overall { "PASS" } else { "FAIL" });
    inv.write("oracle_check.csv", &csv)?;
    if let Some(second) = &second {
        inv.write("oracle.csv", &oracle_csv(&mean, second, &optima, initial))?;
    }
    inv.say(&table);
    if overall {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("{} oracle", scheme.name())))
    }
}

/// χ²(r ‖ s̃) over data distributions.
fn chi_square(fleet: &Fleet, q: &[f64]) -> Result<f64, CliError> {
    let dw = distribution_weights(fleet, q)?;
    Ok(dw
        .importance
        .iter()
        .zip(&dw.normalized)
        .filter(|(r, _)| **r > 0.0)
        .map(|(r, s)| (s - r).powi(2) / r)
        .sum())
}

/// Bound report for the configured scheme, then the sync / async / FedFix
/// preset table at equal N.
pub fn bounds(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let exp = Experiment::build(cfg)?;
    let fleet = &exp.fleet;
    let tau = fleet.compute_times();
    let slowest = tau.iter().copied().fold(0.0, f64::max);
    let mut notes = vec![CONSTANTS_NOTE.to_string()];

    let smoothness = match cfg.bounds.smoothness {
        Some(l) => l,
        None => {
            let l = fleet.smoothness();
            notes.push(format!(
                "L not set; using the largest client smoothness {l}"
            ));
            l
        }
    };
    let budget = cfg.bounds.time_budget.unwrap_or(match exp.horizon {
        Horizon::Time(t) => t,
        Horizon::Rounds(n) => n as f64 * slowest,
    });
    let own = scheme_presets(fleet, exp.policy, &exp.plan, budget);
    let rounds = match (exp.horizon, &own) {
        (Horizon::Rounds(n), _) => n as f64,
        (Horizon::Time(_), Ok(p)) => p.rounds,
        (Horizon::Time(_), Err(_)) => {
            return Err(CliError::Config(format!(
                "bounds for the {} policy need horizon.rounds",
                exp.policy.name()
            )))
        }
    };
    let optimum = fleet.optimum()?;
    let q = exp
        .plan
        .expected
        .clone()
        .unwrap_or_else(|| fleet.importances());
    let moments = gradient_moments(
        fleet,
        &q,
        &optimum,
        cfg.bounds.moment_draws,
        cfg.ensemble.base_seed,
    )?;
    if !moments.exact {
        notes.push(format!(
            "sigma and sigma1 are Monte-Carlo estimates over {} draws",
            cfg.bounds.moment_draws
        ));
    }
    let initial = cfg
        .optimization
        .initial
        .clone()
        .unwrap_or_else(|| vec![0.0; fleet.dim()]);
    let mut base = BoundInputs::new(
        fleet.len(),
        exp.local.steps,
        rounds,
        cfg.optimization.server_lr,
        exp.local.lr,
    );
    base.smoothness = smoothness;
    base.rho = cfg.bounds.rho;
    base.sigma = moments.sigma;
    base.sigma1 = moments.sigma1;
    base.init_gap = initial
        .iter()
        .zip(&optimum)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    base.chi_square = chi_square(fleet, &q)?;

    let mut out = String::new();
    for note in &notes {
        let _ = writeln!(out, "# {note}");
    }
    let _ = writeln!(out, "policy = {}", exp.policy.name());
    let _ = writeln!(out, "weights = {}", exp.plan.scheme.name());
    match &own {
        Ok(preset) => {
            let inputs = preset.apply(&base);
            let terms = epsilon_terms(&inputs)?;
            let limit = lr_constraint(
                inputs.local_steps,
                smoothness,
                inputs.rho,
                inputs.server_lr,
                inputs.staleness,
            )?;
            let _ = writeln!(out, "lr_limit = {}", fmt_float(limit));
            let _ = writeln!(out, "lr_ok = {}", inputs.local_lr <= limit);
            for line in render_report(&inputs, &terms)
                .lines()
                .filter(|l| !l.starts_with('#'))
            {
                out.push_str(line);
                out.push('\n');
            }
        }
        Err(e) => {
            let _ = writeln!(out, "# no bound report for this policy: {e}");
        }
    }

    let interval = cfg
        .bounds
        .fedfix_interval
        .or(match exp.policy {
            WaitPolicy::FedFix { interval } => Some(interval),
            _ => None,
        })
        .unwrap_or_else(|| tau.iter().copied().fold(f64::INFINITY, f64::min));
    let table = [
        (WaitPolicy::Synchronous, WeightScheme::FedAvg),
        (WaitPolicy::Asynchronous, WeightScheme::AsyncTimeBased),
        (
            WaitPolicy::FedFix { interval },
            WeightScheme::FedFixTimeBased,
        ),
    ];
    let _ = writeln!(
        out,
        "# presets at time budget {} and N = {}",
        fmt_float(budget),
        fmt_float(rounds)
    );
    for (policy, scheme) in table {
        let plan = plan_weights(&scheme, fleet, policy, HardwareModel::Fixed)?;
        let preset = scheme_presets(fleet, policy, &plan, budget)?;
        let inputs = preset.apply(&base);
        let terms = epsilon_terms(&inputs)?;
        let name = preset.policy;
        let _ = writeln!(out, "preset.{name}.tau = {}", preset.staleness);
        let _ = writeln!(out, "preset.{name}.W = {}", preset.window);
        let _ = writeln!(out, "preset.{name}.N_budget = {}", fmt_float(preset.rounds));
        let _ = writeln!(out, "preset.{name}.alpha = {}", fmt_float(preset.alpha));
        let _ = writeln!(out, "preset.{name}.beta = {}", fmt_float(preset.beta));
        let _ = writeln!(
            out,
            "preset.{name}.max_q = {}",
            fmt_float(preset.max_weight)
        );
        let _ = writeln!(out, "preset.{name}.R = {}", fmt_float(terms.residual));
        let _ = writeln!(out, "preset.{name}.eps_total = {}", fmt_float(terms.total));
        let _ = writeln!(
            out,
            "preset.{name}.R_plus_eps = {}",
            fmt_float(terms.residual + terms.total)
        );
    }
    inv.write("bounds.txt", &out)?;
    inv.say(&out);
    Ok(())
}

/// One summary row per value of `axis`.
pub fn sweep(
    inv: &Invocation,
    axis: Option<SweepAxis>,
    values: Option<Vec<f64>>,
) -> Result<(), CliError> {
    let cfg = &inv.config;
    let axis = axis
        .or(cfg.sweep.as_ref().map(|s| s.axis))
        .ok_or_else(|| CliError::Config("sweep needs --axis or [sweep].axis".into()))?;
    let values = values
        .or_else(|| cfg.sweep.as_ref().map(|s| s.values.clone()))
        .unwrap_or_default();
    if values.is_empty() {
        return Err(CliError::Config("sweep values list is empty".into()));
    }
    let seeds = cfg.ensemble.seed_list(1);
    let points = values
        .iter()
        .map(|&v| {
            let point = cfg.with_axis(axis, v)?;
            Ok((v, Experiment::build(&point)?, point))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let windows = points
        .par_iter()
        .map(|(_, exp, point)| final_window(exp, point, &seeds))
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut csv = String::from("axis,value,loss_mean,loss_std,seed_std,members,diverged\n");
    let mut text = String::new();
    for ((value, _, _), w) in points.iter().zip(windows) {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            axis.name(),
            fmt_float(*value),
            fmt_float(w.mean),
            fmt_float(w.std),
            w.seed_std.map(fmt_float).unwrap_or_default(),
            w.members,
            w.diverged
        );
        let _ = writeln!(
            text,
            "{} = {value}: loss {} ± {}",
            axis.name(),
            fmt_float(w.mean),
            fmt_float(w.std)
        );
    }
    let path = inv.write("sweep.csv", &csv)?;
    inv.say(&format!("{text}wrote {}\n", path.display()));
    Ok(())
}

/// Writes `shards/client_{i}.csv` for a logistic fleet.
pub fn gen_shards(inv: &Invocation) -> Result<(), CliError> {
    let settings = shard_config(&inv.config)?;
    let shards = make_synthetic_shards(&settings)?;
    let dir = inv.out.join("shards");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (i, shard) in shards.iter().enumerate() {
        let path = dir.join(format!("client_{i}.csv"));
        write_atomic(&path, shard_csv(&shard.objective).as_bytes()).map_err(io_err(&path))?;
    }
    inv.say(&format!(
        "wrote {} shards to {}\n",
        shards.len(),
        dir.display()
    ));
    Ok(())
}
