//! Command-line front end: argument parsing, dispatch and result files.
//!
//! Every command writes its results into `--out-dir` together with
//! `config.txt` (the fully resolved configuration) and `manifest.json`.
//! Re-running the recorded arguments with `--config <out>/config.txt`
//! reproduces the result files byte for byte.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::allocator::{is_feasible, optimal_N_approx, optimal_n_exact, optimal_n_grid};
use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::harness::{bootstrap_optimum, easy_hard_study, sweep_budget_grid, CellResult, SweepTable};
use crate::numeric::format_sig;
use crate::rng::{verify_moment_suite, MomentKind};
use crate::theory::{
    theory_test_loss_homogeneous, theory_test_loss_over, theory_test_loss_under, uniform_tasks, HomogeneousLossParams,
};

/// Environment variable overriding the number of worker threads.
pub const WORKERS_ENV: &str = "MAML_ALLOC_WORKERS";

/// Significant digits of every number written to CSV.
pub const CSV_DIGITS: usize = 12;

pub const SWEEP_HEADER: &str = "budget,n_per_task,m_tasks,rep_id,test_loss,seed";

#[derive(Debug, Parser)]
#[command(name = "maml-alloc", version, about = "Optimal data allocation for one-step MAML on mixed linear regression")]
pub struct Cli {
    /// Flat `key = value` configuration file; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides `sweep.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for result files.
    #[arg(long, global = true, default_value = "maml-alloc-out")]
    pub out_dir: PathBuf,
    /// Override one config key, e.g. `--set sweep.repetitions=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo check of the Gaussian matrix moments against their closed forms.
    VerifyMoments {
        /// Monte Carlo trials per combination (default `moments.trials`)
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Analytic test loss over the sweep grid and at the configured split.
    Theory,
    /// Optimal uniform allocation from the cubic and its approximation.
    Allocate {
        /// `lambda^2 alpha` (default from `train.*`)
        #[arg(long, allow_hyphen_values = true)]
        alpha_prime: Option<f64>,
        /// `sigma / lambda` (default from `train.*`)
        #[arg(long)]
        sigma_prime: Option<f64>,
        /// Task spread (default `env.nu`)
        #[arg(long)]
        nu: Option<f64>,
        /// Dimension (default `env.p`)
        #[arg(long)]
        p: Option<usize>,
    },
    /// Simulation sweep over budgets and points per task.
    Sweep,
    /// Separate sweeps for easy and hard tasks with bootstrap optima.
    Easyhard,
    /// Bootstrap optimum from an existing sweep CSV.
    Bootstrap {
        /// `sweep.csv` written by `sweep`
        #[arg(long)]
        input: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::VerifyMoments { .. } => "verify-moments",
            Command::Theory => "theory",
            Command::Allocate { .. } => "allocate",
            Command::Sweep => "sweep",
            Command::Easyhard => "easyhard",
            Command::Bootstrap { .. } => "bootstrap",
        }
    }
}

/// Written next to every result set.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Canonical text of the resolved configuration.
    pub config: String,
    pub seed: u64,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub outputs: Vec<String>,
}

/// What a successful command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub command: String,
    pub out_dir: PathBuf,
    pub outputs: Vec<String>,
    /// Short human-readable report printed to stdout.
    pub report: String,
    /// False when a check inside the command failed (e.g. a moment outside its band).
    pub success: bool,
}

fn resolve_config(cli: &Cli) -> Result<AppConfig> {
    let mut config = match &cli.config {
        Some(path) => AppConfig::from_file(path)?,
        None => AppConfig::default(),
    };
    for item in &cli.overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| Error::Config {
            key: item.clone(),
            reason: "expected KEY=VALUE".into(),
        })?;
        config.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn csv_num(x: f64) -> String {
    format_sig(x, CSV_DIGITS)
}

fn write_text(dir: &Path, name: &str, text: &str, outputs: &mut Vec<String>) -> Result<()> {
    fs::write(dir.join(name), text)?;
    outputs.push(name.to_string());
    Ok(())
}

fn write_json(dir: &Path, name: &str, value: &Value, outputs: &mut Vec<String>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(dir, name, &text, outputs)
}

pub fn sweep_csv(rows: &[CellResult]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.budget,
            r.n_per_task,
            r.m_tasks,
            r.rep_id,
            csv_num(r.test_loss),
            r.seed
        );
    }
    out
}

/// Parses a CSV written by [`sweep_csv`].
pub fn parse_sweep_csv(text: &str) -> Result<Vec<CellResult>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == SWEEP_HEADER => {}
        other => {
            return Err(Error::Config {
                key: "input".into(),
                reason: format!("expected header {SWEEP_HEADER:?}, found {other:?}"),
            })
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| Error::Config {
                key: "input".into(),
                reason: format!("row {}: {what}", i + 2),
            };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let row = CellResult {
                budget: f[0].parse().map_err(|_| bad("budget"))?,
                n_per_task: f[1].parse().map_err(|_| bad("n_per_task"))?,
                m_tasks: f[2].parse().map_err(|_| bad("m_tasks"))?,
                rep_id: f[3].parse().map_err(|_| bad("rep_id"))?,
                test_loss: f[4].parse().map_err(|_| bad("test_loss"))?,
                seed: f[5].parse().map_err(|_| bad("seed"))?,
            };
            if row.m_tasks * 2 * row.n_per_task != row.budget as usize {
                return Err(bad("m_tasks * 2 * n_per_task != budget"));
            }
            Ok(row)
        })
        .collect()
}

fn homogeneous_params(config: &AppConfig, n: f64, budget: f64) -> HomogeneousLossParams {
    HomogeneousLossParams {
        sigma_prime: config.train.sigma_prime(),
        alpha_prime: config.train.alpha_prime(),
        nu: config.nu,
        p: config.p,
        n,
        budget,
        test: config.test,
    }
}

/// Analytic losses for every feasible `(budget, n)` of the grid.
fn theory_rows(config: &AppConfig) -> Result<Vec<(u64, usize, usize, Option<f64>, f64)>> {
    let env = config.environment()?;
    let mut rows = Vec::new();
    for &b in &config.budgets {
        for &n in config.n_grid.iter().filter(|&&n| is_feasible(b, n)) {
            let m = (b / (2 * n as u64)) as usize;
            let general = theory_test_loss_under(&uniform_tasks(&config.train, n, m), &env, &config.test).ok();
            let simple = theory_test_loss_homogeneous(&homogeneous_params(config, n as f64, b as f64))?;
            rows.push((b, n, m, general, simple));
        }
    }
    Ok(rows)
}

fn cmd_verify_moments(config: &AppConfig, trials: Option<usize>, dir: &Path, outputs: &mut Vec<String>) -> Result<(Value, String, bool)> {
    let trials = trials.unwrap_or(config.moment_trials);
    let ns: Vec<usize> = (1..=config.moment_max_n).collect();
    let ps: Vec<usize> = (1..=config.moment_max_p).collect();
    let checks = verify_moment_suite(&ns, &ps, &config.moment_lambdas, trials, config.seed)?;
    let mut csv = String::from("kind,n,p,lambda,closed_form,estimate,std_error,z,offdiag_z,pass\n");
    for c in &checks {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            c.kind.name(),
            c.n,
            c.p,
            c.lambda,
            csv_num(c.closed_form),
            csv_num(c.estimate),
            csv_num(c.std_error),
            csv_num(c.z),
            csv_num(c.offdiag_z),
            c.pass
        );
    }
    write_text(dir, "moments.csv", &csv, outputs)?;
    let mut report = format!("{:<22} {:>6} {:>6} {:>9}  status\n", "kind", "checks", "passed", "max |z|");
    let mut per_kind = Vec::new();
    for kind in MomentKind::ALL {
        let of_kind: Vec<_> = checks.iter().filter(|c| c.kind == kind).collect();
        let passed = of_kind.iter().filter(|c| c.pass).count();
        let max_z = of_kind.iter().map(|c| c.z.abs()).fold(0.0, f64::max);
        let ok = passed == of_kind.len();
        let _ = writeln!(
            report,
            "{:<22} {:>6} {:>6} {:>9.3}  {}",
            kind.name(),
            of_kind.len(),
            passed,
            max_z,
            if ok { "PASS" } else { "FAIL" }
        );
        per_kind.push(json!({"kind": kind.name(), "checks": of_kind.len(), "passed": passed, "max_abs_z": max_z, "pass": ok}));
    }
    let all = checks.iter().all(|c| c.pass);
    Ok((json!({"trials": trials, "all_pass": all, "kinds": per_kind}), report, all))
}

fn cmd_theory(config: &AppConfig, dir: &Path, outputs: &mut Vec<String>) -> Result<(Value, String, bool)> {
    let env = config.environment()?;
    let rows = theory_rows(config)?;
    let mut csv = String::from("budget,n_per_task,m_tasks,theory_general,theory_homogeneous\n");
    for (b, n, m, g, h) in &rows {
        let g = g.map(csv_num).unwrap_or_default();
        let _ = writeln!(csv, "{b},{n},{m},{g},{}", csv_num(*h));
    }
    write_text(dir, "theory.csv", &csv, outputs)?;

    let tasks = vec![config.train; config.train_m_tasks];
    let total_val = config.train.n_val * config.train_m_tasks;
    let (regime, point) = if total_val >= config.p {
        ("underparameterized", theory_test_loss_under(&tasks, &env, &config.test)?)
    } else {
        // omega0 = 0, so |omega0 - theta0|^2 = p theta0^2
        let d = config.p as f64 * config.theta0 * config.theta0;
        ("overparameterized", theory_test_loss_over(&tasks, &env, &config.test, d)?)
    };
    let exact = optimal_n_exact(config.train.alpha_prime(), config.train.sigma_prime(), config.nu, config.p).ok();
    let mut grid_optima = Vec::new();
    for &b in &config.budgets {
        let opt = optimal_n_grid(
            |n| theory_test_loss_homogeneous(&homogeneous_params(config, n as f64, b as f64)),
            b,
            &config.n_grid,
        )?;
        grid_optima.push(json!({"budget": b, "n_star": opt.n_star, "loss": opt.loss}));
    }
    let summary = json!({
        "point": {
            "n_train": config.train.n_train,
            "n_val": config.train.n_val,
            "m_tasks": config.train_m_tasks,
            "regime": regime,
            "test_loss": point,
        },
        "n_star_exact": exact.as_ref().map(|s| s.n_star),
        "grid_optima": grid_optima,
    });
    let report = format!(
        "{} grid cells written; loss at n_t={}, n_v={}, m={} ({regime}): {point:.6}\n",
        rows.len(),
        config.train.n_train,
        config.train.n_val,
        config.train_m_tasks
    );
    Ok((summary, report, true))
}

fn cmd_allocate(
    config: &AppConfig,
    alpha_prime: Option<f64>,
    sigma_prime: Option<f64>,
    nu: Option<f64>,
    p: Option<usize>,
) -> Result<(Value, String, bool)> {
    let a = alpha_prime.unwrap_or(config.train.alpha_prime());
    let s = sigma_prime.unwrap_or(config.train.sigma_prime());
    let nu = nu.unwrap_or(config.nu);
    let p = p.unwrap_or(config.p);
    let sol = optimal_n_exact(a, s, nu, p)?;
    let approx = optimal_N_approx(a, s, nu, p)?;
    let disc = sol.coefficients.discriminant;
    let sign = if disc < 0.0 {
        "negative"
    } else if disc > 0.0 {
        "positive"
    } else {
        "zero"
    };
    let summary = json!({
        "alpha_prime": a,
        "sigma_prime": s,
        "nu": nu,
        "p": p,
        "n_star": sol.n_star,
        "N_star": sol.N_star,
        "N_star_approx": approx,
        "approx_relative_error": (approx - sol.N_star).abs() / sol.N_star,
        "discriminant": disc,
        "discriminant_sign": sign,
        "coefficients": sol.coefficients,
        "roots": sol.roots,
        "selection_note": sol.selection_note,
    });
    let report = format!("{}\n", serde_json::to_string_pretty(&summary)?);
    Ok((summary, report, true))
}

fn sweep_summary(config: &AppConfig, table: &SweepTable, seed: u64) -> Result<Value> {
    let env = config.environment()?;
    let mut cells = Vec::new();
    for c in table.summary() {
        let general = theory_test_loss_under(&uniform_tasks(&config.train, c.n_per_task, c.m_tasks), &env, &config.test).ok();
        cells.push(json!({
            "budget": c.budget,
            "n_per_task": c.n_per_task,
            "m_tasks": c.m_tasks,
            "repetitions": c.repetitions,
            "mean": c.mean,
            "std_error": c.std_error,
            "theory": general,
            "relative_error": general.map(|t| (t - c.mean).abs() / t),
        }));
    }
    let mut boot = Vec::new();
    for &b in &config.budgets {
        let est = bootstrap_optimum(table, b, config.bootstrap_samples, seed)?;
        boot.push(json!({
            "budget": b,
            "mean_N_star": est.mean_N_star,
            "std_N_star": est.std_N_star,
            "mode_n": est.mode_n(),
            "argmin_counts": est.argmin_counts,
        }));
    }
    let exact = optimal_n_exact(config.train.alpha_prime(), config.train.sigma_prime(), config.nu, config.p).ok();
    Ok(json!({
        "rows": table.rows.len(),
        "skipped": table.skipped,
        "failures": table.failures,
        "cells": cells,
        "bootstrap": boot,
        "theory_N_star_exact": exact.map(|s| s.N_star),
    }))
}

fn describe_skipped(config: &AppConfig) -> String {
    config
        .budgets
        .iter()
        .flat_map(|&b| config.n_grid.iter().filter(move |&&n| !is_feasible(b, n)).map(move |&n| format!("(b={b}, n={n})")))
        .collect::<Vec<_>>()
        .join(", ")
}

fn cmd_sweep(config: &AppConfig, dir: &Path, outputs: &mut Vec<String>) -> Result<(Value, String, bool)> {
    let table = match sweep_budget_grid(&config.sweep_config()?) {
        Ok(t) => t,
        Err(Error::EmptyGrid { budget, .. }) => {
            return Err(Error::Config {
                key: "sweep.n_grid".into(),
                reason: format!(
                    "budget {budget} has no feasible n (b/2n must be an integer); skipped cells: {}",
                    describe_skipped(config)
                ),
            })
        }
        Err(e) => return Err(e),
    };
    write_text(dir, "sweep.csv", &sweep_csv(&table.rows), outputs)?;
    let summary = sweep_summary(config, &table, config.seed)?;
    let mut report = format!("{} rows written", table.rows.len());
    if !table.skipped.is_empty() {
        let _ = write!(report, "; skipped infeasible cells: {}", describe_skipped(config));
    }
    if !table.failures.is_empty() {
        let _ = write!(report, "; {} cells failed (see summary.json)", table.failures.len());
    }
    report.push('\n');
    Ok((summary, report, table.failures.is_empty()))
}

fn cmd_easyhard(config: &AppConfig, dir: &Path, outputs: &mut Vec<String>) -> Result<(Value, String, bool)> {
    let report = easy_hard_study(config.easy_spec(), config.hard_spec(), &config.sweep_config()?, config.bootstrap_samples)?;
    write_text(dir, "sweep_easy.csv", &sweep_csv(&report.easy.rows), outputs)?;
    write_text(dir, "sweep_hard.csv", &sweep_csv(&report.hard.rows), outputs)?;
    let mut csv = String::from("label,budget,sigma,lambda,mean_N_star,std_N_star,mode_n,theory_N_star_exact,theory_n_grid\n");
    let mut text = String::new();
    for r in &report.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.label,
            r.budget,
            r.sigma,
            r.lambda,
            csv_num(r.estimate.mean_N_star),
            csv_num(r.estimate.std_N_star),
            r.estimate.mode_n(),
            csv_num(r.theory_n_star_exact),
            r.theory_n_star_grid.map(|n| n.to_string()).unwrap_or_default()
        );
        let _ = writeln!(
            text,
            "{:<5} b={:<6} bootstrap N* = {:>8.3} +- {:<8.3} theory N* = {:.3}",
            r.label, r.budget, r.estimate.mean_N_star, r.estimate.std_N_star, r.theory_n_star_exact
        );
    }
    write_text(dir, "easyhard.csv", &csv, outputs)?;
    Ok((json!({"rows": report.rows}), text, true))
}

fn cmd_bootstrap(config: &AppConfig, input: &Path, dir: &Path, outputs: &mut Vec<String>) -> Result<(Value, String, bool)> {
    let rows = parse_sweep_csv(&fs::read_to_string(input)?)?;
    let mut budgets: Vec<u64> = rows.iter().map(|r| r.budget).collect();
    budgets.sort_unstable();
    budgets.dedup();
    let table = SweepTable {
        rows,
        skipped: Vec::new(),
        failures: Vec::new(),
    };
    let mut csv = String::from("budget,mean_N_star,std_N_star,samples,mode_n\n");
    let mut out = Vec::new();
    let mut text = String::new();
    for b in budgets {
        let est = bootstrap_optimum(&table, b, config.bootstrap_samples, config.seed)?;
        let _ = writeln!(
            csv,
            "{b},{},{},{},{}",
            csv_num(est.mean_N_star),
            csv_num(est.std_N_star),
            est.bootstrap_samples,
            est.mode_n()
        );
        let _ = writeln!(text, "b={b}: N* = {:.3} +- {:.3}", est.mean_N_star, est.std_N_star);
        out.push(json!({"budget": b, "estimate": est}));
    }
    write_text(dir, "bootstrap.csv", &csv, outputs)?;
    Ok((json!({"input": input.display().to_string(), "bootstrap": out}), text, true))
}

fn timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Parses `argv` (including the program name), runs the command and writes
/// its result files.
pub fn execute_command<I, T>(argv: I) -> Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Config {
        key: "argv".into(),
        reason: e.to_string(),
    })?;
    let config = resolve_config(&cli)?;
    let dir = cli.out_dir.clone();
    fs::create_dir_all(&dir)?;
    let mut outputs = Vec::new();
    let (summary, report, success) = match &cli.command {
        Command::VerifyMoments { trials } => cmd_verify_moments(&config, *trials, &dir, &mut outputs)?,
        Command::Theory => cmd_theory(&config, &dir, &mut outputs)?,
        Command::Allocate {
            alpha_prime,
            sigma_prime,
            nu,
            p,
        } => cmd_allocate(&config, *alpha_prime, *sigma_prime, *nu, *p)?,
        Command::Sweep => cmd_sweep(&config, &dir, &mut outputs)?,
        Command::Easyhard => cmd_easyhard(&config, &dir, &mut outputs)?,
        Command::Bootstrap { input } => cmd_bootstrap(&config, input, &dir, &mut outputs)?,
    };
    write_json(&dir, "summary.json", &summary, &mut outputs)?;
    let canonical = config.to_canonical_string();
    write_text(&dir, "config.txt", &canonical, &mut outputs)?;
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        args: argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        config: canonical,
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: timestamp(),
        outputs: outputs.clone(),
    };
    let mut outputs_with_manifest = outputs;
    write_json(&dir, "manifest.json", &serde_json::to_value(&manifest)?, &mut outputs_with_manifest)?;
    Ok(Outcome {
        command: manifest.command,
        out_dir: dir,
        outputs: outputs_with_manifest,
        report,
        success,
    })
}

/// Sizes the global thread pool from [`WORKERS_ENV`] when it is set.
pub fn configure_workers() -> Result<()> {
    if let Ok(value) = std::env::var(WORKERS_ENV) {
        let n: usize = value.trim().parse().map_err(|_| Error::Config {
            key: WORKERS_ENV.into(),
            reason: format!("expected a positive integer, got {value:?}"),
        })?;
        if n == 0 {
            return Err(Error::Config {
                key: WORKERS_ENV.into(),
                reason: "must be at least 1".into(),
            });
        }
        // fails only if the pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    // let clap print help and version itself
    if let Err(e) = Cli::try_parse_from(&argv) {
        let code = if e.use_stderr() { 2 } else { 0 };
        let _ = e.print();
        return code;
    }
    if let Err(e) = configure_workers() {
        eprintln!("error: {e}");
        return 2;
    }
    match execute_command(argv) {
        Ok(outcome) => {
            // a closed pipe on stdout must not turn a finished run into a panic
            let mut stdout = std::io::stdout().lock();
            let _ = write!(stdout, "{}", outcome.report);
            let _ = writeln!(
                stdout,
                "wrote {} to {}",
                outcome.outputs.join(", "),
                outcome.out_dir.display()
            );
            if outcome.success {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
