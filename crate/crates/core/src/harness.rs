//! Budget-constrained simulation sweeps, bootstrap optima and the easy/hard
//! study.
//!
//! Seeds: repetition `r` at budget `b` uses `rep_seed = derive(master, [b, r])`.
//! Training tasks for a cell come from `derive(rep_seed, [n, TRAIN])`; the test
//! tasks come from `derive(rep_seed, [TEST])` and are shared by every `n` of
//! that repetition, so the curves of one repetition are compared on the same
//! test tasks.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::allocator::{is_feasible, optimal_n_exact};
use crate::error::{Error, Result};
use crate::maml::{assemble_meta_system, empirical_test_loss, sample_training_tasks, solve_meta_params, TestConfig};
use crate::numeric::{derive_seed, mean_and_std_error};
use crate::rng::{role, stream, TaskEnvironment, TaskSpec};
use crate::theory::{theory_test_loss_under, uniform_tasks};

/// Grid of simulation cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub budgets: Vec<u64>,
    pub n_grid: Vec<usize>,
    pub repetitions: usize,
    pub env: TaskEnvironment,
    /// Template for every training task; `n_train`/`n_val` are overwritten per cell.
    pub train_spec: TaskSpec,
    pub test: TestConfig,
    pub master_seed: u64,
}

impl SweepConfig {
    /// Budgets `2^10..2^13`, `n` in powers of two from 4 to 128, 100 repetitions.
    pub fn protocol_default() -> Self {
        Self {
            budgets: vec![1024, 2048, 4096, 8192],
            n_grid: vec![4, 8, 16, 32, 64, 128],
            repetitions: 100,
            env: TaskEnvironment::protocol_default(),
            train_spec: TaskSpec::split(0.2, 1.0, 0.3, 1).expect("valid default"),
            test: TestConfig::protocol_default(),
            master_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() {
            return Err(Error::invalid("SweepConfig.budgets", "at least one budget is required"));
        }
        if let Some(b) = self.budgets.iter().find(|&&b| b == 0 || b % 2 != 0) {
            return Err(Error::invalid("SweepConfig.budgets", format!("{b} is not a positive even integer")));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(Error::invalid("SweepConfig.n_grid", "must be a non-empty list of positive integers"));
        }
        if self.repetitions == 0 {
            return Err(Error::invalid("SweepConfig.repetitions", "must be at least 1"));
        }
        self.train_spec.validate()?;
        self.test.validate()
    }

    /// Cells with `budget / (2n)` not an integer.
    pub fn infeasible_cells(&self) -> Vec<(u64, usize)> {
        self.budgets
            .iter()
            .flat_map(|&b| self.n_grid.iter().filter(move |&&n| !is_feasible(b, n)).map(move |&n| (b, n)))
            .collect()
    }

    pub fn rep_seed(&self, budget: u64, rep_id: usize) -> u64 {
        derive_seed(self.master_seed, &[budget, rep_id as u64])
    }
}

/// One simulated repetition of one `(budget, n)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub budget: u64,
    pub n_per_task: usize,
    pub m_tasks: usize,
    pub rep_id: usize,
    pub test_loss: f64,
    /// Repetition seed the cell was derived from.
    pub seed: u64,
}

/// Trains on `b / 2n` sampled tasks with `n` points per split, solves the meta
/// problem in closed form from `omega0 = 0` and scores it on fresh test tasks.
pub fn run_cell(budget: u64, n: usize, rep_id: usize, rep_seed: u64, config: &SweepConfig) -> Result<CellResult> {
    let wrap = |e: Error| Error::Cell {
        budget,
        n: n as u64,
        rep: rep_id as u64,
        source: Box::new(e),
    };
    if !is_feasible(budget, n) {
        return Err(wrap(Error::InfeasibleBudget { budget, tasks: 0 }));
    }
    let m = (budget / (2 * n as u64)) as usize;
    let specs = uniform_tasks(&config.train_spec, n, m);
    let tasks = sample_training_tasks(&config.env, &specs, derive_seed(rep_seed, &[n as u64, role::TRAIN])).map_err(wrap)?;
    let system = assemble_meta_system(&tasks).map_err(wrap)?;
    let omega = solve_meta_params(&system, &DVector::zeros(config.env.p())).map_err(wrap)?;
    let test_loss = empirical_test_loss(&omega, &config.test, &config.env, derive_seed(rep_seed, &[role::TEST])).map_err(wrap)?;
    Ok(CellResult {
        budget,
        n_per_task: n,
        m_tasks: m,
        rep_id,
        test_loss,
        seed: rep_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub budget: u64,
    pub n_per_task: usize,
    pub rep_id: usize,
    pub message: String,
}

/// Output of [`sweep_budget_grid`], rows ordered by `(budget, n, rep_id)` as
/// listed in the config.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<CellResult>,
    /// Infeasible `(budget, n)` pairs.
    pub skipped: Vec<(u64, usize)>,
    pub failures: Vec<CellFailure>,
}

impl SweepTable {
    /// Losses per `n` at `budget`, in repetition order.
    pub fn curves(&self, budget: u64) -> BTreeMap<usize, Vec<f64>> {
        let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.budget == budget) {
            out.entry(r.n_per_task).or_default().push(r.test_loss);
        }
        out
    }

    /// Mean loss and its standard error per `(budget, n)` cell.
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut groups: BTreeMap<(u64, usize), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.budget, r.n_per_task)).or_default().push(r.test_loss);
        }
        groups
            .into_iter()
            .map(|((budget, n), losses)| {
                let (mean, std_error) = mean_and_std_error(&losses);
                CellSummary {
                    budget,
                    n_per_task: n,
                    m_tasks: (budget / (2 * n as u64)) as usize,
                    repetitions: losses.len(),
                    mean,
                    std_error,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub budget: u64,
    pub n_per_task: usize,
    pub m_tasks: usize,
    pub repetitions: usize,
    pub mean: f64,
    pub std_error: f64,
}

/// Runs every feasible `(budget, n, rep)` cell in parallel.
///
/// Infeasible pairs are listed in `skipped`; a budget with no feasible `n` at
/// all is an error. Cells that fail (e.g. singular systems) are recorded in
/// `failures` and the sweep continues.
pub fn sweep_budget_grid(config: &SweepConfig) -> Result<SweepTable> {
    config.validate()?;
    let skipped = config.infeasible_cells();
    for &b in &config.budgets {
        if !config.n_grid.iter().any(|&n| is_feasible(b, n)) {
            return Err(Error::EmptyGrid {
                budget: b,
                skipped: config.n_grid.iter().map(|&n| n as u64).collect(),
            });
        }
    }
    let jobs: Vec<(u64, usize, usize)> = config
        .budgets
        .iter()
        .flat_map(|&b| {
            config
                .n_grid
                .iter()
                .filter(move |&&n| is_feasible(b, n))
                .flat_map(move |&n| (0..config.repetitions).map(move |r| (b, n, r)))
        })
        .collect();
    let outcomes: Vec<Result<CellResult>> = jobs
        .par_iter()
        .map(|&(b, n, r)| run_cell(b, n, r, config.rep_seed(b, r), config))
        .collect();
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (&(b, n, r), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(CellFailure {
                budget: b,
                n_per_task: n,
                rep_id: r,
                message: e.to_string(),
            }),
        }
    }
    Ok(SweepTable { rows, skipped, failures })
}

/// Bootstrap estimate of the optimal points per task `N* = 2 n*`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[allow(non_snake_case)]
pub struct OptimumEstimate {
    pub mean_N_star: f64,
    /// Population standard deviation over bootstrap curves.
    pub std_N_star: f64,
    pub bootstrap_samples: usize,
    /// How often each `n` was the argmin.
    pub argmin_counts: BTreeMap<usize, usize>,
}

impl OptimumEstimate {
    /// Most frequent argmin, ties to the smaller `n`.
    pub fn mode_n(&self) -> usize {
        self.argmin_counts
            .iter()
            .fold((0, 0), |best, (&n, &c)| if c > best.1 { (n, c) } else { best })
            .0
    }
}

/// Builds `n_samples` curves by picking one repetition per `n` uniformly at
/// random and records each curve's argmin (ties to the smaller `n`).
pub fn bootstrap_curves(curves: &BTreeMap<usize, Vec<f64>>, n_samples: usize, seed: u64) -> Result<OptimumEstimate> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be at least 1"));
    }
    if curves.is_empty() {
        return Err(Error::invalid("curves", "no grid points"));
    }
    if let Some((&n, _)) = curves.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::EmptyCell { n: n as u64 });
    }
    let mut rng = stream(seed);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut optima = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut best = (0usize, f64::INFINITY);
        for (&n, losses) in curves {
            let l = losses[rng.random_range(0..losses.len())];
            if l < best.1 {
                best = (n, l);
            }
        }
        *counts.entry(best.0).or_default() += 1;
        optima.push(2.0 * best.0 as f64);
    }
    let mean = optima.iter().sum::<f64>() / n_samples as f64;
    let var = optima.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n_samples as f64;
    Ok(OptimumEstimate {
        mean_N_star: mean,
        std_N_star: var.sqrt(),
        bootstrap_samples: n_samples,
        argmin_counts: counts,
    })
}

/// [`bootstrap_curves`] on the rows of `table` at `budget`.
pub fn bootstrap_optimum(table: &SweepTable, budget: u64, n_samples: usize, seed: u64) -> Result<OptimumEstimate> {
    let curves = table.curves(budget);
    if curves.is_empty() {
        return Err(Error::invalid("budget", format!("no rows at budget {budget}")));
    }
    bootstrap_curves(&curves, n_samples, derive_seed(seed, &[budget]))
}

/// One difficulty level at one budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DifficultyRow {
    pub label: String,
    pub budget: u64,
    pub sigma: f64,
    pub lambda: f64,
    pub estimate: OptimumEstimate,
    /// `2 n*` from the cubic.
    pub theory_n_star_exact: f64,
    /// Grid argmin of the general analytic loss over the sweep's `n` grid.
    pub theory_n_star_grid: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EasyHardReport {
    pub rows: Vec<DifficultyRow>,
    pub easy: SweepTable,
    pub hard: SweepTable,
}

impl EasyHardReport {
    /// Rows for `label` in budget order.
    pub fn rows_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a DifficultyRow> + 'a {
        self.rows.iter().filter(move |r| r.label == label)
    }
}

fn theory_grid_optimum(spec: &TaskSpec, config: &SweepConfig, budget: u64) -> Option<usize> {
    config
        .n_grid
        .iter()
        .filter(|&&n| is_feasible(budget, n))
        .filter_map(|&n| {
            let m = (budget / (2 * n as u64)) as usize;
            theory_test_loss_under(&uniform_tasks(spec, n, m), &config.env, &config.test)
                .ok()
                .map(|l| (n, l))
        })
        .fold(None, |best: Option<(usize, f64)>, (n, l)| match best {
            Some((_, bl)) if bl <= l => best,
            _ => Some((n, l)),
        })
        .map(|(n, _)| n)
}

/// Separate sweeps for an easy and a hard task family (differing only in
/// `sigma` and `lambda`) with bootstrap optima and theory predictions side by
/// side. Both sweeps use the same master seed, so the draws differ only
/// through `sigma` and `lambda`.
pub fn easy_hard_study(easy: TaskSpec, hard: TaskSpec, config: &SweepConfig, bootstrap_samples: usize) -> Result<EasyHardReport> {
    if easy.alpha != hard.alpha {
        return Err(Error::invalid("easy_hard_study", "easy and hard specs may differ only in sigma and lambda"));
    }
    let mut tables = Vec::with_capacity(2);
    let mut rows = Vec::new();
    for (label, spec) in [("easy", easy), ("hard", hard)] {
        let cfg = SweepConfig {
            train_spec: spec,
            ..config.clone()
        };
        let table = sweep_budget_grid(&cfg)?;
        let exact = optimal_n_exact(spec.alpha_prime(), spec.sigma_prime(), cfg.env.nu(), cfg.env.p())?;
        for &b in &cfg.budgets {
            rows.push(DifficultyRow {
                label: label.to_string(),
                budget: b,
                sigma: spec.sigma,
                lambda: spec.lambda,
                estimate: bootstrap_optimum(&table, b, bootstrap_samples, cfg.master_seed)?,
                theory_n_star_exact: exact.N_star,
                theory_n_star_grid: theory_grid_optimum(&spec, &cfg, b),
            });
        }
        tables.push(table);
    }
    let hard_table = tables.pop().expect("two tables");
    let easy_table = tables.pop().expect("two tables");
    Ok(EasyHardReport {
        rows,
        easy: easy_table,
        hard: hard_table,
    })
}
