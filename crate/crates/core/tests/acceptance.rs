//! Acceptance gate. Every criterion prints one `PASS`/`FAIL` line to stdout
//! (bypassing the test harness capture) and then asserts its verdict.
//!
//! The sweep used by criteria 3 and 4 is the default protocol at 100
//! repetitions and is run once, shared between tests.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use maml_alloc::allocator::{
    allocation_search_nonuniform, optimal_N_approx, optimal_n_exact, symmetry_certificate, AllocationProblem,
    SearchMode,
};
use maml_alloc::harness::{bootstrap_optimum, easy_hard_study, sweep_budget_grid, SweepConfig, SweepTable};
use maml_alloc::maml::{
    assemble_meta_system, gradient_descent_meta_params, meta_loss_curvature, sample_training_tasks,
    solve_meta_params, IterativeSolverConfig, Regime, TestConfig,
};
use maml_alloc::numeric::derive_seed;
use maml_alloc::rng::{lemma1_moment, stream, verify_moment_suite, MomentKind, TaskEnvironment, TaskSpec};
use maml_alloc::theory::{
    allocated_tasks, theory_test_loss_homogeneous, theory_test_loss_under, uniform_tasks, HomogeneousLossParams,
};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;

const BOOTSTRAP_SAMPLES: usize = 1000;

fn line(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
    let _ = out.flush();
}

fn verdict(criterion: u32, pass: bool, summary: &str) {
    line(&format!("[criterion {criterion}] {} {summary}", if pass { "PASS" } else { "FAIL" }));
}

fn detail(criterion: u32, text: &str) {
    line(&format!("[criterion {criterion}]   {text}"));
}

fn default_sweep() -> &'static (SweepTable, SweepConfig, Duration) {
    static SWEEP: OnceLock<(SweepTable, SweepConfig, Duration)> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let config = SweepConfig::protocol_default();
        let start = Instant::now();
        let table = sweep_budget_grid(&config).expect("default sweep");
        (table, config, start.elapsed())
    })
}

/// Theory loss and empirical statistics of one `(budget, n)` cell.
struct CellAgreement {
    budget: u64,
    n: usize,
    theory: f64,
    mean: f64,
    std_error: f64,
}

impl CellAgreement {
    fn rel_error(&self) -> f64 {
        (self.theory - self.mean).abs() / self.theory
    }

    fn rel_se(&self) -> f64 {
        self.std_error / self.theory
    }
}

fn agreement(table: &SweepTable, config: &SweepConfig) -> Vec<CellAgreement> {
    table
        .summary()
        .into_iter()
        .map(|c| {
            let tasks = uniform_tasks(&config.train_spec, c.n_per_task, c.m_tasks);
            CellAgreement {
                budget: c.budget,
                n: c.n_per_task,
                theory: theory_test_loss_under(&tasks, &config.env, &config.test).unwrap(),
                mean: c.mean,
                std_error: c.std_error,
            }
        })
        .collect()
}

#[test]
fn criterion_1_moment_suite() {
    let start = Instant::now();
    let ns: Vec<usize> = (1..=6).collect();
    let checks = verify_moment_suite(&ns, &ns, &[0.5, 1.0, 2.0], 100_000, 0).unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<_> = checks.iter().filter(|c| !c.pass).collect();
    let worst = checks.iter().map(|c| c.z.abs()).fold(0.0, f64::max);
    let scalars = [
        lemma1_moment(MomentKind::Second, 1, 1, 1.0),
        lemma1_moment(MomentKind::Third, 1, 1, 1.0),
        lemma1_moment(MomentKind::Fourth, 1, 1, 1.0),
    ];
    let scalars_ok = scalars == [3.0, 15.0, 105.0];
    let timely = elapsed <= Duration::from_secs(120);
    let pass = checks.len() == 8 * 108 && failed.is_empty() && scalars_ok && timely;
    verdict(
        1,
        pass,
        &format!(
            "{} checks, {} outside 4 SE (max |z| {worst:.2}); scalars {scalars:?}; {:.1}s",
            checks.len(),
            failed.len(),
            elapsed.as_secs_f64()
        ),
    );
    for c in &failed {
        detail(1, &format!("{} n={} p={} lambda={} z={:.2}", c.kind.name(), c.n, c.p, c.lambda, c.z));
    }
    assert!(pass);
}

/// Random instance `i`: even instances have more stacked validation rows than
/// parameters, odd ones fewer.
fn solver_instance(i: u64) -> (Vec<TaskSpec>, TaskEnvironment, DVector<f64>) {
    let mut rng = stream(derive_seed(2024, &[i]));
    let under = i % 2 == 0;
    let p = rng.random_range(4..=16usize);
    let m = if under { rng.random_range(1..=8usize) } else { rng.random_range(1..=8usize.min(p - 2)) };
    let mut tasks = Vec::with_capacity(m);
    for _ in 0..m {
        let n_val = if under {
            (p + 2).div_ceil(m) + rng.random_range(0..=3)
        } else {
            let cap = ((p - 2) / m).max(1);
            rng.random_range(1..=cap)
        };
        let spec = TaskSpec::new(
            rng.random_range(0.05..0.5),
            rng.random_range(0.6..1.4),
            rng.random_range(0.05..0.4),
            rng.random_range(1..=8),
            n_val,
        )
        .unwrap();
        tasks.push(spec);
    }
    let env = TaskEnvironment::new((0..p).map(|_| rng.random_range(-0.5..0.5)).collect(), 0.2).unwrap();
    let omega0 = if under { DVector::zeros(p) } else { DVector::from_fn(p, |_, _| rng.random_range(-0.3..0.3)) };
    (tasks, env, omega0)
}

#[test]
fn criterion_2_solver_equivalence() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut regimes = [0usize; 2];
    let mut all_ok = true;
    for i in 0..20 {
        let (specs, env, omega0) = solver_instance(i);
        let tasks = sample_training_tasks(&env, &specs, derive_seed(7, &[i])).unwrap();
        let system = assemble_meta_system(&tasks).unwrap();
        regimes[(system.regime == Regime::Overparameterized) as usize] += 1;
        let closed = solve_meta_params(&system, &omega0).unwrap();
        let curvature = meta_loss_curvature(&tasks, 500).unwrap();
        let config = IterativeSolverConfig {
            meta_learning_rate: 1.0 / curvature,
            max_iterations: 5_000_000,
            tolerance: 1e-12,
        };
        let gd = gradient_descent_meta_params(&tasks, &omega0, &config).unwrap();
        let rel = (&gd.omega - &closed).norm() / closed.norm();
        worst = worst.max(rel);
        let ok = gd.converged && rel <= 1e-6;
        all_ok &= ok;
        if !ok {
            detail(
                2,
                &format!("instance {i}: p={} m={} rel={rel:.3e} converged={}", env.p(), specs.len(), gd.converged),
            );
        }
    }
    let elapsed = start.elapsed();
    let pass = all_ok && regimes[0] > 0 && regimes[1] > 0 && elapsed <= Duration::from_secs(60);
    verdict(
        2,
        pass,
        &format!(
            "20 instances ({} under, {} over), max relative difference {worst:.2e}; {:.1}s",
            regimes[0],
            regimes[1],
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_theory_simulation_agreement() {
    let (table, config, elapsed) = default_sweep();
    let cells = agreement(table, config);
    let budgets = &config.budgets;
    let mut aggregate = Vec::new();
    for &b in budgets {
        let at_b: Vec<&CellAgreement> = cells.iter().filter(|c| c.budget == b).collect();
        let mean = at_b.iter().map(|c| c.rel_error()).sum::<f64>() / at_b.len() as f64;
        let max = at_b.iter().map(|c| c.rel_error()).fold(0.0, f64::max);
        detail(3, &format!("b={b:5}: mean relative error {:.3}%, max {:.3}%", 100.0 * mean, 100.0 * max));
        aggregate.push((mean, max));
    }
    let aggregate_decreasing = aggregate.windows(2).all(|w| w[1].0 < w[0].0);
    let largest_ok = aggregate.last().unwrap().1 <= 0.05;

    // per cell: no statistically significant increase from one budget to the next
    let mut significant_increases = 0;
    let mut strict_increases = 0;
    let mut compared = 0;
    for &n in &config.n_grid {
        let ladder: Vec<&CellAgreement> = cells.iter().filter(|c| c.n == n).collect();
        for w in ladder.windows(2) {
            compared += 1;
            let band = 2.0 * (w[0].rel_se().powi(2) + w[1].rel_se().powi(2)).sqrt();
            if w[1].rel_error() > w[0].rel_error() {
                strict_increases += 1;
            }
            if w[1].rel_error() > w[0].rel_error() + band {
                significant_increases += 1;
                detail(
                    3,
                    &format!(
                        "n={n}: error rises {:.3}% -> {:.3}% from b={} to b={} (band {:.3}%)",
                        100.0 * w[0].rel_error(),
                        100.0 * w[1].rel_error(),
                        w[0].budget,
                        w[1].budget,
                        100.0 * band
                    ),
                );
            }
        }
    }
    detail(
        3,
        &format!("{strict_increases} of {compared} per-cell steps increase at all, {significant_increases} beyond 2 SE"),
    );
    let timely = *elapsed <= Duration::from_secs(30 * 60);
    let pass = aggregate_decreasing && largest_ok && significant_increases == 0 && timely;
    verdict(
        3,
        pass,
        &format!(
            "mean relative error decreasing along the ladder: {aggregate_decreasing}; max at b={} {:.3}% (limit 5%); sweep {:.1}s",
            budgets.last().unwrap(),
            100.0 * aggregate.last().unwrap().1,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn sweep_means_within_four_standard_errors_at_largest_budgets() {
    let (table, config, _) = default_sweep();
    let cells = agreement(table, config);
    let top: Vec<u64> = config.budgets.iter().rev().take(2).copied().collect();
    let mut outside = Vec::new();
    for c in cells.iter().filter(|c| top.contains(&c.budget)) {
        let z = (c.mean - c.theory) / c.std_error;
        line(&format!(
            "[agreement] b={:5} n={:3} theory={:.6} mean={:.6} z={z:+.2}",
            c.budget, c.n, c.theory, c.mean
        ));
        if z.abs() > 4.0 {
            outside.push((c.budget, c.n, z));
        }
    }
    assert!(outside.is_empty(), "cells beyond 4 SE: {outside:?}");
}

fn log2_index(n: f64) -> f64 {
    n.log2()
}

#[test]
fn criterion_4_allocation_optimum() {
    let test = TestConfig::protocol_default();
    let budget = f64::from(1u32 << 20);
    let homogeneous = |a: f64, s: f64, nu: f64, p: usize, n: f64, b: f64| {
        theory_test_loss_homogeneous(&HomogeneousLossParams {
            sigma_prime: s,
            alpha_prime: a,
            nu,
            p,
            n,
            budget: b,
            test,
        })
        .unwrap()
    };

    // (a) Cardano root vs integer grid scan
    let mut scan_ok = true;
    for a in [0.05, 0.1, 0.2, 0.3, 0.4] {
        for s in [0.2, 0.5] {
            let (nu, p) = (0.2, 128);
            let exact = optimal_n_exact(a, s, nu, p).unwrap().n_star;
            let argmin = (1..=4 * p)
                .min_by(|&x, &y| homogeneous(a, s, nu, p, x as f64, budget).total_cmp(&homogeneous(a, s, nu, p, y as f64, budget)))
                .unwrap();
            let ok = (argmin as f64 - exact).abs() <= 1.0;
            scan_ok &= ok;
            detail(4, &format!("alpha'={a} sigma'={s}: Cardano n*={exact:.4}, grid argmin {argmin} {}", if ok { "ok" } else { "MISMATCH" }));
        }
    }

    // (b) the argmin of the loss does not move with the budget
    let fine: Vec<f64> = (100..=6000).map(|k| k as f64 * 0.01).collect();
    let exact = optimal_n_exact(0.3, 0.2, 0.2, 128).unwrap().n_star;
    let argmins: Vec<f64> = [1024.0, 2048.0, 4096.0, 8192.0, 1e6, 1e9]
        .iter()
        .map(|&b| {
            *fine
                .iter()
                .min_by(|&&x, &&y| homogeneous(0.3, 0.2, 0.2, 128, x, b).total_cmp(&homogeneous(0.3, 0.2, 0.2, 128, y, b)))
                .unwrap()
        })
        .collect();
    let budget_free = argmins.iter().all(|&n| n == argmins[0]) && (argmins[0] - exact).abs() <= 0.01;
    detail(4, &format!("fine-grid argmin per budget {argmins:?} vs n*={exact:.4}"));

    // (c) bootstrap optimum from the default sweep at the largest budget
    let (table, config, _) = default_sweep();
    let largest = *config.budgets.last().unwrap();
    let estimate = bootstrap_optimum(table, largest, BOOTSTRAP_SAMPLES, config.master_seed).unwrap();
    let spec = config.train_spec;
    let theory = optimal_n_exact(spec.alpha_prime(), spec.sigma_prime(), config.env.nu(), config.env.p()).unwrap();
    // grid is powers of two, so one grid step is one unit of log2(n)
    let steps = (log2_index(estimate.mean_N_star / 2.0) - log2_index(theory.n_star)).abs();
    let bootstrap_ok = steps <= 2.0;
    detail(
        4,
        &format!(
            "b={largest}: bootstrap N*={:.2} +- {:.2} (mode n={}), theory N*={:.2}; {steps:.2} grid steps apart",
            estimate.mean_N_star,
            estimate.std_N_star,
            estimate.mode_n(),
            theory.N_star
        ),
    );

    let pass = scan_ok && budget_free && bootstrap_ok;
    verdict(
        4,
        pass,
        &format!("grid scan within one step: {scan_ok}; budget independent: {budget_free}; bootstrap within 2 steps: {bootstrap_ok}"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_approximation_quality() {
    let alphas = [0.2, 0.1, 0.05, 0.025];
    let errors: Vec<f64> = alphas
        .iter()
        .map(|&a| {
            let exact = optimal_n_exact(a, 0.2, 0.2, 128).unwrap();
            let approx = optimal_N_approx(a, 0.2, 0.2, 128).unwrap();
            let err = (approx - exact.N_star).abs() / exact.N_star;
            detail(5, &format!("alpha'={a}: exact N*={:.4}, approx {approx:.4}, relative error {err:.3}", exact.N_star));
            err
        })
        .collect();
    let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
    let at_005 = errors[2];
    let pass = decreasing && at_005 <= 0.15;
    verdict(
        5,
        pass,
        &format!("relative error decreasing: {decreasing}; {at_005:.3} at alpha'=0.05 (limit 0.15)"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_symmetry() {
    let env = TaskEnvironment::protocol_default();
    let test = TestConfig::protocol_default();
    let spec = TaskSpec::split(0.2, 1.0, 0.3, 1).unwrap();
    let p = env.p();
    let mut rng = stream(606);
    let allocation: Vec<usize> = (0..8).map(|_| rng.random_range(p / 4..=2 * p)).collect();
    let tasks = vec![spec; allocation.len()];
    let report = symmetry_certificate(&tasks, &allocation, 100, &env, &test, 6).unwrap();
    detail(
        6,
        &format!(
            "allocation {allocation:?}: {} permutation mismatches in {}, {} averaging violations in {} pairs (worst excess {:.3e})",
            report.permutation_mismatches,
            report.permutations_checked,
            report.averaging_violations,
            report.pairs_checked,
            report.worst_averaging_excess
        ),
    );

    // independent shuffles through the loss itself
    let reference = theory_test_loss_under(&allocated_tasks(&spec, &allocation), &env, &test).unwrap();
    let mut shuffled = allocation.clone();
    let mut bit_exact = true;
    for _ in 0..100 {
        shuffled.shuffle(&mut rng);
        let l = theory_test_loss_under(&allocated_tasks(&spec, &shuffled), &env, &test).unwrap();
        bit_exact &= l.to_bits() == reference.to_bits();
    }

    let small_env = TaskEnvironment::constant(8, 0.05, 0.2).unwrap();
    let problem = AllocationProblem::new(24, vec![spec; 3]).unwrap();
    let search = allocation_search_nonuniform(&problem, |a| problem.theory_loss(a, &small_env, &test), SearchMode::Exhaustive)
        .unwrap();
    let uniform_best = search.allocation == vec![4, 4, 4];
    detail(
        6,
        &format!("m=3, b=24: {} allocations enumerated, minimum at {:?}", search.evaluations, search.allocation),
    );

    let pass = report.holds() && report.pairs_checked == 100 && bit_exact && uniform_best;
    verdict(
        6,
        pass,
        &format!(
            "permutations bit-exact: {}; averaging never increases loss: {}; uniform is the global minimum: {uniform_best}",
            report.permutation_mismatches == 0 && bit_exact,
            report.averaging_violations == 0
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_difficulty_monotonicity() {
    let nu = 0.2;
    let p = 128;
    let mut theory_ok = true;
    for a in [0.05, 0.1, 0.3] {
        let curve: Vec<f64> = (0..=20)
            .map(|k| optimal_n_exact(a, k as f64 * 0.05, nu, p).unwrap().n_star)
            .collect();
        let drops: Vec<usize> = (1..curve.len()).filter(|&k| curve[k] < curve[k - 1]).collect();
        let ok = drops.is_empty();
        theory_ok &= ok;
        detail(
            7,
            &format!(
                "alpha'={a}: n*(sigma'=0)={:.4}, n*(0.5)={:.4}, n*(1)={:.4}; {} decreasing steps",
                curve[0],
                curve[10],
                curve[20],
                drops.len()
            ),
        );
    }

    // separate-training sweeps for an easy and a hard family
    let config = SweepConfig {
        budgets: vec![2880],
        n_grid: vec![4, 6, 8, 10, 12, 16, 20, 24, 30, 36, 40],
        repetitions: 100,
        env: TaskEnvironment::protocol_default(),
        train_spec: TaskSpec::split(0.2, 1.0, 0.2, 1).unwrap(),
        test: TestConfig::protocol_default(),
        master_seed: 0,
    };
    let easy = TaskSpec { sigma: 0.05, ..config.train_spec };
    let hard = TaskSpec { sigma: 1.0, ..config.train_spec };
    let report = easy_hard_study(easy, hard, &config, BOOTSTRAP_SAMPLES).unwrap();
    let mut empirical_ok = true;
    for (e, h) in report.rows_for("easy").zip(report.rows_for("hard")) {
        let ok = h.estimate.mean_N_star >= e.estimate.mean_N_star;
        empirical_ok &= ok;
        detail(
            7,
            &format!(
                "b={}: bootstrap N* easy {:.2} vs hard {:.2} (theory {:.2} vs {:.2})",
                e.budget, e.estimate.mean_N_star, h.estimate.mean_N_star, e.theory_n_star_exact, h.theory_n_star_exact
            ),
        );
    }

    let pass = theory_ok && empirical_ok;
    verdict(
        7,
        pass,
        &format!("n* nondecreasing in sigma' at every alpha': {theory_ok}; empirical hard >= easy: {empirical_ok}"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_closed_form_anchors() {
    let anchor_test = TestConfig {
        alpha_r: 0.0,
        ..TestConfig::protocol_default()
    };
    let env = TaskEnvironment::constant(100, 0.05, 0.2).unwrap();
    let spec = TaskSpec::split(0.2, 1.0, 0.0, 10).unwrap();
    let under = theory_test_loss_under(&uniform_tasks(&spec, 10, 10), &env, &anchor_test).unwrap();
    let homogeneous = theory_test_loss_homogeneous(&HomogeneousLossParams {
        sigma_prime: 0.2,
        alpha_prime: 0.0,
        nu: 0.2,
        p: 100,
        n: 10.0,
        budget: 2000.0,
        test: anchor_test,
    })
    .unwrap();
    let rel_under = (under - 0.0822).abs() / 0.0822;
    let rel_homogeneous = (homogeneous - 0.0442).abs() / 0.0442;
    let pass = rel_under <= 1e-12 && rel_homogeneous <= 1e-12;
    verdict(
        8,
        pass,
        &format!("under {under} (rel {rel_under:.1e}), homogeneous {homogeneous} (rel {rel_homogeneous:.1e})"),
    );
    assert!(pass);
}
