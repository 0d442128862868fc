//! Data allocation: the exact uniform optimum from the cubic stationarity
//! condition, its small-`alpha'` approximation, grid optima, non-uniform
//! budget search and the symmetry certificate for homogeneous tasks.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::maml::TestConfig;
use crate::rng::{stream, TaskEnvironment, TaskSpec};
use crate::theory::{allocated_tasks, homogeneous_shape, theory_test_loss_under};

/// Roots whose imaginary part is below this fraction of the real part count as real.
pub const REAL_ROOT_TOLERANCE: f64 = 1e-9;

/// Exhaustive non-uniform search is used up to this many tasks...
pub const EXHAUSTIVE_MAX_TASKS: usize = 4;
/// ...and up to this budget.
pub const EXHAUSTIVE_MAX_BUDGET: u64 = 64;

/// Coefficients of `A x^3 + B x^2 + C x + D = 0` in `x = n / p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CubicCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub discriminant: f64,
}

impl CubicCoefficients {
    pub fn eval(&self, x: f64) -> f64 {
        ((self.a * x + self.b) * x + self.c) * x + self.d
    }

    /// `|cubic(x)|` relative to the largest monomial.
    pub fn relative_residual(&self, x: f64) -> f64 {
        let scale = [self.a * x * x * x, self.b * x * x, self.c * x, self.d]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            0.0
        } else {
            self.eval(x).abs() / scale
        }
    }
}

fn check_inputs(alpha_prime: f64, sigma_prime: f64, nu: f64) -> Result<()> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::invalid("nu", "must be finite and > 0; the cubic degenerates at nu = 0"));
    }
    if !(sigma_prime >= 0.0 && sigma_prime.is_finite()) {
        return Err(Error::invalid("sigma_prime", "must be finite and >= 0"));
    }
    if !alpha_prime.is_finite() {
        return Err(Error::invalid("alpha_prime", "must be finite"));
    }
    Ok(())
}

pub fn cubic_coefficients(alpha_prime: f64, sigma_prime: f64, nu: f64) -> Result<CubicCoefficients> {
    check_inputs(alpha_prime, sigma_prime, nu)?;
    let a = alpha_prime;
    let v = nu * nu;
    let s = sigma_prime * sigma_prime;
    let one = 1.0 - a;
    let ca = v * one.powi(6);
    let cb = 3.0 * v * a * a * one.powi(4);
    let cc = 2.0 * a.powi(3) * (v * (2.0 - a - 4.0 * a * a + 3.0 * a.powi(3)) + s * (2.0 - 5.0 * a + 4.0 * a * a - a.powi(3)));
    let cd = 2.0 * a.powi(4) * (v * (2.0 * a * a - 1.0) + s * (2.0 * a - 1.0));
    let delta0 = cb * cb - 3.0 * ca * cc;
    let delta1 = 2.0 * cb.powi(3) - 9.0 * ca * cb * cc + 27.0 * ca * ca * cd;
    let discriminant = -27.0 * ca * ca * cd * cd + 18.0 * ca * cb * cc * cd - 4.0 * ca * cc.powi(3) - 4.0 * cb.powi(3) * cd
        + cb * cb * cc * cc;
    Ok(CubicCoefficients {
        a: ca,
        b: cb,
        c: cc,
        d: cd,
        delta0,
        delta1,
        discriminant,
    })
}

/// The three Cardano roots `x_k`, `k = 0, 1, 2`.
pub fn cardano_roots(c: &CubicCoefficients) -> Result<[Complex64; 3]> {
    if c.a == 0.0 {
        return Err(Error::DegenerateCubic("leading coefficient A vanishes (alpha' = 1)".into()));
    }
    let d0 = Complex64::new(c.delta0, 0.0);
    let d1 = Complex64::new(c.delta1, 0.0);
    let root = (d1 * d1 - 4.0 * d0 * d0 * d0).sqrt();
    let plus = ((d1 + root) / 2.0).cbrt();
    let minus = ((d1 - root) / 2.0).cbrt();
    let big_c = if plus.norm() >= minus.norm() { plus } else { minus };
    let xi = Complex64::new(-0.5, 3f64.sqrt() / 2.0);
    let mut roots = [Complex64::new(0.0, 0.0); 3];
    let mut branch = Complex64::new(1.0, 0.0);
    for r in roots.iter_mut() {
        let ck = branch * big_c;
        *r = if ck.norm() == 0.0 {
            // triple root
            Complex64::new(-c.b / (3.0 * c.a), 0.0)
        } else {
            -(Complex64::new(c.b, 0.0) + ck + d0 / ck) / (3.0 * c.a)
        };
        branch *= xi;
    }
    Ok(roots)
}

/// Exact uniform optimum.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[allow(non_snake_case)]
pub struct AllocationSolution {
    /// Points per split per task.
    pub n_star: f64,
    /// Points per task, `2 n_star`.
    pub N_star: f64,
    /// Cardano roots scaled to `n` units, as `(re, im)`.
    pub roots: [(f64, f64); 3],
    pub coefficients: CubicCoefficients,
    pub selection_note: String,
}

fn format_roots(roots: &[(f64, f64); 3]) -> String {
    roots
        .iter()
        .map(|(re, im)| format!("{re:.6e}{im:+.6e}i"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Optimal points per split for a uniform allocation, independent of the budget.
pub fn optimal_n_exact(alpha_prime: f64, sigma_prime: f64, nu: f64, p: usize) -> Result<AllocationSolution> {
    if p == 0 {
        return Err(Error::invalid("p", "must be at least 1"));
    }
    let coefficients = cubic_coefficients(alpha_prime, sigma_prime, nu)?;
    if alpha_prime == 1.0 {
        return Err(Error::DegenerateCubic(
            "alpha' = 1 makes A = B = 0; the uniform optimum is not defined by the cubic".into(),
        ));
    }
    let pf = p as f64;
    let raw = cardano_roots(&coefficients)?;
    let roots = raw.map(|z| (z.re * pf, z.im * pf));
    let candidates: Vec<f64> = raw
        .iter()
        .filter(|z| z.im.abs() <= REAL_ROOT_TOLERANCE * z.re.abs() && z.re > 0.0)
        .map(|z| z.re * pf)
        .collect();
    let (n_star, selection_note) = match candidates.len() {
        0 => return Err(Error::NoPositiveRoot { roots: format_roots(&roots) }),
        1 => (candidates[0], "unique real positive root".to_string()),
        k => {
            let best = candidates
                .iter()
                .copied()
                .min_by(|x, y| {
                    homogeneous_shape(alpha_prime, sigma_prime, nu, pf, *x)
                        .total_cmp(&homogeneous_shape(alpha_prime, sigma_prime, nu, pf, *y))
                })
                .expect("non-empty");
            (best, format!("{k} real positive roots; kept the one with the lowest homogeneous loss"))
        }
    };
    Ok(AllocationSolution {
        n_star,
        N_star: 2.0 * n_star,
        roots,
        coefficients,
        selection_note,
    })
}

/// Small-`alpha'` approximation of the optimal points per task,
/// `N* = 2 [2 (1 + sigma'^2 / nu^2)]^{1/3} |alpha'|^{4/3} p`.
#[allow(non_snake_case)]
pub fn optimal_N_approx(alpha_prime: f64, sigma_prime: f64, nu: f64, p: usize) -> Result<f64> {
    check_inputs(alpha_prime, sigma_prime, nu)?;
    let ratio = sigma_prime * sigma_prime / (nu * nu);
    Ok(2.0 * (2.0 * (1.0 + ratio)).cbrt() * alpha_prime.abs().powf(4.0 / 3.0) * p as f64)
}

/// Grid optimum of a uniform allocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridOptimum {
    pub n_star: usize,
    pub loss: f64,
    /// Grid values with `budget / (2n)` not an integer.
    pub skipped: Vec<usize>,
}

/// Whether `n` points per split tile the budget exactly.
pub fn is_feasible(budget: u64, n: usize) -> bool {
    n > 0 && budget > 0 && budget % (2 * n as u64) == 0
}

/// Argmin of `loss(n)` over the feasible part of `n_grid`, ties to the smaller `n`.
pub fn optimal_n_grid<F>(loss: F, budget: u64, n_grid: &[usize]) -> Result<GridOptimum>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    let (feasible, skipped): (Vec<usize>, Vec<usize>) = n_grid.iter().partition(|&&n| is_feasible(budget, n));
    if feasible.is_empty() {
        return Err(Error::EmptyGrid {
            budget,
            skipped: skipped.iter().map(|&n| n as u64).collect(),
        });
    }
    let values = feasible
        .par_iter()
        .map(|&n| loss(n).map(|l| (n, l)))
        .collect::<Result<Vec<_>>>()?;
    let (n_star, best) = values
        .into_iter()
        .reduce(|a, b| match b.1.total_cmp(&a.1) {
            std::cmp::Ordering::Less => b,
            std::cmp::Ordering::Equal if b.0 < a.0 => b,
            _ => a,
        })
        .expect("non-empty");
    Ok(GridOptimum {
        n_star,
        loss: best,
        skipped,
    })
}

/// Rounds a continuous optimum to a feasible `n` for `budget`: evaluates the
/// nearest feasible value on each side and keeps the better one.
pub fn round_to_feasible<F>(n_star: f64, budget: u64, loss: F) -> Result<usize>
where
    F: Fn(usize) -> Result<f64>,
{
    if budget == 0 || budget % 2 != 0 {
        return Err(Error::invalid("budget", "must be a positive even integer"));
    }
    let half = (budget / 2) as usize;
    let divisors: Vec<usize> = (1..=half).filter(|n| half % n == 0).collect();
    let below = divisors.iter().rev().find(|&&n| n as f64 <= n_star).copied();
    let above = divisors.iter().find(|&&n| n as f64 >= n_star).copied();
    match (below, above) {
        (Some(lo), Some(hi)) if lo != hi => {
            if loss(hi)? < loss(lo)? {
                Ok(hi)
            } else {
                Ok(lo)
            }
        }
        (Some(n), _) | (_, Some(n)) => Ok(n),
        (None, None) => unreachable!("1 always divides"),
    }
}

/// Non-uniform allocation problem: `m = tasks.len()` tasks sharing `budget`
/// points, with `2 n_i` points (split equally) given to task `i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationProblem {
    pub budget: u64,
    pub tasks: Vec<TaskSpec>,
}

impl AllocationProblem {
    pub fn new(budget: u64, tasks: Vec<TaskSpec>) -> Result<Self> {
        let problem = Self { budget, tasks };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::invalid("AllocationProblem.tasks", "at least one task is required"));
        }
        if self.budget % 2 != 0 || self.budget / 2 < self.tasks.len() as u64 {
            return Err(Error::InfeasibleBudget {
                budget: self.budget,
                tasks: self.tasks.len(),
            });
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.tasks.len()
    }

    /// Budget in units of `n` (points per split), `b / 2`.
    pub fn units(&self) -> usize {
        (self.budget / 2) as usize
    }

    /// Most uniform feasible allocation; the remainder goes to the first tasks.
    pub fn uniform_start(&self) -> Vec<usize> {
        let (q, r) = (self.units() / self.m(), self.units() % self.m());
        (0..self.m()).map(|i| q + usize::from(i < r)).collect()
    }

    /// Task list with the allocation applied.
    pub fn tasks_for(&self, allocation: &[usize]) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .zip(allocation)
            .map(|(t, &n)| t.with_split(n, n))
            .collect()
    }

    /// Analytic test loss of an allocation.
    pub fn theory_loss(&self, allocation: &[usize], env: &TaskEnvironment, test: &TestConfig) -> Result<f64> {
        theory_test_loss_under(&self.tasks_for(allocation), env, test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SearchMode {
    /// Exhaustive inside the configured bounds, coordinate descent otherwise.
    Auto,
    Exhaustive,
    CoordinateDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationSearchResult {
    pub allocation: Vec<usize>,
    pub loss: f64,
    pub mode: SearchMode,
    pub evaluations: usize,
}

fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(remaining: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in 1..=remaining - (parts - 1) {
            prefix.push(first);
            rec(remaining - first, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(total, parts, &mut Vec::with_capacity(parts), &mut out);
    out
}

/// Minimises `loss` over integer allocations with `sum 2 n_i = budget`, `n_i >= 1`.
///
/// Exhaustive mode enumerates every composition. Coordinate descent starts
/// from the most uniform allocation and applies single-unit transfers between
/// pairs of tasks until a full sweep finds no improving move.
pub fn allocation_search_nonuniform<F>(problem: &AllocationProblem, loss: F, mode: SearchMode) -> Result<AllocationSearchResult>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    problem.validate()?;
    let mode = match mode {
        SearchMode::Auto if problem.m() <= EXHAUSTIVE_MAX_TASKS && problem.budget <= EXHAUSTIVE_MAX_BUDGET => {
            SearchMode::Exhaustive
        }
        SearchMode::Auto => SearchMode::CoordinateDescent,
        other => other,
    };
    match mode {
        SearchMode::Exhaustive => {
            let candidates = compositions(problem.units(), problem.m());
            let values = candidates
                .par_iter()
                .map(|a| loss(a))
                .collect::<Result<Vec<f64>>>()?;
            let evaluations = values.len();
            // first strict minimum in lexicographic order
            let (idx, best) = values
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
            Ok(AllocationSearchResult {
                allocation: candidates[idx].clone(),
                loss: best,
                mode,
                evaluations,
            })
        }
        _ => {
            let mut current = problem.uniform_start();
            let mut best = loss(&current)?;
            let mut evaluations = 1;
            loop {
                let mut improved = false;
                for from in 0..current.len() {
                    for to in 0..current.len() {
                        if from == to || current[from] <= 1 {
                            continue;
                        }
                        current[from] -= 1;
                        current[to] += 1;
                        let value = loss(&current)?;
                        evaluations += 1;
                        if value < best {
                            best = value;
                            improved = true;
                        } else {
                            current[from] += 1;
                            current[to] -= 1;
                        }
                    }
                }
                if !improved {
                    break;
                }
            }
            Ok(AllocationSearchResult {
                allocation: current,
                loss: best,
                mode: SearchMode::CoordinateDescent,
                evaluations,
            })
        }
    }
}

/// Outcome of [`symmetry_certificate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymmetryReport {
    /// False when the tasks are not homogeneous; nothing else is checked then.
    pub applicable: bool,
    pub reference_loss: f64,
    pub permutations_checked: usize,
    /// Permutations whose loss differs from the reference in any bit.
    pub permutation_mismatches: usize,
    pub pairs_checked: usize,
    /// Pairs where averaging increased the loss by more than the tolerance.
    pub averaging_violations: usize,
    /// Largest `loss(averaged) - loss(original)` seen.
    pub worst_averaging_excess: f64,
    pub note: String,
}

impl SymmetryReport {
    pub fn holds(&self) -> bool {
        self.applicable && self.permutation_mismatches == 0 && self.averaging_violations == 0
    }
}

pub const AVERAGING_TOLERANCE: f64 = 1e-12;

fn homogeneous(tasks: &[TaskSpec]) -> bool {
    tasks.windows(2).all(|w| {
        w[0].sigma.to_bits() == w[1].sigma.to_bits()
            && w[0].lambda.to_bits() == w[1].lambda.to_bits()
            && w[0].alpha.to_bits() == w[1].alpha.to_bits()
    })
}

/// Checks the two symmetry facts behind the optimality of uniform allocations:
/// the analytic loss is invariant under permutations of `allocation`, and
/// replacing a pair `(n_i, n_j)` by its integer average (floor, ceil) never
/// increases it.
pub fn symmetry_certificate(
    tasks: &[TaskSpec],
    allocation: &[usize],
    trials: usize,
    env: &TaskEnvironment,
    test: &TestConfig,
    seed: u64,
) -> Result<SymmetryReport> {
    if tasks.len() != allocation.len() {
        return Err(Error::Shape(format!(
            "{} tasks but allocation has {} entries",
            tasks.len(),
            allocation.len()
        )));
    }
    if !homogeneous(tasks) {
        return Ok(SymmetryReport {
            applicable: false,
            reference_loss: f64::NAN,
            permutations_checked: 0,
            permutation_mismatches: 0,
            pairs_checked: 0,
            averaging_violations: 0,
            worst_averaging_excess: 0.0,
            note: "tasks differ in (sigma, lambda, alpha); symmetry argument does not apply".into(),
        });
    }
    let spec = tasks[0];
    let eval = |a: &[usize]| theory_test_loss_under(&allocated_tasks(&spec, a), env, test);
    let reference = eval(allocation)?;
    let mut rng = stream(seed);
    let mut shuffled = allocation.to_vec();
    let mut mismatches = 0;
    for _ in 0..trials {
        shuffled.shuffle(&mut rng);
        if eval(&shuffled)?.to_bits() != reference.to_bits() {
            mismatches += 1;
        }
    }
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut pairs = 0;
    if allocation.len() >= 2 {
        for _ in 0..trials {
            let i = rng.random_range(0..allocation.len());
            let mut j = rng.random_range(0..allocation.len() - 1);
            if j >= i {
                j += 1;
            }
            let mut averaged = allocation.to_vec();
            let total = allocation[i] + allocation[j];
            averaged[i] = total / 2;
            averaged[j] = total - total / 2;
            let excess = eval(&averaged)? - reference;
            worst = worst.max(excess);
            if excess > AVERAGING_TOLERANCE * reference.abs().max(1.0) {
                violations += 1;
            }
            pairs += 1;
        }
    }
    Ok(SymmetryReport {
        applicable: true,
        reference_loss: reference,
        permutations_checked: trials,
        permutation_mismatches: mismatches,
        pairs_checked: pairs,
        averaging_violations: violations,
        worst_averaging_excess: if pairs == 0 { 0.0 } else { worst },
        note: String::new(),
    })
}
