//! Analytic average test loss of one-step MAML on mixed linear regression.
//!
//! Three evaluators are provided:
//!
//! * [`theory_test_loss_under`]: general form for heterogeneous tasks when the
//!   stacked validation rows outnumber the parameters,
//! * [`theory_test_loss_over`]: the overparameterized counterpart, which also
//!   depends on the distance between the outer-loop initialisation and `theta0`,
//! * [`theory_test_loss_homogeneous`]: large-`p` simplification for identical
//!   tasks and a uniform allocation, written in terms of the budget `b = 2nm`.
//!
//! Sums over tasks go through [`sorted_sum`], which makes the general form
//! bit-for-bit invariant under permutations of the task list.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maml::TestConfig;
use crate::numeric::sorted_sum;
use crate::rng::{mu_coefficients, MuCoefficients, TaskEnvironment, TaskSpec};

/// Structure functions of one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StructureFactors {
    pub h: f64,
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub g4: f64,
    pub mu: MuCoefficients,
}

/// `h = (1 - lambda^2 alpha)^2 + lambda^4 alpha^2 (p + 1) / n_t` and the
/// polynomials `g1..g4` in `lambda^2 alpha`.
pub fn structure_functions(spec: &TaskSpec, p: usize) -> StructureFactors {
    let mu = mu_coefficients(spec.n_train, p);
    let q = spec.alpha_prime();
    let q2 = q * q;
    let q3 = q2 * q;
    let q4 = q2 * q2;
    StructureFactors {
        h: (1.0 - q).powi(2) + q2 * (p as f64 + 1.0) / spec.n_train as f64,
        g1: 1.0 - 2.0 * q * mu.mu2 + q2 * mu.mu3,
        g2: 1.0 - 2.0 * q * mu.mu11 + q2 * mu.mu21,
        g3: 1.0 - 4.0 * q + 6.0 * q2 * mu.mu2 - 4.0 * q3 * mu.mu3 + q4 * mu.mu4,
        g4: 1.0 - 4.0 * q + 2.0 * q2 * mu.mu2 + 4.0 * q2 * mu.mu11 - 4.0 * q3 * mu.mu21 + q4 * mu.mu22,
        mu,
    }
}

/// `h_r` for the meta-test adaptation.
fn test_h(test: &TestConfig, p: usize) -> f64 {
    let q = test.lambda_r * test.lambda_r * test.alpha_r;
    (1.0 - q).powi(2) + q * q * (p as f64 + 1.0) / test.n_r as f64
}

/// Loss of the test-side adaptation noise: `sigma_r^2/2 (1 + lambda_r^4 alpha_r^2 p / n_r)`.
fn test_noise_floor(test: &TestConfig, p: usize) -> f64 {
    let l2 = test.lambda_r * test.lambda_r;
    test.sigma_r * test.sigma_r / 2.0 * (1.0 + l2 * l2 * test.alpha_r * test.alpha_r * p as f64 / test.n_r as f64)
}

fn validate_inputs(tasks: &[TaskSpec], test: &TestConfig) -> Result<usize> {
    if tasks.is_empty() {
        return Err(Error::invalid("tasks", "at least one task is required"));
    }
    for t in tasks {
        t.validate()?;
    }
    test.validate()?;
    Ok(tasks.iter().map(|t| t.n_val).sum())
}

/// General (heterogeneous) average test loss for `sum_i n_i^v >= p`.
///
/// Exact up to the dropped finite-size remainder. The boundary
/// `sum_i n_i^v == p` is evaluated with the same expression.
pub fn theory_test_loss_under(tasks: &[TaskSpec], env: &TaskEnvironment, test: &TestConfig) -> Result<f64> {
    let total_val = validate_inputs(tasks, test)?;
    let p = env.p();
    if total_val < p {
        return Err(Error::Regime(format!(
            "underparameterized formula needs sum of n_val ({total_val}) >= p ({p})"
        )));
    }
    let pf = p as f64;
    let nu2 = env.nu() * env.nu();
    let mut weights = Vec::with_capacity(tasks.len());
    let mut terms = Vec::with_capacity(tasks.len());
    for t in tasks {
        let s = structure_functions(t, pf as usize);
        let l2 = t.lambda * t.lambda;
        let nt = t.n_train as f64;
        let nv = t.n_val as f64;
        let noise = t.sigma * t.sigma * (s.h + l2 * l2 * t.alpha * t.alpha / nt * ((nv + 1.0) * s.g1 + pf * s.g2));
        let spread = nu2 / pf * l2 * ((nv + 1.0) * s.g3 + pf * s.g4);
        weights.push(l2 * s.h);
        terms.push(l2 / nv * (noise + spread));
    }
    let total_weight = sorted_sum(&weights);
    let lr2 = test.lambda_r * test.lambda_r;
    let hr = test_h(test, p);
    let loss = test_noise_floor(test, p)
        + lr2 * hr * nu2 / 2.0
        + lr2 * hr * pf / 2.0 / (total_weight * total_weight) * sorted_sum(&terms);
    Ok(loss)
}

/// Overparameterized average test loss for `sum_i n_i^v < p`.
///
/// `omega0_dist` is `|omega0 - theta0|^2`, the squared distance between the
/// outer-loop initialisation and the task-distribution mean.
pub fn theory_test_loss_over(
    tasks: &[TaskSpec],
    env: &TaskEnvironment,
    test: &TestConfig,
    omega0_dist: f64,
) -> Result<f64> {
    let total_val = validate_inputs(tasks, test)?;
    let p = env.p();
    if total_val >= p {
        return Err(Error::Regime(format!(
            "overparameterized formula needs sum of n_val ({total_val}) < p ({p})"
        )));
    }
    if !(omega0_dist >= 0.0 && omega0_dist.is_finite()) {
        return Err(Error::invalid("omega0_dist", "must be finite and >= 0"));
    }
    let pf = p as f64;
    let fill = total_val as f64 / pf;
    let nu2 = env.nu() * env.nu();
    let noise_terms: Vec<f64> = tasks
        .iter()
        .map(|t| {
            let s = structure_functions(t, p);
            let l2 = t.lambda * t.lambda;
            t.sigma * t.sigma * t.n_val as f64 / (l2 * s.h)
                * (1.0 + l2 * l2 * t.alpha * t.alpha * pf / t.n_train as f64)
        })
        .collect();
    let scale = test.lambda_r * test.lambda_r * test_h(test, p);
    Ok(test_noise_floor(test, p)
        + scale / 2.0 * (1.0 - fill) * omega0_dist
        + scale * nu2 / 2.0 * (1.0 + fill)
        + scale / (2.0 * pf) * sorted_sum(&noise_terms))
}

/// Inputs of the homogeneous, uniform-allocation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomogeneousLossParams {
    /// `sigma / lambda`
    pub sigma_prime: f64,
    /// `lambda^2 alpha`
    pub alpha_prime: f64,
    pub nu: f64,
    pub p: usize,
    /// Points per task per split. Real-valued so the loss can be scanned and
    /// differentiated in `n`.
    pub n: f64,
    /// Total budget `b = 2 n m`.
    pub budget: f64,
    pub test: TestConfig,
}

/// `g1..g4` of the large-`p` homogeneous form, functions of `alpha'` and `p/n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousFactors {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub g4: f64,
}

pub fn homogeneous_factors(alpha_prime: f64, p: f64, n: f64) -> HomogeneousFactors {
    let a = alpha_prime;
    let u = p / n;
    let one = 1.0 - a;
    HomogeneousFactors {
        g1: one * one - 2.0 * a * u + a * a * (3.0 * u + u * u),
        g2: one * one + a * a * u,
        g3: one.powi(4) + 6.0 * a * a * u - a.powi(3) * (12.0 * u + 4.0 * u * u)
            + a.powi(4) * (6.0 * u + 6.0 * u * u + u.powi(3)),
        g4: one.powi(4) + 2.0 * a * a * u - 4.0 * a.powi(3) * u + a.powi(4) * (2.0 * u + u * u),
    }
}

/// The `n`-dependent factor of the homogeneous loss:
/// `g2^-2 { sigma'^2 [g2 + alpha'^2 (g1 + (p/n) g2)] + nu^2 [(n/p) g3 + g4] }`.
///
/// The loss is `C1 + (C2 p / b)` times this, so its minimiser in `n` does not
/// depend on the budget or on the test configuration.
pub fn homogeneous_shape(alpha_prime: f64, sigma_prime: f64, nu: f64, p: f64, n: f64) -> f64 {
    let g = homogeneous_factors(alpha_prime, p, n);
    let a2 = alpha_prime * alpha_prime;
    let noise = sigma_prime * sigma_prime * (g.g2 + a2 * (g.g1 + p / n * g.g2));
    let spread = nu * nu * (n / p * g.g3 + g.g4);
    (noise + spread) / (g.g2 * g.g2)
}

/// `C2 = lambda_r^2 (1 - lambda_r^2 alpha_r)^2 + lambda_r^6 alpha_r^2 p / n_r`.
pub fn homogeneous_c2(test: &TestConfig, p: usize) -> f64 {
    let l2 = test.lambda_r * test.lambda_r;
    l2 * (1.0 - l2 * test.alpha_r).powi(2) + l2.powi(3) * test.alpha_r * test.alpha_r * p as f64 / test.n_r as f64
}

/// `C1 = sigma_r^2/2 (1 + lambda_r^4 alpha_r^2 p / n_r) + nu^2 C2 / 2`.
pub fn homogeneous_c1(test: &TestConfig, nu: f64, p: usize) -> f64 {
    test_noise_floor(test, p) + nu * nu / 2.0 * homogeneous_c2(test, p)
}

/// Homogeneous large-`p` loss `C1 + (C2 p / b) * shape(n)`.
pub fn theory_test_loss_homogeneous(params: &HomogeneousLossParams) -> Result<f64> {
    params.test.validate()?;
    if params.p == 0 {
        return Err(Error::invalid("HomogeneousLossParams.p", "must be at least 1"));
    }
    if !(params.n > 0.0 && params.n.is_finite()) {
        return Err(Error::invalid("HomogeneousLossParams.n", "must be finite and > 0"));
    }
    if !(params.budget >= 2.0 * params.n) {
        return Err(Error::invalid(
            "HomogeneousLossParams.budget",
            format!("must be at least 2n = {}", 2.0 * params.n),
        ));
    }
    if !(params.nu >= 0.0 && params.sigma_prime >= 0.0) {
        return Err(Error::invalid("HomogeneousLossParams", "nu and sigma_prime must be >= 0"));
    }
    let p = params.p as f64;
    let shape = homogeneous_shape(params.alpha_prime, params.sigma_prime, params.nu, p, params.n);
    Ok(homogeneous_c1(&params.test, params.nu, params.p)
        + homogeneous_c2(&params.test, params.p) * p / params.budget * shape)
}

/// `m` copies of `spec` with `n` points per split.
pub fn uniform_tasks(spec: &TaskSpec, n: usize, m: usize) -> Vec<TaskSpec> {
    vec![spec.with_split(n, n); m]
}

/// Task list for an explicit allocation `(n_1, ..., n_m)`, equal splits.
pub fn allocated_tasks(spec: &TaskSpec, allocation: &[usize]) -> Vec<TaskSpec> {
    allocation.iter().map(|&n| spec.with_split(n, n)).collect()
}
