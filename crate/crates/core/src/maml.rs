//! Closed-form one-step MAML for mixed linear regression.
//!
//! With a single full-batch inner step, the adapted parameters are affine in
//! the meta-parameters `omega`, so the meta-training loss is a least-squares
//! objective `(1/2m) |gamma - B omega|^2`. [`assemble_meta_system`] builds
//! `(B, gamma)` and [`solve_meta_params`] minimises it exactly. The gradient
//! descent routine in [`gradient_descent_meta_params`] works directly on the
//! per-task losses and serves as an independent cross-check.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{derive_seed, CompensatedSum};
use crate::rng::{role, sample_split, sample_task_vector, TaskDataset, TaskEnvironment, TaskSpec};

/// Largest accepted condition number of the Gram matrix.
pub const CONDITION_LIMIT: f64 = 1e12;

/// A meta-training task: hyperparameters plus sampled data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTask {
    pub spec: TaskSpec,
    pub data: TaskDataset,
}

/// Meta-testing hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub sigma_r: f64,
    pub lambda_r: f64,
    pub alpha_r: f64,
    /// Target (adaptation) points per test task.
    pub n_r: usize,
    /// Evaluation points per test task.
    pub n_s: usize,
    pub num_test_tasks: usize,
}

impl TestConfig {
    /// 100 test tasks, 20 adaptation and 50 evaluation points, rate 0.3.
    pub fn protocol_default() -> Self {
        Self {
            sigma_r: 0.2,
            lambda_r: 1.0,
            alpha_r: 0.3,
            n_r: 20,
            n_s: 50,
            num_test_tasks: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_r >= 0.0 && self.sigma_r.is_finite()) {
            return Err(Error::invalid("TestConfig.sigma_r", "must be finite and >= 0"));
        }
        if !(self.lambda_r > 0.0 && self.lambda_r.is_finite()) {
            return Err(Error::invalid("TestConfig.lambda_r", "must be finite and > 0"));
        }
        if !self.alpha_r.is_finite() {
            return Err(Error::invalid("TestConfig.alpha_r", "must be finite"));
        }
        if self.n_r == 0 {
            return Err(Error::invalid("TestConfig.n_r", "must be at least 1"));
        }
        if self.n_s == 0 {
            return Err(Error::invalid("TestConfig.n_s", "must be at least 1"));
        }
        if self.num_test_tasks == 0 {
            return Err(Error::invalid("TestConfig.num_test_tasks", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// More stacked validation rows than parameters.
    Underparameterized,
    Overparameterized,
}

/// Stacked least-squares form of the meta-training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaSystem {
    pub b: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub regime: Regime,
    pub num_tasks: usize,
}

impl MetaSystem {
    /// `(1/2m) |gamma - B omega|^2`.
    pub fn loss(&self, omega: &DVector<f64>) -> f64 {
        let r = &self.gamma - &self.b * omega;
        r.norm_squared() / (2.0 * self.num_tasks as f64)
    }

    /// Condition number of the Gram matrix used by [`solve_meta_params`]
    /// (`B^T B` or `B B^T` depending on the regime).
    pub fn gram_condition(&self) -> f64 {
        let (_, condition) = gram_eigen(&self.gram());
        condition
    }

    fn gram(&self) -> DMatrix<f64> {
        match self.regime {
            Regime::Underparameterized => self.b.tr_mul(&self.b),
            Regime::Overparameterized => &self.b * self.b.transpose(),
        }
    }
}

fn check_shapes(omega: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.ncols() != omega.len() {
        return Err(Error::Shape(format!(
            "X has {} columns but omega has {} entries",
            x.ncols(),
            omega.len()
        )));
    }
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("X has {} rows but y has {} entries", x.nrows(), y.len())));
    }
    if x.nrows() == 0 {
        return Err(Error::Shape("empty data set".into()));
    }
    Ok(())
}

/// One full-batch gradient step on `|y - X theta|^2 / 2n` from `theta = omega`:
/// `theta = (I - (alpha/n) X^T X) omega + (alpha/n) X^T y`.
pub fn adapt_one_step(omega: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    check_shapes(omega, x, y)?;
    Ok(adapt_unchecked(omega, x, y, alpha))
}

fn adapt_unchecked(omega: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> DVector<f64> {
    let residual = x * omega - y;
    let grad = x.tr_mul(&residual);
    omega - grad * (alpha / x.nrows() as f64)
}

fn check_tasks(tasks: &[TrainingTask]) -> Result<usize> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::invalid("tasks", "at least one task is required"))?;
    let p = first.data.w_true.len();
    for (i, t) in tasks.iter().enumerate() {
        t.spec.validate()?;
        let d = &t.data;
        if d.x_train.shape() != (t.spec.n_train, p)
            || d.x_val.shape() != (t.spec.n_val, p)
            || d.y_train.len() != t.spec.n_train
            || d.y_val.len() != t.spec.n_val
            || d.w_true.len() != p
        {
            return Err(Error::Shape(format!("task {i} data does not match its spec and p = {p}")));
        }
    }
    Ok(p)
}

/// `(1/m) sum_i |y_i^v - X_i^v theta_i(omega)|^2 / 2 n_i^v`.
pub fn meta_train_loss(omega: &DVector<f64>, tasks: &[TrainingTask]) -> Result<f64> {
    let p = check_tasks(tasks)?;
    if omega.len() != p {
        return Err(Error::Shape(format!("omega has {} entries, expected {p}", omega.len())));
    }
    let mut acc = CompensatedSum::new();
    for t in tasks {
        let theta = adapt_unchecked(omega, &t.data.x_train, &t.data.y_train, t.spec.alpha);
        let r = &t.data.y_val - &t.data.x_val * theta;
        acc.add(r.norm_squared() / (2.0 * t.spec.n_val as f64));
    }
    Ok(acc.value() / tasks.len() as f64)
}

/// Builds `B` and `gamma`. Block `i` of `B` is
/// `X_i^v (I - (alpha_i/n_i^t) X_i^t^T X_i^t) / sqrt(n_i^v)`.
pub fn assemble_meta_system(tasks: &[TrainingTask]) -> Result<MetaSystem> {
    let p = check_tasks(tasks)?;
    let rows: usize = tasks.iter().map(|t| t.spec.n_val).sum();
    let mut b = DMatrix::zeros(rows, p);
    let mut gamma = DVector::zeros(rows);
    let mut offset = 0;
    for t in tasks {
        let d = &t.data;
        let step = t.spec.alpha / t.spec.n_train as f64;
        let scale = 1.0 / (t.spec.n_val as f64).sqrt();
        // X_v X_t^T is n_v x n_t, cheaper than forming the p x p matrix when n < p.
        let cross = &d.x_val * d.x_train.transpose();
        let block = (&d.x_val - (&cross * &d.x_train) * step) * scale;
        let target = (&d.y_val - (&cross * &d.y_train) * step) * scale;
        b.rows_mut(offset, t.spec.n_val).copy_from(&block);
        gamma.rows_mut(offset, t.spec.n_val).copy_from(&target);
        offset += t.spec.n_val;
    }
    let regime = if rows > p {
        Regime::Underparameterized
    } else {
        Regime::Overparameterized
    };
    Ok(MetaSystem {
        b,
        gamma,
        regime,
        num_tasks: tasks.len(),
    })
}

fn gram_eigen(gram: &DMatrix<f64>) -> (SymmetricEigen<f64, nalgebra::Dyn>, f64) {
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    };
    (eig, condition)
}

fn solve_with(eig: &SymmetricEigen<f64, nalgebra::Dyn>, rhs: &DVector<f64>) -> DVector<f64> {
    let q = &eig.eigenvectors;
    let mut coeffs = q.tr_mul(rhs);
    for (c, l) in coeffs.iter_mut().zip(eig.eigenvalues.iter()) {
        *c /= l;
    }
    q * coeffs
}

/// Exact minimiser of the meta-training loss.
///
/// Underparameterized: `(B^T B)^{-1} B^T gamma`. Overparameterized: the
/// solution closest to `omega0`, `B^T (B B^T)^{-1} gamma + [I - B^T (B B^T)^{-1} B] omega0`,
/// which is where gradient descent started at `omega0` converges.
pub fn solve_meta_params(system: &MetaSystem, omega0: &DVector<f64>) -> Result<DVector<f64>> {
    let p = system.b.ncols();
    if omega0.len() != p {
        return Err(Error::Shape(format!("omega0 has {} entries, expected {p}", omega0.len())));
    }
    let (eig, condition) = gram_eigen(&system.gram());
    if !(condition <= CONDITION_LIMIT) {
        return Err(Error::IllConditioned {
            condition,
            limit: CONDITION_LIMIT,
        });
    }
    let omega = match system.regime {
        Regime::Underparameterized => solve_with(&eig, &system.b.tr_mul(&system.gamma)),
        Regime::Overparameterized => {
            let residual = &system.gamma - &system.b * omega0;
            omega0 + system.b.tr_mul(&solve_with(&eig, &residual))
        }
    };
    Ok(omega)
}

/// Settings for the gradient-descent cross-check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterativeSolverConfig {
    pub meta_learning_rate: f64,
    pub max_iterations: usize,
    /// Stop when the gradient norm falls below this value.
    pub tolerance: f64,
}

impl IterativeSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.meta_learning_rate > 0.0 && self.meta_learning_rate.is_finite()) {
            return Err(Error::invalid("IterativeSolverConfig.meta_learning_rate", "must be > 0"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("IterativeSolverConfig.max_iterations", "must be at least 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("IterativeSolverConfig.tolerance", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeOutcome {
    pub omega: DVector<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

/// Gradient of the meta-training loss computed task by task through the
/// adaptation step (no stacked system involved).
pub fn meta_train_gradient(omega: &DVector<f64>, tasks: &[TrainingTask]) -> DVector<f64> {
    let mut grad = DVector::zeros(omega.len());
    for t in tasks {
        let d = &t.data;
        let theta = adapt_unchecked(omega, &d.x_train, &d.y_train, t.spec.alpha);
        let residual = &d.x_val * theta - &d.y_val;
        let g_theta = d.x_val.tr_mul(&residual) / t.spec.n_val as f64;
        // d theta / d omega = I - (alpha/n_t) X_t^T X_t (symmetric)
        let correction = d.x_train.tr_mul(&(&d.x_train * &g_theta)) * (t.spec.alpha / t.spec.n_train as f64);
        grad += g_theta - correction;
    }
    grad / tasks.len() as f64
}

/// Largest eigenvalue of the meta-loss Hessian, by power iteration on
/// Hessian-vector products. A safe step size is `1 / curvature`.
pub fn meta_loss_curvature(tasks: &[TrainingTask], iterations: usize) -> Result<f64> {
    let p = check_tasks(tasks)?;
    let zero = DVector::zeros(p);
    let offset = meta_train_gradient(&zero, tasks);
    let mut v = DVector::from_fn(p, |i, _| 1.0 + (i as f64) * 1e-3);
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..iterations.max(1) {
        let hv = meta_train_gradient(&v, tasks) - &offset;
        estimate = hv.norm();
        if estimate == 0.0 {
            break;
        }
        v = hv / estimate;
    }
    Ok(estimate)
}

/// Full-batch gradient descent on the meta-training loss from `omega0`.
pub fn gradient_descent_meta_params(
    tasks: &[TrainingTask],
    omega0: &DVector<f64>,
    config: &IterativeSolverConfig,
) -> Result<IterativeOutcome> {
    config.validate()?;
    let p = check_tasks(tasks)?;
    if omega0.len() != p {
        return Err(Error::Shape(format!("omega0 has {} entries, expected {p}", omega0.len())));
    }
    let mut omega = omega0.clone();
    let mut gradient_norm = f64::INFINITY;
    for it in 0..config.max_iterations {
        let grad = meta_train_gradient(&omega, tasks);
        gradient_norm = grad.norm();
        if !gradient_norm.is_finite() {
            return Err(Error::NonFinite { trials: it });
        }
        if gradient_norm <= config.tolerance {
            return Ok(IterativeOutcome {
                omega,
                iterations: it,
                gradient_norm,
                converged: true,
            });
        }
        omega -= grad * config.meta_learning_rate;
    }
    Ok(IterativeOutcome {
        omega,
        iterations: config.max_iterations,
        gradient_norm,
        converged: false,
    })
}

/// Per-task test losses: each test task draws fresh `w'`, adapts `omega_star`
/// with one step on `n_r` target points and is scored on `n_s` fresh points.
pub fn empirical_test_losses(
    omega_star: &DVector<f64>,
    test: &TestConfig,
    env: &TaskEnvironment,
    seed: u64,
) -> Result<Vec<f64>> {
    test.validate()?;
    if omega_star.len() != env.p() {
        return Err(Error::Shape(format!(
            "omega has {} entries, environment has p = {}",
            omega_star.len(),
            env.p()
        )));
    }
    let losses = (0..test.num_test_tasks as u64)
        .map(|t| {
            let task_seed = derive_seed(seed, &[t]);
            let w = sample_task_vector(env, derive_seed(task_seed, &[role::TASK_VECTOR]));
            let (x_r, y_r) = sample_split(&w, test.n_r, test.sigma_r, test.lambda_r, derive_seed(task_seed, &[role::TARGET]));
            let theta = adapt_unchecked(omega_star, &x_r, &y_r, test.alpha_r);
            let (x_s, y_s) = sample_split(&w, test.n_s, test.sigma_r, test.lambda_r, derive_seed(task_seed, &[role::TEST]));
            (y_s - x_s * theta).norm_squared() / (2.0 * test.n_s as f64)
        })
        .collect();
    Ok(losses)
}

/// Mean of [`empirical_test_losses`].
pub fn empirical_test_loss(omega_star: &DVector<f64>, test: &TestConfig, env: &TaskEnvironment, seed: u64) -> Result<f64> {
    let losses = empirical_test_losses(omega_star, test, env, seed)?;
    let mut acc = CompensatedSum::new();
    losses.iter().for_each(|&l| acc.add(l));
    Ok(acc.value() / losses.len() as f64)
}

/// Samples `specs.len()` training tasks, task `i` from sub-stream `i` of `seed`.
pub fn sample_training_tasks(env: &TaskEnvironment, specs: &[TaskSpec], seed: u64) -> Result<Vec<TrainingTask>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let data = crate::rng::sample_task_dataset(env, spec, derive_seed(seed, &[i as u64]))?;
            Ok(TrainingTask { spec: *spec, data })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vector, stream};

    fn tasks(p: usize, m: usize, n: usize, spec: TaskSpec, nu: f64, seed: u64) -> (TaskEnvironment, Vec<TrainingTask>) {
        let env = TaskEnvironment::constant(p, 0.05, nu).unwrap();
        let specs = vec![spec.with_split(n, n); m];
        let t = sample_training_tasks(&env, &specs, seed).unwrap();
        (env, t)
    }

    fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn adapt_examples() {
        let omega = DVector::from_vec(vec![0.3, -0.2]);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(adapt_one_step(&omega, &x, &y, 0.0).unwrap(), omega);
        let fit = &x * &omega;
        assert_eq!(adapt_one_step(&omega, &x, &fit, 0.7).unwrap(), omega);

        let theta = adapt_one_step(
            &DVector::zeros(1),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, 2.0),
            0.5,
        )
        .unwrap();
        assert_eq!(theta[0], 1.0);
        assert!(adapt_one_step(&omega, &x, &DVector::zeros(2), 0.1).is_err());
    }

    #[test]
    fn exact_fit_has_zero_meta_loss() {
        let spec = TaskSpec::split(0.0, 1.0, 0.4, 5).unwrap();
        let (env, t) = tasks(6, 4, 5, spec, 0.0, 1);
        let loss = meta_train_loss(&env.theta0_vector(), &t).unwrap();
        assert!(loss.abs() < 1e-28, "{loss}");
    }

    #[test]
    fn no_adaptation_is_half_mse() {
        let spec = TaskSpec::split(0.3, 1.0, 0.0, 7).unwrap();
        let (_, t) = tasks(3, 1, 7, spec, 0.2, 2);
        let omega = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let d = &t[0].data;
        let expect = (&d.y_val - &d.x_val * &omega).norm_squared() / 14.0;
        let got = meta_train_loss(&omega, &t).unwrap();
        assert!((got - expect).abs() <= 1e-15 * expect);
    }

    #[test]
    fn single_task_without_adaptation_is_ols() {
        let spec = TaskSpec::split(0.3, 1.0, 0.0, 20).unwrap();
        let (_, t) = tasks(4, 1, 20, spec, 0.2, 3);
        let sys = assemble_meta_system(&t).unwrap();
        let expected_b = &t[0].data.x_val / 20f64.sqrt();
        assert!((&sys.b - expected_b).norm() < 1e-14);
        assert!((&sys.gamma - &t[0].data.y_val / 20f64.sqrt()).norm() < 1e-14);

        let omega = solve_meta_params(&sys, &DVector::zeros(4)).unwrap();
        // independent least-squares route via SVD
        let ols = t[0].data.x_val.clone().svd(true, true).solve(&t[0].data.y_val, 1e-14).unwrap();
        assert!(rel(&omega, &ols) < 1e-10);
    }

    #[test]
    fn regime_flag() {
        let spec = TaskSpec::split(0.1, 1.0, 0.1, 1).unwrap();
        let (_, under) = tasks(8, 5, 2, spec, 0.1, 4);
        assert_eq!(assemble_meta_system(&under).unwrap().regime, Regime::Underparameterized);
        let (_, over) = tasks(8, 3, 2, spec, 0.1, 4);
        assert_eq!(assemble_meta_system(&over).unwrap().regime, Regime::Overparameterized);
    }

    #[test]
    fn noiseless_recovers_theta0() {
        let spec = TaskSpec::split(0.0, 1.0, 0.0, 10).unwrap();
        let (env, t) = tasks(5, 3, 10, spec, 0.0, 5);
        let sys = assemble_meta_system(&t).unwrap();
        let omega = solve_meta_params(&sys, &DVector::zeros(5)).unwrap();
        assert!(rel(&omega, &env.theta0_vector()) < 1e-10);
    }

    #[test]
    fn matches_gradient_descent() {
        let spec = TaskSpec::split(0.2, 1.0, 0.2, 6).unwrap();
        let (_, t) = tasks(8, 5, 6, spec, 0.2, 6);
        let sys = assemble_meta_system(&t).unwrap();
        let omega0 = DVector::zeros(8);
        let closed = solve_meta_params(&sys, &omega0).unwrap();
        let curvature = meta_loss_curvature(&t, 200).unwrap();
        let cfg = IterativeSolverConfig {
            meta_learning_rate: 1.0 / curvature,
            max_iterations: 2_000_000,
            tolerance: 1e-13,
        };
        let gd = gradient_descent_meta_params(&t, &omega0, &cfg).unwrap();
        assert!(gd.converged, "{gd:?}");
        assert!(rel(&gd.omega, &closed) < 1e-6, "{}", rel(&gd.omega, &closed));
    }

    #[test]
    fn overparameterized_interpolates() {
        let spec = TaskSpec::split(0.2, 1.0, 0.3, 3).unwrap();
        let (_, t) = tasks(20, 3, 3, spec, 0.2, 7);
        let sys = assemble_meta_system(&t).unwrap();
        assert_eq!(sys.regime, Regime::Overparameterized);
        let omega0 = gaussian_vector(20, 0.1, &mut stream(1));
        let omega = solve_meta_params(&sys, &omega0).unwrap();
        assert!(rel(&(&sys.b * &omega), &sys.gamma) < 1e-8);
        // the correction from omega0 lies in the row space of B
        let diff = &omega - &omega0;
        let proj = sys.b.transpose() * (&sys.b * sys.b.transpose()).try_inverse().unwrap() * &sys.b * &diff;
        assert!(rel(&proj, &diff) < 1e-8);
    }

    #[test]
    fn ill_conditioned_rejected() {
        let spec = TaskSpec::split(0.2, 1.0, 0.0, 2).unwrap();
        let (_, mut t) = tasks(3, 2, 2, spec, 0.2, 8);
        // duplicate a row so B has rank < p in the "under" regime
        let row = t[0].data.x_val.row(0).into_owned();
        t[1].data.x_val.row_mut(0).copy_from(&row);
        t[1].data.x_val.row_mut(1).copy_from(&(&row * 2.0));
        t[0].data.x_val.row_mut(1).copy_from(&(&row * -1.0));
        let sys = assemble_meta_system(&t).unwrap();
        assert_eq!(sys.regime, Regime::Underparameterized);
        match solve_meta_params(&sys, &DVector::zeros(3)) {
            Err(Error::IllConditioned { condition, .. }) => assert!(condition > CONDITION_LIMIT),
            other => panic!("expected ill-conditioned error, got {other:?}"),
        }
    }

    #[test]
    fn perfect_model_has_zero_test_loss() {
        let env = TaskEnvironment::constant(6, 0.05, 0.0).unwrap();
        let test = TestConfig {
            sigma_r: 0.0,
            num_test_tasks: 10,
            ..TestConfig::protocol_default()
        };
        let loss = empirical_test_loss(&env.theta0_vector(), &test, &env, 3).unwrap();
        assert!(loss < 1e-28, "{loss}");
    }

    #[test]
    fn unadapted_test_loss_expectation() {
        let env = TaskEnvironment::constant(16, 0.05, 0.2).unwrap();
        let test = TestConfig {
            sigma_r: 0.3,
            lambda_r: 1.5,
            alpha_r: 0.0,
            n_r: 5,
            n_s: 10,
            num_test_tasks: 20_000,
        };
        let losses = empirical_test_losses(&env.theta0_vector(), &test, &env, 9).unwrap();
        let (mean, se) = crate::numeric::mean_and_std_error(&losses);
        let expect = (0.09 + 2.25 * 0.04) / 2.0;
        assert!((mean - expect).abs() < 4.0 * se, "{mean} vs {expect} (se {se})");
        assert!(losses.iter().all(|&l| l >= 0.0));
        let again = empirical_test_loss(&env.theta0_vector(), &test, &env, 9).unwrap();
        assert_eq!(again, empirical_test_loss(&env.theta0_vector(), &test, &env, 9).unwrap());
    }

    #[test]
    fn gram_leading_term() {
        // E[B^T B] = sum_i lambda_i^2 h_i I_p exactly.
        let (p, m, n, alpha, lambda) = (6usize, 4usize, 5usize, 0.2, 1.3);
        let spec = TaskSpec::split(0.1, lambda, alpha, n).unwrap();
        let a = lambda * lambda * alpha;
        let h = (1.0 - a).powi(2) + a * a * (p as f64 + 1.0) / n as f64;
        let expect = m as f64 * lambda * lambda * h;
        let reps = 4000;
        let diag: Vec<f64> = (0..reps)
            .map(|r| {
                let (_, t) = tasks(p, m, n, spec, 0.2, 1000 + r);
                let sys = assemble_meta_system(&t).unwrap();
                sys.b.tr_mul(&sys.b).trace() / p as f64
            })
            .collect();
        let (mean, se) = crate::numeric::mean_and_std_error(&diag);
        assert!((mean - expect).abs() < 4.0 * se, "{mean} vs {expect} (se {se})");
    }
}
