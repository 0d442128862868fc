//! Seeded samplers for the mixed-linear-regression generative model and
//! Gaussian matrix moment oracles.
//!
//! Every sampler takes an explicit `u64` seed and builds a ChaCha8 stream from
//! it. Sub-streams are obtained with [`derive_seed`] using the tags in
//! [`role`], so the stream for e.g. the validation split of a task never
//! overlaps the training split regardless of how many draws either makes.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::derive_seed;

/// Stream tags used with [`derive_seed`].
pub mod role {
    pub const TASK_VECTOR: u64 = 0x7461_736b;
    pub const TRAIN: u64 = 0x7472_6169;
    pub const VALIDATION: u64 = 0x7661_6c69;
    pub const TARGET: u64 = 0x7461_7267;
    pub const TEST: u64 = 0x7465_7374;
    pub const MOMENT: u64 = 0x6d6f_6d65;
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Distribution of task parameters: `w ~ N(theta0, nu^2/p I_p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEnvironment {
    theta0: Vec<f64>,
    nu: f64,
}

impl TaskEnvironment {
    pub fn new(theta0: Vec<f64>, nu: f64) -> Result<Self> {
        if theta0.is_empty() {
            return Err(Error::invalid("TaskEnvironment.p", "must be at least 1"));
        }
        if !(nu >= 0.0 && nu.is_finite()) {
            return Err(Error::invalid("TaskEnvironment.nu", format!("must be finite and >= 0, got {nu}")));
        }
        if theta0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("TaskEnvironment.theta0", "entries must be finite"));
        }
        Ok(Self { theta0, nu })
    }

    /// `theta0 = (value, ..., value)` of length `p`.
    pub fn constant(p: usize, value: f64, nu: f64) -> Result<Self> {
        Self::new(vec![value; p], nu)
    }

    /// sigma-independent defaults of the linear-regression experiments:
    /// `p = 128`, `nu = 0.2`, `theta0 = (0.05, ..., 0.05)`.
    pub fn protocol_default() -> Self {
        Self::constant(128, 0.05, 0.2).expect("valid defaults")
    }

    pub fn p(&self) -> usize {
        self.theta0.len()
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn theta0(&self) -> &[f64] {
        &self.theta0
    }

    pub fn theta0_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta0)
    }
}

/// Per-task sampling and adaptation hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Label-noise standard deviation.
    pub sigma: f64,
    /// Input standard deviation.
    pub lambda: f64,
    /// Inner-loop learning rate.
    pub alpha: f64,
    pub n_train: usize,
    pub n_val: usize,
}

impl TaskSpec {
    pub fn new(sigma: f64, lambda: f64, alpha: f64, n_train: usize, n_val: usize) -> Result<Self> {
        let spec = Self {
            sigma,
            lambda,
            alpha,
            n_train,
            n_val,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Equal train/validation split of `n` points each.
    pub fn split(sigma: f64, lambda: f64, alpha: f64, n: usize) -> Result<Self> {
        Self::new(sigma, lambda, alpha, n, n)
    }

    pub fn with_split(self, n_train: usize, n_val: usize) -> Self {
        Self {
            n_train,
            n_val,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("TaskSpec.sigma", format!("must be finite and >= 0, got {}", self.sigma)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("TaskSpec.lambda", format!("must be finite and > 0, got {}", self.lambda)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::invalid("TaskSpec.alpha", "must be finite"));
        }
        if self.n_train == 0 {
            return Err(Error::invalid("TaskSpec.n_train", "must be at least 1"));
        }
        if self.n_val == 0 {
            return Err(Error::invalid("TaskSpec.n_val", "must be at least 1"));
        }
        Ok(())
    }

    /// `alpha' = lambda^2 alpha`.
    pub fn alpha_prime(&self) -> f64 {
        self.lambda * self.lambda * self.alpha
    }

    /// `sigma' = sigma / lambda`.
    pub fn sigma_prime(&self) -> f64 {
        self.sigma / self.lambda
    }
}

/// One sampled task: its generating parameter and both data splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub w_true: DVector<f64>,
    pub x_train: DMatrix<f64>,
    pub y_train: DVector<f64>,
    pub x_val: DMatrix<f64>,
    pub y_val: DVector<f64>,
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

pub(crate) fn gaussian_vector(len: usize, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Draws `w ~ N(theta0, nu^2/p I_p)`.
pub fn sample_task_vector(env: &TaskEnvironment, seed: u64) -> DVector<f64> {
    let mut rng = stream(seed);
    let p = env.p();
    let scale = env.nu / (p as f64).sqrt();
    let noise = gaussian_vector(p, scale, &mut rng);
    env.theta0_vector() + noise
}

/// Draws inputs `X` (rows `N(0, lambda^2 I_p)`) and labels `y = X w + z`,
/// `z ~ N(0, sigma^2 I)`.
pub fn sample_split(
    w: &DVector<f64>,
    n: usize,
    sigma: f64,
    lambda: f64,
    seed: u64,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = stream(seed);
    let x = gaussian_matrix(n, w.len(), lambda, &mut rng);
    let z = gaussian_vector(n, sigma, &mut rng);
    let y = &x * w + z;
    (x, y)
}

/// Samples a full task: parameter vector, training split and validation split
/// from three independent sub-streams of `seed`.
pub fn sample_task_dataset(env: &TaskEnvironment, spec: &TaskSpec, seed: u64) -> Result<TaskDataset> {
    spec.validate()?;
    let w_true = sample_task_vector(env, derive_seed(seed, &[role::TASK_VECTOR]));
    let (x_train, y_train) = sample_split(
        &w_true,
        spec.n_train,
        spec.sigma,
        spec.lambda,
        derive_seed(seed, &[role::TRAIN]),
    );
    let (x_val, y_val) = sample_split(
        &w_true,
        spec.n_val,
        spec.sigma,
        spec.lambda,
        derive_seed(seed, &[role::VALIDATION]),
    );
    Ok(TaskDataset {
        w_true,
        x_train,
        y_train,
        x_val,
        y_val,
    })
}

/// The eight Gaussian matrix expectations with closed forms proportional to
/// `I_p`. `G = X^T X` with `X` an `n x p` matrix of iid `N(0, lambda^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MomentKind {
    /// `E[G]`
    First,
    /// `E[G^2]`
    Second,
    /// `E[G^3]`
    Third,
    /// `E[G^4]`
    Fourth,
    /// `E[G tr(G)]`
    TraceFirstFirst,
    /// `E[G^2 tr(G)]`
    TraceSecondFirst,
    /// `E[G tr(G^2)]`
    TraceFirstSecond,
    /// `E[G^2 tr(G^2)]`
    TraceSecondSecond,
}

impl MomentKind {
    pub const ALL: [MomentKind; 8] = [
        MomentKind::First,
        MomentKind::Second,
        MomentKind::Third,
        MomentKind::Fourth,
        MomentKind::TraceFirstFirst,
        MomentKind::TraceSecondFirst,
        MomentKind::TraceFirstSecond,
        MomentKind::TraceSecondSecond,
    ];

    /// Total number of `X^T X` factors; the moment scales as `lambda^(2k)`.
    pub fn degree(self) -> i32 {
        match self {
            MomentKind::First => 1,
            MomentKind::Second | MomentKind::TraceFirstFirst => 2,
            MomentKind::Third | MomentKind::TraceSecondFirst | MomentKind::TraceFirstSecond => 3,
            MomentKind::Fourth | MomentKind::TraceSecondSecond => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MomentKind::First => "G",
            MomentKind::Second => "G^2",
            MomentKind::Third => "G^3",
            MomentKind::Fourth => "G^4",
            MomentKind::TraceFirstFirst => "G*tr(G)",
            MomentKind::TraceSecondFirst => "G^2*tr(G)",
            MomentKind::TraceFirstSecond => "G*tr(G^2)",
            MomentKind::TraceSecondSecond => "G^2*tr(G^2)",
        }
    }
}

/// Closed-form coefficient `c` such that the expectation equals `c I_p`.
pub fn lemma1_moment(kind: MomentKind, n: usize, p: usize, lambda: f64) -> f64 {
    let n = n as f64;
    let p = p as f64;
    let poly = match kind {
        MomentKind::First => n,
        MomentKind::Second => n * (n + p + 1.0),
        MomentKind::Third => n * (n * n + p * p + 3.0 * n * p + 3.0 * n + 3.0 * p + 4.0),
        MomentKind::Fourth => {
            n * (n.powi(3)
                + p.powi(3)
                + 6.0 * n * n * p
                + 6.0 * n * p * p
                + 6.0 * n * n
                + 6.0 * p * p
                + 17.0 * n * p
                + 21.0 * n
                + 21.0 * p
                + 20.0)
        }
        MomentKind::TraceFirstFirst => n * n * p + 2.0 * n,
        MomentKind::TraceSecondFirst | MomentKind::TraceFirstSecond => {
            n * (n * n * p + n * p * p + n * p + 4.0 * n + 4.0 * p + 4.0)
        }
        MomentKind::TraceSecondSecond => {
            n * (n.powi(3) * p
                + n * p.powi(3)
                + 2.0 * n * n * p * p
                + 2.0 * n * n * p
                + 2.0 * n * p * p
                + 8.0 * n * n
                + 8.0 * p * p
                + 21.0 * n * p
                + 20.0 * n
                + 20.0 * p
                + 20.0)
        }
    };
    lambda.powi(2 * kind.degree()) * poly
}

/// Monte Carlo estimate of a moment projected onto the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub kind: MomentKind,
    /// Mean over trials of the diagonal mean.
    pub estimate: f64,
    pub std_error: f64,
    /// Mean over trials of the off-diagonal mean (0 when `p == 1`).
    pub offdiag_mean: f64,
    pub offdiag_std_error: f64,
    pub trials: usize,
}

#[derive(Default, Clone, Copy)]
struct Welford {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn std_error(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        (self.m2 / (self.count - 1) as f64 / self.count as f64).sqrt()
    }
}

fn diag_and_offdiag_mean(m: &DMatrix<f64>, scale: f64) -> (f64, f64) {
    let p = m.nrows();
    let trace = m.trace();
    let diag = scale * trace / p as f64;
    if p == 1 {
        return (diag, 0.0);
    }
    let off = scale * (m.sum() - trace) / (p * (p - 1)) as f64;
    (diag, off)
}

/// Estimates all eight moments from one set of `trials` samples of `X`.
pub fn monte_carlo_moments(
    n: usize,
    p: usize,
    lambda: f64,
    trials: usize,
    seed: u64,
) -> Result<[MomentEstimate; 8]> {
    if n == 0 || p == 0 {
        return Err(Error::invalid("n, p", "must be at least 1"));
    }
    if trials < 100 {
        return Err(Error::invalid("trials", format!("need at least 100, got {trials}")));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda", "must be finite and > 0"));
    }
    let mut rng = stream(derive_seed(seed, &[role::MOMENT]));
    let mut diag = [Welford::default(); 8];
    let mut off = [Welford::default(); 8];
    for _ in 0..trials {
        let x = gaussian_matrix(n, p, lambda, &mut rng);
        let g = x.tr_mul(&x);
        let g2 = &g * &g;
        let g3 = &g2 * &g;
        let g4 = &g2 * &g2;
        let tr1 = g.trace();
        let tr2 = g2.trace();
        let stats = [
            diag_and_offdiag_mean(&g, 1.0),
            diag_and_offdiag_mean(&g2, 1.0),
            diag_and_offdiag_mean(&g3, 1.0),
            diag_and_offdiag_mean(&g4, 1.0),
            diag_and_offdiag_mean(&g, tr1),
            diag_and_offdiag_mean(&g2, tr1),
            diag_and_offdiag_mean(&g, tr2),
            diag_and_offdiag_mean(&g2, tr2),
        ];
        for (k, (d, o)) in stats.into_iter().enumerate() {
            diag[k].push(d);
            off[k].push(o);
        }
    }
    let mut out = [MomentEstimate {
        kind: MomentKind::First,
        estimate: 0.0,
        std_error: 0.0,
        offdiag_mean: 0.0,
        offdiag_std_error: 0.0,
        trials,
    }; 8];
    for (k, kind) in MomentKind::ALL.into_iter().enumerate() {
        let est = MomentEstimate {
            kind,
            estimate: diag[k].mean,
            std_error: diag[k].std_error(),
            offdiag_mean: off[k].mean,
            offdiag_std_error: off[k].std_error(),
            trials,
        };
        if ![est.estimate, est.std_error, est.offdiag_mean, est.offdiag_std_error]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite { trials });
        }
        out[k] = est;
    }
    Ok(out)
}

/// Monte Carlo estimate of a single moment kind.
pub fn monte_carlo_moment(
    kind: MomentKind,
    n: usize,
    p: usize,
    lambda: f64,
    trials: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    let all = monte_carlo_moments(n, p, lambda, trials, seed)?;
    Ok(all[MomentKind::ALL.iter().position(|k| *k == kind).expect("kind listed")])
}

/// Normalised moment coefficients, each tending to 1 as `n_t -> infinity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MuCoefficients {
    pub mu2: f64,
    pub mu3: f64,
    pub mu4: f64,
    pub mu11: f64,
    pub mu21: f64,
    pub mu22: f64,
}

pub fn mu_coefficients(n_t: usize, p: usize) -> MuCoefficients {
    let n = n_t as f64;
    let p = p as f64;
    MuCoefficients {
        mu2: (n + p + 1.0) / n,
        mu3: (n * n + p * p + 3.0 * n * p + 3.0 * n + 3.0 * p + 4.0) / (n * n),
        mu4: (n.powi(3)
            + p.powi(3)
            + 6.0 * n * n * p
            + 6.0 * n * p * p
            + 6.0 * n * n
            + 6.0 * p * p
            + 17.0 * n * p
            + 21.0 * n
            + 21.0 * p
            + 20.0)
            / n.powi(3),
        mu11: (n * n * p + 2.0 * n) / (n * n * p),
        mu21: (n * n * p + n * p * p + n * p + 4.0 * n + 4.0 * p + 4.0) / (n * n * p),
        mu22: (n.powi(3) * p
            + n * p.powi(3)
            + 2.0 * n * n * p * p
            + 2.0 * n * n * p
            + 2.0 * n * p * p
            + 8.0 * n * n
            + 8.0 * p * p
            + 21.0 * n * p
            + 20.0 * n
            + 20.0 * p
            + 20.0)
            / (n.powi(3) * p),
    }
}

/// One Monte Carlo check of a closed-form moment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentCheck {
    pub kind: MomentKind,
    pub n: usize,
    pub p: usize,
    pub lambda: f64,
    pub closed_form: f64,
    pub estimate: f64,
    pub std_error: f64,
    /// `(estimate - closed_form) / std_error`.
    pub z: f64,
    /// Off-diagonal mean in units of its standard error (0 when `p == 1`).
    pub offdiag_z: f64,
    pub pass: bool,
}

/// Standard errors a Monte Carlo estimate may deviate by.
pub const MOMENT_Z_LIMIT: f64 = 4.0;

fn z_score(deviation: f64, se: f64) -> f64 {
    if se > 0.0 {
        deviation / se
    } else if deviation == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Checks every kind at every `(n, p, lambda)` combination against its closed
/// form. Each combination draws from its own sub-stream of `seed`.
pub fn verify_moment_suite(
    ns: &[usize],
    ps: &[usize],
    lambdas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<MomentCheck>> {
    use rayon::prelude::*;
    let configs: Vec<(usize, usize, f64)> = ns
        .iter()
        .flat_map(|&n| ps.iter().flat_map(move |&p| lambdas.iter().map(move |&l| (n, p, l))))
        .collect();
    let per_config = configs
        .par_iter()
        .map(|&(n, p, lambda)| {
            let sub = derive_seed(seed, &[n as u64, p as u64, lambda.to_bits()]);
            let estimates = monte_carlo_moments(n, p, lambda, trials, sub)?;
            Ok(estimates.map(|e| {
                let closed_form = lemma1_moment(e.kind, n, p, lambda);
                let z = z_score(e.estimate - closed_form, e.std_error);
                let offdiag_z = if p == 1 { 0.0 } else { z_score(e.offdiag_mean, e.offdiag_std_error) };
                MomentCheck {
                    kind: e.kind,
                    n,
                    p,
                    lambda,
                    closed_form,
                    estimate: e.estimate,
                    std_error: e.std_error,
                    z,
                    offdiag_z,
                    pass: z.abs() <= MOMENT_Z_LIMIT,
                }
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_config.into_iter().flatten().collect())
}
