//! Flat `key = value` configuration.
//!
//! Keys carry a section prefix (`env.`, `train.`, `test.`, `sweep.`,
//! `bootstrap.`, `easyhard.`, `moments.`). Blank lines and `#` comments are
//! ignored, unknown or repeated keys are errors, and every key left out takes
//! its default. [`AppConfig::to_canonical_string`] writes every key in a fixed
//! order, so `parse(canonical(c)) == c`.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::SweepConfig;
use crate::maml::TestConfig;
use crate::rng::{TaskEnvironment, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EasyHardConfig {
    pub easy_sigma: f64,
    pub easy_lambda: f64,
    pub hard_sigma: f64,
    pub hard_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppConfig {
    pub p: usize,
    /// Every entry of `theta0`.
    pub theta0: f64,
    pub nu: f64,
    /// Training-task template; `n_train`/`n_val` are the split used by
    /// single-allocation commands and are overridden per sweep cell.
    pub train: TaskSpec,
    pub train_m_tasks: usize,
    pub test: TestConfig,
    pub budgets: Vec<u64>,
    pub n_grid: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub bootstrap_samples: usize,
    pub easyhard: EasyHardConfig,
    pub moment_trials: usize,
    pub moment_max_n: usize,
    pub moment_max_p: usize,
    pub moment_lambdas: Vec<f64>,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            p: 128,
            theta0: 0.05,
            nu: 0.2,
            train: TaskSpec {
                sigma: 0.2,
                lambda: 1.0,
                alpha: 0.3,
                n_train: 16,
                n_val: 16,
            },
            train_m_tasks: 64,
            test: TestConfig::protocol_default(),
            budgets: vec![1024, 2048, 4096, 8192],
            n_grid: vec![4, 8, 16, 32, 64, 128],
            repetitions: 100,
            seed: 0,
            bootstrap_samples: 1000,
            easyhard: EasyHardConfig {
                easy_sigma: 0.05,
                easy_lambda: 1.0,
                hard_sigma: 1.0,
                hard_lambda: 1.0,
            },
            moment_trials: 100_000,
            moment_max_n: 6,
            moment_max_p: 6,
            moment_lambdas: vec![0.5, 1.0, 2.0],
        }
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e: T::Err| config_err(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_scalar(key, s))
        .collect()
}

fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Config key holding the field an embedded-type validation error names.
fn key_for(name: &str) -> &'static str {
    match name {
        "TaskEnvironment.p" => "env.p",
        "TaskEnvironment.nu" => "env.nu",
        "TaskEnvironment.theta0" => "env.theta0",
        "TaskSpec.sigma" => "train.sigma",
        "TaskSpec.lambda" => "train.lambda",
        "TaskSpec.alpha" => "train.alpha",
        "TaskSpec.n_train" => "train.n_train",
        "TaskSpec.n_val" => "train.n_val",
        "TestConfig.sigma_r" => "test.sigma_r",
        "TestConfig.lambda_r" => "test.lambda_r",
        "TestConfig.alpha_r" => "test.alpha_r",
        "TestConfig.n_r" => "test.n_r",
        "TestConfig.n_s" => "test.n_s",
        "TestConfig.num_test_tasks" => "test.num_tasks",
        _ => "config",
    }
}

fn named(e: Error) -> Error {
    match e {
        Error::InvalidParameter { name, reason } => config_err(key_for(name), format!("{name}: {reason}")),
        other => other,
    }
}

impl AppConfig {
    pub const KEYS: [&'static str; 28] = [
        "env.p",
        "env.theta0",
        "env.nu",
        "train.sigma",
        "train.lambda",
        "train.alpha",
        "train.n_train",
        "train.n_val",
        "train.m_tasks",
        "test.sigma_r",
        "test.lambda_r",
        "test.alpha_r",
        "test.n_r",
        "test.n_s",
        "test.num_tasks",
        "sweep.budgets",
        "sweep.n_grid",
        "sweep.repetitions",
        "sweep.seed",
        "bootstrap.samples",
        "easyhard.easy_sigma",
        "easyhard.easy_lambda",
        "easyhard.hard_sigma",
        "easyhard.hard_lambda",
        "moments.trials",
        "moments.max_n",
        "moments.max_p",
        "moments.lambdas",
    ];

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(line, format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(config_err(key, "key given more than once"));
            }
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its text value, without validation.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "env.p" => self.p = parse_scalar(key, value)?,
            "env.theta0" => self.theta0 = parse_scalar(key, value)?,
            "env.nu" => self.nu = parse_scalar(key, value)?,
            "train.sigma" => self.train.sigma = parse_scalar(key, value)?,
            "train.lambda" => self.train.lambda = parse_scalar(key, value)?,
            "train.alpha" => self.train.alpha = parse_scalar(key, value)?,
            "train.n_train" => self.train.n_train = parse_scalar(key, value)?,
            "train.n_val" => self.train.n_val = parse_scalar(key, value)?,
            "train.m_tasks" => self.train_m_tasks = parse_scalar(key, value)?,
            "test.sigma_r" => self.test.sigma_r = parse_scalar(key, value)?,
            "test.lambda_r" => self.test.lambda_r = parse_scalar(key, value)?,
            "test.alpha_r" => self.test.alpha_r = parse_scalar(key, value)?,
            "test.n_r" => self.test.n_r = parse_scalar(key, value)?,
            "test.n_s" => self.test.n_s = parse_scalar(key, value)?,
            "test.num_tasks" => self.test.num_test_tasks = parse_scalar(key, value)?,
            "sweep.budgets" => self.budgets = parse_list(key, value)?,
            "sweep.n_grid" => self.n_grid = parse_list(key, value)?,
            "sweep.repetitions" => self.repetitions = parse_scalar(key, value)?,
            "sweep.seed" => self.seed = parse_scalar(key, value)?,
            "bootstrap.samples" => self.bootstrap_samples = parse_scalar(key, value)?,
            "easyhard.easy_sigma" => self.easyhard.easy_sigma = parse_scalar(key, value)?,
            "easyhard.easy_lambda" => self.easyhard.easy_lambda = parse_scalar(key, value)?,
            "easyhard.hard_sigma" => self.easyhard.hard_sigma = parse_scalar(key, value)?,
            "easyhard.hard_lambda" => self.easyhard.hard_lambda = parse_scalar(key, value)?,
            "moments.trials" => self.moment_trials = parse_scalar(key, value)?,
            "moments.max_n" => self.moment_max_n = parse_scalar(key, value)?,
            "moments.max_p" => self.moment_max_p = parse_scalar(key, value)?,
            "moments.lambdas" => self.moment_lambdas = parse_list(key, value)?,
            _ => return Err(config_err(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.environment().map_err(named)?;
        self.train.validate().map_err(named)?;
        if self.train_m_tasks == 0 {
            return Err(config_err("train.m_tasks", "must be at least 1"));
        }
        self.test.validate().map_err(named)?;
        if self.budgets.is_empty() {
            return Err(config_err("sweep.budgets", "at least one budget is required"));
        }
        if let Some(b) = self.budgets.iter().find(|&&b| b == 0 || b % 2 != 0) {
            return Err(config_err("sweep.budgets", format!("{b} is not a positive even integer")));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(config_err("sweep.n_grid", "must list positive integers"));
        }
        if self.repetitions == 0 {
            return Err(config_err("sweep.repetitions", "must be at least 1"));
        }
        if self.bootstrap_samples == 0 {
            return Err(config_err("bootstrap.samples", "must be at least 1"));
        }
        let eh = &self.easyhard;
        for (key, v, positive) in [
            ("easyhard.easy_sigma", eh.easy_sigma, false),
            ("easyhard.hard_sigma", eh.hard_sigma, false),
            ("easyhard.easy_lambda", eh.easy_lambda, true),
            ("easyhard.hard_lambda", eh.hard_lambda, true),
        ] {
            if !v.is_finite() || v < 0.0 || (positive && v == 0.0) {
                return Err(config_err(key, format!("invalid value {v}")));
            }
        }
        if self.moment_trials < 100 {
            return Err(config_err("moments.trials", "must be at least 100"));
        }
        if self.moment_max_n == 0 {
            return Err(config_err("moments.max_n", "must be at least 1"));
        }
        if self.moment_max_p == 0 {
            return Err(config_err("moments.max_p", "must be at least 1"));
        }
        if self.moment_lambdas.is_empty() || self.moment_lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(config_err("moments.lambdas", "must list positive reals"));
        }
        Ok(())
    }

    /// Every key in canonical order, one per line.
    pub fn to_canonical_string(&self) -> String {
        let eh = &self.easyhard;
        let entries: Vec<(&str, String)> = vec![
            ("env.p", self.p.to_string()),
            ("env.theta0", self.theta0.to_string()),
            ("env.nu", self.nu.to_string()),
            ("train.sigma", self.train.sigma.to_string()),
            ("train.lambda", self.train.lambda.to_string()),
            ("train.alpha", self.train.alpha.to_string()),
            ("train.n_train", self.train.n_train.to_string()),
            ("train.n_val", self.train.n_val.to_string()),
            ("train.m_tasks", self.train_m_tasks.to_string()),
            ("test.sigma_r", self.test.sigma_r.to_string()),
            ("test.lambda_r", self.test.lambda_r.to_string()),
            ("test.alpha_r", self.test.alpha_r.to_string()),
            ("test.n_r", self.test.n_r.to_string()),
            ("test.n_s", self.test.n_s.to_string()),
            ("test.num_tasks", self.test.num_test_tasks.to_string()),
            ("sweep.budgets", join(&self.budgets)),
            ("sweep.n_grid", join(&self.n_grid)),
            ("sweep.repetitions", self.repetitions.to_string()),
            ("sweep.seed", self.seed.to_string()),
            ("bootstrap.samples", self.bootstrap_samples.to_string()),
            ("easyhard.easy_sigma", eh.easy_sigma.to_string()),
            ("easyhard.easy_lambda", eh.easy_lambda.to_string()),
            ("easyhard.hard_sigma", eh.hard_sigma.to_string()),
            ("easyhard.hard_lambda", eh.hard_lambda.to_string()),
            ("moments.trials", self.moment_trials.to_string()),
            ("moments.max_n", self.moment_max_n.to_string()),
            ("moments.max_p", self.moment_max_p.to_string()),
            ("moments.lambdas", join(&self.moment_lambdas)),
        ];
        entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn environment(&self) -> Result<TaskEnvironment> {
        TaskEnvironment::constant(self.p, self.theta0, self.nu)
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        Ok(SweepConfig {
            budgets: self.budgets.clone(),
            n_grid: self.n_grid.clone(),
            repetitions: self.repetitions,
            env: self.environment()?,
            train_spec: self.train,
            test: self.test,
            master_seed: self.seed,
        })
    }

    pub fn easy_spec(&self) -> TaskSpec {
        TaskSpec {
            sigma: self.easyhard.easy_sigma,
            lambda: self.easyhard.easy_lambda,
            ..self.train
        }
    }

    pub fn hard_spec(&self) -> TaskSpec {
        TaskSpec {
            sigma: self.easyhard.hard_sigma,
            lambda: self.easyhard.hard_lambda,
            ..self.train
        }
    }
}
