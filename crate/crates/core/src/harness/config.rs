use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::arch::TensorShape;
use crate::catalog::{parse_code, BlockCode, BlockId};
use crate::qlearning::{EpsilonSchedule, LearningParams, DEFAULT_Q0};
use crate::reward::{Dataset, OracleConfig, TrainingBudget, DEFAULT_BASE_SCORES};
use crate::space::MAX_SUPPORTED_DEPTH;

#[derive(Debug, Clone, PartialEq)]
pub enum EvaluatorConfig {
    Simulated(OracleConfig),
    External { endpoint: String, timeout: Duration },
}

/// Source of the `timestamp` column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// The iteration number; keeps runs byte-reproducible.
    Logical,
    /// Milliseconds since the Unix epoch.
    Wall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub max_depth: u32,
    pub schedule: EpsilonSchedule,
    pub params: LearningParams,
    pub q0: f64,
    /// Replayed samples after each newly trained model.
    pub replay_batch: usize,
    pub seed: u64,
    pub evaluator: EvaluatorConfig,
    pub class_count: u32,
    pub input_shape: TensorShape,
    pub dataset: Dataset,
    pub budget: TrainingBudget,
    /// Where the replay DB, search log and checkpoint live; `None` keeps
    /// everything in memory.
    pub run_dir: Option<PathBuf>,
    pub dedupe: bool,
    /// Sampling attempts per stage, as a multiple of its quota, before
    /// exploration is forced.
    pub attempt_cap_factor: u32,
    /// Extra attempts for an evaluation that came back failed.
    pub eval_retries: u32,
    /// Requests in flight at once; values above 1 need an external evaluator.
    pub parallel: usize,
    pub clock: ClockMode,
    /// Block template file; `None` uses the built-in catalog.
    pub catalog: Option<PathBuf>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_depth: 5,
            schedule: EpsilonSchedule::default(),
            params: LearningParams::default(),
            q0: DEFAULT_Q0,
            replay_batch: 100,
            seed: 0,
            evaluator: EvaluatorConfig::Simulated(OracleConfig::default()),
            class_count: 10,
            input_shape: TensorShape { channels: 3, height: 32, width: 32 },
            dataset: Dataset::Cifar10,
            budget: TrainingBudget::default(),
            run_dir: None,
            dedupe: true,
            attempt_cap_factor: 50,
            eval_retries: 0,
            parallel: 1,
            clock: ClockMode::Logical,
            catalog: None,
        }
    }
}

/// Flat key/value form used by config files and checkpoints. Every key is
/// optional in a file; missing keys keep their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub max_depth: Option<u32>,
    pub schedule: Option<String>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub q0: Option<f64>,
    pub replay_batch: Option<usize>,
    pub seed: Option<u64>,
    pub evaluator: Option<String>,
    pub endpoint: Option<String>,
    pub timeout_secs: Option<f64>,
    pub oracle_seed: Option<u64>,
    pub noise_sigma: Option<f64>,
    pub poison_codes: Option<String>,
    pub poison_value: Option<f64>,
    pub base_scores: Option<Vec<f64>>,
    pub bonus_residual_concat: Option<f64>,
    pub bonus_inception_concat: Option<f64>,
    pub bonus_plain_inception: Option<f64>,
    pub class_count: Option<u32>,
    pub input_shape: Option<String>,
    pub dataset: Option<String>,
    pub epochs: Option<u32>,
    pub max_retrains: Option<u32>,
    pub lr0: Option<f64>,
    pub drop_factor: Option<f64>,
    pub retrain_drop_factor: Option<f64>,
    pub drop_every: Option<u32>,
    pub run_dir: Option<String>,
    pub dedupe: Option<bool>,
    pub attempt_cap_factor: Option<u32>,
    pub eval_retries: Option<u32>,
    pub parallel: Option<usize>,
    pub clock: Option<ClockMode>,
    pub catalog: Option<String>,
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Keys set in `other` win.
    pub fn overlay(mut self, other: ConfigFile) -> ConfigFile {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            max_depth, schedule, alpha, gamma, q0, replay_batch, seed, evaluator, endpoint, timeout_secs,
            oracle_seed, noise_sigma, poison_codes, poison_value, base_scores, bonus_residual_concat,
            bonus_inception_concat, bonus_plain_inception, class_count, input_shape, dataset, epochs,
            max_retrains, lr0, drop_factor, retrain_drop_factor, drop_every, run_dir, dedupe,
            attempt_cap_factor, eval_retries, parallel, clock, catalog
        );
        self
    }
}

impl SearchConfig {
    pub fn from_file(file: &ConfigFile) -> Result<Self, HarnessError> {
        let d = SearchConfig::default();
        let bad = |m: String| HarnessError::Config(m);

        let oracle_default = OracleConfig::default();
        let poison_codes = match &file.poison_codes {
            None => oracle_default.poison_codes.clone(),
            Some(s) if s.trim().is_empty() => Vec::new(),
            Some(s) => s
                .split(',')
                .map(|c| match parse_code(c.trim()) {
                    Ok(BlockCode::Block(id)) => Ok(id),
                    _ => Err(bad(format!("poison_codes: `{c}` is not a block code"))),
                })
                .collect::<Result<Vec<BlockId>, _>>()?,
        };
        let base_scores = match &file.base_scores {
            None => DEFAULT_BASE_SCORES,
            Some(v) => v
                .as_slice()
                .try_into()
                .map_err(|_| bad(format!("base_scores needs {} values, got {}", DEFAULT_BASE_SCORES.len(), v.len())))?,
        };
        let oracle = OracleConfig {
            base_scores,
            noise_sigma: file.noise_sigma.unwrap_or(oracle_default.noise_sigma),
            seed: file.oracle_seed.unwrap_or(oracle_default.seed),
            poison_codes,
            poison_value: file.poison_value.unwrap_or(oracle_default.poison_value),
            bonus_residual_concat: file.bonus_residual_concat.unwrap_or(oracle_default.bonus_residual_concat),
            bonus_inception_concat: file.bonus_inception_concat.unwrap_or(oracle_default.bonus_inception_concat),
            bonus_plain_inception: file.bonus_plain_inception.unwrap_or(oracle_default.bonus_plain_inception),
        };
        let timeout = Duration::try_from_secs_f64(file.timeout_secs.unwrap_or(3600.0))
            .map_err(|_| bad("timeout_secs must be a non-negative number".into()))?;
        let evaluator = match file.evaluator.as_deref().unwrap_or("simulated") {
            "simulated" => EvaluatorConfig::Simulated(oracle),
            "external" => EvaluatorConfig::External {
                endpoint: file.endpoint.clone().ok_or_else(|| bad("external evaluator needs `endpoint`".into()))?,
                timeout,
            },
            other => return Err(bad(format!("unknown evaluator `{other}` (simulated|external)"))),
        };
        let budget = TrainingBudget {
            epochs: file.epochs.unwrap_or(d.budget.epochs),
            max_retrains: file.max_retrains.unwrap_or(d.budget.max_retrains),
            lr0: file.lr0.unwrap_or(d.budget.lr0),
            drop_factor: file.drop_factor.unwrap_or(d.budget.drop_factor),
            retrain_drop_factor: file.retrain_drop_factor.unwrap_or(d.budget.retrain_drop_factor),
            drop_every: file.drop_every.unwrap_or(d.budget.drop_every),
        };
        let is_external = matches!(evaluator, EvaluatorConfig::External { .. });
        let cfg = SearchConfig {
            max_depth: file.max_depth.unwrap_or(d.max_depth),
            schedule: match &file.schedule {
                Some(s) => s.parse().map_err(|e| bad(format!("{e}")))?,
                None => d.schedule,
            },
            params: LearningParams {
                alpha: file.alpha.unwrap_or(d.params.alpha),
                gamma: file.gamma.unwrap_or(d.params.gamma),
            },
            q0: file.q0.unwrap_or(d.q0),
            replay_batch: file.replay_batch.unwrap_or(d.replay_batch),
            seed: file.seed.unwrap_or(d.seed),
            evaluator,
            class_count: file.class_count.unwrap_or(d.class_count),
            input_shape: match &file.input_shape {
                Some(s) => s.parse().map_err(|e: String| bad(format!("input_shape: {e}")))?,
                None => d.input_shape,
            },
            dataset: match &file.dataset {
                Some(s) => s.parse().map_err(bad)?,
                None => d.dataset,
            },
            budget,
            run_dir: file.run_dir.as_ref().map(PathBuf::from),
            dedupe: file.dedupe.unwrap_or(d.dedupe),
            attempt_cap_factor: file.attempt_cap_factor.unwrap_or(d.attempt_cap_factor),
            eval_retries: file.eval_retries.unwrap_or(d.eval_retries),
            parallel: file.parallel.unwrap_or(d.parallel),
            clock: file.clock.unwrap_or(if is_external { ClockMode::Wall } else { ClockMode::Logical }),
            catalog: file.catalog.as_ref().map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_file(&self) -> ConfigFile {
        let (oracle, endpoint, timeout) = match &self.evaluator {
            EvaluatorConfig::Simulated(o) => (Some(o), None, None),
            EvaluatorConfig::External { endpoint, timeout } => (None, Some(endpoint.clone()), Some(timeout.as_secs_f64())),
        };
        ConfigFile {
            max_depth: Some(self.max_depth),
            schedule: Some(self.schedule.to_string()),
            alpha: Some(self.params.alpha),
            gamma: Some(self.params.gamma),
            q0: Some(self.q0),
            replay_batch: Some(self.replay_batch),
            seed: Some(self.seed),
            evaluator: Some(if oracle.is_some() { "simulated" } else { "external" }.to_string()),
            endpoint,
            timeout_secs: timeout,
            oracle_seed: oracle.map(|o| o.seed),
            noise_sigma: oracle.map(|o| o.noise_sigma),
            poison_codes: oracle.map(|o| o.poison_codes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")),
            poison_value: oracle.map(|o| o.poison_value),
            base_scores: oracle.map(|o| o.base_scores.to_vec()),
            bonus_residual_concat: oracle.map(|o| o.bonus_residual_concat),
            bonus_inception_concat: oracle.map(|o| o.bonus_inception_concat),
            bonus_plain_inception: oracle.map(|o| o.bonus_plain_inception),
            class_count: Some(self.class_count),
            input_shape: Some(self.input_shape.to_string()),
            dataset: Some(self.dataset.to_string()),
            epochs: Some(self.budget.epochs),
            max_retrains: Some(self.budget.max_retrains),
            lr0: Some(self.budget.lr0),
            drop_factor: Some(self.budget.drop_factor),
            retrain_drop_factor: Some(self.budget.retrain_drop_factor),
            drop_every: Some(self.budget.drop_every),
            run_dir: self.run_dir.as_ref().map(|p| p.display().to_string()),
            dedupe: Some(self.dedupe),
            attempt_cap_factor: Some(self.attempt_cap_factor),
            eval_retries: Some(self.eval_retries),
            parallel: Some(self.parallel),
            clock: Some(self.clock),
            catalog: self.catalog.as_ref().map(|p| p.display().to_string()),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.max_depth == 0 || self.max_depth > MAX_SUPPORTED_DEPTH {
            return bad(format!("max_depth must be in 1..={MAX_SUPPORTED_DEPTH}"));
        }
        self.params.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.q0) {
            return bad(format!("q0 {} outside [0, 1]", self.q0));
        }
        if self.class_count == 0 {
            return bad("class_count must be at least 1".into());
        }
        if self.attempt_cap_factor == 0 {
            return bad("attempt_cap_factor must be at least 1".into());
        }
        if self.parallel == 0 {
            return bad("parallel must be at least 1".into());
        }
        match &self.evaluator {
            EvaluatorConfig::Simulated(o) => {
                o.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
                if self.parallel > 1 {
                    return bad("parallel evaluation needs the external evaluator".into());
                }
            }
            EvaluatorConfig::External { endpoint, .. } if endpoint.is_empty() => {
                return bad("endpoint must not be empty".into());
            }
            EvaluatorConfig::External { .. } => {}
        }
        Ok(())
    }
}
