//! Turning a sampled network into a reward.
//!
//! Two evaluators sit behind the [`Evaluator`] trait: a deterministic
//! simulated oracle used for tests and desk-scale runs, and a client for an
//! external trainer speaking the line-delimited JSON protocol in [`wire`].

mod client;
mod oracle;
mod server;
pub mod wire;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{external_evaluate, TrainerClient};
pub use oracle::{oracle_evaluate, OracleConfig, DEFAULT_BASE_SCORES};
pub use server::{handle_request_line, serve_oracle, OracleServer};

use crate::catalog::BlockCode;
use crate::space::SpaceError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("illegal block sequence: {0}")]
    IllegalSequence(#[from] SpaceError),
    #[error("oracle config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    #[default]
    Cifar10,
    Svhn,
    Mnist,
    Custom,
}

impl std::str::FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cifar10" => Ok(Dataset::Cifar10),
            "svhn" => Ok(Dataset::Svhn),
            "mnist" => Ok(Dataset::Mnist),
            "custom" => Ok(Dataset::Custom),
            other => Err(format!("unknown dataset `{other}` (cifar10|svhn|mnist|custom)")),
        }
    }
}

impl std::fmt::Display for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dataset::Cifar10 => "cifar10",
            Dataset::Svhn => "svhn",
            Dataset::Mnist => "mnist",
            Dataset::Custom => "custom",
        })
    }
}

/// Training budget forwarded to the trainer.
///
/// The learning rate starts at `lr0` and is multiplied by `drop_factor` every
/// `drop_every` epochs when the model starts better than chance; otherwise it
/// is multiplied by `retrain_drop_factor` and the model retrained, up to
/// `max_retrains` times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingBudget {
    pub epochs: u32,
    pub max_retrains: u32,
    pub lr0: f64,
    pub drop_factor: f64,
    pub retrain_drop_factor: f64,
    pub drop_every: u32,
}

impl Default for TrainingBudget {
    fn default() -> Self {
        TrainingBudget {
            epochs: 30,
            max_retrains: 5,
            lr0: 0.001,
            drop_factor: 0.2,
            retrain_drop_factor: 0.4,
            drop_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRequest {
    pub id: u64,
    pub blocks: Vec<BlockCode>,
    pub net_string: String,
    pub dataset: Dataset,
    pub budget: TrainingBudget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalStatus {
    Ok,
    Failed,
}

/// Outcome of one evaluation; `accuracy` is present exactly when `status` is
/// [`EvalStatus::Ok`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResponse {
    pub id: u64,
    pub status: EvalStatus,
    pub accuracy: Option<f64>,
    pub detail: String,
}

impl EvalResponse {
    pub fn ok(id: u64, accuracy: f64) -> Self {
        EvalResponse { id, status: EvalStatus::Ok, accuracy: Some(accuracy), detail: String::new() }
    }

    pub fn failed(id: u64, detail: impl Into<String>) -> Self {
        EvalResponse { id, status: EvalStatus::Failed, accuracy: None, detail: detail.into() }
    }

    pub fn is_ok(&self) -> bool {
        self.status == EvalStatus::Ok
    }

    /// Reward fed to the agent: the accuracy, or 0 for a failed evaluation.
    pub fn reward(&self) -> f64 {
        self.accuracy.unwrap_or(0.0)
    }
}

/// Something that can score a network.
pub trait Evaluator {
    fn evaluate(&mut self, request: &EvalRequest) -> EvalResponse;

    /// Short tag recorded with results, e.g. `simulated-oracle`.
    fn label(&self) -> &'static str;
}

/// Scores networks with the simulated oracle. Not a model of real accuracy.
#[derive(Debug, Clone)]
pub struct SimulatedEvaluator {
    pub config: OracleConfig,
}

impl SimulatedEvaluator {
    pub fn new(config: OracleConfig) -> Self {
        SimulatedEvaluator { config }
    }
}

impl Evaluator for SimulatedEvaluator {
    fn evaluate(&mut self, request: &EvalRequest) -> EvalResponse {
        match oracle_evaluate(&self.config, &request.blocks) {
            Ok(acc) => EvalResponse::ok(request.id, acc),
            Err(e) => EvalResponse::failed(request.id, e.to_string()),
        }
    }

    fn label(&self) -> &'static str {
        "simulated-oracle"
    }
}

/// Sends each request to an external trainer, reconnecting after transport
/// failures.
pub struct ExternalEvaluator {
    endpoint: String,
    timeout: Duration,
    client: Option<TrainerClient>,
}

impl ExternalEvaluator {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        ExternalEvaluator { endpoint: endpoint.into(), timeout, client: None }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&mut self, request: &EvalRequest) -> EvalResponse {
        if self.client.is_none() {
            match TrainerClient::connect(&self.endpoint, self.timeout) {
                Ok(c) => self.client = Some(c),
                Err(e) => return EvalResponse::failed(request.id, e.to_string()),
            }
        }
        let client = self.client.as_mut().expect("connected above");
        let response = match client.submit(request, self.timeout) {
            Ok(()) => client
                .next_completion()
                .unwrap_or_else(|| EvalResponse::failed(request.id, "transport: no response")),
            Err(e) => EvalResponse::failed(request.id, e.to_string()),
        };
        if response.detail.starts_with("transport") || response.detail == "timeout" {
            // Unknown connection state; start fresh next time.
            self.client = None;
        }
        response
    }

    fn label(&self) -> &'static str {
        "external"
    }
}
