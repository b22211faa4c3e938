//! Line-delimited JSON records exchanged with the trainer.
//!
//! Each request and each response is one JSON object on one line. Unknown
//! fields are ignored in both directions so either side can add fields.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Dataset, EvalRequest, EvalResponse, EvalStatus, TrainingBudget};
use crate::space::parse_net_codes;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("malformed request: {0}")]
    BadRequest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub net: String,
    pub dataset: Dataset,
    pub epochs: u32,
    pub max_retrains: u32,
    pub lr0: f64,
    pub drop_factor: f64,
    pub drop_every: u32,
    #[serde(default = "default_retrain_drop")]
    pub retrain_drop_factor: f64,
}

fn default_retrain_drop() -> f64 {
    TrainingBudget::default().retrain_drop_factor
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub id: u64,
    pub status: EvalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub detail: String,
}

pub fn encode_request(req: &EvalRequest) -> String {
    let b = req.budget;
    let record = RequestRecord {
        id: req.id,
        net: req.net_string.clone(),
        dataset: req.dataset,
        epochs: b.epochs,
        max_retrains: b.max_retrains,
        lr0: b.lr0,
        drop_factor: b.drop_factor,
        drop_every: b.drop_every,
        retrain_drop_factor: b.retrain_drop_factor,
    };
    serde_json::to_string(&record).expect("plain record serializes")
}

/// Parses a request line, including the net string (syntax only; the trainer
/// has no notion of a maximum depth).
pub fn decode_request(line: &str) -> Result<EvalRequest, WireError> {
    let r: RequestRecord = serde_json::from_str(line).map_err(|e| WireError::BadRequest(e.to_string()))?;
    let (blocks, _) = parse_net_codes(&r.net).map_err(|e| WireError::BadRequest(e.to_string()))?;
    Ok(EvalRequest {
        id: r.id,
        blocks,
        net_string: r.net,
        dataset: r.dataset,
        budget: TrainingBudget {
            epochs: r.epochs,
            max_retrains: r.max_retrains,
            lr0: r.lr0,
            drop_factor: r.drop_factor,
            retrain_drop_factor: r.retrain_drop_factor,
            drop_every: r.drop_every,
        },
    })
}

pub fn encode_response(resp: &EvalResponse) -> String {
    let record = ResponseRecord {
        id: resp.id,
        status: resp.status,
        accuracy: resp.accuracy,
        detail: resp.detail.clone(),
    };
    serde_json::to_string(&record).expect("plain record serializes")
}

#[derive(Deserialize)]
struct LooseResponse {
    id: Option<u64>,
    status: Option<String>,
    accuracy: Option<f64>,
    #[serde(default)]
    detail: Option<String>,
}

/// A response line as understood by the client.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    /// Well formed; accuracy checked to lie in `[0, 1]` for `ok`.
    Response(EvalResponse),
    /// Carries an id but is otherwise unusable; becomes a failure for that id.
    Invalid { id: u64, detail: String },
    /// No id could be recovered.
    Garbage(String),
}

pub fn decode_response(line: &str) -> Decoded {
    let loose: LooseResponse = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return Decoded::Garbage(format!("malformed response: {e}")),
    };
    let Some(id) = loose.id else {
        return Decoded::Garbage("malformed response: missing id".into());
    };
    let detail = loose.detail.unwrap_or_default();
    match loose.status.as_deref() {
        Some("ok") => match loose.accuracy {
            Some(a) if (0.0..=1.0).contains(&a) => {
                Decoded::Response(EvalResponse { id, status: EvalStatus::Ok, accuracy: Some(a), detail })
            }
            Some(a) => Decoded::Invalid { id, detail: format!("accuracy out of range: {a}") },
            None => Decoded::Invalid { id, detail: "malformed response: ok without accuracy".into() },
        },
        Some("failed") => Decoded::Response(EvalResponse::failed(id, detail)),
        Some(other) => Decoded::Invalid { id, detail: format!("malformed response: unknown status `{other}`") },
        None => Decoded::Invalid { id, detail: "malformed response: missing status".into() },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::BlockCode;

    fn request() -> EvalRequest {
        EvalRequest {
            id: 7,
            blocks: vec![BlockCode::block(0).unwrap(), BlockCode::Sm],
            net_string: "[B(0),SM(10)]".into(),
            dataset: Dataset::Cifar10,
            budget: TrainingBudget::default(),
        }
    }

    #[test]
    fn request_round_trips() {
        let line = encode_request(&request());
        assert!(!line.contains('\n'));
        assert_eq!(decode_request(&line).unwrap(), request());
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["net"], "[B(0),SM(10)]");
        assert_eq!(v["dataset"], "cifar10");
        assert_eq!(v["epochs"], 30);
        assert_eq!(v["max_retrains"], 5);
        assert_eq!(v["lr0"], 0.001);
        assert_eq!(v["drop_factor"], 0.2);
        assert_eq!(v["drop_every"], 5);
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let line = r#"{"id":7,"net":"[B(0),SM(10)]","dataset":"cifar10","epochs":30,"max_retrains":5,"lr0":0.001,"drop_factor":0.2,"drop_every":5,"gpu":3}"#;
        let req = decode_request(line).unwrap();
        assert_eq!(req.budget.retrain_drop_factor, 0.4);
        let resp = decode_response(r#"{"id":7,"status":"ok","accuracy":0.42,"wall_seconds":12.5}"#);
        assert_eq!(resp, Decoded::Response(EvalResponse::ok(7, 0.42)));
    }

    #[test]
    fn response_classification() {
        assert_eq!(
            decode_response(r#"{"id":1,"status":"failed","detail":"oom"}"#),
            Decoded::Response(EvalResponse::failed(1, "oom"))
        );
        assert!(matches!(
            decode_response(r#"{"id":1,"status":"ok","accuracy":1.5}"#),
            Decoded::Invalid { id: 1, ref detail } if detail.starts_with("accuracy out of range")
        ));
        assert!(matches!(decode_response(r#"{"id":1,"status":"ok"}"#), Decoded::Invalid { id: 1, .. }));
        assert!(matches!(decode_response(r#"{"id":1,"status":"meh"}"#), Decoded::Invalid { id: 1, .. }));
        assert!(matches!(decode_response("not json"), Decoded::Garbage(_)));
        assert!(matches!(decode_response(r#"{"status":"ok","accuracy":0.5}"#), Decoded::Garbage(_)));
    }

    #[test]
    fn response_encoding_round_trips() {
        for resp in [EvalResponse::ok(3, 0.9), EvalResponse::failed(4, "diverged")] {
            assert_eq!(decode_response(&encode_response(&resp)), Decoded::Response(resp));
        }
    }

    #[test]
    fn bad_requests_are_reported() {
        assert!(decode_request("{}").is_err());
        let line = r#"{"id":7,"net":"[B(0),XX]","dataset":"cifar10","epochs":30,"max_retrains":5,"lr0":0.001,"drop_factor":0.2,"drop_every":5}"#;
        assert!(decode_request(line).is_err());
    }
}
