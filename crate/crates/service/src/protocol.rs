//! JSON wire protocol between the service and its clients.
//!
//! Every message is one WebSocket text frame holding a JSON object with a
//! `type` field.

use crowdgaze_core::calibration::{ClickOutcome, ClickRejection, FitError, FitOutcome};
use crowdgaze_core::session::GroupGazeState;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Server to client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State(GroupGazeState),
    FitReport(FitReport),
    ClickAck(ClickAck),
    /// Confirmation of a control command that has no richer reply.
    Info {
        message: String,
    },
    Error {
        message: String,
    },
}

/// Result of fitting one person. `needed` is the number of additional
/// samples the degree requires; it is 0 after a successful fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub person_id: u64,
    pub degree: u32,
    pub rmse_u: Option<f64>,
    pub rmse_v: Option<f64>,
    pub samples: usize,
    pub needed: usize,
}

impl FitReport {
    pub fn new(person_id: u64, degree: u32, samples: usize, result: &Result<FitOutcome, FitError>) -> Self {
        match result {
            Ok(fit) => Self {
                person_id,
                degree,
                rmse_u: Some(fit.map.rmse_u),
                rmse_v: Some(fit.map.rmse_v),
                samples,
                needed: 0,
            },
            Err(e) => Self {
                person_id,
                degree,
                rmse_u: None,
                rmse_v: None,
                samples,
                needed: e.missing(),
            },
        }
    }
}

/// Per-person tally for one calibration click.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickAck {
    pub u: f64,
    pub v: f64,
    pub stored: usize,
    pub skipped: usize,
    pub stored_ids: Vec<u64>,
    pub skipped_ids: Vec<u64>,
    pub reason: Option<ClickRejection>,
}

impl ClickAck {
    pub fn new(u: f64, v: f64, outcome: ClickOutcome) -> Self {
        Self {
            u,
            v,
            stored: outcome.stored.len(),
            skipped: outcome.skipped.len(),
            stored_ids: outcome.stored,
            skipped_ids: outcome.skipped,
            reason: outcome.rejected,
        }
    }
}

/// Client to server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    /// Calibration click at normalized projection coordinates. `ts` is the
    /// client clock in ms and is only echoed to the log; freshness is judged
    /// on the server clock at arrival.
    Click {
        u: f64,
        v: f64,
        #[serde(default)]
        ts: Option<u64>,
    },
    /// Operator cursor position. Synthetic audiences look at it; other
    /// sources ignore it.
    Cursor {
        u: f64,
        v: f64,
    },
    Fit {
        #[serde(default)]
        degree: Option<u32>,
    },
    Config(ConfigUpdate),
    SaveCalibration,
    StartRecording,
    StopRecording,
}

/// Partial session reconfiguration; absent fields keep their value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigUpdate {
    #[serde(default)]
    pub upscale: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub thresholds: Option<Thresholds>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub min_start_conf: f32,
    pub min_vec_conf: f32,
}

const CLIENT_TYPES: [&str; 7] = [
    "click",
    "cursor",
    "fit",
    "config",
    "save_calibration",
    "start_recording",
    "stop_recording",
];

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("message is not a JSON object with a string `type`")]
    Untyped,
    #[error("malformed `{kind}` message: {source}")]
    Malformed {
        kind: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn encode<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("wire messages always serialize")
}

/// Decodes a client message. Unknown types yield `Ok(None)` and a warning.
pub fn decode_client(text: &str) -> Result<Option<ClientMessage>, ProtocolError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let kind = value.get("type").and_then(|t| t.as_str()).ok_or(ProtocolError::Untyped)?;
    if !CLIENT_TYPES.contains(&kind) {
        log::warn!("ignoring client message of unknown type `{kind}`");
        return Ok(None);
    }
    let kind = kind.to_owned();
    serde_json::from_value(value)
        .map(Some)
        .map_err(|source| ProtocolError::Malformed { kind, source })
}

/// Decodes a server message. Unknown types yield `Ok(None)` and a warning.
pub fn decode_server(text: &str) -> Result<Option<ServerMessage>, ProtocolError> {
    const SERVER_TYPES: [&str; 5] = ["state", "fit_report", "click_ack", "info", "error"];
    let value: serde_json::Value = serde_json::from_str(text)?;
    let kind = value.get("type").and_then(|t| t.as_str()).ok_or(ProtocolError::Untyped)?;
    if !SERVER_TYPES.contains(&kind) {
        log::warn!("ignoring server message of unknown type `{kind}`");
        return Ok(None);
    }
    let kind = kind.to_owned();
    serde_json::from_value(value)
        .map(Some)
        .map_err(|source| ProtocolError::Malformed { kind, source })
}
