//! A generated task together with everything needed to audit it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::filter::FilterTrace;
use crate::gateway::DecodingParams;
use crate::task::{ParseError, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Parsed,
    ParseFailed,
    Filtered,
    GatedInvalid,
    Retained,
}

/// Verdict of the discriminator gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub verdict: Verdict,
    /// Set when the discriminator reply matched no label.
    pub anomaly: bool,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub document: Document,
    pub task: Option<Task>,
    pub raw_completion: String,
    pub model_name: String,
    pub decoding: DecodingParams,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<ParseError>,
    #[serde(default)]
    pub filter_trace: Option<FilterTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateOutcome>,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("record {id}: cannot move from {from:?} to {to:?}")]
    InvalidTransition {
        id: String,
        from: RecordStatus,
        to: RecordStatus,
    },
    #[error("record {id}: status {status:?} disagrees with task presence")]
    Inconsistent { id: String, status: RecordStatus },
}

impl TaskRecord {
    /// Builds a record from a completion, parsing it into a task.
    pub fn from_completion(
        id: String,
        document: Document,
        raw_completion: String,
        model_name: String,
        decoding: DecodingParams,
        created_at: String,
    ) -> Self {
        let (task, status, parse_error) = match crate::task::parse_task(&raw_completion) {
            Ok(t) => (Some(t), RecordStatus::Parsed, None),
            Err(e) => (None, RecordStatus::ParseFailed, Some(e)),
        };
        TaskRecord {
            id,
            document,
            task,
            raw_completion,
            model_name,
            decoding,
            status,
            parse_error,
            filter_trace: None,
            gate: None,
            created_at,
        }
    }

    /// Status and task presence agree.
    pub fn validate(&self) -> Result<(), RecordError> {
        let has_task = self.task.is_some();
        if (self.status == RecordStatus::ParseFailed) == has_task {
            return Err(RecordError::Inconsistent {
                id: self.id.clone(),
                status: self.status,
            });
        }
        Ok(())
    }

    /// Moves a parsed record to a terminal status.
    pub fn advance(&mut self, to: RecordStatus) -> Result<(), RecordError> {
        let allowed = self.status == RecordStatus::Parsed
            && matches!(
                to,
                RecordStatus::Filtered | RecordStatus::GatedInvalid | RecordStatus::Retained
            );
        if !allowed {
            return Err(RecordError::InvalidTransition {
                id: self.id.clone(),
                from: self.status,
                to,
            });
        }
        self.status = to;
        Ok(())
    }

    /// The parsed task. Panics on parse-failed records, which callers filter
    /// out beforehand.
    pub fn task(&self) -> &Task {
        self.task.as_ref().expect("record has a parsed task")
    }
}
