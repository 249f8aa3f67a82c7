// SPDX-License-Identifier: Apache-2.0
//! Exit-code classification of pipeline errors.

use serde_json::json;
use thiserror::Error;
use warpforge::datagen::DatagenError;
use warpforge::floorplan::FloorplanError;
use warpforge::laminate::OracleError;
use warpforge::metrics::MetricsError;
use warpforge::model::ModelError;
use warpforge::training::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or malformed inputs. Exit 2.
    #[error("{0}")]
    Input(String),
    /// Oracle, training or evaluation failure. Exit 3.
    #[error("{0}")]
    Runtime(String),
    /// Checkpoint does not match the expected layout. Exit 4.
    #[error("{0}")]
    Checkpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 2,
            Self::Runtime(_) => 3,
            Self::Checkpoint(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Input(_) => "invalid_input",
            Self::Runtime(_) => "runtime",
            Self::Checkpoint(_) => "checkpoint",
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json(&self) -> String {
        json!({ "error": { "kind": self.kind(), "code": self.exit_code(), "message": self.to_string() } }).to_string()
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Checkpoint(_) => Self::Checkpoint(e.to_string()),
            ModelError::InvalidFloorplan(_) | ModelError::Rtcg(_) => Self::Input(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::InvalidSpec(_) | DatagenError::Corrupt(_) | DatagenError::Json(_) | DatagenError::Io(_) => {
                Self::Input(e.to_string())
            }
            DatagenError::Model(m) => m.into(),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::EmptyTrainSplit => Self::Input(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Model(m) => m.into(),
            MetricsError::EmptySplit | MetricsError::Shape { .. } => Self::Input(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::InvalidFloorplan(_) | OracleError::MeshTooCoarse { .. } | OracleError::BadMap(_) => {
                Self::Input(e.to_string())
            }
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<FloorplanError> for CliError {
    fn from(e: FloorplanError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}
