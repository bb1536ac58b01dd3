//! Line-delimited JSON spoken between the server and a trainer process.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogLevel {
    Info,
    Warn,
    Error,
}

/// Trainer to server, one object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TrainerEvent {
    Progress { step: u64, loss: f64 },
    Checkpoint { step: u64, path: String },
    Log { level: LogLevel, message: String },
    Completed { final_step: u64 },
    #[serde(rename = "error")]
    Errored { message: String },
}

impl TrainerEvent {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Self::Completed { .. } | Self::Errored { .. })
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trainer event serializes")
    }

    pub fn warn(message: impl Into<String>) -> Self {
        Self::Log {
            level: LogLevel::Warn,
            message: message.into(),
        }
    }
}

pub const EXITED_WITHOUT_TERMINAL: &str = "trainer exited without terminal event";

/// Parses one trainer output line. Anything unparseable becomes a warning
/// so a chatty or buggy trainer cannot wedge the job.
pub fn parse_trainer_line(line: &str) -> TrainerEvent {
    match serde_json::from_str::<TrainerEvent>(line) {
        Ok(ev) => ev,
        Err(e) => {
            let mut shown: String = line.chars().take(200).collect();
            if shown.len() < line.len() {
                shown.push_str("...");
            }
            TrainerEvent::warn(format!("malformed trainer line ({e}): {shown}"))
        }
    }
}

/// Server to trainer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase")]
pub enum TrainerCommand {
    Start {
        config_path: String,
        output_dir: String,
        seed: u64,
    },
    Stop,
}

impl TrainerCommand {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trainer command serializes")
    }
}
