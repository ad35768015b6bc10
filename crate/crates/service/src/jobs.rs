use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Train,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("job {id} is already {state:?}")]
pub struct TerminalJob {
    pub id: u64,
    pub state: JobState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub kind: JobKind,
    pub state: JobState,
    /// Fraction in [0, 1].
    pub progress: f64,
    pub message: String,
}

impl JobStatus {
    pub fn queued(id: u64, kind: JobKind) -> Self {
        Self {
            id,
            kind,
            state: JobState::Queued,
            progress: 0.0,
            message: String::new(),
        }
    }

    /// Moves the job to `state`. Done and failed jobs never change again.
    pub fn advance(
        &mut self,
        state: JobState,
        message: impl Into<String>,
    ) -> Result<(), TerminalJob> {
        if self.state.is_terminal() {
            return Err(TerminalJob {
                id: self.id,
                state: self.state,
            });
        }
        self.state = state;
        self.message = message.into();
        if state == JobState::Done {
            self.progress = 1.0;
        }
        Ok(())
    }
}
