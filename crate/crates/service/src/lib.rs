//! HTTP/JSON front end for a single debugging session, plus the pieces of
//! the `protodebug` command line that are worth testing.

pub mod config;
pub mod jobs;
pub mod server;

pub use config::RunConfig;
pub use jobs::{JobKind, JobState, JobStatus};
pub use server::{router, AppState, ServerOptions};
