//! The round-based protocol as `p` communicating workers.
//!
//! Workers exchange [`wire`] frames over a [`transport`]. Every frame sent
//! is counted in a [`CommLedger`], which [`verify_ledger`] checks against
//! the closed-form message census.

mod launch;
mod ledger;
pub mod transport;
pub mod wire;
mod worker;

pub use launch::{run_loopback, run_tcp_threads, run_workers, ProtocolOutcome};
pub use ledger::{verify_ledger, CommLedger, Counter, CycleLayout, LedgerReport};
pub use transport::{loopback_mesh, resolve_hosts, LoopbackEndpoint, TcpEndpoint, Transport, TransportError};
pub use wire::{decode_message, encode_message, FrameError, FrameErrorKind, MsgType, WireMessage};
pub use worker::{run_worker, Timing, WorkerConfig, WorkerReport, DEFAULT_RECV_TIMEOUT};

use std::time::Duration;

use thiserror::Error;

use crate::numerics::NumericsError;
use crate::predictor::PredictorError;
use crate::schedule::ScheduleError;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("protocol aborted on rank {rank} at step {step}: {reason}")]
    Abort { rank: usize, step: usize, reason: String },
    #[error("rank {rank} waited {waited:?} for peer {peer} at step {step}; suspected deadlock")]
    DeadlockSuspect {
        rank: usize,
        step: usize,
        peer: usize,
        waited: Duration,
    },
    #[error("ledger violation{}: {detail}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    LedgerViolation { step: Option<usize>, detail: String },
    #[error("invalid protocol configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl ProtocolError {
    /// Whether this error only reports that a peer went away, which usually
    /// follows a failure elsewhere.
    pub fn is_peer_loss(&self) -> bool {
        matches!(self, ProtocolError::Abort { reason, .. } if reason.contains("disconnected"))
    }
}
