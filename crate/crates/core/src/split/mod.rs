//! The client and server protocol loops, plaintext and encrypted.
//!
//! Per training iteration the client runs its layers up to the split and
//! ships the activation. The server applies its linear layer and returns the
//! logits; the client finishes the forward pass, computes the loss and sends
//! back only `∂J/∂a^(L)`. The server answers with `∂J/∂a^(l)` and updates its
//! layer. In encrypted mode the server's weight gradient exists only under
//! encryption, and the client re-encrypts fresh weights for it via a masked
//! refresh.

mod audit;
mod client;
mod he;
mod local;
mod loopback;
mod packing;
mod server;

use thiserror::Error;

use crate::ckks::CkksError;
use crate::data::DataError;
use crate::nn::NnError;
use crate::wire::WireError;

pub use audit::{contents, AuditAssertion, Content, LeakageAudit};
pub use client::{client_run, ClientOptions, ClientOutcome, ClientSession, StepTensors};
pub use he::{gradient_plain_scale, ClientEncryption, ClientHe, ServerHe};
pub use local::{evaluate_local, local_step, local_train, LocalOutcome, LocalStep};
pub use loopback::run_loopback;
pub use packing::Packing;
pub use server::{server_run, ServerOptions, ServerOutcome, ServerSession, MAX_PROTOCOL_LEVEL};

#[derive(Debug, Error)]
pub enum SplitError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("HE error: {0}")]
    Ckks(#[from] CkksError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("precision error: {0}")]
    Precision(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("epoch {epoch}, iteration {iteration}: {source}")]
    At {
        epoch: usize,
        iteration: usize,
        #[source]
        source: Box<SplitError>,
    },
}

impl SplitError {
    /// Innermost error, skipping iteration context.
    pub fn root(&self) -> &SplitError {
        match self {
            SplitError::At { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 1 validation, 2 network, 3 protocol, 4 HE precision or depth.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            SplitError::Config(_) | SplitError::Data(_) | SplitError::Nn(_) => 1,
            SplitError::Wire(WireError::Io(_)) | SplitError::Wire(WireError::Truncated { .. }) => 2,
            SplitError::Wire(WireError::Sync { .. }) => 1,
            SplitError::Wire(_) | SplitError::Protocol(_) => 3,
            SplitError::Ckks(_) | SplitError::Precision(_) => 4,
            SplitError::At { .. } => unreachable!("root strips context"),
        }
    }

    pub(crate) fn at(self, epoch: usize, iteration: usize) -> SplitError {
        match self {
            e @ SplitError::At { .. } => e,
            e => SplitError::At { epoch, iteration, source: Box::new(e) },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(SplitError::Config("x".into()).exit_code(), 1);
        let io = std::io::Error::new(std::io::ErrorKind::ConnectionRefused, "no");
        assert_eq!(SplitError::Wire(WireError::Io(io)).exit_code(), 2);
        assert_eq!(SplitError::Protocol("x".into()).at(1, 2).exit_code(), 3);
        assert_eq!(SplitError::Precision("nan".into()).exit_code(), 4);
        assert_eq!(SplitError::Ckks(CkksError::DepthExhausted { level: 3 }).exit_code(), 4);
    }
}
