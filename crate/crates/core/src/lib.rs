//! Split-learning lab: a U-shaped 1D CNN trained across a client and a server,
//! with the server's linear layer evaluated on CKKS-encrypted activations.

pub mod attack;
pub mod ckks;
pub mod data;
pub mod nn;
pub mod par;
pub mod split;
pub mod telemetry;
pub mod wire;
