//! Server core for situated wizard-of-oz dialogue collection: scene model,
//! matchmaking and sessions, authoritative scene sync, append-only logs,
//! agent seats and the wire protocol, all without I/O.

pub mod agent;
pub mod batch;
pub mod client;
pub mod coordinator;
pub mod logging;
pub mod protocol;
pub mod scene;
pub mod session;
pub mod sim;
pub mod sync;
