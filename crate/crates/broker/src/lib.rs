//! Long-running planning broker.
//!
//! Owns the live [`SystemIndex`](dataplan_core::SystemIndex), plans submitted
//! requests against it, and serves versioned plans and fronts over HTTP.
//! State is persisted as an append-only JSON-lines log and replayed on start.

pub mod http;
pub mod state;
pub mod store;

pub use http::{router, serve, shutdown_signal};
pub use state::{ApiError, Broker, PlanRecord};
pub use store::{LogRecord, LogStore, LOG_FILE};
