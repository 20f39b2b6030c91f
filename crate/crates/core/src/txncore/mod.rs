//! Transaction skeleton shared by every protocol: timestamps, read and write
//! sets, stage taxonomy and hybrid codes, coordinator logging, latency
//! accounting and the retry loop.

mod context;
mod coordinator;
mod hybrid;
mod log;
mod stats;
mod timestamp;
pub mod wire;

pub use context::{AbortReason, RsEntry, StageLedger, TxnContext, TxnStatus, WsEntry};
pub use coordinator::{drive, AttemptFn, Coordinator, Env, ProtocolParams, TupleFn, TupleRef, LOG_HANDLER, RECLAIM_HANDLER};
pub use hybrid::{enumerate_hybrids, HybridCode, HybridError, Primitive, ProtocolKind, Stage};
pub use log::{LogRecord, LogSpace, LOG_RING};
pub use stats::{RunStats, TxnSample, WaitEvent};
pub use timestamp::{Clock, Timestamp, TimestampError, ID_BITS, ID_MASK};
