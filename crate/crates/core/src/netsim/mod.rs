//! Deterministic single-threaded simulation of an RDMA cluster: registered
//! memory, one-sided verbs posted in doorbell batches, two-sided RPCs and a
//! cooperative executor for transaction coroutines.

mod latency;
mod memory;
mod sim;
mod verbs;

pub use latency::LatencyModel;
pub use memory::{NodeMemory, Region};
pub use sim::{
    ClusterShape, CompletionTicket, Endpoint, EndpointStats, Handler, HandlerCtx, HandlerReply, HoldHandle, Notified,
    ReplyToken, RpcError, RpcTicket, Signal, Sim, SimReport, Ticket, TraceEvent, TraceKind, VerbInfo, EVENT_LOOP_CORO,
};
pub use verbs::{Completion, DoorbellBatch, QueuePair, VerbFault, VerbFaultKind, VerbKind, VerbOp, VerbRequest, VerbResult};

pub type SimTime = u64;
pub type NodeId = usize;
pub type ThreadId = usize;
pub type CoroId = usize;
pub type HandlerId = u16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("node {node} cannot register {requested} more bytes")]
    Capacity { node: NodeId, requested: u64 },
    #[error("no runnable task and no pending event; blocked: {}", blocked.join(", "))]
    Deadlock { blocked: Vec<String> },
    #[error("simulated time passed {limit}; still running: {}", blocked.join(", "))]
    TimeLimit { limit: SimTime, blocked: Vec<String> },
}

#[cfg(test)]
mod tests;
