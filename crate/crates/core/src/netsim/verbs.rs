use serde::{Deserialize, Serialize};

use super::{Endpoint, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerbKind {
    Read,
    Write,
    Cas,
    Faa,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VerbOp {
    Read { len: u64 },
    Write { data: Vec<u8> },
    Cas { expected: u64, desired: u64 },
    Faa { delta: u64 },
}

/// One one-sided operation against the destination node's registered memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerbRequest {
    pub offset: u64,
    pub op: VerbOp,
    pub signaled: bool,
}

impl VerbRequest {
    pub fn read(offset: u64, len: u64) -> Self {
        VerbRequest {
            offset,
            op: VerbOp::Read { len },
            signaled: false,
        }
    }

    pub fn write(offset: u64, data: Vec<u8>) -> Self {
        VerbRequest {
            offset,
            op: VerbOp::Write { data },
            signaled: false,
        }
    }

    pub fn write_u64(offset: u64, value: u64) -> Self {
        Self::write(offset, value.to_le_bytes().to_vec())
    }

    pub fn cas(offset: u64, expected: u64, desired: u64) -> Self {
        VerbRequest {
            offset,
            op: VerbOp::Cas { expected, desired },
            signaled: false,
        }
    }

    pub fn faa(offset: u64, delta: u64) -> Self {
        VerbRequest {
            offset,
            op: VerbOp::Faa { delta },
            signaled: false,
        }
    }

    pub fn signaled(mut self) -> Self {
        self.signaled = true;
        self
    }

    pub fn kind(&self) -> VerbKind {
        match self.op {
            VerbOp::Read { .. } => VerbKind::Read,
            VerbOp::Write { .. } => VerbKind::Write,
            VerbOp::Cas { .. } => VerbKind::Cas,
            VerbOp::Faa { .. } => VerbKind::Faa,
        }
    }

    pub fn len(&self) -> u64 {
        match &self.op {
            VerbOp::Read { len } => *len,
            VerbOp::Write { data } => data.len() as u64,
            VerbOp::Cas { .. } | VerbOp::Faa { .. } => 8,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Send-queue identity: the posting node, the target node and the lane
/// (the posting thread owns one QP per destination).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueuePair {
    pub src: NodeId,
    pub dst: NodeId,
    pub lane: usize,
}

impl QueuePair {
    pub fn between(src: Endpoint, dst: NodeId) -> Self {
        QueuePair {
            src: src.node,
            dst,
            lane: src.thread,
        }
    }
}

/// Verbs posted with a single doorbell. They reach remote memory in issue
/// order and cost one network round trip in total.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DoorbellBatch {
    pub qp: QueuePair,
    pub requests: Vec<VerbRequest>,
}

impl DoorbellBatch {
    pub fn new(qp: QueuePair) -> Self {
        DoorbellBatch {
            qp,
            requests: Vec::new(),
        }
    }

    pub fn with(mut self, req: VerbRequest) -> Self {
        self.requests.push(req);
        self
    }

    pub fn push(&mut self, req: VerbRequest) {
        self.requests.push(req);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VerbResult {
    Read(Vec<u8>),
    Write,
    Cas { old: u64 },
    Faa { old: u64 },
}

/// Results of every request of a batch, in issue order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Completion {
    pub results: Vec<VerbResult>,
}

impl Completion {
    pub fn read(&self, index: usize) -> &[u8] {
        match &self.results[index] {
            VerbResult::Read(bytes) => bytes,
            other => panic!("request {index} is not a READ: {other:?}"),
        }
    }

    pub fn take_read(&mut self, index: usize) -> Vec<u8> {
        match std::mem::replace(&mut self.results[index], VerbResult::Write) {
            VerbResult::Read(bytes) => bytes,
            other => panic!("request {index} is not a READ: {other:?}"),
        }
    }

    pub fn cas_old(&self, index: usize) -> u64 {
        match self.results[index] {
            VerbResult::Cas { old } => old,
            ref other => panic!("request {index} is not a CAS: {other:?}"),
        }
    }

    pub fn faa_old(&self, index: usize) -> u64 {
        match self.results[index] {
            VerbResult::Faa { old } => old,
            ref other => panic!("request {index} is not a FAA: {other:?}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerbFaultKind {
    OutOfBounds,
    Misaligned,
}

/// Error completion: the request at `index` was rejected by the simulated
/// RNIC; later requests of the batch were not executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("verb {index} faulted: {kind:?}")]
pub struct VerbFault {
    pub index: usize,
    pub kind: VerbFaultKind,
}
