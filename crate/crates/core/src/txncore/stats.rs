use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::context::{AbortReason, StageLedger};
use super::hybrid::Stage;
use crate::netsim::SimTime;
use crate::verify::CommitRecord;

/// Latency profile of one committed transaction, retries included.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnSample {
    pub id: u64,
    pub start: SimTime,
    pub end: SimTime,
    pub attempts: u32,
    pub ledger: StageLedger,
}

impl TxnSample {
    pub fn latency(&self) -> SimTime {
        self.end - self.start
    }
}

/// A WAITDIE wait decision: `waiter` queued behind `holder`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaitEvent {
    pub waiter: u64,
    pub holder: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub samples: Vec<TxnSample>,
    pub commits: Vec<CommitRecord>,
    /// Aborted attempts keyed by the stage they died in.
    pub aborts: BTreeMap<(Stage, AbortReason), u64>,
    /// Transactions dropped after exhausting their retry budget.
    pub gave_up: u64,
    pub waits: Vec<WaitEvent>,
    pub log_writes: u64,
    pub reclaim_notices: u64,
}

impl RunStats {
    pub fn abort_count(&self) -> u64 {
        self.aborts.values().sum()
    }

    pub fn aborts_for(&self, reason: AbortReason) -> u64 {
        self.aborts.iter().filter(|((_, r), _)| *r == reason).map(|(_, n)| n).sum()
    }

    pub fn aborts_in(&self, stage: Stage) -> u64 {
        self.aborts.iter().filter(|((s, _), _)| *s == stage).map(|(_, n)| n).sum()
    }
}
