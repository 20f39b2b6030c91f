use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::hybrid::{HybridCode, Stage};
use super::timestamp::Timestamp;
use crate::netsim::{NodeId, SimTime};
use crate::store::{GlobalKey, Store, StoreError};
use crate::verify::CommitRecord;
use crate::workload::TxnSpec;

/// Why an attempt aborted. Protocol outcomes, not faults, except `Fault`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AbortReason {
    /// Lock CAS found another holder.
    LockHeld,
    /// WAITDIE: the holder is older.
    Die,
    /// A tuple's wts moved between fetch and lock.
    WtsChanged,
    /// OCC read-set validation failed.
    Validation,
    /// MVCC R1: no version older than ctts survives in the slots.
    SlotOverflow,
    /// MVCC R2: an older transaction holds the write lock.
    ReadLocked,
    /// MVCC W1: ctts not above the tuple's wts or rts.
    WriteTooLate,
    /// The two reads of a double read disagree.
    DoubleRead,
    /// SUNDIAL lease renewal failed.
    RenewFailed,
    /// A verb faulted.
    Fault,
}

impl AbortReason {
    pub const ALL: [AbortReason; 10] = [
        AbortReason::LockHeld,
        AbortReason::Die,
        AbortReason::WtsChanged,
        AbortReason::Validation,
        AbortReason::SlotOverflow,
        AbortReason::ReadLocked,
        AbortReason::WriteTooLate,
        AbortReason::DoubleRead,
        AbortReason::RenewFailed,
        AbortReason::Fault,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RsEntry {
    pub key: GlobalKey,
    pub node: NodeId,
    /// Remote tuple offset once known, captured from RPC replies too.
    pub offset: Option<u64>,
    pub wts: u64,
    pub rts: u64,
    pub record: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WsEntry {
    pub key: GlobalKey,
    pub node: NodeId,
    pub offset: Option<u64>,
    pub locked: bool,
    /// Metadata and record as fetched, before this txn's write.
    pub wts: u64,
    pub rts: u64,
    pub old: Vec<u8>,
    pub new: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxnStatus {
    Active,
    Aborted(AbortReason),
    Committed,
}

/// Sim time spent in each stage. Stages tile the transaction's lifetime:
/// entering a stage closes the previous one, so the buckets always sum to
/// the elapsed time.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLedger {
    buckets: [SimTime; Stage::COUNT],
    open: Option<(Stage, SimTime)>,
    start: Option<SimTime>,
}

impl StageLedger {
    pub fn enter(&mut self, stage: Stage, now: SimTime) {
        self.close(now);
        self.start.get_or_insert(now);
        self.open = Some((stage, now));
    }

    pub fn close(&mut self, now: SimTime) {
        if let Some((s, since)) = self.open.take() {
            self.buckets[s.index()] += now - since;
        }
    }

    pub fn current(&self) -> Option<Stage> {
        self.open.map(|(s, _)| s)
    }

    pub fn get(&self, stage: Stage) -> SimTime {
        self.buckets[stage.index()]
    }

    pub fn total(&self) -> SimTime {
        self.buckets.iter().sum()
    }

    pub fn start(&self) -> Option<SimTime> {
        self.start
    }

    pub fn iter(&self) -> impl Iterator<Item = (Stage, SimTime)> + '_ {
        Stage::ALL.iter().map(|&s| (s, self.buckets[s.index()]))
    }
}

/// State of one transaction, reused across its attempts.
#[derive(Clone, Debug)]
pub struct TxnContext {
    pub spec: Rc<TxnSpec>,
    pub ctts: Timestamp,
    /// SUNDIAL's commit timestamp; unused elsewhere.
    pub commit_tts: u64,
    pub rs: Vec<RsEntry>,
    pub ws: Vec<WsEntry>,
    pub hybrid: HybridCode,
    pub status: TxnStatus,
    pub attempts: u32,
    pub ledger: StageLedger,
    /// Stage an abort is charged to when the attempt ends in Release.
    pub failed_in: Option<Stage>,
}

impl TxnContext {
    pub fn new(spec: Rc<TxnSpec>, hybrid: HybridCode, store: &Store) -> Result<TxnContext, StoreError> {
        let rs = spec
            .rs
            .iter()
            .map(|&key| {
                Ok(RsEntry {
                    key,
                    node: store.owner(key)?,
                    offset: None,
                    wts: 0,
                    rts: 0,
                    record: Vec::new(),
                })
            })
            .collect::<Result<_, StoreError>>()?;
        let ws = spec
            .ws
            .iter()
            .map(|&key| {
                Ok(WsEntry {
                    key,
                    node: store.owner(key)?,
                    offset: None,
                    locked: false,
                    wts: 0,
                    rts: 0,
                    old: Vec::new(),
                    new: Vec::new(),
                })
            })
            .collect::<Result<_, StoreError>>()?;
        Ok(TxnContext {
            spec,
            ctts: Timestamp::NONE,
            commit_tts: 0,
            rs,
            ws,
            hybrid,
            status: TxnStatus::Active,
            attempts: 0,
            ledger: StageLedger::default(),
            failed_in: None,
        })
    }

    /// Starts a new attempt under `ctts`. Fetched state is cleared; captured
    /// offsets are kept.
    pub fn begin_attempt(&mut self, ctts: Timestamp) {
        self.ctts = ctts;
        self.commit_tts = 0;
        self.status = TxnStatus::Active;
        self.attempts += 1;
        self.failed_in = None;
        for e in &mut self.rs {
            e.wts = 0;
            e.rts = 0;
            e.record.clear();
        }
        for e in &mut self.ws {
            assert!(!e.locked, "lock leaked across attempts");
            e.wts = 0;
            e.rts = 0;
            e.old.clear();
            e.new.clear();
        }
    }

    /// Runs the transaction logic over the fetched values, filling
    /// `ws[i].new`.
    pub fn execute(&mut self) {
        let rs: Vec<&[u8]> = self.rs.iter().map(|e| e.record.as_slice()).collect();
        let ws: Vec<&[u8]> = self.ws.iter().map(|e| e.old.as_slice()).collect();
        let new = self.spec.execute(&rs, &ws);
        for (e, rec) in self.ws.iter_mut().zip(new) {
            e.new = rec;
        }
    }

    /// Charges the pending abort to the current stage and starts Release.
    pub fn begin_release(&mut self, now: SimTime) {
        self.failed_in = self.ledger.current();
        self.ledger.enter(Stage::Release, now);
    }

    pub fn is_read_only(&self) -> bool {
        self.ws.is_empty()
    }

    /// Versions observed by the read set and the write set's fetches.
    pub fn commit_record(&self, commit_key: u64) -> CommitRecord {
        CommitRecord {
            txn_id: self.spec.id,
            commit_key,
            reads: self
                .rs
                .iter()
                .map(|e| (e.key, e.wts))
                .chain(self.ws.iter().map(|e| (e.key, e.wts)))
                .collect(),
            writes: self.ws.iter().map(|e| e.key).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ledger_buckets_sum_to_elapsed(steps in prop::collection::vec((0usize..Stage::COUNT, 0u64..50), 1..40)) {
            let mut l = StageLedger::default();
            let mut now = 7;
            for &(s, dt) in &steps {
                l.enter(Stage::ALL[s], now);
                now += dt;
            }
            l.close(now);
            prop_assert_eq!(l.total(), now - 7);
            prop_assert_eq!(l.start(), Some(7));
        }
    }
}
