//! Offline serializability oracle. Consumes only commit records and the
//! final store image, so it is independent of the protocol that ran.

mod dsg;
mod history;
mod replay;

pub use dsg::{check_conflict_serializable, CycleWitness, DependencyKind, HistoryError};
pub use history::{format_history, parse_history};
pub use replay::{diff_against_store, order_by_commit_key, replay_serial, Replay};

use serde::{Deserialize, Serialize};

use crate::store::GlobalKey;

/// What a committed transaction observed and produced. Versions are named by
/// their write timestamp; wts 0 is the initial load.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub txn_id: u64,
    /// Serialization key chosen by the protocol. Every version the
    /// transaction writes carries this value as its wts.
    pub commit_key: u64,
    pub reads: Vec<(GlobalKey, u64)>,
    pub writes: Vec<GlobalKey>,
}

impl CommitRecord {
    pub fn is_read_only(&self) -> bool {
        self.writes.is_empty()
    }
}
