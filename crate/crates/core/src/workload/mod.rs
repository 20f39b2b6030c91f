//! Deterministic transaction generators. Every generator is a pure function
//! of its configuration, the cluster shape and a seed.

mod logic;
mod smallbank;
mod tpcc;
mod ycsb;

pub use logic::{mix64, Logic, SmallBankKind};
pub use smallbank::SmallBankConfig;
pub use tpcc::TpccConfig;
pub use ycsb::YcsbConfig;

use serde::{Deserialize, Serialize};

use crate::netsim::{ClusterShape, Endpoint, SimTime};
use crate::store::{GlobalKey, TableSpec};

/// One transaction with its access sets declared up front.
///
/// `rs` and `ws` are disjoint and duplicate-free; a key named in both is
/// kept only in `ws`. [`Logic`] reads its inputs positionally: `rs` values
/// first, then the old values of `ws`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnSpec {
    pub id: u64,
    pub rs: Vec<GlobalKey>,
    pub ws: Vec<GlobalKey>,
    pub logic: Logic,
    pub exec_time: SimTime,
    pub arrival: Endpoint,
}

impl TxnSpec {
    pub fn new(id: u64, rs: Vec<GlobalKey>, ws: Vec<GlobalKey>, logic: Logic, exec_time: SimTime, arrival: Endpoint) -> Self {
        let mut seen = std::collections::HashSet::new();
        let ws: Vec<GlobalKey> = ws.into_iter().filter(|k| seen.insert(*k)).collect();
        let rs: Vec<GlobalKey> = rs.into_iter().filter(|k| seen.insert(*k)).collect();
        TxnSpec {
            id,
            rs,
            ws,
            logic,
            exec_time,
            arrival,
        }
    }

    pub fn is_read_only(&self) -> bool {
        self.ws.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = GlobalKey> + '_ {
        self.rs.iter().chain(self.ws.iter()).copied()
    }

    /// New records for `ws`, in order.
    pub fn execute(&self, rs_values: &[&[u8]], ws_old: &[&[u8]]) -> Vec<Vec<u8>> {
        assert_eq!(rs_values.len(), self.rs.len());
        assert_eq!(ws_old.len(), self.ws.len());
        let out = self.logic.apply(self.id, rs_values, ws_old);
        assert_eq!(out.len(), self.ws.len(), "logic must produce one record per write");
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WorkloadConfig {
    Ycsb(YcsbConfig),
    Smallbank(SmallBankConfig),
    Tpcc(TpccConfig),
}

impl WorkloadConfig {
    pub fn name(&self) -> &'static str {
        match self {
            WorkloadConfig::Ycsb(_) => "ycsb",
            WorkloadConfig::Smallbank(_) => "smallbank",
            WorkloadConfig::Tpcc(_) => "tpcc",
        }
    }

    pub fn tables(&self, shape: &ClusterShape) -> Vec<TableSpec> {
        match self {
            WorkloadConfig::Ycsb(c) => c.tables(shape),
            WorkloadConfig::Smallbank(c) => c.tables(shape),
            WorkloadConfig::Tpcc(c) => c.tables(shape),
        }
    }

    pub fn initial_record(&self, gk: GlobalKey, record_len: usize) -> Vec<u8> {
        match self {
            WorkloadConfig::Ycsb(_) => ycsb::initial_record(gk, record_len),
            WorkloadConfig::Smallbank(_) => smallbank::initial_record(gk),
            WorkloadConfig::Tpcc(_) => tpcc::initial_record(gk, record_len),
        }
    }

    pub fn generate(&self, shape: &ClusterShape, seed: u64, n: usize) -> Vec<TxnSpec> {
        match self {
            WorkloadConfig::Ycsb(c) => c.generate(shape, seed, n),
            WorkloadConfig::Smallbank(c) => c.generate(shape, seed, n),
            WorkloadConfig::Tpcc(c) => c.generate(shape, seed, n),
        }
    }

    /// Upper bound on `|ws|` of any generated transaction.
    pub fn max_writes(&self) -> usize {
        match self {
            WorkloadConfig::Ycsb(c) => c.ops_per_txn,
            WorkloadConfig::Smallbank(_) => 3,
            WorkloadConfig::Tpcc(c) => 1 + c.max_lines,
        }
    }

    pub fn set_exec_time(&mut self, t: SimTime) {
        match self {
            WorkloadConfig::Ycsb(c) => c.exec_time = t,
            WorkloadConfig::Smallbank(c) => c.exec_time = t,
            WorkloadConfig::Tpcc(c) => c.exec_time = t,
        }
    }
}

/// Coordinator that receives transaction `i`: round-robin over every
/// coroutine of the cluster.
pub(crate) fn arrival_of(shape: &ClusterShape, i: usize) -> Endpoint {
    let slot = i % shape.coordinator_count();
    let rest = slot / shape.nodes;
    Endpoint::new(slot % shape.nodes, rest % shape.threads_per_node, rest / shape.threads_per_node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn arrivals_cover_every_coordinator_once_per_round() {
        let shape = ClusterShape::new(3, 2, 4);
        let got: HashSet<Endpoint> = (0..shape.coordinator_count()).map(|i| arrival_of(&shape, i)).collect();
        let want: HashSet<Endpoint> = shape.coordinators().collect();
        assert_eq!(got, want);
    }

    #[test]
    fn overlapping_sets_keep_the_write() {
        let k = |x| GlobalKey::new(0, x);
        let spec = TxnSpec::new(1, vec![k(1), k(2), k(1)], vec![k(2), k(3), k(3)], Logic::Ycsb { record_len: 8 }, 0, Endpoint::new(0, 0, 0));
        assert_eq!(spec.rs, vec![k(1)]);
        assert_eq!(spec.ws, vec![k(2), k(3)]);
    }
}
