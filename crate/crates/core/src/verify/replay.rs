use std::collections::{BTreeMap, HashMap};

use super::CommitRecord;
use crate::netsim::Sim;
use crate::store::{GlobalKey, Store, StoreError};
use crate::workload::TxnSpec;

/// Result of executing committed transactions one at a time.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Replay {
    /// Final value and version of every key the replay wrote.
    pub state: BTreeMap<GlobalKey, (u64, Vec<u8>)>,
    /// Reads whose recorded version differs from the version the serial
    /// replay had in place at that point.
    pub read_mismatches: Vec<(u64, GlobalKey)>,
}

/// Commit records sorted by `(commit_key, read-only last, txn_id)`. At equal
/// keys writers go first so a read-only txn serialized at a version's wts
/// follows that version's writer.
pub fn order_by_commit_key(records: &[CommitRecord]) -> Vec<u64> {
    let mut keyed: Vec<(u64, bool, u64)> = records
        .iter()
        .map(|r| (r.commit_key, r.is_read_only(), r.txn_id))
        .collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, _, id)| id).collect()
}

/// Replays the transactions of `order` serially from the initial database,
/// running each one's logic on the values the serial execution provides.
/// When `records` is given, each read's recorded version is checked.
pub fn replay_serial(
    order: &[u64],
    specs: &HashMap<u64, &TxnSpec>,
    records: Option<&HashMap<u64, &CommitRecord>>,
    initial: impl Fn(GlobalKey) -> Vec<u8>,
) -> Replay {
    let mut out = Replay::default();
    for &id in order {
        let spec = specs[&id];
        let commit_key = records.map_or(0, |r| r[&id].commit_key);
        let current = |k: GlobalKey| out.state.get(&k).cloned().unwrap_or_else(|| (0, initial(k)));
        let rs: Vec<(u64, Vec<u8>)> = spec.rs.iter().map(|&k| current(k)).collect();
        let ws: Vec<(u64, Vec<u8>)> = spec.ws.iter().map(|&k| current(k)).collect();
        if let Some(rec) = records.map(|r| r[&id]) {
            let seen: HashMap<GlobalKey, u64> = spec.keys().zip(rs.iter().chain(&ws).map(|v| v.0)).collect();
            for &(key, wts) in &rec.reads {
                if seen.get(&key) != Some(&wts) {
                    out.read_mismatches.push((id, key));
                }
            }
        }
        let rs_vals: Vec<&[u8]> = rs.iter().map(|v| v.1.as_slice()).collect();
        let ws_vals: Vec<&[u8]> = ws.iter().map(|v| v.1.as_slice()).collect();
        let new = spec.execute(&rs_vals, &ws_vals);
        for (&k, rec) in spec.ws.iter().zip(new) {
            out.state.insert(k, (commit_key, rec));
        }
    }
    out
}

/// Keys whose newest committed record in simulated memory differs from
/// `state` (or from the initial record, for keys the replay never wrote).
pub fn diff_against_store(
    sim: &Sim,
    store: &Store,
    state: &BTreeMap<GlobalKey, (u64, Vec<u8>)>,
    initial: impl Fn(GlobalKey) -> Vec<u8>,
) -> Result<Vec<GlobalKey>, StoreError> {
    let mut diff = Vec::new();
    for gk in store.keys() {
        let tuple = store.read_tuple(sim, gk)?;
        let got = &tuple.newest().record;
        let matches = match state.get(&gk) {
            Some((_, want)) => got[..want.len()] == want[..],
            None => {
                let want = initial(gk);
                got[..want.len()] == want[..]
            }
        };
        if !matches {
            diff.push(gk);
        }
    }
    Ok(diff)
}
