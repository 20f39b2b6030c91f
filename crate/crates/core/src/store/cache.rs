use std::collections::HashMap;

use super::{GlobalKey, Store, StoreError};
use crate::netsim::{DoorbellBatch, Endpoint, NodeId, QueuePair, Sim, VerbRequest};

/// Per-coordinator cache of remote tuple offsets.
///
/// A preloaded cache behaves as if every offset had been fetched before the
/// run started.
#[derive(Clone, Debug, Default)]
pub struct OffsetCache {
    preloaded: bool,
    entries: HashMap<u64, u64>,
    misses: u64,
}

impl OffsetCache {
    pub fn cold() -> Self {
        Self::default()
    }

    pub fn preloaded() -> Self {
        OffsetCache {
            preloaded: true,
            ..Self::default()
        }
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn insert(&mut self, gk: GlobalKey, offset: u64) {
        self.entries.insert(gk.pack(), offset);
    }

    /// Explicitly cached offset; ignores preloading.
    pub fn get(&self, gk: GlobalKey) -> Option<u64> {
        self.entries.get(&gk.pack()).copied()
    }

    pub fn record_miss(&mut self, gk: GlobalKey, offset: u64) {
        self.misses += 1;
        self.insert(gk, offset);
    }

    fn lookup(&self, store: &Store, gk: GlobalKey) -> Result<Option<u64>, StoreError> {
        if self.preloaded {
            return store.tuple_addr(gk).map(|(_, off)| Some(off));
        }
        Ok(self.entries.get(&gk.pack()).copied())
    }
}

/// Finds the owner and tuple offset of `gk` as seen from coordinator `ep`.
/// A cold remote lookup READs the owner's directory cell (one round trip);
/// local keys and cached offsets cost nothing.
pub async fn resolve_offset(
    sim: &Sim,
    ep: Endpoint,
    store: &Store,
    cache: &mut OffsetCache,
    gk: GlobalKey,
) -> Result<(NodeId, u64), StoreError> {
    let owner = store.owner(gk)?;
    if owner == ep.node {
        return store.tuple_addr(gk);
    }
    if let Some(off) = cache.lookup(store, gk)? {
        return Ok((owner, off));
    }
    let (_, cell) = store.directory_addr(gk)?;
    let batch = DoorbellBatch::new(QueuePair::between(ep, owner)).with(VerbRequest::read(cell, 8));
    let completion = sim.post_batch(ep, batch).await?;
    let off = u64::from_le_bytes(completion.read(0).try_into().unwrap());
    cache.record_miss(gk, off);
    Ok((owner, off))
}
