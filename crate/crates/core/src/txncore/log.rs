use super::wire::{Dec, Enc};
use crate::netsim::{ClusterShape, Endpoint, NodeId, Region, Sim, SimError};
use crate::store::GlobalKey;

/// Log slots kept per coordinator on each backup; commits cycle through
/// them.
pub const LOG_RING: u64 = 4;

/// Redo record a coordinator replicates before writing back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogRecord {
    pub ctts: u64,
    pub writes: Vec<(GlobalKey, Vec<u8>)>,
}

impl LogRecord {
    /// `ctts u64 | count u32 | (key u64 | len u32 | bytes)*`
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::new().u64(self.ctts).u32(self.writes.len() as u32);
        for (k, rec) in &self.writes {
            e = e.u64(k.pack()).bytes(rec);
        }
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> LogRecord {
        let mut d = Dec::new(bytes);
        let ctts = d.u64();
        let n = d.u32();
        let writes = (0..n).map(|_| (GlobalKey::unpack(d.u64()), d.bytes().to_vec())).collect();
        LogRecord { ctts, writes }
    }

    pub fn encoded_len(max_writes: usize, record_len: usize) -> u64 {
        (12 + max_writes * (12 + record_len)) as u64
    }
}

/// Log regions of the cluster. Node `n` is backed up by the next
/// `replicas - 1` nodes in ring order.
#[derive(Clone, Debug)]
pub struct LogSpace {
    shape: ClusterShape,
    replicas: usize,
    slot_bytes: u64,
    regions: Vec<Option<Region>>,
}

impl LogSpace {
    pub fn create(sim: &Sim, replicas: usize, slot_bytes: u64) -> Result<LogSpace, SimError> {
        let shape = sim.shape();
        if replicas == 0 || replicas > shape.nodes {
            return Err(SimError::Config(format!(
                "replication factor {replicas} needs between 1 and {} nodes",
                shape.nodes
            )));
        }
        let slot_bytes = slot_bytes.next_multiple_of(8).max(8);
        let regions = (0..shape.nodes)
            .map(|n| {
                if replicas > 1 {
                    sim.register_region(n, shape.coordinator_count() as u64 * LOG_RING * slot_bytes).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(LogSpace {
            shape,
            replicas,
            slot_bytes,
            regions,
        })
    }

    pub fn slot_bytes(&self) -> u64 {
        self.slot_bytes
    }

    pub fn backups(&self, node: NodeId) -> Vec<NodeId> {
        (1..self.replicas).map(|i| (node + i) % self.shape.nodes).collect()
    }

    /// Offset on `backup` of log slot `seq % LOG_RING` owned by `ep`.
    pub fn slot(&self, backup: NodeId, ep: Endpoint, seq: u64) -> u64 {
        let region = self.regions[backup].expect("log region exists when replicas > 1");
        let coord = (ep.node * self.shape.threads_per_node + ep.thread) * self.shape.coroutines_per_thread + ep.coro;
        region.base + (coord as u64 * LOG_RING + seq % LOG_RING) * self.slot_bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::LatencyModel;

    #[test]
    fn log_record_round_trips() {
        let r = LogRecord {
            ctts: 99,
            writes: vec![(GlobalKey::new(1, 2), vec![1, 2, 3]), (GlobalKey::new(0, 7), vec![])],
        };
        let b = r.encode();
        assert_eq!(LogRecord::decode(&b), r);
        assert!(b.len() as u64 <= LogRecord::encoded_len(2, 3));
    }

    #[test]
    fn backups_follow_the_ring_and_slots_are_disjoint() {
        let sim = Sim::new(ClusterShape::new(4, 2, 2), LatencyModel::default(), 0).unwrap();
        let logs = LogSpace::create(&sim, 3, 100).unwrap();
        assert_eq!(logs.backups(3), vec![0, 1]);
        let mut seen = std::collections::HashSet::new();
        for ep in sim.shape().coordinators() {
            for seq in 0..LOG_RING {
                assert!(seen.insert(logs.slot(1, ep, seq)));
            }
        }
        assert!(LogSpace::create(&sim, 5, 8).is_err());
        assert!(LogSpace::create(&sim, 1, 8).unwrap().backups(0).is_empty());
    }
}
