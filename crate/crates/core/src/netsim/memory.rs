use serde::{Deserialize, Serialize};

use super::verbs::{VerbFault, VerbFaultKind, VerbOp, VerbRequest, VerbResult};
use super::NodeId;

/// A registered memory region on one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub owner: NodeId,
    pub base: u64,
    pub len: u64,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base + self.len
    }

    pub fn contains(&self, offset: u64, len: u64) -> bool {
        offset >= self.base && offset.checked_add(len).is_some_and(|end| end <= self.end())
    }
}

/// Byte-addressed registered memory of one simulated machine.
///
/// Regions are carved out by a bump allocator starting at offset 0; every
/// region base is 8-byte aligned. Integers are stored little-endian.
#[derive(Debug)]
pub struct NodeMemory {
    node: NodeId,
    bytes: Vec<u8>,
    regions: Vec<Region>,
    capacity: u64,
}

impl NodeMemory {
    pub(crate) fn new(node: NodeId, capacity: u64) -> Self {
        NodeMemory {
            node,
            bytes: Vec::new(),
            regions: Vec::new(),
            capacity,
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub(crate) fn capacity_override(&mut self, capacity: u64) {
        self.capacity = capacity;
    }

    pub(crate) fn register(&mut self, len: u64) -> Option<Region> {
        let base = (self.bytes.len() as u64).next_multiple_of(8);
        let end = base.checked_add(len)?;
        if len == 0 || end > self.capacity {
            return None;
        }
        self.bytes.resize(end as usize, 0);
        let region = Region {
            owner: self.node,
            base,
            len,
        };
        self.regions.push(region);
        Some(region)
    }

    /// True when `[offset, offset+len)` lies inside one registered region.
    pub fn is_registered(&self, offset: u64, len: u64) -> bool {
        let idx = self.regions.partition_point(|r| r.base <= offset);
        idx > 0 && self.regions[idx - 1].contains(offset, len)
    }

    fn check(&self, offset: u64, len: u64) -> Result<std::ops::Range<usize>, VerbFaultKind> {
        if !self.is_registered(offset, len) {
            return Err(VerbFaultKind::OutOfBounds);
        }
        Ok(offset as usize..(offset + len) as usize)
    }

    fn check_atomic(&self, offset: u64) -> Result<std::ops::Range<usize>, VerbFaultKind> {
        if offset % 8 != 0 {
            return Err(VerbFaultKind::Misaligned);
        }
        self.check(offset, 8)
    }

    pub fn read(&self, offset: u64, len: u64) -> &[u8] {
        let range = self
            .check(offset, len)
            .unwrap_or_else(|e| panic!("local read {offset}+{len} on node {}: {e:?}", self.node));
        &self.bytes[range]
    }

    pub fn write(&mut self, offset: u64, data: &[u8]) {
        let range = self
            .check(offset, data.len() as u64)
            .unwrap_or_else(|e| panic!("local write {offset}+{} on node {}: {e:?}", data.len(), self.node));
        self.bytes[range].copy_from_slice(data);
    }

    pub fn read_u64(&self, offset: u64) -> u64 {
        u64::from_le_bytes(self.read(offset, 8).try_into().unwrap())
    }

    pub fn write_u64(&mut self, offset: u64, value: u64) {
        self.write(offset, &value.to_le_bytes());
    }

    /// Local compare-and-swap; returns the previous value.
    pub fn cas_u64(&mut self, offset: u64, expected: u64, desired: u64) -> u64 {
        let old = self.read_u64(offset);
        if old == expected {
            self.write_u64(offset, desired);
        }
        old
    }

    pub fn faa_u64(&mut self, offset: u64, delta: u64) -> u64 {
        let old = self.read_u64(offset);
        self.write_u64(offset, old.wrapping_add(delta));
        old
    }

    /// Executes one verb against this memory as the RNIC would.
    pub(crate) fn apply(&mut self, index: usize, req: &VerbRequest) -> Result<VerbResult, VerbFault> {
        let fault = |kind| VerbFault { index, kind };
        match &req.op {
            VerbOp::Read { len } => {
                let range = self.check(req.offset, *len).map_err(fault)?;
                Ok(VerbResult::Read(self.bytes[range].to_vec()))
            }
            VerbOp::Write { data } => {
                let range = self.check(req.offset, data.len() as u64).map_err(fault)?;
                self.bytes[range].copy_from_slice(data);
                Ok(VerbResult::Write)
            }
            VerbOp::Cas { expected, desired } => {
                self.check_atomic(req.offset).map_err(fault)?;
                Ok(VerbResult::Cas {
                    old: self.cas_u64(req.offset, *expected, *desired),
                })
            }
            VerbOp::Faa { delta } => {
                self.check_atomic(req.offset).map_err(fault)?;
                Ok(VerbResult::Faa {
                    old: self.faa_u64(req.offset, *delta),
                })
            }
        }
    }

    /// Snapshot of every registered byte, for determinism checks.
    pub fn image(&self) -> &[u8] {
        &self.bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_are_aligned_and_disjoint() {
        let mut m = NodeMemory::new(0, 1 << 20);
        let a = m.register(13).unwrap();
        let b = m.register(64).unwrap();
        assert_eq!(a.base, 0);
        assert_eq!(b.base, 16);
        assert!(a.end() <= b.base);
        assert!(m.register(0).is_none());
        assert!(m.register(1 << 21).is_none());
    }

    #[test]
    fn gap_between_regions_is_not_registered() {
        let mut m = NodeMemory::new(0, 1024);
        m.register(13).unwrap();
        m.register(8).unwrap();
        assert!(m.is_registered(0, 13));
        assert!(!m.is_registered(12, 2));
        assert!(!m.is_registered(13, 1));
        assert!(m.is_registered(16, 8));
        assert!(!m.is_registered(16, 9));
    }

    #[test]
    fn failed_cas_leaves_memory_untouched() {
        let mut m = NodeMemory::new(0, 1024);
        m.register(64).unwrap();
        m.write_u64(8, 7);
        let before = m.image().to_vec();
        assert_eq!(m.cas_u64(8, 0, 99), 7);
        assert_eq!(before, m.image());
        assert_eq!(m.cas_u64(8, 7, 99), 7);
        assert_eq!(m.read_u64(8), 99);
    }

    #[test]
    fn misaligned_atomic_faults() {
        let mut m = NodeMemory::new(0, 1024);
        m.register(64).unwrap();
        let err = m.apply(0, &VerbRequest::faa(4, 1)).unwrap_err();
        assert_eq!(err.kind, VerbFaultKind::Misaligned);
    }
}
