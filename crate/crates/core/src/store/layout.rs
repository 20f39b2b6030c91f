use super::StoreError;

pub const LOCK_OFFSET: usize = 0;
pub const RTS_OFFSET: usize = 8;
const SLOTS_OFFSET: usize = 16;

/// Byte positions of the cells of one tuple.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TupleLayout {
    slots: usize,
    record_len: usize,
    stride: usize,
}

impl TupleLayout {
    pub fn new(slots: usize, record_len: usize) -> Self {
        TupleLayout {
            slots,
            record_len,
            stride: 8 + record_len.next_multiple_of(8),
        }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn record_len(&self) -> usize {
        self.record_len
    }

    pub fn size(&self) -> usize {
        SLOTS_OFFSET + self.slots * self.stride
    }

    pub fn wts_offset(&self, slot: usize) -> usize {
        debug_assert!(slot < self.slots);
        SLOTS_OFFSET + slot * self.stride
    }

    pub fn record_offset(&self, slot: usize) -> usize {
        self.wts_offset(slot) + 8
    }

    /// Bytes `[wts | record]` of one slot, as written at commit.
    pub fn encode_slot(&self, wts: u64, record: &[u8]) -> Vec<u8> {
        assert!(record.len() <= self.record_len);
        let mut out = vec![0; self.stride];
        out[..8].copy_from_slice(&wts.to_le_bytes());
        out[8..8 + record.len()].copy_from_slice(record);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Version {
    pub wts: u64,
    pub record: Vec<u8>,
}

/// Decoded tuple. `versions` has one entry per slot, in slot order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tuple {
    pub lock: u64,
    pub rts: u64,
    pub versions: Vec<Version>,
}

fn u64_at(bytes: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap())
}

impl Tuple {
    pub fn zeroed(layout: &TupleLayout) -> Self {
        Tuple {
            lock: 0,
            rts: 0,
            versions: vec![
                Version {
                    wts: 0,
                    record: vec![0; layout.record_len],
                };
                layout.slots
            ],
        }
    }

    pub fn parse(layout: &TupleLayout, bytes: &[u8]) -> Result<Tuple, StoreError> {
        if bytes.len() != layout.size() {
            return Err(StoreError::Format {
                expected: layout.size(),
                got: bytes.len(),
            });
        }
        let versions = (0..layout.slots)
            .map(|s| {
                let r = layout.record_offset(s);
                Version {
                    wts: u64_at(bytes, layout.wts_offset(s)),
                    record: bytes[r..r + layout.record_len].to_vec(),
                }
            })
            .collect();
        Ok(Tuple {
            lock: u64_at(bytes, LOCK_OFFSET),
            rts: u64_at(bytes, RTS_OFFSET),
            versions,
        })
    }

    /// Inverse of [`Tuple::parse`]. Alignment padding after each record is
    /// written as zero.
    pub fn encode(&self, layout: &TupleLayout) -> Vec<u8> {
        assert_eq!(self.versions.len(), layout.slots);
        let mut out = vec![0; layout.size()];
        out[LOCK_OFFSET..LOCK_OFFSET + 8].copy_from_slice(&self.lock.to_le_bytes());
        out[RTS_OFFSET..RTS_OFFSET + 8].copy_from_slice(&self.rts.to_le_bytes());
        for (s, v) in self.versions.iter().enumerate() {
            let slot = layout.encode_slot(v.wts, &v.record);
            let w = layout.wts_offset(s);
            out[w..w + slot.len()].copy_from_slice(&slot);
        }
        out
    }

    pub fn wts_slots(&self) -> Vec<u64> {
        self.versions.iter().map(|v| v.wts).collect()
    }

    pub fn max_wts(&self) -> u64 {
        self.versions.iter().map(|v| v.wts).max().unwrap_or(0)
    }

    /// Slot of the newest committed version; the lowest slot wins ties, so
    /// the initial version in slot 0 beats never-written slots.
    pub fn newest_slot(&self) -> usize {
        self.visible_slot(u64::MAX).unwrap_or(0)
    }

    pub fn newest(&self) -> &Version {
        &self.versions[self.newest_slot()]
    }

    /// Slot holding the largest wts strictly below `ts`, lowest slot on ties.
    pub fn visible_slot(&self, ts: u64) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, v) in self.versions.iter().enumerate() {
            if v.wts < ts && best.is_none_or(|b| v.wts > self.versions[b].wts) {
                best = Some(i);
            }
        }
        best
    }

    /// Slot a new version replaces: the smallest wts, highest slot on ties,
    /// so unused slots fill from the back and the initial version survives
    /// longest.
    pub fn eviction_slot(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.versions.iter().enumerate() {
            if v.wts <= self.versions[best].wts {
                best = i;
            }
        }
        best
    }
}
