//! Partitioned tuple store in registered memory.
//!
//! Tuple layout, all integers little-endian and every metadata cell 8-byte
//! aligned:
//!
//! ```text
//! 0        8        16                   16+(8+R)
//! | lock   | rts    | wts0 | record0 ... | wts1 | record1 ... | ...
//! ```
//!
//! Record length `R` is fixed per table and rounded up to a multiple of 8 in
//! the layout so every slot's `wts` cell stays aligned.

mod cache;
mod layout;

pub use cache::{resolve_offset, OffsetCache};
pub use layout::{Tuple, TupleLayout, Version, LOCK_OFFSET, RTS_OFFSET};

use serde::{Deserialize, Serialize};

use crate::netsim::{NodeId, Region, Sim, SimError, VerbFault};

pub type TableId = u16;

/// Key qualified by its table. Packs into 64 bits as `table << 48 | key`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GlobalKey {
    pub table: TableId,
    pub key: u64,
}

impl GlobalKey {
    pub const KEY_BITS: u32 = 48;

    pub const fn new(table: TableId, key: u64) -> Self {
        GlobalKey { table, key }
    }

    pub fn pack(self) -> u64 {
        debug_assert!(self.key < 1 << Self::KEY_BITS);
        (u64::from(self.table) << Self::KEY_BITS) | self.key
    }

    pub fn unpack(packed: u64) -> Self {
        GlobalKey {
            table: (packed >> Self::KEY_BITS) as TableId,
            key: packed & ((1 << Self::KEY_BITS) - 1),
        }
    }
}

impl std::fmt::Display for GlobalKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.table, self.key)
    }
}

/// How keys of a table map to machines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    /// `owner = key % nodes`.
    Modulo,
    /// Runs of `block` consecutive keys stay together; runs are dealt
    /// round-robin, `owner = (key / block) % nodes`.
    Blocked { block: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpec {
    pub id: TableId,
    pub name: String,
    pub rows: u64,
    pub record_len: usize,
    pub partition: Partition,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("unknown table {0}")]
    UnknownTable(TableId),
    #[error("unknown key {0}")]
    UnknownKey(GlobalKey),
    #[error("tuple is {got} bytes, layout needs {expected}")]
    Format { expected: usize, got: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Fault(#[from] VerbFault),
}

#[derive(Clone, Copy, Debug)]
struct Shard {
    tuples: Region,
    directory: Region,
}

#[derive(Clone, Debug)]
struct Table {
    spec: TableSpec,
    layout: TupleLayout,
    shards: Vec<Shard>,
}

/// Placement of every table across the cluster. Offsets are fixed for the
/// whole run.
#[derive(Clone, Debug)]
pub struct Store {
    nodes: usize,
    slots: usize,
    tables: Vec<Table>,
}

impl Store {
    /// Registers tuple and directory regions for every table on every node
    /// and fills each directory with its tuples' offsets. Tuples start
    /// zeroed.
    pub fn create(sim: &Sim, specs: &[TableSpec], slots: usize) -> Result<Store, StoreError> {
        assert!(slots >= 1, "a tuple needs at least one version slot");
        let nodes = sim.shape().nodes;
        let mut tables: Vec<Table> = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            assert_eq!(spec.id as usize, i, "table ids must be dense and ordered");
            if let Partition::Blocked { block } = spec.partition {
                assert!(block > 0, "empty partition block");
            }
            let layout = TupleLayout::new(slots, spec.record_len);
            let mut shards = Vec::with_capacity(nodes);
            for node in 0..nodes {
                let count = local_rows(spec, nodes, node).max(1);
                let tuples = sim.register_region(node, count * layout.size() as u64)?;
                let directory = sim.register_region(node, count * 8)?;
                sim.with_memory(node, |m| {
                    for idx in 0..count {
                        m.write_u64(directory.base + idx * 8, tuples.base + idx * layout.size() as u64);
                    }
                });
                shards.push(Shard { tuples, directory });
            }
            tables.push(Table {
                spec: spec.clone(),
                layout,
                shards,
            });
        }
        Ok(Store { nodes, slots, tables })
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn tables(&self) -> impl Iterator<Item = &TableSpec> {
        self.tables.iter().map(|t| &t.spec)
    }

    fn table(&self, id: TableId) -> Result<&Table, StoreError> {
        self.tables.get(id as usize).ok_or(StoreError::UnknownTable(id))
    }

    pub fn spec(&self, id: TableId) -> Result<&TableSpec, StoreError> {
        Ok(&self.table(id)?.spec)
    }

    pub fn layout(&self, id: TableId) -> Result<TupleLayout, StoreError> {
        Ok(self.table(id)?.layout)
    }

    fn check(&self, gk: GlobalKey) -> Result<&Table, StoreError> {
        let t = self.table(gk.table)?;
        if gk.key >= t.spec.rows {
            return Err(StoreError::UnknownKey(gk));
        }
        Ok(t)
    }

    pub fn owner(&self, gk: GlobalKey) -> Result<NodeId, StoreError> {
        let t = self.check(gk)?;
        Ok(owner_of(&t.spec, self.nodes, gk.key))
    }

    /// Position of the key among the tuples its owner stores for the table.
    pub fn local_index(&self, gk: GlobalKey) -> Result<u64, StoreError> {
        let t = self.check(gk)?;
        Ok(index_of(&t.spec, self.nodes, gk.key))
    }

    /// Owner and byte offset of the tuple. Pure arithmetic on the placement;
    /// coordinators go through [`resolve_offset`] instead.
    pub fn tuple_addr(&self, gk: GlobalKey) -> Result<(NodeId, u64), StoreError> {
        let t = self.check(gk)?;
        let node = owner_of(&t.spec, self.nodes, gk.key);
        let idx = index_of(&t.spec, self.nodes, gk.key);
        Ok((node, t.shards[node].tuples.base + idx * t.layout.size() as u64))
    }

    /// Owner and byte offset of the directory cell holding the tuple offset.
    pub fn directory_addr(&self, gk: GlobalKey) -> Result<(NodeId, u64), StoreError> {
        let t = self.check(gk)?;
        let node = owner_of(&t.spec, self.nodes, gk.key);
        let idx = index_of(&t.spec, self.nodes, gk.key);
        Ok((node, t.shards[node].directory.base + idx * 8))
    }

    /// Installs `record` as the initial version (wts 0) in slot 0.
    pub fn load(&self, sim: &Sim, gk: GlobalKey, record: &[u8]) -> Result<(), StoreError> {
        let layout = self.layout(gk.table)?;
        assert!(record.len() <= layout.record_len(), "record longer than the table's record length");
        let (node, off) = self.tuple_addr(gk)?;
        sim.with_memory(node, |m| m.write(off + layout.record_offset(0) as u64, record));
        Ok(())
    }

    /// Reads a tuple straight out of simulated memory, bypassing the network.
    pub fn read_tuple(&self, sim: &Sim, gk: GlobalKey) -> Result<Tuple, StoreError> {
        let layout = self.layout(gk.table)?;
        let (node, off) = self.tuple_addr(gk)?;
        sim.with_memory(node, |m| Tuple::parse(&layout, m.read(off, layout.size() as u64)))
    }

    /// Every key of every table, in table then key order.
    pub fn keys(&self) -> impl Iterator<Item = GlobalKey> + '_ {
        self.tables
            .iter()
            .flat_map(|t| (0..t.spec.rows).map(move |k| GlobalKey::new(t.spec.id, k)))
    }
}

fn owner_of(spec: &TableSpec, nodes: usize, key: u64) -> NodeId {
    let n = nodes as u64;
    match spec.partition {
        Partition::Modulo => (key % n) as NodeId,
        Partition::Blocked { block } => ((key / block) % n) as NodeId,
    }
}

fn index_of(spec: &TableSpec, nodes: usize, key: u64) -> u64 {
    let n = nodes as u64;
    match spec.partition {
        Partition::Modulo => key / n,
        Partition::Blocked { block } => (key / block) / n * block + key % block,
    }
}

fn local_rows(spec: &TableSpec, nodes: usize, node: NodeId) -> u64 {
    if spec.rows == 0 {
        return 0;
    }
    // Highest local index of any key owned by `node`, plus one.
    let n = nodes as u64;
    let node = node as u64;
    match spec.partition {
        Partition::Modulo => (spec.rows + n - 1 - node) / n,
        Partition::Blocked { block } => {
            let blocks = spec.rows.div_ceil(block);
            let mine = (blocks + n - 1 - node.min(blocks)) / n;
            if node >= blocks {
                0
            } else {
                mine * block
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{ClusterShape, LatencyModel};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn sim(nodes: usize) -> Sim {
        Sim::new(ClusterShape::new(nodes, 1, 1), LatencyModel::default(), 0).unwrap()
    }

    fn spec(rows: u64, partition: Partition) -> TableSpec {
        TableSpec {
            id: 0,
            name: "t".into(),
            rows,
            record_len: 12,
            partition,
        }
    }

    #[test]
    fn global_key_packing_round_trips() {
        let gk = GlobalKey::new(3, 123_456_789);
        assert_eq!(GlobalKey::unpack(gk.pack()), gk);
        assert_eq!(gk.pack() >> 48, 3);
    }

    #[test]
    fn unknown_keys_and_tables_are_rejected() {
        let s = sim(2);
        let store = Store::create(&s, &[spec(10, Partition::Modulo)], 1).unwrap();
        assert_eq!(
            store.owner(GlobalKey::new(0, 10)),
            Err(StoreError::UnknownKey(GlobalKey::new(0, 10)))
        );
        assert_eq!(store.owner(GlobalKey::new(1, 0)), Err(StoreError::UnknownTable(1)));
    }

    #[test]
    fn directory_holds_tuple_offsets() {
        let s = sim(3);
        let store = Store::create(&s, &[spec(50, Partition::Blocked { block: 4 })], 2).unwrap();
        for gk in store.keys() {
            let (node, off) = store.tuple_addr(gk).unwrap();
            let (dnode, doff) = store.directory_addr(gk).unwrap();
            assert_eq!(node, dnode);
            assert_eq!(s.with_memory(node, |m| m.read_u64(doff)), off);
        }
    }

    #[test]
    fn load_sets_slot_zero_record() {
        let s = sim(2);
        let store = Store::create(&s, &[spec(4, Partition::Modulo)], 4).unwrap();
        let gk = GlobalKey::new(0, 3);
        store.load(&s, gk, b"hello").unwrap();
        let t = store.read_tuple(&s, gk).unwrap();
        assert_eq!(t.lock, 0);
        assert_eq!(&t.versions[0].record[..5], b"hello");
        assert!(t.versions.iter().all(|v| v.wts == 0));
    }

    proptest! {
        #[test]
        fn placement_is_a_bijection(nodes in 1usize..6, rows in 1u64..300, block in 1u64..20, blocked: bool) {
            let partition = if blocked { Partition::Blocked { block } } else { Partition::Modulo };
            let s = sim(nodes);
            let store = Store::create(&s, &[spec(rows, partition)], 1).unwrap();
            let mut seen = HashSet::new();
            for gk in store.keys() {
                let addr = store.tuple_addr(gk).unwrap();
                prop_assert!(seen.insert(addr));
                prop_assert!(s.with_memory(addr.0, |m| m.is_registered(addr.1, 40)));
            }
        }
    }
}
