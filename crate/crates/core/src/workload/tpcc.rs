use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{arrival_of, mix64, Logic, TxnSpec};
use crate::netsim::{ClusterShape, SimTime};
use crate::store::{GlobalKey, Partition, TableSpec};

pub const WAREHOUSE: u16 = 0;
pub const DISTRICT: u16 = 1;
pub const CUSTOMER: u16 = 2;
pub const ITEM: u16 = 3;
pub const STOCK: u16 = 4;

pub const DISTRICTS_PER_WAREHOUSE: u64 = 10;
const RECORD_LEN: usize = 64;

/// New-order only. Warehouse `w` lives on node `w % nodes` together with
/// its districts, customers and stock; the read-only item table is copied
/// onto every node so item lookups stay local.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpccConfig {
    pub warehouses_per_thread: u64,
    pub customers_per_district: u64,
    pub items: u64,
    pub min_lines: usize,
    pub max_lines: usize,
    /// Probability that an order line is supplied by another warehouse.
    pub remote_prob: f64,
    pub exec_time: SimTime,
}

impl Default for TpccConfig {
    fn default() -> Self {
        TpccConfig {
            warehouses_per_thread: 1,
            customers_per_district: 30,
            items: 1000,
            min_lines: 5,
            max_lines: 15,
            remote_prob: 0.1,
            exec_time: 0,
        }
    }
}

impl TpccConfig {
    pub fn warehouses(&self, shape: &ClusterShape) -> u64 {
        self.warehouses_per_thread * (shape.nodes * shape.threads_per_node) as u64
    }

    pub fn tables(&self, shape: &ClusterShape) -> Vec<TableSpec> {
        let w = self.warehouses(shape);
        let c = DISTRICTS_PER_WAREHOUSE * self.customers_per_district;
        let table = |id, name: &str, rows, partition| TableSpec {
            id,
            name: name.into(),
            rows,
            record_len: RECORD_LEN,
            partition,
        };
        vec![
            table(WAREHOUSE, "warehouse", w, Partition::Modulo),
            table(DISTRICT, "district", w * DISTRICTS_PER_WAREHOUSE, Partition::Blocked { block: DISTRICTS_PER_WAREHOUSE }),
            table(CUSTOMER, "customer", w * c, Partition::Blocked { block: c }),
            table(ITEM, "item", shape.nodes as u64 * self.items, Partition::Blocked { block: self.items }),
            table(STOCK, "stock", w * self.items, Partition::Blocked { block: self.items }),
        ]
    }

    pub fn generate(&self, shape: &ClusterShape, seed: u64, n: usize) -> Vec<TxnSpec> {
        assert!(1 <= self.min_lines && self.min_lines <= self.max_lines);
        assert!(self.max_lines as u64 <= self.items, "more order lines than items");
        let warehouses = self.warehouses(shape);
        let nodes = shape.nodes as u64;
        let local_warehouses = warehouses / nodes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let arrival = arrival_of(shape, i);
                let home_node = arrival.node as u64;
                let w = home_node + nodes * rng.gen_range(0..local_warehouses);
                let d = w * DISTRICTS_PER_WAREHOUSE + rng.gen_range(0..DISTRICTS_PER_WAREHOUSE);
                let c = d * self.customers_per_district + rng.gen_range(0..self.customers_per_district);
                let lines = rng.gen_range(self.min_lines..=self.max_lines);
                let mut items: Vec<u64> = Vec::with_capacity(lines);
                while items.len() < lines {
                    let it = rng.gen_range(0..self.items);
                    if !items.contains(&it) {
                        items.push(it);
                    }
                }
                let mut rs = vec![GlobalKey::new(WAREHOUSE, w), GlobalKey::new(CUSTOMER, c)];
                let mut ws = vec![GlobalKey::new(DISTRICT, d)];
                let mut quantities = Vec::with_capacity(lines);
                let mut remote = Vec::with_capacity(lines);
                for &it in &items {
                    let supply = if warehouses > 1 && rng.gen_bool(self.remote_prob) {
                        let other = rng.gen_range(0..warehouses - 1);
                        if other >= w {
                            other + 1
                        } else {
                            other
                        }
                    } else {
                        w
                    };
                    rs.push(GlobalKey::new(ITEM, home_node * self.items + it));
                    ws.push(GlobalKey::new(STOCK, supply * self.items + it));
                    quantities.push(rng.gen_range(1..=10));
                    remote.push(supply != w);
                }
                TxnSpec::new(i as u64, rs, ws, Logic::NewOrder { quantities, remote }, self.exec_time, arrival)
            })
            .collect()
    }
}

pub(super) fn initial_record(gk: GlobalKey, len: usize) -> Vec<u8> {
    let mut r = vec![0u8; len];
    let h = mix64(gk.pack());
    match gk.table {
        DISTRICT => r[..8].copy_from_slice(&3001u64.to_le_bytes()),
        STOCK => r[..8].copy_from_slice(&(10 + (h % 91) as i64).to_le_bytes()),
        _ => r[..8].copy_from_slice(&(h % 10_000).to_le_bytes()),
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{LatencyModel, Sim};
    use crate::store::Store;

    const SHAPE: ClusterShape = ClusterShape {
        nodes: 4,
        threads_per_node: 2,
        coroutines_per_thread: 2,
    };

    #[test]
    fn lines_within_bounds() {
        let txns = TpccConfig::default().generate(&SHAPE, 1, 5000);
        for t in &txns {
            let Logic::NewOrder { quantities, .. } = &t.logic else { panic!() };
            assert!((5..=15).contains(&quantities.len()));
            assert_eq!(t.ws.len(), quantities.len() + 1);
        }
    }

    #[test]
    fn no_remote_lines_means_single_partition() {
        let c = TpccConfig {
            remote_prob: 0.0,
            ..TpccConfig::default()
        };
        let sim = Sim::new(SHAPE, LatencyModel::default(), 0).unwrap();
        let store = Store::create(&sim, &c.tables(&SHAPE), 1).unwrap();
        for t in c.generate(&SHAPE, 2, 2000) {
            assert!(t.keys().all(|k| store.owner(k).unwrap() == t.arrival.node));
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let c = TpccConfig::default();
        assert_eq!(c.generate(&SHAPE, 3, 200), c.generate(&SHAPE, 3, 200));
    }
}
