use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{arrival_of, mix64, Logic, TxnSpec};
use crate::netsim::{ClusterShape, SimTime};
use crate::store::{GlobalKey, Partition, TableSpec};

pub const TABLE: u16 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct YcsbConfig {
    pub record_len: usize,
    pub ops_per_txn: usize,
    pub write_ratio: f64,
    pub exec_time: SimTime,
    pub hot_area_fraction: f64,
    pub hot_access_prob: f64,
    /// Table size scales with the number of worker threads in the cluster.
    pub rows_per_thread: u64,
}

impl Default for YcsbConfig {
    fn default() -> Self {
        YcsbConfig {
            record_len: 64,
            ops_per_txn: 10,
            write_ratio: 0.2,
            exec_time: 5,
            hot_area_fraction: 0.001,
            hot_access_prob: 0.1,
            rows_per_thread: 8000,
        }
    }
}

impl YcsbConfig {
    pub fn rows(&self, shape: &ClusterShape) -> u64 {
        self.rows_per_thread * (shape.nodes * shape.threads_per_node) as u64
    }

    /// Keys `0..hot_rows` form the hot area.
    pub fn hot_rows(&self, shape: &ClusterShape) -> u64 {
        let rows = self.rows(shape);
        ((rows as f64 * self.hot_area_fraction).ceil() as u64).clamp(1, rows)
    }

    pub fn tables(&self, shape: &ClusterShape) -> Vec<TableSpec> {
        vec![TableSpec {
            id: TABLE,
            name: "usertable".into(),
            rows: self.rows(shape),
            record_len: self.record_len,
            partition: Partition::Modulo,
        }]
    }

    pub fn generate(&self, shape: &ClusterShape, seed: u64, n: usize) -> Vec<TxnSpec> {
        assert!(self.ops_per_txn >= 1);
        assert!((0.0..=1.0).contains(&self.write_ratio) && (0.0..=1.0).contains(&self.hot_access_prob));
        let rows = self.rows(shape);
        let hot = self.hot_rows(shape);
        assert!(self.ops_per_txn as u64 <= rows, "more ops per txn than rows");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut keys: Vec<u64> = Vec::with_capacity(self.ops_per_txn);
                let mut rs = Vec::new();
                let mut ws = Vec::new();
                while keys.len() < self.ops_per_txn {
                    let key = if hot == rows || rng.gen_bool(self.hot_access_prob) {
                        rng.gen_range(0..hot)
                    } else {
                        rng.gen_range(hot..rows)
                    };
                    if keys.contains(&key) {
                        continue;
                    }
                    keys.push(key);
                    let gk = GlobalKey::new(TABLE, key);
                    if rng.gen_bool(self.write_ratio) {
                        ws.push(gk);
                    } else {
                        rs.push(gk);
                    }
                }
                TxnSpec::new(
                    i as u64,
                    rs,
                    ws,
                    Logic::Ycsb {
                        record_len: self.record_len,
                    },
                    self.exec_time,
                    arrival_of(shape, i),
                )
            })
            .collect()
    }
}

pub(super) fn initial_record(gk: GlobalKey, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len.next_multiple_of(8));
    let mut h = mix64(gk.pack());
    while out.len() < len {
        out.extend_from_slice(&h.to_le_bytes());
        h = mix64(h);
    }
    out.truncate(len);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHAPE: ClusterShape = ClusterShape {
        nodes: 4,
        threads_per_node: 2,
        coroutines_per_thread: 4,
    };

    #[test]
    fn default_sizes() {
        let c = YcsbConfig::default();
        assert_eq!(c.rows(&SHAPE), 64_000);
        assert_eq!(c.hot_rows(&SHAPE), 64);
    }

    #[test]
    fn mean_writes_per_txn_is_two() {
        let txns = YcsbConfig::default().generate(&SHAPE, 1, 100_000);
        let writes: usize = txns.iter().map(|t| t.ws.len()).sum();
        let mean = writes as f64 / txns.len() as f64;
        assert!((mean - 2.0).abs() <= 0.1, "mean writes {mean}");
        assert!(txns.iter().all(|t| t.rs.len() + t.ws.len() == 10));
    }

    #[test]
    fn hot_probability_is_respected() {
        let c = YcsbConfig {
            hot_access_prob: 0.9,
            ..YcsbConfig::default()
        };
        let txns = c.generate(&SHAPE, 2, 10_000);
        let hot = c.hot_rows(&SHAPE);
        let (mut inside, mut total) = (0usize, 0usize);
        for t in &txns {
            for k in t.keys() {
                total += 1;
                inside += usize::from(k.key < hot);
            }
        }
        assert!(total >= 100_000);
        assert!(inside as f64 / total as f64 >= 0.85);
    }

    #[test]
    fn zero_hot_probability_never_touches_the_hot_area() {
        let c = YcsbConfig {
            hot_access_prob: 0.0,
            ..YcsbConfig::default()
        };
        let hot = c.hot_rows(&SHAPE);
        assert!(c.generate(&SHAPE, 3, 2000).iter().all(|t| t.keys().all(|k| k.key >= hot)));
    }

    #[test]
    fn same_seed_same_stream() {
        let c = YcsbConfig::default();
        assert_eq!(c.generate(&SHAPE, 9, 500), c.generate(&SHAPE, 9, 500));
        assert_ne!(c.generate(&SHAPE, 9, 500), c.generate(&SHAPE, 10, 500));
    }
}
