use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{arrival_of, Logic, SmallBankKind, TxnSpec};
use crate::netsim::{ClusterShape, SimTime};
use crate::store::{GlobalKey, Partition, TableSpec};

pub const SAVINGS: u16 = 0;
pub const CHECKING: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmallBankConfig {
    pub accounts_per_thread: u64,
    /// Relative weights of the six transaction types, in
    /// [`SmallBankKind::ALL`] order.
    pub mix: [u32; 6],
    /// Fraction of accounts forming the hotspot and the probability that an
    /// account is drawn from it. Zero probability means uniform access.
    pub hot_fraction: f64,
    pub hot_prob: f64,
    pub exec_time: SimTime,
}

impl Default for SmallBankConfig {
    fn default() -> Self {
        SmallBankConfig {
            accounts_per_thread: 1000,
            mix: [1; 6],
            hot_fraction: 0.01,
            hot_prob: 0.0,
            exec_time: 0,
        }
    }
}

pub fn savings(account: u64) -> GlobalKey {
    GlobalKey::new(SAVINGS, account)
}

pub fn checking(account: u64) -> GlobalKey {
    GlobalKey::new(CHECKING, account)
}

impl SmallBankConfig {
    pub fn accounts(&self, shape: &ClusterShape) -> u64 {
        self.accounts_per_thread * (shape.nodes * shape.threads_per_node) as u64
    }

    pub fn tables(&self, shape: &ClusterShape) -> Vec<TableSpec> {
        let rows = self.accounts(shape);
        [(SAVINGS, "savings"), (CHECKING, "checking")]
            .into_iter()
            .map(|(id, name)| TableSpec {
                id,
                name: name.into(),
                rows,
                record_len: 8,
                partition: Partition::Modulo,
            })
            .collect()
    }

    fn account(&self, rng: &mut ChaCha8Rng, accounts: u64) -> u64 {
        let hot = ((accounts as f64 * self.hot_fraction).ceil() as u64).clamp(1, accounts);
        if self.hot_prob > 0.0 && rng.gen_bool(self.hot_prob) {
            rng.gen_range(0..hot)
        } else {
            rng.gen_range(0..accounts)
        }
    }

    pub fn generate(&self, shape: &ClusterShape, seed: u64, n: usize) -> Vec<TxnSpec> {
        let accounts = self.accounts(shape);
        assert!(accounts >= 2, "SmallBank needs at least two accounts");
        let total: u32 = self.mix.iter().sum();
        assert!(total > 0, "empty SmallBank mix");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut pick = rng.gen_range(0..total);
                let mut kind = SmallBankKind::ALL[5];
                for (k, w) in SmallBankKind::ALL.iter().zip(self.mix) {
                    if pick < w {
                        kind = *k;
                        break;
                    }
                    pick -= w;
                }
                let a = self.account(&mut rng, accounts);
                let b = loop {
                    let b = self.account(&mut rng, accounts);
                    if b != a {
                        break b;
                    }
                };
                let amount = rng.gen_range(1..=100);
                let (rs, ws) = match kind {
                    SmallBankKind::Balance => (vec![savings(a), checking(a)], vec![]),
                    SmallBankKind::DepositChecking => (vec![], vec![checking(a)]),
                    SmallBankKind::TransactSavings => (vec![], vec![savings(a)]),
                    SmallBankKind::Amalgamate => (vec![], vec![savings(a), checking(a), checking(b)]),
                    SmallBankKind::WriteCheck => (vec![savings(a)], vec![checking(a)]),
                    SmallBankKind::SendPayment => (vec![], vec![checking(a), checking(b)]),
                };
                TxnSpec::new(i as u64, rs, ws, Logic::SmallBank { kind, amount }, self.exec_time, arrival_of(shape, i))
            })
            .collect()
    }
}

pub(super) fn initial_record(gk: GlobalKey) -> Vec<u8> {
    (10_000 + (gk.key * 7919) % 1000).to_le_bytes().to_vec()
}
