use serde::{Deserialize, Serialize};

/// SplitMix64 finalizer; the mixing step for all synthetic record contents.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fold(h: u64, bytes: &[u8]) -> u64 {
    bytes.chunks(8).fold(mix64(h ^ bytes.len() as u64), |acc, c| {
        let mut w = [0u8; 8];
        w[..c.len()].copy_from_slice(c);
        mix64(acc ^ u64::from_le_bytes(w))
    })
}

fn expand(mut h: u64, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len.next_multiple_of(8));
    while out.len() < len {
        h = mix64(h);
        out.extend_from_slice(&h.to_le_bytes());
    }
    out.truncate(len);
    out
}

fn i64_at(b: &[u8], off: usize) -> i64 {
    i64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

fn u64_at(b: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

fn put(b: &mut [u8], off: usize, v: impl Into<i128>) {
    let v = v.into() as i64;
    b[off..off + 8].copy_from_slice(&v.to_le_bytes());
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SmallBankKind {
    Balance,
    DepositChecking,
    TransactSavings,
    Amalgamate,
    WriteCheck,
    SendPayment,
}

impl SmallBankKind {
    pub const ALL: [SmallBankKind; 6] = [
        SmallBankKind::Balance,
        SmallBankKind::DepositChecking,
        SmallBankKind::TransactSavings,
        SmallBankKind::Amalgamate,
        SmallBankKind::WriteCheck,
        SmallBankKind::SendPayment,
    ];
}

/// Deterministic transaction body. Inputs are positional: read-set values,
/// then old values of the write set; output is one record per write.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Logic {
    /// Each written record becomes a hash of the txn id, every value read
    /// and the key's own old value.
    Ycsb { record_len: usize },
    /// Balances are little-endian i64 in the first 8 bytes.
    ///
    /// Positions: Balance rs [sav, chk]; DepositChecking ws [chk];
    /// TransactSavings ws [sav]; Amalgamate ws [sav a, chk a, chk b];
    /// WriteCheck rs [sav] ws [chk]; SendPayment ws [chk a, chk b].
    SmallBank { kind: SmallBankKind, amount: i64 },
    /// rs [warehouse, customer, item per line], ws [district, stock per
    /// line]; `remote[i]` marks a line supplied by another warehouse.
    NewOrder { quantities: Vec<u32>, remote: Vec<bool> },
}

impl Logic {
    pub fn apply(&self, txn_id: u64, rs: &[&[u8]], ws_old: &[&[u8]]) -> Vec<Vec<u8>> {
        match self {
            Logic::Ycsb { record_len } => {
                let h = rs.iter().fold(mix64(txn_id), |h, v| fold(h, v));
                ws_old
                    .iter()
                    .enumerate()
                    .map(|(i, old)| expand(fold(mix64(h ^ i as u64), old), *record_len))
                    .collect()
            }
            Logic::SmallBank { kind, amount } => smallbank(*kind, *amount, rs, ws_old),
            Logic::NewOrder { quantities, remote } => {
                let mut out = Vec::with_capacity(ws_old.len());
                let mut district = ws_old[0].to_vec();
                let next_o_id = u64_at(&district, 0);
                put(&mut district, 0, next_o_id + 1);
                out.push(district);
                let base = fold(fold(mix64(txn_id), rs[0]), rs[1]);
                for (line, old) in ws_old[1..].iter().enumerate() {
                    let qty = i64::from(quantities[line]);
                    let mut s = old.to_vec();
                    let q = i64_at(&s, 0) - qty;
                    put(&mut s, 0, if q >= 10 { q } else { q + 91 });
                    add(&mut s, 8, qty);
                    add(&mut s, 16, 1);
                    add(&mut s, 24, i64::from(remote[line]));
                    let tag = fold(base ^ next_o_id, rs[2 + line]);
                    s[32..40].copy_from_slice(&tag.to_le_bytes());
                    out.push(s);
                }
                out
            }
        }
    }
}

fn add(b: &mut [u8], off: usize, delta: i64) {
    let v = i64_at(b, off) + delta;
    put(b, off, v);
}

fn balance(v: &[u8]) -> i64 {
    i64_at(v, 0)
}

fn rec(v: i64) -> Vec<u8> {
    v.to_le_bytes().to_vec()
}

fn smallbank(kind: SmallBankKind, amount: i64, rs: &[&[u8]], ws: &[&[u8]]) -> Vec<Vec<u8>> {
    match kind {
        SmallBankKind::Balance => Vec::new(),
        SmallBankKind::DepositChecking => vec![rec(balance(ws[0]) + amount)],
        SmallBankKind::TransactSavings => {
            let s = balance(ws[0]);
            vec![rec(if s + amount < 0 { s } else { s + amount })]
        }
        SmallBankKind::Amalgamate => {
            let total = balance(ws[0]) + balance(ws[1]);
            vec![rec(0), rec(0), rec(balance(ws[2]) + total)]
        }
        SmallBankKind::WriteCheck => {
            let total = balance(rs[0]) + balance(ws[0]);
            let penalty = i64::from(total < amount);
            vec![rec(balance(ws[0]) - amount - penalty)]
        }
        SmallBankKind::SendPayment => {
            let a = balance(ws[0]);
            if a < amount {
                vec![rec(a), rec(balance(ws[1]))]
            } else {
                vec![rec(a - amount), rec(balance(ws[1]) + amount)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ycsb_write_depends_on_reads_and_old_value() {
        let l = Logic::Ycsb { record_len: 64 };
        let a = l.apply(1, &[&[1; 64]], &[&[2; 64]]);
        assert_eq!(a[0].len(), 64);
        assert_ne!(a, l.apply(1, &[&[9; 64]], &[&[2; 64]]));
        assert_ne!(a, l.apply(1, &[&[1; 64]], &[&[3; 64]]));
        assert_ne!(a, l.apply(2, &[&[1; 64]], &[&[2; 64]]));
        assert_eq!(a, l.apply(1, &[&[1; 64]], &[&[2; 64]]));
    }

    #[test]
    fn smallbank_conserves_money_where_it_should() {
        let v = |x: i64| x.to_le_bytes();
        let amal = Logic::SmallBank {
            kind: SmallBankKind::Amalgamate,
            amount: 0,
        };
        let out = amal.apply(0, &[], &[&v(10), &v(5), &v(7)]);
        assert_eq!(out.iter().map(|r| balance(r)).sum::<i64>(), 22);
        let pay = Logic::SmallBank {
            kind: SmallBankKind::SendPayment,
            amount: 4,
        };
        let out = pay.apply(0, &[], &[&v(10), &v(1)]);
        assert_eq!((balance(&out[0]), balance(&out[1])), (6, 5));
        let wc = Logic::SmallBank {
            kind: SmallBankKind::WriteCheck,
            amount: 50,
        };
        assert_eq!(balance(&wc.apply(0, &[&v(10)], &[&v(20)])[0]), -31);
    }

    #[test]
    fn new_order_advances_district_and_restocks() {
        let mut district = vec![0u8; 64];
        put(&mut district, 0, 3001);
        let mut stock = vec![0u8; 64];
        put(&mut stock, 0, 12);
        let l = Logic::NewOrder {
            quantities: vec![5],
            remote: vec![true],
        };
        let out = l.apply(9, &[&[0; 64], &[0; 64], &[0; 64]], &[&district, &stock]);
        assert_eq!(u64_at(&out[0], 0), 3002);
        assert_eq!(i64_at(&out[1], 0), 12 - 5 + 91);
        assert_eq!(i64_at(&out[1], 8), 5);
        assert_eq!(i64_at(&out[1], 24), 1);
    }
}
