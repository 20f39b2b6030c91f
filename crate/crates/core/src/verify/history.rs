use std::fmt::Write;

use super::CommitRecord;
use crate::store::GlobalKey;

/// One line per commit: `txn_id,commit_key,reads,writes` where reads are
/// `table:key@wts` and writes `table:key`, each list `;`-separated.
pub fn format_history(records: &[CommitRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let reads: Vec<String> = r.reads.iter().map(|(k, w)| format!("{k}@{w}")).collect();
        let writes: Vec<String> = r.writes.iter().map(|k| k.to_string()).collect();
        writeln!(out, "{},{},{},{}", r.txn_id, r.commit_key, reads.join(";"), writes.join(";")).unwrap();
    }
    out
}

fn parse_key(s: &str) -> Option<GlobalKey> {
    let (t, k) = s.split_once(':')?;
    Some(GlobalKey::new(t.parse().ok()?, k.parse().ok()?))
}

fn list(s: &str) -> impl Iterator<Item = &str> {
    s.split(';').filter(|p| !p.is_empty())
}

/// Inverse of [`format_history`]; returns the 1-based line of the first
/// malformed record on failure.
pub fn parse_history(text: &str) -> Result<Vec<CommitRecord>, usize> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = n + 1;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad);
            }
            let reads = list(f[2])
                .map(|p| {
                    let (k, w) = p.split_once('@')?;
                    Some((parse_key(k)?, w.parse().ok()?))
                })
                .collect::<Option<Vec<_>>>()
                .ok_or(bad)?;
            let writes = list(f[3]).map(parse_key).collect::<Option<Vec<_>>>().ok_or(bad)?;
            Ok(CommitRecord {
                txn_id: f[0].parse().map_err(|_| bad)?,
                commit_key: f[1].parse().map_err(|_| bad)?,
                reads,
                writes,
            })
        })
        .collect()
}
