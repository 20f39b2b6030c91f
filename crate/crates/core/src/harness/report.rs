//! Summary rows, the CSV schema, the per-stage breakdown and the run
//! manifest.

use std::fmt::Write;

use sha2::{Digest, Sha256};

use super::{HarnessConfig, RunOutcome};
use crate::txncore::Stage;

/// Column order is part of the output contract.
pub const CSV_HEADER: &str = "protocol,mode,hybrid,workload,seed,txns,commits,aborts,abort_rate,round_trips_per_txn,mean_latency,p50,p99,stage_read,stage_lock,stage_validate,stage_log,stage_commit,stage_release";

/// CSV column a ledger stage is reported under, if any. Execution is
/// counted with commit; backoff and input broadcast have no column.
fn column(stage: Stage) -> Option<usize> {
    Some(match stage {
        Stage::Fetch | Stage::Read | Stage::Forward => 0,
        Stage::Lock => 1,
        Stage::Validate | Stage::Renew => 2,
        Stage::Log => 3,
        Stage::Commit | Stage::Execute => 4,
        Stage::Release => 5,
        Stage::Broadcast | Stage::Backoff => return None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub protocol: String,
    pub mode: String,
    pub hybrid: String,
    pub workload: String,
    pub seed: u64,
    pub txns: usize,
    pub commits: u64,
    pub aborts: u64,
    pub abort_rate: f64,
    pub round_trips_per_txn: f64,
    pub mean_latency: f64,
    pub p50: u64,
    pub p99: u64,
    /// Mean per committed txn of each ledger stage.
    pub stage_means: Vec<(Stage, f64)>,
    /// The six CSV stage columns.
    pub columns: [f64; 6],
    /// Committed transactions per unit of sim time.
    pub throughput: f64,
    pub end_time: u64,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl Summary {
    pub fn of(run: &RunOutcome) -> Summary {
        let s = &run.stats;
        let commits = s.samples.len() as u64;
        let aborts = s.abort_count();
        let mut lat: Vec<u64> = s.samples.iter().map(|x| x.latency()).collect();
        lat.sort_unstable();
        let per = |x: f64| if commits == 0 { 0.0 } else { x / commits as f64 };
        let stage_means: Vec<(Stage, f64)> = Stage::ALL
            .iter()
            .map(|&st| (st, per(s.samples.iter().map(|x| x.ledger.get(st)).sum::<u64>() as f64)))
            .collect();
        let mut columns = [0.0; 6];
        for &(st, m) in &stage_means {
            if let Some(c) = column(st) {
                columns[c] += m;
            }
        }
        let end = run.report.end_time;
        Summary {
            protocol: run.config.protocol.name().into(),
            mode: run.config.effective_mode().name().into(),
            hybrid: run.hybrid.to_string(),
            workload: run.config.workload.name().into(),
            seed: run.config.seed,
            txns: run.config.txns,
            commits,
            aborts,
            abort_rate: if commits + aborts == 0 { 0.0 } else { aborts as f64 / (commits + aborts) as f64 },
            round_trips_per_txn: per(run.report.round_trips as f64),
            mean_latency: per(lat.iter().sum::<u64>() as f64),
            p50: percentile(&lat, 50.0),
            p99: percentile(&lat, 99.0),
            stage_means,
            columns,
            throughput: if end == 0 { 0.0 } else { commits as f64 / end as f64 },
            end_time: end,
        }
    }
}

/// One CSV line, without the trailing newline. Floats use four decimals.
pub fn csv_row(s: &Summary) -> String {
    let mut out = format!(
        "{},{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{},{}",
        s.protocol, s.mode, s.hybrid, s.workload, s.seed, s.txns, s.commits, s.aborts, s.abort_rate, s.round_trips_per_txn, s.mean_latency, s.p50, s.p99
    );
    for c in s.columns {
        write!(out, ",{c:.4}").unwrap();
    }
    out
}

/// Human-readable report: headline numbers, per-stage mean latency and the
/// abort taxonomy.
pub fn breakdown_table(run: &RunOutcome) -> String {
    let s = Summary::of(run);
    let mut out = String::new();
    writeln!(out, "{} {} [{}] on {}, seed {}", s.protocol, s.mode, s.hybrid, s.workload, s.seed).unwrap();
    writeln!(out, "  committed      {} of {}", s.commits, s.txns).unwrap();
    writeln!(out, "  aborts         {} (rate {:.4})", s.aborts, s.abort_rate).unwrap();
    writeln!(out, "  throughput     {:.4} txn per time unit over {}", s.throughput, s.end_time).unwrap();
    writeln!(out, "  round trips    {:.4} per txn", s.round_trips_per_txn).unwrap();
    writeln!(out, "  latency        mean {:.4}  p50 {}  p99 {}", s.mean_latency, s.p50, s.p99).unwrap();
    writeln!(out, "  stage breakdown (mean per committed txn)").unwrap();
    let mut total = 0.0;
    for &(st, m) in &s.stage_means {
        if m > 0.0 {
            writeln!(out, "    {:<10} {m:>12.4}", format!("{st:?}")).unwrap();
        }
        total += m;
    }
    writeln!(out, "    {:<10} {total:>12.4}", "total").unwrap();
    if !run.stats.aborts.is_empty() {
        writeln!(out, "  aborts by stage and reason").unwrap();
        for ((st, reason), n) in &run.stats.aborts {
            writeln!(out, "    {:<10} {:<14} {n}", format!("{st:?}"), format!("{reason:?}")).unwrap();
        }
    }
    out
}

/// SHA-256 of `bytes` framed as a git blob.
pub fn input_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Run manifest: the config, its seed, and a content hash of the config.
pub fn manifest(config: &HarnessConfig, hybrids: &[String]) -> serde_json::Value {
    let canonical = serde_json::to_vec(config).expect("configs serialize");
    serde_json::json!({
        "config": config,
        "seed": config.seed,
        "input_hash": input_hash(&canonical),
        "hybrids": hybrids,
        "csv_header": CSV_HEADER,
        "version": env!("CARGO_PKG_VERSION"),
    })
}
