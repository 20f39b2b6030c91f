//! `ccsim`: runs one concurrency control experiment (or every hybrid code of
//! a protocol) on the simulator and writes a CSV row per run plus a JSON
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, ValueEnum};

use ccsim::harness::{
    breakdown_table, csv_row, manifest, run_experiment, HarnessConfig, HarnessError, Mode, RunOutcome,
    CSV_HEADER,
};
use ccsim::txncore::ProtocolKind;
use ccsim::workload::{SmallBankConfig, TpccConfig, WorkloadConfig, YcsbConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolArg {
    Nowait,
    Waitdie,
    Occ,
    Mvcc,
    Sundial,
    Calvin,
}

impl From<ProtocolArg> for ProtocolKind {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Nowait => ProtocolKind::NoWait,
            ProtocolArg::Waitdie => ProtocolKind::WaitDie,
            ProtocolArg::Occ => ProtocolKind::Occ,
            ProtocolArg::Mvcc => ProtocolKind::Mvcc,
            ProtocolArg::Sundial => ProtocolKind::Sundial,
            ProtocolArg::Calvin => ProtocolKind::Calvin,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Rpc,
    Onesided,
    Hybrid,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Rpc => Mode::Rpc,
            ModeArg::Onesided => Mode::OneSided,
            ModeArg::Hybrid => Mode::Hybrid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum WorkloadArg {
    Smallbank,
    Ycsb,
    Tpcc,
}

/// Simulate RDMA-based distributed concurrency control protocols.
///
/// Flags override values from `--config`, which override the defaults.
#[derive(Debug, Parser)]
#[command(name = "ccsim", version)]
struct Cli {
    /// TOML harness config; see README for the keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Stage code, one 0 (RPC) or 1 (one-sided) per protocol stage,
    /// earliest stage first. Implies `--mode hybrid`.
    #[arg(long)]
    hybrid: Option<String>,
    #[arg(long, value_enum)]
    workload: Option<WorkloadArg>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    coroutines: Option<usize>,
    #[arg(long)]
    txns: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Probability that an access goes to the hot area (YCSB, SmallBank).
    #[arg(long)]
    hot_prob: Option<f64>,
    /// Simulated execution time per transaction, in microseconds.
    #[arg(long)]
    exec_us: Option<u64>,
    /// MVCC version slots per tuple.
    #[arg(long)]
    slots: Option<usize>,
    /// Copies of each log record: the primary plus `replicas - 1` backups.
    #[arg(long)]
    replicas: Option<usize>,
    /// Run every hybrid code of the protocol, one CSV row each.
    #[arg(long)]
    enumerate_hybrids: bool,
    /// Write committed transactions, one line each. With
    /// `--enumerate-hybrids` the code is appended to the file name.
    #[arg(long)]
    dump_history: Option<PathBuf>,
    /// Check the run for conflict serializability and replay equivalence.
    #[arg(long)]
    verify: bool,
    /// Directory for `results.csv` and `manifest.json`.
    #[arg(long, default_value = "ccsim-out")]
    out: PathBuf,
}

fn build_config(cli: &Cli) -> Result<HarnessConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => HarnessConfig::default(),
    };
    if let Some(p) = cli.protocol {
        cfg.protocol = p.into();
    }
    if let Some(m) = cli.mode {
        cfg.mode = m.into();
    }
    if let Some(code) = &cli.hybrid {
        cfg.hybrid = Some(code.clone());
        cfg.mode = Mode::Hybrid;
    }
    if let Some(w) = cli.workload {
        let same = matches!(
            (w, &cfg.workload),
            (WorkloadArg::Ycsb, WorkloadConfig::Ycsb(_))
                | (WorkloadArg::Smallbank, WorkloadConfig::Smallbank(_))
                | (WorkloadArg::Tpcc, WorkloadConfig::Tpcc(_))
        );
        if !same {
            cfg.workload = match w {
                WorkloadArg::Ycsb => WorkloadConfig::Ycsb(YcsbConfig::default()),
                WorkloadArg::Smallbank => WorkloadConfig::Smallbank(SmallBankConfig::default()),
                WorkloadArg::Tpcc => WorkloadConfig::Tpcc(TpccConfig::default()),
            };
        }
    }
    macro_rules! set {
        ($($field:ident).+ = $v:expr) => {
            if let Some(v) = $v {
                cfg.$($field).+ = v;
            }
        };
    }
    set!(nodes = cli.nodes);
    set!(threads = cli.threads);
    set!(coroutines = cli.coroutines);
    set!(txns = cli.txns);
    set!(seed = cli.seed);
    set!(params.slots = cli.slots);
    set!(params.replicas = cli.replicas);
    if let Some(p) = cli.hot_prob {
        if !(0.0..=1.0).contains(&p) {
            bail!("--hot-prob must be within 0..=1");
        }
        match &mut cfg.workload {
            WorkloadConfig::Ycsb(c) => c.hot_access_prob = p,
            WorkloadConfig::Smallbank(c) => c.hot_prob = p,
            WorkloadConfig::Tpcc(_) => bail!("--hot-prob does not apply to tpcc"),
        }
    }
    if let Some(us) = cli.exec_us {
        cfg.workload.set_exec_time(us);
    }
    Ok(cfg)
}

fn write_history(path: &Path, run: &RunOutcome) -> Result<()> {
    fs::write(path, run.history()).with_context(|| format!("writing {}", path.display()))
}

fn check(run: &RunOutcome) -> Result<()> {
    let v = run
        .verify()
        .map_err(|e| anyhow::anyhow!("{} [{}]: not serializable: {e}", run.config.protocol, run.hybrid))?;
    if !v.passed() {
        bail!(
            "{} [{}]: serial replay differs ({} read mismatches, {} keys)",
            run.config.protocol,
            run.hybrid,
            v.read_mismatches.len(),
            v.state_diff.len()
        );
    }
    println!("  serializable   ok ({} commits replayed)", v.order.len());
    Ok(())
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::ValueValidation, msg).exit()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli).unwrap_or_else(|e| usage_error(format!("{e:#}")));
    let check_cfg = if cli.enumerate_hybrids {
        // Every code is tried, so a given one is irrelevant.
        HarnessConfig {
            mode: Mode::OneSided,
            hybrid: None,
            ..cfg.clone()
        }
    } else {
        cfg.clone()
    };
    if let Err(e) = check_cfg.validate() {
        match e {
            HarnessError::Hybrid(_) | HarnessError::Config(_) | HarnessError::Sim(_) => usage_error(e),
            other => return Err(other.into()),
        }
    }

    let mut rows = Vec::new();
    let mut hybrids = Vec::new();
    let mut visit = |run: RunOutcome| -> Result<()> {
        print!("{}", breakdown_table(&run));
        if cli.verify {
            check(&run)?;
        }
        if let Some(path) = &cli.dump_history {
            let path = if cli.enumerate_hybrids {
                let mut name = path.as_os_str().to_owned();
                name.push(format!(".{}", run.hybrid));
                PathBuf::from(name)
            } else {
                path.clone()
            };
            write_history(&path, &run)?;
        }
        rows.push(csv_row(&run.summary()));
        hybrids.push(run.hybrid.to_string());
        Ok(())
    };
    if cli.enumerate_hybrids {
        for code in ccsim::txncore::enumerate_hybrids(cfg.protocol) {
            let c = HarnessConfig {
                mode: Mode::Hybrid,
                hybrid: Some(code.to_string()),
                ..check_cfg.clone()
            };
            visit(run_experiment(&c)?)?;
        }
    } else {
        visit(run_experiment(&cfg)?)?;
    }

    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    let csv_path = cli.out.join("results.csv");
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    let json_path = cli.out.join("manifest.json");
    let m = serde_json::to_string_pretty(&manifest(&cfg, &hybrids))?;
    fs::write(&json_path, m + "\n").with_context(|| format!("writing {}", json_path.display()))?;
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}
