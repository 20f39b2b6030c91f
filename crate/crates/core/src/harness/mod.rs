//! Experiment harness: builds a cluster from a config, runs one protocol
//! over a generated workload, and checks and summarizes the outcome.

mod report;

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use report::{breakdown_table, csv_row, input_hash, manifest, Summary, CSV_HEADER};

use crate::netsim::{ClusterShape, Endpoint, LatencyModel, Sim, SimError, SimReport, SimTime};
use crate::protocols::{self, Calvin};
use crate::store::{GlobalKey, Store, StoreError, Tuple};
use crate::txncore::{drive, Env, HybridCode, HybridError, LogRecord, ProtocolKind, ProtocolParams, RunStats};
use crate::verify::{self, check_conflict_serializable, CommitRecord, HistoryError};
use crate::workload::{SmallBankConfig, TxnSpec, WorkloadConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Rpc,
    OneSided,
    Hybrid,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Rpc => "rpc",
            Mode::OneSided => "onesided",
            Mode::Hybrid => "hybrid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub protocol: ProtocolKind,
    pub mode: Mode,
    /// Stage code, one digit per stage, 1 for one-sided. Implies hybrid mode.
    pub hybrid: Option<String>,
    pub workload: WorkloadConfig,
    pub nodes: usize,
    pub threads: usize,
    pub coroutines: usize,
    /// Transactions in the whole run, spread round-robin over coordinators.
    pub txns: usize,
    pub seed: u64,
    pub latency: LatencyModel,
    pub params: ProtocolParams,
    pub time_limit: Option<SimTime>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            protocol: ProtocolKind::NoWait,
            mode: Mode::OneSided,
            hybrid: None,
            workload: WorkloadConfig::Smallbank(SmallBankConfig::default()),
            nodes: 4,
            threads: 2,
            coroutines: 4,
            txns: 2000,
            seed: 1,
            latency: LatencyModel::default(),
            params: ProtocolParams::default(),
            time_limit: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Hybrid(#[from] HybridError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl HarnessConfig {
    pub fn shape(&self) -> ClusterShape {
        ClusterShape::new(self.nodes, self.threads, self.coroutines)
    }

    /// The mode reported for this run: a given code always means hybrid.
    pub fn effective_mode(&self) -> Mode {
        if self.hybrid.is_some() {
            Mode::Hybrid
        } else {
            self.mode
        }
    }

    pub fn hybrid_code(&self) -> Result<HybridCode, HarnessError> {
        match (&self.hybrid, self.mode) {
            (Some(code), _) => Ok(HybridCode::parse(self.protocol, code)?),
            (None, Mode::Rpc) => Ok(HybridCode::rpc(self.protocol)),
            (None, Mode::OneSided) => Ok(HybridCode::one_sided(self.protocol)),
            (None, Mode::Hybrid) => Err(HarnessError::Config("hybrid mode needs a stage code".into())),
        }
    }

    /// Versions per tuple: only MVCC keeps more than one.
    pub fn slots(&self) -> usize {
        if self.protocol == ProtocolKind::Mvcc {
            self.params.slots
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.shape().validate()?;
        self.hybrid_code()?;
        if self.slots() == 0 {
            return Err(HarnessError::Config("slots must be at least 1".into()));
        }
        if self.params.replicas == 0 || self.params.replicas > self.nodes {
            return Err(HarnessError::Config(format!(
                "replicas must be in 1..={} for {} nodes",
                self.nodes, self.nodes
            )));
        }
        Ok(())
    }
}

/// Everything a finished run leaves behind.
pub struct RunOutcome {
    pub config: HarnessConfig,
    pub hybrid: HybridCode,
    pub report: SimReport,
    pub stats: RunStats,
    pub specs: Vec<TxnSpec>,
    /// CALVIN only: per node, per epoch, transaction ids in schedule order.
    pub schedules: Option<Vec<Vec<Vec<u64>>>>,
    sim: Sim,
    store: Rc<Store>,
}

/// Result of checking a run against the serializability oracle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verification {
    pub order: Vec<u64>,
    /// Reads whose recorded version is not the one the serial replay saw.
    pub read_mismatches: Vec<(u64, GlobalKey)>,
    /// Keys whose final simulated record differs from the serial replay.
    pub state_diff: Vec<GlobalKey>,
}

impl Verification {
    pub fn passed(&self) -> bool {
        self.read_mismatches.is_empty() && self.state_diff.is_empty()
    }
}

pub fn run_experiment(config: &HarnessConfig) -> Result<RunOutcome, HarnessError> {
    config.validate()?;
    let hybrid = config.hybrid_code()?;
    let shape = config.shape();
    let sim = Sim::new(shape, config.latency, config.seed)?;
    if let Some(limit) = config.time_limit {
        sim.set_time_limit(limit);
    }
    let tables = config.workload.tables(&shape);
    let store = Rc::new(Store::create(&sim, &tables, config.slots())?);
    for gk in store.keys().collect::<Vec<_>>() {
        let len = store.spec(gk.table)?.record_len;
        store.load(&sim, gk, &config.workload.initial_record(gk, len))?;
    }
    let specs = config.workload.generate(&shape, config.seed, config.txns);
    let max_record = tables.iter().map(|t| t.record_len).max().unwrap_or(0);
    let log_slot = LogRecord::encoded_len(config.workload.max_writes(), max_record);
    let env = Env::new(sim.clone(), store.clone(), hybrid, config.params.clone(), log_slot, config.seed)?;
    protocols::register_handlers(&env);

    let shared: Vec<Rc<TxnSpec>> = specs.iter().cloned().map(Rc::new).collect();
    let calvin = match protocols::attempt_fn(config.protocol) {
        Some(attempt) => {
            let mut per: BTreeMap<Endpoint, Vec<Rc<TxnSpec>>> = BTreeMap::new();
            for t in shared {
                per.entry(t.arrival).or_default().push(t);
            }
            for (ep, txns) in per {
                let co = env.coordinator(ep);
                sim.spawn(ep, "coordinator", drive(co, txns, attempt));
            }
            None
        }
        None => Some(Calvin::spawn(&env, shared)?),
    };

    let result = sim.run_until_quiescent();
    let schedules = calvin.map(|c| c.schedules());
    let stats = env.stats.take();
    sim.shutdown();
    let report = result?;
    Ok(RunOutcome {
        config: config.clone(),
        hybrid,
        report,
        stats,
        specs,
        schedules,
        sim,
        store,
    })
}

impl RunOutcome {
    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn commits(&self) -> &[CommitRecord] {
        &self.stats.commits
    }

    pub fn initial_record(&self, gk: GlobalKey) -> Vec<u8> {
        let len = self.store.spec(gk.table).expect("known table").record_len;
        self.config.workload.initial_record(gk, len)
    }

    /// Checks conflict serializability, then replays the commits serially in
    /// the checker's order and compares with the final store.
    pub fn verify(&self) -> Result<Verification, HistoryError> {
        let order = check_conflict_serializable(self.commits())?;
        Ok(self.replay_in(order))
    }

    /// Replays the commits in `order` and compares with the final store.
    pub fn replay_in(&self, order: Vec<u64>) -> Verification {
        let specs: HashMap<u64, &TxnSpec> = self.specs.iter().map(|s| (s.id, s)).collect();
        let records: HashMap<u64, &CommitRecord> = self.commits().iter().map(|r| (r.txn_id, r)).collect();
        let replay = verify::replay_serial(&order, &specs, Some(&records), |k| self.initial_record(k));
        let state_diff = verify::diff_against_store(&self.sim, &self.store, &replay.state, |k| self.initial_record(k))
            .expect("store keys are readable");
        Verification {
            order,
            read_mismatches: replay.read_mismatches,
            state_diff,
        }
    }

    /// Commit ids sorted by commit key: commit_tts for SUNDIAL, the schedule
    /// timestamp for CALVIN.
    pub fn commit_key_order(&self) -> Vec<u64> {
        verify::order_by_commit_key(self.commits())
    }

    /// Every tuple of the final store, in key order.
    pub fn final_tuples(&self) -> Vec<(GlobalKey, Tuple)> {
        self.store
            .keys()
            .map(|k| (k, self.store.read_tuple(&self.sim, k).expect("store keys are readable")))
            .collect()
    }

    pub fn history(&self) -> String {
        verify::format_history(self.commits())
    }

    pub fn summary(&self) -> Summary {
        Summary::of(self)
    }
}

/// Runs every hybrid code of the configured protocol, one after another,
/// handing each finished run to `visit`.
pub fn enumerate_hybrids(
    config: &HarnessConfig,
    mut visit: impl FnMut(RunOutcome) -> Result<(), HarnessError>,
) -> Result<(), HarnessError> {
    for code in crate::txncore::enumerate_hybrids(config.protocol) {
        let mut c = config.clone();
        c.mode = Mode::Hybrid;
        c.hybrid = Some(code.to_string());
        visit(run_experiment(&c)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
