use std::cell::{Cell, RefCell};
use std::rc::Rc;

use futures::future::{join_all, LocalBoxFuture};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::context::{AbortReason, TxnContext, TxnStatus};
use super::hybrid::{HybridCode, Primitive, ProtocolKind, Stage};
use super::log::{LogRecord, LogSpace};
use super::stats::{RunStats, TxnSample, WaitEvent};
use super::timestamp::{Clock, Timestamp};
use super::wire::{Dec, Enc};
use crate::netsim::{
    Completion, DoorbellBatch, Endpoint, HandlerCtx, HandlerId, HandlerReply, NodeId, NodeMemory, QueuePair, Sim,
    SimError, SimTime, VerbRequest,
};
use crate::store::{GlobalKey, OffsetCache, Store, TupleLayout};
use crate::workload::{mix64, TxnSpec};

pub const LOG_HANDLER: HandlerId = 1;
pub const RECLAIM_HANDLER: HandlerId = 2;

/// Knobs shared by the protocols.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolParams {
    /// Version slots per tuple for MVCC; other protocols use one.
    pub slots: usize,
    /// Replication factor: 1 primary plus `replicas - 1` log backups.
    pub replicas: usize,
    /// SUNDIAL renewal attempts per read-set entry before aborting.
    pub max_renew: u32,
    /// Treat every remote tuple offset as already cached.
    pub warm_offset_cache: bool,
    /// Backoff after the n-th abort is uniform in `0..=base << min(n-1, max_exp)`.
    pub backoff_base: SimTime,
    pub backoff_max_exp: u32,
    /// Attempts per transaction before giving up; `None` retries forever.
    pub max_attempts: Option<u32>,
    /// MVCC: retry the read on a double-read mismatch instead of aborting.
    pub retry_double_read: bool,
    /// Commits between lazy log-reclamation notices.
    pub reclaim_every: u64,
    /// CALVIN transactions per sequencer per epoch.
    pub calvin_batch: usize,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            slots: 4,
            replicas: 3,
            max_renew: 8,
            warm_offset_cache: true,
            backoff_base: 4,
            backoff_max_exp: 6,
            max_attempts: None,
            retry_double_read: false,
            reclaim_every: 64,
            calvin_batch: 100,
        }
    }
}

/// Where a tuple sits in its owner's memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TupleRef {
    pub offset: u64,
    pub layout: TupleLayout,
}

/// Tuple operation run atomically on the owner's memory, either by an RPC
/// handler or directly for a local key. Arguments and reply are [`Enc`]
/// encoded.
pub type TupleFn = fn(&mut NodeMemory, TupleRef, &mut Dec) -> Vec<u8>;

/// Everything coordinators of one run share.
pub struct Env {
    pub sim: Sim,
    pub store: Rc<Store>,
    pub protocol: ProtocolKind,
    pub hybrid: HybridCode,
    pub params: ProtocolParams,
    pub logs: LogSpace,
    pub seed: u64,
    pub stats: RefCell<RunStats>,
}

impl Env {
    pub fn new(
        sim: Sim,
        store: Rc<Store>,
        hybrid: HybridCode,
        params: ProtocolParams,
        log_slot_bytes: u64,
        seed: u64,
    ) -> Result<Rc<Env>, SimError> {
        let logs = LogSpace::create(&sim, params.replicas, log_slot_bytes)?;
        for node in 0..sim.shape().nodes {
            sim.register_handler(
                node,
                LOG_HANDLER,
                Rc::new(|ctx: &HandlerCtx, payload: &[u8]| {
                    let mut d = Dec::new(payload);
                    let off = d.u64();
                    let bytes = d.bytes();
                    ctx.sim().with_memory(ctx.node(), |m| m.write(off, bytes));
                    HandlerReply::Reply(Vec::new())
                }),
            );
            // Backups would truncate acknowledged log space here; recovery
            // is not modeled, so the notice only costs its message.
            sim.register_handler(node, RECLAIM_HANDLER, Rc::new(|_: &HandlerCtx, _: &[u8]| HandlerReply::Reply(Vec::new())));
        }
        Ok(Rc::new(Env {
            sim,
            store,
            protocol: hybrid.protocol,
            hybrid,
            params,
            logs,
            seed,
            stats: RefCell::new(RunStats::default()),
        }))
    }

    /// Registers `f` as RPC handler `id` on every node. Requests start with
    /// the packed key; replies start with the tuple offset.
    pub fn register_tuple_handler(&self, id: HandlerId, f: TupleFn) {
        for node in 0..self.sim.shape().nodes {
            let store = self.store.clone();
            self.sim.register_handler(
                node,
                id,
                Rc::new(move |ctx: &HandlerCtx, payload: &[u8]| {
                    let mut d = Dec::new(payload);
                    let gk = GlobalKey::unpack(d.u64());
                    let (owner, offset) = store.tuple_addr(gk).expect("RPC for an unknown key");
                    assert_eq!(owner, ctx.node(), "RPC for {gk} sent to a non-owner");
                    let t = TupleRef {
                        offset,
                        layout: store.layout(gk.table).unwrap(),
                    };
                    let body = ctx.sim().with_memory(owner, |m| f(m, t, &mut d));
                    let mut reply = offset.to_le_bytes().to_vec();
                    reply.extend_from_slice(&body);
                    HandlerReply::Reply(reply)
                }),
            );
        }
    }

    pub fn coordinator(self: &Rc<Self>, ep: Endpoint) -> Coordinator {
        let cache = if self.params.warm_offset_cache {
            OffsetCache::preloaded()
        } else {
            OffsetCache::cold()
        };
        let ep_code = ((ep.node as u64) << 16) | ((ep.thread as u64) << 8) | ep.coro as u64;
        Coordinator {
            env: self.clone(),
            ep,
            clock: RefCell::new(Clock::new(ep).expect("cluster shape validated")),
            cache: RefCell::new(cache),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(mix64(self.seed ^ mix64(ep_code)))),
            log_seq: Cell::new(0),
            commits: Cell::new(0),
        }
    }
}

/// A transaction-coordinating coroutine. Methods take `&self` so the
/// per-key requests of one stage can be in flight together.
pub struct Coordinator {
    pub env: Rc<Env>,
    pub ep: Endpoint,
    clock: RefCell<Clock>,
    cache: RefCell<OffsetCache>,
    rng: RefCell<ChaCha8Rng>,
    log_seq: Cell<u64>,
    commits: Cell<u64>,
}

impl Coordinator {
    pub fn sim(&self) -> &Sim {
        &self.env.sim
    }

    pub fn store(&self) -> &Store {
        &self.env.store
    }

    pub fn now(&self) -> SimTime {
        self.env.sim.now()
    }

    pub fn primitive(&self, stage: Stage) -> Primitive {
        self.env.hybrid.primitive(stage)
    }

    pub fn next_ts(&self) -> Timestamp {
        self.clock.borrow_mut().next()
    }

    pub fn adjust_clock(&self, observed: u64) {
        self.clock.borrow_mut().adjust(Timestamp(observed));
    }

    pub fn clock(&self) -> Clock {
        self.clock.borrow().clone()
    }

    pub fn layout(&self, key: GlobalKey) -> TupleLayout {
        self.store().layout(key.table).expect("key validated at context creation")
    }

    pub fn is_local(&self, node: NodeId) -> bool {
        node == self.ep.node
    }

    /// Charges one local operation on this coroutine's CPU, then runs `f` on
    /// `node`'s memory atomically.
    pub async fn local<R>(&self, node: NodeId, f: impl FnOnce(&mut NodeMemory) -> R) -> R {
        self.sim().compute(self.ep, self.env.sim.latency().local_op).await;
        self.sim().with_memory(node, f)
    }

    /// Runs a tuple operation at the key's owner: directly when local,
    /// otherwise as RPC `id`. Returns the tuple offset and the reply body.
    pub async fn call_tuple(&self, key: GlobalKey, node: NodeId, id: HandlerId, f: TupleFn, args: Vec<u8>) -> (u64, Vec<u8>) {
        if self.is_local(node) {
            let (_, offset) = self.store().tuple_addr(key).unwrap();
            let t = TupleRef {
                offset,
                layout: self.layout(key),
            };
            let body = self.local(node, |m| f(m, t, &mut Dec::new(&args))).await;
            return (offset, body);
        }
        let mut payload = key.pack().to_le_bytes().to_vec();
        payload.extend_from_slice(&args);
        let reply = self
            .sim()
            .rpc_call(self.ep, node, id, payload)
            .await
            .unwrap_or_else(|e| panic!("{e}"));
        let offset = u64::from_le_bytes(reply[..8].try_into().unwrap());
        self.cache.borrow_mut().insert(key, offset);
        (offset, reply[8..].to_vec())
    }

    /// Offset of a remote tuple for one-sided access. `known` is an offset
    /// captured earlier in the transaction. A cold miss READs the owner's
    /// directory cell.
    pub async fn locate(&self, key: GlobalKey, node: NodeId, known: Option<u64>) -> Result<u64, AbortReason> {
        if let Some(off) = known {
            return Ok(off);
        }
        if self.is_local(node) || self.env.params.warm_offset_cache {
            return Ok(self.store().tuple_addr(key).unwrap().1);
        }
        let cached = self.cache.borrow().get(key);
        if let Some(off) = cached {
            return Ok(off);
        }
        let (_, cell) = self.store().directory_addr(key).unwrap();
        let c = self.post(node, vec![VerbRequest::read(cell, 8)]).await?;
        let off = u64::from_le_bytes(c.read(0).try_into().unwrap());
        self.cache.borrow_mut().record_miss(key, off);
        Ok(off)
    }

    pub fn offset_cache_misses(&self) -> u64 {
        self.cache.borrow().misses()
    }

    /// Posts one doorbell batch to `node`.
    pub async fn post(&self, node: NodeId, requests: Vec<VerbRequest>) -> Result<Completion, AbortReason> {
        let batch = DoorbellBatch {
            qp: QueuePair::between(self.ep, node),
            requests,
        };
        self.sim().post_batch(self.ep, batch).await.map_err(|_| AbortReason::Fault)
    }

    /// Replicates the write set to every backup and waits for all acks.
    pub async fn log(&self, ctx: &TxnContext) {
        let backups = self.env.logs.backups(self.ep.node);
        if ctx.ws.is_empty() || backups.is_empty() {
            return;
        }
        let record = LogRecord {
            ctts: ctx.ctts.0,
            writes: ctx.ws.iter().map(|e| (e.key, e.new.clone())).collect(),
        }
        .encode();
        assert!(record.len() as u64 <= self.env.logs.slot_bytes(), "log record larger than its slot");
        let seq = self.log_seq.get();
        self.log_seq.set(seq + 1);
        let one_sided = self.primitive(Stage::Log) == Primitive::OneSided;
        join_all(backups.iter().map(|&b| {
            let off = self.env.logs.slot(b, self.ep, seq);
            let record = record.clone();
            async move {
                if one_sided {
                    self.post(b, vec![VerbRequest::write(off, record)]).await.expect("log slot in bounds");
                } else {
                    let payload = Enc::new().u64(off).bytes(&record).finish();
                    self.sim().rpc_call(self.ep, b, LOG_HANDLER, payload).await.unwrap();
                }
            }
        }))
        .await;
        self.env.stats.borrow_mut().log_writes += backups.len() as u64;
    }

    pub async fn backoff(&self, attempts: u32) {
        let p = &self.env.params;
        let exp = attempts.saturating_sub(1).min(p.backoff_max_exp);
        let bound = p.backoff_base << exp;
        let d = self.rng.borrow_mut().gen_range(0..=bound);
        self.sim().sleep(d).await;
    }

    pub fn record_wait(&self, waiter: u64, holder: u64) {
        self.env.stats.borrow_mut().waits.push(WaitEvent { waiter, holder });
    }

    fn after_commit(&self) {
        let n = self.commits.get() + 1;
        self.commits.set(n);
        let every = self.env.params.reclaim_every;
        if every == 0 || n % every != 0 {
            return;
        }
        let backups = self.env.logs.backups(self.ep.node);
        for &b in &backups {
            // Fire and forget: the ticket is dropped, the reply is ignored.
            drop(self.sim().rpc_call(self.ep, b, RECLAIM_HANDLER, Vec::new()));
        }
        self.env.stats.borrow_mut().reclaim_notices += backups.len() as u64;
    }
}

/// One attempt of a transaction. `Ok` carries the commit key; on `Err` the
/// attempt must already have released every lock it took.
pub type AttemptFn = for<'a> fn(&'a Coordinator, &'a mut TxnContext) -> LocalBoxFuture<'a, Result<u64, AbortReason>>;

/// Runs `txns` one after another on coordinator `co`, retrying each until it
/// commits or exhausts `max_attempts`.
pub async fn drive(co: Coordinator, txns: Vec<Rc<TxnSpec>>, attempt: AttemptFn) {
    let env = co.env.clone();
    for spec in txns {
        let mut ctx = TxnContext::new(spec, env.hybrid, &env.store).expect("generated keys exist");
        let start = co.now();
        loop {
            // WAITDIE keeps its first timestamp so it eventually becomes the
            // oldest transaction.
            let ctts = if env.protocol == ProtocolKind::WaitDie && ctx.attempts > 0 {
                ctx.ctts
            } else {
                co.next_ts()
            };
            ctx.begin_attempt(ctts);
            match attempt(&co, &mut ctx).await {
                Ok(commit_key) => {
                    debug_assert!(ctx.ws.iter().all(|e| !e.locked));
                    ctx.status = TxnStatus::Committed;
                    ctx.ledger.close(co.now());
                    let record = ctx.commit_record(commit_key);
                    let mut stats = env.stats.borrow_mut();
                    stats.samples.push(TxnSample {
                        id: ctx.spec.id,
                        start,
                        end: co.now(),
                        attempts: ctx.attempts,
                        ledger: ctx.ledger.clone(),
                    });
                    stats.commits.push(record);
                    drop(stats);
                    co.after_commit();
                    break;
                }
                Err(reason) => {
                    debug_assert!(ctx.ws.iter().all(|e| !e.locked), "{reason:?} leaked a lock");
                    ctx.status = TxnStatus::Aborted(reason);
                    let stage = ctx.failed_in.or(ctx.ledger.current()).unwrap_or(Stage::Execute);
                    *env.stats.borrow_mut().aborts.entry((stage, reason)).or_default() += 1;
                    if env.params.max_attempts.is_some_and(|m| ctx.attempts >= m) {
                        env.stats.borrow_mut().gave_up += 1;
                        break;
                    }
                    ctx.ledger.enter(Stage::Backoff, co.now());
                    co.backoff(ctx.attempts).await;
                }
            }
        }
    }
}
