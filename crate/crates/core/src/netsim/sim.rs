use std::cell::{Cell, RefCell, RefMut};
use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::latency::LatencyModel;
use super::memory::{NodeMemory, Region};
use super::verbs::{Completion, DoorbellBatch, VerbFault, VerbKind, VerbResult};
use super::{CoroId, HandlerId, NodeId, SimError, SimTime, ThreadId};

const DEFAULT_NODE_CAPACITY: u64 = 1 << 32;

/// Coroutine slot used for events raised by a node's event-handling loop.
pub const EVENT_LOOP_CORO: CoroId = CoroId::MAX;

/// Identity of a coroutine: machine, worker thread and coroutine slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub node: NodeId,
    pub thread: ThreadId,
    pub coro: CoroId,
}

impl Endpoint {
    pub const fn new(node: NodeId, thread: ThreadId, coro: CoroId) -> Self {
        Endpoint { node, thread, coro }
    }

    pub const fn event_loop(node: NodeId, thread: ThreadId) -> Self {
        Endpoint {
            node,
            thread,
            coro: EVENT_LOOP_CORO,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.coro == EVENT_LOOP_CORO {
            write!(f, "n{}.t{}.ev", self.node, self.thread)
        } else {
            write!(f, "n{}.t{}.c{}", self.node, self.thread, self.coro)
        }
    }
}

/// Number of machines, worker threads per machine and transaction
/// coroutines per thread.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterShape {
    pub nodes: usize,
    pub threads_per_node: usize,
    pub coroutines_per_thread: usize,
}

impl ClusterShape {
    pub fn new(nodes: usize, threads_per_node: usize, coroutines_per_thread: usize) -> Self {
        ClusterShape {
            nodes,
            threads_per_node,
            coroutines_per_thread,
        }
    }

    /// Every id must fit the 8-bit fields of a packed timestamp.
    pub fn validate(&self) -> Result<(), SimError> {
        for (what, v) in [
            ("nodes", self.nodes),
            ("threads_per_node", self.threads_per_node),
            ("coroutines_per_thread", self.coroutines_per_thread),
        ] {
            if v == 0 || v > 256 {
                return Err(SimError::Config(format!("{what} must be in 1..=256, got {v}")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, ep: Endpoint) -> bool {
        ep.node < self.nodes
            && ep.thread < self.threads_per_node
            && (ep.coro < self.coroutines_per_thread || ep.coro == EVENT_LOOP_CORO)
    }

    pub fn coordinators(&self) -> impl Iterator<Item = Endpoint> + '_ {
        (0..self.nodes).flat_map(move |n| {
            (0..self.threads_per_node)
                .flat_map(move |t| (0..self.coroutines_per_thread).map(move |c| Endpoint::new(n, t, c)))
        })
    }

    pub fn coordinator_count(&self) -> usize {
        self.nodes * self.threads_per_node * self.coroutines_per_thread
    }
}

/// One-shot value cell shared between the simulator and an awaiting task.
pub(crate) struct Slot<T> {
    value: RefCell<Option<T>>,
    waker: RefCell<Option<Waker>>,
}

impl<T> Slot<T> {
    fn new() -> Rc<Self> {
        Rc::new(Slot {
            value: RefCell::new(None),
            waker: RefCell::new(None),
        })
    }

    fn fill(&self, value: T) {
        *self.value.borrow_mut() = Some(value);
        if let Some(w) = self.waker.borrow_mut().take() {
            w.wake();
        }
    }

    fn is_filled(&self) -> bool {
        self.value.borrow().is_some()
    }
}

/// Future resolved by the simulator: a verb completion, an RPC reply or a
/// timer. Network work is posted when the ticket is created, not when it is
/// first polled.
pub struct Ticket<T> {
    slot: Rc<Slot<T>>,
}

impl<T> Ticket<T> {
    fn new(slot: Rc<Slot<T>>) -> Self {
        Ticket { slot }
    }

    pub fn is_ready(&self) -> bool {
        self.slot.is_filled()
    }
}

impl<T> Future for Ticket<T> {
    type Output = T;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<T> {
        if let Some(v) = self.slot.value.borrow_mut().take() {
            return Poll::Ready(v);
        }
        *self.slot.waker.borrow_mut() = Some(cx.waker().clone());
        Poll::Pending
    }
}

pub type CompletionTicket = Ticket<Result<Completion, VerbFault>>;
pub type RpcTicket = Ticket<Result<Vec<u8>, RpcError>>;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum RpcError {
    #[error("no handler {handler} registered on node {node}")]
    UnknownHandler { node: NodeId, handler: HandlerId },
}

/// Result of running an RPC handler: reply now, or keep the [`ReplyToken`]
/// and answer later from the node's event loop.
pub enum HandlerReply {
    Reply(Vec<u8>),
    Deferred,
}

pub type Handler = Rc<dyn Fn(&HandlerCtx, &[u8]) -> HandlerReply>;

struct RpcState {
    src: Endpoint,
    dst: NodeId,
    handler: HandlerId,
    payload: Vec<u8>,
    slot: Rc<Slot<Result<Vec<u8>, RpcError>>>,
    replied: Cell<bool>,
    /// Set once the handler holds a CPU slot starting at its next arrival.
    reserved: Cell<bool>,
}

/// Handle for answering a deferred RPC.
#[derive(Clone)]
pub struct ReplyToken(Rc<RpcState>);

impl ReplyToken {
    pub fn caller(&self) -> Endpoint {
        self.0.src
    }
}

pub struct HandlerCtx {
    sim: Sim,
    node: NodeId,
    thread: ThreadId,
    token: ReplyToken,
}

impl HandlerCtx {
    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn thread(&self) -> ThreadId {
        self.thread
    }

    pub fn caller(&self) -> Endpoint {
        self.token.caller()
    }

    /// Token to pass to [`Sim::reply`] when the handler returns
    /// [`HandlerReply::Deferred`].
    pub fn token(&self) -> ReplyToken {
        self.token.clone()
    }
}

struct BatchState {
    id: u64,
    src: Endpoint,
    batch: DoorbellBatch,
    posted_at: SimTime,
    results: RefCell<Vec<VerbResult>>,
    slot: Rc<Slot<Result<Completion, VerbFault>>>,
}

/// What a hold filter sees about a verb about to reach remote memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerbInfo {
    pub src: Endpoint,
    pub dst: NodeId,
    pub kind: VerbKind,
    pub offset: u64,
    pub len: u64,
    pub index: usize,
    pub batch: u64,
}

struct HoldState {
    filter: Box<dyn Fn(&VerbInfo) -> bool>,
    skip: Cell<usize>,
    armed: Cell<bool>,
    parked: RefCell<Option<(Rc<BatchState>, usize)>>,
    triggered: Rc<Slot<VerbInfo>>,
}

/// Parks the first matching verb (after `skip` matches) before it touches
/// memory, so a test can script an interleaving around it. The rest of the
/// batch stays behind the parked verb.
pub struct HoldHandle(Rc<HoldState>);

impl HoldHandle {
    /// Resolves once a verb has been parked.
    pub fn triggered(&self) -> Ticket<VerbInfo> {
        Ticket::new(self.0.triggered.clone())
    }

    pub fn is_parked(&self) -> bool {
        self.0.parked.borrow().is_some()
    }

    /// Lets the parked verb (and the remainder of its batch) proceed.
    pub fn release(&self, sim: &Sim) {
        self.0.armed.set(false);
        if let Some((batch, index)) = self.0.parked.borrow_mut().take() {
            let key = batch.src;
            sim.push_event(sim.now(), key, EventKind::Verb(batch, index));
        }
    }
}

/// Broadcast wake-up primitive for coroutines of the same simulation.
#[derive(Clone, Default)]
pub struct Signal {
    inner: Rc<SignalInner>,
}

#[derive(Default)]
struct SignalInner {
    version: Cell<u64>,
    waiters: RefCell<Vec<Waker>>,
}

impl Signal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn notify_all(&self) {
        self.inner.version.set(self.inner.version.get() + 1);
        for w in self.inner.waiters.borrow_mut().drain(..) {
            w.wake();
        }
    }

    /// Resolves at the next `notify_all` after this call.
    pub fn notified(&self) -> Notified {
        Notified {
            signal: self.clone(),
            seen: self.inner.version.get(),
        }
    }
}

pub struct Notified {
    signal: Signal,
    seen: u64,
}

impl Future for Notified {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.signal.inner.version.get() != self.seen {
            return Poll::Ready(());
        }
        self.signal.inner.waiters.borrow_mut().push(cx.waker().clone());
        Poll::Pending
    }
}

enum EventKind {
    Timer(Rc<Slot<()>>),
    Verb(Rc<BatchState>, usize),
    BatchDone(Rc<BatchState>, Option<VerbFault>),
    RpcArrive(Rc<RpcState>),
    RpcReply(Rc<RpcState>, Vec<u8>),
    Callback(Box<dyn FnOnce(&Sim)>),
}

struct Event {
    time: SimTime,
    key: Endpoint,
    seq: u64,
    kind: EventKind,
}

impl Event {
    fn order(&self) -> (SimTime, Endpoint, u64) {
        (self.time, self.key, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.order() == other.order()
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order().cmp(&other.order())
    }
}

type ReadyQueue = Arc<Mutex<VecDeque<usize>>>;

struct TaskWaker {
    id: usize,
    ready: ReadyQueue,
    queued: AtomicBool,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref()
    }

    fn wake_by_ref(self: &Arc<Self>) {
        if !self.queued.swap(true, AtomicOrdering::Relaxed) {
            self.ready.lock().unwrap().push_back(self.id);
        }
    }
}

struct Task {
    ep: Endpoint,
    label: String,
    future: Pin<Box<dyn Future<Output = ()>>>,
    waker: Arc<TaskWaker>,
}

/// Network counters of one coroutine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointStats {
    pub round_trips: u64,
    pub batches: u64,
    pub verbs: u64,
    pub rpcs: u64,
    pub polls: u64,
}

/// Summary of a finished simulation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimReport {
    pub end_time: SimTime,
    pub round_trips: u64,
    pub batches: u64,
    pub verbs: u64,
    pub rpcs: u64,
    pub events: u64,
    pub tasks_completed: u64,
    pub per_endpoint: BTreeMap<Endpoint, EndpointStats>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceKind {
    PollStart { task: usize },
    PollEnd { task: usize },
    VerbApplied { dst: NodeId, kind: VerbKind, offset: u64, batch: u64 },
    VerbParked { dst: NodeId, batch: u64 },
    RpcHandled { dst: NodeId, handler: HandlerId },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: SimTime,
    pub ep: Endpoint,
    pub kind: TraceKind,
}

struct Inner {
    shape: ClusterShape,
    latency: LatencyModel,
    now: Cell<SimTime>,
    seq: Cell<u64>,
    batch_seq: Cell<u64>,
    current: Cell<Option<Endpoint>>,
    events: RefCell<BinaryHeap<Reverse<Event>>>,
    ready: ReadyQueue,
    tasks: RefCell<Vec<Option<Task>>>,
    live: Cell<usize>,
    memory: Vec<RefCell<NodeMemory>>,
    handlers: RefCell<HashMap<(NodeId, HandlerId), Handler>>,
    cpu_free_at: RefCell<Vec<SimTime>>,
    report: RefCell<SimReport>,
    holds: RefCell<Vec<Rc<HoldState>>>,
    trace: RefCell<Option<Vec<TraceEvent>>>,
    rng: RefCell<ChaCha8Rng>,
    time_limit: Cell<Option<SimTime>>,
}

/// Handle to a deterministic discrete-event simulation of a symmetric
/// RDMA cluster. Cheap to clone; all clones share one simulation.
///
/// Events are ordered by `(time, source endpoint, sequence)`, so a run is a
/// pure function of the cluster shape, latency model, seed and spawned
/// tasks.
#[derive(Clone)]
pub struct Sim {
    inner: Rc<Inner>,
}

impl Sim {
    pub fn new(shape: ClusterShape, latency: LatencyModel, seed: u64) -> Result<Sim, SimError> {
        shape.validate()?;
        let memory = (0..shape.nodes)
            .map(|n| RefCell::new(NodeMemory::new(n, DEFAULT_NODE_CAPACITY)))
            .collect();
        Ok(Sim {
            inner: Rc::new(Inner {
                shape,
                latency,
                now: Cell::new(0),
                seq: Cell::new(0),
                batch_seq: Cell::new(0),
                current: Cell::new(None),
                events: RefCell::new(BinaryHeap::new()),
                ready: Arc::new(Mutex::new(VecDeque::new())),
                tasks: RefCell::new(Vec::new()),
                live: Cell::new(0),
                memory,
                handlers: RefCell::new(HashMap::new()),
                cpu_free_at: RefCell::new(vec![0; shape.nodes * shape.threads_per_node]),
                report: RefCell::new(SimReport::default()),
                holds: RefCell::new(Vec::new()),
                trace: RefCell::new(None),
                rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
                time_limit: Cell::new(None),
            }),
        })
    }

    pub fn shape(&self) -> ClusterShape {
        self.inner.shape
    }

    pub fn latency(&self) -> LatencyModel {
        self.inner.latency
    }

    pub fn now(&self) -> SimTime {
        self.inner.now.get()
    }

    /// Aborts the run with [`SimError::TimeLimit`] once simulated time
    /// passes `limit`.
    pub fn set_time_limit(&self, limit: SimTime) {
        self.inner.time_limit.set(Some(limit));
    }

    pub fn set_node_capacity(&self, capacity: u64) {
        for m in &self.inner.memory {
            m.borrow_mut().capacity_override(capacity);
        }
    }

    pub fn round_trips(&self) -> u64 {
        self.inner.report.borrow().round_trips
    }

    pub fn enable_trace(&self) {
        *self.inner.trace.borrow_mut() = Some(Vec::new());
    }

    pub fn take_trace(&self) -> Vec<TraceEvent> {
        self.inner.trace.borrow_mut().take().unwrap_or_default()
    }

    fn trace(&self, ep: Endpoint, kind: TraceKind) {
        if let Some(t) = self.inner.trace.borrow_mut().as_mut() {
            t.push(TraceEvent {
                time: self.now(),
                ep,
                kind,
            });
        }
    }

    /// Allocates a zeroed region of registered memory on `node`.
    pub fn register_region(&self, node: NodeId, len: u64) -> Result<Region, SimError> {
        let mem = self
            .inner
            .memory
            .get(node)
            .ok_or_else(|| SimError::Config(format!("node {node} outside the cluster")))?;
        if len == 0 {
            return Err(SimError::Config("cannot register an empty region".into()));
        }
        mem.borrow_mut()
            .register(len)
            .ok_or(SimError::Capacity { node, requested: len })
    }

    /// Direct access to a node's memory from code running on that node.
    pub fn memory(&self, node: NodeId) -> RefMut<'_, NodeMemory> {
        self.inner.memory[node].borrow_mut()
    }

    pub fn with_memory<R>(&self, node: NodeId, f: impl FnOnce(&mut NodeMemory) -> R) -> R {
        f(&mut self.inner.memory[node].borrow_mut())
    }

    pub fn register_handler(&self, node: NodeId, id: HandlerId, handler: Handler) {
        self.inner.handlers.borrow_mut().insert((node, id), handler);
    }

    fn next_seq(&self) -> u64 {
        let s = self.inner.seq.get();
        self.inner.seq.set(s + 1);
        s
    }

    fn current_key(&self) -> Endpoint {
        self.inner.current.get().unwrap_or(Endpoint::event_loop(0, 0))
    }

    fn push_event(&self, time: SimTime, key: Endpoint, kind: EventKind) {
        let seq = self.next_seq();
        self.inner
            .events
            .borrow_mut()
            .push(Reverse(Event { time, key, seq, kind }));
    }

    fn jitter(&self) -> SimTime {
        let j = self.inner.latency.jitter;
        if j == 0 {
            0
        } else {
            self.inner.rng.borrow_mut().gen_range(0..=j)
        }
    }

    fn count<F: FnOnce(&mut SimReport, &mut EndpointStats)>(&self, ep: Endpoint, f: F) {
        let mut report = self.inner.report.borrow_mut();
        let mut stats = report.per_endpoint.get(&ep).copied().unwrap_or_default();
        f(&mut report, &mut stats);
        report.per_endpoint.insert(ep, stats);
    }

    /// Posts a doorbell batch from coroutine `ep`. Costs exactly one round
    /// trip; the final request is always signaled.
    pub fn post_batch(&self, ep: Endpoint, mut batch: DoorbellBatch) -> CompletionTicket {
        assert_eq!(batch.qp.src, ep.node, "queue pair does not belong to {ep}");
        assert!(batch.qp.dst < self.inner.shape.nodes, "destination outside the cluster");
        assert!(!batch.requests.is_empty(), "empty doorbell batch");
        if let Some(last) = batch.requests.last_mut() {
            last.signaled = true;
        }
        let nverbs = batch.requests.len() as u64;
        self.count(ep, |r, s| {
            r.round_trips += 1;
            r.batches += 1;
            r.verbs += nverbs;
            s.round_trips += 1;
            s.batches += 1;
            s.verbs += nverbs;
        });
        let id = self.inner.batch_seq.get();
        self.inner.batch_seq.set(id + 1);
        let slot = Slot::new();
        let state = Rc::new(BatchState {
            id,
            src: ep,
            batch,
            posted_at: self.now(),
            results: RefCell::new(Vec::with_capacity(nverbs as usize)),
            slot: slot.clone(),
        });
        let arrive = self.now() + self.inner.latency.one_sided_outbound() + self.jitter();
        self.push_event(arrive, ep, EventKind::Verb(state, 0));
        Ticket::new(slot)
    }

    /// Sends an RPC from `ep` to `handler` on `dst`. The handler runs on the
    /// destination thread's event loop once that thread's CPU is free.
    pub fn rpc_call(&self, ep: Endpoint, dst: NodeId, handler: HandlerId, payload: Vec<u8>) -> RpcTicket {
        assert!(dst < self.inner.shape.nodes, "destination outside the cluster");
        self.count(ep, |r, s| {
            r.round_trips += 1;
            r.rpcs += 1;
            s.round_trips += 1;
            s.rpcs += 1;
        });
        let slot = Slot::new();
        let state = Rc::new(RpcState {
            src: ep,
            dst,
            handler,
            payload,
            slot: slot.clone(),
            replied: Cell::new(false),
            reserved: Cell::new(false),
        });
        let arrive = self.now() + self.inner.latency.rpc_outbound() + self.jitter();
        self.push_event(arrive, ep, EventKind::RpcArrive(state));
        Ticket::new(slot)
    }

    /// Answers a deferred RPC. The reply reaches the caller after the return
    /// half of the RPC round trip.
    pub fn reply(&self, token: &ReplyToken, payload: Vec<u8>) {
        let state = token.0.clone();
        assert!(!state.replied.replace(true), "RPC answered twice");
        let at = self.now() + self.inner.latency.rpc_inbound() + self.jitter();
        let key = Endpoint::event_loop(state.dst, state.src.thread % self.inner.shape.threads_per_node);
        self.push_event(at, key, EventKind::RpcReply(state, payload));
    }

    pub fn sleep(&self, duration: SimTime) -> Ticket<()> {
        self.sleep_until(self.now() + duration)
    }

    pub fn sleep_until(&self, at: SimTime) -> Ticket<()> {
        let slot = Slot::new();
        self.push_event(at.max(self.now()), self.current_key(), EventKind::Timer(slot.clone()));
        Ticket::new(slot)
    }

    /// Re-queues the caller behind every event already due now.
    pub fn yield_now(&self) -> Ticket<()> {
        self.sleep(0)
    }

    fn cpu_index(&self, node: NodeId, thread: ThreadId) -> usize {
        node * self.inner.shape.threads_per_node + thread % self.inner.shape.threads_per_node
    }

    /// Occupies the CPU of `ep`'s thread for `duration`; coroutines and RPC
    /// handlers of one thread queue behind each other.
    pub fn compute(&self, ep: Endpoint, duration: SimTime) -> Ticket<()> {
        let idx = self.cpu_index(ep.node, ep.thread);
        let mut cpu = self.inner.cpu_free_at.borrow_mut();
        let start = cpu[idx].max(self.now());
        cpu[idx] = start + duration;
        drop(cpu);
        self.sleep_until(start + duration)
    }

    /// Runs `f` on the event loop at time `at`.
    pub fn schedule(&self, at: SimTime, key: Endpoint, f: impl FnOnce(&Sim) + 'static) {
        self.push_event(at.max(self.now()), key, EventKind::Callback(Box::new(f)));
    }

    /// Arms a hold: the `skip+1`-th verb matching `filter` is parked before
    /// touching memory until [`HoldHandle::release`].
    pub fn hold_verb(&self, skip: usize, filter: impl Fn(&VerbInfo) -> bool + 'static) -> HoldHandle {
        let state = Rc::new(HoldState {
            filter: Box::new(filter),
            skip: Cell::new(skip),
            armed: Cell::new(true),
            parked: RefCell::new(None),
            triggered: Slot::new(),
        });
        self.inner.holds.borrow_mut().push(state.clone());
        HoldHandle(state)
    }

    pub fn spawn(&self, ep: Endpoint, label: impl Into<String>, fut: impl Future<Output = ()> + 'static) -> usize {
        assert!(self.inner.shape.contains(ep), "{ep} is outside the cluster");
        let mut tasks = self.inner.tasks.borrow_mut();
        let id = tasks.len();
        let waker = Arc::new(TaskWaker {
            id,
            ready: self.inner.ready.clone(),
            queued: AtomicBool::new(false),
        });
        tasks.push(Some(Task {
            ep,
            label: label.into(),
            future: Box::pin(fut),
            waker: waker.clone(),
        }));
        drop(tasks);
        self.inner.live.set(self.inner.live.get() + 1);
        waker.wake_by_ref();
        id
    }

    fn poll_task(&self, id: usize) {
        let Some(mut task) = self.inner.tasks.borrow_mut()[id].take() else {
            return;
        };
        task.waker.queued.store(false, AtomicOrdering::Relaxed);
        let waker = Waker::from(task.waker.clone());
        let mut cx = Context::from_waker(&waker);
        let prev = self.inner.current.replace(Some(task.ep));
        self.trace(task.ep, TraceKind::PollStart { task: id });
        self.count(task.ep, |_, s| s.polls += 1);
        let done = task.future.as_mut().poll(&mut cx).is_ready();
        self.trace(task.ep, TraceKind::PollEnd { task: id });
        self.inner.current.set(prev);
        if done {
            self.inner.live.set(self.inner.live.get() - 1);
            self.inner.report.borrow_mut().tasks_completed += 1;
        } else {
            self.inner.tasks.borrow_mut()[id] = Some(task);
        }
    }

    fn matching_hold(&self, info: &VerbInfo) -> Option<Rc<HoldState>> {
        let holds = self.inner.holds.borrow();
        for h in holds.iter() {
            if h.armed.get() && h.parked.borrow().is_none() && (h.filter)(info) {
                if h.skip.get() > 0 {
                    h.skip.set(h.skip.get() - 1);
                    continue;
                }
                return Some(h.clone());
            }
        }
        None
    }

    fn apply_verb(&self, state: Rc<BatchState>, index: usize) {
        let req = &state.batch.requests[index];
        let dst = state.batch.qp.dst;
        let info = VerbInfo {
            src: state.src,
            dst,
            kind: req.kind(),
            offset: req.offset,
            len: req.len(),
            index,
            batch: state.id,
        };
        if let Some(hold) = self.matching_hold(&info) {
            hold.armed.set(false);
            self.trace(state.src, TraceKind::VerbParked { dst, batch: state.id });
            *hold.parked.borrow_mut() = Some((state.clone(), index));
            hold.triggered.fill(info);
            return;
        }
        let outcome = self.inner.memory[dst].borrow_mut().apply(index, req);
        let lat = self.inner.latency;
        match outcome {
            Ok(res) => {
                self.trace(
                    state.src,
                    TraceKind::VerbApplied {
                        dst,
                        kind: info.kind,
                        offset: info.offset,
                        batch: state.id,
                    },
                );
                state.results.borrow_mut().push(res);
                if index + 1 < state.batch.requests.len() {
                    self.push_event(self.now() + lat.per_verb_overhead, state.src, EventKind::Verb(state, index + 1));
                } else {
                    let n = state.batch.requests.len() as u64;
                    let planned = state.posted_at + lat.one_sided_rt + lat.per_verb_overhead * n;
                    let at = planned.max(self.now() + lat.one_sided_inbound());
                    self.push_event(at, state.src, EventKind::BatchDone(state, None));
                }
            }
            Err(fault) => {
                let at = self.now() + lat.one_sided_inbound();
                self.push_event(at, state.src, EventKind::BatchDone(state, Some(fault)));
            }
        }
    }

    fn arrive_rpc(&self, state: Rc<RpcState>) {
        let thread = state.src.thread % self.inner.shape.threads_per_node;
        let idx = self.cpu_index(state.dst, thread);
        let key = Endpoint::event_loop(state.dst, thread);
        if !state.reserved.get() {
            // Reserve the slot on arrival so a busy thread serves requests
            // in arrival order instead of starving them.
            let mut cpu = self.inner.cpu_free_at.borrow_mut();
            let start = cpu[idx].max(self.now());
            cpu[idx] = start + self.inner.latency.local_op;
            drop(cpu);
            if start > self.now() {
                state.reserved.set(true);
                self.push_event(start, key, EventKind::RpcArrive(state));
                return;
            }
        }
        let handler = self.inner.handlers.borrow().get(&(state.dst, state.handler)).cloned();
        self.trace(
            state.src,
            TraceKind::RpcHandled {
                dst: state.dst,
                handler: state.handler,
            },
        );
        let Some(handler) = handler else {
            state.replied.set(true);
            let at = self.now() + self.inner.latency.rpc_inbound();
            let err = RpcError::UnknownHandler {
                node: state.dst,
                handler: state.handler,
            };
            let slot = state.slot.clone();
            self.push_event(at, key, EventKind::Callback(Box::new(move |_| slot.fill(Err(err)))));
            return;
        };
        let ctx = HandlerCtx {
            sim: self.clone(),
            node: state.dst,
            thread,
            token: ReplyToken(state.clone()),
        };
        let prev = self.inner.current.replace(Some(key));
        let outcome = handler(&ctx, &state.payload);
        self.inner.current.set(prev);
        if let HandlerReply::Reply(bytes) = outcome {
            self.reply(&ctx.token, bytes);
        }
    }

    fn dispatch(&self, ev: Event) {
        self.inner.report.borrow_mut().events += 1;
        let prev = self.inner.current.replace(Some(ev.key));
        match ev.kind {
            EventKind::Timer(slot) => slot.fill(()),
            EventKind::Verb(state, index) => self.apply_verb(state, index),
            EventKind::BatchDone(state, fault) => {
                let result = match fault {
                    Some(f) => Err(f),
                    None => Ok(Completion {
                        results: state.results.take(),
                    }),
                };
                state.slot.fill(result);
            }
            EventKind::RpcArrive(state) => self.arrive_rpc(state),
            EventKind::RpcReply(state, payload) => state.slot.fill(Ok(payload)),
            EventKind::Callback(f) => f(self),
        }
        self.inner.current.set(prev);
    }

    fn pop_ready(&self) -> Option<usize> {
        self.inner.ready.lock().unwrap().pop_front()
    }

    /// Runs until no task is runnable and no event is pending.
    pub fn run_until_quiescent(&self) -> Result<SimReport, SimError> {
        loop {
            while let Some(id) = self.pop_ready() {
                self.poll_task(id);
            }
            let next = self.inner.events.borrow_mut().pop();
            let Some(Reverse(ev)) = next else { break };
            if let Some(limit) = self.inner.time_limit.get() {
                if ev.time > limit {
                    let blocked = self.blocked_tasks();
                    self.teardown();
                    return Err(SimError::TimeLimit { limit, blocked });
                }
            }
            debug_assert!(ev.time >= self.now());
            self.inner.now.set(ev.time);
            self.dispatch(ev);
        }
        if self.inner.live.get() > 0 {
            let blocked = self.blocked_tasks();
            self.teardown();
            return Err(SimError::Deadlock { blocked });
        }
        self.inner.holds.borrow_mut().clear();
        let mut report = self.inner.report.borrow().clone();
        report.end_time = self.now();
        Ok(report)
    }

    fn blocked_tasks(&self) -> Vec<String> {
        self.inner
            .tasks
            .borrow()
            .iter()
            .flatten()
            .map(|t| format!("{}@{}", t.label, t.ep))
            .collect()
    }

    /// Drops unfinished tasks and pending events; both may hold `Sim` clones.
    fn teardown(&self) {
        let tasks: Vec<_> = self.inner.tasks.borrow_mut().drain(..).collect();
        drop(tasks);
        let events: Vec<_> = self.inner.events.borrow_mut().drain().collect();
        drop(events);
        self.inner.holds.borrow_mut().clear();
        self.inner.handlers.borrow_mut().clear();
        self.inner.live.set(0);
    }

    /// Releases handlers and any leftover tasks so the simulation can be
    /// dropped. Memory stays readable.
    pub fn shutdown(&self) {
        self.teardown();
    }
}
