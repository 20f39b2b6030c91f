//! Deterministic epoch execution. Each node sequences the transactions that
//! arrive on it, broadcasts them into every node's request buffers, and all
//! nodes derive the same schedule. Locks are taken in schedule order, so no
//! transaction ever aborts.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use futures::future::join_all;

use crate::netsim::{Endpoint, HandlerId, HandlerReply, NodeId, Signal, SimError, SimTime, VerbRequest};
use crate::store::{GlobalKey, Tuple};
use crate::txncore::wire::{Dec, Enc};
use crate::txncore::{Coordinator, Env, Primitive, Stage, StageLedger, TxnSample};
use crate::verify::CommitRecord;
use crate::workload::TxnSpec;

/// Writes a list of `(offset, bytes)` into the receiver's memory, in order.
pub const H_CALVIN_WRITE: HandlerId = 50;

/// Request buffer header: epoch + 1, transaction count, payload bytes.
const CH_BYTES: u64 = 24;

/// One sequenced transaction as carried in a request buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct CalvinRequest {
    pub ts: u64,
    pub sequenced_at: SimTime,
    pub spec: TxnSpec,
}

impl CalvinRequest {
    fn encode(&self, e: Enc) -> Enc {
        e.u64(self.ts)
            .u64(self.sequenced_at)
            .bytes(&serde_json::to_vec(&self.spec).expect("specs serialize"))
    }

    fn decode(d: &mut Dec) -> CalvinRequest {
        let ts = d.u64();
        let sequenced_at = d.u64();
        let spec = serde_json::from_slice(d.bytes()).expect("request buffer holds a valid spec");
        CalvinRequest { ts, sequenced_at, spec }
    }
}

pub fn encode_batch(batch: &[CalvinRequest]) -> Vec<u8> {
    batch.iter().fold(Enc::new(), |e, r| r.encode(e)).finish()
}

pub fn decode_batch(bytes: &[u8], count: usize) -> Vec<CalvinRequest> {
    let mut d = Dec::new(bytes);
    (0..count).map(|_| CalvinRequest::decode(&mut d)).collect()
}

/// Orders an epoch's requests from every sequencer.
pub fn build_schedule(mut all: Vec<CalvinRequest>) -> Vec<CalvinRequest> {
    all.sort_by_key(|r| (r.ts, r.spec.id));
    all
}

/// The node that performs a transaction's writes, or the lowest read owner
/// for a read-only transaction.
pub fn active_nodes(env: &Env, spec: &TxnSpec) -> BTreeSet<NodeId> {
    let owner = |k: &GlobalKey| env.store.owner(*k).expect("generated keys exist");
    let active: BTreeSet<NodeId> = spec.ws.iter().map(owner).collect();
    if active.is_empty() {
        spec.rs.iter().map(owner).min().into_iter().collect()
    } else {
        active
    }
}

struct Layout {
    crb_base: Vec<u64>,
    crb_stride: u64,
    cfb_base: Vec<u64>,
    cell: u64,
    max_sched: u64,
}

impl Layout {
    /// Request buffer on `receiver` filled by `sender` in epochs of `parity`.
    fn crb(&self, receiver: NodeId, sender: NodeId, parity: u64, nodes: usize) -> u64 {
        self.crb_base[receiver] + (parity * nodes as u64 + sender as u64) * self.crb_stride
    }

    /// Forward cell on `receiver` for schedule slot `idx` from `sender`.
    fn cfb(&self, receiver: NodeId, sender: NodeId, parity: u64, idx: usize, nodes: usize) -> u64 {
        self.cfb_base[receiver] + ((parity * self.max_sched + idx as u64) * nodes as u64 + sender as u64) * self.cell
    }
}

#[derive(Default)]
struct LockTable {
    /// Per key, queued `(schedule index, exclusive)` in schedule order.
    queues: BTreeMap<GlobalKey, VecDeque<(usize, bool)>>,
}

impl LockTable {
    fn granted(&self, key: GlobalKey, idx: usize, exclusive: bool) -> bool {
        for &(i, x) in &self.queues[&key] {
            if i == idx {
                return true;
            }
            if x || exclusive {
                return false;
            }
        }
        unreachable!("lock request was enqueued")
    }

    fn release(&mut self, key: GlobalKey, idx: usize) {
        let q = self.queues.get_mut(&key).unwrap();
        q.retain(|&(i, _)| i != idx);
        if q.is_empty() {
            self.queues.remove(&key);
        }
    }
}

struct NodeState {
    locks: RefCell<LockTable>,
    released: Signal,
}

/// Engine state shared by the per-node drivers.
pub struct Calvin {
    env: Rc<Env>,
    layout: Layout,
    epochs: u64,
    nodes: Vec<NodeState>,
    /// Per node, per epoch: the schedule as transaction ids.
    schedules: RefCell<Vec<Vec<Vec<u64>>>>,
    /// Per node: the requests it sequences, in arrival order.
    pending: RefCell<Vec<VecDeque<Rc<TxnSpec>>>>,
}

impl Calvin {
    /// Registers buffers and handlers, then spawns one driver per node.
    pub fn spawn(env: &Rc<Env>, txns: Vec<Rc<TxnSpec>>) -> Result<Rc<Calvin>, SimError> {
        let sim = &env.sim;
        let shape = sim.shape();
        let nodes = shape.nodes;
        let batch = env.params.calvin_batch.max(1);
        let mut pending = vec![VecDeque::new(); nodes];
        for t in txns {
            pending[t.arrival.node].push_back(t);
        }
        let epochs = pending.iter().map(|q| q.len().div_ceil(batch)).max().unwrap_or(0) as u64;

        let max_req = pending
            .iter()
            .flatten()
            .map(|t| {
                let r = CalvinRequest { ts: 0, sequenced_at: 0, spec: (**t).clone() };
                r.encode(Enc::new()).finish().len()
            })
            .max()
            .unwrap_or(0) as u64;
        let max_keys = pending.iter().flatten().map(|t| t.rs.len() + t.ws.len()).max().unwrap_or(0) as u64;
        let max_rec = env.store.tables().map(|t| t.record_len).max().unwrap_or(0) as u64;
        let crb_stride = CH_BYTES + batch as u64 * max_req;
        // A forward cell: length word, then per key (key, wts, len, record).
        let cell = 8 + 4 + max_keys * (8 + 8 + 4 + max_rec);
        let max_sched = (nodes * batch) as u64;

        let mut crb_base = Vec::new();
        let mut cfb_base = Vec::new();
        for n in 0..nodes {
            crb_base.push(sim.register_region(n, 2 * nodes as u64 * crb_stride)?.base);
            cfb_base.push(sim.register_region(n, 2 * max_sched * nodes as u64 * cell)?.base);
        }
        for n in 0..nodes {
            sim.register_handler(
                n,
                H_CALVIN_WRITE,
                Rc::new(move |ctx, payload| {
                    let mut d = Dec::new(payload);
                    let mut mem = ctx.sim().memory(n);
                    while !d.is_empty() {
                        let off = d.u64();
                        mem.write(off, d.bytes());
                    }
                    HandlerReply::Reply(Vec::new())
                }),
            );
        }

        let engine = Rc::new(Calvin {
            env: env.clone(),
            layout: Layout { crb_base, crb_stride, cfb_base, cell, max_sched },
            epochs,
            nodes: (0..nodes)
                .map(|_| NodeState { locks: RefCell::new(LockTable::default()), released: Signal::new() })
                .collect(),
            schedules: RefCell::new(vec![Vec::new(); nodes]),
            pending: RefCell::new(pending),
        });
        for n in 0..nodes {
            let e = engine.clone();
            sim.spawn(Endpoint::new(n, 0, 0), format!("calvin-node{n}"), async move { e.drive_node(n).await });
        }
        Ok(engine)
    }

    pub fn epochs(&self) -> u64 {
        self.epochs
    }

    /// Per node, per epoch schedules (transaction ids in execution order).
    pub fn schedules(&self) -> Vec<Vec<Vec<u64>>> {
        self.schedules.borrow().clone()
    }

    fn nodes(&self) -> usize {
        self.nodes.len()
    }

    async fn drive_node(self: Rc<Self>, node: NodeId) {
        let shape = self.env.sim.shape();
        let workers: Vec<Coordinator> = shape
            .coordinators()
            .filter(|ep| ep.node == node)
            .map(|ep| self.env.coordinator(ep))
            .collect();
        let batch = self.env.params.calvin_batch.max(1);
        for epoch in 0..self.epochs {
            let parity = epoch % 2;
            let seq = &workers[0];
            let requests: Vec<CalvinRequest> = {
                let mut pending = self.pending.borrow_mut();
                let q = &mut pending[node];
                let take = q.len().min(batch);
                q.drain(..take)
                    .map(|spec| CalvinRequest {
                        ts: seq.next_ts().0,
                        sequenced_at: seq.now(),
                        spec: (*spec).clone(),
                    })
                    .collect()
            };
            self.broadcast(seq, epoch, &requests).await;
            let schedule = self.collect(seq, node, epoch).await;
            self.schedules.borrow_mut()[node].push(schedule.iter().map(|r| r.spec.id).collect());
            let ready = self.env.sim.now();

            // Lock requests enter the queues in schedule order before any
            // worker runs, which is what makes blocking deadlock-free.
            let mut mine: Vec<Vec<(usize, &CalvinRequest)>> = vec![Vec::new(); workers.len()];
            let mut k = 0;
            {
                let mut locks = self.nodes[node].locks.borrow_mut();
                for (idx, r) in schedule.iter().enumerate() {
                    let local: Vec<(GlobalKey, bool)> = self.local_keys(node, &r.spec);
                    if local.is_empty() {
                        continue;
                    }
                    for (key, x) in local {
                        locks.queues.entry(key).or_default().push_back((idx, x));
                    }
                    mine[k % workers.len()].push((idx, r));
                    k += 1;
                }
            }
            join_all(workers.iter().zip(&mine).map(|(co, list)| {
                let me = self.clone();
                async move {
                    for &(idx, r) in list {
                        me.execute(co, node, parity, idx, r, ready).await;
                    }
                }
            }))
            .await;
        }
    }

    fn local_keys(&self, node: NodeId, spec: &TxnSpec) -> Vec<(GlobalKey, bool)> {
        let own = |k: &&GlobalKey| self.env.store.owner(**k).unwrap() == node;
        spec.rs
            .iter()
            .filter(own)
            .map(|&k| (k, false))
            .chain(spec.ws.iter().filter(own).map(|&k| (k, true)))
            .collect()
    }

    /// Writes `bytes` to `dst` at each `(offset, bytes)`, in order, as one
    /// doorbell batch or one RPC.
    async fn deliver(&self, co: &Coordinator, stage: Stage, dst: NodeId, writes: Vec<(u64, Vec<u8>)>) {
        if co.is_local(dst) {
            co.local(dst, |m| {
                for (off, b) in &writes {
                    m.write(*off, b);
                }
            })
            .await;
        } else if co.primitive(stage) == Primitive::OneSided {
            let reqs = writes.into_iter().map(|(off, b)| VerbRequest::write(off, b)).collect();
            co.post(dst, reqs).await.expect("buffers sized for the run");
        } else {
            let payload = writes.iter().fold(Enc::new(), |e, (off, b)| e.u64(*off).bytes(b)).finish();
            co.sim().rpc_call(co.ep, dst, H_CALVIN_WRITE, payload).await.expect("handler registered");
        }
    }

    async fn broadcast(&self, co: &Coordinator, epoch: u64, batch: &[CalvinRequest]) {
        let nodes = self.nodes();
        let me = co.ep.node;
        let payload = encode_batch(batch);
        assert!(CH_BYTES + payload.len() as u64 <= self.layout.crb_stride, "request buffer overflow");
        let header = Enc::new().u64(epoch + 1).u64(batch.len() as u64).u64(payload.len() as u64).finish();
        join_all((0..nodes).map(|dst| {
            let base = self.layout.crb(dst, me, epoch % 2, nodes);
            // Payload first: a header naming this epoch implies a full batch.
            let writes = vec![(base + CH_BYTES, payload.clone()), (base, header.clone())];
            self.deliver(co, Stage::Broadcast, dst, writes)
        }))
        .await;
    }

    /// Waits for every sequencer's batch of `epoch` and returns the schedule.
    async fn collect(&self, co: &Coordinator, node: NodeId, epoch: u64) -> Vec<CalvinRequest> {
        let nodes = self.nodes();
        let sim = co.sim();
        let mut all = Vec::new();
        for sender in 0..nodes {
            let base = self.layout.crb(node, sender, epoch % 2, nodes);
            loop {
                let found = sim.with_memory(node, |m| {
                    let h = m.read(base, CH_BYTES);
                    let mut d = Dec::new(h);
                    let (e, count, len) = (d.u64(), d.u64(), d.u64());
                    (e == epoch + 1).then(|| decode_batch(m.read(base + CH_BYTES, len), count as usize))
                });
                if let Some(batch) = found {
                    all.extend(batch);
                    break;
                }
                sim.sleep(1).await;
            }
        }
        build_schedule(all)
    }

    async fn execute(&self, co: &Coordinator, node: NodeId, parity: u64, idx: usize, r: &CalvinRequest, ready: SimTime) {
        let sim = co.sim();
        let spec = &r.spec;
        let nodes = self.nodes();
        let owner = |k: &GlobalKey| self.env.store.owner(*k).unwrap();
        let active = active_nodes(&self.env, spec);
        let participants: BTreeSet<NodeId> = spec.keys().map(|k| owner(&k)).collect();
        let is_active = active.contains(&node);
        let emitter = *active.iter().next().unwrap();

        let mut ledger = StageLedger::default();
        ledger.enter(Stage::Broadcast, r.sequenced_at);
        ledger.enter(Stage::Lock, ready);
        let local = self.local_keys(node, spec);
        let state = &self.nodes[node];
        loop {
            let granted = {
                let locks = state.locks.borrow();
                local.iter().all(|&(k, x)| locks.granted(k, idx, x))
            };
            if granted {
                break;
            }
            state.released.notified().await;
        }

        ledger.enter(Stage::Forward, sim.now());
        let store = self.env.store.clone();
        let values: Vec<(GlobalKey, u64, Vec<u8>)> = co
            .local(node, |m| {
                local
                    .iter()
                    .map(|&(k, _)| {
                        let (_, off) = store.tuple_addr(k).unwrap();
                        let layout = store.layout(k.table).unwrap();
                        let t = Tuple::parse(&layout, m.read(off, layout.size() as u64)).unwrap();
                        let v = t.newest();
                        (k, v.wts, v.record.clone())
                    })
                    .collect()
            })
            .await;
        if !is_active {
            self.release(node, idx, &local);
        }
        let encoded = values.iter().fold(Enc::new(), |e, (k, w, rec)| e.u64(k.pack()).u64(*w).bytes(rec)).finish();
        let len = encoded.len() as u64;
        assert!(8 + len <= self.layout.cell, "forward cell overflow");
        join_all(active.iter().filter(|&&a| a != node).map(|&a| {
            let cell = self.layout.cfb(a, node, parity, idx, nodes);
            // Value first, then the length word that announces it.
            self.deliver(co, Stage::Forward, a, vec![(cell + 8, encoded.clone()), (cell, len.to_le_bytes().to_vec())])
        }))
        .await;
        if !is_active {
            return;
        }

        let mut seen: BTreeMap<GlobalKey, (u64, Vec<u8>)> = values.into_iter().map(|(k, w, rec)| (k, (w, rec))).collect();
        for &p in participants.iter().filter(|&&p| p != node) {
            let cell = self.layout.cfb(node, p, parity, idx, nodes);
            loop {
                let got = sim.with_memory(node, |m| {
                    let len = m.read_u64(cell);
                    if len == 0 {
                        return None;
                    }
                    let body = m.read(cell + 8, len).to_vec();
                    m.write_u64(cell, 0);
                    Some(body)
                });
                if let Some(body) = got {
                    let mut d = Dec::new(&body);
                    while !d.is_empty() {
                        let k = GlobalKey::unpack(d.u64());
                        let w = d.u64();
                        seen.insert(k, (w, d.bytes().to_vec()));
                    }
                    break;
                }
                sim.sleep(1).await;
            }
        }

        ledger.enter(Stage::Execute, sim.now());
        if spec.exec_time > 0 {
            sim.compute(co.ep, spec.exec_time).await;
        }
        let rs: Vec<&[u8]> = spec.rs.iter().map(|k| seen[k].1.as_slice()).collect();
        let ws: Vec<&[u8]> = spec.ws.iter().map(|k| seen[k].1.as_slice()).collect();
        let new = spec.execute(&rs, &ws);

        ledger.enter(Stage::Commit, sim.now());
        let writes: Vec<(GlobalKey, Vec<u8>)> = spec
            .ws
            .iter()
            .zip(new)
            .filter(|(k, _)| owner(k) == node)
            .map(|(k, v)| (*k, v))
            .collect();
        if !writes.is_empty() {
            let ts = r.ts;
            co.local(node, |m| {
                for (k, rec) in &writes {
                    let (_, off) = store.tuple_addr(*k).unwrap();
                    let layout = store.layout(k.table).unwrap();
                    m.write(off + layout.wts_offset(0) as u64, &layout.encode_slot(ts, rec));
                }
            })
            .await;
        }
        self.release(node, idx, &local);
        ledger.close(sim.now());

        if node == emitter {
            let mut stats = self.env.stats.borrow_mut();
            stats.commits.push(CommitRecord {
                txn_id: spec.id,
                commit_key: r.ts,
                reads: spec.rs.iter().chain(&spec.ws).map(|k| (*k, seen[k].0)).collect(),
                writes: spec.ws.clone(),
            });
            stats.samples.push(TxnSample {
                id: spec.id,
                start: r.sequenced_at,
                end: sim.now(),
                attempts: 1,
                ledger,
            });
        }
    }

    fn release(&self, node: NodeId, idx: usize, local: &[(GlobalKey, bool)]) {
        let state = &self.nodes[node];
        let mut locks = state.locks.borrow_mut();
        for &(k, _) in local {
            locks.release(k, idx);
        }
        drop(locks);
        state.released.notify_all();
    }
}
