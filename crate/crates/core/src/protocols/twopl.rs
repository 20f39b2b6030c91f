//! Two-phase locking with NO_WAIT or WAIT_DIE conflict handling. Every key,
//! read or written, is locked during Fetch and released at Commit.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use futures::future::{join_all, LocalBoxFuture};

use super::common::{self, first_err, lock_read};
use crate::netsim::{HandlerReply, NodeId, ReplyToken, Sim};
use crate::store::{GlobalKey, Store, Tuple, LOCK_OFFSET};
use crate::txncore::wire::{Dec, Enc};
use crate::txncore::{AbortReason, Coordinator, Env, Primitive, ProtocolKind, Stage, TxnContext};

pub const H_WAITDIE_LOCK: crate::netsim::HandlerId = 20;

const GRANTED: u64 = 0;
const DIED: u64 = 1;

struct Waiter {
    ts: u64,
    holder_seen: u64,
    token: ReplyToken,
}

struct Queue {
    size: u64,
    waiters: Vec<Waiter>,
}

/// Owner-side wait lists for the RPC flavour of WAIT_DIE. A waiting request
/// holds its reply until the lock is granted to it or it has to die.
struct WaitLists {
    queues: RefCell<BTreeMap<(NodeId, u64), Queue>>,
    polling: RefCell<Vec<bool>>,
}

fn reply_body(offset: u64, status: u64, holder: u64, tuple: &[u8]) -> Vec<u8> {
    let mut out = offset.to_le_bytes().to_vec();
    out.extend(Enc::new().u64(status).u64(holder).bytes(tuple).finish());
    out
}

impl WaitLists {
    fn arm(self: &Rc<Self>, sim: &Sim, node: NodeId) {
        if std::mem::replace(&mut self.polling.borrow_mut()[node], true) {
            return;
        }
        let me = self.clone();
        let at = sim.now() + sim.latency().local_op.max(1);
        sim.schedule(at, crate::netsim::Endpoint::event_loop(node, 0), move |sim| me.poll(sim, node));
    }

    /// Grants free locks to their oldest waiter, then kills every waiter
    /// younger than the current holder.
    fn poll(self: &Rc<Self>, sim: &Sim, node: NodeId) {
        self.polling.borrow_mut()[node] = false;
        let mut queues = self.queues.borrow_mut();
        let offsets: Vec<u64> = queues.range((node, 0)..(node + 1, 0)).map(|(k, _)| k.1).collect();
        let mut pending = false;
        for off in offsets {
            let q = queues.get_mut(&(node, off)).unwrap();
            let mut mem = sim.memory(node);
            let mut holder = mem.read_u64(off + LOCK_OFFSET as u64);
            if holder == 0 {
                q.waiters.sort_by_key(|w| w.ts);
                let w = q.waiters.remove(0);
                mem.write_u64(off + LOCK_OFFSET as u64, w.ts);
                let tuple = mem.read(off, q.size).to_vec();
                drop(mem);
                sim.reply(&w.token, reply_body(off, GRANTED, w.holder_seen, &tuple));
                holder = w.ts;
            } else {
                drop(mem);
            }
            let (live, dead): (Vec<Waiter>, Vec<Waiter>) = q.waiters.drain(..).partition(|w| w.ts < holder);
            for w in dead {
                sim.reply(&w.token, reply_body(off, DIED, holder, &[]));
            }
            q.waiters = live;
            if q.waiters.is_empty() {
                queues.remove(&(node, off));
            } else {
                pending = true;
            }
        }
        drop(queues);
        if pending {
            self.arm(sim, node);
        }
    }
}

/// Registers the WAIT_DIE lock handler on every node.
pub fn register(env: &Env) {
    let lists = Rc::new(WaitLists {
        queues: RefCell::new(BTreeMap::new()),
        polling: RefCell::new(vec![false; env.sim.shape().nodes]),
    });
    for node in 0..env.sim.shape().nodes {
        let store: Rc<Store> = env.store.clone();
        let lists = lists.clone();
        env.sim.register_handler(
            node,
            H_WAITDIE_LOCK,
            Rc::new(move |ctx, payload| {
                let mut d = Dec::new(payload);
                let gk = GlobalKey::unpack(d.u64());
                let ts = d.u64();
                let (owner, off) = store.tuple_addr(gk).expect("lock request for an unknown key");
                assert_eq!(owner, node);
                let size = store.layout(gk.table).unwrap().size() as u64;
                let sim = ctx.sim();
                let mut mem = sim.memory(node);
                let old = mem.cas_u64(off + LOCK_OFFSET as u64, 0, ts);
                if old == 0 {
                    return HandlerReply::Reply(reply_body(off, GRANTED, 0, mem.read(off, size)));
                }
                drop(mem);
                if ts > old {
                    return HandlerReply::Reply(reply_body(off, DIED, old, &[]));
                }
                lists
                    .queues
                    .borrow_mut()
                    .entry((node, off))
                    .or_insert_with(|| Queue { size, waiters: Vec::new() })
                    .waiters
                    .push(Waiter {
                        ts,
                        holder_seen: old,
                        token: ctx.token(),
                    });
                lists.arm(sim, node);
                HandlerReply::Deferred
            }),
        );
    }
}

pub fn attempt<'a>(co: &'a Coordinator, ctx: &'a mut TxnContext) -> LocalBoxFuture<'a, Result<u64, AbortReason>> {
    Box::pin(run(co, ctx))
}

/// Acquires one lock. `Ok` means the lock is held, even if a sibling request
/// already failed, so the caller can release it.
async fn acquire(
    co: &Coordinator,
    key: GlobalKey,
    node: NodeId,
    known: Option<u64>,
    ctts: u64,
    abort: &Cell<bool>,
) -> Result<(u64, Tuple), AbortReason> {
    let wait_die = co.env.protocol == ProtocolKind::WaitDie;
    let prim = co.primitive(Stage::Fetch);
    let result = if wait_die && prim == Primitive::Rpc && !co.is_local(node) {
        wait_die_rpc(co, key, node, ctts).await
    } else {
        let mut last_holder = 0;
        loop {
            let (off, old, t) = lock_read(co, key, node, known, prim, ctts).await?;
            if old == 0 {
                break Ok((off, t));
            }
            if !wait_die {
                break Err(AbortReason::LockHeld);
            }
            if ctts > old || abort.get() {
                break Err(AbortReason::Die);
            }
            if old != last_holder {
                co.record_wait(ctts, old);
                last_holder = old;
            }
            co.sim().yield_now().await;
        }
    };
    if result.is_err() {
        abort.set(true);
    }
    result
}

async fn wait_die_rpc(co: &Coordinator, key: GlobalKey, node: NodeId, ctts: u64) -> Result<(u64, Tuple), AbortReason> {
    let payload = Enc::new().u64(key.pack()).u64(ctts).finish();
    let reply = co.sim().rpc_call(co.ep, node, H_WAITDIE_LOCK, payload).await.unwrap_or_else(|e| panic!("{e}"));
    let off = u64::from_le_bytes(reply[..8].try_into().unwrap());
    let mut d = Dec::new(&reply[8..]);
    let status = d.u64();
    let holder = d.u64();
    if status == DIED {
        return Err(AbortReason::Die);
    }
    if holder != 0 {
        co.record_wait(ctts, holder);
    }
    Ok((off, common::parse(co, key, d.bytes())))
}

async fn run(co: &Coordinator, ctx: &mut TxnContext) -> Result<u64, AbortReason> {
    let ctts = ctx.ctts.0;
    ctx.ledger.enter(Stage::Fetch, co.now());
    let abort = Cell::new(false);
    let nr = ctx.rs.len();
    let targets: Vec<(GlobalKey, NodeId, Option<u64>)> = ctx
        .rs
        .iter()
        .map(|e| (e.key, e.node, e.offset))
        .chain(ctx.ws.iter().map(|e| (e.key, e.node, e.offset)))
        .collect();
    let results = join_all(targets.iter().map(|&(k, n, o)| acquire(co, k, n, o, ctts, &abort))).await;
    let failed = first_err(&results);

    let mut rs_held = vec![false; nr];
    let mut max_wts = 0;
    for (i, r) in results.into_iter().enumerate() {
        let Ok((off, t)) = r else { continue };
        let v = t.newest().clone();
        max_wts = max_wts.max(v.wts);
        if i < nr {
            let e = &mut ctx.rs[i];
            e.offset = Some(off);
            e.wts = v.wts;
            e.rts = t.rts;
            e.record = v.record;
            rs_held[i] = true;
        } else {
            let e = &mut ctx.ws[i - nr];
            e.offset = Some(off);
            e.locked = true;
            e.wts = v.wts;
            e.rts = t.rts;
            e.old = v.record;
        }
    }

    if let Some(reason) = failed {
        ctx.begin_release(co.now());
        let prim = co.primitive(Stage::Release);
        release_rs(co, ctx, &rs_held, prim).await;
        common::release_ws(co, ctx, prim).await;
        return Err(reason);
    }

    common::execute(co, ctx).await;
    co.adjust_clock(max_wts);
    let commit_ts = co.next_ts().0;

    ctx.ledger.enter(Stage::Log, co.now());
    co.log(ctx).await;

    ctx.ledger.enter(Stage::Commit, co.now());
    let prim = co.primitive(Stage::Commit);
    let writes = join_all(ctx.ws.iter().map(|e| {
        common::write_unlock(co, e.key, e.node, e.offset.unwrap(), prim, 0, commit_ts, &e.new)
    }));
    let (_, _) = futures::join!(writes, release_rs(co, ctx, &rs_held, prim));
    for e in &mut ctx.ws {
        e.locked = false;
    }
    Ok(commit_ts)
}

async fn release_rs(co: &Coordinator, ctx: &TxnContext, held: &[bool], prim: Primitive) {
    let ctts = ctx.ctts.0;
    join_all(
        ctx.rs
            .iter()
            .zip(held)
            .filter(|(_, &h)| h)
            .map(|(e, _)| common::unlock(co, e.key, e.node, e.offset.unwrap(), prim, ctts)),
    )
    .await;
}

