//! Multi-version timestamp ordering over a fixed ring of S versions per
//! tuple. Readers pick the newest version older than their ctts and push the
//! tuple's rts forward; writers must be newer than every version and every
//! read.

use futures::future::{join_all, LocalBoxFuture};

use super::common::{self, first_err, parse, tuple_of};
use crate::netsim::{HandlerId, NodeId, NodeMemory, VerbRequest};
use crate::store::{GlobalKey, Tuple, LOCK_OFFSET, RTS_OFFSET};
use crate::txncore::wire::{Dec, Enc};
use crate::txncore::{AbortReason, Coordinator, Primitive, Stage, TupleRef, TxnContext};

pub const H_MVCC_READ: HandlerId = 30;
pub const H_MVCC_LOCK: HandlerId = 31;

/// Reader must retry a double read at most this many times when
/// `retry_double_read` is set.
const DOUBLE_READ_RETRIES: u32 = 3;

const OK: u64 = 0;

fn status_of(reason: AbortReason) -> u64 {
    AbortReason::ALL.iter().position(|&r| r == reason).unwrap() as u64 + 1
}

fn reason_of(status: u64) -> AbortReason {
    AbortReason::ALL[status as usize - 1]
}

/// R1 and R2 for a reader with timestamp `ctts`. Returns the visible slot.
pub fn check_read(t: &Tuple, ctts: u64) -> Result<usize, AbortReason> {
    let slot = t.visible_slot(ctts).ok_or(AbortReason::SlotOverflow)?;
    if t.lock != 0 && t.lock < ctts {
        return Err(AbortReason::ReadLocked);
    }
    Ok(slot)
}

/// W1: a writer must be newer than every version and every read.
pub fn too_late(t: &Tuple, ctts: u64) -> bool {
    ctts <= t.max_wts() || ctts <= t.rts
}

/// Atomic read at the owner. Reply: status, clock hint, wts, record.
pub(crate) fn op_read(m: &mut NodeMemory, t: TupleRef, a: &mut Dec) -> Vec<u8> {
    let ctts = a.u64();
    let tuple = tuple_of(m, t);
    let hint = tuple.max_wts().max(tuple.rts);
    match check_read(&tuple, ctts) {
        Ok(slot) => {
            if ctts > tuple.rts {
                m.write_u64(t.offset + RTS_OFFSET as u64, ctts);
            }
            let v = &tuple.versions[slot];
            Enc::new().u64(OK).u64(hint).u64(v.wts).bytes(&v.record).finish()
        }
        Err(r) => Enc::new().u64(status_of(r)).u64(hint).finish(),
    }
}

/// Atomic W1, W2 and lock at the owner. Reply: status, clock hint, tuple.
pub(crate) fn op_lock(m: &mut NodeMemory, t: TupleRef, a: &mut Dec) -> Vec<u8> {
    let ctts = a.u64();
    let tuple = tuple_of(m, t);
    let hint = tuple.max_wts().max(tuple.rts);
    let status = if too_late(&tuple, ctts) {
        status_of(AbortReason::WriteTooLate)
    } else if tuple.lock != 0 {
        status_of(AbortReason::LockHeld)
    } else {
        m.write_u64(t.offset + LOCK_OFFSET as u64, ctts);
        OK
    };
    Enc::new().u64(status).u64(hint).bytes(m.read(t.offset, t.layout.size() as u64)).finish()
}

pub fn attempt<'a>(co: &'a Coordinator, ctx: &'a mut TxnContext) -> LocalBoxFuture<'a, Result<u64, AbortReason>> {
    Box::pin(run(co, ctx))
}

struct Read {
    offset: u64,
    wts: u64,
    record: Vec<u8>,
}

async fn read_once(co: &Coordinator, key: GlobalKey, node: NodeId, known: Option<u64>, ctts: u64) -> Result<Read, AbortReason> {
    let prim = co.primitive(Stage::Read);
    if prim == Primitive::Rpc || co.is_local(node) {
        let (offset, body) = co.call_tuple(key, node, H_MVCC_READ, op_read, Enc::new().u64(ctts).finish()).await;
        let mut d = Dec::new(&body);
        let status = d.u64();
        co.adjust_clock(d.u64());
        if status != OK {
            return Err(reason_of(status));
        }
        let wts = d.u64();
        return Ok(Read { offset, wts, record: d.bytes().to_vec() });
    }
    let off = co.locate(key, node, known).await?;
    let size = co.layout(key).size() as u64;
    let c = co.post(node, vec![VerbRequest::read(off, size)]).await?;
    let first = parse(co, key, c.read(0));
    co.adjust_clock(first.max_wts().max(first.rts));
    check_read(&first, ctts)?;
    // Push rts forward and re-read in one batch. The CAS lands first, so a
    // writer that locks after it sees the new rts and fails W1; a writer that
    // locked or committed before it shows up in the second read.
    let mut expected = first.rts;
    loop {
        let mut reqs = Vec::new();
        let cas = ctts > expected;
        if cas {
            reqs.push(VerbRequest::cas(off + RTS_OFFSET as u64, expected, ctts));
        }
        reqs.push(VerbRequest::read(off, size));
        let c = co.post(node, reqs).await?;
        let second = parse(co, key, c.read(cas as usize));
        if second.wts_slots() != first.wts_slots() {
            return Err(AbortReason::DoubleRead);
        }
        let slot = check_read(&second, ctts)?;
        if cas && c.cas_old(0) != expected && c.cas_old(0) < ctts {
            // Another reader moved rts, still below us: try again from there.
            expected = c.cas_old(0);
            continue;
        }
        let v = &second.versions[slot];
        return Ok(Read { offset: off, wts: v.wts, record: v.record.clone() });
    }
}

async fn read(co: &Coordinator, key: GlobalKey, node: NodeId, known: Option<u64>, ctts: u64) -> Result<Read, AbortReason> {
    let mut tries = 0;
    loop {
        match read_once(co, key, node, known, ctts).await {
            Err(AbortReason::DoubleRead) if co.env.params.retry_double_read && tries < DOUBLE_READ_RETRIES => tries += 1,
            r => return r,
        }
    }
}

/// Fetches and locks one write-set tuple. `Ok` carries the offset and the
/// tuple as seen under the lock. `Err((reason, Some(off)))` means the lock
/// was taken and must be released.
async fn lock(co: &Coordinator, key: GlobalKey, node: NodeId, known: Option<u64>, ctts: u64) -> Result<(u64, Tuple), (AbortReason, Option<u64>)> {
    let prim = co.primitive(Stage::Lock);
    if prim == Primitive::Rpc || co.is_local(node) {
        let (off, body) = co.call_tuple(key, node, H_MVCC_LOCK, op_lock, Enc::new().u64(ctts).finish()).await;
        let mut d = Dec::new(&body);
        let status = d.u64();
        co.adjust_clock(d.u64());
        if status != OK {
            return Err((reason_of(status), None));
        }
        return Ok((off, parse(co, key, d.bytes())));
    }
    let off = co.locate(key, node, known).await.map_err(|r| (r, None))?;
    let size = co.layout(key).size() as u64;
    let c = co.post(node, vec![VerbRequest::read(off, size)]).await.map_err(|r| (r, None))?;
    let t = parse(co, key, c.read(0));
    co.adjust_clock(t.max_wts().max(t.rts));
    if too_late(&t, ctts) {
        return Err((AbortReason::WriteTooLate, None));
    }
    if t.lock != 0 {
        return Err((AbortReason::LockHeld, None));
    }
    let c = co
        .post(node, vec![VerbRequest::cas(off + LOCK_OFFSET as u64, 0, ctts), VerbRequest::read(off, size)])
        .await
        .map_err(|r| (r, None))?;
    if c.cas_old(0) != 0 {
        return Err((AbortReason::LockHeld, None));
    }
    let t = parse(co, key, c.read(1));
    co.adjust_clock(t.max_wts().max(t.rts));
    if too_late(&t, ctts) {
        return Err((AbortReason::WriteTooLate, Some(off)));
    }
    Ok((off, t))
}

async fn run(co: &Coordinator, ctx: &mut TxnContext) -> Result<u64, AbortReason> {
    let ctts = ctx.ctts.0;

    ctx.ledger.enter(Stage::Read, co.now());
    let reads = join_all(ctx.rs.iter().map(|e| read(co, e.key, e.node, e.offset, ctts))).await;
    if let Some(reason) = first_err(&reads) {
        return Err(reason);
    }
    for (e, r) in ctx.rs.iter_mut().zip(reads) {
        let r = r.unwrap();
        e.offset = Some(r.offset);
        e.wts = r.wts;
        e.record = r.record;
    }

    ctx.ledger.enter(Stage::Lock, co.now());
    let locks = join_all(ctx.ws.iter().map(|e| lock(co, e.key, e.node, e.offset, ctts))).await;
    let mut failed = None;
    let mut slots = vec![0; ctx.ws.len()];
    for ((e, r), slot) in ctx.ws.iter_mut().zip(locks).zip(&mut slots) {
        match r {
            Ok((off, t)) => {
                e.offset = Some(off);
                e.locked = true;
                let v = t.newest();
                e.wts = v.wts;
                e.rts = t.rts;
                e.old = v.record.clone();
                *slot = t.eviction_slot();
            }
            Err((reason, held)) => {
                if let Some(off) = held {
                    e.offset = Some(off);
                    e.locked = true;
                }
                failed.get_or_insert(reason);
            }
        }
    }
    if let Some(reason) = failed {
        ctx.begin_release(co.now());
        common::release_ws(co, ctx, co.primitive(Stage::Release)).await;
        return Err(reason);
    }

    common::execute(co, ctx).await;

    ctx.ledger.enter(Stage::Log, co.now());
    co.log(ctx).await;

    ctx.ledger.enter(Stage::Commit, co.now());
    let prim = co.primitive(Stage::Commit);
    join_all(
        ctx.ws
            .iter()
            .zip(&slots)
            .map(|(e, &slot)| common::write_unlock(co, e.key, e.node, e.offset.unwrap(), prim, slot, ctts, &e.new)),
    )
    .await;
    for e in &mut ctx.ws {
        e.locked = false;
    }
    Ok(ctts)
}
