//! Tuple operations shared by the protocols, each available as an atomic
//! owner-side function (RPC handler or local call) and as one-sided verbs.

use futures::future::join_all;

use crate::netsim::{HandlerId, NodeId, NodeMemory, VerbRequest};
use crate::store::{GlobalKey, Tuple, LOCK_OFFSET};
use crate::txncore::wire::{Dec, Enc};
use crate::txncore::{AbortReason, Coordinator, Primitive, TupleRef, TxnContext};

pub const H_READ: HandlerId = 10;
pub const H_LOCK_READ: HandlerId = 11;
pub const H_WRITE_UNLOCK: HandlerId = 12;
pub const H_UNLOCK: HandlerId = 13;

pub(crate) fn tuple_of(m: &NodeMemory, t: TupleRef) -> Tuple {
    Tuple::parse(&t.layout, m.read(t.offset, t.layout.size() as u64)).expect("layout-sized read")
}

pub(crate) fn parse(co: &Coordinator, key: GlobalKey, bytes: &[u8]) -> Tuple {
    Tuple::parse(&co.layout(key), bytes).expect("layout-sized read")
}

pub(crate) fn op_read(m: &mut NodeMemory, t: TupleRef, _: &mut Dec) -> Vec<u8> {
    m.read(t.offset, t.layout.size() as u64).to_vec()
}

/// `CAS(lock, 0 -> ctts)` then read. Reply: old lock, tuple bytes.
pub(crate) fn op_lock_read(m: &mut NodeMemory, t: TupleRef, a: &mut Dec) -> Vec<u8> {
    let ctts = a.u64();
    let old = m.cas_u64(t.offset + LOCK_OFFSET as u64, 0, ctts);
    Enc::new().u64(old).bytes(m.read(t.offset, t.layout.size() as u64)).finish()
}

/// Installs `(wts, record)` in `slot` and clears the lock.
pub(crate) fn op_write_unlock(m: &mut NodeMemory, t: TupleRef, a: &mut Dec) -> Vec<u8> {
    let slot = a.u64() as usize;
    let wts = a.u64();
    let rec = a.bytes();
    m.write(t.offset + t.layout.wts_offset(slot) as u64, &t.layout.encode_slot(wts, rec));
    m.write_u64(t.offset + LOCK_OFFSET as u64, 0);
    Vec::new()
}

/// Clears the lock, which must be held by `holder`.
pub(crate) fn op_unlock(m: &mut NodeMemory, t: TupleRef, a: &mut Dec) -> Vec<u8> {
    let holder = a.u64();
    let old = m.read_u64(t.offset + LOCK_OFFSET as u64);
    assert_eq!(old, holder, "unlock by a non-holder");
    m.write_u64(t.offset + LOCK_OFFSET as u64, 0);
    Vec::new()
}

fn use_rpc(co: &Coordinator, node: NodeId, prim: Primitive) -> bool {
    co.is_local(node) || prim == Primitive::Rpc
}

/// Reads the whole tuple. Returns its offset and contents.
pub(crate) async fn read_tuple(
    co: &Coordinator,
    key: GlobalKey,
    node: NodeId,
    known: Option<u64>,
    prim: Primitive,
) -> Result<(u64, Tuple), AbortReason> {
    if use_rpc(co, node, prim) {
        let (off, body) = co.call_tuple(key, node, H_READ, op_read, Vec::new()).await;
        return Ok((off, parse(co, key, &body)));
    }
    let off = co.locate(key, node, known).await?;
    let size = co.layout(key).size() as u64;
    let c = co.post(node, vec![VerbRequest::read(off, size)]).await?;
    Ok((off, parse(co, key, c.read(0))))
}

/// `[CAS lock 0 -> ctts, READ tuple]`. Returns offset, previous lock word
/// (0 means acquired) and the tuple as read after the CAS.
pub(crate) async fn lock_read(
    co: &Coordinator,
    key: GlobalKey,
    node: NodeId,
    known: Option<u64>,
    prim: Primitive,
    ctts: u64,
) -> Result<(u64, u64, Tuple), AbortReason> {
    if use_rpc(co, node, prim) {
        let (off, body) = co.call_tuple(key, node, H_LOCK_READ, op_lock_read, Enc::new().u64(ctts).finish()).await;
        let mut d = Dec::new(&body);
        let old = d.u64();
        return Ok((off, old, parse(co, key, d.bytes())));
    }
    let off = co.locate(key, node, known).await?;
    let size = co.layout(key).size() as u64;
    let c = co
        .post(node, vec![VerbRequest::cas(off + LOCK_OFFSET as u64, 0, ctts), VerbRequest::read(off, size)])
        .await?;
    Ok((off, c.cas_old(0), parse(co, key, c.read(1))))
}

/// `[WRITE slot, WRITE lock <- 0]`, only the second signaled.
#[allow(clippy::too_many_arguments)]
pub(crate) async fn write_unlock(
    co: &Coordinator,
    key: GlobalKey,
    node: NodeId,
    off: u64,
    prim: Primitive,
    slot: usize,
    wts: u64,
    record: &[u8],
) {
    if use_rpc(co, node, prim) {
        let args = Enc::new().u64(slot as u64).u64(wts).bytes(record).finish();
        co.call_tuple(key, node, H_WRITE_UNLOCK, op_write_unlock, args).await;
        return;
    }
    let layout = co.layout(key);
    let reqs = vec![
        VerbRequest::write(off + layout.wts_offset(slot) as u64, layout.encode_slot(wts, record)),
        VerbRequest::write_u64(off + LOCK_OFFSET as u64, 0).signaled(),
    ];
    co.post(node, reqs).await.expect("write-back within the tuple");
}

pub(crate) async fn unlock(co: &Coordinator, key: GlobalKey, node: NodeId, off: u64, prim: Primitive, holder: u64) {
    if use_rpc(co, node, prim) {
        co.call_tuple(key, node, H_UNLOCK, op_unlock, Enc::new().u64(holder).finish()).await;
        return;
    }
    co.post(node, vec![VerbRequest::write_u64(off + LOCK_OFFSET as u64, 0).signaled()])
        .await
        .expect("lock word within the tuple");
}

/// Releases every write-set lock the context holds.
pub(crate) async fn release_ws(co: &Coordinator, ctx: &mut TxnContext, prim: Primitive) {
    let ctts = ctx.ctts.0;
    join_all(
        ctx.ws
            .iter()
            .filter(|e| e.locked)
            .map(|e| unlock(co, e.key, e.node, e.offset.expect("locked entries know their offset"), prim, ctts)),
    )
    .await;
    for e in &mut ctx.ws {
        e.locked = false;
    }
}

/// Runs the transaction body for `spec.exec_time` on this coroutine's CPU.
pub(crate) async fn execute(co: &Coordinator, ctx: &mut TxnContext) {
    ctx.ledger.enter(crate::txncore::Stage::Execute, co.now());
    let t = ctx.spec.exec_time;
    if t > 0 {
        co.sim().compute(co.ep, t).await;
    }
    ctx.execute();
}

/// First error in key order, so abort attribution is deterministic.
pub(crate) fn first_err<T>(results: &[Result<T, AbortReason>]) -> Option<AbortReason> {
    results.iter().find_map(|r| r.as_ref().err().copied())
}
