//! Logical leases. Each tuple's committed version is valid over
//! `[wts, rts]`; a transaction picks a commit timestamp inside every lease it
//! read, extending leases at commit when needed.
//!
//! One-sided renewal is a CAS on rts alone, so it cannot see a lock taken
//! between its header read and its CAS. When renewals are one-sided, a writer
//! therefore bumps rts once right after locking: any renewal still holding the
//! pre-lock rts then fails its CAS, and one that landed first is covered
//! because the writer commits above the bumped value. rts of a locked tuple
//! is frozen from then on, so readers may trust `[wts, rts]` of a locked
//! tuple.

use futures::future::{join_all, LocalBoxFuture};

use super::common::{self, first_err, lock_read, parse, read_tuple, tuple_of};
use crate::netsim::NodeId;
use crate::store::GlobalKey;
use crate::netsim::{HandlerId, NodeMemory, VerbRequest};
use crate::store::{Tuple, LOCK_OFFSET, RTS_OFFSET};
use crate::txncore::wire::{Dec, Enc};
use crate::txncore::{AbortReason, Coordinator, Primitive, RsEntry, Stage, TupleRef, TxnContext};

pub const H_SUNDIAL_RENEW: HandlerId = 40;
pub const H_SUNDIAL_COMMIT: HandlerId = 41;
pub const H_SUNDIAL_LOCK: HandlerId = 42;

/// Bytes covering lock, rts and the wts of the single version.
const HEADER: u64 = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Header {
    lock: u64,
    rts: u64,
    wts: u64,
}

impl Header {
    fn parse(b: &[u8]) -> Header {
        let w = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        Header {
            lock: w(LOCK_OFFSET),
            rts: w(RTS_OFFSET),
            wts: w(16),
        }
    }
}

/// Atomic renewal at the owner. Reply: 1 on success.
pub(crate) fn op_renew(m: &mut NodeMemory, t: TupleRef, a: &mut Dec) -> Vec<u8> {
    let wts = a.u64();
    let commit_tts = a.u64();
    let tuple = tuple_of(m, t);
    let covered = tuple.rts >= commit_tts;
    let ok = tuple.newest().wts == wts && (covered || tuple.lock == 0);
    if ok && !covered {
        m.write_u64(t.offset + RTS_OFFSET as u64, commit_tts);
    }
    Enc::new().bool(ok).finish()
}

/// CAS-locks the tuple and, if asked and the lock was taken, bumps rts.
/// Reply: old lock, then the tuple after both.
pub(crate) fn op_lock(m: &mut NodeMemory, t: TupleRef, a: &mut Dec) -> Vec<u8> {
    let ctts = a.u64();
    let freeze = a.bool();
    let old = m.cas_u64(t.offset + LOCK_OFFSET as u64, 0, ctts);
    if old == 0 && freeze {
        let rts = t.offset + RTS_OFFSET as u64;
        m.write_u64(rts, m.read_u64(rts) + 1);
    }
    Enc::new().u64(old).bytes(m.read(t.offset, t.layout.size() as u64)).finish()
}

/// Installs the record with lease `[tts, tts]` and unlocks.
pub(crate) fn op_commit(m: &mut NodeMemory, t: TupleRef, a: &mut Dec) -> Vec<u8> {
    let tts = a.u64();
    let rec = a.bytes();
    m.write(t.offset + RTS_OFFSET as u64, &commit_image(t, tts, rec));
    m.write_u64(t.offset + LOCK_OFFSET as u64, 0);
    Vec::new()
}

/// `rts | wts | record`, contiguous from the rts cell.
fn commit_image(t: TupleRef, tts: u64, rec: &[u8]) -> Vec<u8> {
    let mut out = tts.to_le_bytes().to_vec();
    out.extend(t.layout.encode_slot(tts, rec));
    out
}

pub fn attempt<'a>(co: &'a Coordinator, ctx: &'a mut TxnContext) -> LocalBoxFuture<'a, Result<u64, AbortReason>> {
    Box::pin(run(co, ctx))
}

/// Reads the tuple twice in one batch; the copies must carry the same wts.
async fn read(co: &Coordinator, e: &RsEntry) -> Result<(u64, u64, u64, Vec<u8>), AbortReason> {
    let prim = co.primitive(Stage::Read);
    if prim == Primitive::Rpc || co.is_local(e.node) {
        let (off, t) = read_tuple(co, e.key, e.node, e.offset, prim).await?;
        let v = t.newest();
        return Ok((off, v.wts, t.rts, v.record.clone()));
    }
    let off = co.locate(e.key, e.node, e.offset).await?;
    let size = co.layout(e.key).size() as u64;
    let c = co.post(e.node, vec![VerbRequest::read(off, size), VerbRequest::read(off, size)]).await?;
    let first = parse(co, e.key, c.read(0));
    let second = parse(co, e.key, c.read(1));
    if first.newest().wts != second.newest().wts {
        return Err(AbortReason::DoubleRead);
    }
    let v = second.newest();
    Ok((off, v.wts, second.rts, v.record.clone()))
}

/// Extends one lease to cover `commit_tts`.
async fn renew(co: &Coordinator, e: &RsEntry, commit_tts: u64) -> Result<(), AbortReason> {
    let prim = co.primitive(Stage::Renew);
    if prim == Primitive::Rpc || co.is_local(e.node) {
        let args = Enc::new().u64(e.wts).u64(commit_tts).finish();
        let (_, body) = co.call_tuple(e.key, e.node, H_SUNDIAL_RENEW, op_renew, args).await;
        return if Dec::new(&body).bool() { Ok(()) } else { Err(AbortReason::RenewFailed) };
    }
    let off = e.offset.expect("read stage captured the offset");
    let c = co.post(e.node, vec![VerbRequest::read(off, HEADER)]).await?;
    let mut h = Header::parse(c.read(0));
    for _ in 0..co.env.params.max_renew {
        if h.wts != e.wts {
            return Err(AbortReason::RenewFailed);
        }
        if h.rts >= commit_tts {
            return Ok(());
        }
        if h.lock != 0 {
            return Err(AbortReason::RenewFailed);
        }
        let c = co
            .post(
                e.node,
                vec![VerbRequest::cas(off + RTS_OFFSET as u64, h.rts, commit_tts), VerbRequest::read(off, HEADER)],
            )
            .await?;
        if c.cas_old(0) == h.rts {
            // A writer locking after our header read commits above the
            // extension: its rts bump follows the lock.
            return Ok(());
        }
        h = Header::parse(c.read(1));
    }
    Err(AbortReason::RenewFailed)
}

/// Locks one write-set tuple. `Ok` carries the offset, the old lock word
/// and the tuple; with the lock taken, its rts is frozen if it needs to be.
async fn lock(co: &Coordinator, key: GlobalKey, node: NodeId, known: Option<u64>, ctts: u64) -> Result<(u64, u64, Tuple), AbortReason> {
    let freeze = co.primitive(Stage::Renew) == Primitive::OneSided;
    let prim = co.primitive(Stage::Lock);
    if prim == Primitive::Rpc || co.is_local(node) {
        let args = Enc::new().u64(ctts).bool(freeze).finish();
        let (off, body) = co.call_tuple(key, node, H_SUNDIAL_LOCK, op_lock, args).await;
        let mut d = Dec::new(&body);
        let old = d.u64();
        return Ok((off, old, parse(co, key, d.bytes())));
    }
    let (off, old, mut t) = lock_read(co, key, node, known, prim, ctts).await?;
    if old == 0 && freeze {
        let c = co.post(node, vec![VerbRequest::faa(off + RTS_OFFSET as u64, 1)]).await?;
        t.rts = c.faa_old(0) + 1;
    }
    Ok((off, old, t))
}

async fn run(co: &Coordinator, ctx: &mut TxnContext) -> Result<u64, AbortReason> {
    let ctts = ctx.ctts.0;

    ctx.ledger.enter(Stage::Read, co.now());
    let reads = join_all(ctx.rs.iter().map(|e| read(co, e))).await;
    if let Some(reason) = first_err(&reads) {
        return Err(reason);
    }
    let mut max_read_wts = 0;
    for (e, r) in ctx.rs.iter_mut().zip(reads) {
        let (off, wts, rts, record) = r.unwrap();
        e.offset = Some(off);
        e.wts = wts;
        e.rts = rts;
        e.record = record;
        max_read_wts = max_read_wts.max(wts);
    }
    ctx.commit_tts = max_read_wts;

    ctx.ledger.enter(Stage::Lock, co.now());
    let locks = join_all(ctx.ws.iter().map(|e| lock(co, e.key, e.node, e.offset, ctts))).await;
    let mut failed = None;
    for (e, r) in ctx.ws.iter_mut().zip(locks) {
        match r {
            Ok((off, 0, t)) => {
                e.offset = Some(off);
                e.locked = true;
                let v = t.newest();
                e.wts = v.wts;
                e.rts = t.rts;
                e.old = v.record.clone();
                ctx.commit_tts = ctx.commit_tts.max(t.rts + 1);
            }
            Ok((off, _, _)) => {
                e.offset = Some(off);
                failed.get_or_insert(AbortReason::LockHeld);
            }
            Err(reason) => {
                failed.get_or_insert(reason);
            }
        }
    }
    if let Some(reason) = failed {
        return abort(co, ctx, reason).await;
    }

    common::execute(co, ctx).await;

    if !ctx.is_read_only() {
        // Strictly above every version read keeps commit_tts order a valid
        // serial order even when leases are shared; the id suffix makes it
        // unique among writers.
        let floor = ctx.commit_tts.max(max_read_wts + 1);
        ctx.commit_tts = co.clock().at_least(floor).0;
    }
    let commit_tts = ctx.commit_tts;

    ctx.ledger.enter(Stage::Renew, co.now());
    let renewals = join_all(ctx.rs.iter().filter(|e| e.rts < commit_tts).map(|e| renew(co, e, commit_tts))).await;
    if let Some(reason) = first_err(&renewals) {
        return abort(co, ctx, reason).await;
    }
    co.adjust_clock(commit_tts);

    ctx.ledger.enter(Stage::Log, co.now());
    co.log(ctx).await;

    ctx.ledger.enter(Stage::Commit, co.now());
    let prim = co.primitive(Stage::Commit);
    join_all(ctx.ws.iter().map(|e| async move {
        let off = e.offset.unwrap();
        if prim == Primitive::Rpc || co.is_local(e.node) {
            let args = Enc::new().u64(commit_tts).bytes(&e.new).finish();
            co.call_tuple(e.key, e.node, H_SUNDIAL_COMMIT, op_commit, args).await;
        } else {
            let t = TupleRef { offset: off, layout: co.layout(e.key) };
            let reqs = vec![
                VerbRequest::write(off + RTS_OFFSET as u64, commit_image(t, commit_tts, &e.new)),
                VerbRequest::write_u64(off + LOCK_OFFSET as u64, 0).signaled(),
            ];
            co.post(e.node, reqs).await.expect("commit within the tuple");
        }
    }))
    .await;
    for e in &mut ctx.ws {
        e.locked = false;
    }
    Ok(commit_tts)
}

async fn abort(co: &Coordinator, ctx: &mut TxnContext, reason: AbortReason) -> Result<u64, AbortReason> {
    ctx.begin_release(co.now());
    common::release_ws(co, ctx, co.primitive(Stage::Release)).await;
    Err(reason)
}
