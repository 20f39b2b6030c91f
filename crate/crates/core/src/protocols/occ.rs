//! Optimistic concurrency control: read without locks, lock the write set,
//! validate the read set, then install.

use futures::future::{join_all, LocalBoxFuture};

use super::common::{self, first_err, lock_read, read_tuple};
use crate::netsim::VerbRequest;
use crate::store::{LOCK_OFFSET, RTS_OFFSET};
use crate::txncore::{AbortReason, Coordinator, Primitive, Stage, TxnContext};

pub fn attempt<'a>(co: &'a Coordinator, ctx: &'a mut TxnContext) -> LocalBoxFuture<'a, Result<u64, AbortReason>> {
    Box::pin(run(co, ctx))
}

async fn run(co: &Coordinator, ctx: &mut TxnContext) -> Result<u64, AbortReason> {
    let ctts = ctx.ctts.0;

    ctx.ledger.enter(Stage::Read, co.now());
    let prim = co.primitive(Stage::Read);
    let (rs, ws) = futures::join!(
        join_all(ctx.rs.iter().map(|e| read_tuple(co, e.key, e.node, e.offset, prim))),
        join_all(ctx.ws.iter().map(|e| read_tuple(co, e.key, e.node, e.offset, prim))),
    );
    if let Some(reason) = first_err(&rs).or(first_err(&ws)) {
        return Err(reason);
    }
    let mut max_wts = 0;
    for (e, r) in ctx.rs.iter_mut().zip(rs) {
        let (off, t) = r.unwrap();
        let v = t.newest();
        e.offset = Some(off);
        e.wts = v.wts;
        e.rts = t.rts;
        e.record = v.record.clone();
        max_wts = max_wts.max(v.wts);
    }
    for (e, r) in ctx.ws.iter_mut().zip(ws) {
        let (off, t) = r.unwrap();
        let v = t.newest();
        e.offset = Some(off);
        e.wts = v.wts;
        e.rts = t.rts;
        e.old = v.record.clone();
        max_wts = max_wts.max(v.wts);
    }

    common::execute(co, ctx).await;

    ctx.ledger.enter(Stage::Lock, co.now());
    let prim = co.primitive(Stage::Lock);
    let locks = join_all(ctx.ws.iter().map(|e| lock_read(co, e.key, e.node, e.offset, prim, ctts))).await;
    let mut failed = None;
    for (e, r) in ctx.ws.iter_mut().zip(locks) {
        match r {
            Ok((_, 0, t)) => {
                e.locked = true;
                if t.newest().wts != e.wts {
                    failed.get_or_insert(AbortReason::WtsChanged);
                }
            }
            Ok(_) => {
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

    ctx.ledger.enter(Stage::Validate, co.now());
    let prim = co.primitive(Stage::Validate);
    let checks = join_all(ctx.rs.iter().map(|e| async move {
        let (lock, wts) = if prim == Primitive::Rpc || co.is_local(e.node) {
            let (_, t) = read_tuple(co, e.key, e.node, e.offset, prim).await?;
            (t.lock, t.newest().wts)
        } else {
            // Lock, rts and the single version's wts are contiguous.
            let off = e.offset.unwrap();
            let c = co.post(e.node, vec![VerbRequest::read(off + LOCK_OFFSET as u64, 24)]).await?;
            let b = c.read(0);
            let word = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
            debug_assert_eq!(RTS_OFFSET, 8);
            (word(0), word(16))
        };
        if lock != 0 || wts != e.wts {
            return Err(AbortReason::Validation);
        }
        Ok(wts)
    }))
    .await;
    if let Some(reason) = first_err(&checks) {
        return abort(co, ctx, reason).await;
    }

    co.adjust_clock(max_wts);
    let commit_ts = co.next_ts().0;

    ctx.ledger.enter(Stage::Log, co.now());
    co.log(ctx).await;

    ctx.ledger.enter(Stage::Commit, co.now());
    let prim = co.primitive(Stage::Commit);
    join_all(ctx.ws.iter().map(|e| common::write_unlock(co, e.key, e.node, e.offset.unwrap(), prim, 0, commit_ts, &e.new))).await;
    for e in &mut ctx.ws {
        e.locked = false;
    }
    Ok(commit_ts)
}

async fn abort(co: &Coordinator, ctx: &mut TxnContext, reason: AbortReason) -> Result<u64, AbortReason> {
    ctx.begin_release(co.now());
    common::release_ws(co, ctx, co.primitive(Stage::Release)).await;
    Err(reason)
}
