use std::cell::RefCell;
use std::rc::Rc;

use super::*;

fn sim(nodes: usize, threads: usize, coros: usize) -> Sim {
    Sim::new(ClusterShape::new(nodes, threads, coros), LatencyModel::default(), 7).unwrap()
}

const ECHO: HandlerId = 1;

fn echo(_: &HandlerCtx, payload: &[u8]) -> HandlerReply {
    HandlerReply::Reply(payload.to_vec())
}

#[test]
fn shape_limits_are_enforced() {
    assert!(ClusterShape::new(0, 1, 1).validate().is_err());
    assert!(ClusterShape::new(257, 1, 1).validate().is_err());
    assert!(ClusterShape::new(256, 256, 256).validate().is_ok());
}

#[test]
fn first_region_starts_at_zero_and_empty_is_rejected() {
    let s = sim(2, 1, 1);
    let r = s.register_region(0, 4096).unwrap();
    assert_eq!((r.owner, r.base, r.len), (0, 0, 4096));
    let a = s.register_region(0, 64).unwrap();
    let b = s.register_region(0, 64).unwrap();
    assert!(a.end() <= b.base);
    assert!(s.register_region(1, 0).is_err());
}

#[test]
fn empty_run_reports_nothing() {
    let report = sim(1, 1, 1).run_until_quiescent().unwrap();
    assert_eq!(report.round_trips, 0);
    assert_eq!(report.end_time, 0);
}

#[test]
fn cas_then_read_observes_the_cas() {
    let s = sim(2, 1, 1);
    let r = s.register_region(1, 64).unwrap();
    s.with_memory(1, |m| m.write_u64(r.base + 8, 0xabc));
    let ep = Endpoint::new(0, 0, 0);
    let s2 = s.clone();
    let out = Rc::new(RefCell::new(None));
    let o = out.clone();
    s.spawn(ep, "t", async move {
        let batch = DoorbellBatch::new(QueuePair::between(ep, 1))
            .with(VerbRequest::cas(r.base, 0, 42))
            .with(VerbRequest::read(r.base, 16));
        let c = s2.post_batch(ep, batch).await.unwrap();
        *o.borrow_mut() = Some((c.cas_old(0), c.read(1).to_vec(), s2.now()));
    });
    let report = s.run_until_quiescent().unwrap();
    let (old, bytes, t) = out.take().unwrap();
    assert_eq!(old, 0);
    assert_eq!(u64::from_le_bytes(bytes[..8].try_into().unwrap()), 42);
    assert_eq!(u64::from_le_bytes(bytes[8..].try_into().unwrap()), 0xabc);
    assert_eq!(t, 2);
    assert_eq!(report.round_trips, 1);
    assert_eq!(report.verbs, 2);
}

#[test]
fn failed_cas_is_a_no_op_and_write_pair_applies() {
    let s = sim(2, 1, 1);
    let r = s.register_region(1, 64).unwrap();
    s.with_memory(1, |m| m.write_u64(r.base, 9));
    let ep = Endpoint::new(0, 0, 0);
    let s2 = s.clone();
    s.spawn(ep, "t", async move {
        let before = s2.with_memory(1, |m| m.image().to_vec());
        let c = s2
            .post_batch(ep, DoorbellBatch::new(QueuePair::between(ep, 1)).with(VerbRequest::cas(r.base, 0, 5)))
            .await
            .unwrap();
        assert_eq!(c.cas_old(0), 9);
        assert_eq!(before, s2.with_memory(1, |m| m.image().to_vec()));
        let batch = DoorbellBatch::new(QueuePair::between(ep, 1))
            .with(VerbRequest::write(r.base + 8, vec![1; 8]))
            .with(VerbRequest::write_u64(r.base, 0));
        s2.post_batch(ep, batch).await.unwrap();
        assert_eq!(s2.with_memory(1, |m| m.read_u64(r.base)), 0);
        assert_eq!(s2.with_memory(1, |m| m.read_u64(r.base + 8)), u64::from_le_bytes([1; 8]));
    });
    assert_eq!(s.run_until_quiescent().unwrap().round_trips, 2);
}

#[test]
fn out_of_bounds_verb_faults() {
    let s = sim(2, 1, 1);
    s.register_region(1, 16).unwrap();
    let ep = Endpoint::new(0, 0, 0);
    let s2 = s.clone();
    s.spawn(ep, "t", async move {
        let batch = DoorbellBatch::new(QueuePair::between(ep, 1))
            .with(VerbRequest::read(0, 8))
            .with(VerbRequest::read(8, 16));
        let err = s2.post_batch(ep, batch).await.unwrap_err();
        assert_eq!(err.index, 1);
        assert_eq!(err.kind, VerbFaultKind::OutOfBounds);
    });
    s.run_until_quiescent().unwrap();
}

#[test]
fn rpc_echo_and_unknown_handler() {
    let s = sim(2, 1, 1);
    s.register_handler(1, ECHO, Rc::new(echo));
    let ep = Endpoint::new(0, 0, 0);
    let s2 = s.clone();
    s.spawn(ep, "t", async move {
        assert_eq!(s2.rpc_call(ep, 1, ECHO, b"hi".to_vec()).await.unwrap(), b"hi");
        assert_eq!(s2.now(), 4);
        let err = s2.rpc_call(ep, 0, ECHO, vec![]).await.unwrap_err();
        assert_eq!(err, RpcError::UnknownHandler { node: 0, handler: ECHO });
    });
    let report = s.run_until_quiescent().unwrap();
    assert_eq!(report.round_trips, 2);
    assert_eq!(report.rpcs, 2);
}

#[test]
fn handlers_on_one_thread_serialize_on_its_cpu() {
    let s = sim(2, 1, 2);
    let log = Rc::new(RefCell::new(Vec::new()));
    let l = log.clone();
    s.register_handler(
        1,
        ECHO,
        Rc::new(move |ctx: &HandlerCtx, p: &[u8]| {
            l.borrow_mut().push((ctx.sim().now(), p[0]));
            HandlerReply::Reply(vec![])
        }),
    );
    for c in 0..2 {
        let ep = Endpoint::new(0, 0, c);
        let s2 = s.clone();
        s.spawn(ep, "t", async move {
            s2.rpc_call(ep, 1, ECHO, vec![c as u8]).await.unwrap();
        });
    }
    s.run_until_quiescent().unwrap();
    assert_eq!(*log.borrow(), vec![(2, 0), (3, 1)]);
}

#[test]
fn deferred_reply_arrives_after_return_half() {
    let s = sim(2, 1, 1);
    s.register_handler(
        1,
        ECHO,
        Rc::new(|ctx: &HandlerCtx, _: &[u8]| {
            let token = ctx.token();
            ctx.sim().schedule(ctx.sim().now() + 10, Endpoint::event_loop(1, 0), move |sim| {
                sim.reply(&token, b"late".to_vec())
            });
            HandlerReply::Deferred
        }),
    );
    let ep = Endpoint::new(0, 0, 0);
    let s2 = s.clone();
    s.spawn(ep, "t", async move {
        assert_eq!(s2.rpc_call(ep, 1, ECHO, vec![]).await.unwrap(), b"late");
        assert_eq!(s2.now(), 2 + 10 + 2);
    });
    s.run_until_quiescent().unwrap();
}

#[test]
fn deadlock_lists_blocked_tasks() {
    let s = sim(1, 1, 1);
    let signal = Signal::new();
    let n = signal.notified();
    s.spawn(Endpoint::new(0, 0, 0), "stuck", async move { n.await });
    match s.run_until_quiescent() {
        Err(SimError::Deadlock { blocked }) => assert_eq!(blocked, vec!["stuck@n0.t0.c0".to_string()]),
        other => panic!("expected deadlock, got {other:?}"),
    }
}

#[test]
fn time_limit_stops_runaway_tasks() {
    let s = sim(1, 1, 1);
    s.set_time_limit(100);
    let s2 = s.clone();
    s.spawn(Endpoint::new(0, 0, 0), "spin", async move {
        loop {
            s2.sleep(1).await;
        }
    });
    assert!(matches!(s.run_until_quiescent(), Err(SimError::TimeLimit { .. })));
}

#[test]
fn compute_shares_the_thread_cpu() {
    let s = sim(1, 1, 2);
    let ends = Rc::new(RefCell::new(Vec::new()));
    for c in 0..2 {
        let ep = Endpoint::new(0, 0, c);
        let (s2, e) = (s.clone(), ends.clone());
        s.spawn(ep, "t", async move {
            s2.compute(ep, 5).await;
            e.borrow_mut().push(s2.now());
        });
    }
    s.run_until_quiescent().unwrap();
    assert_eq!(*ends.borrow(), vec![5, 10]);
}

#[test]
fn hold_parks_a_verb_until_released() {
    let s = sim(2, 1, 2);
    let r = s.register_region(1, 16).unwrap();
    let hold = Rc::new(s.hold_verb(0, |v| v.kind == VerbKind::Read && v.src.coro == 0));
    let reader = Endpoint::new(0, 0, 0);
    let writer = Endpoint::new(0, 0, 1);
    let s2 = s.clone();
    let seen = Rc::new(RefCell::new(0));
    let seen2 = seen.clone();
    s.spawn(reader, "reader", async move {
        let c = s2
            .post_batch(reader, DoorbellBatch::new(QueuePair::between(reader, 1)).with(VerbRequest::read(r.base, 8)))
            .await
            .unwrap();
        *seen2.borrow_mut() = u64::from_le_bytes(c.read(0).try_into().unwrap());
    });
    let s3 = s.clone();
    let h = hold.clone();
    s.spawn(writer, "writer", async move {
        h.triggered().await;
        s3.post_batch(writer, DoorbellBatch::new(QueuePair::between(writer, 1)).with(VerbRequest::write_u64(r.base, 77)))
            .await
            .unwrap();
        h.release(&s3);
    });
    s.run_until_quiescent().unwrap();
    assert_eq!(*seen.borrow(), 77);
}

fn traced_run(seed: u64) -> (SimReport, Vec<TraceEvent>) {
    let latency = LatencyModel {
        jitter: 3,
        ..LatencyModel::default()
    };
    let s = Sim::new(ClusterShape::new(2, 2, 2), latency, seed).unwrap();
    s.enable_trace();
    s.register_handler(1, ECHO, Rc::new(echo));
    let r = s.register_region(1, 64).unwrap();
    for ep in s.shape().coordinators() {
        let s2 = s.clone();
        s.spawn(ep, "t", async move {
            for i in 0..5u64 {
                let dst = 1 - ep.node;
                if dst == 1 && i % 2 == 0 {
                    let b = DoorbellBatch::new(QueuePair::between(ep, 1)).with(VerbRequest::faa(r.base, 1));
                    s2.post_batch(ep, b).await.unwrap();
                } else {
                    s2.rpc_call(ep, 1, ECHO, vec![i as u8]).await.unwrap();
                }
            }
        });
    }
    let report = s.run_until_quiescent().unwrap();
    (report, s.take_trace())
}

#[test]
fn same_seed_gives_identical_trace() {
    let a = traced_run(3);
    let b = traced_run(3);
    assert_eq!(a, b);
    assert_eq!(a.0.round_trips, a.0.batches + a.0.rpcs);
}
