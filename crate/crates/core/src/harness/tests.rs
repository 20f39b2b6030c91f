use super::*;
use crate::workload::YcsbConfig;

fn hot_ycsb(protocol: ProtocolKind, mode: Mode, seed: u64, txns: usize) -> HarnessConfig {
    HarnessConfig {
        protocol,
        mode,
        workload: WorkloadConfig::Ycsb(YcsbConfig {
            rows_per_thread: 8,
            hot_area_fraction: 1.0,
            hot_access_prob: 0.9,
            ..YcsbConfig::default()
        }),
        nodes: 4,
        threads: 2,
        coroutines: 4,
        txns,
        seed,
        time_limit: Some(1_000_000),
        ..HarnessConfig::default()
    }
}

#[test]
fn every_protocol_and_mode_is_serializable() {
    for p in ProtocolKind::ALL {
        for mode in [Mode::Rpc, Mode::OneSided] {
            eprintln!("{p} {mode:?}");
            let run = run_experiment(&hot_ycsb(p, mode, 7, 300)).unwrap_or_else(|e| panic!("{p} {mode:?}: {e}"));
            assert_eq!(run.commits().len(), 300, "{p} {mode:?}");
            let v = run.verify().unwrap_or_else(|e| panic!("{p} {mode:?}: {e}"));
            assert!(v.passed(), "{p} {mode:?}: {v:?}");
        }
    }
}

#[test]
fn hybrid_code_width_is_checked() {
    let mut c = hot_ycsb(ProtocolKind::Occ, Mode::Hybrid, 1, 10);
    c.hybrid = Some("101".into());
    let err = run_experiment(&c).err().unwrap().to_string();
    assert!(err.contains("occ has 6 stages"), "{err}");
    c.mode = Mode::Hybrid;
    c.hybrid = None;
    assert!(matches!(run_experiment(&c), Err(HarnessError::Config(_))));
}

#[test]
fn percentile_is_nearest_rank() {
    let v: Vec<u64> = (1..=100).collect();
    assert_eq!(report::percentile(&v, 50.0), 50);
    assert_eq!(report::percentile(&v, 99.0), 99);
    assert_eq!(report::percentile(&[7], 99.0), 7);
    assert_eq!(report::percentile(&[], 50.0), 0);
}

#[test]
fn input_hash_matches_git_blob_framing() {
    // sha256 of "blob 0\0", which is git's empty blob id in sha256 mode.
    assert_eq!(input_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
}
