mod common;

use hardpaxos::explore::{explore, explore_sequential, ExploreConfig};
use hardpaxos::faultinject::FaultKind;
use hardpaxos::harness::{self, sim::SimCluster, CrashPoint, ExperimentConfig, ExperimentReport, FinalStatus};
use hardpaxos::messages::ReplicaId;
use hardpaxos::replica::{DetectionKind, Mode};

fn cfg(ops: usize, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.ops = ops;
    c.set_seed(seed);
    c
}

#[test]
fn fault_free_run_delivers_one_sequence_everywhere() {
    let mut c = SimCluster::new(&cfg(200, 11)).unwrap();
    c.run_to_end();
    let first: Vec<_> = c.deliveries(0).iter().map(|d| (d.seq, d.op.clone(), d.checksum)).collect();
    for i in 1..3 {
        let other: Vec<_> = c.deliveries(i).iter().map(|d| (d.seq, d.op.clone(), d.checksum)).collect();
        assert_eq!(first, other, "replica {i}");
    }
    assert!(first.iter().enumerate().all(|(k, (j, _, _))| j.0 == k as u64));
    let ops: Vec<_> = first.iter().map(|(_, op, _)| op.clone()).collect();
    let sums: Vec<_> = first.iter().map(|(_, _, c)| *c).collect();
    assert_eq!(common::rolling_chain(&ops), sums);
    let report = c.finish();
    assert!(report.success(), "{}", report.render_table());
    assert_eq!(report.decided, 200);
}

#[test]
fn coordinator_crash_is_survived() {
    let mut c = cfg(300, 5);
    c.crashes.push(CrashPoint {
        replica: Some(ReplicaId(0)),
        at_op: 100,
        down_ticks: 200,
    });
    let r = harness::run(&c).unwrap();
    assert!(r.success(), "{}", r.render_table());
    assert_eq!(r.decided, 300);
    assert_eq!(r.replica[0].restarts, 1);
    assert_eq!(r.recovery_checks, 1);
}

#[test]
fn corrupted_log_on_restart_halts_that_replica_only() {
    let mut c = cfg(300, 8);
    c.faults.storage_corrupt_prob = 1.0;
    c.faults.targets = Some([ReplicaId(2)].into());
    c.crashes.push(CrashPoint {
        replica: Some(ReplicaId(2)),
        at_op: 100,
        down_ticks: 40,
    });
    let r = harness::run(&c).unwrap();
    assert_eq!(r.replica[2].status, FinalStatus::Halted(DetectionKind::StorageCorruption));
    let s = r.faults[&FaultKind::Storage];
    assert!(s.injected > 0);
    assert_eq!(s.detected, s.injected);
    assert!(r.success(), "{}", r.render_table());
    assert_eq!(r.decided, 300);
}

#[test]
fn lossy_network_with_duplicates_still_agrees() {
    let mut c = cfg(300, 21);
    c.net.drop_prob = 0.3;
    c.net.dup_prob = 0.2;
    c.net.delay_max = 10;
    let r = harness::run(&c).unwrap();
    assert!(r.success(), "{}", r.render_table());
    assert_eq!(r.decided, 300);
}

#[test]
fn same_seed_same_report() {
    let mut c = cfg(300, 99);
    c.net.drop_prob = 0.1;
    c.faults.msg_corrupt_prob = 0.05;
    c.random_crashes = 3;
    let a = harness::run(&c).unwrap().render_machine();
    let b = harness::run(&c).unwrap().render_machine();
    assert_eq!(a, b);
    c.set_seed(100);
    assert_ne!(a, harness::run(&c).unwrap().render_machine());
}

#[test]
fn machine_report_round_trips() {
    let mut c = cfg(200, 4);
    c.faults.state_corrupt_prob = 0.02;
    let r = harness::run(&c).unwrap();
    let text = r.render_machine();
    let back = ExperimentReport::parse_machine(&text).unwrap();
    assert_eq!(back, r);
    back.check().unwrap();
    let tampered = text.replace("success=", "success=x");
    assert!(ExperimentReport::parse_machine(&tampered).is_err());
}

#[test]
fn message_corruption_is_discarded_not_fatal() {
    let mut c = cfg(300, 6);
    c.faults.msg_corrupt_prob = 0.1;
    let r = harness::run(&c).unwrap();
    let s = r.faults[&FaultKind::Message];
    assert!(s.injected > 0);
    assert_eq!(s.detected, s.injected);
    assert_eq!(s.latency_max, 0);
    assert_eq!(r.halted(), 0);
    assert!(r.success() && !r.compromised(), "{}", r.render_table());
}

#[test]
fn baseline_ignores_checksums() {
    let mut c = cfg(300, 6);
    c.set_mode(Mode::Baseline);
    c.faults.msg_corrupt_prob = 0.1;
    let r = harness::run(&c).unwrap();
    assert_eq!(r.faults[&FaultKind::Message].detected, 0);
    assert!(r.compromised(), "{}", r.render_table());
}

#[test]
fn file_backed_logs_replay_after_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(100, 2);
    c.log_dir = Some(dir.path().to_path_buf());
    let r = harness::run(&c).unwrap();
    assert!(r.success());
    let bytes = std::fs::read(dir.path().join("replica-1.log")).unwrap();
    let replay = hardpaxos::storage::scan(&bytes, true, None).unwrap();
    let rec = hardpaxos::storage::recover_state(&replay.payloads).unwrap();
    assert_eq!(rec.applied().unwrap().0 .0 + 1, r.replica[1].applied);
}

#[test]
fn shallow_state_space_has_no_split_decision() {
    let cfg = ExploreConfig {
        max_depth: 8,
        timeouts: 1,
        ..ExploreConfig::default()
    };
    let a = explore(&cfg);
    assert!(a.violation.is_none());
    assert!(a.decided_states > 0);
    let b = explore_sequential(&cfg);
    assert_eq!((a.states, a.transitions), (b.states, b.transitions));
}

mod campaigns {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn benign_faults_never_break_agreement(
            seed in any::<u64>(),
            drop in 0.0f64..0.3,
            dup in 0.0f64..0.3,
            delay in 1u64..12,
            crash_at in 1usize..80,
        ) {
            let mut c = cfg(80, seed);
            c.net.drop_prob = drop;
            c.net.dup_prob = dup;
            c.net.delay_max = delay;
            c.crashes.push(CrashPoint { replica: None, at_op: crash_at, down_ticks: 60 });
            let r = harness::run(&c).unwrap();
            prop_assert_eq!(r.agreement_violations, 0);
            prop_assert_eq!(r.double_applies, 0);
            prop_assert_eq!(r.recovery_mismatches, 0);
            prop_assert!(!r.divergence);
            prop_assert_eq!(r.decided, 80, "{}", r.render_table());
        }
    }
}

#[test]
fn datagram_transport_runs_on_loopback() {
    let socks: Vec<_> = (0..3).map(|_| std::net::UdpSocket::bind("127.0.0.1:0").unwrap()).collect();
    let mut c = cfg(60, 3);
    c.transport = harness::TransportKind::Udp;
    c.peers = socks.iter().map(|s| s.local_addr().unwrap()).collect();
    c.faults.msg_corrupt_prob = 0.05;
    drop(socks);
    let r = harness::run(&c).unwrap();
    assert_eq!(r.decided, 60, "{}", r.render_table());
    assert_eq!(r.agreement_violations, 0);
    let m = r.faults[&FaultKind::Message];
    assert_eq!(m.detected, m.injected);
}
