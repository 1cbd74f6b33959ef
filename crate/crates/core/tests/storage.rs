mod common;

use hardpaxos::harness::ListApp;
use hardpaxos::messages::ReplicaId;
use hardpaxos::replica::{DetectionKind, Mode, Replica, ReplicaConfig, Status};
use hardpaxos::storage::{scan, MemDisk, ReplayError, Tail, Wal};
use hardpaxos::sweep;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Outcome {
    Halted(DetectionKind),
    Crashed,
    /// Came up; `torn` says whether the scanner dropped a torn tail.
    Running { records: usize, torn: bool, state: Vec<String> },
}

fn boot(bytes: &[u8], mode: Mode) -> Outcome {
    let disk = MemDisk::from_bytes(bytes.to_vec());
    let cfg = ReplicaConfig {
        mode,
        ..ReplicaConfig::default()
    };
    let mut r = Replica::start(ReplicaId(0), 1, ListApp, Box::new(disk), cfg, None, 0);
    match r.status().clone() {
        Status::Halted(k) => Outcome::Halted(k),
        Status::Crashed(_) => Outcome::Crashed,
        Status::Running => {
            let replay = scan(bytes, mode == Mode::Hardened, None).expect("running replica on a log the scanner rejects");
            Outcome::Running {
                records: replay.payloads.len(),
                torn: matches!(replay.tail, Tail::Torn { .. }),
                state: r.get_state().unwrap(),
            }
        }
    }
}

#[test]
fn intact_log_recovers_applied_state() {
    let (log, _, _) = common::three_record_log();
    assert_eq!(
        boot(&log, Mode::Hardened),
        Outcome::Running {
            records: 3,
            torn: false,
            state: vec!["alpha".to_string()],
        }
    );
}

#[test]
fn every_byte_flip_halts_or_loses_only_the_last_record() {
    let (log, starts, _) = common::three_record_log();
    let results = sweep::byte_variants(&log, |b| boot(b, Mode::Hardened));
    assert_eq!(results.len(), log.len() * 255);
    let mut torn = 0;
    for (at, v, outcome) in &results {
        let trailing = *at >= starts[2];
        match outcome {
            Outcome::Halted(DetectionKind::StorageCorruption) => {}
            Outcome::Running { records: 2, torn: true, state } if trailing => {
                // the marker was lost, so the decision is re-applied live
                assert_eq!(state, &vec!["alpha".to_string()]);
                torn += 1;
            }
            other => panic!("flip at {at} to {v:#04x}: {other:?}"),
        }
    }
    // only raising the last record's length past the end tears it
    assert!(torn > 0 && torn < 4 * 255);
}

#[test]
fn byte_flip_sweep_is_the_same_in_both_execution_paths() {
    let (log, _, _) = common::three_record_log();
    let f = |b: &[u8]| scan(b, true, None).map(|r| r.payloads.len()).map_err(|e| e.to_string());
    assert_eq!(sweep::byte_variants(&log, f), sweep::byte_variants_sequential(&log, f));
}

#[test]
fn every_tail_truncation_recovers_the_complete_prefix() {
    let (log, starts, _) = common::three_record_log();
    let bounds = [starts[0], starts[1], starts[2], log.len()];
    for cut in 0..=log.len() {
        let complete = bounds.iter().filter(|b| **b <= cut).count() - 1;
        let replay = scan(&log[..cut], true, None).unwrap();
        assert_eq!(replay.payloads.len(), complete, "cut {cut}");
        assert_eq!(replay.valid_len as usize, bounds[complete]);
        assert_eq!(matches!(replay.tail, Tail::Torn { .. }), !bounds.contains(&cut));
        let expect = if complete >= 2 { vec!["alpha".to_string()] } else { vec![] };
        match boot(&log[..cut], Mode::Hardened) {
            Outcome::Running { state, .. } => assert_eq!(state, expect, "cut {cut}"),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
}

#[test]
fn open_cuts_a_torn_tail_and_keeps_appending() {
    let (log, starts, _) = common::three_record_log();
    let disk = MemDisk::from_bytes(log[..starts[2] + 5].to_vec());
    let (mut wal, replay) = Wal::open(Box::new(disk.clone()), true, None).unwrap();
    assert_eq!(replay.payloads.len(), 2);
    assert_eq!(disk.durable_bytes(), log[..starts[2]]);
    let third = hardpaxos::messages::Envelope::from_wire(&log[starts[2]..]).unwrap();
    wal.append_sync(&third).unwrap();
    assert_eq!(disk.durable_bytes(), log);
}

#[test]
fn mid_log_overrun_is_corruption_not_a_torn_tail() {
    let (mut log, starts, _) = common::three_record_log();
    log[starts[0]] = 0x10;
    match scan(&log, true, None) {
        Err(ReplayError::Corrupt { index: 0, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn unverified_replay_crashes_or_silently_accepts_flips() {
    let (log, starts, _) = common::three_record_log();
    let results = sweep::byte_variants(&log[..starts[2]], |b| boot(b, Mode::Baseline));
    let accepted = results.iter().filter(|(_, _, o)| matches!(o, Outcome::Running { .. })).count();
    assert!(results.iter().all(|(_, _, o)| !matches!(o, Outcome::Halted(_))));
    assert!(accepted > 0);
}

#[test]
fn crash_drops_unflushed_bytes() {
    let disk = MemDisk::new();
    let (log, starts, _) = common::three_record_log();
    let (mut wal, _) = Wal::open(Box::new(disk.clone()), true, None).unwrap();
    let first = hardpaxos::messages::Envelope::from_wire(&log[..starts[1]]).unwrap();
    wal.append_sync(&first).unwrap();
    wal.append(&first).unwrap();
    assert!(disk.pending_len() > 0);
    disk.crash();
    assert_eq!(disk.durable_bytes(), log[..starts[1]]);
}
