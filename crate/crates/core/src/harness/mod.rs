//! Experiment runner: a cluster of list replicas under a fault campaign.

pub mod config;
pub mod listapp;
pub mod report;
pub mod sim;
pub mod udp;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::faultinject::{FaultKind, InjectionRecord};
use crate::messages::{ReplicaId, Value};
use crate::replica::{DetectionEvent, DetectionKind, Reaction};

pub use config::{ConfigError, CrashPoint, ExperimentConfig, TransportKind};
pub use listapp::{ListApp, ListOp, Request};
pub use report::{ExperimentReport, FaultStats, FinalStatus, ReplicaSummary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Run one experiment with the configured transport.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    match cfg.transport {
        TransportKind::Sim => sim::run(cfg),
        TransportKind::Udp => udp::run(cfg),
    }
}

/// Injection records and detection events, stamped with the replica-local
/// call counter and incarnation that produced them.
#[derive(Debug, Default)]
pub struct Ledger {
    records: Vec<(u64, u32, InjectionRecord)>,
    events: Vec<(u64, u32, DetectionEvent)>,
}

impl Ledger {
    pub fn record(&mut self, step: u64, incarnation: u32, r: InjectionRecord) {
        self.records.push((step, incarnation, r));
    }

    pub fn event(&mut self, step: u64, incarnation: u32, e: DetectionEvent) {
        self.events.push((step, incarnation, e));
    }

    pub fn merge(&mut self, other: Ledger) {
        self.records.extend(other.records);
        self.events.extend(other.events);
    }

    pub fn records(&self) -> impl Iterator<Item = &InjectionRecord> {
        self.records.iter().map(|(_, _, r)| r)
    }

    pub fn events(&self) -> impl Iterator<Item = &DetectionEvent> {
        self.events.iter().map(|(_, _, e)| e)
    }

    pub fn discarded(&self) -> u64 {
        self.events().filter(|e| e.action == Reaction::Discarded).count() as u64
    }

    /// Match every injection against the detection it caused.
    ///
    /// A corrupted message or log record must be reported by the very call
    /// that consumed it. A state or transition fault is matched with the
    /// first halt of the same replica incarnation at or after the injection.
    /// Latency is the distance in applied instances. Returns per-kind stats
    /// and the number of detections no injection accounts for.
    pub fn score(&self) -> (BTreeMap<FaultKind, FaultStats>, u64) {
        let mut stats: BTreeMap<FaultKind, FaultStats> = FaultKind::ALL.into_iter().map(|k| (k, FaultStats::default())).collect();
        let mut claimed = vec![false; self.events.len()];
        for (step, inc, rec) in &self.records {
            let st = stats.get_mut(&rec.kind).unwrap();
            st.injected += 1;
            let mut candidates = self
                .events
                .iter()
                .enumerate()
                .filter(|(_, (s, i, e))| e.replica == rec.replica && i == inc && s >= step);
            let hit = match rec.kind {
                FaultKind::Message | FaultKind::Storage => {
                    let want = if rec.kind == FaultKind::Message {
                        DetectionKind::MessageCorruption
                    } else {
                        DetectionKind::StorageCorruption
                    };
                    candidates
                        .filter(|(idx, (s, _, e))| s == step && e.kind == want && !claimed[*idx])
                        .map(|(idx, (_, _, e))| (idx, e))
                        .next()
                }
                FaultKind::State | FaultKind::Transition => candidates
                    .find(|(_, (_, _, e))| e.action == Reaction::Halted)
                    .filter(|(_, (_, _, e))| rec.kind.detected_by().contains(&e.kind))
                    .map(|(idx, (_, _, e))| (idx, e)),
            };
            if let Some((idx, ev)) = hit {
                claimed[idx] = true;
                let latency = match (rec.seq, ev.seq) {
                    (Some(a), Some(b)) => b.0.saturating_sub(a.0),
                    _ => 0,
                };
                st.detected += 1;
                st.latency_sum += latency;
                st.latency_max = st.latency_max.max(latency);
            }
        }
        let unattributed = claimed.iter().filter(|c| !**c).count() as u64;
        (stats, unattributed)
    }
}

/// Seeded client workload over the list application.
///
/// Remove and Set are generated only while the list is long enough that no
/// interleaving of the in-flight window can shrink it below two elements, so
/// every operation visibly changes the state.
pub struct Client {
    rng: ChaCha8Rng,
    total: usize,
    window: usize,
    retry: u64,
    next_id: u64,
    net_len: i64,
    outstanding: BTreeMap<u64, (Value, u64)>,
    done: Vec<bool>,
    completed: usize,
}

impl Client {
    pub fn new(seed: u64, total: usize, window: usize, retry: u64) -> Client {
        Client {
            rng: ChaCha8Rng::seed_from_u64(seed),
            total,
            window,
            retry: retry.max(1),
            next_id: 0,
            net_len: 0,
            outstanding: BTreeMap::new(),
            done: vec![false; total],
            completed: 0,
        }
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn finished(&self) -> bool {
        self.completed == self.total
    }

    fn generate(&mut self) -> Value {
        let id = self.next_id;
        self.next_id += 1;
        let tag: String = (0..4).map(|_| self.rng.gen_range(b'a'..=b'z') as char).collect();
        let item = format!("{id}-{tag}");
        let pos = self.rng.gen_range(0..1000u32);
        let op = if self.net_len > 2 * self.window as i64 + 2 && self.rng.gen_bool(0.4) {
            if self.rng.gen_bool(0.5) {
                self.net_len -= 1;
                ListOp::Remove { pos }
            } else {
                ListOp::Set { pos, item }
            }
        } else {
            self.net_len += 1;
            ListOp::Add { pos, item }
        };
        Request { id, op }.encode()
    }

    /// Values to hand to the entry replica at time `now`: fresh requests up to
    /// the window, then resubmissions of requests pending for too long.
    pub fn poll(&mut self, now: u64) -> Vec<Value> {
        let mut out = Vec::new();
        while self.outstanding.len() < self.window && (self.next_id as usize) < self.total {
            let id = self.next_id;
            let v = self.generate();
            self.outstanding.insert(id, (v.clone(), now));
            out.push(v);
        }
        for (v, sent) in self.outstanding.values_mut() {
            if now.saturating_sub(*sent) >= self.retry {
                *sent = now;
                out.push(v.clone());
            }
        }
        out
    }

    /// Note a delivered operation; returns true the first time a request completes.
    pub fn on_delivered(&mut self, op: &[u8]) -> bool {
        let Some(req) = Request::decode(op) else {
            return false;
        };
        match self.done.get_mut(req.id as usize) {
            Some(d) if !*d => {
                *d = true;
                self.completed += 1;
                self.outstanding.remove(&req.id);
                true
            }
            _ => false,
        }
    }
}

/// Final state of every replica for divergence checks: rolling checksum
/// chain by instance plus the encoded state.
pub struct Snapshot {
    pub chain: BTreeMap<u64, u64>,
    pub state: Vec<u8>,
}

/// Do any two snapshots disagree on a checksum at an instance both applied,
/// or on their encoding when they applied the same prefix?
pub fn diverged(snaps: &[Snapshot]) -> bool {
    for (i, a) in snaps.iter().enumerate() {
        for b in &snaps[i + 1..] {
            if a.chain.iter().any(|(j, c)| b.chain.get(j).is_some_and(|d| d != c)) {
                return true;
            }
            if a.chain.last_key_value() == b.chain.last_key_value() && a.state != b.state {
                return true;
            }
        }
    }
    false
}

pub(crate) fn replica_ids(n: usize) -> impl Iterator<Item = ReplicaId> {
    (0..n as u32).map(ReplicaId)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::InstanceId;

    fn rec(kind: FaultKind, replica: u32, seq: Option<u64>) -> InjectionRecord {
        InjectionRecord {
            id: 0,
            kind,
            replica: ReplicaId(replica),
            seq: seq.map(InstanceId),
            detail: String::new(),
        }
    }

    fn ev(kind: DetectionKind, replica: u32, seq: Option<u64>, action: Reaction) -> DetectionEvent {
        DetectionEvent {
            kind,
            replica: ReplicaId(replica),
            seq: seq.map(InstanceId),
            detail: String::new(),
            action,
        }
    }

    #[test]
    fn scoring_matches_by_kind_replica_and_order() {
        let mut l = Ledger::default();
        l.record(1, 0, rec(FaultKind::Message, 0, None));
        l.event(1, 0, ev(DetectionKind::MessageCorruption, 0, None, Reaction::Discarded));
        l.record(2, 0, rec(FaultKind::State, 1, Some(4)));
        l.event(5, 0, ev(DetectionKind::StateDivergence, 1, Some(5), Reaction::Halted));
        // halted for the wrong reason
        l.record(3, 0, rec(FaultKind::Transition, 2, Some(7)));
        l.event(3, 0, ev(DetectionKind::DigestMismatch, 2, Some(7), Reaction::Halted));
        // detection in a later incarnation does not count
        l.record(4, 0, rec(FaultKind::State, 0, Some(1)));
        l.event(9, 1, ev(DetectionKind::StateDivergence, 0, Some(2), Reaction::Halted));
        let (s, unattributed) = l.score();
        assert_eq!((s[&FaultKind::Message].injected, s[&FaultKind::Message].detected), (1, 1));
        assert_eq!(s[&FaultKind::State].injected, 2);
        assert_eq!(s[&FaultKind::State].detected, 1);
        assert_eq!(s[&FaultKind::State].latency_max, 1);
        assert_eq!(s[&FaultKind::Transition].detected, 0);
        assert_eq!(unattributed, 2);
    }

    #[test]
    fn client_window_and_retry() {
        let mut c = Client::new(1, 40, 4, 10);
        let first = c.poll(0);
        assert_eq!(first.len(), 4);
        assert!(c.poll(5).is_empty());
        assert_eq!(c.poll(10).len(), 4);
        assert!(c.on_delivered(&first[0]));
        assert!(!c.on_delivered(&first[0]));
        assert_eq!(c.poll(11).len(), 1);
        assert_eq!(c.completed(), 1);
    }

    #[test]
    fn client_never_shrinks_short_list() {
        let mut c = Client::new(3, 2000, 16, 1000);
        let mut len = 0i64;
        for t in 0..2000 {
            for v in c.poll(t) {
                let r = Request::decode(&v).unwrap();
                match r.op {
                    ListOp::Add { .. } => len += 1,
                    ListOp::Remove { .. } => {
                        assert!(len > 34);
                        len -= 1
                    }
                    ListOp::Set { .. } => assert!(len > 34),
                }
                c.on_delivered(&v);
            }
        }
        assert!(c.finished());
    }
}
