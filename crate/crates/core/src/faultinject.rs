//! Probability-driven fault injector.
//!
//! Four hook points: message bytes right after they arrive (checksum kept),
//! state copies between transitions, the execute call of each state copy,
//! and raw log frames between read and verify. Every real change is logged as
//! an [`InjectionRecord`]; a draw that would leave bytes unchanged is re-rolled.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::messages::{Envelope, InstanceId, ReplicaId};
use crate::replica::{DetectionKind, Mode, Side, StateHook, TransitionHook};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultKind {
    Message,
    State,
    Transition,
    Storage,
}

impl FaultKind {
    pub const ALL: [FaultKind; 4] = [FaultKind::Message, FaultKind::State, FaultKind::Transition, FaultKind::Storage];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::Message => "message",
            FaultKind::State => "state",
            FaultKind::Transition => "transition",
            FaultKind::Storage => "storage",
        }
    }

    pub fn parse(s: &str) -> Option<FaultKind> {
        FaultKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Detection kinds that count as catching this fault.
    pub fn detected_by(self) -> &'static [DetectionKind] {
        match self {
            FaultKind::Message => &[DetectionKind::MessageCorruption],
            FaultKind::State => &[DetectionKind::StateDivergence],
            FaultKind::Transition => &[DetectionKind::StateDivergence, DetectionKind::SemanticFailure],
            FaultKind::Storage => &[DetectionKind::StorageCorruption],
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultConfig {
    pub seed: u64,
    pub msg_corrupt_prob: f64,
    pub state_corrupt_prob: f64,
    pub transition_drop_prob: f64,
    pub storage_corrupt_prob: f64,
    /// Replicas eligible for injection; `None` means all.
    pub targets: Option<BTreeSet<ReplicaId>>,
    pub mode: Mode,
}

impl Default for FaultConfig {
    fn default() -> FaultConfig {
        FaultConfig {
            seed: 0,
            msg_corrupt_prob: 0.0,
            state_corrupt_prob: 0.0,
            transition_drop_prob: 0.0,
            storage_corrupt_prob: 0.0,
            targets: None,
            mode: Mode::Hardened,
        }
    }
}

impl FaultConfig {
    /// Campaign with every probability at `p`.
    pub fn uniform(seed: u64, p: f64) -> FaultConfig {
        FaultConfig {
            seed,
            msg_corrupt_prob: p,
            state_corrupt_prob: p,
            transition_drop_prob: p,
            storage_corrupt_prob: p,
            ..FaultConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("msg_corrupt_prob", self.msg_corrupt_prob),
            ("state_corrupt_prob", self.state_corrupt_prob),
            ("transition_drop_prob", self.transition_drop_prob),
            ("storage_corrupt_prob", self.storage_corrupt_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn any_enabled(&self) -> bool {
        self.msg_corrupt_prob > 0.0
            || self.state_corrupt_prob > 0.0
            || self.transition_drop_prob > 0.0
            || self.storage_corrupt_prob > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionRecord {
    pub id: u64,
    pub kind: FaultKind,
    pub replica: ReplicaId,
    /// Last applied instance on the replica when the fault was planted.
    pub seq: Option<InstanceId>,
    pub detail: String,
}

/// State types the injector knows how to damage.
pub trait Corruptible {
    /// Apply one random mutation that really changes the value; describe it.
    fn corrupt(&mut self, rng: &mut ChaCha8Rng) -> String;
}

fn random_string(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(1..=8);
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

impl Corruptible for Vec<String> {
    fn corrupt(&mut self, rng: &mut ChaCha8Rng) -> String {
        let choice = if self.is_empty() { 1 } else { rng.gen_range(0..3) };
        match choice {
            0 => {
                let i = rng.gen_range(0..self.len());
                let old = self.remove(i);
                format!("removed {old:?} at {i}")
            }
            1 => {
                let i = rng.gen_range(0..=self.len());
                let s = random_string(rng);
                let msg = format!("inserted {s:?} at {i}");
                self.insert(i, s);
                msg
            }
            _ => {
                let i = rng.gen_range(0..self.len());
                let mut chars: Vec<char> = self[i].chars().collect();
                if chars.is_empty() {
                    chars.push('x');
                } else {
                    let k = rng.gen_range(0..chars.len());
                    let old = chars[k];
                    let mut c = old;
                    while c == old {
                        c = rng.gen_range(b'a'..=b'z') as char;
                    }
                    chars[k] = c;
                }
                let old = std::mem::replace(&mut self[i], chars.into_iter().collect());
                format!("changed element {i} from {old:?} to {:?}", self[i])
            }
        }
    }
}

pub struct Injector {
    cfg: FaultConfig,
    rng: ChaCha8Rng,
    records: Vec<InjectionRecord>,
    next_id: u64,
}

impl Injector {
    pub fn new(cfg: FaultConfig) -> Injector {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Injector {
            cfg,
            rng,
            records: Vec::new(),
            next_id: 0,
        }
    }

    pub fn config(&self) -> &FaultConfig {
        &self.cfg
    }

    pub fn records(&self) -> &[InjectionRecord] {
        &self.records
    }

    pub fn take_records(&mut self) -> Vec<InjectionRecord> {
        std::mem::take(&mut self.records)
    }

    fn targeted(&self, r: ReplicaId) -> bool {
        self.cfg.targets.as_ref().is_none_or(|t| t.contains(&r))
    }

    fn roll(&mut self, replica: ReplicaId, p: f64) -> bool {
        p > 0.0 && self.targeted(replica) && self.rng.gen_bool(p)
    }

    fn record(&mut self, kind: FaultKind, replica: ReplicaId, seq: Option<InstanceId>, detail: String) {
        let id = self.next_id;
        self.next_id += 1;
        self.records.push(InjectionRecord {
            id,
            kind,
            replica,
            seq,
            detail,
        });
    }

    fn flip_byte(&mut self, bytes: &mut [u8]) -> (usize, u8, u8) {
        let i = self.rng.gen_range(0..bytes.len());
        let old = bytes[i];
        let mut new = old;
        while new == old {
            new = self.rng.gen();
        }
        bytes[i] = new;
        (i, old, new)
    }

    /// Change one body byte of an incoming envelope, keeping its checksum.
    pub fn corrupt_message(&mut self, replica: ReplicaId, env: &Envelope) -> Envelope {
        if env.body().is_empty() || !self.roll(replica, self.cfg.msg_corrupt_prob) {
            return env.clone();
        }
        let mut body = env.body().to_vec();
        let (i, old, new) = self.flip_byte(&mut body);
        self.record(
            FaultKind::Message,
            replica,
            None,
            format!("body byte {i}: {old:#04x} -> {new:#04x}"),
        );
        Envelope::from_parts(body, env.checksum())
    }

    /// Maybe mutate one of the two state copies (side chosen uniformly).
    pub fn corrupt_state<S: Corruptible>(
        &mut self,
        replica: ReplicaId,
        seq: Option<InstanceId>,
        primary: &mut S,
        shadow: &mut S,
    ) -> bool {
        if !self.roll(replica, self.cfg.state_corrupt_prob) {
            return false;
        }
        let (side, target) = if self.rng.gen_bool(0.5) {
            (Side::Primary, primary)
        } else {
            (Side::Shadow, shadow)
        };
        let what = target.corrupt(&mut self.rng);
        self.record(FaultKind::State, replica, seq, format!("{side:?}: {what}"));
        true
    }

    /// Decide whether to skip the execute call for one state copy.
    pub fn drop_transition(&mut self, replica: ReplicaId, seq: InstanceId, side: Side) -> bool {
        if !self.roll(replica, self.cfg.transition_drop_prob) {
            return false;
        }
        self.record(
            FaultKind::Transition,
            replica,
            Some(seq),
            format!("{side:?} execute suppressed at {seq}"),
        );
        true
    }

    /// Flip one byte of a raw log frame.
    pub fn corrupt_storage_read(&mut self, replica: ReplicaId, index: usize, frame: &mut [u8]) -> bool {
        if frame.is_empty() || !self.roll(replica, self.cfg.storage_corrupt_prob) {
            return false;
        }
        let (i, old, new) = self.flip_byte(frame);
        self.record(
            FaultKind::Storage,
            replica,
            None,
            format!("record {index} byte {i}: {old:#04x} -> {new:#04x}"),
        );
        true
    }
}

/// Injector shared by every replica of one experiment; installs as replica hooks.
#[derive(Clone)]
pub struct SharedInjector(Arc<Mutex<Injector>>);

impl SharedInjector {
    pub fn new(cfg: FaultConfig) -> SharedInjector {
        SharedInjector(Arc::new(Mutex::new(Injector::new(cfg))))
    }

    pub fn with<T>(&self, f: impl FnOnce(&mut Injector) -> T) -> T {
        f(&mut self.0.lock().unwrap())
    }
}

impl TransitionHook for SharedInjector {
    fn suppress(&mut self, replica: ReplicaId, seq: InstanceId, side: Side) -> bool {
        self.with(|i| i.drop_transition(replica, seq, side))
    }
}

impl<S: Corruptible + Send> StateHook<S> for SharedInjector {
    fn after_transition(&mut self, replica: ReplicaId, seq: InstanceId, primary: &mut S, shadow: &mut S) {
        self.with(|i| i.corrupt_state(replica, Some(seq), primary, shadow));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::{seal, Msg, Payload};
    use bytes::Bytes;

    fn env() -> Envelope {
        seal(&Payload::new(
            InstanceId(3),
            ReplicaId(1),
            Msg::Decision {
                value: Bytes::from_static(b"hello"),
            },
        ))
        .unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let mut inj = Injector::new(FaultConfig::default());
        let e = env();
        assert_eq!(inj.corrupt_message(ReplicaId(0), &e), e);
        let mut s = vec!["a".to_string()];
        let mut t = s.clone();
        assert!(!inj.corrupt_state(ReplicaId(0), None, &mut s, &mut t));
        assert!(!inj.drop_transition(ReplicaId(0), InstanceId(0), Side::Primary));
        let mut frame = e.to_wire();
        assert!(!inj.corrupt_storage_read(ReplicaId(0), 0, &mut frame));
        assert_eq!(frame, e.to_wire());
        assert!(inj.records().is_empty());
    }

    #[test]
    fn certain_message_corruption_changes_one_body_byte() {
        let mut inj = Injector::new(FaultConfig::uniform(7, 1.0));
        let e = env();
        for _ in 0..50 {
            let c = inj.corrupt_message(ReplicaId(0), &e);
            assert_eq!(c.checksum(), e.checksum());
            let diff = c.body().iter().zip(e.body()).filter(|(a, b)| a != b).count();
            assert_eq!(diff, 1);
            assert!(c.open().is_err());
        }
        assert_eq!(inj.records().len(), 50);
    }

    #[test]
    fn state_corruption_always_changes_state() {
        let mut inj = Injector::new(FaultConfig::uniform(3, 1.0));
        let mut p: Vec<String> = vec![];
        let mut s: Vec<String> = vec![];
        for _ in 0..200 {
            let (bp, bs) = (p.clone(), s.clone());
            assert!(inj.corrupt_state(ReplicaId(0), None, &mut p, &mut s));
            assert!(bp != p || bs != s);
            s = p.clone();
        }
    }

    #[test]
    fn targets_filter_replicas() {
        let mut cfg = FaultConfig::uniform(1, 1.0);
        cfg.targets = Some([ReplicaId(2)].into_iter().collect());
        let mut inj = Injector::new(cfg);
        assert!(!inj.drop_transition(ReplicaId(0), InstanceId(0), Side::Shadow));
        assert!(inj.drop_transition(ReplicaId(2), InstanceId(0), Side::Shadow));
    }

    #[test]
    fn schedule_is_reproducible() {
        let run = || {
            let mut inj = Injector::new(FaultConfig::uniform(42, 0.3));
            let e = env();
            let out: Vec<Envelope> = (0..100).map(|_| inj.corrupt_message(ReplicaId(0), &e)).collect();
            (out, inj.take_records())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_probability_rejected() {
        let mut cfg = FaultConfig::default();
        cfg.state_corrupt_prob = 1.5;
        assert!(cfg.validate().is_err());
    }
}
