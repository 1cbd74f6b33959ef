//! Hardened replica runtime.
//!
//! A [`Replica`] is a single-threaded event loop: the owner feeds it envelopes
//! and clock ticks, then drains its outbox. Every decided operation is applied
//! to two independent copies of the application state; descriptors of both
//! copies are compared before and after each transition, an application
//! semantic check validates the primary copy, and a rolling checksum over the
//! encoded state is logged and exchanged with peers. Any non-recoverable
//! detection halts the replica for good (crash-stop).

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::messages::{digest, seal, Envelope, InstanceId, Msg, Payload, ReplicaId, Value};
use crate::paxos::{quorum, Action, Dest, Paxos, ProtocolError};
use crate::storage::{recover_state, LogDevice, ReadHook, ReplayError, Wal};

/// Application-defined summary of a state; compared byte for byte.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Descriptor(pub Vec<u8>);

/// Deterministic application state machine plugged into a replica.
pub trait StateMachine: Send {
    type State: Clone + Send;

    fn initial(&self) -> Self::State;
    /// Apply `op` in place. Must be total and deterministic.
    fn execute(&self, state: &mut Self::State, op: &[u8]);
    fn describe(&self, state: &Self::State) -> Descriptor;
    /// Did `op` take effect on `after`, given the descriptor captured before it ran?
    fn semantic_check(&self, op: &[u8], before: &Descriptor, after: &Self::State) -> bool;
    fn encode_state(&self, state: &Self::State) -> Vec<u8>;
    fn decode_state(&self, bytes: &[u8]) -> Option<Self::State>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Primary,
    Shadow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DetectionKind {
    MessageCorruption,
    StorageCorruption,
    StateDivergence,
    SemanticFailure,
    DigestMismatch,
    ConflictingDecision,
}

impl DetectionKind {
    pub const ALL: [DetectionKind; 6] = [
        DetectionKind::MessageCorruption,
        DetectionKind::StorageCorruption,
        DetectionKind::StateDivergence,
        DetectionKind::SemanticFailure,
        DetectionKind::DigestMismatch,
        DetectionKind::ConflictingDecision,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectionKind::MessageCorruption => "message_corruption",
            DetectionKind::StorageCorruption => "storage_corruption",
            DetectionKind::StateDivergence => "state_divergence",
            DetectionKind::SemanticFailure => "semantic_failure",
            DetectionKind::DigestMismatch => "digest_mismatch",
            DetectionKind::ConflictingDecision => "conflicting_decision",
        }
    }

    pub fn parse(s: &str) -> Option<DetectionKind> {
        DetectionKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for DetectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reaction {
    /// Corrupted input dropped; the replica keeps running.
    Discarded,
    Halted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionEvent {
    pub kind: DetectionKind,
    pub replica: ReplicaId,
    pub seq: Option<InstanceId>,
    pub detail: String,
    pub action: Reaction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Hardened,
    /// Same code with every validation switched off.
    Baseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Hardened => "hardened",
            Mode::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Running,
    Halted(DetectionKind),
    /// Stopped without a detection: an unhardened node hitting garbage, or an
    /// I/O failure.
    Crashed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RollingChecksum {
    pub value: u64,
    pub at: Option<InstanceId>,
}

/// One link of the rolling checksum chain:
/// `digest(encoded_state ++ previous.to_be_bytes())`.
pub fn roll_checksum(previous: u64, encoded_state: &[u8]) -> u64 {
    let mut buf = Vec::with_capacity(encoded_state.len() + 8);
    buf.extend_from_slice(encoded_state);
    buf.extend_from_slice(&previous.to_be_bytes());
    digest(&buf)
}

/// Interception point inside `apply_transition`: return `true` to skip the
/// execute call on `side`.
pub trait TransitionHook: Send {
    fn suppress(&mut self, replica: ReplicaId, seq: InstanceId, side: Side) -> bool;
}

/// Interception point run after each successful transition, with mutable
/// access to both state copies.
pub trait StateHook<S>: Send {
    fn after_transition(&mut self, replica: ReplicaId, seq: InstanceId, primary: &mut S, shadow: &mut S);
}

/// Clock parameters, in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timing {
    pub gossip_every: u64,
    pub fd_timeout: u64,
    pub retransmit_every: u64,
    pub prepare_timeout: u64,
    /// Checkpoint digests are broadcast every this many applied instances.
    pub digest_every: u64,
    pub digest_window: usize,
    pub catchup_batch: usize,
}

impl Default for Timing {
    fn default() -> Timing {
        Timing {
            gossip_every: 5,
            fd_timeout: 30,
            retransmit_every: 20,
            prepare_timeout: 25,
            digest_every: 10,
            digest_window: 64,
            catchup_batch: 64,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReplicaConfig {
    pub mode: Mode,
    pub timing: Timing,
    pub max_value_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplicaError {
    #[error("replica halted after {0}")]
    Halted(DetectionKind),
    #[error("replica crashed: {0}")]
    Crashed(String),
    #[error("value of {0} bytes exceeds the transport limit")]
    ValueTooLarge(usize),
    #[error("state copies diverged")]
    StateDivergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Submitted {
    Proposed(InstanceId),
    Queued,
    Forwarded(ReplicaId),
}

/// A transition applied by this replica, reported to the owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub seq: InstanceId,
    pub op: Option<Value>,
    pub checksum: u64,
    /// Re-executed from the log during recovery rather than applied live.
    pub replayed: bool,
}

pub struct Replica<A: StateMachine> {
    id: ReplicaId,
    n: usize,
    cfg: ReplicaConfig,
    app: A,
    primary: A::State,
    shadow: A::State,
    paxos: Paxos,
    wal: Option<Wal>,
    rolling: RollingChecksum,
    retained: VecDeque<(InstanceId, u64)>,
    reports: BTreeMap<InstanceId, BTreeMap<ReplicaId, u64>>,
    last_heard: Vec<u64>,
    now: u64,
    last_gossip: u64,
    last_retransmit: u64,
    phase1_at: u64,
    outbox: Vec<(Dest, Envelope)>,
    local: VecDeque<Payload>,
    events: Vec<DetectionEvent>,
    deliveries: Vec<Delivery>,
    status: Status,
    replay_markers: Vec<(InstanceId, u64)>,
    transition_hook: Option<Box<dyn TransitionHook>>,
    state_hook: Option<Box<dyn StateHook<A::State>>>,
}

impl<A: StateMachine> Replica<A> {
    /// Open the replica's log, replay it and rebuild state. A corrupt or
    /// inconsistent log yields a replica that is already halted (hardened) or
    /// crashed (baseline).
    pub fn start(
        id: ReplicaId,
        n: usize,
        app: A,
        device: Box<dyn LogDevice>,
        cfg: ReplicaConfig,
        read_hook: Option<ReadHook<'_>>,
        now: u64,
    ) -> Replica<A> {
        let primary = app.initial();
        let shadow = app.initial();
        let mut paxos = Paxos::new(id, n);
        paxos.set_conflict_checks(cfg.mode == Mode::Hardened);
        let mut r = Replica {
            id,
            n,
            cfg,
            app,
            primary,
            shadow,
            paxos,
            wal: None,
            rolling: RollingChecksum::default(),
            retained: VecDeque::new(),
            reports: BTreeMap::new(),
            last_heard: vec![now; n],
            now,
            last_gossip: now,
            last_retransmit: now,
            phase1_at: now,
            outbox: Vec::new(),
            local: VecDeque::new(),
            events: Vec::new(),
            deliveries: Vec::new(),
            status: Status::Running,
            replay_markers: Vec::new(),
            transition_hook: None,
            state_hook: None,
        };
        r.recover(device, read_hook);
        r
    }

    fn hardened(&self) -> bool {
        self.cfg.mode == Mode::Hardened
    }

    fn recover(&mut self, device: Box<dyn LogDevice>, read_hook: Option<ReadHook<'_>>) {
        let verify = self.hardened();
        let (wal, replay) = match Wal::open(device, verify, read_hook) {
            Ok(x) => x,
            Err(ReplayError::Io(e)) => {
                self.crash(format!("log i/o: {e}"));
                return;
            }
            Err(e) => {
                if verify {
                    self.halt(DetectionKind::StorageCorruption, None, e.to_string());
                } else {
                    self.crash(format!("log replay: {e}"));
                }
                return;
            }
        };
        self.wal = Some(wal);
        let rec = match recover_state(&replay.payloads) {
            Ok(r) => r,
            Err(e) => {
                if verify {
                    self.halt(DetectionKind::StorageCorruption, None, format!("inconsistent log: {e}"));
                } else {
                    self.crash(format!("inconsistent log: {e}"));
                }
                return;
            }
        };
        let mut paxos = Paxos::from_recovered(self.id, self.n, rec.acceptor.clone(), rec.decided.clone());
        paxos.set_conflict_checks(verify);
        self.paxos = paxos;
        self.replay_markers = rec.markers;
        let mut actions = Vec::new();
        self.paxos.deliver_ready(&mut actions);
        self.run_actions(actions);
        self.replay_markers.clear();
        self.finish_event();
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn status(&self) -> &Status {
        &self.status
    }

    pub fn is_running(&self) -> bool {
        self.status == Status::Running
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    pub fn app(&self) -> &A {
        &self.app
    }

    pub fn paxos(&self) -> &Paxos {
        &self.paxos
    }

    pub fn rolling(&self) -> RollingChecksum {
        self.rolling
    }

    pub fn applied(&self) -> Option<InstanceId> {
        self.rolling.at
    }

    pub fn set_transition_hook(&mut self, hook: Box<dyn TransitionHook>) {
        self.transition_hook = Some(hook);
    }

    pub fn set_state_hook(&mut self, hook: Box<dyn StateHook<A::State>>) {
        self.state_hook = Some(hook);
    }

    /// Retained checkpoint digest for `seq`, if still in the window.
    pub fn digest_at(&self, seq: InstanceId) -> Option<u64> {
        self.retained.iter().find(|(j, _)| *j == seq).map(|(_, c)| *c)
    }

    pub fn take_outbox(&mut self) -> Vec<(Dest, Envelope)> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_events(&mut self) -> Vec<DetectionEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn take_deliveries(&mut self) -> Vec<Delivery> {
        std::mem::take(&mut self.deliveries)
    }

    /// Direct access to one state copy, bypassing all checks. Used by fault
    /// injection and tests.
    pub fn state_mut(&mut self, side: Side) -> &mut A::State {
        match side {
            Side::Primary => &mut self.primary,
            Side::Shadow => &mut self.shadow,
        }
    }

    fn check_running(&self) -> Result<(), ReplicaError> {
        match &self.status {
            Status::Running => Ok(()),
            Status::Halted(k) => Err(ReplicaError::Halted(*k)),
            Status::Crashed(s) => Err(ReplicaError::Crashed(s.clone())),
        }
    }

    /// Coordinator in this replica's view: lowest id heard from recently.
    pub fn coordinator(&self) -> ReplicaId {
        (0..self.n as u32)
            .map(ReplicaId)
            .find(|r| *r == self.id || self.now.saturating_sub(self.last_heard[r.0 as usize]) <= self.cfg.timing.fd_timeout)
            .unwrap_or(self.id)
    }

    /// Client entry point.
    pub fn submit(&mut self, value: Value) -> Result<Submitted, ReplicaError> {
        self.check_running()?;
        if let Some(max) = self.cfg.max_value_len {
            if value.len() > max {
                return Err(ReplicaError::ValueTooLarge(value.len()));
            }
        }
        let coord = self.coordinator();
        let result = if coord == self.id {
            let mut actions = Vec::new();
            let r = self.paxos.propose(value, &mut actions);
            self.run_actions(actions);
            r.map_or(Submitted::Queued, Submitted::Proposed)
        } else {
            self.send(Dest::To(coord), Payload::new(InstanceId(0), self.id, Msg::ClientRequest { value }));
            Submitted::Forwarded(coord)
        };
        self.finish_event();
        Ok(result)
    }

    /// Feed one envelope received from `from`.
    pub fn on_envelope(&mut self, from: ReplicaId, env: &Envelope) {
        if !self.is_running() {
            return;
        }
        if let Some(t) = self.last_heard.get_mut(from.0 as usize) {
            *t = self.now;
        }
        let payload = if self.hardened() {
            match env.open() {
                Ok(p) => p,
                Err(e) => {
                    self.events.push(DetectionEvent {
                        kind: DetectionKind::MessageCorruption,
                        replica: self.id,
                        seq: None,
                        detail: format!("from {from}: {e}"),
                        action: Reaction::Discarded,
                    });
                    return;
                }
            }
        } else {
            match env.open_unchecked() {
                Ok(p) => p,
                Err(e) => {
                    self.crash(format!("undecodable message from {from}: {e}"));
                    return;
                }
            }
        };
        if payload.sender.0 as usize >= self.n {
            if !self.hardened() {
                self.crash(format!("message claims unknown sender {}", payload.sender));
            }
            return;
        }
        self.process(payload);
        self.finish_event();
    }

    /// Feed raw datagram bytes; framing errors count as message corruption.
    pub fn on_datagram(&mut self, from: ReplicaId, bytes: &[u8]) {
        if !self.is_running() {
            return;
        }
        match Envelope::from_wire(bytes) {
            Ok(env) => self.on_envelope(from, &env),
            Err(e) if self.hardened() => self.events.push(DetectionEvent {
                kind: DetectionKind::MessageCorruption,
                replica: self.id,
                seq: None,
                detail: format!("from {from}: bad frame: {e}"),
                action: Reaction::Discarded,
            }),
            Err(e) => self.crash(format!("bad frame from {from}: {e}")),
        }
    }

    /// Advance the local clock.
    pub fn on_tick(&mut self, now: u64) {
        if !self.is_running() {
            return;
        }
        self.now = now;
        let t = self.cfg.timing;
        if now.saturating_sub(self.last_gossip) >= t.gossip_every {
            self.last_gossip = now;
            let instance = self.rolling.at.unwrap_or(InstanceId::NONE);
            let checksum = self.rolling.value;
            self.send(Dest::All, Payload::new(instance, self.id, Msg::StateDigest { checksum }));
        }
        let mut actions = Vec::new();
        if self.coordinator() == self.id {
            if self.paxos.is_leading() {
                if now.saturating_sub(self.last_retransmit) >= t.retransmit_every {
                    self.last_retransmit = now;
                    self.paxos.retransmit(&mut actions);
                }
            } else if !self.paxos.is_preparing() {
                self.phase1_at = now;
                self.last_retransmit = now;
                self.paxos.start_phase1(&mut actions);
            } else if now.saturating_sub(self.phase1_at) >= t.prepare_timeout {
                // same ballot, so promises collected so far still count
                self.phase1_at = now;
                self.paxos.retransmit(&mut actions);
            }
        } else {
            if self.paxos.is_leading() || self.paxos.is_preparing() {
                self.paxos.step_down();
            }
            if now.saturating_sub(self.last_retransmit) >= t.retransmit_every {
                self.last_retransmit = now;
                let coord = self.coordinator();
                let queued: Vec<Value> = self.paxos.proposer.queue.drain(..).collect();
                for value in queued {
                    self.send(Dest::To(coord), Payload::new(InstanceId(0), self.id, Msg::ClientRequest { value }));
                }
            }
        }
        self.run_actions(actions);
        self.finish_event();
    }

    fn send(&mut self, dest: Dest, p: Payload) {
        match seal(&p) {
            Ok(env) => match dest {
                Dest::All => {
                    self.outbox.push((Dest::All, env));
                    self.local.push_back(p);
                }
                Dest::To(r) if r == self.id => self.local.push_back(p),
                Dest::To(_) => self.outbox.push((dest, env)),
            },
            Err(e) => self.crash(format!("seal: {e}")),
        }
    }

    fn process(&mut self, payload: Payload) {
        self.local.push_back(payload);
        while let Some(p) = self.local.pop_front() {
            if !self.is_running() {
                break;
            }
            let mut actions = Vec::new();
            match &p.msg {
                Msg::StateDigest { checksum } => self.on_state_digest(p.sender, p.instance, *checksum),
                Msg::ClientRequest { value } => {
                    self.paxos.propose(value.clone(), &mut actions);
                }
                _ => {
                    match self.paxos.handle(&p, &mut actions) {
                        Ok(()) => {}
                        Err(ProtocolError::ConflictingDecision { instance, .. }) => {
                            self.halt(
                                DetectionKind::ConflictingDecision,
                                Some(instance),
                                format!("second value decided for {instance} via {} from {}", p.msg.name(), p.sender),
                            );
                            break;
                        }
                        Err(e @ ProtocolError::SpanTooLarge { .. }) => {
                            self.crash(format!("{e} (from {} via {})", p.sender, p.msg.name()));
                            break;
                        }
                    }
                }
            }
            self.run_actions(actions);
        }
    }

    fn run_actions(&mut self, actions: Vec<Action>) {
        for a in actions {
            if !self.is_running() {
                return;
            }
            match a {
                Action::Persist(p) => self.persist(&p),
                Action::Send(dest, p) => self.send(dest, p),
                Action::Deliver(j, v) => self.apply_transition(j, v),
            }
        }
    }

    fn persist(&mut self, p: &Payload) {
        let res = match (seal(p), self.wal.as_mut()) {
            (Ok(env), Some(wal)) => wal.append(&env).map_err(|e| e.to_string()),
            (Err(e), _) => Err(e.to_string()),
            (_, None) => Err("log not open".to_string()),
        };
        if let Err(e) = res {
            self.crash(format!("persist: {e}"));
        }
    }

    /// Flush barrier, then release the outbox. Nothing leaves a replica that
    /// stopped during the event.
    fn finish_event(&mut self) {
        if self.is_running() {
            if let Some(wal) = self.wal.as_mut() {
                if let Err(e) = wal.flush() {
                    self.crash(format!("flush: {e}"));
                }
            }
        }
        if !self.is_running() {
            self.outbox.clear();
            self.local.clear();
        }
    }

    fn halt(&mut self, kind: DetectionKind, seq: Option<InstanceId>, detail: String) {
        if !self.is_running() {
            return;
        }
        self.events.push(DetectionEvent {
            kind,
            replica: self.id,
            seq,
            detail,
            action: Reaction::Halted,
        });
        self.status = Status::Halted(kind);
        self.outbox.clear();
        self.local.clear();
    }

    fn crash(&mut self, reason: String) {
        if !self.is_running() {
            return;
        }
        self.status = Status::Crashed(reason);
        self.outbox.clear();
        self.local.clear();
    }

    /// Apply decided instance `seq` to both state copies and run every check.
    pub fn apply_transition(&mut self, seq: InstanceId, op: Option<Value>) {
        if !self.is_running() {
            return;
        }
        let replaying = !self.replay_markers.is_empty() && seq <= self.replay_markers.last().unwrap().0;
        let hardened = self.hardened();
        let before = self.app.describe(&self.primary);
        if hardened && self.app.describe(&self.shadow) != before {
            self.halt(
                DetectionKind::StateDivergence,
                Some(seq),
                format!("state copies differ before applying {seq}"),
            );
            return;
        }
        if let Some(op) = &op {
            let mut skip = [false, false];
            if !replaying {
                if let Some(h) = self.transition_hook.as_mut() {
                    skip[0] = h.suppress(self.id, seq, Side::Primary);
                    skip[1] = h.suppress(self.id, seq, Side::Shadow);
                }
            }
            if !skip[0] {
                self.app.execute(&mut self.primary, op);
            }
            if !skip[1] {
                self.app.execute(&mut self.shadow, op);
            }
            if hardened {
                if !self.app.semantic_check(op, &before, &self.primary) {
                    self.halt(
                        DetectionKind::SemanticFailure,
                        Some(seq),
                        format!("operation at {seq} did not take effect"),
                    );
                    return;
                }
                if self.app.describe(&self.primary) != self.app.describe(&self.shadow) {
                    self.halt(
                        DetectionKind::StateDivergence,
                        Some(seq),
                        format!("state copies diverged applying {seq}"),
                    );
                    return;
                }
            }
        }
        let checksum = roll_checksum(self.rolling.value, &self.app.encode_state(&self.primary));
        self.rolling = RollingChecksum {
            value: checksum,
            at: Some(seq),
        };
        self.retained.push_back((seq, checksum));
        while self.retained.len() > self.cfg.timing.digest_window {
            self.retained.pop_front();
        }
        if replaying {
            let logged = self.replay_markers.iter().find(|(j, _)| *j == seq).map(|(_, c)| *c);
            if hardened && logged != Some(checksum) {
                self.halt(
                    DetectionKind::StorageCorruption,
                    Some(seq),
                    format!("re-executed checksum at {seq} disagrees with the log"),
                );
                return;
            }
        } else {
            self.persist(&Payload::new(seq, self.id, Msg::StateDigest { checksum }));
        }
        self.deliveries.push(Delivery {
            seq,
            op,
            checksum,
            replayed: replaying,
        });
        self.evaluate_reports(seq);
        if !self.is_running() {
            return;
        }
        if !replaying {
            if (seq.0 + 1) % self.cfg.timing.digest_every == 0 {
                self.send(Dest::All, Payload::new(seq, self.id, Msg::StateDigest { checksum }));
            }
            if let Some(h) = self.state_hook.as_mut() {
                h.after_transition(self.id, seq, &mut self.primary, &mut self.shadow);
            }
        }
    }

    /// Snapshot of the application state, after checking both copies agree.
    pub fn get_state(&mut self) -> Result<A::State, ReplicaError> {
        self.check_running()?;
        if self.hardened() && self.app.describe(&self.primary) != self.app.describe(&self.shadow) {
            self.halt(
                DetectionKind::StateDivergence,
                self.rolling.at,
                "state copies differ on read".to_string(),
            );
            return Err(ReplicaError::StateDivergence);
        }
        Ok(self.primary.clone())
    }

    fn on_state_digest(&mut self, from: ReplicaId, seq: InstanceId, checksum: u64) {
        if from == self.id {
            return;
        }
        // the coordinator feeds everyone; everyone feeds a lagging coordinator
        if self.coordinator() == self.id || self.coordinator() == from {
            let next = if seq == InstanceId::NONE { InstanceId(0) } else { seq.next() };
            let batch = self.paxos.decisions_from(next, self.cfg.timing.catchup_batch);
            for (j, value) in batch {
                self.send(Dest::To(from), Payload::new(j, self.id, Msg::Decision { value }));
            }
        }
        if !self.hardened() || seq == InstanceId::NONE {
            return;
        }
        let applied = match self.rolling.at {
            Some(a) => a,
            None => return,
        };
        let w = self.cfg.timing.digest_window as u64;
        if seq.0 + w <= applied.0 || seq.0 > applied.0 + w {
            return;
        }
        self.reports.entry(seq).or_default().insert(from, checksum);
        while let Some((&j, _)) = self.reports.first_key_value() {
            if j.0 + w <= applied.0 {
                self.reports.pop_first();
            } else {
                break;
            }
        }
        if seq <= applied {
            self.evaluate_reports(seq);
        }
    }

    /// Majority blame: halt if a value other than ours is reported by a
    /// quorum, or if everyone has reported and ours lacks a quorum.
    fn evaluate_reports(&mut self, seq: InstanceId) {
        if !self.hardened() {
            return;
        }
        let Some(local) = self.digest_at(seq) else {
            return;
        };
        let Some(reports) = self.reports.get(&seq) else {
            return;
        };
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        *counts.entry(local).or_default() += 1;
        for (r, c) in reports {
            if *r != self.id {
                *counts.entry(*c).or_default() += 1;
            }
        }
        let q = quorum(self.n);
        let outvoted = counts.iter().any(|(c, k)| *c != local && *k >= q);
        let everyone = reports.keys().filter(|r| **r != self.id).count() + 1 >= self.n;
        if outvoted || (everyone && counts[&local] < q) {
            self.halt(
                DetectionKind::DigestMismatch,
                Some(seq),
                format!("local state digest at {seq} disagrees with peers"),
            );
        }
    }
}
