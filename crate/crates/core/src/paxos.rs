//! Multi-instance Paxos with a stable coordinator.
//!
//! The engine is a pure state machine: handlers consume verified payloads and
//! push [`Action`]s. The owner must execute every `Persist` (and flush it)
//! before releasing any `Send` produced by the same call; `Deliver` actions
//! come out in instance order with no gaps.
//!
//! Acceptors keep one promised ballot covering every instance. A prepare for
//! instance `s` asks for all instances `>= s`; the acceptor answers with one
//! promise per instance in `[s, horizon]`, where `horizon` is its highest
//! instance holding an accepted value. Once a coordinator has complete answers
//! from a quorum it knows every instance above the largest horizon is fresh
//! and skips phase 1 for them until it is preempted.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::messages::{Ballot, InstanceId, Msg, Payload, ReplicaId, Value};

/// Majority quorum size for `n` replicas.
pub fn quorum(n: usize) -> usize {
    n / 2 + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dest {
    To(ReplicaId),
    /// Every replica, the sender included.
    All,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Persist(Payload),
    Send(Dest, Payload),
    /// Next instance in order. `None` is a no-op slot: a gap filler or a
    /// value that was already delivered at an earlier instance.
    Deliver(InstanceId, Option<Value>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("instance {instance} already decided with a different value")]
    ConflictingDecision {
        instance: InstanceId,
        existing: Value,
        incoming: Value,
    },
    /// A prepare or promise asks for more consecutive instances than a real
    /// process could hold. Only reachable from damaged input.
    #[error("instance span {from}..{to} is too large")]
    SpanTooLarge { from: InstanceId, to: InstanceId },
}

/// Longest instance range phase 1 will walk in one step.
pub const MAX_SPAN: u64 = 1 << 12;

fn check_span(from: InstanceId, to: InstanceId) -> Result<(), ProtocolError> {
    if to.0.saturating_sub(from.0) >= MAX_SPAN {
        return Err(ProtocolError::SpanTooLarge { from, to });
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct AcceptorState {
    pub promised: Ballot,
    pub accepted: BTreeMap<InstanceId, (Ballot, Value)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct PromiseSet {
    pub horizon: InstanceId,
    pub got: BTreeMap<InstanceId, Option<(Ballot, Value)>>,
}

impl PromiseSet {
    fn complete(&self, from: InstanceId) -> bool {
        from > self.horizon || (self.got.range(from..=self.horizon).count() as u64) == self.horizon.0 - from.0 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Phase {
    Idle,
    Preparing {
        from: InstanceId,
        promises: BTreeMap<ReplicaId, PromiseSet>,
    },
    Leading,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProposerState {
    pub ballot: Ballot,
    pub highest_seen: Ballot,
    pub phase: Phase,
    pub next: InstanceId,
    pub inflight: BTreeMap<InstanceId, Value>,
    pub queue: VecDeque<Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct LearnerState {
    pub decided: BTreeMap<InstanceId, Value>,
    pub delivered_upto: Option<InstanceId>,
    votes: BTreeMap<InstanceId, BTreeMap<(Ballot, Value), BTreeSet<ReplicaId>>>,
    decided_values: BTreeSet<Value>,
    delivered_values: BTreeSet<Value>,
}

impl LearnerState {
    pub fn next_to_deliver(&self) -> InstanceId {
        self.delivered_upto.map_or(InstanceId(0), InstanceId::next)
    }

    /// Lowest instance without a known decision.
    pub fn first_undecided(&self) -> InstanceId {
        let mut j = self.next_to_deliver();
        while self.decided.contains_key(&j) {
            j = j.next();
        }
        j
    }

    pub fn highest_decided(&self) -> Option<InstanceId> {
        self.decided.keys().next_back().copied()
    }

    pub fn is_decided_value(&self, v: &Value) -> bool {
        self.decided_values.contains(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Paxos {
    id: ReplicaId,
    n: usize,
    check_conflicts: bool,
    pub acceptor: AcceptorState,
    pub proposer: ProposerState,
    pub learner: LearnerState,
}

impl Paxos {
    pub fn new(id: ReplicaId, n: usize) -> Paxos {
        Paxos {
            id,
            n,
            check_conflicts: true,
            acceptor: AcceptorState::default(),
            proposer: ProposerState {
                ballot: Ballot::ZERO,
                highest_seen: Ballot::ZERO,
                phase: Phase::Idle,
                next: InstanceId(0),
                inflight: BTreeMap::new(),
                queue: VecDeque::new(),
            },
            learner: LearnerState::default(),
        }
    }

    /// Rebuild from recovered durable state. Nothing is marked delivered; the
    /// first [`Paxos::deliver_ready`] call re-emits every contiguous decision.
    pub fn from_recovered(
        id: ReplicaId,
        n: usize,
        acceptor: AcceptorState,
        decided: BTreeMap<InstanceId, Value>,
    ) -> Paxos {
        let mut p = Paxos::new(id, n);
        p.proposer.highest_seen = acceptor.promised;
        p.proposer.ballot = Ballot {
            round: acceptor.promised.round,
            proposer: id,
        };
        p.learner.decided_values = decided.values().cloned().collect();
        p.learner.decided = decided;
        p.acceptor = acceptor;
        p
    }

    /// Disable conflicting-decision detection (unhardened behaviour: the
    /// first decision wins silently).
    pub fn set_conflict_checks(&mut self, on: bool) {
        self.check_conflicts = on;
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn cluster_size(&self) -> usize {
        self.n
    }

    pub fn is_leading(&self) -> bool {
        matches!(self.proposer.phase, Phase::Leading)
    }

    pub fn is_preparing(&self) -> bool {
        matches!(self.proposer.phase, Phase::Preparing { .. })
    }

    fn payload(&self, instance: InstanceId, msg: Msg) -> Payload {
        Payload::new(instance, self.id, msg)
    }

    pub fn handle(&mut self, p: &Payload, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        match &p.msg {
            Msg::Prepare { ballot } => return self.on_prepare(p.sender, p.instance, *ballot, out),
            Msg::Promise {
                ballot,
                accepted,
                horizon,
            } => return self.on_promise(p.sender, p.instance, *ballot, accepted.clone(), *horizon, out),
            Msg::Propose { ballot, value } => {
                self.on_propose(p.sender, p.instance, *ballot, value.clone(), out)
            }
            Msg::Accepted { ballot, value } => {
                return self.on_accepted(p.sender, p.instance, *ballot, value.clone(), out)
            }
            Msg::Decision { value } => return self.on_decision(p.instance, value.clone(), out),
            Msg::Nack { promised } => self.on_nack(*promised),
            Msg::ClientRequest { value } => {
                self.propose(value.clone(), out);
            }
            Msg::StateDigest { .. } => {}
        }
        Ok(())
    }

    fn observe(&mut self, b: Ballot) {
        if b > self.proposer.highest_seen {
            self.proposer.highest_seen = b;
        }
    }

    pub fn on_prepare(&mut self, from: ReplicaId, s: InstanceId, b: Ballot, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        self.observe(b);
        if b < self.acceptor.promised {
            out.push(Action::Send(
                Dest::To(from),
                self.payload(
                    s,
                    Msg::Nack {
                        promised: self.acceptor.promised,
                    },
                ),
            ));
            return Ok(());
        }
        let horizon = self
            .acceptor
            .accepted
            .range(s..)
            .next_back()
            .map_or(s, |(j, _)| *j);
        check_span(s, horizon)?;
        if b > self.acceptor.promised {
            self.acceptor.promised = b;
            out.push(Action::Persist(self.payload(
                s,
                Msg::Promise {
                    ballot: b,
                    accepted: None,
                    horizon,
                },
            )));
        }
        let mut j = s;
        while j <= horizon {
            let accepted = self.acceptor.accepted.get(&j).cloned();
            out.push(Action::Send(
                Dest::To(from),
                self.payload(
                    j,
                    Msg::Promise {
                        ballot: b,
                        accepted,
                        horizon,
                    },
                ),
            ));
            j = j.next();
        }
        Ok(())
    }

    pub fn on_promise(
        &mut self,
        from: ReplicaId,
        j: InstanceId,
        b: Ballot,
        accepted: Option<(Ballot, Value)>,
        horizon: InstanceId,
        out: &mut Vec<Action>,
    ) -> Result<(), ProtocolError> {
        let quorum = quorum(self.n);
        let ready = match &mut self.proposer.phase {
            Phase::Preparing { from: s, promises } if b == self.proposer.ballot && j >= *s => {
                let entry = promises.entry(from).or_default();
                entry.horizon = entry.horizon.max(horizon);
                entry.got.insert(j, accepted);
                let s = *s;
                promises.values().filter(|ps| ps.complete(s)).count() >= quorum
            }
            _ => false,
        };
        if ready {
            self.become_leader(out)?;
        }
        Ok(())
    }

    fn become_leader(&mut self, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        let Phase::Preparing { from, promises } =
            std::mem::replace(&mut self.proposer.phase, Phase::Leading)
        else {
            return Ok(());
        };
        let complete: Vec<&PromiseSet> = promises.values().filter(|ps| ps.complete(from)).collect();
        // instances past the highest accepted value are free; holes below it get no-ops
        let top = complete
            .iter()
            .filter_map(|ps| ps.got.iter().rev().find(|(j, a)| **j >= from && a.is_some()).map(|(j, _)| *j))
            .max();
        if let Some(t) = top {
            check_span(from, t)?;
        }
        let ballot = self.proposer.ballot;
        let mut j = from;
        while top.is_some_and(|t| j <= t) {
            if !self.learner.decided.contains_key(&j) {
                let adopted = complete
                    .iter()
                    .filter_map(|ps| ps.got.get(&j).cloned().flatten())
                    .max_by(|a, b| a.0.cmp(&b.0))
                    .map(|(_, v)| v)
                    .unwrap_or_default();
                self.proposer.inflight.insert(j, adopted.clone());
                out.push(Action::Send(
                    Dest::All,
                    self.payload(j, Msg::Propose { ballot, value: adopted }),
                ));
            }
            j = j.next();
        }
        let mut next = top.map_or(from, |t| t.next());
        if let Some(h) = self.learner.highest_decided() {
            next = next.max(h.next());
        }
        self.proposer.next = next;
        let adopted: BTreeSet<Value> = self.proposer.inflight.values().cloned().collect();
        let queued: Vec<Value> = self.proposer.queue.drain(..).collect();
        for v in queued {
            if !adopted.contains(&v) {
                self.propose(v, out);
            }
        }
        Ok(())
    }

    pub fn on_nack(&mut self, promised: Ballot) {
        self.observe(promised);
        if promised > self.proposer.ballot && !matches!(self.proposer.phase, Phase::Idle) {
            self.step_down();
        }
    }

    /// Give up coordinatorship; unfinished client values go back to the queue.
    pub fn step_down(&mut self) {
        self.proposer.phase = Phase::Idle;
        let inflight = std::mem::take(&mut self.proposer.inflight);
        for v in inflight.into_values().rev() {
            if !v.is_empty() && !self.learner.is_decided_value(&v) && !self.proposer.queue.contains(&v) {
                self.proposer.queue.push_front(v);
            }
        }
    }

    /// Start (or restart) phase 1 with a ballot above everything seen so far.
    pub fn start_phase1(&mut self, out: &mut Vec<Action>) {
        self.step_down();
        let round = self
            .proposer
            .highest_seen
            .round
            .max(self.proposer.ballot.round)
            .max(self.acceptor.promised.round)
            + 1;
        let ballot = Ballot {
            round,
            proposer: self.id,
        };
        self.proposer.ballot = ballot;
        self.observe(ballot);
        let from = self.learner.first_undecided();
        self.proposer.phase = Phase::Preparing {
            from,
            promises: BTreeMap::new(),
        };
        out.push(Action::Send(Dest::All, self.payload(from, Msg::Prepare { ballot })));
    }

    /// Queue or propose a client value. Returns the instance when the value
    /// was proposed right away.
    pub fn propose(&mut self, value: Value, out: &mut Vec<Action>) -> Option<InstanceId> {
        if value.is_empty()
            || self.learner.is_decided_value(&value)
            || self.proposer.inflight.values().any(|v| *v == value)
        {
            return None;
        }
        if !self.is_leading() {
            if !self.proposer.queue.contains(&value) {
                self.proposer.queue.push_back(value);
            }
            return None;
        }
        let j = self.proposer.next;
        self.proposer.next = j.next();
        self.proposer.inflight.insert(j, value.clone());
        out.push(Action::Send(
            Dest::All,
            self.payload(
                j,
                Msg::Propose {
                    ballot: self.proposer.ballot,
                    value,
                },
            ),
        ));
        Some(j)
    }

    /// Re-send whatever the proposer is waiting on.
    pub fn retransmit(&mut self, out: &mut Vec<Action>) {
        match &self.proposer.phase {
            Phase::Idle => {}
            Phase::Preparing { from, .. } => {
                let ballot = self.proposer.ballot;
                out.push(Action::Send(Dest::All, self.payload(*from, Msg::Prepare { ballot })));
            }
            Phase::Leading => {
                let ballot = self.proposer.ballot;
                let resend: Vec<Payload> = self
                    .proposer
                    .inflight
                    .iter()
                    .map(|(j, v)| {
                        self.payload(
                            *j,
                            Msg::Propose {
                                ballot,
                                value: v.clone(),
                            },
                        )
                    })
                    .collect();
                out.extend(resend.into_iter().map(|p| Action::Send(Dest::All, p)));
            }
        }
    }

    pub fn on_propose(&mut self, from: ReplicaId, j: InstanceId, b: Ballot, v: Value, out: &mut Vec<Action>) {
        self.observe(b);
        if b < self.acceptor.promised {
            out.push(Action::Send(
                Dest::To(from),
                self.payload(
                    j,
                    Msg::Nack {
                        promised: self.acceptor.promised,
                    },
                ),
            ));
            return;
        }
        self.acceptor.promised = b;
        if self.acceptor.accepted.get(&j) != Some(&(b, v.clone())) {
            self.acceptor.accepted.insert(j, (b, v.clone()));
            out.push(Action::Persist(self.payload(
                j,
                Msg::Accepted {
                    ballot: b,
                    value: v.clone(),
                },
            )));
        }
        out.push(Action::Send(
            Dest::All,
            self.payload(j, Msg::Accepted { ballot: b, value: v }),
        ));
    }

    pub fn on_accepted(
        &mut self,
        from: ReplicaId,
        j: InstanceId,
        b: Ballot,
        v: Value,
        out: &mut Vec<Action>,
    ) -> Result<(), ProtocolError> {
        self.observe(b);
        let voters = self
            .learner
            .votes
            .entry(j)
            .or_default()
            .entry((b, v.clone()))
            .or_default();
        voters.insert(from);
        if voters.len() >= quorum(self.n) {
            let announce = b.proposer == self.id;
            self.learn(j, v, announce, out)?;
        }
        Ok(())
    }

    pub fn on_decision(&mut self, j: InstanceId, v: Value, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        self.learn(j, v, false, out)
    }

    fn learn(&mut self, j: InstanceId, v: Value, announce: bool, out: &mut Vec<Action>) -> Result<(), ProtocolError> {
        if let Some(existing) = self.learner.decided.get(&j) {
            if *existing != v && self.check_conflicts {
                return Err(ProtocolError::ConflictingDecision {
                    instance: j,
                    existing: existing.clone(),
                    incoming: v,
                });
            }
            return Ok(());
        }
        self.learner.decided.insert(j, v.clone());
        self.learner.decided_values.insert(v.clone());
        out.push(Action::Persist(self.payload(j, Msg::Decision { value: v.clone() })));
        if announce {
            out.push(Action::Send(Dest::All, self.payload(j, Msg::Decision { value: v.clone() })));
        }
        if let Some(mine) = self.proposer.inflight.remove(&j) {
            if mine != v && !mine.is_empty() && !self.learner.is_decided_value(&mine) {
                self.propose(mine, out);
            }
        }
        self.proposer.queue.retain(|q| *q != v);
        self.deliver_ready(out);
        Ok(())
    }

    /// Emit deliveries for every contiguous decided instance not yet delivered.
    pub fn deliver_ready(&mut self, out: &mut Vec<Action>) {
        loop {
            let j = self.learner.next_to_deliver();
            let Some(v) = self.learner.decided.get(&j) else {
                break;
            };
            let slot = if v.is_empty() || self.learner.delivered_values.contains(v) {
                None
            } else {
                self.learner.delivered_values.insert(v.clone());
                Some(v.clone())
            };
            self.learner.delivered_upto = Some(j);
            out.push(Action::Deliver(j, slot));
        }
    }

    /// Decisions in `[from, from + limit)`, for catching up a lagging peer.
    pub fn decisions_from(&self, from: InstanceId, limit: usize) -> Vec<(InstanceId, Value)> {
        self.learner
            .decided
            .range(from..)
            .take(limit)
            .map(|(j, v)| (*j, v.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bytes::Bytes;

    fn r(i: u32) -> ReplicaId {
        ReplicaId(i)
    }

    fn v(s: &str) -> Value {
        Bytes::copy_from_slice(s.as_bytes())
    }

    fn sends(out: &[Action]) -> Vec<&Payload> {
        out.iter()
            .filter_map(|a| match a {
                Action::Send(_, p) => Some(p),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn quorum_arithmetic() {
        assert_eq!(quorum(1), 1);
        assert_eq!(quorum(3), 2);
        assert_eq!(quorum(4), 3);
        assert_eq!(quorum(5), 3);
    }

    #[test]
    fn fresh_acceptor_promises_without_value() {
        let mut p = Paxos::new(r(0), 3);
        let mut out = vec![];
        p.on_prepare(r(1), InstanceId(0), Ballot::new(1, 1), &mut out).unwrap();
        assert!(matches!(out[0], Action::Persist(_)));
        let s = sends(&out);
        assert_eq!(s.len(), 1);
        assert_eq!(
            s[0].msg,
            Msg::Promise {
                ballot: Ballot::new(1, 1),
                accepted: None,
                horizon: InstanceId(0)
            }
        );
    }

    #[test]
    fn stale_prepare_gets_nack_only() {
        let mut p = Paxos::new(r(0), 3);
        let mut out = vec![];
        p.on_prepare(r(2), InstanceId(0), Ballot::new(2, 2), &mut out).unwrap();
        out.clear();
        p.on_prepare(r(1), InstanceId(0), Ballot::new(1, 1), &mut out).unwrap();
        assert_eq!(out.len(), 1);
        assert!(matches!(&sends(&out)[0].msg, Msg::Nack { promised } if *promised == Ballot::new(2, 2)));
        assert_eq!(p.acceptor.promised, Ballot::new(2, 2));
    }

    #[test]
    fn promise_carries_previously_accepted_value() {
        let mut p = Paxos::new(r(0), 3);
        let mut out = vec![];
        p.on_propose(r(1), InstanceId(0), Ballot::new(1, 1), v("x"), &mut out);
        out.clear();
        p.on_prepare(r(2), InstanceId(0), Ballot::new(3, 2), &mut out).unwrap();
        let s = sends(&out);
        assert!(matches!(
            &s[0].msg,
            Msg::Promise { accepted: Some((b, val)), .. } if *b == Ballot::new(1, 1) && *val == v("x")
        ));
    }

    #[test]
    fn stale_propose_ignored() {
        let mut p = Paxos::new(r(0), 3);
        let mut out = vec![];
        p.on_prepare(r(2), InstanceId(0), Ballot::new(2, 2), &mut out).unwrap();
        out.clear();
        p.on_propose(r(1), InstanceId(0), Ballot::new(1, 1), v("x"), &mut out);
        assert!(p.acceptor.accepted.is_empty());
        assert!(out.iter().all(|a| !matches!(a, Action::Persist(_))));
    }

    fn leader_after_promises(n: usize, promises: usize) -> (Paxos, Vec<Action>) {
        let mut p = Paxos::new(r(0), n);
        let mut out = vec![];
        p.propose(v("mine"), &mut out);
        p.start_phase1(&mut out);
        let b = p.proposer.ballot;
        out.clear();
        for i in 0..promises {
            p.on_promise(r(i as u32), InstanceId(0), b, None, InstanceId(0), &mut out).unwrap();
        }
        (p, out)
    }

    #[test]
    fn majority_of_promises_triggers_propose() {
        let (p, out) = leader_after_promises(3, 1);
        assert!(!p.is_leading() && out.is_empty());
        let (p, out) = leader_after_promises(3, 2);
        assert!(p.is_leading());
        assert!(matches!(&sends(&out)[0].msg, Msg::Propose { value, .. } if *value == v("mine")));
        let (p, _) = leader_after_promises(5, 2);
        assert!(!p.is_leading());
        let (p, _) = leader_after_promises(5, 3);
        assert!(p.is_leading());
    }

    #[test]
    fn highest_ballot_accepted_value_is_adopted() {
        let mut p = Paxos::new(r(0), 3);
        let mut out = vec![];
        p.propose(v("mine"), &mut out);
        p.start_phase1(&mut out);
        let b = p.proposer.ballot;
        out.clear();
        p.on_promise(r(1), InstanceId(0), b, Some((Ballot::new(1, 1), v("A"))), InstanceId(0), &mut out).unwrap();
        p.on_promise(r(2), InstanceId(0), b, Some((Ballot::new(2, 2), v("B"))), InstanceId(0), &mut out).unwrap();
        let props: Vec<_> = sends(&out)
            .into_iter()
            .filter_map(|p| match &p.msg {
                Msg::Propose { value, .. } => Some((p.instance, value.clone())),
                _ => None,
            })
            .collect();
        assert_eq!(props, vec![(InstanceId(0), v("B")), (InstanceId(1), v("mine"))]);
    }

    #[test]
    fn gaps_below_horizon_are_filled_with_noops() {
        let mut p = Paxos::new(r(0), 3);
        let mut out = vec![];
        p.start_phase1(&mut out);
        let b = p.proposer.ballot;
        out.clear();
        for j in 0..=2u64 {
            let acc = (j == 2).then(|| (Ballot::new(1, 1), v("late")));
            p.on_promise(r(1), InstanceId(j), b, acc, InstanceId(2), &mut out).unwrap();
        }
        assert!(!p.is_leading());
        p.on_promise(r(2), InstanceId(0), b, None, InstanceId(0), &mut out).unwrap();
        assert!(p.is_leading());
        assert_eq!(p.proposer.inflight[&InstanceId(0)], Value::new());
        assert_eq!(p.proposer.inflight[&InstanceId(2)], v("late"));
        assert_eq!(p.proposer.next, InstanceId(3));
    }

    #[test]
    fn duplicate_accepted_counts_once() {
        let mut p = Paxos::new(r(0), 3);
        let mut out = vec![];
        let b = Ballot::new(1, 1);
        p.on_accepted(r(1), InstanceId(0), b, v("x"), &mut out).unwrap();
        p.on_accepted(r(1), InstanceId(0), b, v("x"), &mut out).unwrap();
        assert!(p.learner.decided.is_empty());
        p.on_accepted(r(2), InstanceId(0), b, v("x"), &mut out).unwrap();
        assert_eq!(p.learner.decided[&InstanceId(0)], v("x"));
    }

    #[test]
    fn out_of_order_decisions_delivered_in_order() {
        let mut p = Paxos::new(r(0), 3);
        let mut out = vec![];
        p.on_decision(InstanceId(1), v("b"), &mut out).unwrap();
        assert!(!out.iter().any(|a| matches!(a, Action::Deliver(..))));
        p.on_decision(InstanceId(0), v("a"), &mut out).unwrap();
        let d: Vec<_> = out
            .iter()
            .filter_map(|a| match a {
                Action::Deliver(j, x) => Some((*j, x.clone())),
                _ => None,
            })
            .collect();
        assert_eq!(d, vec![(InstanceId(0), Some(v("a"))), (InstanceId(1), Some(v("b")))]);
        out.clear();
        p.on_decision(InstanceId(0), v("a"), &mut out).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn conflicting_decision_is_an_error() {
        let mut p = Paxos::new(r(0), 3);
        let mut out = vec![];
        p.on_decision(InstanceId(0), v("a"), &mut out).unwrap();
        let e = p.on_decision(InstanceId(0), v("z"), &mut out).unwrap_err();
        assert!(matches!(e, ProtocolError::ConflictingDecision { instance, .. } if instance == InstanceId(0)));
        p.set_conflict_checks(false);
        p.on_decision(InstanceId(0), v("z"), &mut out).unwrap();
        assert_eq!(p.learner.decided[&InstanceId(0)], v("a"));
    }

    #[test]
    fn repeated_value_is_delivered_as_noop() {
        let mut p = Paxos::new(r(0), 3);
        let mut out = vec![];
        p.on_decision(InstanceId(0), v("a"), &mut out).unwrap();
        p.on_decision(InstanceId(1), v("a"), &mut out).unwrap();
        assert!(out.contains(&Action::Deliver(InstanceId(1), None)));
    }

    #[test]
    fn nack_with_higher_ballot_steps_down() {
        let (mut p, _) = leader_after_promises(3, 2);
        p.on_nack(Ballot::new(9, 2));
        assert!(!p.is_leading());
        assert_eq!(p.proposer.queue.front(), Some(&v("mine")));
        let mut out = vec![];
        p.start_phase1(&mut out);
        assert_eq!(p.proposer.ballot, Ballot::new(10, 0));
    }
}
