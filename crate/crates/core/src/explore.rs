//! Exhaustive exploration of small Paxos configurations.
//!
//! The model is a set of [`Paxos`] cores plus the set of every message sent
//! so far. From each state the scheduler may deliver any sent message to its
//! recipient, again and again or never, or fire a proposer timeout. This
//! covers loss, duplication, reordering and competing ballots; deliveries
//! that change nothing lead back to a known state. Messages a replica sends
//! to itself are handled synchronously, as the replica runtime does.
//!
//! The search is breadth first, so every state is expanded once at its
//! minimal depth; each level is expanded in parallel. States are
//! deduplicated by a 64-bit hash.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::hash::{Hash, Hasher};
use std::sync::{Arc, RwLock};

use bytes::Bytes;

use crate::messages::{InstanceId, Payload, ReplicaId, Value};
use crate::paxos::{Action, Dest, Paxos, ProtocolError};

#[derive(Debug, Clone)]
pub struct ExploreConfig {
    pub replicas: usize,
    /// Replicas `0..proposers` each start with one client value.
    pub proposers: usize,
    /// Phase-1 starts allowed per proposer.
    pub timeouts: u8,
    pub max_depth: u32,
    /// Stop early after this many distinct states.
    pub max_states: usize,
}

impl Default for ExploreConfig {
    fn default() -> ExploreConfig {
        ExploreConfig {
            replicas: 3,
            proposers: 2,
            timeouts: 2,
            max_depth: 40,
            max_states: 20_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Deliver { to: ReplicaId, msg: String },
    Timeout(ReplicaId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub instance: InstanceId,
    pub values: Vec<Value>,
    pub trace: Vec<Step>,
}

#[derive(Debug, Clone, Default)]
pub struct ExploreStats {
    pub states: usize,
    pub transitions: u64,
    pub deepest: u32,
    /// States whose successors were cut by the depth bound.
    pub depth_cut: u64,
    /// States where some instance was decided.
    pub decided_states: u64,
    /// States where two different proposers' values were both decided.
    pub both_decided_states: u64,
    pub truncated: bool,
    pub violation: Option<Violation>,
}

/// Sent messages, numbered by first appearance.
#[derive(Default)]
struct Interner {
    ids: RwLock<HashMap<(u32, Payload), u32>>,
    msgs: RwLock<Vec<(u32, Payload)>>,
}

impl Interner {
    fn id(&self, to: u32, p: &Payload) -> u32 {
        let key = (to, p.clone());
        if let Some(id) = self.ids.read().unwrap().get(&key) {
            return *id;
        }
        let mut ids = self.ids.write().unwrap();
        let mut msgs = self.msgs.write().unwrap();
        *ids.entry(key).or_insert_with(|| {
            msgs.push((to, p.clone()));
            msgs.len() as u32 - 1
        })
    }

    fn get(&self, id: u32) -> (u32, Payload) {
        self.msgs.read().unwrap()[id as usize].clone()
    }
}

#[derive(Clone)]
struct World {
    /// Shared until a step changes them.
    nodes: Vec<Arc<Paxos>>,
    node_fp: Vec<u64>,
    /// Sorted ids of every message sent so far.
    net: Vec<u32>,
    timeouts: Vec<u8>,
}

fn hash_of<T: Hash>(x: &T) -> u64 {
    let mut h = DefaultHasher::new();
    x.hash(&mut h);
    h.finish()
}

impl World {
    fn new(nodes: Vec<Paxos>, timeouts: Vec<u8>) -> World {
        World {
            node_fp: nodes.iter().map(hash_of).collect(),
            nodes: nodes.into_iter().map(Arc::new).collect(),
            net: Vec::new(),
            timeouts,
        }
    }

    fn fingerprint(&self) -> u64 {
        hash_of(&(&self.node_fp, &self.net, &self.timeouts))
    }

    /// Queue the sends in `actions` produced by `from`. Messages a replica
    /// addresses to itself are handled on the spot, as the runtime does.
    fn apply(&mut self, msgs: &Interner, from: usize, actions: Vec<Action>) -> Result<(), ProtocolError> {
        let n = self.nodes.len() as u32;
        let mut local = VecDeque::new();
        let mut pending = actions;
        loop {
            for a in pending.drain(..) {
                let Action::Send(dest, p) = a else {
                    continue;
                };
                let targets = match dest {
                    Dest::To(r) => r.0..r.0 + 1,
                    Dest::All => 0..n,
                };
                for to in targets {
                    if to as usize == from {
                        local.push_back(p.clone());
                    } else {
                        let id = msgs.id(to, &p);
                        if let Err(at) = self.net.binary_search(&id) {
                            self.net.insert(at, id);
                        }
                    }
                }
            }
            let Some(p) = local.pop_front() else {
                self.node_fp[from] = hash_of(&*self.nodes[from]);
                return Ok(());
            };
            Arc::make_mut(&mut self.nodes[from]).handle(&p, &mut pending)?;
        }
    }

    /// Agreement: does node `i` hold a decision some other node contradicts?
    fn check(&self, i: usize) -> Option<(InstanceId, Vec<Value>)> {
        for (j, v) in &self.nodes[i].learner.decided {
            for other in &self.nodes {
                if let Some(w) = other.learner.decided.get(j) {
                    if w != v {
                        return Some((*j, vec![v.clone(), w.clone()]));
                    }
                }
            }
        }
        None
    }
}

pub fn client_value(proposer: usize) -> Value {
    Bytes::from(vec![b'a' + proposer as u8])
}

struct Succ {
    fp: u64,
    world: World,
    conflict: Option<(InstanceId, Vec<Value>)>,
}

fn successors(world: &World, msgs: &Interner, describe: bool) -> Vec<(Option<Step>, Succ)> {
    let mut out = Vec::new();
    let mut push = |w: World, changed: usize, step: Option<Step>, res: Result<(), ProtocolError>| {
        let conflict = match res {
            Err(ProtocolError::ConflictingDecision { instance, existing, incoming }) => Some((instance, vec![existing, incoming])),
            Err(e @ ProtocolError::SpanTooLarge { .. }) => unreachable!("{e}"),
            Ok(()) => w.check(changed),
        };
        out.push((
            step,
            Succ {
                fp: w.fingerprint(),
                world: w,
                conflict,
            },
        ));
    };
    for p in 0..world.timeouts.len() {
        if world.timeouts[p] == 0 {
            continue;
        }
        let mut w = world.clone();
        w.timeouts[p] -= 1;
        let mut actions = Vec::new();
        Arc::make_mut(&mut w.nodes[p]).start_phase1(&mut actions);
        let res = w.apply(msgs, p, actions);
        push(w, p, describe.then_some(Step::Timeout(ReplicaId(p as u32))), res);
    }
    for &id in &world.net {
        let (to, payload) = msgs.get(id);
        let to = to as usize;
        let mut w = world.clone();
        let mut actions = Vec::new();
        let res = Arc::make_mut(&mut w.nodes[to])
            .handle(&payload, &mut actions)
            .and_then(|_| w.apply(msgs, to, actions));
        if res.is_ok() && w.node_fp[to] == world.node_fp[to] && w.net.len() == world.net.len() {
            continue;
        }
        let step = describe.then(|| Step::Deliver {
            to: ReplicaId(to as u32),
            msg: format!("{} {} from {}", payload.msg.name(), payload.instance, payload.sender),
        });
        push(w, to, step, res);
    }
    out
}

fn initial(cfg: &ExploreConfig) -> World {
    let mut nodes: Vec<Paxos> = (0..cfg.replicas as u32).map(|i| Paxos::new(ReplicaId(i), cfg.replicas)).collect();
    for (p, node) in nodes.iter_mut().enumerate().take(cfg.proposers) {
        let mut out = Vec::new();
        node.propose(client_value(p), &mut out);
    }
    World::new(nodes, vec![cfg.timeouts; cfg.proposers])
}

/// Replay the schedule leading to `target` by walking the parent links.
fn trace_to(cfg: &ExploreConfig, msgs: &Interner, parents: &HashMap<u64, u64>, mut target: u64) -> Vec<Step> {
    let mut chain = vec![target];
    while let Some(&p) = parents.get(&target) {
        if p == target {
            break;
        }
        chain.push(p);
        target = p;
    }
    chain.reverse();
    let mut world = initial(cfg);
    let mut steps = Vec::new();
    for fp in &chain[1..] {
        let Some((step, s)) = successors(&world, msgs, true).into_iter().find(|(_, s)| s.fp == *fp) else {
            break;
        };
        steps.extend(step);
        world = s.world;
    }
    steps
}

/// Breadth-first search over every schedule up to `cfg.max_depth` steps.
pub fn explore(cfg: &ExploreConfig) -> ExploreStats {
    let msgs = Interner::default();
    explore_with(cfg, &msgs, |frontier| crate::sweep::map(frontier, |w| successors(w, &msgs, false)))
}

/// Same search, expanding each level on the calling thread.
pub fn explore_sequential(cfg: &ExploreConfig) -> ExploreStats {
    let msgs = Interner::default();
    explore_with(cfg, &msgs, |frontier| crate::sweep::map_sequential(frontier, |w| successors(w, &msgs, false)))
}

type Expand<'a> = dyn Fn(&[World]) -> Vec<Vec<(Option<Step>, Succ)>> + 'a;

fn explore_with(cfg: &ExploreConfig, msgs: &Interner, expand: impl Fn(&[World]) -> Vec<Vec<(Option<Step>, Succ)>>) -> ExploreStats {
    let expand: &Expand = &expand;
    let start = initial(cfg);
    let client_values: BTreeSet<Value> = (0..cfg.proposers).map(client_value).collect();
    let mut stats = ExploreStats::default();
    let start_fp = start.fingerprint();
    let mut parents: HashMap<u64, u64> = HashMap::new();
    parents.insert(start_fp, start_fp);
    stats.states = 1;
    let mut frontier = vec![start];
    let mut depth = 0;
    while !frontier.is_empty() {
        stats.deepest = depth;
        for w in &frontier {
            let decided: BTreeSet<&Value> = w.nodes.iter().flat_map(|n| n.learner.decided.values()).collect();
            if !decided.is_empty() {
                stats.decided_states += 1;
            }
            if client_values.len() > 1 && client_values.iter().all(|v| decided.contains(v)) {
                stats.both_decided_states += 1;
            }
        }
        if depth >= cfg.max_depth {
            stats.depth_cut = frontier.len() as u64;
            break;
        }
        let mut next = Vec::new();
        // bounded chunks keep the materialised successor lists small
        for chunk in frontier.chunks(4096) {
            let parent_fps: Vec<u64> = chunk.iter().map(World::fingerprint).collect();
            for (succs, parent) in expand(chunk).into_iter().zip(parent_fps) {
                for (_, s) in succs {
                    stats.transitions += 1;
                    if parents.contains_key(&s.fp) {
                        continue;
                    }
                    parents.insert(s.fp, parent);
                    stats.states += 1;
                    if let Some((instance, values)) = s.conflict {
                        stats.violation = Some(Violation {
                            instance,
                            values,
                            trace: trace_to(cfg, msgs, &parents, s.fp),
                        });
                        return stats;
                    }
                    next.push(s.world);
                    if stats.states >= cfg.max_states {
                        stats.truncated = true;
                        return stats;
                    }
                }
            }
        }
        frontier = next;
        depth += 1;
    }
    stats
}
