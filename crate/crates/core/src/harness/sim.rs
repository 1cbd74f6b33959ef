//! Deterministic single-threaded cluster on the simulated network.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{diverged, replica_ids, Client, ExperimentConfig, ExperimentReport, FinalStatus, HarnessError, Ledger, ListApp, ReplicaSummary, Snapshot};
use crate::faultinject::SharedInjector;
use crate::messages::{InstanceId, ReplicaId, Value};
use crate::paxos::quorum;
use crate::replica::{Delivery, Replica, ReplicaConfig, StateMachine, Status};
use crate::storage::{FileDevice, LogDevice, MemDisk};
use crate::transport::{self, SimNet};

enum Disk {
    Mem(MemDisk),
    File(PathBuf),
}

impl Disk {
    fn device(&self) -> std::io::Result<Box<dyn LogDevice>> {
        Ok(match self {
            Disk::Mem(m) => Box::new(m.clone()),
            Disk::File(p) => Box::new(FileDevice::open(p, false)?),
        })
    }

    fn crash(&self) {
        if let Disk::Mem(m) = self {
            m.crash();
        }
    }
}

struct Slot {
    replica: Option<Replica<ListApp>>,
    disk: Disk,
    incarnation: u32,
    step: u64,
    down_until: Option<u64>,
    restarts: u32,
    crashes: u32,
    chain: BTreeMap<u64, u64>,
    /// Every delivery of the current incarnation, replayed ones included.
    history: Vec<Delivery>,
    last_seq: Option<InstanceId>,
    /// Highest live-applied instance when the replica was last taken down on schedule.
    planned_floor: Option<InstanceId>,
}

impl Slot {
    fn running(&self) -> bool {
        self.replica.as_ref().is_some_and(|r| r.is_running())
    }
}

/// A simulated experiment in progress. Public so tests can drive it tick by tick.
pub struct SimCluster {
    cfg: ExperimentConfig,
    rcfg: ReplicaConfig,
    net: SimNet,
    injector: SharedInjector,
    slots: Vec<Slot>,
    client: Client,
    ledger: Ledger,
    crash_points: Vec<(usize, Option<ReplicaId>, u64)>,
    crash_rng: ChaCha8Rng,
    decided: BTreeMap<u64, Option<Value>>,
    report: ExperimentReport,
    last_progress: u64,
    stall_window: u64,
}

/// Run a complete simulated experiment.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    let mut c = SimCluster::new(cfg)?;
    c.run_to_end();
    Ok(c.finish())
}

impl SimCluster {
    pub fn new(cfg: &ExperimentConfig) -> Result<SimCluster, HarnessError> {
        cfg.validate()?;
        let n = cfg.replicas;
        let mut faults = cfg.faults.clone();
        faults.mode = cfg.mode;
        let mut crash_rng = ChaCha8Rng::seed_from_u64(cfg.crash_seed());
        let mut crash_points: Vec<(usize, Option<ReplicaId>, u64)> =
            cfg.crashes.iter().map(|c| (c.at_op, c.replica, c.down_ticks)).collect();
        for _ in 0..cfg.random_crashes {
            let at = crash_rng.gen_range(1..cfg.ops.max(2));
            let down = crash_rng.gen_range(20..=80);
            crash_points.push((at, None, down));
        }
        crash_points.sort_by_key(|c| c.0);
        crash_points.reverse();
        if let Some(dir) = &cfg.log_dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut slots = Vec::with_capacity(n);
        for id in replica_ids(n) {
            let disk = match &cfg.log_dir {
                Some(dir) => {
                    let p = dir.join(format!("replica-{}.log", id.0));
                    if p.exists() {
                        std::fs::remove_file(&p)?;
                    }
                    Disk::File(p)
                }
                None => Disk::Mem(MemDisk::new()),
            };
            slots.push(Slot {
                replica: None,
                disk,
                incarnation: 0,
                step: 0,
                down_until: Some(0),
                restarts: 0,
                crashes: 0,
                chain: BTreeMap::new(),
                history: Vec::new(),
                last_seq: None,
                planned_floor: None,
            });
        }
        let longest_partition = cfg.net.partitions.iter().map(|p| p.end.saturating_sub(p.start)).max().unwrap_or(0);
        let mut c = SimCluster {
            rcfg: ReplicaConfig {
                mode: cfg.mode,
                timing: cfg.timing,
                max_value_len: None,
            },
            net: SimNet::new(n, cfg.net.clone()),
            injector: SharedInjector::new(faults),
            slots,
            client: Client::new(cfg.workload_seed(), cfg.ops, cfg.window, cfg.client_retry),
            ledger: Ledger::default(),
            crash_points,
            crash_rng,
            decided: BTreeMap::new(),
            report: ExperimentReport::new(cfg.mode, n, cfg.ops, cfg.seed),
            last_progress: 0,
            stall_window: 3000u64.max(longest_partition + 1000).max(cfg.restart_delay * 4),
            cfg: cfg.clone(),
        };
        for i in 0..n {
            c.start_replica(i)?;
        }
        Ok(c)
    }

    pub fn now(&self) -> u64 {
        self.net.now()
    }

    pub fn replica(&self, i: usize) -> Option<&Replica<ListApp>> {
        self.slots[i].replica.as_ref()
    }

    /// Deliveries made by replica `i` since it last started.
    pub fn deliveries(&self, i: usize) -> &[Delivery] {
        &self.slots[i].history
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Decided sequence observed so far, by instance.
    pub fn decided(&self) -> &BTreeMap<u64, Option<Value>> {
        &self.decided
    }

    pub fn report(&self) -> &ExperimentReport {
        &self.report
    }

    fn start_replica(&mut self, i: usize) -> Result<(), HarnessError> {
        let id = ReplicaId(i as u32);
        let n = self.cfg.replicas;
        let now = self.net.now();
        let device = self.slots[i].disk.device()?;
        let inj = self.injector.clone();
        let mut hook = move |idx: usize, frame: &mut Vec<u8>| {
            inj.with(|x| x.corrupt_storage_read(id, idx, frame));
        };
        let mut r = Replica::start(id, n, ListApp, device, self.rcfg.clone(), Some(&mut hook), now);
        r.set_transition_hook(Box::new(self.injector.clone()));
        r.set_state_hook(Box::new(self.injector.clone()));
        let slot = &mut self.slots[i];
        if slot.incarnation > 0 {
            slot.restarts += 1;
        }
        slot.incarnation += 1;
        slot.chain.clear();
        slot.history.clear();
        slot.last_seq = None;
        slot.down_until = None;
        slot.replica = Some(r);
        self.after_call(i);
        self.check_recovery(i);
        self.last_progress = now;
        Ok(())
    }

    /// Compare a freshly recovered replica with a clean re-execution of the
    /// decided prefix it claims to have applied.
    fn check_recovery(&mut self, i: usize) {
        if self.slots[i].incarnation < 2 {
            return;
        }
        let Some(r) = self.slots[i].replica.as_mut() else {
            return;
        };
        if !r.is_running() {
            return;
        }
        let applied = r.applied();
        let Ok(state) = r.get_state() else {
            self.after_call(i);
            return;
        };
        let app = ListApp;
        let mut fresh = app.initial();
        if let Some(a) = applied {
            for (_, op) in self.decided.range(..=a.0) {
                if let Some(op) = op {
                    app.execute(&mut fresh, op);
                }
            }
        }
        self.report.recovery_checks += 1;
        if app.encode_state(&fresh) != app.encode_state(&state) {
            self.report.recovery_mismatches += 1;
        }
    }

    /// Collect everything a replica produced during the last call.
    fn after_call(&mut self, i: usize) {
        let now = self.net.now();
        let slot = &mut self.slots[i];
        slot.step += 1;
        let (step, inc) = (slot.step, slot.incarnation);
        for rec in self.injector.with(|x| x.take_records()) {
            self.ledger.record(step, inc, rec);
        }
        let Some(r) = slot.replica.as_mut() else {
            return;
        };
        for e in r.take_events() {
            self.ledger.event(step, inc, e);
        }
        let outbox = r.take_outbox();
        if !r.is_running() {
            self.report.post_halt_sends += outbox.len() as u64;
        } else {
            for (dest, env) in &outbox {
                self.net.send(r.id(), *dest, env);
            }
        }
        for d in r.take_deliveries() {
            if slot.last_seq.is_some_and(|l| d.seq <= l) {
                self.report.double_applies += 1;
            }
            slot.last_seq = Some(d.seq);
            slot.chain.insert(d.seq.0, d.checksum);
            slot.history.push(d.clone());
            if !d.replayed {
                if slot.planned_floor.is_some_and(|f| d.seq <= f) {
                    self.report.double_applies += 1;
                }
                self.last_progress = now;
            }
            match self.decided.get(&d.seq.0) {
                None => {
                    self.decided.insert(d.seq.0, d.op.clone());
                }
                Some(v) if *v != d.op => self.report.agreement_violations += 1,
                Some(_) => {}
            }
            if let Some(op) = &d.op {
                self.client.on_delivered(op);
            }
        }
        if let Status::Crashed(_) = r.status() {
            slot.crashes += 1;
            if slot.crashes <= self.cfg.restart_max {
                slot.disk.crash();
                slot.replica = None;
                slot.planned_floor = None;
                slot.down_until = Some(now + self.cfg.restart_delay);
            }
        }
    }

    fn deliver(&mut self, d: transport::Delivery) {
        let i = d.to.0 as usize;
        if !self.slots[i].running() {
            return;
        }
        let env = self.injector.with(|x| x.corrupt_message(d.to, &d.env));
        self.slots[i].replica.as_mut().unwrap().on_envelope(d.from, &env);
        self.after_call(i);
    }

    fn crash_points(&mut self) {
        while let Some(&(at, who, down)) = self.crash_points.last() {
            if self.client.completed() < at {
                break;
            }
            let i = match who {
                Some(r) => r.0 as usize,
                None => {
                    // random points wait until a quorum would survive them
                    let up: Vec<usize> = (0..self.slots.len()).filter(|i| self.slots[*i].running()).collect();
                    if up.len() <= quorum(self.cfg.replicas) {
                        break;
                    }
                    up[self.crash_rng.gen_range(0..up.len())]
                }
            };
            self.crash_points.pop();
            if !self.slots[i].running() {
                continue;
            }
            // audit before discarding process state, so a latent corruption
            // is not silently erased by the restart
            let r = self.slots[i].replica.as_mut().unwrap();
            let _ = r.get_state();
            self.after_call(i);
            if !self.slots[i].running() {
                continue;
            }
            let slot = &mut self.slots[i];
            slot.planned_floor = slot.last_seq;
            slot.replica = None;
            slot.disk.crash();
            slot.down_until = Some(self.net.now() + down);
        }
    }

    /// Advance one tick. Returns false once the run is over.
    pub fn step(&mut self) -> bool {
        let due = self.net.tick();
        let now = self.net.now();
        for d in due {
            self.deliver(d);
        }
        for i in 0..self.slots.len() {
            if self.slots[i].replica.is_none() && self.slots[i].down_until.is_some_and(|t| t <= now) {
                if self.start_replica(i).is_err() {
                    self.slots[i].down_until = None;
                }
            }
            if let Some(r) = self.slots[i].replica.as_mut() {
                if r.is_running() {
                    r.on_tick(now);
                    self.after_call(i);
                }
            }
        }
        if let Some(entry) = self.slots.iter().position(|s| s.running()) {
            for v in self.client.poll(now) {
                let r = self.slots[entry].replica.as_mut().unwrap();
                let _ = r.submit(v);
                self.after_call(entry);
                if !self.slots[entry].running() {
                    break;
                }
            }
        }
        self.crash_points();
        !self.should_stop()
    }

    fn settled(&self) -> bool {
        if !self.client.finished() || self.slots.iter().any(|s| s.replica.is_none() && s.down_until.is_some()) {
            return false;
        }
        let mut applied = self.slots.iter().filter(|s| s.running()).map(|s| s.replica.as_ref().unwrap().applied());
        match applied.next() {
            None => true,
            Some(first) => applied.all(|a| a == first) && first.map(|f| f.0 + 1) == Some(self.decided.len() as u64),
        }
    }

    fn should_stop(&mut self) -> bool {
        if self.settled() {
            return true;
        }
        let now = self.net.now();
        let alive = self.slots.iter().filter(|s| s.running() || (s.replica.is_none() && s.down_until.is_some())).count();
        if alive < quorum(self.cfg.replicas) || now.saturating_sub(self.last_progress) > self.stall_window || now >= self.cfg.tick_budget {
            self.report.lockup = !self.client.finished();
            return true;
        }
        false
    }

    pub fn run_to_end(&mut self) {
        while self.step() {}
    }

    /// Final audit and report.
    pub fn finish(mut self) -> ExperimentReport {
        let mut snaps = Vec::new();
        for i in 0..self.slots.len() {
            if !self.slots[i].running() {
                continue;
            }
            let r = self.slots[i].replica.as_mut().unwrap();
            let state = r.get_state();
            self.after_call(i);
            if let Ok(state) = state {
                snaps.push(Snapshot {
                    chain: self.slots[i].chain.clone(),
                    state: ListApp.encode_state(&state),
                });
            }
        }
        self.report.divergence = diverged(&snaps);
        self.report.ticks = self.net.now();
        self.report.decided = self.client.completed() as u64;
        self.report.lockup = self.report.lockup || !self.client.finished();
        let (faults, unattributed) = self.ledger.score();
        self.report.faults = faults;
        self.report.unattributed_detections = unattributed;
        self.report.discarded_messages = self.ledger.discarded();
        self.report.replica = self
            .slots
            .iter()
            .map(|s| ReplicaSummary {
                status: match s.replica.as_ref().map(|r| r.status()) {
                    Some(Status::Running) => FinalStatus::Running,
                    Some(Status::Halted(k)) => FinalStatus::Halted(*k),
                    Some(Status::Crashed(_)) | None => FinalStatus::Crashed,
                },
                restarts: s.restarts,
                crashes: s.crashes,
                applied: s.replica.as_ref().and_then(|r| r.applied()).map_or(0, |a| a.0 + 1),
            })
            .collect();
        self.report
    }
}
