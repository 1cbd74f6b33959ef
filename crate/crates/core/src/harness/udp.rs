//! Datagram mode: one thread per replica exchanging real UDP packets.
//!
//! One tick is `udp.tick_ms` milliseconds of wall time. Runs are not
//! reproducible; the report is best effort. Scheduled crash points are a
//! simulation feature and are ignored here.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::config::mix_seed;
use super::{diverged, replica_ids, Client, ExperimentConfig, ExperimentReport, FinalStatus, HarnessError, Ledger, ListApp, ReplicaSummary, Snapshot};
use crate::faultinject::SharedInjector;
use crate::messages::{Envelope, InstanceId, Value};
use crate::replica::{Replica, ReplicaConfig, StateMachine, Status};
use crate::storage::{FileDevice, LogDevice, MemDisk};
use crate::transport::{UdpTransport, MAX_DATAGRAM};

enum Command {
    Submit(Value),
}

enum Note {
    Delivered {
        replica: usize,
        seq: InstanceId,
        op: Option<Value>,
        live: bool,
    },
    Stopped(usize),
}

struct Outcome {
    ledger: Ledger,
    status: FinalStatus,
    applied: u64,
    snapshot: Option<Snapshot>,
    post_halt_sends: u64,
    double_applies: u64,
}

struct Node {
    idx: usize,
    replica: Replica<ListApp>,
    transport: UdpTransport,
    injector: SharedInjector,
    ledger: Ledger,
    step: u64,
    chain: BTreeMap<u64, u64>,
    last_seq: Option<InstanceId>,
    post_halt_sends: u64,
    double_applies: u64,
    notes: Sender<Note>,
    announced_stop: bool,
}

impl Node {
    fn after_call(&mut self) {
        self.step += 1;
        for rec in self.injector.with(|x| x.take_records()) {
            self.ledger.record(self.step, 1, rec);
        }
        for e in self.replica.take_events() {
            self.ledger.event(self.step, 1, e);
        }
        let outbox = self.replica.take_outbox();
        if !self.replica.is_running() {
            self.post_halt_sends += outbox.len() as u64;
            if !self.announced_stop {
                self.announced_stop = true;
                let _ = self.notes.send(Note::Stopped(self.idx));
            }
        } else {
            for (dest, env) in &outbox {
                // a dropped datagram is just message loss
                let _ = self.transport.send(*dest, env);
            }
        }
        for d in self.replica.take_deliveries() {
            if self.last_seq.is_some_and(|l| d.seq <= l) {
                self.double_applies += 1;
            }
            self.last_seq = Some(d.seq);
            self.chain.insert(d.seq.0, d.checksum);
            let _ = self.notes.send(Note::Delivered {
                replica: self.idx,
                seq: d.seq,
                op: d.op,
                live: !d.replayed,
            });
        }
    }

    fn run(mut self, commands: Receiver<Command>, stop: Arc<AtomicBool>, tick: Duration) -> Outcome {
        let start = Instant::now();
        let mut last_tick = 0;
        self.after_call();
        while !stop.load(Ordering::Relaxed) {
            while let Ok(Command::Submit(v)) = commands.try_recv() {
                let _ = self.replica.submit(v);
                self.after_call();
            }
            if let Some((from, bytes)) = self.transport.recv_timeout(Duration::from_millis(1)) {
                if self.replica.is_running() {
                    match Envelope::from_wire(&bytes) {
                        Ok(env) => {
                            let env = self.injector.with(|x| x.corrupt_message(self.replica.id(), &env));
                            self.replica.on_envelope(from, &env);
                        }
                        Err(_) => self.replica.on_datagram(from, &bytes),
                    }
                    self.after_call();
                }
            }
            let now = (start.elapsed().as_nanos() / tick.as_nanos().max(1)) as u64;
            if now > last_tick && self.replica.is_running() {
                last_tick = now;
                self.replica.on_tick(now);
                self.after_call();
            }
        }
        let snapshot = match self.replica.get_state() {
            Ok(s) => Some(Snapshot {
                chain: self.chain.clone(),
                state: ListApp.encode_state(&s),
            }),
            Err(_) => None,
        };
        self.after_call();
        Outcome {
            status: match self.replica.status() {
                Status::Running => FinalStatus::Running,
                Status::Halted(k) => FinalStatus::Halted(*k),
                Status::Crashed(_) => FinalStatus::Crashed,
            },
            applied: self.replica.applied().map_or(0, |a| a.0 + 1),
            snapshot,
            ledger: self.ledger,
            post_halt_sends: self.post_halt_sends,
            double_applies: self.double_applies,
        }
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let n = cfg.replicas;
    let tick = Duration::from_millis(cfg.udp_tick_ms.max(1));
    let stop = Arc::new(AtomicBool::new(false));
    let (note_tx, notes) = mpsc::channel();
    let mut command_tx = Vec::new();
    let mut handles = Vec::new();
    if let Some(dir) = &cfg.log_dir {
        std::fs::create_dir_all(dir)?;
    }
    for id in replica_ids(n) {
        let device: Box<dyn LogDevice> = match &cfg.log_dir {
            Some(dir) => {
                let p = dir.join(format!("replica-{}.log", id.0));
                if p.exists() {
                    std::fs::remove_file(&p)?;
                }
                Box::new(FileDevice::open(p, true)?)
            }
            None => Box::new(MemDisk::new()),
        };
        let mut faults = cfg.faults.clone();
        faults.mode = cfg.mode;
        faults.seed = mix_seed(cfg.faults.seed, 100 + id.0 as u64);
        let injector = SharedInjector::new(faults);
        let rcfg = ReplicaConfig {
            mode: cfg.mode,
            timing: cfg.timing,
            max_value_len: Some(MAX_DATAGRAM / 2),
        };
        let inj = injector.clone();
        let mut hook = move |idx: usize, frame: &mut Vec<u8>| {
            inj.with(|x| x.corrupt_storage_read(id, idx, frame));
        };
        let mut replica = Replica::start(id, n, ListApp, device, rcfg, Some(&mut hook), 0);
        replica.set_transition_hook(Box::new(injector.clone()));
        replica.set_state_hook(Box::new(injector.clone()));
        let transport = UdpTransport::bind(id, cfg.peers.clone())?;
        let node = Node {
            idx: id.0 as usize,
            replica,
            transport,
            injector,
            ledger: Ledger::default(),
            step: 0,
            chain: BTreeMap::new(),
            last_seq: None,
            post_halt_sends: 0,
            double_applies: 0,
            notes: note_tx.clone(),
            announced_stop: false,
        };
        let (tx, rx) = mpsc::channel();
        command_tx.push(tx);
        let stop = stop.clone();
        handles.push(thread::spawn(move || node.run(rx, stop, tick)));
    }
    drop(note_tx);

    let mut report = ExperimentReport::new(cfg.mode, n, cfg.ops, cfg.seed);
    let mut client = Client::new(cfg.workload_seed(), cfg.ops, cfg.window, cfg.client_retry);
    let mut running = vec![true; n];
    let mut applied: Vec<Option<InstanceId>> = vec![None; n];
    let mut decided: BTreeMap<u64, Option<Value>> = BTreeMap::new();
    let start = Instant::now();
    let budget = tick * cfg.tick_budget.min(u32::MAX as u64) as u32;
    let stall = tick * 3000;
    let mut last_progress = Instant::now();
    loop {
        let now = (start.elapsed().as_nanos() / tick.as_nanos()) as u64;
        if let Some(entry) = running.iter().position(|r| *r) {
            for v in client.poll(now) {
                let _ = command_tx[entry].send(Command::Submit(v));
            }
        }
        match notes.recv_timeout(tick) {
            Ok(Note::Delivered { replica, seq, op, live }) => {
                applied[replica] = Some(seq);
                if live {
                    last_progress = Instant::now();
                }
                match decided.get(&seq.0) {
                    None => {
                        decided.insert(seq.0, op.clone());
                    }
                    Some(v) if *v != op => report.agreement_violations += 1,
                    Some(_) => {}
                }
                if let Some(op) = &op {
                    client.on_delivered(op);
                }
            }
            Ok(Note::Stopped(i)) => running[i] = false,
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        let live: Vec<_> = (0..n).filter(|i| running[*i]).map(|i| applied[i]).collect();
        let settled = client.finished() && live.windows(2).all(|w| w[0] == w[1]);
        if settled || live.len() < crate::paxos::quorum(n) || start.elapsed() >= budget || last_progress.elapsed() >= stall {
            break;
        }
    }
    stop.store(true, Ordering::Relaxed);
    let mut snaps = Vec::new();
    let mut ledger = Ledger::default();
    for h in handles {
        let out = h.join().expect("replica thread panicked");
        report.post_halt_sends += out.post_halt_sends;
        report.double_applies += out.double_applies;
        ledger.merge(out.ledger);
        if out.status == FinalStatus::Running {
            if let Some(s) = out.snapshot {
                snaps.push(s);
            }
        }
        report.replica.push(ReplicaSummary {
            crashes: u32::from(out.status == FinalStatus::Crashed),
            status: out.status,
            restarts: 0,
            applied: out.applied,
        });
    }
    report.divergence = diverged(&snaps);
    report.ticks = (start.elapsed().as_nanos() / tick.as_nanos()) as u64;
    report.decided = client.completed() as u64;
    report.lockup = !client.finished();
    let (faults, unattributed) = ledger.score();
    report.faults = faults;
    report.unattributed_detections = unattributed;
    report.discarded_messages = ledger.discarded();
    Ok(report)
}
