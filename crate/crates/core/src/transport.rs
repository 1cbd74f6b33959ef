//! Message delivery: a seeded, virtual-time simulated network and a real UDP
//! transport. Neither ever changes envelope bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::messages::{Envelope, ReplicaId};
use crate::paxos::Dest;

/// Replicas split into groups that cannot talk to each other during
/// `[start, end)`. Replicas not listed form one more group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub start: u64,
    pub end: u64,
    pub groups: Vec<BTreeSet<ReplicaId>>,
}

impl Partition {
    fn group_of(&self, r: ReplicaId) -> usize {
        self.groups.iter().position(|g| g.contains(&r)).unwrap_or(usize::MAX)
    }

    pub fn separates(&self, a: ReplicaId, b: ReplicaId, tick: u64) -> bool {
        (self.start..self.end).contains(&tick) && self.group_of(a) != self.group_of(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub seed: u64,
    pub drop_prob: f64,
    pub dup_prob: f64,
    pub delay_min: u64,
    pub delay_max: u64,
    pub partitions: Vec<Partition>,
}

impl Default for NetConfig {
    fn default() -> NetConfig {
        NetConfig {
            seed: 0,
            drop_prob: 0.0,
            dup_prob: 0.0,
            delay_min: 1,
            delay_max: 3,
            partitions: Vec::new(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("drop_prob", self.drop_prob), ("dup_prob", self.dup_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("net {name} = {p} is outside [0, 1]"));
            }
        }
        if self.delay_min > self.delay_max {
            return Err(format!(
                "net delay range [{}, {}] is empty",
                self.delay_min, self.delay_max
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub id: u64,
    pub from: ReplicaId,
    pub to: ReplicaId,
    pub sent_at: u64,
    pub env: Envelope,
}

/// Deterministic simulated network. `(seed, config, send trace)` fixes the
/// delivery trace.
pub struct SimNet {
    cfg: NetConfig,
    n: usize,
    rng: ChaCha8Rng,
    now: u64,
    next_id: u64,
    queue: BTreeMap<(u64, u64), Delivery>,
    sent: u64,
    dropped: u64,
}

impl SimNet {
    pub fn new(n: usize, cfg: NetConfig) -> SimNet {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        SimNet {
            cfg,
            n,
            rng,
            now: 0,
            next_id: 0,
            queue: BTreeMap::new(),
            sent: 0,
            dropped: 0,
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    fn delay(&mut self) -> u64 {
        self.rng.gen_range(self.cfg.delay_min..=self.cfg.delay_max).max(1)
    }

    fn enqueue(&mut self, from: ReplicaId, to: ReplicaId, env: &Envelope) {
        self.sent += 1;
        if self.cfg.drop_prob > 0.0 && self.rng.gen_bool(self.cfg.drop_prob) {
            self.dropped += 1;
            return;
        }
        let copies = if self.cfg.dup_prob > 0.0 && self.rng.gen_bool(self.cfg.dup_prob) { 2 } else { 1 };
        for _ in 0..copies {
            let due = self.now + self.delay();
            let id = self.next_id;
            self.next_id += 1;
            self.queue.insert(
                (due, id),
                Delivery {
                    id,
                    from,
                    to,
                    sent_at: self.now,
                    env: env.clone(),
                },
            );
        }
    }

    /// Schedule one copy with an explicit delay, bypassing loss and duplication.
    pub fn send_after(&mut self, from: ReplicaId, to: ReplicaId, env: &Envelope, delay: u64) {
        let id = self.next_id;
        self.next_id += 1;
        self.sent += 1;
        self.queue.insert(
            (self.now + delay.max(1), id),
            Delivery {
                id,
                from,
                to,
                sent_at: self.now,
                env: env.clone(),
            },
        );
    }

    /// Schedule `env`. `Dest::All` fans out to every replica except `from`.
    pub fn send(&mut self, from: ReplicaId, dest: Dest, env: &Envelope) {
        match dest {
            Dest::To(to) => self.enqueue(from, to, env),
            Dest::All => {
                for to in (0..self.n as u32).map(ReplicaId).filter(|r| *r != from) {
                    self.enqueue(from, to, env);
                }
            }
        }
    }

    /// Advance one tick and return everything due, in schedule order.
    pub fn tick(&mut self) -> Vec<Delivery> {
        self.now += 1;
        let mut out = Vec::new();
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > self.now {
                break;
            }
            let d = entry.remove();
            let cut = self.cfg.partitions.iter().any(|p| p.separates(d.from, d.to, self.now));
            if cut {
                self.dropped += 1;
            } else {
                out.push(d);
            }
        }
        out
    }
}

/// Largest envelope accepted by the datagram transport.
pub const MAX_DATAGRAM: usize = 60 * 1024;

#[derive(Debug, Error)]
pub enum SendError {
    #[error("envelope of {0} bytes exceeds the {MAX_DATAGRAM} byte datagram limit")]
    Oversize(usize),
    #[error("udp: {0}")]
    Io(#[from] io::Error),
}

/// Best-effort UDP transport. A receiver thread feeds raw datagrams into a
/// queue; senders are identified by source address.
pub struct UdpTransport {
    id: ReplicaId,
    socket: UdpSocket,
    peers: Vec<SocketAddr>,
    rx: Receiver<(ReplicaId, Vec<u8>)>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl UdpTransport {
    pub fn bind(id: ReplicaId, peers: Vec<SocketAddr>) -> io::Result<UdpTransport> {
        let addr = *peers
            .get(id.0 as usize)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address for replica"))?;
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(Duration::from_millis(20)))?;
        let recv = socket.try_clone()?;
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let handle = {
            let stop = stop.clone();
            let peers = peers.clone();
            std::thread::spawn(move || {
                let mut buf = vec![0u8; 65536];
                while !stop.load(Ordering::Relaxed) {
                    match recv.recv_from(&mut buf) {
                        Ok((len, src)) => {
                            let Some(from) = peers.iter().position(|p| *p == src) else {
                                continue;
                            };
                            if tx.send((ReplicaId(from as u32), buf[..len].to_vec())).is_err() {
                                break;
                            }
                        }
                        Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                        Err(_) => break,
                    }
                }
            })
        };
        Ok(UdpTransport {
            id,
            socket,
            peers,
            rx,
            stop,
            handle: Some(handle),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn send(&self, dest: Dest, env: &Envelope) -> Result<(), SendError> {
        let wire = env.to_wire();
        if wire.len() > MAX_DATAGRAM {
            return Err(SendError::Oversize(wire.len()));
        }
        match dest {
            Dest::To(r) => {
                self.socket.send_to(&wire, self.peers[r.0 as usize])?;
            }
            Dest::All => {
                for (i, p) in self.peers.iter().enumerate() {
                    if i != self.id.0 as usize {
                        self.socket.send_to(&wire, p)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Next raw datagram, waiting at most `timeout`.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<(ReplicaId, Vec<u8>)> {
        match self.rx.recv_timeout(timeout) {
            Ok(x) => Some(x),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => None,
        }
    }

    pub fn try_recv(&self) -> Option<(ReplicaId, Vec<u8>)> {
        self.rx.try_recv().ok()
    }
}

impl Drop for UdpTransport {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
