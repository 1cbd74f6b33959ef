//! Experiment configuration: a flat `key = value` text file.
//!
//! ```text
//! # cluster
//! replicas = 3
//! ops = 1000
//! seed = 7
//! mode = hardened            # or baseline
//! transport = sim            # or udp
//! log_dir = /tmp/hp-logs     # optional; in-memory logs when absent (sim only)
//! tick_budget = 200000
//! window = 16
//! client_retry = 60
//!
//! net.drop_prob = 0.1
//! net.dup_prob = 0.05
//! net.delay_min = 1
//! net.delay_max = 5
//! net.partition = 100..400:0/1,2   # ticks [100,400), groups separated by '/'
//!
//! fault.msg_corrupt_prob = 0.05
//! fault.state_corrupt_prob = 0.0
//! fault.transition_drop_prob = 0.0
//! fault.storage_corrupt_prob = 0.0
//! fault.targets = 0,2
//!
//! crash = 1@250:40          # crash replica 1 once 250 ops are done, down for 40 ticks
//! crash.random = 20         # additional crash points drawn from the seed
//! restart.max = 3           # automatic restarts of crashed (not halted) replicas
//! restart.delay = 30
//!
//! peer.0 = 127.0.0.1:7000   # udp addresses
//! udp.tick_ms = 2
//! ```
//!
//! `net.seed` and `fault.seed` default to values derived from `seed`.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::faultinject::FaultConfig;
use crate::messages::ReplicaId;
use crate::replica::{Mode, Timing};
use crate::transport::{NetConfig, Partition};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    Sim,
    Udp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrashPoint {
    /// `None`: replica drawn from the seed when the point is reached.
    pub replica: Option<ReplicaId>,
    pub at_op: usize,
    pub down_ticks: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub replicas: usize,
    pub ops: usize,
    pub seed: u64,
    pub mode: Mode,
    pub transport: TransportKind,
    pub log_dir: Option<PathBuf>,
    pub tick_budget: u64,
    pub window: usize,
    pub client_retry: u64,
    pub net: NetConfig,
    pub faults: FaultConfig,
    pub crashes: Vec<CrashPoint>,
    pub random_crashes: usize,
    pub restart_max: u32,
    pub restart_delay: u64,
    pub peers: Vec<SocketAddr>,
    pub udp_tick_ms: u64,
    pub timing: Timing,
    net_seed_set: bool,
    fault_seed_set: bool,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            replicas: 3,
            ops: 1000,
            seed: 0,
            mode: Mode::Hardened,
            transport: TransportKind::Sim,
            log_dir: None,
            tick_budget: 200_000,
            window: 16,
            client_retry: 60,
            net: NetConfig::default(),
            faults: FaultConfig::default(),
            crashes: Vec::new(),
            random_crashes: 0,
            restart_max: 3,
            restart_delay: 30,
            peers: Vec::new(),
            udp_tick_ms: 2,
            timing: Timing::default(),
            net_seed_set: false,
            fault_seed_set: false,
        };
        c.set_seed(0);
        c
    }
}

/// SplitMix64 step, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    /// Set the master seed and re-derive every sub-seed not pinned explicitly.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if !self.net_seed_set {
            self.net.seed = mix_seed(seed, 1);
        }
        if !self.fault_seed_set {
            self.faults.seed = mix_seed(seed, 2);
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.faults.mode = mode;
    }

    pub fn workload_seed(&self) -> u64 {
        mix_seed(self.seed, 3)
    }

    pub fn crash_seed(&self) -> u64 {
        mix_seed(self.seed, 4)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        ExperimentConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let mut c = ExperimentConfig::default();
        let mut peers: Vec<(usize, SocketAddr)> = Vec::new();
        let mut seed = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError::Syntax { line, msg };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| v.parse::<u64>().map_err(|e| err(format!("{key}: {e}")));
            let prob = |v: &str| v.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "replicas" => c.replicas = num(value)? as usize,
                "ops" => c.ops = num(value)? as usize,
                "seed" => seed = Some(num(value)?),
                "mode" => c.set_mode(parse_mode(value).ok_or_else(|| err(format!("unknown mode {value:?}")))?),
                "transport" => {
                    c.transport = match value {
                        "sim" => TransportKind::Sim,
                        "udp" => TransportKind::Udp,
                        _ => return Err(err(format!("unknown transport {value:?}"))),
                    }
                }
                "log_dir" => c.log_dir = Some(PathBuf::from(value)),
                "tick_budget" => c.tick_budget = num(value)?,
                "window" => c.window = num(value)? as usize,
                "client_retry" => c.client_retry = num(value)?,
                "net.seed" => {
                    c.net.seed = num(value)?;
                    c.net_seed_set = true;
                }
                "net.drop_prob" => c.net.drop_prob = prob(value)?,
                "net.dup_prob" => c.net.dup_prob = prob(value)?,
                "net.delay_min" => c.net.delay_min = num(value)?,
                "net.delay_max" => c.net.delay_max = num(value)?,
                "net.partition" => c.net.partitions.push(parse_partition(value).map_err(err)?),
                "fault.seed" => {
                    c.faults.seed = num(value)?;
                    c.fault_seed_set = true;
                }
                "fault.msg_corrupt_prob" => c.faults.msg_corrupt_prob = prob(value)?,
                "fault.state_corrupt_prob" => c.faults.state_corrupt_prob = prob(value)?,
                "fault.transition_drop_prob" => c.faults.transition_drop_prob = prob(value)?,
                "fault.storage_corrupt_prob" => c.faults.storage_corrupt_prob = prob(value)?,
                "fault.targets" => c.faults.targets = Some(parse_ids(value).map_err(err)?),
                "crash" => c.crashes.push(parse_crash(value).map_err(err)?),
                "crash.random" => c.random_crashes = num(value)? as usize,
                "restart.max" => c.restart_max = num(value)? as u32,
                "restart.delay" => c.restart_delay = num(value)?,
                "udp.tick_ms" => c.udp_tick_ms = num(value)?,
                "timing.gossip_every" => c.timing.gossip_every = num(value)?,
                "timing.fd_timeout" => c.timing.fd_timeout = num(value)?,
                "timing.retransmit_every" => c.timing.retransmit_every = num(value)?,
                "timing.prepare_timeout" => c.timing.prepare_timeout = num(value)?,
                "timing.digest_every" => c.timing.digest_every = num(value)?.max(1),
                k if k.starts_with("peer.") => {
                    let idx: usize = k[5..].parse().map_err(|_| err(format!("bad peer key {k:?}")))?;
                    let addr: SocketAddr = value.parse().map_err(|e| err(format!("{k}: {e}")))?;
                    peers.push((idx, addr));
                }
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        if let Some(s) = seed {
            c.set_seed(s);
        }
        peers.sort();
        for (want, (idx, _)) in peers.iter().enumerate() {
            if *idx != want {
                return Err(ConfigError::Invalid(format!("peer addresses must be numbered 0..n, missing peer.{want}")));
            }
        }
        c.peers = peers.into_iter().map(|(_, a)| a).collect();
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.replicas == 0 {
            return Err(ConfigError::Invalid("cluster needs at least one replica".into()));
        }
        if self.window == 0 {
            return Err(ConfigError::Invalid("window must be positive".into()));
        }
        self.net.validate().map_err(ConfigError::Invalid)?;
        self.faults.validate().map_err(ConfigError::Invalid)?;
        for c in &self.crashes {
            if let Some(r) = c.replica {
                if r.0 as usize >= self.replicas {
                    return Err(ConfigError::Invalid(format!("crash names unknown replica {r}")));
                }
            }
        }
        if self.transport == TransportKind::Udp && self.peers.len() != self.replicas {
            return Err(ConfigError::Invalid(format!(
                "udp transport needs {} peer addresses, got {}",
                self.replicas,
                self.peers.len()
            )));
        }
        Ok(())
    }
}

pub fn parse_mode(s: &str) -> Option<Mode> {
    match s {
        "hardened" => Some(Mode::Hardened),
        "baseline" => Some(Mode::Baseline),
        _ => None,
    }
}

fn parse_ids(s: &str) -> Result<BTreeSet<ReplicaId>, String> {
    s.split(',')
        .map(|x| x.trim())
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<u32>().map(ReplicaId).map_err(|e| format!("replica id {x:?}: {e}")))
        .collect()
}

fn parse_partition(s: &str) -> Result<Partition, String> {
    let (range, groups) = s.split_once(':').ok_or("partition needs start..end:groups")?;
    let (start, end) = range.split_once("..").ok_or("partition range needs start..end")?;
    let start = start.trim().parse::<u64>().map_err(|e| e.to_string())?;
    let end = end.trim().parse::<u64>().map_err(|e| e.to_string())?;
    let groups = groups.split('/').map(parse_ids).collect::<Result<Vec<_>, _>>()?;
    Ok(Partition { start, end, groups })
}

fn parse_crash(s: &str) -> Result<CrashPoint, String> {
    let (replica, rest) = s.split_once('@').ok_or("crash needs replica@op[:down_ticks]")?;
    let (at, down) = match rest.split_once(':') {
        Some((a, d)) => (a, Some(d)),
        None => (rest, None),
    };
    let replica = match replica.trim() {
        "*" => None,
        r => Some(ReplicaId(r.parse::<u32>().map_err(|e| e.to_string())?)),
    };
    Ok(CrashPoint {
        replica,
        at_op: at.trim().parse().map_err(|e: std::num::ParseIntError| e.to_string())?,
        down_ticks: match down {
            Some(d) => d.trim().parse().map_err(|e: std::num::ParseIntError| e.to_string())?,
            None => 40,
        },
    })
}
