//! Experiment report: a human table plus stable `key=value` lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::faultinject::FaultKind;
use crate::replica::{DetectionKind, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FaultStats {
    pub injected: u64,
    pub detected: u64,
    pub latency_sum: u64,
    pub latency_max: u64,
}

impl FaultStats {
    pub fn mean_latency(&self) -> Option<f64> {
        (self.detected > 0).then(|| self.latency_sum as f64 / self.detected as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FinalStatus {
    Running,
    Halted(DetectionKind),
    Crashed,
}

impl FinalStatus {
    fn render(&self) -> String {
        match self {
            FinalStatus::Running => "running".into(),
            FinalStatus::Halted(k) => format!("halted:{k}"),
            FinalStatus::Crashed => "crashed".into(),
        }
    }

    fn parse(s: &str) -> Option<FinalStatus> {
        match s {
            "running" => Some(FinalStatus::Running),
            "crashed" => Some(FinalStatus::Crashed),
            _ => DetectionKind::parse(s.strip_prefix("halted:")?).map(FinalStatus::Halted),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaSummary {
    pub status: FinalStatus,
    /// Restarts of any cause, scheduled or after a crash.
    pub restarts: u32,
    /// Unscheduled stops without a detection.
    pub crashes: u32,
    pub applied: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub replicas: usize,
    pub ops: usize,
    pub seed: u64,
    pub ticks: u64,
    /// Distinct client operations applied.
    pub decided: u64,
    pub divergence: bool,
    pub lockup: bool,
    pub agreement_violations: u64,
    pub double_applies: u64,
    pub post_halt_sends: u64,
    pub unattributed_detections: u64,
    pub discarded_messages: u64,
    /// Restarted replicas whose recovered state was compared with a fresh
    /// re-execution of the decided prefix.
    pub recovery_checks: u64,
    pub recovery_mismatches: u64,
    pub faults: BTreeMap<FaultKind, FaultStats>,
    pub replica: Vec<ReplicaSummary>,
}

impl ExperimentReport {
    pub fn new(mode: Mode, replicas: usize, ops: usize, seed: u64) -> ExperimentReport {
        ExperimentReport {
            mode,
            replicas,
            ops,
            seed,
            ticks: 0,
            decided: 0,
            divergence: false,
            lockup: false,
            agreement_violations: 0,
            double_applies: 0,
            post_halt_sends: 0,
            unattributed_detections: 0,
            discarded_messages: 0,
            recovery_checks: 0,
            recovery_mismatches: 0,
            faults: FaultKind::ALL.into_iter().map(|k| (k, FaultStats::default())).collect(),
            replica: Vec::new(),
        }
    }

    pub fn injected(&self) -> u64 {
        self.faults.values().map(|f| f.injected).sum()
    }

    /// Every injection detected and no divergence among running replicas.
    pub fn success(&self) -> bool {
        self.faults.values().all(|f| f.detected == f.injected)
            && !self.divergence
            && self.agreement_violations == 0
            && self.double_applies == 0
            && self.recovery_mismatches == 0
    }

    pub fn halted(&self) -> usize {
        self.replica.iter().filter(|r| matches!(r.status, FinalStatus::Halted(_))).count()
    }

    pub fn crashed(&self) -> usize {
        self.replica
            .iter()
            .filter(|r| r.status == FinalStatus::Crashed || r.crashes > 0)
            .count()
    }

    /// Divergence, a crash or a stalled workload.
    pub fn compromised(&self) -> bool {
        self.divergence || self.lockup || self.agreement_violations > 0 || self.crashed() > 0
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "mode {}  replicas {}  ops {}  seed {}  ticks {}",
            self.mode.as_str(),
            self.replicas,
            self.ops,
            self.seed,
            self.ticks
        );
        let _ = writeln!(s, "{:<12} {:>9} {:>9} {:>13} {:>12}", "fault", "injected", "detected", "mean latency", "max latency");
        for (k, f) in &self.faults {
            let mean = f.mean_latency().map_or("-".to_string(), |m| format!("{m:.2}"));
            let max = if f.detected > 0 { f.latency_max.to_string() } else { "-".into() };
            let _ = writeln!(s, "{:<12} {:>9} {:>9} {:>13} {:>12}", k.as_str(), f.injected, f.detected, mean, max);
        }
        let _ = writeln!(s, "{:<8} {:<28} {:>9} {:>8} {:>8}", "replica", "status", "restarts", "crashes", "applied");
        for (i, r) in self.replica.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<8} {:<28} {:>9} {:>8} {:>8}",
                i,
                r.status.render(),
                r.restarts,
                r.crashes,
                r.applied
            );
        }
        let _ = writeln!(
            s,
            "decided {}/{}  divergence {}  lockup {}  agreement violations {}  double applies {}  post-halt sends {}",
            self.decided,
            self.ops,
            self.divergence,
            self.lockup,
            self.agreement_violations,
            self.double_applies,
            self.post_halt_sends
        );
        let _ = writeln!(s, "result {}", if self.success() { "PASS" } else { "FAIL" });
        s
    }

    pub fn render_machine(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("mode", self.mode.as_str().into());
        kv("replicas", self.replicas.to_string());
        kv("ops", self.ops.to_string());
        kv("seed", self.seed.to_string());
        kv("ticks", self.ticks.to_string());
        kv("decided", self.decided.to_string());
        kv("divergence", self.divergence.to_string());
        kv("lockup", self.lockup.to_string());
        kv("agreement_violations", self.agreement_violations.to_string());
        kv("double_applies", self.double_applies.to_string());
        kv("post_halt_sends", self.post_halt_sends.to_string());
        kv("unattributed_detections", self.unattributed_detections.to_string());
        kv("discarded_messages", self.discarded_messages.to_string());
        kv("recovery_checks", self.recovery_checks.to_string());
        kv("recovery_mismatches", self.recovery_mismatches.to_string());
        for (k, f) in &self.faults {
            let p = format!("fault.{}", k.as_str());
            kv(&format!("{p}.injected"), f.injected.to_string());
            kv(&format!("{p}.detected"), f.detected.to_string());
            kv(&format!("{p}.latency_sum"), f.latency_sum.to_string());
            kv(&format!("{p}.latency_max"), f.latency_max.to_string());
        }
        for (i, r) in self.replica.iter().enumerate() {
            kv(&format!("replica.{i}.status"), r.status.render());
            kv(&format!("replica.{i}.restarts"), r.restarts.to_string());
            kv(&format!("replica.{i}.crashes"), r.crashes.to_string());
            kv(&format!("replica.{i}.applied"), r.applied.to_string());
        }
        kv("success", self.success().to_string());
        s
    }

    /// Inverse of [`ExperimentReport::render_machine`].
    pub fn parse_machine(text: &str) -> Result<ExperimentReport, ReportError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ReportError::Line(i + 1))?;
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ReportError::Duplicate(k.to_string()));
            }
        }
        let get = |k: &str| map.get(k).ok_or_else(|| ReportError::Missing(k.to_string()));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, ReportError> {
            v.parse().map_err(|_| ReportError::Value(k.to_string(), v.to_string()))
        }
        let mode = match get("mode")?.as_str() {
            "hardened" => Mode::Hardened,
            "baseline" => Mode::Baseline,
            v => return Err(ReportError::Value("mode".into(), v.into())),
        };
        let replicas: usize = num("replicas", get("replicas")?)?;
        let mut r = ExperimentReport::new(mode, replicas, num("ops", get("ops")?)?, num("seed", get("seed")?)?);
        r.ticks = num("ticks", get("ticks")?)?;
        r.decided = num("decided", get("decided")?)?;
        r.divergence = num("divergence", get("divergence")?)?;
        r.lockup = num("lockup", get("lockup")?)?;
        r.agreement_violations = num("agreement_violations", get("agreement_violations")?)?;
        r.double_applies = num("double_applies", get("double_applies")?)?;
        r.post_halt_sends = num("post_halt_sends", get("post_halt_sends")?)?;
        r.unattributed_detections = num("unattributed_detections", get("unattributed_detections")?)?;
        r.discarded_messages = num("discarded_messages", get("discarded_messages")?)?;
        r.recovery_checks = num("recovery_checks", get("recovery_checks")?)?;
        r.recovery_mismatches = num("recovery_mismatches", get("recovery_mismatches")?)?;
        for k in FaultKind::ALL {
            let p = format!("fault.{}", k.as_str());
            let f = |s: &str| -> Result<u64, ReportError> {
                let key = format!("{p}.{s}");
                num(&key, get(&key)?)
            };
            r.faults.insert(
                k,
                FaultStats {
                    injected: f("injected")?,
                    detected: f("detected")?,
                    latency_sum: f("latency_sum")?,
                    latency_max: f("latency_max")?,
                },
            );
        }
        for i in 0..replicas {
            let key = format!("replica.{i}.status");
            let st = get(&key)?;
            r.replica.push(ReplicaSummary {
                status: FinalStatus::parse(st).ok_or_else(|| ReportError::Value(key.clone(), st.clone()))?,
                restarts: num("restarts", get(&format!("replica.{i}.restarts"))?)?,
                crashes: num("crashes", get(&format!("replica.{i}.crashes"))?)?,
                applied: num("applied", get(&format!("replica.{i}.applied"))?)?,
            });
        }
        let success: bool = num("success", get("success")?)?;
        if success != r.success() {
            return Err(ReportError::Inconsistent("success flag does not match the counts".into()));
        }
        if map.len() != r.render_machine().lines().count() {
            return Err(ReportError::Inconsistent("unexpected extra keys".into()));
        }
        Ok(r)
    }

    /// Internal consistency checks for a parsed report.
    pub fn check(&self) -> Result<(), ReportError> {
        for (k, f) in &self.faults {
            if f.detected > f.injected {
                return Err(ReportError::Inconsistent(format!("{k}: detected {} > injected {}", f.detected, f.injected)));
            }
            if f.latency_max > 0 && f.latency_sum < f.latency_max {
                return Err(ReportError::Inconsistent(format!("{k}: latency sum below max")));
            }
        }
        if self.recovery_mismatches > self.recovery_checks {
            return Err(ReportError::Inconsistent("more recovery mismatches than checks".into()));
        }
        if self.decided > self.ops as u64 {
            return Err(ReportError::Inconsistent("more operations decided than submitted".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportError {
    #[error("line {0} is not key=value")]
    Line(usize),
    #[error("duplicate key {0}")]
    Duplicate(String),
    #[error("missing key {0}")]
    Missing(String),
    #[error("bad value for {0}: {1:?}")]
    Value(String, String),
    #[error("inconsistent report: {0}")]
    Inconsistent(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExperimentReport {
        let mut r = ExperimentReport::new(Mode::Hardened, 3, 100, 5);
        r.decided = 100;
        r.ticks = 1234;
        let f = r.faults.get_mut(&FaultKind::State).unwrap();
        f.injected = 3;
        f.detected = 3;
        f.latency_sum = 3;
        f.latency_max = 1;
        r.replica = vec![
            ReplicaSummary {
                status: FinalStatus::Running,
                restarts: 0,
                crashes: 0,
                applied: 100,
            },
            ReplicaSummary {
                status: FinalStatus::Halted(DetectionKind::StateDivergence),
                restarts: 0,
                crashes: 0,
                applied: 40,
            },
            ReplicaSummary {
                status: FinalStatus::Crashed,
                restarts: 3,
                crashes: 3,
                applied: 10,
            },
        ];
        r
    }

    #[test]
    fn zero_injection_rows_are_zero() {
        let r = ExperimentReport::new(Mode::Hardened, 3, 0, 0);
        let table = r.render_table();
        for k in FaultKind::ALL {
            assert!(table.lines().any(|l| l.starts_with(k.as_str()) && l.split_whitespace().nth(1) == Some("0")));
        }
        assert!(r.render_machine().contains("fault.message.injected=0\n"));
    }

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(sample().render_machine(), sample().render_machine());
        assert_eq!(sample().render_table(), sample().render_table());
    }

    #[test]
    fn machine_lines_parse_back() {
        let r = sample();
        let text = r.render_machine();
        let back = ExperimentReport::parse_machine(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.render_machine(), text);
        back.check().unwrap();
    }

    #[test]
    fn tampered_report_rejected() {
        let text = sample().render_machine().replace("success=true", "success=false");
        assert!(matches!(ExperimentReport::parse_machine(&text), Err(ReportError::Inconsistent(_))));
        let text = sample().render_machine().replace("decided=100\n", "");
        assert_eq!(ExperimentReport::parse_machine(&text), Err(ReportError::Missing("decided".into())));
    }
}
