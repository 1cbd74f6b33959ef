use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use hardpaxos::harness::config::parse_mode;
use hardpaxos::harness::{self, ExperimentConfig, ExperimentReport, TransportKind};
use hardpaxos::messages::Msg;
use hardpaxos::storage::{recover_state, scan, Tail};

#[derive(Parser)]
#[command(name = "hardpaxos", version, about = "Hardened Multi-Paxos experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and print its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["hardened", "baseline"])]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        ops: Option<usize>,
        #[arg(long, value_parser = ["sim", "udp"])]
        transport: Option<String>,
        /// Also write the machine-readable lines to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the records of a replica log and check it replays cleanly.
    ReplayLog { path: PathBuf },
    /// Parse a machine-readable report and check it is self-consistent.
    VerifyReport { path: PathBuf },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<bool> {
    match Cli::parse().cmd {
        Cmd::Run {
            config,
            mode,
            seed,
            replicas,
            ops,
            transport,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.set_mode(parse_mode(&m).unwrap());
            }
            if let Some(s) = seed {
                cfg.set_seed(s);
            }
            if let Some(n) = replicas {
                cfg.replicas = n;
            }
            if let Some(w) = ops {
                cfg.ops = w;
            }
            if let Some(t) = transport {
                cfg.transport = if t == "udp" { TransportKind::Udp } else { TransportKind::Sim };
            }
            let report = harness::run(&cfg)?;
            print!("{}", report.render_table());
            println!();
            let machine = report.render_machine();
            print!("{machine}");
            if let Some(p) = out {
                std::fs::write(&p, &machine).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(report.success())
        }
        Cmd::ReplayLog { path } => replay_log(&path),
        Cmd::VerifyReport { path } => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let report = ExperimentReport::parse_machine(&text)?;
            report.check()?;
            println!(
                "report ok: mode {} seed {} injected {} success {}",
                report.mode.as_str(),
                report.seed,
                report.injected(),
                report.success()
            );
            Ok(true)
        }
    }
}

fn replay_log(path: &PathBuf) -> Result<bool> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let replay = match scan(&bytes, true, None) {
        Ok(r) => r,
        Err(e) => {
            println!("corrupt: {e}");
            return Ok(false);
        }
    };
    for (i, p) in replay.payloads.iter().enumerate() {
        let detail = match &p.msg {
            Msg::Promise { ballot, horizon, .. } => format!("promised {ballot} horizon {horizon}"),
            Msg::Accepted { ballot, value } => format!("accepted {ballot} ({} bytes)", value.len()),
            Msg::Decision { value } => format!("decided ({} bytes)", value.len()),
            Msg::StateDigest { checksum } => format!("applied, checksum {checksum:016x}"),
            other => other.name().to_string(),
        };
        println!("{i:>6}  instance {:>8}  {detail}", p.instance);
    }
    match replay.tail {
        Tail::Clean => println!("{} records, clean tail", replay.payloads.len()),
        Tail::Torn { discarded } => {
            println!("{} records, torn tail of {discarded} bytes ignored", replay.payloads.len())
        }
    }
    match recover_state(&replay.payloads) {
        Ok(rec) => {
            match rec.applied() {
                Some((j, c)) => println!("applied through {j}, checksum {c:016x}"),
                None => println!("nothing applied"),
            }
            Ok(true)
        }
        Err(e) => bail!("log is inconsistent: {e}"),
    }
}
