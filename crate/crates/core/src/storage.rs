//! Append-only write-ahead log of sealed envelopes with replay-based recovery.
//!
//! The file is a plain concatenation of envelope frames
//! (`[u32 BE len][body][u64 BE checksum]`). On replay a frame that runs past
//! the end of the file is a torn tail from a crash mid-write and is cut off.
//! Anything else that fails to frame, verify or decode is corruption.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::messages::{digest, DecodeError, Envelope, InstanceId, Msg, Payload, VerifyError, MAX_BODY_LEN};
use crate::paxos::AcceptorState;

/// Byte storage under the log. `append` may buffer; `flush` is the
/// durability barrier.
pub trait LogDevice: Send {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn flush(&mut self) -> io::Result<()>;
    fn read_all(&mut self) -> io::Result<Vec<u8>>;
    fn truncate(&mut self, len: u64) -> io::Result<()>;
}

pub struct FileDevice {
    path: PathBuf,
    file: File,
    pending: Vec<u8>,
    sync: bool,
}

impl FileDevice {
    /// Open or create. With `sync` set the barrier also calls `fdatasync`.
    pub fn open(path: impl AsRef<Path>, sync: bool) -> io::Result<FileDevice> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        Ok(FileDevice {
            path,
            file,
            pending: Vec::new(),
            sync,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl LogDevice for FileDevice {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.pending.extend_from_slice(bytes);
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        if !self.pending.is_empty() {
            self.file.write_all(&self.pending)?;
            self.pending.clear();
        }
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    fn read_all(&mut self) -> io::Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.file.seek(SeekFrom::Start(0))?;
        self.file.read_to_end(&mut buf)?;
        Ok(buf)
    }

    fn truncate(&mut self, len: u64) -> io::Result<()> {
        self.file.set_len(len)
    }
}

#[derive(Debug, Default)]
struct MemDiskInner {
    durable: Vec<u8>,
    pending: Vec<u8>,
}

/// In-memory disk shared between a replica incarnation and the harness, so
/// the harness can crash the replica and hand the surviving bytes to the
/// next incarnation.
#[derive(Debug, Clone, Default)]
pub struct MemDisk(Arc<Mutex<MemDiskInner>>);

impl MemDisk {
    pub fn new() -> MemDisk {
        MemDisk::default()
    }

    pub fn from_bytes(bytes: Vec<u8>) -> MemDisk {
        MemDisk(Arc::new(Mutex::new(MemDiskInner {
            durable: bytes,
            pending: Vec::new(),
        })))
    }

    /// Lose everything written since the last barrier.
    pub fn crash(&self) {
        self.crash_torn(0);
    }

    /// Lose unflushed bytes except the first `keep`, modelling a torn write.
    pub fn crash_torn(&self, keep: usize) {
        let mut d = self.0.lock().unwrap();
        let keep = keep.min(d.pending.len());
        let kept: Vec<u8> = d.pending[..keep].to_vec();
        d.durable.extend_from_slice(&kept);
        d.pending.clear();
    }

    pub fn durable_bytes(&self) -> Vec<u8> {
        self.0.lock().unwrap().durable.clone()
    }

    pub fn pending_len(&self) -> usize {
        self.0.lock().unwrap().pending.len()
    }

    pub fn set_durable_bytes(&self, bytes: Vec<u8>) {
        let mut d = self.0.lock().unwrap();
        d.durable = bytes;
        d.pending.clear();
    }
}

impl LogDevice for MemDisk {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0.lock().unwrap().pending.extend_from_slice(bytes);
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        let mut d = self.0.lock().unwrap();
        let pending = std::mem::take(&mut d.pending);
        d.durable.extend_from_slice(&pending);
        Ok(())
    }

    fn read_all(&mut self) -> io::Result<Vec<u8>> {
        Ok(self.durable_bytes())
    }

    fn truncate(&mut self, len: u64) -> io::Result<()> {
        self.0.lock().unwrap().durable.truncate(len as usize);
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("corrupt record {index} at offset {offset}: {reason}")]
    Corrupt {
        index: usize,
        offset: u64,
        reason: CorruptReason,
    },
    #[error("log i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorruptReason {
    #[error("{0}")]
    Verify(#[from] VerifyError),
    #[error("bad framing: {0}")]
    Framing(DecodeError),
    #[error("record overruns end of log but later records exist")]
    Overrun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    Clean,
    /// `discarded` bytes after `valid_len` belonged to a torn record.
    Torn { discarded: usize },
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub payloads: Vec<Payload>,
    pub valid_len: u64,
    pub tail: Tail,
}

/// Hook run on each raw frame between the read and the verify.
pub type ReadHook<'a> = &'a mut dyn FnMut(usize, &mut Vec<u8>);

fn frame_at(bytes: &[u8], off: usize) -> Option<usize> {
    let rem = bytes.len() - off;
    if rem < 4 {
        return None;
    }
    let len = u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    if len > MAX_BODY_LEN || len + 12 > rem {
        return None;
    }
    Some(len + 12)
}

fn valid_frame_after(bytes: &[u8], start: usize) -> bool {
    (start..bytes.len()).any(|p| {
        frame_at(bytes, p).is_some_and(|total| {
            let body = &bytes[p + 4..p + total - 8];
            let sum = u64::from_be_bytes(bytes[p + total - 8..p + total].try_into().unwrap());
            digest(body) == sum
        })
    })
}

/// Parse and check a whole log image. With `verify` off, checksums are
/// ignored and only decoding can fail.
pub fn scan(bytes: &[u8], verify: bool, hook: Option<ReadHook<'_>>) -> Result<Replay, ReplayError> {
    let mut hook = hook;
    let mut payloads = Vec::new();
    let mut off = 0usize;
    let mut index = 0usize;
    let corrupt = |index, off: usize, reason| ReplayError::Corrupt {
        index,
        offset: off as u64,
        reason,
    };
    while off < bytes.len() {
        let rem = bytes.len() - off;
        if rem < 4 {
            return Ok(Replay {
                payloads,
                valid_len: off as u64,
                tail: Tail::Torn { discarded: rem },
            });
        }
        let len = u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if len > MAX_BODY_LEN {
            return Err(corrupt(index, off, CorruptReason::Framing(DecodeError::LengthLimit(len))));
        }
        let total = len + 12;
        if total > rem {
            if valid_frame_after(bytes, off + 1) {
                return Err(corrupt(index, off, CorruptReason::Overrun));
            }
            return Ok(Replay {
                payloads,
                valid_len: off as u64,
                tail: Tail::Torn { discarded: rem },
            });
        }
        let mut frame = bytes[off..off + total].to_vec();
        if let Some(h) = hook.as_mut() {
            h(index, &mut frame);
        }
        let env = Envelope::from_wire(&frame).map_err(|e| corrupt(index, off, CorruptReason::Framing(e)))?;
        let payload = if verify {
            env.open().map_err(|e| corrupt(index, off, e.into()))?
        } else {
            env.open_unchecked()
                .map_err(|e| corrupt(index, off, CorruptReason::Verify(e.into())))?
        };
        payloads.push(payload);
        off += total;
        index += 1;
    }
    Ok(Replay {
        payloads,
        valid_len: off as u64,
        tail: Tail::Clean,
    })
}

/// Write-ahead log over a [`LogDevice`].
pub struct Wal {
    dev: Box<dyn LogDevice>,
    appended: u64,
    buf: Vec<u8>,
}

impl Wal {
    /// Replay the device, cut off a torn tail, and return the log ready for
    /// appends together with the recovered payloads.
    pub fn open(
        mut dev: Box<dyn LogDevice>,
        verify: bool,
        hook: Option<ReadHook<'_>>,
    ) -> Result<(Wal, Replay), ReplayError> {
        let bytes = dev.read_all()?;
        let replay = scan(&bytes, verify, hook)?;
        if matches!(replay.tail, Tail::Torn { .. }) {
            dev.truncate(replay.valid_len)?;
        }
        let wal = Wal {
            dev,
            appended: replay.payloads.len() as u64,
            buf: Vec::new(),
        };
        Ok((wal, replay))
    }

    /// Buffer one record. Durable only after [`Wal::flush`].
    pub fn append(&mut self, env: &Envelope) -> io::Result<()> {
        self.buf.clear();
        env.write_to(&mut self.buf);
        self.dev.append(&self.buf)?;
        self.appended += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.dev.flush()
    }

    pub fn append_sync(&mut self, env: &Envelope) -> io::Result<()> {
        self.append(env)?;
        self.flush()
    }

    pub fn records(&self) -> u64 {
        self.appended
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecoverError {
    #[error("applied marker for {0} without a decision")]
    MarkerWithoutDecision(InstanceId),
    #[error("applied marker for {got} out of order (expected {expected})")]
    MarkerOutOfOrder { expected: InstanceId, got: InstanceId },
    #[error("two different decisions logged for {0}")]
    ConflictingDecision(InstanceId),
    #[error("unexpected {0} record in log")]
    UnexpectedRecord(&'static str),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Recovered {
    pub acceptor: AcceptorState,
    pub decided: BTreeMap<InstanceId, crate::messages::Value>,
    /// Applied-transition markers in log order: instance and rolling checksum.
    pub markers: Vec<(InstanceId, u64)>,
}

impl Recovered {
    pub fn applied(&self) -> Option<(InstanceId, u64)> {
        self.markers.last().copied()
    }
}

/// Rebuild acceptor and learner state from replayed records.
pub fn recover_state(payloads: &[Payload]) -> Result<Recovered, RecoverError> {
    let mut rec = Recovered::default();
    for p in payloads {
        match &p.msg {
            Msg::Promise { ballot, .. } => {
                rec.acceptor.promised = rec.acceptor.promised.max(*ballot);
            }
            Msg::Accepted { ballot, value } => {
                rec.acceptor.promised = rec.acceptor.promised.max(*ballot);
                let replace = rec
                    .acceptor
                    .accepted
                    .get(&p.instance)
                    .is_none_or(|(b, _)| *b <= *ballot);
                if replace {
                    rec.acceptor.accepted.insert(p.instance, (*ballot, value.clone()));
                }
            }
            Msg::Decision { value } => match rec.decided.get(&p.instance) {
                Some(v) if v != value => return Err(RecoverError::ConflictingDecision(p.instance)),
                Some(_) => {}
                None => {
                    rec.decided.insert(p.instance, value.clone());
                }
            },
            Msg::StateDigest { checksum } => {
                let expected = rec.markers.last().map_or(InstanceId(0), |(j, _)| j.next());
                if p.instance != expected {
                    return Err(RecoverError::MarkerOutOfOrder {
                        expected,
                        got: p.instance,
                    });
                }
                if !rec.decided.contains_key(&p.instance) {
                    return Err(RecoverError::MarkerWithoutDecision(p.instance));
                }
                rec.markers.push((p.instance, *checksum));
            }
            other => return Err(RecoverError::UnexpectedRecord(other.name())),
        }
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::{seal, Ballot, ReplicaId};
    use bytes::Bytes;

    fn decision(j: u64, s: &str) -> Payload {
        Payload::new(
            InstanceId(j),
            ReplicaId(0),
            Msg::Decision {
                value: Bytes::copy_from_slice(s.as_bytes()),
            },
        )
    }

    fn marker(j: u64, c: u64) -> Payload {
        Payload::new(InstanceId(j), ReplicaId(0), Msg::StateDigest { checksum: c })
    }

    fn image(ps: &[Payload]) -> Vec<u8> {
        let mut out = Vec::new();
        for p in ps {
            seal(p).unwrap().write_to(&mut out);
        }
        out
    }

    #[test]
    fn empty_log_replays_nothing() {
        let r = scan(&[], true, None).unwrap();
        assert!(r.payloads.is_empty());
        assert_eq!(r.tail, Tail::Clean);
    }

    #[test]
    fn append_reopen_replay() {
        let disk = MemDisk::new();
        let (mut wal, _) = Wal::open(Box::new(disk.clone()), true, None).unwrap();
        let ps: Vec<_> = (0..5).map(|j| decision(j, "v")).collect();
        for p in &ps {
            wal.append(&seal(p).unwrap()).unwrap();
        }
        wal.flush().unwrap();
        drop(wal);
        let (_, r) = Wal::open(Box::new(disk), true, None).unwrap();
        assert_eq!(r.payloads, ps);
    }

    #[test]
    fn unflushed_records_lost_on_crash() {
        let disk = MemDisk::new();
        let (mut wal, _) = Wal::open(Box::new(disk.clone()), true, None).unwrap();
        wal.append_sync(&seal(&decision(0, "a")).unwrap()).unwrap();
        wal.append(&seal(&decision(1, "b")).unwrap()).unwrap();
        disk.crash_torn(7);
        let (_, r) = Wal::open(Box::new(disk.clone()), true, None).unwrap();
        assert_eq!(r.payloads, vec![decision(0, "a")]);
        // torn bytes were cut off
        assert_eq!(disk.durable_bytes().len() as u64, r.valid_len);
    }

    #[test]
    fn file_device_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r0.log");
        let (mut wal, _) = Wal::open(Box::new(FileDevice::open(&path, true).unwrap()), true, None).unwrap();
        wal.append_sync(&seal(&decision(0, "a")).unwrap()).unwrap();
        drop(wal);
        let (_, r) = Wal::open(Box::new(FileDevice::open(&path, false).unwrap()), true, None).unwrap();
        assert_eq!(r.payloads, vec![decision(0, "a")]);
    }

    #[test]
    fn recover_rebuilds_state() {
        let ps = vec![
            Payload::new(
                InstanceId(0),
                ReplicaId(0),
                Msg::Promise {
                    ballot: Ballot::new(2, 1),
                    accepted: None,
                    horizon: InstanceId(0),
                },
            ),
            Payload::new(
                InstanceId(0),
                ReplicaId(0),
                Msg::Accepted {
                    ballot: Ballot::new(2, 1),
                    value: Bytes::from_static(b"a"),
                },
            ),
            decision(0, "a"),
            marker(0, 11),
            decision(1, "b"),
        ];
        let rec = recover_state(&ps).unwrap();
        assert_eq!(rec.acceptor.promised, Ballot::new(2, 1));
        assert_eq!(rec.decided.len(), 2);
        assert_eq!(rec.applied(), Some((InstanceId(0), 11)));
    }

    #[test]
    fn marker_without_decision_is_inconsistent() {
        assert_eq!(
            recover_state(&[marker(0, 1)]),
            Err(RecoverError::MarkerWithoutDecision(InstanceId(0)))
        );
        assert!(matches!(
            recover_state(&[decision(0, "a"), decision(1, "b"), marker(1, 1)]),
            Err(RecoverError::MarkerOutOfOrder { .. })
        ));
        assert_eq!(
            recover_state(&[decision(0, "a"), decision(0, "b")]),
            Err(RecoverError::ConflictingDecision(InstanceId(0)))
        );
    }

    #[test]
    fn inflated_length_in_middle_record_is_corruption() {
        let mut img = image(&[decision(0, "a"), decision(1, "b"), decision(2, "c")]);
        img[3] = 0xff;
        assert!(matches!(
            scan(&img, true, None),
            Err(ReplayError::Corrupt {
                index: 0,
                reason: CorruptReason::Overrun,
                ..
            })
        ));
    }
}
