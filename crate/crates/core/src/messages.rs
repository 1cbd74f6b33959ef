//! Protocol payloads, their canonical binary codec, and the checksum-sealed
//! envelope that is the unit of every network send and log append.
//!
//! Envelope layout on the wire and on disk:
//!
//! ```text
//! [u32 BE body_length][body bytes][u64 BE checksum]
//! ```
//!
//! where `checksum = xxh64(body, seed = 0)`. Body layout (all integers
//! big-endian):
//!
//! ```text
//! [u8 tag][u32 sender][u64 instance] variant fields...
//!   1 Prepare       ballot
//!   2 Promise       ballot, u8 has_accepted, [ballot, value]?, u64 horizon
//!   3 Propose       ballot, value
//!   4 Accepted      ballot, value
//!   5 Decision      value
//!   6 ClientRequest value
//!   7 StateDigest   u64 checksum
//!   8 Nack          ballot
//! ballot = u64 round, u32 proposer
//! value  = u32 length, bytes
//! ```

use std::fmt;

use bytes::Bytes;
use thiserror::Error;

/// Largest body accepted by the codec. Length prefixes above this are
/// rejected before any allocation happens.
pub const MAX_BODY_LEN: usize = 16 * 1024 * 1024;

/// Bytes of framing around a body: length prefix plus trailing checksum.
pub const FRAME_OVERHEAD: usize = 4 + 8;

/// 64-bit digest used for envelopes, descriptors and the rolling state
/// checksum (XXH64, seed 0).
pub fn digest(bytes: &[u8]) -> u64 {
    xxhash_rust::xxh64::xxh64(bytes, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ReplicaId(pub u32);

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Slot index in the totally ordered decision sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct InstanceId(pub u64);

impl InstanceId {
    /// Sentinel carried by state digests of a replica that has applied nothing.
    pub const NONE: InstanceId = InstanceId(u64::MAX);

    pub fn next(self) -> InstanceId {
        InstanceId(self.0.wrapping_add(1))
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Voting-round identifier. Ordered by `(round, proposer)`, so two
/// proposers never issue equal ballots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Ballot {
    pub round: u64,
    pub proposer: ReplicaId,
}

impl Ballot {
    pub const ZERO: Ballot = Ballot {
        round: 0,
        proposer: ReplicaId(0),
    };

    pub fn new(round: u64, proposer: u32) -> Ballot {
        Ballot {
            round,
            proposer: ReplicaId(proposer),
        }
    }
}

impl fmt::Display for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.round, self.proposer)
    }
}

/// Opaque application operation.
pub type Value = Bytes;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Msg {
    Prepare {
        ballot: Ballot,
    },
    /// Reply to a prepare. One promise is sent per instance in
    /// `[prepare.instance, horizon]`, where `horizon` is the sender's highest
    /// instance holding an accepted value.
    Promise {
        ballot: Ballot,
        accepted: Option<(Ballot, Value)>,
        horizon: InstanceId,
    },
    Propose {
        ballot: Ballot,
        value: Value,
    },
    Accepted {
        ballot: Ballot,
        value: Value,
    },
    Decision {
        value: Value,
    },
    ClientRequest {
        value: Value,
    },
    /// Rolling state checksum at `instance`. Also used as the applied-transition
    /// marker in the log and as the idle heartbeat.
    StateDigest {
        checksum: u64,
    },
    /// Ballot too low; carries the ballot the sender has promised.
    Nack {
        promised: Ballot,
    },
}

impl Msg {
    pub fn name(&self) -> &'static str {
        match self {
            Msg::Prepare { .. } => "Prepare",
            Msg::Promise { .. } => "Promise",
            Msg::Propose { .. } => "Propose",
            Msg::Accepted { .. } => "Accepted",
            Msg::Decision { .. } => "Decision",
            Msg::ClientRequest { .. } => "ClientRequest",
            Msg::StateDigest { .. } => "StateDigest",
            Msg::Nack { .. } => "Nack",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Msg::Prepare { .. } => 1,
            Msg::Promise { .. } => 2,
            Msg::Propose { .. } => 3,
            Msg::Accepted { .. } => 4,
            Msg::Decision { .. } => 5,
            Msg::ClientRequest { .. } => 6,
            Msg::StateDigest { .. } => 7,
            Msg::Nack { .. } => 8,
        }
    }
}

/// A protocol message: variant plus the instance and sender it is tagged with.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Payload {
    pub instance: InstanceId,
    pub sender: ReplicaId,
    pub msg: Msg,
}

impl Payload {
    pub fn new(instance: InstanceId, sender: ReplicaId, msg: Msg) -> Payload {
        Payload {
            instance,
            sender,
            msg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("body of {0} bytes exceeds the {MAX_BODY_LEN} byte limit")]
    TooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated input: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("unknown payload tag {0}")]
    UnknownTag(u8),
    #[error("invalid option flag {0}")]
    BadFlag(u8),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("length {0} exceeds limit")]
    LengthLimit(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("checksum mismatch: attached {attached:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { attached: u64, computed: u64 },
    #[error("checksum valid but body malformed: {0}")]
    Decode(#[from] DecodeError),
}

fn put_ballot(out: &mut Vec<u8>, b: &Ballot) {
    out.extend_from_slice(&b.round.to_be_bytes());
    out.extend_from_slice(&b.proposer.0.to_be_bytes());
}

fn put_value(out: &mut Vec<u8>, v: &[u8]) {
    out.extend_from_slice(&(v.len() as u32).to_be_bytes());
    out.extend_from_slice(v);
}

/// Canonical encoding of a payload.
pub fn encode(payload: &Payload) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(32);
    out.push(payload.msg.tag());
    out.extend_from_slice(&payload.sender.0.to_be_bytes());
    out.extend_from_slice(&payload.instance.0.to_be_bytes());
    match &payload.msg {
        Msg::Prepare { ballot } | Msg::Nack { promised: ballot } => put_ballot(&mut out, ballot),
        Msg::Promise {
            ballot,
            accepted,
            horizon,
        } => {
            put_ballot(&mut out, ballot);
            match accepted {
                None => out.push(0),
                Some((b, v)) => {
                    out.push(1);
                    put_ballot(&mut out, b);
                    put_value(&mut out, v);
                }
            }
            out.extend_from_slice(&horizon.0.to_be_bytes());
        }
        Msg::Propose { ballot, value } | Msg::Accepted { ballot, value } => {
            put_ballot(&mut out, ballot);
            put_value(&mut out, value);
        }
        Msg::Decision { value } | Msg::ClientRequest { value } => put_value(&mut out, value),
        Msg::StateDigest { checksum } => out.extend_from_slice(&checksum.to_be_bytes()),
    }
    if out.len() > MAX_BODY_LEN {
        return Err(EncodeError::TooLarge(out.len()));
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn ballot(&mut self) -> Result<Ballot, DecodeError> {
        let round = self.u64()?;
        let proposer = ReplicaId(self.u32()?);
        Ok(Ballot { round, proposer })
    }

    fn value(&mut self) -> Result<Value, DecodeError> {
        let len = self.u32()? as usize;
        if len > MAX_BODY_LEN {
            return Err(DecodeError::LengthLimit(len));
        }
        Ok(Bytes::copy_from_slice(self.take(len)?))
    }
}

/// Inverse of [`encode`]. Rejects truncation, unknown tags, non-canonical
/// option flags and trailing bytes.
pub fn decode(bytes: &[u8]) -> Result<Payload, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let tag = r.u8()?;
    let sender = ReplicaId(r.u32()?);
    let instance = InstanceId(r.u64()?);
    let msg = match tag {
        1 => Msg::Prepare { ballot: r.ballot()? },
        2 => {
            let ballot = r.ballot()?;
            let accepted = match r.u8()? {
                0 => None,
                1 => {
                    let b = r.ballot()?;
                    Some((b, r.value()?))
                }
                f => return Err(DecodeError::BadFlag(f)),
            };
            let horizon = InstanceId(r.u64()?);
            Msg::Promise {
                ballot,
                accepted,
                horizon,
            }
        }
        3 => Msg::Propose {
            ballot: r.ballot()?,
            value: r.value()?,
        },
        4 => Msg::Accepted {
            ballot: r.ballot()?,
            value: r.value()?,
        },
        5 => Msg::Decision { value: r.value()? },
        6 => Msg::ClientRequest { value: r.value()? },
        7 => Msg::StateDigest { checksum: r.u64()? },
        8 => Msg::Nack {
            promised: r.ballot()?,
        },
        t => return Err(DecodeError::UnknownTag(t)),
    };
    if r.pos != bytes.len() {
        return Err(DecodeError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(Payload {
        instance,
        sender,
        msg,
    })
}

/// Checksum-sealed, immutable serialized payload.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Envelope {
    body: Bytes,
    checksum: u64,
}

impl fmt::Debug for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Envelope")
            .field("body_len", &self.body.len())
            .field("checksum", &format_args!("{:#018x}", self.checksum))
            .finish()
    }
}

/// Encode `payload` and attach the digest of the encoded body.
pub fn seal(payload: &Payload) -> Result<Envelope, EncodeError> {
    let body = encode(payload)?;
    let checksum = digest(&body);
    Ok(Envelope {
        body: body.into(),
        checksum,
    })
}

/// Recompute the digest, compare it with the attached one, then decode.
pub fn verify(env: &Envelope) -> Result<Payload, VerifyError> {
    env.open()
}

impl Envelope {
    /// Assemble an envelope from raw parts without checking anything. Used for
    /// bytes that arrive from the network or disk, and by the fault injector.
    pub fn from_parts(body: impl Into<Bytes>, checksum: u64) -> Envelope {
        Envelope {
            body: body.into(),
            checksum,
        }
    }

    pub fn body(&self) -> &[u8] {
        &self.body
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn open(&self) -> Result<Payload, VerifyError> {
        let computed = digest(&self.body);
        if computed != self.checksum {
            return Err(VerifyError::ChecksumMismatch {
                attached: self.checksum,
                computed,
            });
        }
        Ok(decode(&self.body)?)
    }

    /// Decode the body while ignoring the checksum. This is what an
    /// unhardened node does.
    pub fn open_unchecked(&self) -> Result<Payload, DecodeError> {
        decode(&self.body)
    }

    pub fn wire_len(&self) -> usize {
        self.body.len() + FRAME_OVERHEAD
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.body.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.checksum.to_be_bytes());
    }

    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        self.write_to(&mut out);
        out
    }

    /// Parse exactly one framed envelope. The checksum is not verified here.
    pub fn from_wire(bytes: &[u8]) -> Result<Envelope, DecodeError> {
        if bytes.len() < FRAME_OVERHEAD {
            return Err(DecodeError::Truncated {
                offset: 0,
                needed: FRAME_OVERHEAD,
            });
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        if len > MAX_BODY_LEN {
            return Err(DecodeError::LengthLimit(len));
        }
        let total = len + FRAME_OVERHEAD;
        if bytes.len() < total {
            return Err(DecodeError::Truncated {
                offset: 4,
                needed: total - 4,
            });
        }
        if bytes.len() > total {
            return Err(DecodeError::TrailingBytes(bytes.len() - total));
        }
        let body = Bytes::copy_from_slice(&bytes[4..4 + len]);
        let checksum = u64::from_be_bytes(bytes[4 + len..total].try_into().unwrap());
        Ok(Envelope { body, checksum })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Payload {
        Payload::new(
            InstanceId(7),
            ReplicaId(2),
            Msg::Promise {
                ballot: Ballot::new(3, 1),
                accepted: Some((Ballot::new(2, 0), Bytes::from_static(b"abc"))),
                horizon: InstanceId(9),
            },
        )
    }

    #[test]
    fn ballot_order_is_lexicographic() {
        assert!(Ballot::new(1, 5) < Ballot::new(2, 0));
        assert!(Ballot::new(2, 0) < Ballot::new(2, 1));
        assert_ne!(Ballot::new(2, 0), Ballot::new(2, 1));
    }

    #[test]
    fn decode_empty_is_truncated() {
        assert!(matches!(decode(&[]), Err(DecodeError::Truncated { .. })));
    }

    #[test]
    fn trailing_byte_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes.push(0);
        assert_eq!(decode(&bytes), Err(DecodeError::TrailingBytes(1)));
    }

    #[test]
    fn unknown_tag_and_bad_flag() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = 99;
        assert_eq!(decode(&bytes), Err(DecodeError::UnknownTag(99)));
        let mut bytes = encode(&sample()).unwrap();
        // tag + sender + instance + ballot
        bytes[1 + 4 + 8 + 12] = 2;
        assert_eq!(decode(&bytes), Err(DecodeError::BadFlag(2)));
    }

    #[test]
    fn seal_is_deterministic() {
        assert_eq!(seal(&sample()).unwrap(), seal(&sample()).unwrap());
        assert_eq!(verify(&seal(&sample()).unwrap()).unwrap(), sample());
    }

    #[test]
    fn oversize_value_rejected() {
        let p = Payload::new(
            InstanceId(0),
            ReplicaId(0),
            Msg::Decision {
                value: Bytes::from(vec![0u8; MAX_BODY_LEN]),
            },
        );
        assert!(matches!(seal(&p), Err(EncodeError::TooLarge(_))));
    }

    #[test]
    fn wire_round_trip_and_framing_errors() {
        let env = seal(&sample()).unwrap();
        let wire = env.to_wire();
        assert_eq!(Envelope::from_wire(&wire).unwrap(), env);
        assert!(Envelope::from_wire(&wire[..wire.len() - 1]).is_err());
        let mut long = wire.clone();
        long.push(1);
        assert_eq!(Envelope::from_wire(&long), Err(DecodeError::TrailingBytes(1)));
    }
}
