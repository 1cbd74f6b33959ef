//! Reference implementations written from the wire and state formats, kept
//! apart from the library code they check.
#![allow(dead_code)]

use bytes::Bytes;
use proptest::prelude::*;

use hardpaxos::messages::{seal, Ballot, InstanceId, Msg, Payload, ReplicaId, Value};

pub fn xxh64(bytes: &[u8]) -> u64 {
    twox_hash::XxHash64::oneshot(0, bytes)
}

fn be_u32(b: &[u8], at: usize) -> Option<u32> {
    Some(u32::from_be_bytes(b.get(at..at + 4)?.try_into().ok()?))
}

/// List of strings driven by encoded requests:
/// `[u8 tag][u64 id][u32 pos]` then `[u32 len][item]` for insert and overwrite.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RefList(pub Vec<String>);

impl RefList {
    pub fn apply(&mut self, op: &[u8]) {
        let Some(&tag) = op.first() else { return };
        let Some(pos) = be_u32(op, 9) else { return };
        let pos = pos as usize;
        let item = || {
            let len = be_u32(op, 13)? as usize;
            (op.len() == 17 + len).then(|| String::from_utf8_lossy(&op[17..]).into_owned())
        };
        let n = self.0.len();
        match tag {
            1 => {
                if let Some(s) = item() {
                    self.0.insert(pos % (n + 1), s);
                }
            }
            2 if op.len() == 13 && n > 0 => {
                self.0.remove(pos % n);
            }
            3 if n > 0 => {
                if let Some(s) = item() {
                    self.0[pos % n] = s;
                }
            }
            _ => {}
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = (self.0.len() as u32).to_be_bytes().to_vec();
        for s in &self.0 {
            out.extend_from_slice(&(s.len() as u32).to_be_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out
    }
}

/// Rolling checksum after each op of a delivered sequence, starting from 0.
/// No-op slots (`None`) still advance the chain.
pub fn rolling_chain(ops: &[Option<Value>]) -> Vec<u64> {
    let mut list = RefList::default();
    let mut prev = 0u64;
    ops.iter()
        .map(|op| {
            if let Some(op) = op {
                list.apply(op);
            }
            let mut buf = list.encode();
            buf.extend_from_slice(&prev.to_be_bytes());
            prev = xxh64(&buf);
            prev
        })
        .collect()
}

pub fn add_op(id: u64, pos: u32, item: &str) -> Value {
    let mut out = vec![1u8];
    out.extend_from_slice(&id.to_be_bytes());
    out.extend_from_slice(&pos.to_be_bytes());
    out.extend_from_slice(&(item.len() as u32).to_be_bytes());
    out.extend_from_slice(item.as_bytes());
    out.into()
}

/// Frame one record the way the log does: `[u32 len][body][u64 digest]`.
pub fn frame(p: &Payload) -> Vec<u8> {
    let env = seal(p).unwrap();
    let mut out = (env.body().len() as u32).to_be_bytes().to_vec();
    out.extend_from_slice(env.body());
    out.extend_from_slice(&xxh64(env.body()).to_be_bytes());
    out
}

/// A consistent three-record replica log: accept, decide and apply one
/// operation at instance 0. Returns the bytes and each record's start offset.
pub fn three_record_log() -> (Vec<u8>, [usize; 3], Value) {
    let op = add_op(1, 0, "alpha");
    let me = ReplicaId(0);
    let j = InstanceId(0);
    let chain = rolling_chain(&[Some(op.clone())])[0];
    let records = [
        Payload::new(
            j,
            me,
            Msg::Accepted {
                ballot: Ballot::new(1, 0),
                value: op.clone(),
            },
        ),
        Payload::new(j, me, Msg::Decision { value: op.clone() }),
        Payload::new(j, me, Msg::StateDigest { checksum: chain }),
    ];
    let mut bytes = Vec::new();
    let mut starts = [0; 3];
    for (i, r) in records.iter().enumerate() {
        starts[i] = bytes.len();
        bytes.extend(frame(r));
    }
    (bytes, starts, op)
}

fn ballot() -> impl Strategy<Value = Ballot> {
    (any::<u64>(), any::<u32>()).prop_map(|(r, p)| Ballot::new(r, p))
}

fn value() -> impl Strategy<Value = Bytes> {
    prop::collection::vec(any::<u8>(), 0..300).prop_map(Bytes::from)
}

fn msg() -> impl Strategy<Value = Msg> {
    prop_oneof![
        ballot().prop_map(|ballot| Msg::Prepare { ballot }),
        (ballot(), prop::option::of((ballot(), value())), any::<u64>()).prop_map(|(ballot, accepted, h)| Msg::Promise {
            ballot,
            accepted,
            horizon: InstanceId(h),
        }),
        (ballot(), value()).prop_map(|(ballot, value)| Msg::Propose { ballot, value }),
        (ballot(), value()).prop_map(|(ballot, value)| Msg::Accepted { ballot, value }),
        value().prop_map(|value| Msg::Decision { value }),
        value().prop_map(|value| Msg::ClientRequest { value }),
        any::<u64>().prop_map(|checksum| Msg::StateDigest { checksum }),
        ballot().prop_map(|promised| Msg::Nack { promised }),
    ]
}

pub fn payload() -> impl Strategy<Value = Payload> {
    (any::<u64>(), any::<u32>(), msg()).prop_map(|(j, s, m)| Payload::new(InstanceId(j), ReplicaId(s), m))
}
