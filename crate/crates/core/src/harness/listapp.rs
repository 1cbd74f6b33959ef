//! Reference application: a replicated list of strings.

use bytes::Bytes;

use crate::messages::{digest, Value};
use crate::replica::{Descriptor, StateMachine};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ListOp {
    Add { pos: u32, item: String },
    Remove { pos: u32 },
    Set { pos: u32, item: String },
}

/// Operation plus the client request id that makes its encoding unique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: u64,
    pub op: ListOp,
}

impl Request {
    /// `[u8 tag][u64 id][u32 pos][u32 len][item]` (item omitted for Remove).
    pub fn encode(&self) -> Value {
        let mut out = Vec::with_capacity(24);
        let (tag, pos, item) = match &self.op {
            ListOp::Add { pos, item } => (1u8, *pos, Some(item)),
            ListOp::Remove { pos } => (2, *pos, None),
            ListOp::Set { pos, item } => (3, *pos, Some(item)),
        };
        out.push(tag);
        out.extend_from_slice(&self.id.to_be_bytes());
        out.extend_from_slice(&pos.to_be_bytes());
        if let Some(item) = item {
            out.extend_from_slice(&(item.len() as u32).to_be_bytes());
            out.extend_from_slice(item.as_bytes());
        }
        Bytes::from(out)
    }

    pub fn decode(b: &[u8]) -> Option<Request> {
        let tag = *b.first()?;
        let id = u64::from_be_bytes(b.get(1..9)?.try_into().ok()?);
        let pos = u32::from_be_bytes(b.get(9..13)?.try_into().ok()?);
        let item = |b: &[u8]| -> Option<String> {
            let len = u32::from_be_bytes(b.get(13..17)?.try_into().ok()?) as usize;
            let raw = b.get(17..17 + len)?;
            if b.len() != 17 + len {
                return None;
            }
            Some(String::from_utf8_lossy(raw).into_owned())
        };
        let op = match tag {
            1 => ListOp::Add { pos, item: item(b)? },
            2 if b.len() == 13 => ListOp::Remove { pos },
            3 => ListOp::Set { pos, item: item(b)? },
            _ => return None,
        };
        Some(Request { id, op })
    }
}

/// Positions are reduced modulo the current length so every operation is
/// total on any state.
fn slot(pos: u32, len: usize) -> usize {
    if len == 0 {
        0
    } else {
        pos as usize % len
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ListApp;

pub fn encode_list(items: &[String]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + items.iter().map(|s| s.len() + 4).sum::<usize>());
    out.extend_from_slice(&(items.len() as u32).to_be_bytes());
    for s in items {
        out.extend_from_slice(&(s.len() as u32).to_be_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    out
}

pub fn decode_list(b: &[u8]) -> Option<Vec<String>> {
    let count = u32::from_be_bytes(b.get(..4)?.try_into().ok()?) as usize;
    let mut off = 4;
    let mut items = Vec::with_capacity(count.min(b.len()));
    for _ in 0..count {
        let len = u32::from_be_bytes(b.get(off..off + 4)?.try_into().ok()?) as usize;
        off += 4;
        items.push(String::from_utf8(b.get(off..off + len)?.to_vec()).ok()?);
        off += len;
    }
    (off == b.len()).then_some(items)
}

impl StateMachine for ListApp {
    type State = Vec<String>;

    fn initial(&self) -> Vec<String> {
        Vec::new()
    }

    fn execute(&self, state: &mut Vec<String>, op: &[u8]) {
        let Some(req) = Request::decode(op) else {
            return;
        };
        match req.op {
            ListOp::Add { pos, item } => {
                let i = slot(pos, state.len() + 1);
                state.insert(i, item);
            }
            ListOp::Remove { pos } => {
                if !state.is_empty() {
                    let i = slot(pos, state.len());
                    state.remove(i);
                }
            }
            ListOp::Set { pos, item } => {
                if !state.is_empty() {
                    let i = slot(pos, state.len());
                    state[i] = item;
                }
            }
        }
    }

    /// Digest of the canonical encoding followed by the encoding itself.
    fn describe(&self, state: &Vec<String>) -> Descriptor {
        let enc = encode_list(state);
        let mut out = digest(&enc).to_be_bytes().to_vec();
        out.extend_from_slice(&enc);
        Descriptor(out)
    }

    fn semantic_check(&self, op: &[u8], before: &Descriptor, after: &Vec<String>) -> bool {
        let Some(before) = before.0.get(8..).and_then(decode_list) else {
            return false;
        };
        let Some(req) = Request::decode(op) else {
            // undecodable operations are no-ops
            return *after == before;
        };
        let n = before.len();
        match req.op {
            ListOp::Add { pos, item } => after.len() == n + 1 && after[slot(pos, n + 1)] == item,
            ListOp::Remove { pos } => {
                if n == 0 {
                    after.is_empty()
                } else {
                    let i = slot(pos, n);
                    after.len() == n - 1 && after[..i] == before[..i] && after[i..] == before[i + 1..]
                }
            }
            ListOp::Set { pos, item } => n == 0 || (after.len() == n && after[slot(pos, n)] == item),
        }
    }

    fn encode_state(&self, state: &Vec<String>) -> Vec<u8> {
        encode_list(state)
    }

    fn decode_state(&self, bytes: &[u8]) -> Option<Vec<String>> {
        decode_list(bytes)
    }
}
