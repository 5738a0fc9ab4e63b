//! Wire format.
//!
//! ```text
//! u32 BE   length of everything that follows
//! u8       msg_type
//! u32 LE   layer
//! u32 LE   node_id (sender)
//! u64 LE   seq (forward-pass index)
//! ...      payload
//! ```

use std::io::Read;

use crate::error::{Error, Result};
use crate::numerics::Vector;

/// Bytes after the length prefix in a frame with an empty payload.
pub const HEADER_LEN: usize = 1 + 4 + 4 + 8;
pub const LENGTH_PREFIX: usize = 4;
pub const MAX_FRAME_LEN: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    ExpertInput = 1,
    ExpertPartial = 2,
    MaxAnnounce = 3,
    TokenSync = 4,
    Hello = 5,
    Shutdown = 6,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => MsgType::ExpertInput,
            2 => MsgType::ExpertPartial,
            3 => MsgType::MaxAnnounce,
            4 => MsgType::TokenSync,
            5 => MsgType::Hello,
            6 => MsgType::Shutdown,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub layer: u32,
    pub node_id: u32,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, layer: u32, node_id: u32, seq: u64, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            layer,
            node_id,
            seq,
            payload,
        }
    }

    /// Value of the length prefix.
    pub fn length_field(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encoded_len(&self) -> usize {
        LENGTH_PREFIX + self.length_field()
    }
}

pub fn encode_frame(f: &Frame) -> Result<Vec<u8>> {
    let len = f.length_field();
    if len > MAX_FRAME_LEN {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds {MAX_FRAME_LEN}")));
    }
    let mut out = Vec::with_capacity(LENGTH_PREFIX + len);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.push(f.msg_type as u8);
    out.extend_from_slice(&f.layer.to_le_bytes());
    out.extend_from_slice(&f.node_id.to_le_bytes());
    out.extend_from_slice(&f.seq.to_le_bytes());
    out.extend_from_slice(&f.payload);
    Ok(out)
}

fn parse_body(body: &[u8]) -> Result<Frame> {
    if body.len() < HEADER_LEN {
        return Err(Error::Protocol(format!("frame body of {} bytes is truncated", body.len())));
    }
    let msg_type = MsgType::from_u8(body[0])
        .ok_or_else(|| Error::Protocol(format!("unknown message type {}", body[0])))?;
    let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().expect("4 bytes"));
    Ok(Frame {
        msg_type,
        layer: u32_at(1),
        node_id: u32_at(5),
        seq: u64::from_le_bytes(body[9..17].try_into().expect("8 bytes")),
        payload: body[HEADER_LEN..].to_vec(),
    })
}

fn check_length(len: usize) -> Result<()> {
    if len < HEADER_LEN {
        return Err(Error::Protocol(format!("length field {len} is below the header size")));
    }
    if len > MAX_FRAME_LEN {
        return Err(Error::Protocol(format!("length field {len} exceeds {MAX_FRAME_LEN}")));
    }
    Ok(())
}

/// Decodes exactly one frame; trailing or missing bytes are errors.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame> {
    if bytes.len() < LENGTH_PREFIX {
        return Err(Error::Protocol("missing length prefix".into()));
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    check_length(len)?;
    let body = &bytes[LENGTH_PREFIX..];
    if body.len() != len {
        return Err(Error::Protocol(format!(
            "length field says {len} bytes, got {}",
            body.len()
        )));
    }
    parse_body(body)
}

/// Reads one frame from a stream. Returns `None` on a clean end of stream
/// at a frame boundary.
pub fn read_frame(reader: &mut impl Read) -> Result<Option<Frame>> {
    let mut prefix = [0u8; LENGTH_PREFIX];
    let mut got = 0;
    while got < LENGTH_PREFIX {
        match reader.read(&mut prefix[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(Error::Protocol("stream ended inside a length prefix".into())),
            n => got += n,
        }
    }
    let len = u32::from_be_bytes(prefix) as usize;
    check_length(len)?;
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Protocol("stream ended inside a frame".into())
        } else {
            Error::Io(e)
        }
    })?;
    parse_body(&body).map(Some)
}

pub fn f32s_to_bytes(values: &[f32], out: &mut Vec<u8>) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Protocol(format!("{} bytes is not a whole number of f32s", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// `k` gated expert outputs of `d` values each, concatenated.
pub fn encode_partial(terms: &[&Vector]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in terms {
        f32s_to_bytes(t.as_slice(), &mut out);
    }
    out
}

pub fn decode_partial(payload: &[u8], d_embed: usize, k: usize) -> Result<Vec<Vector>> {
    if payload.len() != k * d_embed * 4 {
        return Err(Error::Protocol(format!(
            "partial carries {} bytes, expected {k} vectors of {d_embed}",
            payload.len()
        )));
    }
    let values = bytes_to_f32s(payload)?;
    values
        .chunks_exact(d_embed.max(1))
        .map(|c| Vector::new(c.to_vec()))
        .collect()
}

/// Hidden state followed by `(expert u32, gate f32)` pairs.
pub fn encode_expert_input(h: &Vector, experts: &[usize], gates: &Vector) -> Vec<u8> {
    let mut out = Vec::with_capacity(h.len() * 4 + experts.len() * 8);
    f32s_to_bytes(h.as_slice(), &mut out);
    for (i, &e) in experts.iter().enumerate() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
        out.extend_from_slice(&gates[i].to_le_bytes());
    }
    out
}

pub fn decode_expert_input(payload: &[u8], d_embed: usize) -> Result<(Vector, Vec<usize>, Vector)> {
    let head = d_embed * 4;
    if payload.len() < head || !(payload.len() - head).is_multiple_of(8) || payload.len() == head {
        return Err(Error::Protocol(format!(
            "expert input of {} bytes does not fit d_embed={d_embed}",
            payload.len()
        )));
    }
    let h = Vector::new(bytes_to_f32s(&payload[..head])?)?;
    let mut experts = Vec::new();
    let mut gates = Vec::new();
    for pair in payload[head..].chunks_exact(8) {
        experts.push(u32::from_le_bytes(pair[..4].try_into().expect("4 bytes")) as usize);
        gates.push(f32::from_le_bytes(pair[4..].try_into().expect("4 bytes")));
    }
    Ok((h, experts, Vector::new(gates)?))
}
