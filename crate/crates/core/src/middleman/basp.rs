//! Binary frames exchanged between nodes.
//!
//! Every frame is a fixed 60-byte header followed by `payload_len` payload
//! bytes. All integers are big-endian.
//!
//! | offset | size | field        |
//! |-------:|-----:|--------------|
//! | 0      | 4    | magic `CAFX` |
//! | 4      | 2    | version      |
//! | 6      | 1    | operation    |
//! | 7      | 1    | flags        |
//! | 8      | 16   | source node  |
//! | 24     | 16   | dest node    |
//! | 40     | 4    | source actor |
//! | 44     | 4    | dest actor   |
//! | 48     | 8    | message id   |
//! | 56     | 4    | payload len  |

use thiserror::Error;

use crate::interface::{MessagingInterface, NodeId};

pub const MAGIC: [u8; 4] = *b"CAFX";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 60;

/// Dispatch flag: the payload is an exit signal for a linked actor.
pub const FLAG_EXIT: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Operation {
    ServerHandshake = 1,
    ClientHandshake = 2,
    Dispatch = 3,
    Monitor = 4,
    KillProxy = 5,
}

impl Operation {
    pub fn from_u8(v: u8) -> Option<Operation> {
        Some(match v {
            1 => Operation::ServerHandshake,
            2 => Operation::ClientHandshake,
            3 => Operation::Dispatch,
            4 => Operation::Monitor,
            5 => Operation::KillProxy,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BaspError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unknown operation {0}")]
    UnknownOperation(u8),
    #[error("frame truncated")]
    Truncated,
    #[error("malformed payload")]
    MalformedPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u16,
    pub operation: Operation,
    pub flags: u8,
    pub source_node: NodeId,
    pub dest_node: NodeId,
    pub source_actor: u32,
    pub dest_actor: u32,
    pub message_id: u64,
    pub payload_len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaspFrame {
    pub version: u16,
    pub operation: Operation,
    pub flags: u8,
    pub source_node: NodeId,
    pub dest_node: NodeId,
    pub source_actor: u32,
    pub dest_actor: u32,
    pub message_id: u64,
    pub payload: Vec<u8>,
}

fn node_at(b: &[u8], at: usize) -> NodeId {
    let mut n = [0u8; 16];
    n.copy_from_slice(&b[at..at + 16]);
    NodeId::from_bytes(n)
}

impl Header {
    pub fn decode(b: &[u8]) -> Result<Header, BaspError> {
        if b.len() < HEADER_LEN {
            return Err(BaspError::Truncated);
        }
        if b[0..4] != MAGIC {
            return Err(BaspError::BadMagic);
        }
        let operation = Operation::from_u8(b[6]).ok_or(BaspError::UnknownOperation(b[6]))?;
        Ok(Header {
            version: u16::from_be_bytes([b[4], b[5]]),
            operation,
            flags: b[7],
            source_node: node_at(b, 8),
            dest_node: node_at(b, 24),
            source_actor: u32::from_be_bytes(b[40..44].try_into().unwrap()),
            dest_actor: u32::from_be_bytes(b[44..48].try_into().unwrap()),
            message_id: u64::from_be_bytes(b[48..56].try_into().unwrap()),
            payload_len: u32::from_be_bytes(b[56..60].try_into().unwrap()),
        })
    }
}

impl BaspFrame {
    pub fn new(operation: Operation, source_node: NodeId, dest_node: NodeId) -> BaspFrame {
        BaspFrame {
            version: VERSION,
            operation,
            flags: 0,
            source_node,
            dest_node,
            source_actor: 0,
            dest_actor: 0,
            message_id: 0,
            payload: Vec::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_be_bytes());
        out.push(self.operation as u8);
        out.push(self.flags);
        out.extend_from_slice(self.source_node.as_bytes());
        out.extend_from_slice(self.dest_node.as_bytes());
        out.extend_from_slice(&self.source_actor.to_be_bytes());
        out.extend_from_slice(&self.dest_actor.to_be_bytes());
        out.extend_from_slice(&self.message_id.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
    }

    /// Decodes one frame from the start of `b`. Returns the frame and the
    /// number of bytes consumed, or `Ok(None)` if more bytes are needed.
    pub fn decode_prefix(b: &[u8]) -> Result<Option<(BaspFrame, usize)>, BaspError> {
        if b.len() >= 4 && b[0..4] != MAGIC {
            return Err(BaspError::BadMagic);
        }
        if b.len() < HEADER_LEN {
            return Ok(None);
        }
        let h = Header::decode(b)?;
        let total = HEADER_LEN + h.payload_len as usize;
        if b.len() < total {
            return Ok(None);
        }
        Ok(Some((BaspFrame::from_parts(h, b[HEADER_LEN..total].to_vec()), total)))
    }

    /// Decodes exactly one frame occupying all of `b`.
    pub fn decode(b: &[u8]) -> Result<BaspFrame, BaspError> {
        match BaspFrame::decode_prefix(b)? {
            Some((f, used)) if used == b.len() => Ok(f),
            Some(_) => Err(BaspError::MalformedPayload),
            None => Err(BaspError::Truncated),
        }
    }

    pub fn from_parts(h: Header, payload: Vec<u8>) -> BaspFrame {
        BaspFrame {
            version: h.version,
            operation: h.operation,
            flags: h.flags,
            source_node: h.source_node,
            dest_node: h.dest_node,
            source_actor: h.source_actor,
            dest_actor: h.dest_actor,
            message_id: h.message_id,
            payload,
        }
    }
}

/// Payload of both handshake frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Handshake {
    pub node: NodeId,
    /// Published actor; 0 in client handshakes.
    pub actor: u32,
    /// `None` for a dynamically typed actor.
    pub interface: Option<MessagingInterface>,
}

impl Handshake {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.node.as_bytes());
        out.extend_from_slice(&self.actor.to_be_bytes());
        match &self.interface {
            Some(i) => {
                out.push(1);
                out.extend_from_slice(&i.encode());
            }
            None => out.push(0),
        }
        out
    }

    pub fn decode(b: &[u8]) -> Result<Handshake, BaspError> {
        if b.len() < 21 {
            return Err(BaspError::MalformedPayload);
        }
        let interface = match b[20] {
            0 if b.len() == 21 => None,
            1 => Some(MessagingInterface::decode(&b[21..]).map_err(|_| BaspError::MalformedPayload)?),
            _ => return Err(BaspError::MalformedPayload),
        };
        Ok(Handshake {
            node: node_at(b, 0),
            actor: u32::from_be_bytes(b[16..20].try_into().unwrap()),
            interface,
        })
    }
}
