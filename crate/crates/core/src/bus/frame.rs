//! Wire-level frame envelope.
//!
//! Layout (all multi-octet integers big-endian):
//!
//! ```text
//! 0xAE 0x52 | version u8 | flags u8 | topic_len u16 | topic | seq u64 | timestamp_ns u64 | payload_len u32 | payload
//! ```

use super::topic::validate_topic;
use super::BusError;

pub const MAGIC: [u8; 2] = [0xAE, 0x52];
pub const VERSION: u8 = 1;
pub const FLAG_COMPRESSED: u8 = 0x01;

/// Octets before the topic: magic, version, flags, topic length.
const PREFIX_LEN: usize = 6;
/// seq + timestamp + payload length.
const MIDDLE_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub flags: u8,
    pub topic: String,
    pub seq: u64,
    pub timestamp_ns: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(topic: impl Into<String>, seq: u64, timestamp_ns: u64, payload: Vec<u8>) -> Self {
        Frame {
            flags: 0,
            topic: topic.into(),
            seq,
            timestamp_ns,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        PREFIX_LEN + self.topic.len() + MIDDLE_LEN + self.payload.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    /// The buffer holds a valid prefix; at least `needed` more octets are required.
    #[error("need {needed} more bytes")]
    Incomplete { needed: usize },
    #[error("corrupt frame: {0}")]
    Corrupt(String),
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, BusError> {
    if frame.topic.len() > u16::MAX as usize {
        return Err(BusError::TopicTooLong(frame.topic.len()));
    }
    if frame.payload.len() > u32::MAX as usize {
        return Err(BusError::PayloadTooLong(frame.payload.len()));
    }
    validate_topic(&frame.topic)?;
    if frame.flags & !FLAG_COMPRESSED != 0 {
        return Err(BusError::InvalidFrame(format!(
            "reserved flag bits set: {:#04x}",
            frame.flags
        )));
    }
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.flags);
    out.extend_from_slice(&(frame.topic.len() as u16).to_be_bytes());
    out.extend_from_slice(frame.topic.as_bytes());
    out.extend_from_slice(&frame.seq.to_be_bytes());
    out.extend_from_slice(&frame.timestamp_ns.to_be_bytes());
    out.extend_from_slice(&(frame.payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

/// Decodes one frame from the front of `bytes`, returning it with the number
/// of octets consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), DecodeError> {
    // Check whatever magic/version octets are present before asking for more,
    // so garbage is reported as corrupt rather than incomplete.
    for (i, &b) in bytes.iter().take(2).enumerate() {
        if b != MAGIC[i] {
            return Err(DecodeError::Corrupt(format!("bad magic octet {b:#04x} at {i}")));
        }
    }
    if let Some(&v) = bytes.get(2) {
        if v != VERSION {
            return Err(DecodeError::Corrupt(format!("unsupported version {v}")));
        }
    }
    if bytes.len() < PREFIX_LEN {
        return Err(DecodeError::Incomplete {
            needed: PREFIX_LEN - bytes.len(),
        });
    }
    let flags = bytes[3];
    if flags & !FLAG_COMPRESSED != 0 {
        return Err(DecodeError::Corrupt(format!("reserved flag bits set: {flags:#04x}")));
    }
    let topic_len = u16::from_be_bytes([bytes[4], bytes[5]]) as usize;
    let header_len = PREFIX_LEN + topic_len + MIDDLE_LEN;
    if bytes.len() < header_len {
        return Err(DecodeError::Incomplete {
            needed: header_len - bytes.len(),
        });
    }
    let topic = std::str::from_utf8(&bytes[PREFIX_LEN..PREFIX_LEN + topic_len])
        .map_err(|e| DecodeError::Corrupt(format!("topic is not UTF-8: {e}")))?
        .to_string();
    if validate_topic(&topic).is_err() {
        return Err(DecodeError::Corrupt(format!("invalid topic {topic:?}")));
    }
    let mid = &bytes[PREFIX_LEN + topic_len..header_len];
    let seq = u64::from_be_bytes(mid[0..8].try_into().unwrap());
    let timestamp_ns = u64::from_be_bytes(mid[8..16].try_into().unwrap());
    let payload_len = u32::from_be_bytes(mid[16..20].try_into().unwrap()) as usize;
    let total = header_len + payload_len;
    if bytes.len() < total {
        return Err(DecodeError::Incomplete {
            needed: total - bytes.len(),
        });
    }
    let frame = Frame {
        flags,
        topic,
        seq,
        timestamp_ns,
        payload: bytes[header_len..total].to_vec(),
    };
    Ok((frame, total))
}
