//! Framed wire protocol.
//!
//! Every message is `[u8 kind][u32 LE header_len][u32 LE payload_len]`
//! followed by a JSON header and a raw payload. Requests are PUBLISH (payload
//! is the model blob), LOOKUP and FETCH; replies are MANIFEST, DATA (payload
//! is the blob unless not modified) and ERROR.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorCode;

pub const MAX_HEADER_LEN: usize = 64 * 1024;
pub const MAX_PAYLOAD_LEN: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Publish = 0x01,
    Lookup = 0x02,
    Fetch = 0x03,
    Manifest = 0x81,
    Data = 0x82,
    Error = 0x8F,
}

impl TryFrom<u8> for MessageKind {
    type Error = ProtocolError;
    fn try_from(b: u8) -> Result<Self, ProtocolError> {
        Ok(match b {
            0x01 => MessageKind::Publish,
            0x02 => MessageKind::Lookup,
            0x03 => MessageKind::Fetch,
            0x81 => MessageKind::Manifest,
            0x82 => MessageKind::Data,
            0x8F => MessageKind::Error,
            other => return Err(ProtocolError::UnknownKind(other)),
        })
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown message kind 0x{0:02x}")]
    UnknownKind(u8),
    #[error("{what} of {len} bytes exceeds limit {limit}")]
    TooLarge { what: &'static str, len: usize, limit: usize },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("unexpected {0:?} message")]
    Unexpected(MessageKind),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: MessageKind,
    pub header: Vec<u8>,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new<H: Serialize>(kind: MessageKind, header: &H, payload: Vec<u8>) -> Self {
        Self {
            kind,
            header: serde_json::to_vec(header).expect("headers serialize"),
            payload,
        }
    }

    pub fn parse_header<H: DeserializeOwned>(&self) -> Result<H, ProtocolError> {
        serde_json::from_slice(&self.header).map_err(|e| ProtocolError::BadHeader(e.to_string()))
    }
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any byte.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, ProtocolError> {
    let mut prefix = [0u8; 9];
    let mut filled = 0;
    while filled < prefix.len() {
        match r.read(&mut prefix[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let kind = MessageKind::try_from(prefix[0])?;
    let header_len = u32::from_le_bytes(prefix[1..5].try_into().expect("4 bytes")) as usize;
    let payload_len = u32::from_le_bytes(prefix[5..9].try_into().expect("4 bytes")) as usize;
    if header_len > MAX_HEADER_LEN {
        return Err(ProtocolError::TooLarge {
            what: "header",
            len: header_len,
            limit: MAX_HEADER_LEN,
        });
    }
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(ProtocolError::TooLarge {
            what: "payload",
            len: payload_len,
            limit: MAX_PAYLOAD_LEN,
        });
    }
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let mut payload = vec![0u8; payload_len];
    r.read_exact(&mut payload)?;
    Ok(Some(Frame { kind, header, payload }))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), ProtocolError> {
    if frame.header.len() > MAX_HEADER_LEN {
        return Err(ProtocolError::TooLarge {
            what: "header",
            len: frame.header.len(),
            limit: MAX_HEADER_LEN,
        });
    }
    if frame.payload.len() > MAX_PAYLOAD_LEN {
        return Err(ProtocolError::TooLarge {
            what: "payload",
            len: frame.payload.len(),
            limit: MAX_PAYLOAD_LEN,
        });
    }
    let mut prefix = [0u8; 9];
    prefix[0] = frame.kind as u8;
    prefix[1..5].copy_from_slice(&(frame.header.len() as u32).to_le_bytes());
    prefix[5..9].copy_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    w.write_all(&prefix)?;
    w.write_all(&frame.header)?;
    w.write_all(&frame.payload)?;
    w.flush()?;
    Ok(())
}

/// Published-model descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub region_id: String,
    pub version: u64,
    /// Hex-encoded SHA-256 of the blob.
    pub content_hash: String,
    pub byte_size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishRequest {
    pub region_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupRequest {
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub current_region: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchRequest {
    pub region_id: String,
    #[serde(default)]
    pub version: Option<u64>,
    #[serde(default)]
    pub if_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataReply {
    pub manifest: ModelManifest,
    pub not_modified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub code: ErrorCode,
    pub message: String,
}
