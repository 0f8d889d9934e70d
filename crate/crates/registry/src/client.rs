//! Blocking client for the registry protocol.

use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};

use thiserror::Error;

use crate::error::ErrorCode;
use crate::protocol::{
    read_frame, write_frame, DataReply, ErrorReply, FetchRequest, Frame, LookupRequest, MessageKind, ModelManifest,
    ProtocolError, PublishRequest,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("server closed the connection")]
    Closed,
    #[error("server error {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
}

impl From<std::io::Error> for ClientError {
    fn from(e: std::io::Error) -> Self {
        ClientError::Protocol(ProtocolError::Io(e))
    }
}

impl ClientError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Remote { code, .. } => Some(*code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchOutcome {
    Modified { manifest: ModelManifest, blob: Vec<u8> },
    NotModified { manifest: ModelManifest },
}

impl FetchOutcome {
    pub fn manifest(&self) -> &ModelManifest {
        match self {
            FetchOutcome::Modified { manifest, .. } | FetchOutcome::NotModified { manifest } => manifest,
        }
    }
}

pub struct RegistryClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    /// Payload bytes received so far, for bandwidth accounting.
    pub payload_bytes_received: u64,
}

impl RegistryClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let write_half = stream.try_clone()?;
        Ok(Self {
            reader: BufReader::new(stream),
            writer: BufWriter::new(write_half),
            payload_bytes_received: 0,
        })
    }

    fn call(&mut self, request: Frame, expect: MessageKind) -> Result<Frame, ClientError> {
        write_frame(&mut self.writer, &request)?;
        let reply = read_frame(&mut self.reader)?.ok_or(ClientError::Closed)?;
        self.payload_bytes_received += reply.payload.len() as u64;
        if reply.kind == MessageKind::Error {
            let err: ErrorReply = reply.parse_header()?;
            return Err(ClientError::Remote {
                code: err.code,
                message: err.message,
            });
        }
        if reply.kind != expect {
            return Err(ProtocolError::Unexpected(reply.kind).into());
        }
        Ok(reply)
    }

    pub fn publish(&mut self, region_id: &str, blob: Vec<u8>) -> Result<ModelManifest, ClientError> {
        let req = Frame::new(
            MessageKind::Publish,
            &PublishRequest {
                region_id: region_id.to_string(),
            },
            blob,
        );
        Ok(self.call(req, MessageKind::Manifest)?.parse_header()?)
    }

    pub fn lookup(&mut self, lat: f64, lon: f64, current_region: Option<&str>) -> Result<ModelManifest, ClientError> {
        let req = Frame::new(
            MessageKind::Lookup,
            &LookupRequest {
                lat,
                lon,
                current_region: current_region.map(str::to_string),
            },
            Vec::new(),
        );
        Ok(self.call(req, MessageKind::Manifest)?.parse_header()?)
    }

    pub fn fetch(&mut self, region_id: &str, version: Option<u64>, if_hash: Option<&str>) -> Result<FetchOutcome, ClientError> {
        let req = Frame::new(
            MessageKind::Fetch,
            &FetchRequest {
                region_id: region_id.to_string(),
                version,
                if_hash: if_hash.map(str::to_string),
            },
            Vec::new(),
        );
        let reply = self.call(req, MessageKind::Data)?;
        let data: DataReply = reply.parse_header()?;
        Ok(if data.not_modified {
            FetchOutcome::NotModified { manifest: data.manifest }
        } else {
            FetchOutcome::Modified {
                manifest: data.manifest,
                blob: reply.payload,
            }
        })
    }
}
