//! Thread-per-connection TCP server for the registry protocol.

use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use siterec_core::geo::Tiling;

use crate::error::{ErrorCode, RegistryError};
use crate::protocol::{
    read_frame, write_frame, DataReply, ErrorReply, FetchRequest, Frame, LookupRequest, MessageKind, ProtocolError,
    PublishRequest,
};
use crate::store::RegistryStore;

/// Deployment settings for a registry server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryConfig {
    pub listen_addr: String,
    pub data_dir: Option<PathBuf>,
    pub tiling_path: PathBuf,
}

impl RegistryConfig {
    /// Loads the tiling and opens (or creates) the store.
    pub fn open_store(&self) -> Result<RegistryStore, RegistryError> {
        let text = std::fs::read_to_string(&self.tiling_path)?;
        let tiling = Tiling::from_json(&text).map_err(|e| RegistryError::BadRequest(format!("tiling file: {e}")))?;
        match &self.data_dir {
            Some(dir) => RegistryStore::open(tiling, dir),
            None => Ok(RegistryStore::new(tiling)),
        }
    }
}

/// Running server; dropping it without [`ServerHandle::shutdown`] leaves it running.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, closes open connections and joins the accept loop.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        for c in self.connections.lock().unwrap_or_else(|e| e.into_inner()).drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the accept loop exits.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

/// Binds `addr` and serves `store` on background threads.
pub fn serve(addr: impl ToSocketAddrs, store: Arc<RegistryStore>) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let connections: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
    let accept = {
        let stop = stop.clone();
        let connections = connections.clone();
        std::thread::Builder::new().name("registry-accept".into()).spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                if let Ok(clone) = stream.try_clone() {
                    let mut open = connections.lock().unwrap_or_else(|e| e.into_inner());
                    open.retain(|s| s.peer_addr().is_ok());
                    open.push(clone);
                }
                let store = store.clone();
                let _ = std::thread::Builder::new()
                    .name("registry-conn".into())
                    .spawn(move || handle_connection(stream, &store));
            }
        })?
    };
    Ok(ServerHandle {
        addr: local,
        stop,
        connections,
        accept: Some(accept),
    })
}

fn handle_connection(stream: TcpStream, store: &RegistryStore) {
    let _ = stream.set_nodelay(true);
    let Ok(write_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut writer = BufWriter::new(write_half);
    loop {
        let reply = match read_frame(&mut reader) {
            Ok(Some(frame)) => dispatch(store, &frame),
            Ok(None) => return,
            Err(ProtocolError::Io(_)) => return,
            Err(e) => {
                // the stream may be out of sync; reply then hang up
                let _ = write_frame(&mut writer, &error_frame(ErrorCode::BadRequest, e.to_string()));
                return;
            }
        };
        if write_frame(&mut writer, &reply).is_err() {
            return;
        }
    }
}

fn error_frame(code: ErrorCode, message: String) -> Frame {
    Frame::new(MessageKind::Error, &ErrorReply { code, message }, Vec::new())
}

/// Executes one request against `store`, producing the reply frame.
pub fn dispatch(store: &RegistryStore, frame: &Frame) -> Frame {
    match try_dispatch(store, frame) {
        Ok(reply) => reply,
        Err(e) => error_frame(e.code(), e.to_string()),
    }
}

fn header<H: serde::de::DeserializeOwned>(frame: &Frame) -> Result<H, RegistryError> {
    frame.parse_header().map_err(|e| RegistryError::BadRequest(e.to_string()))
}

fn try_dispatch(store: &RegistryStore, frame: &Frame) -> Result<Frame, RegistryError> {
    match frame.kind {
        MessageKind::Publish => {
            let req: PublishRequest = header(frame)?;
            let manifest = store.publish(&req.region_id, &frame.payload)?;
            Ok(Frame::new(MessageKind::Manifest, &manifest, Vec::new()))
        }
        MessageKind::Lookup => {
            let req: LookupRequest = header(frame)?;
            let manifest = store.lookup(req.lat, req.lon, req.current_region.as_deref())?;
            Ok(Frame::new(MessageKind::Manifest, &manifest, Vec::new()))
        }
        MessageKind::Fetch => {
            let req: FetchRequest = header(frame)?;
            let res = store.fetch(&req.region_id, req.version, req.if_hash.as_deref())?;
            let not_modified = res.blob.is_none();
            let payload = res.blob.map(|b| b.to_vec()).unwrap_or_default();
            Ok(Frame::new(
                MessageKind::Data,
                &DataReply {
                    manifest: res.manifest,
                    not_modified,
                },
                payload,
            ))
        }
        other => Err(RegistryError::BadRequest(format!("{other:?} is a reply, not a request"))),
    }
}
