//! Region-model registry: versioned storage of `GRM1` blobs per region,
//! location lookup through a [`Tiling`](siterec_core::geo::Tiling), and a
//! length-prefixed request/response protocol over TCP.

pub mod client;
pub mod error;
pub mod protocol;
pub mod server;
pub mod store;

pub use client::{FetchOutcome, RegistryClient};
pub use error::{ErrorCode, RegistryError};
pub use protocol::ModelManifest;
pub use server::{serve, RegistryConfig, ServerHandle};
pub use store::{FetchResult, RegistryStore, RETAINED_VERSIONS};
