//! In-memory registry state with optional on-disk persistence.
//!
//! Each region has a write mutex and an `RwLock<Arc<RegionHistory>>`.
//! Publishing builds a new immutable history and swaps the `Arc`; readers
//! clone the `Arc` under a momentary read lock and never observe a partially
//! updated history.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use siterec_core::classifier::{deserialize_model, serialize_model, sha256};
use siterec_core::geo::{GeoError, GeoPoint, Tiling};

use crate::error::RegistryError;
use crate::protocol::ModelManifest;

/// Versions kept per region; older ones are evicted on publish.
pub const RETAINED_VERSIONS: usize = 3;

const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone)]
pub struct StoredModel {
    pub manifest: ModelManifest,
    pub blob: Arc<[u8]>,
}

#[derive(Debug, Clone, Default)]
struct RegionHistory {
    /// Oldest first; at most [`RETAINED_VERSIONS`] entries.
    versions: Vec<StoredModel>,
    last_version: u64,
}

#[derive(Debug, Default)]
struct RegionSlot {
    write: Mutex<()>,
    history: RwLock<Arc<RegionHistory>>,
}

impl RegionSlot {
    fn snapshot(&self) -> Arc<RegionHistory> {
        self.history.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

/// Result of a fetch: `blob` is `None` when the caller's hash matched.
#[derive(Debug, Clone)]
pub struct FetchResult {
    pub manifest: ModelManifest,
    pub blob: Option<Arc<[u8]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexRegion {
    last_version: u64,
    manifests: Vec<ModelManifest>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct IndexFile {
    regions: BTreeMap<String, IndexRegion>,
}

pub struct RegistryStore {
    tiling: Tiling,
    regions: BTreeMap<String, RegionSlot>,
    data_dir: Option<PathBuf>,
    index_lock: Mutex<()>,
}

pub fn content_hash_hex(blob: &[u8]) -> String {
    hex::encode(sha256(blob))
}

impl RegistryStore {
    /// An empty, memory-only registry for the regions of `tiling`.
    pub fn new(tiling: Tiling) -> Self {
        let regions = tiling.regions().iter().map(|r| (r.region_id.clone(), RegionSlot::default())).collect();
        Self {
            tiling,
            regions,
            data_dir: None,
            index_lock: Mutex::new(()),
        }
    }

    /// A registry persisted under `dir`, reloading any existing index.
    pub fn open(tiling: Tiling, dir: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut store = Self::new(tiling);
        let index_path = dir.join(INDEX_FILE);
        if index_path.exists() {
            let index: IndexFile = serde_json::from_slice(&fs::read(&index_path)?)
                .map_err(|e| RegistryError::CorruptModel(format!("index file: {e}")))?;
            for (region_id, entry) in index.regions {
                let slot = store.regions.get(&region_id).ok_or_else(|| RegistryError::RegionUnknown(region_id.clone()))?;
                let mut versions = Vec::new();
                for manifest in entry.manifests {
                    let blob = fs::read(blob_path(&dir, &region_id, manifest.version))?;
                    if content_hash_hex(&blob) != manifest.content_hash {
                        return Err(RegistryError::CorruptModel(format!(
                            "stored blob for {region_id} v{} does not match its manifest",
                            manifest.version
                        )));
                    }
                    versions.push(StoredModel {
                        manifest,
                        blob: blob.into(),
                    });
                }
                *slot.history.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(RegionHistory {
                    versions,
                    last_version: entry.last_version,
                });
            }
        }
        store.data_dir = Some(dir);
        Ok(store)
    }

    pub fn tiling(&self) -> &Tiling {
        &self.tiling
    }

    fn slot(&self, region_id: &str) -> Result<&RegionSlot, RegistryError> {
        self.regions.get(region_id).ok_or_else(|| RegistryError::RegionUnknown(region_id.to_string()))
    }

    /// Validates `blob`, assigns the next version and stores it. The blob's
    /// embedded version is rewritten to the assigned one.
    pub fn publish(&self, region_id: &str, blob: &[u8]) -> Result<ModelManifest, RegistryError> {
        let slot = self.slot(region_id)?;
        let model = deserialize_model(blob).map_err(|e| RegistryError::CorruptModel(e.to_string()))?;
        if model.region_id() != region_id {
            return Err(RegistryError::RegionMismatch {
                expected: region_id.to_string(),
                found: model.region_id().to_string(),
            });
        }
        let _guard = slot.write.lock().unwrap_or_else(|e| e.into_inner());
        let current = slot.snapshot();
        let version = current.last_version + 1;
        let stamped: Arc<[u8]> = serialize_model(&model.with_version(version)).into();
        let manifest = ModelManifest {
            region_id: region_id.to_string(),
            version,
            content_hash: content_hash_hex(&stamped),
            byte_size: stamped.len() as u64,
        };
        let mut versions = current.versions.clone();
        versions.push(StoredModel {
            manifest: manifest.clone(),
            blob: stamped.clone(),
        });
        let evicted: Vec<u64> = if versions.len() > RETAINED_VERSIONS {
            versions.drain(..versions.len() - RETAINED_VERSIONS).map(|m| m.manifest.version).collect()
        } else {
            Vec::new()
        };
        let next = Arc::new(RegionHistory {
            versions,
            last_version: version,
        });
        if let Some(dir) = &self.data_dir {
            write_atomic(&blob_path(dir, region_id, version), &stamped)?;
        }
        *slot.history.write().unwrap_or_else(|e| e.into_inner()) = next;
        if let Some(dir) = &self.data_dir {
            self.write_index(dir)?;
            for v in evicted {
                let _ = fs::remove_file(blob_path(dir, region_id, v));
            }
        }
        Ok(manifest)
    }

    /// Latest manifest for the region serving `(lat, lon)`.
    pub fn lookup(&self, lat: f64, lon: f64, current_region: Option<&str>) -> Result<ModelManifest, RegistryError> {
        let p = GeoPoint::new(lat, lon).map_err(|e| RegistryError::BadRequest(e.to_string()))?;
        let region = self.tiling.region_for_point(p, current_region).map_err(|e| match e {
            GeoError::OutOfCoverage { lat, lon } => RegistryError::OutOfCoverage { lat, lon },
            other => RegistryError::BadRequest(other.to_string()),
        })?;
        self.latest(&region.region_id)
    }

    pub fn latest(&self, region_id: &str) -> Result<ModelManifest, RegistryError> {
        let history = self.slot(region_id)?.snapshot();
        history
            .versions
            .last()
            .map(|m| m.manifest.clone())
            .ok_or_else(|| RegistryError::NoModelPublished(region_id.to_string()))
    }

    /// Latest or requested version; no blob when `if_hash` matches it.
    pub fn fetch(&self, region_id: &str, version: Option<u64>, if_hash: Option<&str>) -> Result<FetchResult, RegistryError> {
        let history = self.slot(region_id)?.snapshot();
        let stored = match version {
            None => history
                .versions
                .last()
                .ok_or_else(|| RegistryError::NoModelPublished(region_id.to_string()))?,
            Some(v) => history
                .versions
                .iter()
                .find(|m| m.manifest.version == v)
                .ok_or_else(|| RegistryError::VersionUnknown {
                    region_id: region_id.to_string(),
                    version: v,
                })?,
        };
        let not_modified = if_hash.is_some_and(|h| h.eq_ignore_ascii_case(&stored.manifest.content_hash));
        Ok(FetchResult {
            manifest: stored.manifest.clone(),
            blob: (!not_modified).then(|| stored.blob.clone()),
        })
    }

    /// Retained manifests of every region, oldest first per region.
    pub fn manifests(&self) -> BTreeMap<String, Vec<ModelManifest>> {
        self.regions
            .iter()
            .map(|(id, slot)| (id.clone(), slot.snapshot().versions.iter().map(|m| m.manifest.clone()).collect()))
            .collect()
    }

    fn write_index(&self, dir: &Path) -> Result<(), RegistryError> {
        let _guard = self.index_lock.lock().unwrap_or_else(|e| e.into_inner());
        let index = IndexFile {
            regions: self
                .regions
                .iter()
                .filter_map(|(id, slot)| {
                    let h = slot.snapshot();
                    (h.last_version > 0).then(|| {
                        (
                            id.clone(),
                            IndexRegion {
                                last_version: h.last_version,
                                manifests: h.versions.iter().map(|m| m.manifest.clone()).collect(),
                            },
                        )
                    })
                })
                .collect(),
        };
        let text = serde_json::to_vec_pretty(&index).map_err(std::io::Error::from)?;
        write_atomic(&dir.join(INDEX_FILE), &text)?;
        Ok(())
    }
}

fn blob_path(dir: &Path, region_id: &str, version: u64) -> PathBuf {
    dir.join(region_id).join(format!("v{version}.grm"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let parent = path.parent().expect("paths are built under the data dir");
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("blob")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
