//! Synthetic benchmarks and evaluation protocols for site recognition.
//!
//! [`synth`] plants sites, noisy images, outliers and chaotic classes with
//! known ground truth. [`protocols`] runs Monte-Carlo cross validation and the
//! images-per-class, area-size and category-confusion studies; [`wild`]
//! simulates on-device queries with sensor noise and ablates the context
//! filters. [`report`] writes the CSV tables and JSON reports the CLI emits.

use siterec_core::catalog::CatalogError;
use siterec_core::classifier::ClassifierError;
use siterec_core::context::ContextError;
use siterec_core::geo::GeoError;
use siterec_core::purify::PurifyError;
use thiserror::Error;

pub mod experiments;
pub mod protocols;
pub mod report;
pub mod synth;
pub mod wild;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("class {site_id} has {n} image(s); splitting needs at least 2")]
    ClassTooSmall { site_id: String, n: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Purify(#[from] PurifyError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}
