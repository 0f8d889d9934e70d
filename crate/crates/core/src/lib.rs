//! Core library for recognizing landmark sites from per-image classifier
//! feature distributions, partitioned into geographic regions.

pub mod catalog;
pub mod classifier;
pub mod context;
pub mod geo;
pub mod numeric;
pub mod purify;
