//! Experiment configs for the CLI protocols and the tables they write.
//!
//! Each config bundles the synthetic benchmark it runs on by default with the
//! protocol parameters, so a report's echoed config is enough to rerun it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use siterec_core::catalog::{FeatureDataset, SiteCatalog};
use siterec_core::geo::BoundingBox;

use crate::protocols::{
    compare_sources, monte_carlo_cv, run_confusion, sweep_area_size, sweep_images_per_class, AreaPoint,
    ConfusionMatrix, CvConfig, ImagesPoint, SourceRow,
};
use crate::report::{
    write_area_csv, write_confusion_csv, write_context_csv, write_filter_csv, write_images_csv, write_sources_csv,
    ExperimentReport, FilterRow,
};
use crate::synth::{generate_synthetic, SynthConfig};
use crate::wild::{WildConfig, WildReport};
use crate::ProtocolError;

/// Configs whose seeds can be overridden from the command line.
pub trait Seeded {
    fn reseed(&mut self, seed: u64);
}

impl Seeded for CvConfig {
    fn reseed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

impl Seeded for SynthConfig {
    fn reseed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

impl Seeded for WildConfig {
    fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub cv: CvConfig,
    /// Benchmark for the purification on/off comparison.
    pub filter_benchmark: SynthConfig,
    /// Labelled benchmarks for the image-source comparison.
    pub sources: BTreeMap<String, SynthConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cv: CvConfig::default(),
            filter_benchmark: SynthConfig::planted_outlier(0),
            sources: [
                ("curated".to_string(), SynthConfig::curated(0)),
                ("mixed".to_string(), SynthConfig::mixed(0)),
            ]
            .into(),
        }
    }
}

impl Seeded for EvalConfig {
    fn reseed(&mut self, seed: u64) {
        self.cv.seed = seed;
        self.filter_benchmark.seed = seed;
        self.sources.values_mut().for_each(|s| s.seed = seed);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub sources: Vec<SourceRow>,
    pub filter: Vec<FilterRow>,
}

/// Purification on/off on `filter_ds`, then the per-source comparison.
pub fn evaluate(
    filter_ds: &FeatureDataset,
    sources: &[(String, FeatureDataset)],
    cv: &CvConfig,
) -> Result<EvalResults, ProtocolError> {
    let filter = [false, true]
        .into_iter()
        .map(|purify| {
            Ok(FilterRow {
                purify,
                outcome: monte_carlo_cv(filter_ds, &CvConfig { purify, ..cv.clone() })?,
            })
        })
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    Ok(EvalResults {
        sources: compare_sources(sources, cv)?,
        filter,
    })
}

pub fn evaluate_synthetic(cfg: &EvalConfig) -> Result<EvalResults, ProtocolError> {
    let filter_ds = generate_synthetic(&cfg.filter_benchmark)?.dataset;
    let sources = cfg
        .sources
        .iter()
        .map(|(label, s)| Ok((label.clone(), generate_synthetic(s)?.dataset)))
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    evaluate(&filter_ds, &sources, &cfg.cv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImagesSweepConfig {
    pub synth: SynthConfig,
    pub m_values: Vec<usize>,
    pub cv: CvConfig,
}

impl Default for ImagesSweepConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::noisy(0),
            m_values: vec![5, 10, 20, 40, 70, 80],
            cv: CvConfig::default(),
        }
    }
}

impl Seeded for ImagesSweepConfig {
    fn reseed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.cv.seed = seed;
    }
}

pub fn sweep_images_synthetic(cfg: &ImagesSweepConfig) -> Result<Vec<ImagesPoint>, ProtocolError> {
    let data = generate_synthetic(&cfg.synth)?;
    sweep_images_per_class(&data.dataset, &cfg.m_values, &cfg.cv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AreaSweepConfig {
    pub synth: SynthConfig,
    /// Region sides; consecutive sizes differing by a factor of sqrt(2)
    /// double the region area.
    pub region_sizes_m: Vec<f64>,
    pub overlap_m: f64,
    pub cv: CvConfig,
}

impl Default for AreaSweepConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::area(0),
            region_sizes_m: (0..5).map(|k| 500.0 * std::f64::consts::SQRT_2.powi(k)).collect(),
            overlap_m: 0.0,
            cv: CvConfig::default(),
        }
    }
}

impl Seeded for AreaSweepConfig {
    fn reseed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.cv.seed = seed;
    }
}

pub fn sweep_area(
    catalog: &SiteCatalog,
    dataset: &FeatureDataset,
    area: &BoundingBox,
    cfg: &AreaSweepConfig,
) -> Result<Vec<AreaPoint>, ProtocolError> {
    sweep_area_size(catalog, dataset, area, &cfg.region_sizes_m, cfg.overlap_m, &cfg.cv)
}

pub fn sweep_area_synthetic(cfg: &AreaSweepConfig) -> Result<Vec<AreaPoint>, ProtocolError> {
    let data = generate_synthetic(&cfg.synth)?;
    sweep_area(&data.catalog, &data.dataset, &cfg.synth.geo_bbox, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfusionConfig {
    pub synth: SynthConfig,
    pub cv: CvConfig,
}

impl Default for ConfusionConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::mixed(0),
            cv: CvConfig {
                purify: true,
                ..CvConfig::default()
            },
        }
    }
}

impl Seeded for ConfusionConfig {
    fn reseed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.cv.seed = seed;
    }
}

pub fn confusion_synthetic(cfg: &ConfusionConfig) -> Result<ConfusionMatrix, ProtocolError> {
    let data = generate_synthetic(&cfg.synth)?;
    run_confusion(&data.catalog, &data.dataset, &cfg.cv)
}

/// A named CSV table and the function that renders it.
pub type Table<'a> = (&'a str, &'a dyn Fn(&mut Vec<u8>) -> csv::Result<()>);

/// Writes `report` as `<stem>_report.json` and each table into `dir`.
pub fn write_outputs<C: Serialize, R: Serialize>(
    dir: &Path,
    stem: &str,
    report: &ExperimentReport<C, R>,
    tables: &[Table<'_>],
) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    report.write(&dir.join(format!("{stem}_report.json")))?;
    for (name, write) in tables {
        let mut buf = Vec::new();
        write(&mut buf).map_err(std::io::Error::other)?;
        fs::write(dir.join(name), buf)?;
    }
    Ok(())
}

pub fn write_eval(dir: &Path, report: &ExperimentReport<EvalConfig, EvalResults>) -> std::io::Result<()> {
    let r = &report.results;
    write_outputs(
        dir,
        "eval",
        report,
        &[
            ("fig5_sources.csv", &|b| write_sources_csv(&r.sources, b)),
            ("fig6_filter.csv", &|b| write_filter_csv(&r.filter, b)),
        ],
    )
}

pub fn write_images_sweep<C: Serialize>(dir: &Path, report: &ExperimentReport<C, Vec<ImagesPoint>>) -> std::io::Result<()> {
    write_outputs(dir, "sweep_images", report, &[("fig7_images.csv", &|b| write_images_csv(&report.results, b))])
}

pub fn write_area_sweep<C: Serialize>(dir: &Path, report: &ExperimentReport<C, Vec<AreaPoint>>) -> std::io::Result<()> {
    write_outputs(dir, "sweep_area", report, &[("fig8_area.csv", &|b| write_area_csv(&report.results, b))])
}

pub fn write_confusion<C: Serialize>(dir: &Path, report: &ExperimentReport<C, ConfusionMatrix>) -> std::io::Result<()> {
    write_outputs(
        dir,
        "confusion",
        report,
        &[("table1_confusion.csv", &|b| write_confusion_csv(&report.results, b))],
    )
}

pub fn write_wild(dir: &Path, report: &ExperimentReport<WildConfig, WildReport>) -> std::io::Result<()> {
    write_outputs(
        dir,
        "wild",
        report,
        &[("fig10_context.csv", &|b| write_context_csv(&report.results.cells, b))],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reseeding_reaches_every_generator() {
        let mut e = EvalConfig::default();
        e.reseed(42);
        assert_eq!(e.cv.seed, 42);
        assert_eq!(e.filter_benchmark.seed, 42);
        assert!(e.sources.values().all(|s| s.seed == 42));
        let mut w = WildConfig::default();
        w.reseed(7);
        assert_eq!((w.seed, w.synth.seed), (7, 7));
    }

    #[test]
    fn default_area_sizes_double_the_area() {
        let sizes = AreaSweepConfig::default().region_sizes_m;
        assert_eq!(sizes.len(), 5);
        for w in sizes.windows(2) {
            assert!(((w[1] * w[1]) / (w[0] * w[0]) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_config_json_fills_defaults() {
        let cfg: ImagesSweepConfig = serde_json::from_str(r#"{"m_values": [3, 6]}"#).unwrap();
        assert_eq!(cfg.m_values, vec![3, 6]);
        assert_eq!(cfg.synth, SynthConfig::noisy(0));
    }
}
