//! Two-stage unsupervised purification of per-site image sets.
//!
//! Stage one drops whole classes whose multivariate Jensen-Shannon
//! divergence (uniform weights) exceeds a threshold. Stage two scores each
//! image of a surviving class by forward KL divergence to the class centroid
//! and drops the outliers. Classes left too small are then removed.
//! All quantities are in nats.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{FeatureDataset, FeatureDistribution};
use crate::numeric::CompensatedSum;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PurifyError {
    #[error("class has no images")]
    EmptyClass,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("atom {index} has mass {p} but the reference assigns it zero")]
    UnsupportedAtom { index: usize, p: f64 },
    #[error("invalid purify config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PurifyConfig {
    pub jsd_threshold: f64,
    pub kld_threshold: f64,
    pub min_images_after: usize,
}

impl Default for PurifyConfig {
    fn default() -> Self {
        Self {
            jsd_threshold: 2.0,
            kld_threshold: 2.0,
            min_images_after: 5,
        }
    }
}

impl PurifyConfig {
    pub fn validate(&self) -> Result<(), PurifyError> {
        for (name, v) in [("jsd_threshold", self.jsd_threshold), ("kld_threshold", self.kld_threshold)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(PurifyError::InvalidConfig(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Why a class or image did not survive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Class divergence above the cohesion threshold.
    Incohesive,
    /// Image divergence from its class centroid above the KL threshold.
    Outlier,
    /// Class fell below the minimum image count.
    TooFewImages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohesionReport {
    pub site_id: String,
    pub n_images: usize,
    pub jsd: f64,
    pub kept: bool,
    pub drop_reason: Option<DropReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub image_id: String,
    pub site_id: String,
    /// Divergence from the centroid of the image's full original class.
    pub kl: f64,
    pub kept: bool,
    pub drop_reason: Option<DropReason>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurifyStats {
    pub classes_total: usize,
    pub classes_removed: usize,
    pub images_total: usize,
    pub images_removed: usize,
    pub classes_removed_fraction: f64,
    pub images_removed_fraction: f64,
}

impl PurifyStats {
    fn new(classes_total: usize, classes_removed: usize, images_total: usize, images_removed: usize) -> Self {
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            classes_total,
            classes_removed,
            images_total,
            images_removed,
            classes_removed_fraction: frac(classes_removed, classes_total),
            images_removed_fraction: frac(images_removed, images_total),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurifiedDataset {
    pub dataset: FeatureDataset,
    /// One entry per input class, in order of first appearance.
    pub cohesion: Vec<CohesionReport>,
    /// One entry per input image, in input order.
    pub denoise: Vec<DenoiseReport>,
    pub stats: PurifyStats,
}

/// Shannon entropy `-sum p ln p` with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    let h: CompensatedSum = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).collect();
    h.value()
}

fn check_dims<P: AsRef<[f64]>>(features: &[P]) -> Result<usize, PurifyError> {
    let first = features.first().ok_or(PurifyError::EmptyClass)?;
    let dim = first.as_ref().len();
    for f in features {
        if f.as_ref().len() != dim {
            return Err(PurifyError::DimensionMismatch {
                expected: dim,
                found: f.as_ref().len(),
            });
        }
    }
    Ok(dim)
}

// Means are accumulated as offsets from the first member so that a class of
// identical members has a mean exactly equal to that member.
fn mean_vector<P: AsRef<[f64]>>(features: &[P], dim: usize) -> Vec<f64> {
    let first = features[0].as_ref();
    let mut acc = vec![CompensatedSum::new(); dim];
    for f in &features[1..] {
        for ((a, &x), &x0) in acc.iter_mut().zip(f.as_ref()).zip(first) {
            a.add(x - x0);
        }
    }
    let n = features.len() as f64;
    first.iter().zip(&acc).map(|(&x0, a)| x0 + a.value() / n).collect()
}

fn mean_scalar(values: &[f64]) -> f64 {
    let first = values[0];
    let acc: CompensatedSum = values[1..].iter().map(|&v| v - first).collect();
    first + acc.value() / values.len() as f64
}

/// Elementwise mean of a class's feature distributions.
pub fn centroid<P: AsRef<[f64]>>(features: &[P]) -> Result<FeatureDistribution, PurifyError> {
    let dim = check_dims(features)?;
    Ok(FeatureDistribution::from_vec_unchecked(mean_vector(features, dim)))
}

/// Multivariate Jensen-Shannon divergence with uniform weights: entropy of
/// the mixture minus the mean entropy. Clamped to its analytic range
/// `[0, ln n]` to absorb rounding.
pub fn class_jsd<P: AsRef<[f64]>>(features: &[P]) -> Result<f64, PurifyError> {
    let dim = check_dims(features)?;
    let n = features.len();
    let mixture = mean_vector(features, dim);
    let entropies: Vec<f64> = features.iter().map(|f| shannon_entropy(f.as_ref())).collect();
    let mean_h = mean_scalar(&entropies);
    let jsd = shannon_entropy(&mixture) - mean_h;
    Ok(jsd.clamp(0.0, (n as f64).ln()))
}

/// Forward KL divergence `sum p ln(p / m)`. Fails when `m` has no mass on an
/// atom that `p` uses. Clamped at zero to absorb rounding.
pub fn forward_kl(p: &[f64], m: &[f64]) -> Result<f64, PurifyError> {
    if p.len() != m.len() {
        return Err(PurifyError::DimensionMismatch {
            expected: p.len(),
            found: m.len(),
        });
    }
    let mut acc = CompensatedSum::new();
    for (index, (&pi, &mi)) in p.iter().zip(m).enumerate() {
        if pi > 0.0 {
            if mi <= 0.0 {
                return Err(PurifyError::UnsupportedAtom { index, p: pi });
            }
            acc.add(pi * (pi / mi).ln());
        }
    }
    Ok(acc.value().max(0.0))
}

struct ClassOutcome {
    cohesion: CohesionReport,
    /// (image index, kl, kept after stage two)
    images: Vec<(usize, f64, bool)>,
}

fn purify_class(ds: &FeatureDataset, site_id: &str, idx: &[usize], cfg: &PurifyConfig) -> ClassOutcome {
    let feats: Vec<&[f64]> = idx.iter().map(|&i| ds.images()[i].feature.probs()).collect();
    let jsd = class_jsd(&feats).expect("grouped classes are non-empty with a shared dimension");
    let center = mean_vector(&feats, ds.dimension());
    let cohesive = jsd <= cfg.jsd_threshold;
    let images = idx
        .iter()
        .zip(&feats)
        .map(|(&i, f)| {
            // the centroid covers the support of every member
            let kl = forward_kl(f, &center).expect("centroid supports its members");
            (i, kl, cohesive && kl <= cfg.kld_threshold)
        })
        .collect();
    ClassOutcome {
        cohesion: CohesionReport {
            site_id: site_id.to_string(),
            n_images: idx.len(),
            jsd,
            kept: cohesive,
            drop_reason: (!cohesive).then_some(DropReason::Incohesive),
        },
        images,
    }
}

/// Runs both purification stages and the minimum-size filter.
pub fn purify_dataset(dataset: &FeatureDataset, config: &PurifyConfig) -> Result<PurifiedDataset, PurifyError> {
    config.validate()?;
    let groups = dataset.by_site();
    let mut outcomes: Vec<ClassOutcome> = groups
        .par_iter()
        .map(|(site, idx)| purify_class(dataset, site, idx, config))
        .collect();

    let mut denoise: Vec<Option<DenoiseReport>> = vec![None; dataset.len()];
    let mut surviving: HashSet<usize> = HashSet::new();
    let mut classes_removed = 0;
    for outcome in &mut outcomes {
        let survivors = outcome.images.iter().filter(|(_, _, kept)| *kept).count();
        let class_kept = outcome.cohesion.kept && survivors >= config.min_images_after;
        if outcome.cohesion.kept && !class_kept {
            outcome.cohesion.kept = false;
            outcome.cohesion.drop_reason = Some(DropReason::TooFewImages);
        }
        if !class_kept {
            classes_removed += 1;
        }
        for &(i, kl, kept) in &outcome.images {
            let drop_reason = if !outcome.cohesion.kept {
                match outcome.cohesion.drop_reason {
                    Some(DropReason::TooFewImages) if !kept => Some(DropReason::Outlier),
                    other => other,
                }
            } else if !kept {
                Some(DropReason::Outlier)
            } else {
                None
            };
            let kept = class_kept && kept;
            if kept {
                surviving.insert(i);
            }
            let img = &dataset.images()[i];
            denoise[i] = Some(DenoiseReport {
                image_id: img.image_id.clone(),
                site_id: img.site_id.clone(),
                kl,
                kept,
                drop_reason,
            });
        }
    }

    let kept_idx: Vec<usize> = (0..dataset.len()).filter(|i| surviving.contains(i)).collect();
    let stats = PurifyStats::new(outcomes.len(), classes_removed, dataset.len(), dataset.len() - kept_idx.len());
    Ok(PurifiedDataset {
        dataset: dataset.select(&kept_idx),
        cohesion: outcomes.into_iter().map(|o| o.cohesion).collect(),
        denoise: denoise.into_iter().map(|d| d.expect("every image belongs to a class")).collect(),
        stats,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixpoint {
    pub dataset: FeatureDataset,
    /// Number of purification passes that removed at least one image.
    pub rounds: usize,
    /// Image count after each pass, starting with the input size.
    pub sizes: Vec<usize>,
}

/// Repeats purification until a pass removes nothing.
pub fn purify_to_fixpoint(dataset: &FeatureDataset, config: &PurifyConfig) -> Result<Fixpoint, PurifyError> {
    let mut current = dataset.clone();
    let mut sizes = vec![current.len()];
    loop {
        let next = purify_dataset(&current, config)?.dataset;
        if next.len() == current.len() {
            return Ok(Fixpoint {
                rounds: sizes.len() - 1,
                dataset: current,
                sizes,
            });
        }
        sizes.push(next.len());
        current = next;
    }
}

fn csv_io(e: csv::Error) -> std::io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    }
}

/// Writes `site_id,n_images,jsd,kept`.
pub fn write_cohesion_csv<W: Write>(reports: &[CohesionReport], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["site_id", "n_images", "jsd", "kept"]).map_err(csv_io)?;
    for r in reports {
        w.write_record([r.site_id.clone(), r.n_images.to_string(), r.jsd.to_string(), r.kept.to_string()])
            .map_err(csv_io)?;
    }
    w.flush()
}

/// Writes `image_id,site_id,kl,kept`.
pub fn write_denoise_csv<W: Write>(reports: &[DenoiseReport], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "site_id", "kl", "kept"]).map_err(csv_io)?;
    for r in reports {
        w.write_record([r.image_id.clone(), r.site_id.clone(), r.kl.to_string(), r.kept.to_string()])
            .map_err(csv_io)?;
    }
    w.flush()
}
