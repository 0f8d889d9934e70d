//! Seeded synthetic site catalogs and feature datasets with planted noise.
//!
//! Each site gets a Dirichlet prototype. Inlier images mix the prototype with
//! a Dirichlet noise draw, `(1 - eps) * prototype + eps * noise`. Planted
//! outliers are independent sparse Dirichlet draws, and "chaotic" sites
//! consist only of such draws. Every site draws from its own ChaCha8 stream,
//! so site `i` is identical across configs that differ only in `num_sites`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use siterec_core::catalog::{
    FeatureDataset, FeatureDistribution, ImageFeatureRecord, ImageSource, SiteCatalog, SiteRecord,
};
use siterec_core::geo::{BoundingBox, GeoPoint};

use crate::ProtocolError;

pub const CATEGORIES: [&str; 6] = ["building", "statue", "church", "museum", "hotel", "skyscraper"];

const STREAM_CHAOTIC: u64 = 1;
const STREAM_SITE_BASE: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_sites: usize,
    pub images_per_site: usize,
    pub dimension: usize,
    pub prototype_concentration: f64,
    /// Mixing weight `eps` of the noise draw in inlier images.
    pub inlier_noise: f64,
    pub noise_concentration: f64,
    pub outlier_fraction: f64,
    pub outlier_concentration: f64,
    pub chaotic_class_fraction: f64,
    pub geo_bbox: BoundingBox,
    pub source: ImageSource,
    pub seed: u64,
}

fn default_bbox(width_m: f64, height_m: f64) -> BoundingBox {
    let origin = GeoPoint::new(40.70, -74.02).expect("valid origin");
    BoundingBox::from_corner(origin, width_m, height_m).expect("valid bbox")
}

impl Default for SynthConfig {
    /// The planted-outlier benchmark.
    fn default() -> Self {
        Self {
            num_sites: 100,
            images_per_site: 80,
            dimension: 100,
            prototype_concentration: 0.3,
            inlier_noise: 0.4,
            noise_concentration: 0.05,
            outlier_fraction: 0.2,
            outlier_concentration: 0.02,
            chaotic_class_fraction: 0.1,
            geo_bbox: default_bbox(4000.0, 4000.0),
            source: ImageSource::Synthetic,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn planted_outlier(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Outlier-free but heavily noisy classes; accuracy grows with images per class.
    pub fn noisy(seed: u64) -> Self {
        Self {
            num_sites: 30,
            inlier_noise: 0.8,
            noise_concentration: 0.5,
            outlier_fraction: 0.0,
            chaotic_class_fraction: 0.0,
            seed,
            ..Self::default()
        }
    }

    /// Clean, well-framed imagery.
    pub fn curated(seed: u64) -> Self {
        Self {
            num_sites: 50,
            inlier_noise: 0.5,
            noise_concentration: 0.5,
            outlier_fraction: 0.05,
            chaotic_class_fraction: 0.0,
            source: ImageSource::Google,
            seed,
            ..Self::default()
        }
    }

    /// Crowd-sourced imagery: noisier views and many off-topic photos.
    pub fn mixed(seed: u64) -> Self {
        Self {
            num_sites: 50,
            inlier_noise: 0.7,
            noise_concentration: 0.5,
            outlier_fraction: 0.3,
            chaotic_class_fraction: 0.0,
            source: ImageSource::Flickr,
            seed,
            ..Self::default()
        }
    }

    /// Dense city block for area sweeps.
    pub fn area(seed: u64) -> Self {
        Self {
            num_sites: 256,
            images_per_site: 40,
            inlier_noise: 0.8,
            noise_concentration: 0.5,
            outlier_fraction: 0.0,
            chaotic_class_fraction: 0.0,
            geo_bbox: default_bbox(4000.0, 4000.0),
            seed,
            ..Self::default()
        }
    }

    /// A single neighbourhood for the in-the-wild simulation.
    pub fn wild(seed: u64) -> Self {
        Self {
            num_sites: 50,
            images_per_site: 60,
            inlier_noise: 0.6,
            noise_concentration: 0.5,
            outlier_fraction: 0.0,
            chaotic_class_fraction: 0.0,
            geo_bbox: default_bbox(1000.0, 1000.0),
            seed,
            ..Self::default()
        }
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        Some(match name {
            "planted-outlier" => Self::planted_outlier(seed),
            "noisy" => Self::noisy(seed),
            "curated" => Self::curated(seed),
            "mixed" => Self::mixed(seed),
            "area" => Self::area(seed),
            "wild" => Self::wild(seed),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidConfig(m));
        if self.num_sites == 0 || self.images_per_site == 0 || self.dimension == 0 {
            return bad("num_sites, images_per_site and dimension must be positive".into());
        }
        for (name, v) in [
            ("outlier_fraction", self.outlier_fraction),
            ("chaotic_class_fraction", self.chaotic_class_fraction),
            ("inlier_noise", self.inlier_noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("prototype_concentration", self.prototype_concentration),
            ("noise_concentration", self.noise_concentration),
            ("outlier_concentration", self.outlier_concentration),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// What the generator planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub prototypes: BTreeMap<String, FeatureDistribution>,
    pub chaotic_sites: BTreeSet<String>,
    /// Planted outlier images of non-chaotic sites.
    pub outlier_images: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub catalog: SiteCatalog,
    pub dataset: FeatureDataset,
    pub truth: GroundTruth,
}

/// Symmetric Dirichlet sample. Small concentrations are drawn in log space
/// (`G(a) = G(a + 1) * U^(1/a)`) so the vector never collapses to all zeros.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: f64, dim: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..dim)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

/// `(1 - eps) * prototype + eps * Dirichlet(noise_concentration)`.
pub fn noisy_view<R: Rng + ?Sized>(rng: &mut R, prototype: &[f64], eps: f64, noise_concentration: f64) -> FeatureDistribution {
    let noise = sample_dirichlet(rng, noise_concentration, prototype.len());
    let mixed = prototype.iter().zip(&noise).map(|(p, n)| (1.0 - eps) * p + eps * n).collect();
    FeatureDistribution::from_weights(mixed).expect("convex mixture of distributions")
}

pub fn site_id(i: usize) -> String {
    format!("s{i:05}")
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData, ProtocolError> {
    cfg.validate()?;
    let n_chaotic = (cfg.chaotic_class_fraction * cfg.num_sites as f64).round() as usize;
    let mut chaotic_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    chaotic_rng.set_stream(STREAM_CHAOTIC);
    let mut order: Vec<usize> = (0..cfg.num_sites).collect();
    order.shuffle(&mut chaotic_rng);
    let chaotic: BTreeSet<usize> = order[..n_chaotic].iter().copied().collect();

    let n_img = cfg.images_per_site;
    let n_outliers = (cfg.outlier_fraction * n_img as f64).round() as usize;
    let bbox = &cfg.geo_bbox;

    let mut records = Vec::with_capacity(cfg.num_sites);
    let mut images = Vec::with_capacity(cfg.num_sites * n_img);
    let mut truth = GroundTruth {
        prototypes: BTreeMap::new(),
        chaotic_sites: BTreeSet::new(),
        outlier_images: BTreeSet::new(),
    };
    for i in 0..cfg.num_sites {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(STREAM_SITE_BASE + i as u64);
        let id = site_id(i);
        let lat = bbox.min_lat + rng.random::<f64>() * (bbox.max_lat - bbox.min_lat);
        let lon = bbox.min_lon + rng.random::<f64>() * (bbox.max_lon - bbox.min_lon);
        let pageviews = rng.random_range(100..100_000u64);
        records.push(SiteRecord {
            site_id: id.clone(),
            title: format!("Synthetic site {i}"),
            location: GeoPoint::new(lat, lon).expect("inside a valid bbox"),
            category: CATEGORIES[i % CATEGORIES.len()].to_string(),
            pageviews,
        });
        let prototype = sample_dirichlet(&mut rng, cfg.prototype_concentration, cfg.dimension);
        let is_chaotic = chaotic.contains(&i);
        let mut slots: Vec<usize> = (0..n_img).collect();
        slots.shuffle(&mut rng);
        let outlier_slots: BTreeSet<usize> = slots[..n_outliers].iter().copied().collect();
        for j in 0..n_img {
            let image_id = format!("{id}_img{j:03}");
            let feature = if is_chaotic || outlier_slots.contains(&j) {
                if !is_chaotic {
                    truth.outlier_images.insert(image_id.clone());
                }
                FeatureDistribution::new(sample_dirichlet(&mut rng, cfg.outlier_concentration, cfg.dimension))
                    .expect("normalized draw")
            } else {
                noisy_view(&mut rng, &prototype, cfg.inlier_noise, cfg.noise_concentration)
            };
            images.push(ImageFeatureRecord {
                image_id,
                site_id: id.clone(),
                source: cfg.source,
                feature,
            });
        }
        if is_chaotic {
            truth.chaotic_sites.insert(id.clone());
        }
        truth
            .prototypes
            .insert(id, FeatureDistribution::new(prototype).expect("normalized draw"));
    }
    Ok(SyntheticData {
        catalog: SiteCatalog::from_records(records).expect("generated ids are unique"),
        dataset: FeatureDataset::from_images(cfg.dimension, images).expect("generated ids are unique"),
        truth,
    })
}
