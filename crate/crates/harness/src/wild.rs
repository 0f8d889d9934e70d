//! On-device query simulation with sensor noise and the context ablation grid.
//!
//! A simulated user stands 20-120 m from a randomly chosen site and points the
//! camera at it. The reported GPS fix and compass heading carry Gaussian
//! noise. The query photo is a noisier view of the site than the training
//! images, and the attention feature (the user-selected crop) a cleaner one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use siterec_core::catalog::{FeatureDistribution, SiteCatalog};
use siterec_core::classifier::{train_region_model, RegionModel, TrainConfig};
use siterec_core::context::{contextual_classify, ContextConfig, ContextError, MobileContext};
use siterec_core::geo::{destination_point, initial_bearing};

use crate::protocols::benchmark_train_config;
use crate::synth::{generate_synthetic, noisy_view, GroundTruth, SynthConfig};
use crate::ProtocolError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WildConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub n_queries: usize,
    /// Mixing weight of noise in query photos.
    pub query_noise: f64,
    /// Mixing weight of noise in attention crops.
    pub attention_noise: f64,
    pub min_distance_m: f64,
    pub max_distance_m: f64,
    pub gps_sigma_m: f64,
    pub compass_sigma_deg: f64,
    pub radius_m: f64,
    pub half_angle_deg: f64,
    pub seed: u64,
}

impl Default for WildConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::wild(0),
            train: benchmark_train_config(),
            n_queries: 400,
            query_noise: 0.9,
            attention_noise: 0.8,
            min_distance_m: 20.0,
            max_distance_m: 120.0,
            gps_sigma_m: 10.0,
            compass_sigma_deg: 10.0,
            radius_m: 200.0,
            half_angle_deg: 60.0,
            seed: 0,
        }
    }
}

impl WildConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: &str| Err(ProtocolError::InvalidConfig(m.to_string()));
        if self.n_queries == 0 {
            return bad("n_queries must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.query_noise) || !(0.0..=1.0).contains(&self.attention_noise) {
            return bad("noise weights must be in [0, 1]");
        }
        if !(self.min_distance_m >= 0.0 && self.max_distance_m >= self.min_distance_m) {
            return bad("need 0 <= min_distance_m <= max_distance_m");
        }
        if !(self.gps_sigma_m >= 0.0 && self.compass_sigma_deg >= 0.0) {
            return bad("sensor noise must be non-negative");
        }
        self.context(true, true, true).validate()?;
        self.synth.validate()
    }

    pub fn context(&self, location: bool, orientation: bool, attention: bool) -> ContextConfig {
        ContextConfig {
            radius_m: self.radius_m,
            half_angle_deg: self.half_angle_deg,
            enable_location: location,
            enable_orientation: orientation,
            enable_attention: attention,
        }
    }
}

/// The 2^3 filter combinations, in (location, orientation, attention) binary order.
pub fn ablation_grid() -> [(bool, bool, bool); 8] {
    let mut cells = [(false, false, false); 8];
    for (i, c) in cells.iter_mut().enumerate() {
        *c = (i & 4 != 0, i & 2 != 0, i & 1 != 0);
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct WildQuery {
    pub true_site: String,
    pub feature: FeatureDistribution,
    pub context: MobileContext,
}

/// Draws `cfg.n_queries` queries; query `q` uses ChaCha8 stream `q`.
pub fn draw_queries(catalog: &SiteCatalog, truth: &GroundTruth, cfg: &WildConfig) -> Result<Vec<WildQuery>, ProtocolError> {
    let sites: Vec<_> = catalog.records().iter().filter(|r| truth.prototypes.contains_key(&r.site_id)).collect();
    if sites.is_empty() {
        return Err(ProtocolError::InvalidConfig("no sites with prototypes".into()));
    }
    let gps = Normal::new(0.0, cfg.gps_sigma_m).expect("validated sigma");
    let compass = Normal::new(0.0, cfg.compass_sigma_deg).expect("validated sigma");
    let noise = cfg.synth.noise_concentration;
    (0..cfg.n_queries)
        .map(|q| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(q as u64);
            let site = sites[rng.random_range(0..sites.len())];
            let approach = rng.random_range(0.0..360.0);
            let dist = rng.random_range(cfg.min_distance_m..=cfg.max_distance_m);
            let user = destination_point(site.location, approach, dist);
            let heading = initial_bearing(user, site.location)?;
            let fix = user.offset_m(gps.sample(&mut rng), gps.sample(&mut rng));
            let proto = truth.prototypes[&site.site_id].probs();
            let feature = noisy_view(&mut rng, proto, cfg.query_noise, noise);
            let attention = noisy_view(&mut rng, proto, cfg.attention_noise, noise);
            Ok(WildQuery {
                true_site: site.site_id.clone(),
                feature,
                context: MobileContext::new(fix, heading + compass.sample(&mut rng)).with_attention(attention),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub location: bool,
    pub orientation: bool,
    pub attention: bool,
    pub n_queries: usize,
    pub correct: usize,
    /// Queries whose context left no candidate site.
    pub no_candidate: usize,
    /// `correct / n_queries`; `None` (n/a) when every query had no candidate.
    pub accuracy: Option<f64>,
    pub mean_candidates: f64,
}

/// Scores every query under each of the eight filter combinations.
pub fn ablate(
    model: &RegionModel,
    catalog: &SiteCatalog,
    queries: &[WildQuery],
    cfg: &WildConfig,
) -> Result<Vec<AblationCell>, ProtocolError> {
    ablation_grid()
        .par_iter()
        .map(|&(location, orientation, attention)| {
            let ctx_cfg = cfg.context(location, orientation, attention);
            let (mut correct, mut none, mut cand_total) = (0usize, 0usize, 0usize);
            for q in queries {
                match contextual_classify(model, &q.feature, &q.context, catalog, &ctx_cfg) {
                    Ok(pred) => {
                        cand_total += pred.candidates.len();
                        if pred.masked.top1() == q.true_site {
                            correct += 1;
                        }
                    }
                    Err(ContextError::NoCandidateInContext) => none += 1,
                    Err(e) => return Err(e.into()),
                }
            }
            let answered = queries.len() - none;
            Ok(AblationCell {
                location,
                orientation,
                attention,
                n_queries: queries.len(),
                correct,
                no_candidate: none,
                accuracy: (answered > 0).then(|| correct as f64 / queries.len() as f64),
                mean_candidates: if answered > 0 { cand_total as f64 / answered as f64 } else { 0.0 },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WildReport {
    pub cells: Vec<AblationCell>,
    pub num_sites: usize,
    pub train_size: usize,
}

impl WildReport {
    pub fn cell(&self, location: bool, orientation: bool, attention: bool) -> &AblationCell {
        self.cells
            .iter()
            .find(|c| (c.location, c.orientation, c.attention) == (location, orientation, attention))
            .expect("grid has all eight cells")
    }
}

/// Generates the neighbourhood, trains one model on all of it, draws the
/// queries and runs the ablation grid.
pub fn simulate_wild(cfg: &WildConfig) -> Result<WildReport, ProtocolError> {
    cfg.validate()?;
    let data = generate_synthetic(&cfg.synth)?;
    let model = train_region_model(&data.dataset, &TrainConfig { seed: cfg.seed, ..cfg.train }, "wild")?;
    let queries = draw_queries(&data.catalog, &data.truth, cfg)?;
    Ok(WildReport {
        cells: ablate(&model, &data.catalog, &queries, cfg)?,
        num_sites: data.catalog.len(),
        train_size: data.dataset.len(),
    })
}
