//! Mobile-context candidate filtering.
//!
//! The user's position and compass bearing restrict which sites can be in
//! view; predictions are masked to those candidates and renormalized. An
//! optional attention feature (a user-focused view) replaces the raw query.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{FeatureDistribution, SiteCatalog};
use crate::classifier::{predict, ClassifierError, Prediction, RegionModel};
use crate::geo::{angular_difference, haversine_distance, initial_bearing, normalize_bearing, GeoPoint};
use crate::numeric::stable_sum;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContextError {
    #[error("no candidate site remains in the current context")]
    NoCandidateInContext,
    #[error("invalid context config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobileContext {
    pub location: GeoPoint,
    /// Compass bearing in degrees, normalized to `[0, 360)`.
    pub bearing: f64,
    pub attention_feature: Option<FeatureDistribution>,
}

impl MobileContext {
    pub fn new(location: GeoPoint, bearing_deg: f64) -> Self {
        Self {
            location,
            bearing: normalize_bearing(bearing_deg),
            attention_feature: None,
        }
    }

    pub fn with_attention(mut self, feature: FeatureDistribution) -> Self {
        self.attention_feature = Some(feature);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    pub radius_m: f64,
    /// Half-width of the view sector around the bearing.
    pub half_angle_deg: f64,
    pub enable_location: bool,
    pub enable_orientation: bool,
    pub enable_attention: bool,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            radius_m: 200.0,
            half_angle_deg: 60.0,
            enable_location: true,
            enable_orientation: true,
            enable_attention: true,
        }
    }
}

impl ContextConfig {
    /// All filters off.
    pub fn disabled() -> Self {
        Self {
            enable_location: false,
            enable_orientation: false,
            enable_attention: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ContextError> {
        if !(self.radius_m > 0.0) {
            return Err(ContextError::InvalidConfig(format!("radius_m must be positive, got {}", self.radius_m)));
        }
        if !(self.half_angle_deg > 0.0 && self.half_angle_deg <= 180.0) {
            return Err(ContextError::InvalidConfig(format!(
                "half_angle_deg must be in (0, 180], got {}",
                self.half_angle_deg
            )));
        }
        Ok(())
    }
}

/// Which filters actually shaped a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AppliedFilters {
    pub location: bool,
    pub orientation: bool,
    pub attention: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextualPrediction {
    /// Renormalized over the candidates; zero elsewhere.
    pub masked: Prediction,
    pub candidates: BTreeSet<String>,
    pub applied_filters: AppliedFilters,
}

#[derive(Serialize)]
struct SiteProbability<'a> {
    site_id: &'a str,
    probability: f64,
}

impl Serialize for ContextualPrediction {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            distribution: Vec<SiteProbability<'a>>,
            top1: &'a str,
            candidates: &'a BTreeSet<String>,
            applied_filters: AppliedFilters,
        }
        Repr {
            distribution: self
                .masked
                .site_ids()
                .iter()
                .zip(self.masked.probs())
                .map(|(s, &p)| SiteProbability {
                    site_id: s,
                    probability: p,
                })
                .collect(),
            top1: self.masked.top1(),
            candidates: &self.candidates,
            applied_filters: self.applied_filters,
        }
        .serialize(serializer)
    }
}

/// Whether `site` passes the enabled spatial filters for `ctx`.
pub fn site_in_context(site: GeoPoint, ctx: &MobileContext, cfg: &ContextConfig) -> bool {
    if cfg.enable_location && haversine_distance(ctx.location, site) > cfg.radius_m {
        return false;
    }
    if cfg.enable_orientation {
        // a site at the user's own position is in view from any bearing
        if let Ok(b) = initial_bearing(ctx.location, site) {
            if angular_difference(ctx.bearing, b) > cfg.half_angle_deg {
                return false;
            }
        }
    }
    true
}

/// Sites passing the location radius and orientation sector filters.
pub fn candidate_sites(sites: &SiteCatalog, ctx: &MobileContext, cfg: &ContextConfig) -> BTreeSet<String> {
    sites
        .iter()
        .filter(|s| site_in_context(s.location, ctx, cfg))
        .map(|s| s.site_id.clone())
        .collect()
}

/// Zeroes non-candidates and renormalizes. Candidates unknown to the
/// prediction are ignored. The top site is chosen among candidates on the
/// unscaled probabilities, so a raw top site that is a candidate stays on top.
pub fn masked_predict(raw: &Prediction, candidates: &BTreeSet<String>) -> Result<ContextualPrediction, ContextError> {
    masked_with_filters(raw, candidates, AppliedFilters::default())
}

fn masked_with_filters(
    raw: &Prediction,
    candidates: &BTreeSet<String>,
    applied_filters: AppliedFilters,
) -> Result<ContextualPrediction, ContextError> {
    let ids = raw.site_ids();
    let keep: Vec<bool> = ids.iter().map(|s| candidates.contains(s)).collect();
    let present: BTreeSet<String> = ids.iter().zip(&keep).filter(|(_, &k)| k).map(|(s, _)| s.clone()).collect();
    if keep.iter().all(|&k| k) {
        return Ok(ContextualPrediction {
            masked: raw.clone(),
            candidates: present,
            applied_filters,
        });
    }
    let zeroed: Vec<f64> = raw.probs().iter().zip(&keep).map(|(&p, &k)| if k { p } else { 0.0 }).collect();
    let mass = stable_sum(zeroed.iter().copied());
    if !(mass > 0.0) {
        return Err(ContextError::NoCandidateInContext);
    }
    let mut top1 = None::<usize>;
    for (i, &p) in zeroed.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        top1 = match top1 {
            Some(t) if zeroed[t] > p || (zeroed[t] == p && ids[t] < ids[i]) => Some(t),
            _ => Some(i),
        };
    }
    let probs: Vec<f64> = zeroed.iter().map(|p| p / mass).collect();
    Ok(ContextualPrediction {
        masked: Prediction::with_top1(
            raw.shared_site_ids(),
            FeatureDistribution::from_vec_unchecked(probs),
            top1.expect("positive mass implies a candidate"),
        ),
        candidates: present,
        applied_filters,
    })
}

/// Predicts with `model`, substituting the attention feature when enabled
/// and present, then masks to the sites in context.
pub fn contextual_classify(
    model: &RegionModel,
    feature: &FeatureDistribution,
    ctx: &MobileContext,
    sites: &SiteCatalog,
    cfg: &ContextConfig,
) -> Result<ContextualPrediction, ContextError> {
    cfg.validate()?;
    let attention = cfg.enable_attention.then_some(ctx.attention_feature.as_ref()).flatten();
    let raw = predict(model, attention.unwrap_or(feature))?;
    let applied = AppliedFilters {
        location: cfg.enable_location,
        orientation: cfg.enable_orientation,
        attention: attention.is_some(),
    };
    let candidates: BTreeSet<String> = if cfg.enable_location || cfg.enable_orientation {
        model
            .site_ids()
            .iter()
            .filter(|s| sites.get(s).is_some_and(|rec| site_in_context(rec.location, ctx, cfg)))
            .cloned()
            .collect()
    } else {
        model.site_ids().iter().cloned().collect()
    };
    masked_with_filters(&raw, &candidates, applied)
}
