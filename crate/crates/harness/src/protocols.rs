//! Cross validation and the parameter sweeps built on it.
//!
//! Every run is a pure function of its config. Iteration `i` of a CV run
//! splits with ChaCha8 stream `2i` and subsamples with stream `2i + 1` of the
//! config seed, and trains with seed `seed + i`, so iterations can run in
//! parallel and are merged by index.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use siterec_core::catalog::{sites_in_region, FeatureDataset, SiteCatalog};
use siterec_core::classifier::{
    argmax_lexicographic, evaluate_top1, train_region_model, ClassifierError, RegionModel, TrainConfig,
};
use siterec_core::geo::{tile_area, BoundingBox};
use siterec_core::numeric::mean_std;
use siterec_core::purify::{purify_dataset, PurifyConfig, PurifyStats};

use crate::ProtocolError;

/// Training preset for the synthetic benchmarks: SGD on standardized
/// features converges in a few epochs, where raw simplex inputs at
/// `lr = 0.001` would need thousands.
pub fn benchmark_train_config() -> TrainConfig {
    TrainConfig {
        lr: 0.2,
        epochs: 10,
        batch_size: 32,
        seed: 0,
        shuffle: true,
        standardize: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub k_iterations: usize,
    pub test_fraction: f64,
    pub purify: bool,
    pub purify_config: PurifyConfig,
    pub train: TrainConfig,
    /// Subsample each class of the training split to at most this many images.
    pub max_train_per_class: Option<usize>,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k_iterations: 10,
            test_fraction: 0.2,
            purify: false,
            purify_config: PurifyConfig::default(),
            train: benchmark_train_config(),
            max_train_per_class: None,
            seed: 0,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.k_iterations == 0 {
            return Err(ProtocolError::InvalidConfig("k_iterations must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(ProtocolError::InvalidConfig(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.max_train_per_class == Some(0) {
            return Err(ProtocolError::InvalidConfig("images per class must be at least 1".into()));
        }
        self.train.validate()?;
        self.purify_config.validate()?;
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-class split: `round(test_fraction * n)` test images, clamped to `[1, n - 1]`.
/// Both index lists come back in dataset order.
pub fn stratified_split(
    dataset: &FeatureDataset,
    test_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>), ProtocolError> {
    let mut train = Vec::with_capacity(dataset.len());
    let mut test = Vec::new();
    for (site_id, mut idx) in dataset.by_site() {
        let n = idx.len();
        if n < 2 {
            return Err(ProtocolError::ClassTooSmall { site_id, n });
        }
        let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
        idx.shuffle(rng);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Keeps at most `m` images of each class, sampled without replacement.
/// Classes already within the cap are untouched and consume no randomness.
pub fn subsample_per_class(dataset: &FeatureDataset, m: usize, rng: &mut ChaCha8Rng) -> FeatureDataset {
    let mut keep = Vec::with_capacity(dataset.len());
    for (_, idx) in dataset.by_site() {
        if idx.len() <= m {
            keep.extend(idx);
        } else {
            keep.extend(index::sample(rng, idx.len(), m).into_iter().map(|j| idx[j]));
        }
    }
    keep.sort_unstable();
    dataset.select(&keep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRun {
    pub iteration: usize,
    /// Top-1 accuracy over test images whose class is still modeled.
    pub accuracy: f64,
    /// Top-1 accuracy counting test images of purified-away classes as misses.
    pub accuracy_all: f64,
    pub n_test: usize,
    /// Test images dropped because purification removed their class.
    pub n_test_excluded: usize,
    pub n_train: usize,
    pub classes_trained: usize,
    pub purify_stats: Option<PurifyStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub accuracy_all_mean: f64,
    pub runs: Vec<CvRun>,
}

/// Trains on `train` and scores `test`. A single class needs no model: every
/// retained test image is trivially classified correctly.
fn fit_and_score(
    train: &FeatureDataset,
    test: &FeatureDataset,
    train_cfg: &TrainConfig,
) -> Result<(f64, usize), ProtocolError> {
    let classes: BTreeSet<String> = train.site_ids().into_iter().collect();
    if classes.is_empty() {
        return Err(ClassifierError::EmptyTrainingSet.into());
    }
    let kept = test.restrict_to_sites(&classes);
    if kept.is_empty() {
        return Err(ClassifierError::EmptyTestSet.into());
    }
    let acc = if classes.len() == 1 {
        1.0
    } else {
        let model = train_region_model(train, train_cfg, "cv")?;
        evaluate_top1(&model, &kept)?
    };
    Ok((acc, kept.len()))
}

fn cv_iteration(dataset: &FeatureDataset, cfg: &CvConfig, iteration: usize) -> Result<CvRun, ProtocolError> {
    let mut split_rng = stream_rng(cfg.seed, 2 * iteration as u64);
    let (train_idx, test_idx) = stratified_split(dataset, cfg.test_fraction, &mut split_rng)?;
    let mut train = dataset.select(&train_idx);
    let test = dataset.select(&test_idx);
    if let Some(m) = cfg.max_train_per_class {
        let mut sub_rng = stream_rng(cfg.seed, 2 * iteration as u64 + 1);
        train = subsample_per_class(&train, m, &mut sub_rng);
    }
    let purify_stats = if cfg.purify {
        let purified = purify_dataset(&train, &cfg.purify_config)?;
        train = purified.dataset;
        Some(purified.stats)
    } else {
        None
    };
    let train_cfg = TrainConfig {
        seed: cfg.seed.wrapping_add(iteration as u64),
        ..cfg.train
    };
    let (accuracy, n_kept) = fit_and_score(&train, &test, &train_cfg)?;
    Ok(CvRun {
        iteration,
        accuracy,
        accuracy_all: accuracy * n_kept as f64 / test.len() as f64,
        n_test: test.len(),
        n_test_excluded: test.len() - n_kept,
        n_train: train.len(),
        classes_trained: train.site_ids().len(),
        purify_stats,
    })
}

/// Repeated stratified splits; reports mean and sample std of top-1 accuracy.
pub fn monte_carlo_cv(dataset: &FeatureDataset, cfg: &CvConfig) -> Result<CvOutcome, ProtocolError> {
    cfg.validate()?;
    for (site_id, idx) in dataset.by_site() {
        if idx.len() < 2 {
            return Err(ProtocolError::ClassTooSmall { site_id, n: idx.len() });
        }
    }
    let runs = (0..cfg.k_iterations)
        .into_par_iter()
        .map(|i| cv_iteration(dataset, cfg, i))
        .collect::<Result<Vec<_>, _>>()?;
    let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let all: Vec<f64> = runs.iter().map(|r| r.accuracy_all).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&accs);
    Ok(CvOutcome {
        accuracy_mean,
        accuracy_std,
        accuracy_all_mean: mean_std(&all).0,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagesPoint {
    pub m: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub mean_train_size: f64,
}

/// One CV run per `m`, each capping the training split at `m` images per class.
pub fn sweep_images_per_class(
    dataset: &FeatureDataset,
    m_values: &[usize],
    cv: &CvConfig,
) -> Result<Vec<ImagesPoint>, ProtocolError> {
    if m_values.is_empty() {
        return Err(ProtocolError::InvalidConfig("m_values is empty".into()));
    }
    if let Some(&m) = m_values.iter().find(|&&m| m == 0) {
        return Err(ProtocolError::InvalidConfig(format!("m must be at least 1, got {m}")));
    }
    m_values
        .iter()
        .map(|&m| {
            let cfg = CvConfig {
                max_train_per_class: Some(m),
                ..cv.clone()
            };
            let out = monte_carlo_cv(dataset, &cfg)?;
            let sizes: Vec<f64> = out.runs.iter().map(|r| r.n_train as f64).collect();
            Ok(ImagesPoint {
                m,
                accuracy_mean: out.accuracy_mean,
                accuracy_std: out.accuracy_std,
                mean_train_size: mean_std(&sizes).0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionResult {
    pub region_id: String,
    pub num_sites: usize,
    pub accuracy_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaPoint {
    pub region_size_m: f64,
    pub regions_total: usize,
    pub regions_evaluated: usize,
    pub regions_skipped_empty: Vec<String>,
    pub mean_sites_per_region: f64,
    /// Mean over evaluated regions of each region's CV mean.
    pub accuracy_mean: f64,
    /// Sample std across regions.
    pub accuracy_std: f64,
    pub regions: Vec<RegionResult>,
}

/// Tiles `area` at each size, runs CV inside every non-empty region and
/// averages across regions.
pub fn sweep_area_size(
    catalog: &SiteCatalog,
    dataset: &FeatureDataset,
    area: &BoundingBox,
    sizes_m: &[f64],
    overlap_m: f64,
    cv: &CvConfig,
) -> Result<Vec<AreaPoint>, ProtocolError> {
    if sizes_m.is_empty() {
        return Err(ProtocolError::InvalidConfig("region size list is empty".into()));
    }
    cv.validate()?;
    sizes_m
        .iter()
        .map(|&size| {
            let tiling = tile_area(area, size, overlap_m)?;
            let per_region = tiling
                .regions()
                .par_iter()
                .map(|region| {
                    let sites: BTreeSet<String> = sites_in_region(catalog, region)
                        .site_ids()
                        .map(str::to_string)
                        .collect();
                    let local = dataset.restrict_to_sites(&sites);
                    let n_sites = local.site_ids().len();
                    let acc = match n_sites {
                        0 => None,
                        1 => Some(1.0),
                        _ => Some(monte_carlo_cv(&local, cv)?.accuracy_mean),
                    };
                    Ok((region.region_id.clone(), n_sites, acc))
                })
                .collect::<Result<Vec<_>, ProtocolError>>()?;
            let mut skipped = Vec::new();
            let mut regions = Vec::new();
            for (region_id, num_sites, acc) in per_region {
                match acc {
                    Some(accuracy_mean) => regions.push(RegionResult {
                        region_id,
                        num_sites,
                        accuracy_mean,
                    }),
                    None => skipped.push(region_id),
                }
            }
            let accs: Vec<f64> = regions.iter().map(|r| r.accuracy_mean).collect();
            let counts: Vec<f64> = regions.iter().map(|r| r.num_sites as f64).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&accs);
            Ok(AreaPoint {
                region_size_m: size,
                regions_total: tiling.len(),
                regions_evaluated: regions.len(),
                regions_skipped_empty: skipped,
                mean_sites_per_region: mean_std(&counts).0,
                accuracy_mean,
                accuracy_std,
                regions,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub n_queries: usize,
    /// Fraction of queries whose predicted site has each category, aligned
    /// with [`ConfusionMatrix::categories`].
    pub probabilities: Vec<f64>,
    /// The three most frequent predicted categories, ties broken by name.
    pub top3: Vec<(String, f64)>,
    /// P(predicted site is correct | predicted site shares the true category).
    pub p_correct_given_same_category: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub categories: Vec<String>,
    pub rows: Vec<CategoryRow>,
}

/// Category-level confusion of `model`'s top-1 predictions on `test`.
pub fn confusion_by_category(
    model: &RegionModel,
    test: &FeatureDataset,
    catalog: &SiteCatalog,
) -> Result<ConfusionMatrix, ProtocolError> {
    if test.is_empty() {
        return Err(ClassifierError::EmptyTestSet.into());
    }
    let category_of = |site: &str| -> Result<String, ProtocolError> {
        catalog
            .get(site)
            .map(|r| r.category.clone())
            .ok_or_else(|| ProtocolError::InvalidConfig(format!("site {site} is not in the catalog")))
    };
    let mut categories: BTreeSet<String> = BTreeSet::new();
    for s in model.site_ids() {
        categories.insert(category_of(s)?);
    }
    // true category -> (predicted category -> count), plus same-category hits
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut same: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut probs = vec![0.0; model.num_sites()];
    for img in test.images() {
        let truth = category_of(&img.site_id)?;
        categories.insert(truth.clone());
        model.probs_into(img.feature.probs(), &mut probs)?;
        let top = &model.site_ids()[argmax_lexicographic(&probs, model.site_ids())];
        let predicted = category_of(top)?;
        *counts.entry(truth.clone()).or_default().entry(predicted.clone()).or_default() += 1;
        let entry = same.entry(truth.clone()).or_default();
        if predicted == truth {
            entry.0 += 1;
            if *top == img.site_id {
                entry.1 += 1;
            }
        }
    }
    let categories: Vec<String> = categories.into_iter().collect();
    let rows = counts
        .into_iter()
        .map(|(category, row)| {
            let n: usize = row.values().sum();
            let probabilities: Vec<f64> = categories
                .iter()
                .map(|c| row.get(c).copied().unwrap_or(0) as f64 / n as f64)
                .collect();
            let mut ranked: Vec<(String, f64)> = categories.iter().cloned().zip(probabilities.iter().copied()).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            ranked.truncate(3);
            let (same_pred, same_hit) = same[&category];
            CategoryRow {
                n_queries: n,
                probabilities,
                top3: ranked,
                p_correct_given_same_category: (same_pred > 0).then(|| same_hit as f64 / same_pred as f64),
                category,
            }
        })
        .collect();
    Ok(ConfusionMatrix { categories, rows })
}

/// Trains on one stratified split (iteration 0 of `cv`) and tabulates the
/// category confusion on its test half.
pub fn run_confusion(
    catalog: &SiteCatalog,
    dataset: &FeatureDataset,
    cv: &CvConfig,
) -> Result<ConfusionMatrix, ProtocolError> {
    cv.validate()?;
    let mut rng = stream_rng(cv.seed, 0);
    let (train_idx, test_idx) = stratified_split(dataset, cv.test_fraction, &mut rng)?;
    let mut train = dataset.select(&train_idx);
    if cv.purify {
        train = purify_dataset(&train, &cv.purify_config)?.dataset;
    }
    let classes: BTreeSet<String> = train.site_ids().into_iter().collect();
    let test = dataset.select(&test_idx).restrict_to_sites(&classes);
    let model = train_region_model(&train, &TrainConfig { seed: cv.seed, ..cv.train }, "confusion")?;
    confusion_by_category(&model, &test, catalog)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRow {
    pub source: String,
    pub purify: bool,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

/// CV per labelled dataset, with purification off and on.
pub fn compare_sources(datasets: &[(String, FeatureDataset)], cv: &CvConfig) -> Result<Vec<SourceRow>, ProtocolError> {
    let mut rows = Vec::new();
    for (label, ds) in datasets {
        for purify in [false, true] {
            let out = monte_carlo_cv(ds, &CvConfig { purify, ..cv.clone() })?;
            rows.push(SourceRow {
                source: label.clone(),
                purify,
                accuracy_mean: out.accuracy_mean,
                accuracy_std: out.accuracy_std,
            });
        }
    }
    Ok(rows)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// `None` when either side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
