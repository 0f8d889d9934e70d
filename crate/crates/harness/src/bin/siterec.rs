//! `siterec`: data preparation, evaluation protocols and the model registry.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use siterec_core::catalog::{
    parse_catalog, parse_features, write_catalog, write_features, CatalogFormat, FeatureDataset, FeatureFormat,
    FeatureParseOptions, SiteCatalog, sites_in_region,
};
use siterec_core::classifier::{deserialize_model, serialize_model, train_region_model_with_history, TrainConfig};
use siterec_core::geo::{tile_area, BoundingBox, Tiling};
use siterec_core::purify::{purify_dataset, write_cohesion_csv, write_denoise_csv, PurifyConfig};
use siterec_harness::experiments::{
    confusion_synthetic, evaluate, evaluate_synthetic, sweep_area, sweep_area_synthetic, sweep_images_synthetic,
    write_area_sweep, write_confusion, write_eval, write_images_sweep, write_wild, AreaSweepConfig,
    ConfusionConfig, EvalConfig, ImagesSweepConfig, Seeded,
};
use siterec_harness::protocols::{run_confusion, sweep_images_per_class};
use siterec_harness::report::ExperimentReport;
use siterec_harness::synth::{generate_synthetic, SynthConfig};
use siterec_harness::wild::{simulate_wild, WildConfig};
use siterec_registry::{serve, FetchOutcome, RegistryClient, RegistryConfig};

#[derive(Parser)]
#[command(name = "siterec", version, about = "Landmark site recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides every seed in the protocol config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Protocol config as JSON; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Site catalog (.csv or .jsonl).
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Image features (.jsonl, or the packed binary format otherwise).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Keep at most this many images per site when reading features.
    #[arg(long)]
    max_images_per_site: Option<usize>,
}

#[derive(Copy, Clone, ValueEnum)]
enum FeatureFileFormat {
    Jsonl,
    Packed,
}

#[derive(Subcommand)]
enum Command {
    /// Validates a catalog and feature file and writes normalized copies.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Writes a synthetic catalog, features and ground truth.
    Generate {
        /// planted-outlier, noisy, curated, mixed, area or wild.
        #[arg(long, default_value = "planted-outlier")]
        preset: String,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: FeatureFileFormat,
    },
    /// Tiles an area into overlapping square regions.
    Tile {
        /// min_lat,min_lon,max_lat,max_lon; defaults to the catalog's extent.
        #[arg(long, allow_hyphen_values = true)]
        bbox: Option<String>,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long, default_value_t = 1000.0)]
        size_m: f64,
        #[arg(long, default_value_t = 200.0)]
        overlap_m: f64,
    },
    /// Removes incohesive classes and outlier images.
    Purify {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Trains a region model and writes it in the binary model format.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Restrict training to the sites inside this region of `--tiling`.
        #[arg(long)]
        region: Option<String>,
        #[arg(long, requires = "region")]
        tiling: Option<PathBuf>,
        /// Apply purification before training.
        #[arg(long)]
        purify: bool,
    },
    /// Cross validation with purification off and on, and per-source accuracy.
    Eval {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Accuracy as a function of region size.
    SweepArea {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Accuracy as a function of training images per class.
    SweepImages {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Category-level confusion of top-1 predictions.
    Confusion {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Simulated on-device queries under every combination of context filters.
    Wild,
    /// Runs the model registry server until killed.
    Serve {
        #[arg(long, env = "SITEREC_LISTEN", default_value = "127.0.0.1:7878")]
        listen: String,
        #[arg(long, env = "SITEREC_TILING")]
        tiling: PathBuf,
        #[arg(long, env = "SITEREC_DATA_DIR")]
        data_dir: Option<PathBuf>,
    },
    /// Uploads a model blob for a region.
    Publish {
        #[arg(long, env = "SITEREC_ADDR", default_value = "127.0.0.1:7878")]
        addr: String,
        #[arg(long)]
        region: String,
        #[arg(long)]
        model: PathBuf,
    },
    /// Downloads a region model, by region id or by position.
    Fetch {
        #[arg(long, env = "SITEREC_ADDR", default_value = "127.0.0.1:7878")]
        addr: String,
        #[arg(long, required_unless_present = "lat")]
        region: Option<String>,
        #[arg(long, requires = "lon", conflicts_with = "region", allow_hyphen_values = true)]
        lat: Option<f64>,
        #[arg(long, requires = "lat", allow_hyphen_values = true)]
        lon: Option<f64>,
        /// Region the client currently uses, for lookups in overlap zones.
        #[arg(long)]
        current_region: Option<String>,
        #[arg(long)]
        version: Option<u64>,
        /// Hash of the blob already held; skips the transfer when current.
        #[arg(long)]
        if_hash: Option<String>,
    },
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn seeded_config<T: DeserializeOwned + Default + Seeded>(cli: &Cli) -> Result<T> {
    let mut cfg: T = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl" || e == "json")
}

fn read_catalog(path: &Path) -> Result<SiteCatalog> {
    let format = if is_jsonl(path) { CatalogFormat::Jsonl } else { CatalogFormat::Csv };
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_catalog(BufReader::new(file), format).with_context(|| format!("reading catalog {}", path.display()))
}

fn read_features(path: &Path, catalog: Option<&SiteCatalog>, max: Option<usize>) -> Result<FeatureDataset> {
    let format = if is_jsonl(path) { FeatureFormat::Jsonl } else { FeatureFormat::PackedBinary };
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let opts = FeatureParseOptions {
        catalog,
        max_images_per_site: max,
        ..FeatureParseOptions::default()
    };
    parse_features(BufReader::new(file), format, &opts).with_context(|| format!("reading features {}", path.display()))
}

/// Loaded inputs plus their paths for the report.
struct Inputs {
    catalog: Option<SiteCatalog>,
    features: Option<FeatureDataset>,
    paths: Vec<String>,
}

fn load_inputs(data: &DataArgs) -> Result<Inputs> {
    let catalog = data.catalog.as_deref().map(read_catalog).transpose()?;
    let features = data
        .features
        .as_deref()
        .map(|p| read_features(p, catalog.as_ref(), data.max_images_per_site))
        .transpose()?;
    let paths = [&data.catalog, &data.features]
        .into_iter()
        .flatten()
        .map(|p| p.display().to_string())
        .collect();
    Ok(Inputs { catalog, features, paths })
}

fn require_features(inputs: &Inputs) -> Result<&FeatureDataset> {
    inputs.features.as_ref().context("--features is required")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn catalog_extent(catalog: &SiteCatalog) -> Result<BoundingBox> {
    let mut it = catalog.iter().map(|s| s.location);
    let first = it.next().context("catalog is empty")?;
    let (mut lo, mut hi) = (first, first);
    for p in it {
        lo.lat = lo.lat.min(p.lat);
        lo.lon = lo.lon.min(p.lon);
        hi.lat = hi.lat.max(p.lat);
        hi.lon = hi.lon.max(p.lon);
    }
    Ok(BoundingBox::new(lo.lat, lo.lon, hi.lat, hi.lon)?)
}

#[derive(Serialize)]
struct DatasetSummary {
    sites: usize,
    images: usize,
    dimension: usize,
    images_per_site: Vec<(String, usize)>,
}

fn summarize(catalog: Option<&SiteCatalog>, ds: Option<&FeatureDataset>) -> DatasetSummary {
    DatasetSummary {
        sites: catalog.map_or(0, SiteCatalog::len),
        images: ds.map_or(0, FeatureDataset::len),
        dimension: ds.map_or(0, FeatureDataset::dimension),
        images_per_site: ds
            .map(|d| d.by_site().into_iter().map(|(s, idx)| (s, idx.len())).collect())
            .unwrap_or_default(),
    }
}

fn ingest(cli: &Cli, data: &DataArgs) -> Result<()> {
    if data.catalog.is_none() && data.features.is_none() {
        bail!("give --catalog, --features or both");
    }
    let inputs = load_inputs(data)?;
    if let Some(c) = &inputs.catalog {
        write_catalog(c, create(&cli.out.join("catalog.csv"))?, CatalogFormat::Csv)?;
    }
    if let Some(f) = &inputs.features {
        write_features(f, create(&cli.out.join("features.jsonl"))?, FeatureFormat::Jsonl)?;
    }
    let summary = summarize(inputs.catalog.as_ref(), inputs.features.as_ref());
    ExperimentReport::new("ingest", data.max_images_per_site, summary)
        .with_inputs(inputs.paths)
        .write(&cli.out.join("ingest_report.json"))?;
    Ok(())
}

fn generate(cli: &Cli, preset: &str, format: FeatureFileFormat) -> Result<()> {
    let mut cfg = match cli.config.as_deref() {
        Some(p) => load_config::<SynthConfig>(Some(p))?,
        None => SynthConfig::preset(preset, 0).with_context(|| format!("unknown preset {preset}"))?,
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    let data = generate_synthetic(&cfg)?;
    write_catalog(&data.catalog, create(&cli.out.join("catalog.csv"))?, CatalogFormat::Csv)?;
    let (name, ff) = match format {
        FeatureFileFormat::Jsonl => ("features.jsonl", FeatureFormat::Jsonl),
        FeatureFileFormat::Packed => ("features.gfd", FeatureFormat::PackedBinary),
    };
    write_features(&data.dataset, create(&cli.out.join(name))?, ff)?;
    write_json(&cli.out.join("ground_truth.json"), &data.truth)?;
    let summary = summarize(Some(&data.catalog), Some(&data.dataset));
    ExperimentReport::new("generate", cfg, summary).write(&cli.out.join("generate_report.json"))?;
    Ok(())
}

fn parse_bbox(text: &str) -> Result<BoundingBox> {
    let v = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .context("--bbox takes four numbers")?;
    let [a, b, c, d] = v[..] else { bail!("--bbox takes four numbers, got {}", v.len()) };
    Ok(BoundingBox::new(a, b, c, d)?)
}

fn tile(cli: &Cli, bbox: Option<&str>, catalog: Option<&Path>, size_m: f64, overlap_m: f64) -> Result<()> {
    let area = match (bbox, catalog) {
        (Some(b), _) => parse_bbox(b)?,
        (None, Some(c)) => catalog_extent(&read_catalog(c)?)?,
        (None, None) => bail!("give --bbox or --catalog"),
    };
    let tiling = tile_area(&area, size_m, overlap_m)?;
    fs::create_dir_all(&cli.out)?;
    fs::write(cli.out.join("tiling.json"), tiling.to_json())?;
    eprintln!("{} regions", tiling.len());
    Ok(())
}

fn purify(cli: &Cli, data: &DataArgs) -> Result<()> {
    let cfg: PurifyConfig = load_config(cli.config.as_deref())?;
    let inputs = load_inputs(data)?;
    let ds = require_features(&inputs)?;
    let out = purify_dataset(ds, &cfg)?;
    write_features(&out.dataset, create(&cli.out.join("purified.jsonl"))?, FeatureFormat::Jsonl)?;
    write_cohesion_csv(&out.cohesion, create(&cli.out.join("cohesion.csv"))?)?;
    write_denoise_csv(&out.denoise, create(&cli.out.join("denoise.csv"))?)?;
    ExperimentReport::new("purify", cfg, out.stats)
        .with_inputs(inputs.paths)
        .write(&cli.out.join("purify_report.json"))?;
    Ok(())
}

#[derive(Serialize, serde::Deserialize, Default)]
#[serde(default)]
struct TrainFileConfig {
    train: TrainConfig,
    purify: PurifyConfig,
}

#[derive(Serialize)]
struct TrainSummary {
    region_id: String,
    num_sites: usize,
    train_size: usize,
    loss_history: Vec<f64>,
    content_hash: String,
}

fn train(cli: &Cli, data: &DataArgs, region: Option<&str>, tiling: Option<&Path>, purify: bool) -> Result<()> {
    let mut cfg: TrainFileConfig = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let inputs = load_inputs(data)?;
    let mut ds = require_features(&inputs)?.clone();
    if let (Some(region), Some(tiling)) = (region, tiling) {
        let catalog = inputs.catalog.as_ref().context("--catalog is required with --tiling")?;
        let tiling = Tiling::from_json(&fs::read_to_string(tiling)?)?;
        let r = tiling.get(region).with_context(|| format!("region {region} is not in the tiling"))?;
        let ids = sites_in_region(catalog, r).site_ids().map(str::to_string).collect();
        ds = ds.restrict_to_sites(&ids);
    }
    if purify {
        ds = purify_dataset(&ds, &cfg.purify)?.dataset;
    }
    let region_id = region.unwrap_or("region");
    let run = train_region_model_with_history(&ds, &cfg.train, region_id)?;
    let blob = serialize_model(&run.model);
    fs::create_dir_all(&cli.out)?;
    fs::write(cli.out.join(format!("{region_id}.grm")), &blob)?;
    let summary = TrainSummary {
        region_id: region_id.to_string(),
        num_sites: run.model.num_sites(),
        train_size: ds.len(),
        loss_history: run.loss_history,
        content_hash: siterec_registry::store::content_hash_hex(&blob),
    };
    ExperimentReport::new("train", cfg, summary)
        .with_inputs(inputs.paths)
        .write(&cli.out.join("train_report.json"))?;
    Ok(())
}

fn eval(cli: &Cli, data: &DataArgs) -> Result<()> {
    let cfg: EvalConfig = seeded_config(cli)?;
    let report = if data.features.is_some() {
        let inputs = load_inputs(data)?;
        let ds = require_features(&inputs)?;
        let mut by_source: Vec<(String, FeatureDataset)> = Vec::new();
        for img in ds.images() {
            let label = serde_json::to_value(img.source)?.as_str().unwrap_or_default().to_string();
            if !by_source.iter().any(|(l, _)| *l == label) {
                by_source.push((label.clone(), ds.filter(|i| i.source == img.source)));
            }
        }
        by_source.sort_by(|a, b| a.0.cmp(&b.0));
        let results = evaluate(ds, &by_source, &cfg.cv)?;
        ExperimentReport::new("eval", cfg, results).with_inputs(inputs.paths)
    } else {
        let results = evaluate_synthetic(&cfg)?;
        ExperimentReport::new("eval", cfg, results)
    };
    write_eval(&cli.out, &report)?;
    Ok(())
}

fn sweep_images_cmd(cli: &Cli, data: &DataArgs) -> Result<()> {
    let cfg: ImagesSweepConfig = seeded_config(cli)?;
    let report = if data.features.is_some() {
        let inputs = load_inputs(data)?;
        let points = sweep_images_per_class(require_features(&inputs)?, &cfg.m_values, &cfg.cv)?;
        ExperimentReport::new("sweep-images", cfg, points).with_inputs(inputs.paths)
    } else {
        let points = sweep_images_synthetic(&cfg)?;
        ExperimentReport::new("sweep-images", cfg, points)
    };
    write_images_sweep(&cli.out, &report)?;
    Ok(())
}

fn sweep_area_cmd(cli: &Cli, data: &DataArgs) -> Result<()> {
    let cfg: AreaSweepConfig = seeded_config(cli)?;
    let report = if data.features.is_some() {
        let inputs = load_inputs(data)?;
        let catalog = inputs.catalog.as_ref().context("--catalog is required with --features")?;
        let points = sweep_area(catalog, require_features(&inputs)?, &catalog_extent(catalog)?, &cfg)?;
        ExperimentReport::new("sweep-area", cfg, points).with_inputs(inputs.paths)
    } else {
        let points = sweep_area_synthetic(&cfg)?;
        ExperimentReport::new("sweep-area", cfg, points)
    };
    write_area_sweep(&cli.out, &report)?;
    Ok(())
}

fn confusion_cmd(cli: &Cli, data: &DataArgs) -> Result<()> {
    let cfg: ConfusionConfig = seeded_config(cli)?;
    let report = if data.features.is_some() {
        let inputs = load_inputs(data)?;
        let catalog = inputs.catalog.as_ref().context("--catalog is required with --features")?;
        let m = run_confusion(catalog, require_features(&inputs)?, &cfg.cv)?;
        ExperimentReport::new("confusion", cfg, m).with_inputs(inputs.paths)
    } else {
        let m = confusion_synthetic(&cfg)?;
        ExperimentReport::new("confusion", cfg, m)
    };
    write_confusion(&cli.out, &report)?;
    Ok(())
}

fn wild(cli: &Cli) -> Result<()> {
    let cfg: WildConfig = seeded_config(cli)?;
    let results = simulate_wild(&cfg)?;
    write_wild(&cli.out, &ExperimentReport::new("wild", cfg, results))?;
    Ok(())
}

fn serve_cmd(listen: &str, tiling: &Path, data_dir: Option<&Path>) -> Result<()> {
    let cfg = RegistryConfig {
        listen_addr: listen.to_string(),
        data_dir: data_dir.map(Path::to_path_buf),
        tiling_path: tiling.to_path_buf(),
    };
    let store = cfg.open_store()?;
    let handle = serve(cfg.listen_addr.as_str(), Arc::new(store))?;
    eprintln!("registry listening on {}", handle.local_addr());
    handle.join();
    Ok(())
}

fn publish(addr: &str, region: &str, model: &Path) -> Result<()> {
    let blob = fs::read(model).with_context(|| format!("reading {}", model.display()))?;
    deserialize_model(&blob).context("refusing to publish an unreadable model")?;
    let manifest = RegistryClient::connect(addr)?.publish(region, blob)?;
    println!("{}", serde_json::to_string(&manifest)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fetch(
    cli: &Cli,
    addr: &str,
    region: Option<&str>,
    position: Option<(f64, f64)>,
    current: Option<&str>,
    version: Option<u64>,
    if_hash: Option<&str>,
) -> Result<()> {
    let mut client = RegistryClient::connect(addr)?;
    let region = match (region, position) {
        (Some(r), _) => r.to_string(),
        (None, Some((lat, lon))) => client.lookup(lat, lon, current)?.region_id,
        (None, None) => bail!("give --region or --lat/--lon"),
    };
    match client.fetch(&region, version, if_hash)? {
        FetchOutcome::Modified { manifest, blob } => {
            let model = deserialize_model(&blob)?;
            fs::create_dir_all(&cli.out)?;
            let path = cli.out.join(format!("{}_v{}.grm", manifest.region_id, manifest.version));
            fs::write(&path, &blob)?;
            eprintln!("{} sites, wrote {}", model.num_sites(), path.display());
            println!("{}", serde_json::to_string(&manifest)?);
        }
        FetchOutcome::NotModified { manifest } => {
            eprintln!("up to date");
            println!("{}", serde_json::to_string(&manifest)?);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Ingest { data } => ingest(&cli, data),
        Command::Generate { preset, format } => generate(&cli, preset, *format),
        Command::Tile {
            bbox,
            catalog,
            size_m,
            overlap_m,
        } => tile(&cli, bbox.as_deref(), catalog.as_deref(), *size_m, *overlap_m),
        Command::Purify { data } => purify(&cli, data),
        Command::Train {
            data,
            region,
            tiling,
            purify,
        } => train(&cli, data, region.as_deref(), tiling.as_deref(), *purify),
        Command::Eval { data } => eval(&cli, data),
        Command::SweepArea { data } => sweep_area_cmd(&cli, data),
        Command::SweepImages { data } => sweep_images_cmd(&cli, data),
        Command::Confusion { data } => confusion_cmd(&cli, data),
        Command::Wild => wild(&cli),
        Command::Serve { listen, tiling, data_dir } => serve_cmd(listen, tiling, data_dir.as_deref()),
        Command::Publish { addr, region, model } => publish(addr, region, model),
        Command::Fetch {
            addr,
            region,
            lat,
            lon,
            current_region,
            version,
            if_hash,
        } => fetch(
            &cli,
            addr,
            region.as_deref(),
            lat.zip(*lon),
            current_region.as_deref(),
            *version,
            if_hash.as_deref(),
        ),
    }
}
