//! Site catalogs and per-image feature datasets.
//!
//! This is the ingestion boundary: every record entering the pipeline is
//! validated here, so downstream code can rely on the type invariants
//! (coordinates in range, unique ids, normalized feature vectors of a single
//! dimension).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoError, GeoPoint, Region};
use crate::numeric::stable_sum;

/// Default feature dimension (one entry per ImageNet class).
pub const DEFAULT_DIMENSION: usize = 1000;

/// Magic bytes of the packed binary feature format.
pub const FEATURE_MAGIC: &[u8; 4] = b"GFD1";

const MAX_ID_LEN: usize = 4096;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("line {line}: coordinate out of range (lat {lat}, lon {lon})")]
    CoordinateOutOfRange { line: u64, lat: f64, lon: f64 },
    #[error("line {line}: duplicate site id {site_id:?}")]
    DuplicateSiteId { line: u64, site_id: String },
    #[error("record {record}: expected dimension {expected}, found {found}")]
    DimensionMismatch { record: u64, expected: usize, found: usize },
    #[error("record {record}: feature not normalized: {source}")]
    NotNormalized {
        record: u64,
        #[source]
        source: DistributionError,
    },
    #[error("image {image_id:?} references unknown site {site_id:?}")]
    UnknownSiteId { image_id: String, site_id: String },
    #[error("duplicate image id {image_id:?}")]
    DuplicateImageId { image_id: String },
    #[error("bad header: {0}")]
    BadHeader(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("distribution has no entries")]
    Empty,
    #[error("entry {index} is {value}; entries must be finite and non-negative")]
    InvalidEntry { index: usize, value: f64 },
    #[error("entries sum to {sum}, not 1 within {tolerance}")]
    NotNormalized { sum: f64, tolerance: f64 },
}

/// A categorical probability vector describing one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureDistribution(#[serde(deserialize_with = "deserialize_probs")] Vec<f64>);

fn deserialize_probs<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    let probs = Vec::<f64>::deserialize(d)?;
    FeatureDistribution::validate(&probs, FeatureDistribution::DEFAULT_TOLERANCE).map_err(serde::de::Error::custom)?;
    Ok(probs)
}

impl FeatureDistribution {
    /// Absolute tolerance on the sum of entries.
    pub const DEFAULT_TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self, DistributionError> {
        Self::with_tolerance(probs, Self::DEFAULT_TOLERANCE)
    }

    pub fn with_tolerance(probs: Vec<f64>, tolerance: f64) -> Result<Self, DistributionError> {
        Self::validate(&probs, tolerance)?;
        Ok(Self(probs))
    }

    fn validate(probs: &[f64], tolerance: f64) -> Result<(), DistributionError> {
        if probs.is_empty() {
            return Err(DistributionError::Empty);
        }
        if let Some((index, &value)) = probs.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(DistributionError::InvalidEntry { index, value });
        }
        let sum = stable_sum(probs.iter().copied());
        if (sum - 1.0).abs() > tolerance {
            return Err(DistributionError::NotNormalized { sum, tolerance });
        }
        Ok(())
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, DistributionError> {
        if let Some((index, &value)) = weights.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(DistributionError::InvalidEntry { index, value });
        }
        let total = stable_sum(weights.iter().copied());
        if !(total > 0.0) {
            return Err(DistributionError::NotNormalized { sum: total, tolerance: 0.0 });
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    /// Wraps a vector the caller has already proven normalized.
    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(Self::validate(&probs, Self::DEFAULT_TOLERANCE).is_ok());
        Self(probs)
    }

    pub fn point_mass(dimension: usize, index: usize) -> Self {
        assert!(index < dimension, "atom {index} outside dimension {dimension}");
        let mut v = vec![0.0; dimension];
        v[index] = 1.0;
        Self(v)
    }

    pub fn uniform(dimension: usize) -> Self {
        assert!(dimension > 0);
        Self(vec![1.0 / dimension as f64; dimension])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FeatureDistribution {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A geo-tagged point of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "SiteRow", try_from = "SiteRow")]
pub struct SiteRecord {
    pub site_id: String,
    pub title: String,
    pub location: GeoPoint,
    pub category: String,
    pub pageviews: u64,
}

/// Flat on-disk shape shared by the CSV and JSONL catalog formats.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SiteRow {
    site_id: String,
    title: String,
    lat: f64,
    lon: f64,
    category: String,
    pageviews: u64,
}

impl From<SiteRecord> for SiteRow {
    fn from(r: SiteRecord) -> Self {
        SiteRow {
            site_id: r.site_id,
            title: r.title,
            lat: r.location.lat,
            lon: r.location.lon,
            category: r.category,
            pageviews: r.pageviews,
        }
    }
}

impl TryFrom<SiteRow> for SiteRecord {
    type Error = String;
    fn try_from(row: SiteRow) -> Result<Self, Self::Error> {
        row_to_record(row, 0).map_err(|e| e.to_string())
    }
}

fn row_to_record(row: SiteRow, line: u64) -> Result<SiteRecord, CatalogError> {
    if row.site_id.trim().is_empty() {
        return Err(CatalogError::MalformedRow { line, reason: "empty site_id".into() });
    }
    if row.category.trim().is_empty() {
        return Err(CatalogError::MalformedRow { line, reason: "empty category".into() });
    }
    let location = GeoPoint::new(row.lat, row.lon).map_err(|e| match e {
        GeoError::CoordinateOutOfRange { lat, lon } => CatalogError::CoordinateOutOfRange { line, lat, lon },
        other => CatalogError::MalformedRow { line, reason: other.to_string() },
    })?;
    Ok(SiteRecord {
        site_id: row.site_id,
        title: row.title,
        location,
        category: row.category,
        pageviews: row.pageviews,
    })
}

/// An ordered collection of sites with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<SiteRecord>", into = "Vec<SiteRecord>")]
pub struct SiteCatalog {
    records: Vec<SiteRecord>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<SiteRecord>> for SiteCatalog {
    type Error = CatalogError;
    fn try_from(records: Vec<SiteRecord>) -> Result<Self, Self::Error> {
        SiteCatalog::from_records(records)
    }
}

impl From<SiteCatalog> for Vec<SiteRecord> {
    fn from(c: SiteCatalog) -> Self {
        c.records
    }
}

impl SiteCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<SiteRecord>) -> Result<Self, CatalogError> {
        let mut catalog = Self::new();
        for (i, r) in records.into_iter().enumerate() {
            catalog.push_at_line(r, i as u64 + 1)?;
        }
        Ok(catalog)
    }

    pub fn push(&mut self, record: SiteRecord) -> Result<(), CatalogError> {
        let line = self.records.len() as u64 + 1;
        self.push_at_line(record, line)
    }

    fn push_at_line(&mut self, record: SiteRecord, line: u64) -> Result<(), CatalogError> {
        if self.index.contains_key(&record.site_id) {
            return Err(CatalogError::DuplicateSiteId { line, site_id: record.site_id });
        }
        self.index.insert(record.site_id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[SiteRecord] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SiteRecord> {
        self.records.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, site_id: &str) -> Option<&SiteRecord> {
        self.index.get(site_id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, site_id: &str) -> bool {
        self.index.contains_key(site_id)
    }

    /// Sub-catalog of the records satisfying `keep`, order preserved.
    pub fn filter(&self, mut keep: impl FnMut(&SiteRecord) -> bool) -> SiteCatalog {
        let records: Vec<SiteRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        SiteCatalog::from_records(records).expect("subset of a valid catalog is valid")
    }

    pub fn site_ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.site_id.as_str())
    }
}

impl<'a> IntoIterator for &'a SiteCatalog {
    type Item = &'a SiteRecord;
    type IntoIter = std::slice::Iter<'a, SiteRecord>;
    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CatalogFormat {
    Csv,
    Jsonl,
}

const CSV_HEADER: [&str; 6] = ["site_id", "title", "lat", "lon", "category", "pageviews"];

/// Parses a catalog stream. CSV requires the header
/// `site_id,title,lat,lon,category,pageviews`; JSONL has one object per line.
pub fn parse_catalog<R: Read>(input: R, format: CatalogFormat) -> Result<SiteCatalog, CatalogError> {
    match format {
        CatalogFormat::Csv => parse_catalog_csv(input),
        CatalogFormat::Jsonl => parse_catalog_jsonl(input),
    }
}

fn parse_catalog_csv<R: Read>(input: R) -> Result<SiteCatalog, CatalogError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(input);
    let header = reader.headers().map_err(|e| csv_error(e, 1))?.clone();
    if header.is_empty() {
        return Ok(SiteCatalog::new());
    }
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != CSV_HEADER {
        return Err(CatalogError::BadHeader(format!(
            "expected {:?}, found {:?}",
            CSV_HEADER.join(","),
            got.join(",")
        )));
    }
    let mut catalog = SiteCatalog::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(e, 0))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let number = |i: usize| -> Result<f64, CatalogError> {
            field(i).parse::<f64>().map_err(|e| CatalogError::MalformedRow {
                line,
                reason: format!("column {}: {e}", CSV_HEADER[i]),
            })
        };
        let pageviews = field(5).parse::<u64>().map_err(|e| CatalogError::MalformedRow {
            line,
            reason: format!("column pageviews: {e}"),
        })?;
        let record = row_to_record(
            SiteRow {
                site_id: field(0).to_string(),
                title: row.get(1).unwrap_or("").to_string(),
                lat: number(2)?,
                lon: number(3)?,
                category: field(4).to_string(),
                pageviews,
            },
            line,
        )?;
        catalog.push_at_line(record, line)?;
    }
    Ok(catalog)
}

fn csv_error(e: csv::Error, fallback_line: u64) -> CatalogError {
    let line = e.position().map(|p| p.line()).unwrap_or(fallback_line);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CatalogError::Io(io),
        other => CatalogError::MalformedRow { line, reason: format!("{other:?}") },
    }
}

fn parse_catalog_jsonl<R: Read>(input: R) -> Result<SiteCatalog, CatalogError> {
    let mut catalog = SiteCatalog::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: SiteRow = serde_json::from_str(&line).map_err(|e| CatalogError::MalformedRow {
            line: line_no,
            reason: e.to_string(),
        })?;
        let record = row_to_record(row, line_no)?;
        catalog.push_at_line(record, line_no)?;
    }
    Ok(catalog)
}

pub fn write_catalog<W: Write>(catalog: &SiteCatalog, out: W, format: CatalogFormat) -> Result<(), CatalogError> {
    match format {
        CatalogFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(CSV_HEADER).map_err(|e| csv_error(e, 0))?;
            for r in catalog {
                w.write_record([
                    r.site_id.clone(),
                    r.title.clone(),
                    r.location.lat.to_string(),
                    r.location.lon.to_string(),
                    r.category.clone(),
                    r.pageviews.to_string(),
                ])
                .map_err(|e| csv_error(e, 0))?;
            }
            w.flush()?;
        }
        CatalogFormat::Jsonl => {
            let mut out = out;
            for r in catalog {
                serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

/// Sites whose location lies inside the region's bounding box (closed edges).
pub fn sites_in_region(catalog: &SiteCatalog, region: &Region) -> SiteCatalog {
    catalog.filter(|r| region.contains(r.location))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    Flickr,
    Google,
    Synthetic,
    User,
}

impl ImageSource {
    fn tag(self) -> u8 {
        match self {
            ImageSource::Flickr => 0,
            ImageSource::Google => 1,
            ImageSource::Synthetic => 2,
            ImageSource::User => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ImageSource::Flickr,
            1 => ImageSource::Google,
            2 => ImageSource::Synthetic,
            3 => ImageSource::User,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatureRecord {
    pub image_id: String,
    pub site_id: String,
    pub source: ImageSource,
    #[serde(rename = "probs")]
    pub feature: FeatureDistribution,
}

/// Feature records sharing one dimension; image ids are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    dimension: usize,
    images: Vec<ImageFeatureRecord>,
}

impl FeatureDataset {
    pub fn new(dimension: usize) -> Self {
        Self { dimension, images: Vec::new() }
    }

    pub fn from_images(dimension: usize, images: Vec<ImageFeatureRecord>) -> Result<Self, CatalogError> {
        let mut seen = HashSet::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if img.feature.dimension() != dimension {
                return Err(CatalogError::DimensionMismatch {
                    record: i as u64 + 1,
                    expected: dimension,
                    found: img.feature.dimension(),
                });
            }
            if !seen.insert(img.image_id.as_str()) {
                return Err(CatalogError::DuplicateImageId { image_id: img.image_id.clone() });
            }
        }
        Ok(Self { dimension, images })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn images(&self) -> &[ImageFeatureRecord] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn into_images(self) -> Vec<ImageFeatureRecord> {
        self.images
    }

    /// Distinct site ids in order of first appearance.
    pub fn site_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.images
            .iter()
            .filter(|img| seen.insert(img.site_id.as_str()))
            .map(|img| img.site_id.clone())
            .collect()
    }

    /// Image indices grouped by site, sites in order of first appearance.
    pub fn by_site(&self) -> Vec<(String, Vec<usize>)> {
        let mut slot: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, img) in self.images.iter().enumerate() {
            let g = *slot.entry(img.site_id.as_str()).or_insert_with(|| {
                groups.push((img.site_id.clone(), Vec::new()));
                groups.len() - 1
            });
            groups[g].1.push(i);
        }
        groups
    }

    /// Sub-dataset of the given image indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> FeatureDataset {
        FeatureDataset {
            dimension: self.dimension,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(&ImageFeatureRecord) -> bool) -> FeatureDataset {
        FeatureDataset {
            dimension: self.dimension,
            images: self.images.iter().filter(|img| keep(img)).cloned().collect(),
        }
    }

    pub fn restrict_to_sites(&self, sites: &BTreeSet<String>) -> FeatureDataset {
        self.filter(|img| sites.contains(&img.site_id))
    }

    /// Keeps the first `max` images of each site in stream order.
    pub fn truncate_per_site(&self, max: usize) -> FeatureDataset {
        let mut counts: HashMap<String, usize> = HashMap::new();
        self.filter(|img| {
            let c = counts.entry(img.site_id.clone()).or_insert(0);
            *c += 1;
            *c <= max
        })
    }

    /// Checks every image's site against `catalog`.
    pub fn check_sites(&self, catalog: &SiteCatalog) -> Result<(), CatalogError> {
        match self.images.iter().find(|img| !catalog.contains(&img.site_id)) {
            Some(img) => Err(CatalogError::UnknownSiteId {
                image_id: img.image_id.clone(),
                site_id: img.site_id.clone(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    /// Header line `{"dimension": D}`, then one record object per line.
    Jsonl,
    /// `GFD1`, u32 dimension, u64 count, then per record: u32-length-prefixed
    /// image id and site id, a one-byte source tag and D little-endian f32.
    PackedBinary,
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureParseOptions<'a> {
    pub tolerance: f64,
    /// When present, every image's site must resolve in this catalog.
    pub catalog: Option<&'a SiteCatalog>,
    /// Keep at most this many images per site (first in stream order).
    pub max_images_per_site: Option<usize>,
}

impl Default for FeatureParseOptions<'_> {
    fn default() -> Self {
        Self {
            tolerance: FeatureDistribution::DEFAULT_TOLERANCE,
            catalog: None,
            max_images_per_site: None,
        }
    }
}

#[derive(Deserialize)]
struct JsonlHeader {
    dimension: usize,
}

#[derive(Deserialize)]
struct JsonlImage {
    image_id: String,
    site_id: String,
    source: ImageSource,
    probs: Vec<f64>,
}

/// Incrementally validates records as they stream in.
struct DatasetBuilder<'a> {
    options: FeatureParseOptions<'a>,
    dimension: usize,
    images: Vec<ImageFeatureRecord>,
    seen: HashSet<String>,
    per_site: HashMap<String, usize>,
}

impl<'a> DatasetBuilder<'a> {
    fn new(dimension: usize, options: FeatureParseOptions<'a>) -> Result<Self, CatalogError> {
        if dimension == 0 {
            return Err(CatalogError::BadHeader("dimension must be positive".into()));
        }
        Ok(Self {
            options,
            dimension,
            images: Vec::new(),
            seen: HashSet::new(),
            per_site: HashMap::new(),
        })
    }

    fn push(
        &mut self,
        record: u64,
        image_id: String,
        site_id: String,
        source: ImageSource,
        probs: Vec<f64>,
    ) -> Result<(), CatalogError> {
        if probs.len() != self.dimension {
            return Err(CatalogError::DimensionMismatch {
                record,
                expected: self.dimension,
                found: probs.len(),
            });
        }
        let feature = FeatureDistribution::with_tolerance(probs, self.options.tolerance)
            .map_err(|source| CatalogError::NotNormalized { record, source })?;
        if let Some(catalog) = self.options.catalog {
            if !catalog.contains(&site_id) {
                return Err(CatalogError::UnknownSiteId { image_id, site_id });
            }
        }
        if !self.seen.insert(image_id.clone()) {
            return Err(CatalogError::DuplicateImageId { image_id });
        }
        let count = self.per_site.entry(site_id.clone()).or_insert(0);
        *count += 1;
        if self.options.max_images_per_site.is_some_and(|max| *count > max) {
            return Ok(());
        }
        self.images.push(ImageFeatureRecord {
            image_id,
            site_id,
            source,
            feature,
        });
        Ok(())
    }

    fn finish(self) -> FeatureDataset {
        FeatureDataset {
            dimension: self.dimension,
            images: self.images,
        }
    }
}

pub fn parse_features<R: Read>(
    input: R,
    format: FeatureFormat,
    options: &FeatureParseOptions<'_>,
) -> Result<FeatureDataset, CatalogError> {
    match format {
        FeatureFormat::Jsonl => parse_features_jsonl(input, *options),
        FeatureFormat::PackedBinary => parse_features_packed(input, *options),
    }
}

fn parse_features_jsonl<R: Read>(input: R, options: FeatureParseOptions<'_>) -> Result<FeatureDataset, CatalogError> {
    let mut lines = BufReader::new(input).lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(CatalogError::BadHeader("missing {\"dimension\": D} header line".into())),
            Some((_, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let header: JsonlHeader =
        serde_json::from_str(&header).map_err(|e| CatalogError::BadHeader(format!("feature header: {e}")))?;
    let mut builder = DatasetBuilder::new(header.dimension, options)?;
    for (i, line) in lines {
        let line_no = i as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlImage = serde_json::from_str(&line).map_err(|e| CatalogError::MalformedRow {
            line: line_no,
            reason: e.to_string(),
        })?;
        builder.push(line_no, rec.image_id, rec.site_id, rec.source, rec.probs)?;
    }
    Ok(builder.finish())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], CatalogError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_id<R: Read>(r: &mut R, record: u64) -> Result<String, CatalogError> {
    let len = u32::from_le_bytes(read_array(r)?) as usize;
    if len > MAX_ID_LEN {
        return Err(CatalogError::MalformedRow {
            line: record,
            reason: format!("id length {len} exceeds {MAX_ID_LEN}"),
        });
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CatalogError::MalformedRow {
        line: record,
        reason: format!("id is not UTF-8: {e}"),
    })
}

fn parse_features_packed<R: Read>(input: R, options: FeatureParseOptions<'_>) -> Result<FeatureDataset, CatalogError> {
    let mut r = BufReader::new(input);
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != FEATURE_MAGIC {
        return Err(CatalogError::BadHeader(format!("bad magic {magic:?}")));
    }
    let dimension = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let count = u64::from_le_bytes(read_array(&mut r)?);
    let mut builder = DatasetBuilder::new(dimension, options)?;
    let mut raw = vec![0u8; dimension * 4];
    for record in 1..=count {
        let image_id = read_id(&mut r, record)?;
        let site_id = read_id(&mut r, record)?;
        let [tag] = read_array::<1, _>(&mut r)?;
        let source = ImageSource::from_tag(tag).ok_or_else(|| CatalogError::MalformedRow {
            line: record,
            reason: format!("unknown source tag {tag}"),
        })?;
        r.read_exact(&mut raw)?;
        let probs = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        builder.push(record, image_id, site_id, source, probs)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CatalogError::MalformedRow {
            line: count + 1,
            reason: "trailing bytes after declared record count".into(),
        });
    }
    Ok(builder.finish())
}

/// Writes a dataset. The packed format stores 32-bit floats, so values not
/// exactly representable in f32 are rounded.
pub fn write_features<W: Write>(dataset: &FeatureDataset, out: W, format: FeatureFormat) -> Result<(), CatalogError> {
    let mut out = std::io::BufWriter::new(out);
    match format {
        FeatureFormat::Jsonl => {
            serde_json::to_writer(&mut out, &serde_json::json!({ "dimension": dataset.dimension }))
                .map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
            for img in &dataset.images {
                serde_json::to_writer(&mut out, img).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
        }
        FeatureFormat::PackedBinary => {
            out.write_all(FEATURE_MAGIC)?;
            out.write_all(&(dataset.dimension as u32).to_le_bytes())?;
            out.write_all(&(dataset.images.len() as u64).to_le_bytes())?;
            for img in &dataset.images {
                for id in [&img.image_id, &img.site_id] {
                    out.write_all(&(id.len() as u32).to_le_bytes())?;
                    out.write_all(id.as_bytes())?;
                }
                out.write_all(&[img.source.tag()])?;
                for &p in img.feature.probs() {
                    out.write_all(&(p as f32).to_le_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}
