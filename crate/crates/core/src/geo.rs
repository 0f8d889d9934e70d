//! Spherical geodesy and overlapping square tilings.
//!
//! The Earth is a sphere of radius [`EARTH_RADIUS_M`]. Distances and bearings
//! are great-circle quantities; meter/degree conversions for tiling use a local
//! equirectangular approximation, which stays well under 0.1% error across a
//! few kilometers.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Slack (in degrees, roughly 0.1 mm) applied to closed bounding-box edges so
/// that grid edges computed in floating point never leave a boundary point
/// unclaimed.
const EDGE_EPS_DEG: f64 = 1e-9;

/// Distances below this are treated as coincident points.
const COINCIDENT_M: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    CoordinateOutOfRange { lat: f64, lon: f64 },
    #[error("bearing is undefined between coincident points")]
    UndefinedBearing,
    #[error("invalid tiling parameters: {0}")]
    InvalidTilingParams(String),
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("invalid bounding box: {0}")]
    InvalidBoundingBox(String),
    #[error("point ({lat}, {lon}) is outside the tiled area")]
    OutOfCoverage { lat: f64, lon: f64 },
}

/// A WGS84-style latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint")]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = GeoError;
    fn try_from(raw: RawPoint) -> Result<Self, Self::Error> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::CoordinateOutOfRange { lat, lon });
        }
        Ok(Self { lat, lon })
    }

    /// Moves the point by local east/north offsets in meters.
    pub fn offset_m(&self, east_m: f64, north_m: f64) -> GeoPoint {
        let lat = self.lat + north_m / meters_per_deg_lat();
        let lon = self.lon + east_m / meters_per_deg_lon(self.lat);
        GeoPoint {
            lat: lat.clamp(-90.0, 90.0),
            lon: wrap_lon(lon),
        }
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.lat, self.lon)
    }
}

fn wrap_lon(lon: f64) -> f64 {
    if (-180.0..=180.0).contains(&lon) {
        lon
    } else {
        (lon + 180.0).rem_euclid(360.0) - 180.0
    }
}

pub fn meters_per_deg_lat() -> f64 {
    EARTH_RADIUS_M * std::f64::consts::PI / 180.0
}

pub fn meters_per_deg_lon(lat: f64) -> f64 {
    meters_per_deg_lat() * lat.to_radians().cos()
}

/// Great-circle distance in meters.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_M * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Initial great-circle bearing from `from` to `to`, degrees clockwise from
/// north in `[0, 360)`.
pub fn initial_bearing(from: GeoPoint, to: GeoPoint) -> Result<f64, GeoError> {
    if haversine_distance(from, to) < COINCIDENT_M {
        return Err(GeoError::UndefinedBearing);
    }
    let phi1 = from.lat.to_radians();
    let phi2 = to.lat.to_radians();
    let dlambda = (to.lon - from.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    Ok(normalize_bearing(y.atan2(x).to_degrees()))
}

/// Maps any angle in degrees into `[0, 360)`.
pub fn normalize_bearing(deg: f64) -> f64 {
    let b = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if b >= 360.0 {
        0.0
    } else {
        b
    }
}

/// Minimal absolute circular difference between two bearings, in `[0, 180]`.
pub fn angular_difference(b1: f64, b2: f64) -> f64 {
    let d = (b1 - b2).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Point reached by travelling `distance_m` along a great circle with the
/// given initial bearing.
pub fn destination_point(origin: GeoPoint, bearing_deg: f64, distance_m: f64) -> GeoPoint {
    let delta = distance_m / EARTH_RADIUS_M;
    let theta = bearing_deg.to_radians();
    let phi1 = origin.lat.to_radians();
    let lambda1 = origin.lon.to_radians();
    let phi2 = (phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos()).asin();
    let lambda2 = lambda1
        + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * phi2.sin());
    GeoPoint {
        lat: phi2.to_degrees().clamp(-90.0, 90.0),
        lon: wrap_lon(lambda2.to_degrees()),
    }
}

/// Axis-aligned latitude/longitude bounds with closed edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self, GeoError> {
        GeoPoint::new(min_lat, min_lon)?;
        GeoPoint::new(max_lat, max_lon)?;
        if min_lat > max_lat || min_lon > max_lon {
            return Err(GeoError::InvalidBoundingBox(format!(
                "min corner ({min_lat}, {min_lon}) exceeds max corner ({max_lat}, {max_lon})"
            )));
        }
        Ok(Self {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        })
    }

    /// Square box of the given half-width around `center`, using the
    /// equirectangular approximation at the center latitude.
    pub fn around(center: GeoPoint, half_extent_m: f64) -> Self {
        let dlat = half_extent_m / meters_per_deg_lat();
        let dlon = half_extent_m / meters_per_deg_lon(center.lat);
        Self {
            min_lat: center.lat - dlat,
            min_lon: center.lon - dlon,
            max_lat: center.lat + dlat,
            max_lon: center.lon + dlon,
        }
    }

    /// Box spanning `width_m` east-west and `height_m` north-south with its
    /// south-west corner at `origin`.
    pub fn from_corner(origin: GeoPoint, width_m: f64, height_m: f64) -> Result<Self, GeoError> {
        let ne = origin.offset_m(width_m, height_m);
        Self::new(origin.lat, origin.lon, ne.lat, ne.lon)
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lat >= self.min_lat - EDGE_EPS_DEG
            && p.lat <= self.max_lat + EDGE_EPS_DEG
            && p.lon >= self.min_lon - EDGE_EPS_DEG
            && p.lon <= self.max_lon + EDGE_EPS_DEG
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: 0.5 * (self.min_lat + self.max_lat),
            lon: 0.5 * (self.min_lon + self.max_lon),
        }
    }

    pub fn mean_lat(&self) -> f64 {
        0.5 * (self.min_lat + self.max_lat)
    }

    /// East-west extent in meters at the mean latitude.
    pub fn width_m(&self) -> f64 {
        (self.max_lon - self.min_lon) * meters_per_deg_lon(self.mean_lat())
    }

    /// North-south extent in meters.
    pub fn height_m(&self) -> f64 {
        (self.max_lat - self.min_lat) * meters_per_deg_lat()
    }
}

/// A square geographic tile; the unit of model training and distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub region_id: String,
    pub center: GeoPoint,
    pub half_extent_m: f64,
    pub bbox: BoundingBox,
}

impl Region {
    pub fn new(region_id: impl Into<String>, center: GeoPoint, half_extent_m: f64) -> Result<Self, GeoError> {
        let region_id = region_id.into();
        if !(half_extent_m > 0.0 && half_extent_m.is_finite()) {
            return Err(GeoError::InvalidRegion(format!(
                "{region_id}: half extent must be positive, got {half_extent_m}"
            )));
        }
        if region_id.is_empty() {
            return Err(GeoError::InvalidRegion("empty region id".into()));
        }
        Ok(Self {
            bbox: BoundingBox::around(center, half_extent_m),
            region_id,
            center,
            half_extent_m,
        })
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        self.bbox.contains(p)
    }
}

/// Grid of overlapping square regions covering an area.
#[derive(Debug, Clone, PartialEq)]
pub struct Tiling {
    regions: Vec<Region>,
    overlap_m: f64,
}

#[derive(Serialize, Deserialize)]
struct RegionJson {
    region_id: String,
    center_lat: f64,
    center_lon: f64,
    half_extent_m: f64,
}

#[derive(Serialize, Deserialize)]
struct TilingJson {
    overlap_m: f64,
    regions: Vec<RegionJson>,
}

impl Serialize for Tiling {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        TilingJson {
            overlap_m: self.overlap_m,
            regions: self
                .regions
                .iter()
                .map(|r| RegionJson {
                    region_id: r.region_id.clone(),
                    center_lat: r.center.lat,
                    center_lon: r.center.lon,
                    half_extent_m: r.half_extent_m,
                })
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Tiling {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = TilingJson::deserialize(deserializer)?;
        let regions = raw
            .regions
            .into_iter()
            .map(|r| {
                let center = GeoPoint::new(r.center_lat, r.center_lon)?;
                Region::new(r.region_id, center, r.half_extent_m)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(serde::de::Error::custom)?;
        Tiling::from_regions(regions, raw.overlap_m).map_err(serde::de::Error::custom)
    }
}

/// Number of tiles of `size` with the given stride needed to span `extent`.
fn tiles_needed(extent: f64, size: f64, stride: f64) -> usize {
    if extent <= size {
        1
    } else {
        // the epsilon absorbs round-off when the extent is an exact multiple
        ((extent - size) / stride - 1e-9).ceil().max(0.0) as usize + 1
    }
}

/// Tile centers along one axis, centering the grid span on the extent.
fn axis_centers(min: f64, extent: f64, size: f64, stride: f64) -> Vec<f64> {
    let n = tiles_needed(extent, size, stride);
    let span = (n - 1) as f64 * stride + size;
    let start = min + 0.5 * (extent - span) + 0.5 * size;
    (0..n).map(|i| start + i as f64 * stride).collect()
}

/// Splits `bbox` into square regions of side `region_size_m` whose neighbours
/// overlap by `overlap_m` along each axis.
///
/// Rows are laid out in meters of latitude; each row computes its own
/// longitude stride at its center latitude so that every region's bounding box
/// (derived from its own center) tiles the row without gaps. Region ids are
/// `r{row}_c{col}`, zero-padded, south-to-north and west-to-east.
pub fn tile_area(bbox: &BoundingBox, region_size_m: f64, overlap_m: f64) -> Result<Tiling, GeoError> {
    if !(region_size_m.is_finite() && overlap_m.is_finite()) || overlap_m < 0.0 || region_size_m <= overlap_m {
        return Err(GeoError::InvalidTilingParams(format!(
            "need region_size_m > overlap_m >= 0, got size {region_size_m}, overlap {overlap_m}"
        )));
    }
    let stride_m = region_size_m - overlap_m;
    let half = 0.5 * region_size_m;

    let lat_scale = meters_per_deg_lat();
    let row_centers = axis_centers(
        bbox.min_lat,
        bbox.max_lat - bbox.min_lat,
        region_size_m / lat_scale,
        stride_m / lat_scale,
    );

    let mut regions = Vec::new();
    for (row, &lat) in row_centers.iter().enumerate() {
        let lon_scale = meters_per_deg_lon(lat);
        let col_centers = axis_centers(
            bbox.min_lon,
            bbox.max_lon - bbox.min_lon,
            region_size_m / lon_scale,
            stride_m / lon_scale,
        );
        for (col, &lon) in col_centers.iter().enumerate() {
            let center = GeoPoint::new(lat.clamp(-90.0, 90.0), wrap_lon(lon))?;
            regions.push(Region::new(format!("r{row:03}_c{col:03}"), center, half)?);
        }
    }
    Tiling::from_regions(regions, overlap_m)
}

impl Tiling {
    pub fn from_regions(regions: Vec<Region>, overlap_m: f64) -> Result<Self, GeoError> {
        let mut ids: Vec<&str> = regions.iter().map(|r| r.region_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(GeoError::InvalidTilingParams(format!("duplicate region id {}", w[0])));
        }
        if regions.is_empty() {
            return Err(GeoError::InvalidTilingParams("tiling has no regions".into()));
        }
        Ok(Self { regions, overlap_m })
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn overlap_m(&self) -> f64 {
        self.overlap_m
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn get(&self, region_id: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.region_id == region_id)
    }

    /// Resolves the region serving `p`.
    ///
    /// A `current` region that still contains `p` is kept (hysteresis).
    /// Otherwise the containing region with the nearest center wins, ties
    /// broken by the lexicographically smallest id.
    pub fn region_for_point(&self, p: GeoPoint, current: Option<&str>) -> Result<&Region, GeoError> {
        if let Some(region) = current.and_then(|id| self.get(id)) {
            if region.contains(p) {
                return Ok(region);
            }
        }
        self.regions
            .iter()
            .filter(|r| r.contains(p))
            .map(|r| (haversine_distance(p, r.center), r))
            .min_by(|(da, ra), (db, rb)| {
                da.partial_cmp(db)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| ra.region_id.cmp(&rb.region_id))
            })
            .map(|(_, r)| r)
            .ok_or(GeoError::OutOfCoverage { lat: p.lat, lon: p.lon })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tiling serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    // Textbook haversine written independently of the implementation above
    // (asin form, explicit radians conversion).
    fn oracle_haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
        let rad = std::f64::consts::PI / 180.0;
        let (la1, lo1, la2, lo2) = (a.0 * rad, a.1 * rad, b.0 * rad, b.1 * rad);
        let s = ((la2 - la1) / 2.0).sin().powi(2) + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
        2.0 * 6_371_000.0 * s.sqrt().asin()
    }

    #[test]
    fn haversine_identity_and_antipodes() {
        let p = pt(40.7359, -73.9911);
        assert_eq!(haversine_distance(p, p), 0.0);
        let d = haversine_distance(pt(0.0, 0.0), pt(0.0, 180.0));
        assert!((d - std::f64::consts::PI * EARTH_RADIUS_M).abs() < 1e-6);
        assert!((d - 20_015_086.796).abs() < 1.0);
    }

    #[test]
    fn haversine_matches_independent_oracle_in_manhattan() {
        let a = pt(40.7359, -73.9911);
        let b = pt(40.7484, -73.9857);
        let expected = oracle_haversine((40.7359, -73.9911), (40.7484, -73.9857));
        let got = haversine_distance(a, b);
        assert!(((got - expected) / expected).abs() < 0.005);
        // roughly 1.45 km between Union Square and the Empire State Building
        assert!((1400.0..1500.0).contains(&got), "{got}");
    }

    #[test]
    fn bearing_axis_cases() {
        assert!((initial_bearing(pt(0.0, 0.0), pt(1.0, 0.0)).unwrap() - 0.0).abs() < 1e-12);
        assert!((initial_bearing(pt(0.0, 0.0), pt(0.0, 1.0)).unwrap() - 90.0).abs() < 1e-12);
        assert!((initial_bearing(pt(0.0, 0.0), pt(-1.0, 0.0)).unwrap() - 180.0).abs() < 1e-12);
        assert!((initial_bearing(pt(0.0, 0.0), pt(0.0, -1.0)).unwrap() - 270.0).abs() < 1e-12);
        assert_eq!(initial_bearing(pt(10.0, 10.0), pt(10.0, 10.0)), Err(GeoError::UndefinedBearing));
    }

    #[test]
    fn bearing_matches_spherical_trig_oracle() {
        // Oracle: bearing from the spherical law of cosines applied to the
        // polar triangle, resolved into a quadrant by the longitude sign.
        fn oracle(a: (f64, f64), b: (f64, f64)) -> f64 {
            let r = std::f64::consts::PI / 180.0;
            let (la1, la2) = (a.0 * r, b.0 * r);
            let dlon = (b.1 - a.1) * r;
            let c = (la1.sin() * la2.sin() + la1.cos() * la2.cos() * dlon.cos()).acos();
            let cos_az = (la2.sin() - la1.sin() * c.cos()) / (la1.cos() * c.sin());
            let az = cos_az.clamp(-1.0, 1.0).acos() / r;
            if dlon.sin() >= 0.0 {
                az
            } else {
                360.0 - az
            }
        }
        let cases = [
            ((40.7359, -73.9911), (40.7484, -73.9857)),
            ((51.5, -0.12), (48.85, 2.35)),
            ((-33.9, 18.4), (-34.6, -58.4)),
            ((35.0, 139.0), (37.5, 127.0)),
        ];
        for (a, b) in cases {
            let got = initial_bearing(pt(a.0, a.1), pt(b.0, b.1)).unwrap();
            let want = oracle(a, b);
            assert!(angular_difference(got, want) < 0.1, "{a:?}->{b:?}: {got} vs {want}");
        }
    }

    #[test]
    fn angular_difference_examples() {
        assert_eq!(angular_difference(0.0, 0.0), 0.0);
        assert_eq!(angular_difference(350.0, 10.0), 20.0);
        assert_eq!(angular_difference(90.0, 270.0), 180.0);
        assert_eq!(angular_difference(-30.0, 30.0), 60.0);
    }

    #[test]
    fn destination_roundtrips_distance_and_bearing() {
        let origin = pt(40.74, -73.99);
        let dest = destination_point(origin, 37.0, 150.0);
        assert!((haversine_distance(origin, dest) - 150.0).abs() < 1e-6);
        assert!((initial_bearing(origin, dest).unwrap() - 37.0).abs() < 1e-6);
    }

    #[test]
    fn single_region_for_exact_width() {
        let origin = pt(40.70, -74.0);
        let bbox = BoundingBox::from_corner(origin, 1000.0, 1000.0).unwrap();
        let tiling = tile_area(&bbox, 1000.0, 200.0).unwrap();
        assert_eq!(tiling.len(), 1);
    }

    #[test]
    fn point_bbox_yields_one_containing_region() {
        let p = pt(40.71, -74.01);
        let bbox = BoundingBox::new(p.lat, p.lon, p.lat, p.lon).unwrap();
        let tiling = tile_area(&bbox, 1000.0, 200.0).unwrap();
        assert_eq!(tiling.len(), 1);
        assert!(tiling.regions()[0].contains(p));
        assert!(haversine_distance(tiling.regions()[0].center, p) < 1e-6);
    }

    /// Brute-force coverage oracle: every point of a 10 m lattice over the
    /// bbox (edges included) lies in some region.
    fn assert_lattice_covered(bbox: &BoundingBox, tiling: &Tiling) {
        let origin = pt(bbox.min_lat, bbox.min_lon);
        let w = bbox.width_m();
        let h = bbox.height_m();
        let nx = (w / 10.0).round() as usize;
        let ny = (h / 10.0).round() as usize;
        for iy in 0..=ny {
            for ix in 0..=nx {
                let lat = (bbox.min_lat + (bbox.max_lat - bbox.min_lat) * iy as f64 / ny.max(1) as f64).min(bbox.max_lat);
                let lon = (bbox.min_lon + (bbox.max_lon - bbox.min_lon) * ix as f64 / nx.max(1) as f64).min(bbox.max_lon);
                let p = GeoPoint { lat, lon };
                assert!(
                    tiling.regions().iter().any(|r| r.contains(p)),
                    "uncovered lattice point {p} (origin {origin})"
                );
                tiling.region_for_point(p, None).unwrap();
            }
        }
    }

    #[test]
    fn two_km_strip_needs_three_columns() {
        let bbox = BoundingBox::from_corner(pt(40.70, -74.0), 2000.0, 1000.0).unwrap();
        let tiling = tile_area(&bbox, 1000.0, 200.0).unwrap();
        assert_eq!(tiling.len(), 3);
        assert_lattice_covered(&bbox, &tiling);
        // two columns at stride 800 span only 1800 m and leave the east edge uncovered
        let origin = pt(40.70, -74.0);
        let two_cols = Tiling::from_regions(
            [0.0, 800.0]
                .iter()
                .enumerate()
                .map(|(i, x)| Region::new(format!("t{i}"), origin.offset_m(500.0 + x, 500.0), 500.0).unwrap())
                .collect(),
            200.0,
        )
        .unwrap();
        let east_edge = GeoPoint { lat: bbox.center().lat, lon: bbox.max_lon };
        assert!(two_cols.region_for_point(east_edge, None).is_err());
        // overlap between neighbours is 200 m along the row
        let r = tiling.regions();
        let overlap_deg = r[0].bbox.max_lon - r[1].bbox.min_lon;
        assert!((overlap_deg * meters_per_deg_lon(r[0].center.lat) - 200.0).abs() < 1e-6);
    }

    #[test]
    fn lattice_coverage_on_larger_grid() {
        let bbox = BoundingBox::from_corner(pt(40.72, -74.01), 3100.0, 2300.0).unwrap();
        let tiling = tile_area(&bbox, 1000.0, 200.0).unwrap();
        assert_lattice_covered(&bbox, &tiling);
    }

    #[test]
    fn invalid_tiling_params_rejected() {
        let bbox = BoundingBox::from_corner(pt(40.70, -74.0), 1000.0, 1000.0).unwrap();
        assert!(matches!(tile_area(&bbox, 200.0, 200.0), Err(GeoError::InvalidTilingParams(_))));
        assert!(matches!(tile_area(&bbox, 1000.0, -1.0), Err(GeoError::InvalidTilingParams(_))));
    }

    #[test]
    fn region_lookup_center_hysteresis_and_nearest() {
        let bbox = BoundingBox::from_corner(pt(40.70, -74.0), 1800.0, 1000.0).unwrap();
        let tiling = tile_area(&bbox, 1000.0, 200.0).unwrap();
        assert_eq!(tiling.len(), 2);
        let (a, b) = (&tiling.regions()[0], &tiling.regions()[1]);
        assert_eq!(tiling.region_for_point(a.center, None).unwrap().region_id, a.region_id);

        // a point in the overlap strip, closer to b's center
        let strip = GeoPoint {
            lat: a.center.lat,
            lon: b.bbox.min_lon + 0.75 * (a.bbox.max_lon - b.bbox.min_lon),
        };
        assert!(a.contains(strip) && b.contains(strip));
        assert_eq!(tiling.region_for_point(strip, Some(&a.region_id)).unwrap().region_id, a.region_id);

        // brute-force nearest-center oracle
        let nearest = tiling
            .regions()
            .iter()
            .min_by(|x, y| {
                haversine_distance(strip, x.center)
                    .partial_cmp(&haversine_distance(strip, y.center))
                    .unwrap()
            })
            .unwrap();
        assert_eq!(tiling.region_for_point(strip, None).unwrap().region_id, nearest.region_id);
        assert_eq!(nearest.region_id, b.region_id);

        let outside = pt(41.5, -74.0);
        assert!(matches!(tiling.region_for_point(outside, None), Err(GeoError::OutOfCoverage { .. })));
    }

    #[test]
    fn equidistant_tie_breaks_by_region_id() {
        let bbox = BoundingBox::from_corner(pt(40.70, -74.0), 1800.0, 1000.0).unwrap();
        let tiling = tile_area(&bbox, 1000.0, 200.0).unwrap();
        let (a, b) = (&tiling.regions()[0], &tiling.regions()[1]);
        let mid = GeoPoint {
            lat: a.center.lat,
            lon: 0.5 * (a.center.lon + b.center.lon),
        };
        assert_eq!(tiling.region_for_point(mid, None).unwrap().region_id, "r000_c000");
    }

    #[test]
    fn tiling_json_roundtrip() {
        let bbox = BoundingBox::from_corner(pt(40.70, -74.0), 2500.0, 1700.0).unwrap();
        let tiling = tile_area(&bbox, 1000.0, 200.0).unwrap();
        let back = Tiling::from_json(&tiling.to_json()).unwrap();
        assert_eq!(back, tiling);
        let v: serde_json::Value = serde_json::from_str(&tiling.to_json()).unwrap();
        assert_eq!(v["overlap_m"], 200.0);
        assert!(v["regions"][0]["half_extent_m"].is_number());
    }

    #[test]
    fn walk_never_switches_while_inside_current() {
        let bbox = BoundingBox::from_corner(pt(40.70, -74.0), 3000.0, 3000.0).unwrap();
        let tiling = tile_area(&bbox, 1000.0, 200.0).unwrap();
        let mut current: Option<String> = None;
        let mut p = pt(40.70 + 0.0001, -74.0 + 0.0001);
        for step in 0..600 {
            let heading = 45.0 + 30.0 * ((step as f64) / 40.0).sin();
            let next = destination_point(p, heading, 5.0);
            if !bbox.contains(next) {
                break;
            }
            p = next;
            let resolved = tiling.region_for_point(p, current.as_deref()).unwrap();
            if let Some(cur) = &current {
                if tiling.get(cur).unwrap().contains(p) {
                    assert_eq!(&resolved.region_id, cur);
                }
            }
            assert!(resolved.contains(p));
            current = Some(resolved.region_id.clone());
        }
    }

    proptest! {
        #[test]
        fn haversine_symmetric_and_triangle(
            a in (-80.0f64..80.0, -179.0f64..179.0),
            b in (-80.0f64..80.0, -179.0f64..179.0),
            c in (-80.0f64..80.0, -179.0f64..179.0),
        ) {
            let (a, b, c) = (pt(a.0, a.1), pt(b.0, b.1), pt(c.0, c.1));
            let ab = haversine_distance(a, b);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - haversine_distance(b, a)).abs() <= 1e-9 * ab.max(1.0));
            let ac = haversine_distance(a, c);
            let cb = haversine_distance(c, b);
            prop_assert!(ab <= (ac + cb) * (1.0 + 1e-6) + 1e-6);
        }

        #[test]
        fn angular_difference_symmetric_and_bounded(b1 in -1000.0f64..1000.0, b2 in -1000.0f64..1000.0) {
            let d = angular_difference(b1, b2);
            prop_assert!((0.0..=180.0).contains(&d));
            prop_assert!((d - angular_difference(b2, b1)).abs() < 1e-9);
        }
    }
}
