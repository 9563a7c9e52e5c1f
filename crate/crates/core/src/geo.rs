//! Geodesic primitives shared by every stage: spherical distance, the
//! flat-top hexagonal grid, station buffers and polygon zone lookup.

use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used for all distances.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Points farther than this from the grid origin are rejected by the
/// projection.
pub const GRID_DOMAIN_M: f64 = 100_000.0;

/// A WGS84 position in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidInput(format!("lat {lat} out of range")));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidInput(format!("lon {lon} out of range")));
        }
        Ok(Self { lat, lon })
    }

    /// Caller guarantees bounds, e.g. a mean of valid points.
    pub(crate) fn new_unchecked(lat: f64, lon: f64) -> Self {
        debug_assert!(lat.is_finite() && lon.is_finite());
        Self { lat, lon }
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Point reached by travelling `distance_m` along the great circle
    /// with initial bearing `bearing_deg` (clockwise from north).
    pub fn destination(&self, bearing_deg: f64, distance_m: f64) -> GeoPoint {
        let delta = distance_m / EARTH_RADIUS_M;
        let theta = bearing_deg.to_radians();
        let (phi1, lambda1) = (self.lat.to_radians(), self.lon.to_radians());
        let sin_phi2 = phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos();
        let phi2 = sin_phi2.clamp(-1.0, 1.0).asin();
        let lambda2 = lambda1
            + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * sin_phi2);
        let mut lon = lambda2.to_degrees();
        if lon > 180.0 {
            lon -= 360.0;
        } else if lon < -180.0 {
            lon += 360.0;
        }
        GeoPoint::new_unchecked(phi2.to_degrees(), lon)
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.7}, {:.7})", self.lat, self.lon)
    }
}

/// Great-circle (haversine) distance in meters.
#[inline]
pub fn geodesic_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let s1 = (dphi * 0.5).sin();
    let s2 = (dlambda * 0.5).sin();
    let h = s1 * s1 + phi1.cos() * phi2.cos() * s2 * s2;
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial bearing from `a` to `b`, degrees clockwise from north.
fn bearing(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    y.atan2(x).to_degrees()
}

// ---------------------------------------------------------------------------
// Hexagonal grid
// ---------------------------------------------------------------------------

/// Axial coordinates of a flat-top hexagon relative to the grid origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HexId {
    pub q: i32,
    pub r: i32,
}

impl fmt::Display for HexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.q, self.r)
    }
}

impl FromStr for HexId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("bad hex id {s:?}"));
        let (q, r) = s.split_once('_').ok_or_else(bad)?;
        Ok(HexId {
            q: q.parse().map_err(|_| bad())?,
            r: r.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for HexId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HexId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HexCell {
    pub id: HexId,
    pub center: GeoPoint,
    pub side_m: f64,
}

/// Flat-top hexagon layout in an azimuthal-equidistant projection centred
/// on `origin`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub origin: GeoPoint,
    pub side_m: f64,
}

impl GridSpec {
    pub fn new(origin: GeoPoint, side_m: f64) -> Result<Self> {
        if !(side_m.is_finite() && side_m > 0.0) {
            return Err(Error::Config(format!("grid side_m must be > 0, got {side_m}")));
        }
        Ok(Self { origin, side_m })
    }

    /// Projected (east, north) meters of `p`.
    pub fn project(&self, p: GeoPoint) -> Result<(f64, f64)> {
        let rho = geodesic_distance(self.origin, p);
        if rho > GRID_DOMAIN_M {
            return Err(Error::OutOfDomain(format!(
                "{p} is {rho:.0} m from grid origin (limit {GRID_DOMAIN_M} m)"
            )));
        }
        if rho == 0.0 {
            return Ok((0.0, 0.0));
        }
        let theta = bearing(self.origin, p).to_radians();
        Ok((rho * theta.sin(), rho * theta.cos()))
    }

    pub fn unproject(&self, x: f64, y: f64) -> GeoPoint {
        let rho = x.hypot(y);
        if rho == 0.0 {
            return self.origin;
        }
        self.origin.destination(x.atan2(y).to_degrees(), rho)
    }

    /// Projected center of the cell with axial coordinates `id`.
    pub fn center_xy(&self, id: HexId) -> (f64, f64) {
        let s = self.side_m;
        let q = id.q as f64;
        let r = id.r as f64;
        (s * 1.5 * q, s * 3f64.sqrt() * (r + q * 0.5))
    }

    pub fn cell(&self, id: HexId) -> HexCell {
        let (x, y) = self.center_xy(id);
        HexCell {
            id,
            center: self.unproject(x, y),
            side_m: self.side_m,
        }
    }

    /// Cell containing projected coordinates.
    pub fn id_at_xy(&self, x: f64, y: f64) -> HexId {
        let s = self.side_m;
        let qf = (2.0 / 3.0 * x) / s;
        let rf = (-x / 3.0 + 3f64.sqrt() / 3.0 * y) / s;
        cube_round(qf, rf)
    }

    pub fn hex_assign(&self, p: GeoPoint) -> Result<HexCell> {
        let (x, y) = self.project(p)?;
        Ok(self.cell(self.id_at_xy(x, y)))
    }

    pub fn hex_id(&self, p: GeoPoint) -> Result<HexId> {
        let (x, y) = self.project(p)?;
        Ok(self.id_at_xy(x, y))
    }
}

fn cube_round(qf: f64, rf: f64) -> HexId {
    let sf = -qf - rf;
    let mut q = qf.round();
    let mut r = rf.round();
    let s = sf.round();
    let dq = (q - qf).abs();
    let dr = (r - rf).abs();
    let ds = (s - sf).abs();
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    HexId {
        q: q as i32,
        r: r as i32,
    }
}

// ---------------------------------------------------------------------------
// Stations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Line {
    Treatment,
    Control,
}

impl fmt::Display for Line {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Line::Treatment => "treatment",
            Line::Control => "control",
        })
    }
}

impl FromStr for Line {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "treatment" => Ok(Line::Treatment),
            "control" => Ok(Line::Control),
            other => Err(Error::InvalidInput(format!("unknown line {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Station {
    pub station_id: String,
    pub location: GeoPoint,
    pub line: Line,
    pub buffer_m: f64,
}

impl Station {
    pub fn new(station_id: impl Into<String>, location: GeoPoint, line: Line, buffer_m: f64) -> Result<Self> {
        if !(buffer_m.is_finite() && buffer_m > 0.0) {
            return Err(Error::InvalidInput(format!("station buffer_m must be > 0, got {buffer_m}")));
        }
        Ok(Self {
            station_id: station_id.into(),
            location,
            line,
            buffer_m,
        })
    }
}

/// Nearest station whose closed buffer contains `p`; ties go to the smaller
/// `station_id`.
pub fn in_buffer(p: GeoPoint, stations: &[Station]) -> Option<&Station> {
    let mut best: Option<(f64, &Station)> = None;
    for s in stations {
        let d = geodesic_distance(p, s.location);
        if d > s.buffer_m {
            continue;
        }
        best = match best {
            None => Some((d, s)),
            Some((bd, bs)) => {
                if d < bd || (d == bd && s.station_id < bs.station_id) {
                    Some((d, s))
                } else {
                    Some((bd, bs))
                }
            }
        };
    }
    best.map(|(_, s)| s)
}

/// Nearest station regardless of buffers; ties go to the smaller id.
pub fn nearest_station(p: GeoPoint, stations: &[Station]) -> Option<&Station> {
    stations
        .iter()
        .map(|s| (geodesic_distance(p, s.location), s))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.station_id.cmp(&b.1.station_id)))
        .map(|(_, s)| s)
}

/// Reads `station_id,lat,lon,line,buffer_m`. An empty `buffer_m` takes
/// `default_buffer_m`.
pub fn read_stations<R: Read>(reader: R, default_buffer_m: f64) -> Result<Vec<Station>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("stations file missing column {name:?}")))
    };
    let (ci, cla, clo, cli, cb) = (col("station_id")?, col("lat")?, col("lon")?, col("line")?, col("buffer_m").ok());
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("stations row {}: bad number {:?}", row + 1, field(i))))
        };
        let buffer = match cb.map(field) {
            Some(s) if !s.is_empty() => num(cb.unwrap())?,
            _ => default_buffer_m,
        };
        out.push(Station::new(field(ci), GeoPoint::new(num(cla)?, num(clo)?)?, field(cli).parse()?, buffer)?);
    }
    let mut ids: Vec<&str> = out.iter().map(|s| s.station_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput("duplicate station_id".into()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Polygons and zones
// ---------------------------------------------------------------------------

/// A polygon given as one or more closed rings (outer plus optional
/// holes). Containment uses the even-odd rule over all rings, in the
/// lon/lat plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    rings: Vec<Vec<GeoPoint>>,
    bbox: [f64; 4],
}

impl Polygon {
    pub fn new(rings: Vec<Vec<GeoPoint>>) -> Result<Self> {
        if rings.is_empty() {
            return Err(Error::InvalidInput("polygon has no rings".into()));
        }
        let mut closed = Vec::with_capacity(rings.len());
        for mut ring in rings {
            if ring.first() != ring.last() {
                if let Some(&first) = ring.first() {
                    ring.push(first);
                }
            }
            if ring.len() < 4 {
                return Err(Error::InvalidInput("polygon ring needs at least 3 distinct vertices".into()));
            }
            if ring_self_intersects(&ring) {
                return Err(Error::InvalidInput("polygon ring is self-intersecting".into()));
            }
            closed.push(ring);
        }
        let mut bbox = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in closed.iter().flatten() {
            bbox[0] = bbox[0].min(p.lon);
            bbox[1] = bbox[1].min(p.lat);
            bbox[2] = bbox[2].max(p.lon);
            bbox[3] = bbox[3].max(p.lat);
        }
        Ok(Self { rings: closed, bbox })
    }

    pub fn rings(&self) -> &[Vec<GeoPoint>] {
        &self.rings
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        let (x, y) = (p.lon, p.lat);
        if x < self.bbox[0] || x > self.bbox[2] || y < self.bbox[1] || y > self.bbox[3] {
            return false;
        }
        let mut inside = false;
        for ring in &self.rings {
            for w in ring.windows(2) {
                let (xi, yi) = (w[0].lon, w[0].lat);
                let (xj, yj) = (w[1].lon, w[1].lat);
                if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Vertex mean of the outer ring.
    pub fn vertex_centroid(&self) -> GeoPoint {
        let ring = &self.rings[0][..self.rings[0].len() - 1];
        let n = ring.len() as f64;
        let lat = ring.iter().map(|p| p.lat).sum::<f64>() / n;
        let lon = ring.iter().map(|p| p.lon).sum::<f64>() / n;
        GeoPoint::new_unchecked(lat, lon)
    }
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn segments_cross(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

fn ring_self_intersects(ring: &[GeoPoint]) -> bool {
    let pts: Vec<(f64, f64)> = ring.iter().map(|p| (p.lon, p.lat)).collect();
    let n = pts.len() - 1;
    for i in 0..n {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_cross(pts[i], pts[i + 1], pts[j], pts[j + 1]) {
                return true;
            }
        }
    }
    false
}

#[derive(Clone, Debug, PartialEq)]
pub struct StratumZone {
    pub zone_id: String,
    pub polygon: Polygon,
    pub stratum: u8,
}

impl StratumZone {
    pub fn new(zone_id: impl Into<String>, polygon: Polygon, stratum: u8) -> Result<Self> {
        if !(1..=6).contains(&stratum) {
            return Err(Error::InvalidInput(format!("stratum {stratum} outside 1..6")));
        }
        Ok(Self {
            zone_id: zone_id.into(),
            polygon,
            stratum,
        })
    }
}

/// Stratum of the first zone (file order) containing `p`.
pub fn stratum_lookup(p: GeoPoint, zones: &[StratumZone]) -> Option<u8> {
    zones.iter().find(|z| z.polygon.contains(p)).map(|z| z.stratum)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub region_id: String,
    pub polygon: Polygon,
}

pub fn region_lookup(p: GeoPoint, regions: &[Region]) -> Option<&str> {
    regions
        .iter()
        .find(|r| r.polygon.contains(p))
        .map(|r| r.region_id.as_str())
}

/// One parsed GeoJSON feature: its polygons and raw properties.
struct Feature {
    polygons: Vec<Polygon>,
    properties: serde_json::Map<String, serde_json::Value>,
    id: Option<String>,
}

fn parse_ring(v: &serde_json::Value) -> Result<Vec<GeoPoint>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::InvalidInput("ring is not an array".into()))?;
    arr.iter()
        .map(|pos| {
            let c = pos
                .as_array()
                .filter(|c| c.len() >= 2)
                .ok_or_else(|| Error::InvalidInput("bad position".into()))?;
            let lon = c[0].as_f64().ok_or_else(|| Error::InvalidInput("bad lon".into()))?;
            let lat = c[1].as_f64().ok_or_else(|| Error::InvalidInput("bad lat".into()))?;
            GeoPoint::new(lat, lon)
        })
        .collect()
}

fn parse_polygon_coords(v: &serde_json::Value) -> Result<Polygon> {
    let rings = v
        .as_array()
        .ok_or_else(|| Error::InvalidInput("polygon coordinates not an array".into()))?
        .iter()
        .map(parse_ring)
        .collect::<Result<Vec<_>>>()?;
    Polygon::new(rings)
}

fn parse_features<R: Read>(reader: R) -> Result<Vec<Feature>> {
    let doc: serde_json::Value = serde_json::from_reader(reader)?;
    if doc.get("type").and_then(|t| t.as_str()) != Some("FeatureCollection") {
        return Err(Error::InvalidInput("expected a GeoJSON FeatureCollection".into()));
    }
    let features = doc
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| Error::InvalidInput("FeatureCollection without features".into()))?;
    let mut out = Vec::with_capacity(features.len());
    for f in features {
        let geom = f
            .get("geometry")
            .ok_or_else(|| Error::InvalidInput("feature without geometry".into()))?;
        let coords = geom
            .get("coordinates")
            .ok_or_else(|| Error::InvalidInput("geometry without coordinates".into()))?;
        let polygons = match geom.get("type").and_then(|t| t.as_str()) {
            Some("Polygon") => vec![parse_polygon_coords(coords)?],
            Some("MultiPolygon") => coords
                .as_array()
                .ok_or_else(|| Error::InvalidInput("bad MultiPolygon".into()))?
                .iter()
                .map(parse_polygon_coords)
                .collect::<Result<Vec<_>>>()?,
            other => {
                return Err(Error::InvalidInput(format!("unsupported geometry type {other:?}")));
            }
        };
        let properties = f
            .get("properties")
            .and_then(|p| p.as_object())
            .cloned()
            .unwrap_or_default();
        let id = f.get("id").and_then(|v| match v {
            serde_json::Value::String(s) => Some(s.clone()),
            serde_json::Value::Number(n) => Some(n.to_string()),
            _ => None,
        });
        out.push(Feature { polygons, properties, id });
    }
    Ok(out)
}

/// Reads stratum zones: every feature needs an integer `stratum` property.
/// Multi-polygons expand to one zone per part, keeping file order.
pub fn read_zones<R: Read>(reader: R) -> Result<Vec<StratumZone>> {
    let mut zones = Vec::new();
    for (i, f) in parse_features(reader)?.into_iter().enumerate() {
        let stratum = f
            .properties
            .get("stratum")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::InvalidInput(format!("zone feature {i} lacks integer `stratum`")))?;
        let stratum = u8::try_from(stratum).map_err(|_| Error::InvalidInput(format!("stratum {stratum} outside 1..6")))?;
        let zone_id = f
            .properties
            .get("zone_id")
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .or(f.id)
            .unwrap_or_else(|| format!("zone{i}"));
        for polygon in f.polygons {
            zones.push(StratumZone::new(zone_id.clone(), polygon, stratum)?);
        }
    }
    Ok(zones)
}

/// Reads regions keyed by the `region_id` property.
pub fn read_regions<R: Read>(reader: R) -> Result<Vec<Region>> {
    let mut regions = Vec::new();
    for (i, f) in parse_features(reader)?.into_iter().enumerate() {
        let region_id = f
            .properties
            .get("region_id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("region feature {i} lacks string `region_id`")))?
            .to_owned();
        for polygon in f.polygons {
            regions.push(Region {
                region_id: region_id.clone(),
                polygon,
            });
        }
    }
    Ok(regions)
}

fn ring_json(ring: &[GeoPoint]) -> serde_json::Value {
    serde_json::Value::Array(
        ring.iter()
            .map(|p| serde_json::json!([round7(p.lon), round7(p.lat)]))
            .collect(),
    )
}

fn round7(v: f64) -> f64 {
    (v * 1e7).round() / 1e7
}

fn feature_collection(features: Vec<serde_json::Value>) -> String {
    let doc = serde_json::json!({ "type": "FeatureCollection", "features": features });
    let mut s = serde_json::to_string_pretty(&doc).expect("geojson serialises");
    s.push('\n');
    s
}

pub fn zones_to_geojson(zones: &[StratumZone]) -> String {
    feature_collection(
        zones
            .iter()
            .map(|z| {
                serde_json::json!({
                    "type": "Feature",
                    "properties": { "zone_id": z.zone_id, "stratum": z.stratum },
                    "geometry": {
                        "type": "Polygon",
                        "coordinates": z.polygon.rings().iter().map(|r| ring_json(r)).collect::<Vec<_>>(),
                    }
                })
            })
            .collect(),
    )
}

pub fn regions_to_geojson(regions: &[Region]) -> String {
    feature_collection(
        regions
            .iter()
            .map(|r| {
                serde_json::json!({
                    "type": "Feature",
                    "properties": { "region_id": r.region_id },
                    "geometry": {
                        "type": "Polygon",
                        "coordinates": r.polygon.rings().iter().map(|x| ring_json(x)).collect::<Vec<_>>(),
                    }
                })
            })
            .collect(),
    )
}
