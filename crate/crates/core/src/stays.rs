//! Stay detection, monthly home inference, trips outside the home and POI
//! matching.
//!
//! Stays are found with a greedy sequential rule: the current candidate
//! grows while each new ping lies within `radius_m` of the running
//! centroid, every member stays within `radius_m` of the updated centroid,
//! and the span does not exceed `max_duration_s`. A broken candidate is
//! kept when its span is at least `min_duration_s`.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geo::{geodesic_distance, region_lookup, stratum_lookup, GeoPoint, GridSpec, HexId, Region, StratumZone};
use crate::ingest::Ping;
use crate::time::{date_of_day_number, LocalClock, Month, NightWindow, StudyWindow};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StayParams {
    pub radius_m: f64,
    pub min_duration_s: i64,
    pub max_duration_s: i64,
}

impl Default for StayParams {
    fn default() -> Self {
        Self {
            radius_m: 100.0,
            min_duration_s: 5 * 60,
            max_duration_s: 24 * 3600,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stay {
    pub device_id: Arc<str>,
    pub centroid: GeoPoint,
    pub start: i64,
    pub end: i64,
    pub ping_count: u32,
    pub hex: Option<HexId>,
    pub stratum: Option<u8>,
    pub region: Option<Arc<str>>,
    pub poi_id: Option<Arc<str>>,
}

impl Stay {
    pub fn duration_s(&self) -> i64 {
        self.end - self.start
    }
}

// Slack below the radius for accepting a ping on the cheap bound alone;
// anything closer to the edge is decided by the exact member scan.
const BOUND_SLACK_M: f64 = 1e-3;

struct Candidate {
    first: usize,
    sum_lat: f64,
    sum_lon: f64,
    centroid: GeoPoint,
    // upper bound on the distance from any member to `centroid`
    bound: f64,
}

impl Candidate {
    fn start(i: usize, p: &Ping) -> Self {
        Self {
            first: i,
            sum_lat: p.loc.lat(),
            sum_lon: p.loc.lon(),
            centroid: p.loc,
            bound: 0.0,
        }
    }
}

/// Detects stays in one device's time-ordered trace.
pub fn detect_stays(pings: &[Ping], params: &StayParams) -> Result<Vec<Stay>> {
    let mut stays = Vec::new();
    let Some(first) = pings.first() else {
        return Ok(stays);
    };
    for (i, w) in pings.windows(2).enumerate() {
        if w[1].t < w[0].t {
            return Err(Error::Unsorted(format!(
                "device {} ping {} at t={} precedes t={}",
                w[1].device_id,
                i + 1,
                w[1].t,
                w[0].t
            )));
        }
        if w[1].device_id != w[0].device_id {
            return Err(Error::InvalidInput("detect_stays expects a single device".into()));
        }
    }

    let r = params.radius_m;
    let mut cand = Candidate::start(0, first);
    for (i, p) in pings.iter().enumerate().skip(1) {
        let span = p.t - pings[cand.first].t;
        let accepted = span <= params.max_duration_s && geodesic_distance(p.loc, cand.centroid) <= r && {
            let n = (i - cand.first + 1) as f64;
            let sum_lat = cand.sum_lat + p.loc.lat();
            let sum_lon = cand.sum_lon + p.loc.lon();
            let centroid = GeoPoint::new_unchecked(sum_lat / n, sum_lon / n);
            let shift = geodesic_distance(cand.centroid, centroid);
            let mut bound = (cand.bound + shift).max(geodesic_distance(p.loc, centroid));
            let fits = if bound <= r - BOUND_SLACK_M {
                true
            } else {
                bound = pings[cand.first..=i]
                    .iter()
                    .map(|q| geodesic_distance(q.loc, centroid))
                    .fold(0.0, f64::max);
                bound <= r
            };
            if fits {
                cand.sum_lat = sum_lat;
                cand.sum_lon = sum_lon;
                cand.centroid = centroid;
                cand.bound = bound;
            }
            fits
        };
        if !accepted {
            emit(&pings[cand.first..i], &cand, params, &mut stays);
            cand = Candidate::start(i, p);
        }
    }
    emit(&pings[cand.first..], &cand, params, &mut stays);
    Ok(stays)
}

fn emit(members: &[Ping], cand: &Candidate, params: &StayParams, out: &mut Vec<Stay>) {
    let start = members[0].t;
    let end = members[members.len() - 1].t;
    let duration = end - start;
    if duration < params.min_duration_s || duration > params.max_duration_s {
        return;
    }
    out.push(Stay {
        device_id: members[0].device_id.clone(),
        centroid: cand.centroid,
        start,
        end,
        ping_count: members.len() as u32,
        hex: None,
        stratum: None,
        region: None,
        poi_id: None,
    });
}

// ---------------------------------------------------------------------------
// Homes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct HomeLocation {
    pub device_id: Arc<str>,
    pub month: Month,
    pub loc: GeoPoint,
    pub night_ping_count: u32,
    pub hex: Option<HexId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomeParams {
    pub radius_m: f64,
    pub min_night_pings: u32,
    pub night: NightWindow,
}

impl Default for HomeParams {
    fn default() -> Self {
        Self {
            radius_m: 100.0,
            min_night_pings: 5,
            night: NightWindow::default(),
        }
    }
}

struct NightCluster {
    sum_lat: f64,
    sum_lon: f64,
    n: u32,
    first_t: i64,
}

impl NightCluster {
    fn centroid(&self) -> GeoPoint {
        GeoPoint::new_unchecked(self.sum_lat / self.n as f64, self.sum_lon / self.n as f64)
    }
}

/// Monthly home locations of one device from its raw night pings.
///
/// Night pings of a month (attributed by the evening that starts the
/// night) are grouped by leader clustering: each ping joins the nearest
/// cluster whose centroid is within `radius_m`, otherwise it opens a new
/// one. The home is the largest cluster, ties going to the cluster whose
/// first ping is earliest, and is reported only with at least
/// `min_night_pings` pings.
pub fn infer_homes(
    pings: &[Ping],
    clock: &LocalClock,
    window: &StudyWindow,
    params: &HomeParams,
    grid: Option<&GridSpec>,
) -> Vec<HomeLocation> {
    let mut by_month: BTreeMap<Month, Vec<&Ping>> = BTreeMap::new();
    let mut last_anchor: Option<(i64, Month)> = None;
    for p in pings {
        let Some(anchor) = params.night.anchor_day(clock, p.t) else {
            continue;
        };
        let month = match last_anchor {
            Some((d, m)) if d == anchor => m,
            _ => Month::from_date(date_of_day_number(anchor)),
        };
        last_anchor = Some((anchor, month));
        if window.contains(month) {
            by_month.entry(month).or_default().push(p);
        }
    }

    let mut homes = Vec::new();
    for (month, night) in by_month {
        let mut clusters: Vec<NightCluster> = Vec::new();
        for p in night {
            let nearest = clusters
                .iter()
                .enumerate()
                .map(|(k, c)| (k, geodesic_distance(p.loc, c.centroid())))
                .filter(|&(_, d)| d <= params.radius_m)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match nearest {
                Some((k, _)) => {
                    let c = &mut clusters[k];
                    c.sum_lat += p.loc.lat();
                    c.sum_lon += p.loc.lon();
                    c.n += 1;
                }
                None => clusters.push(NightCluster {
                    sum_lat: p.loc.lat(),
                    sum_lon: p.loc.lon(),
                    n: 1,
                    first_t: p.t,
                }),
            }
        }
        let best = clusters
            .iter()
            .max_by(|a, b| a.n.cmp(&b.n).then_with(|| b.first_t.cmp(&a.first_t)));
        if let Some(c) = best.filter(|c| c.n >= params.min_night_pings) {
            let loc = c.centroid();
            homes.push(HomeLocation {
                device_id: pings[0].device_id.clone(),
                month,
                loc,
                night_ping_count: c.n,
                hex: grid.and_then(|g| g.hex_id(loc).ok()),
            });
        }
    }
    homes
}

/// Stays more than `radius_m` from that month's home. Stays in months
/// without a home are dropped.
pub fn trips_outside_home(stays: &[Stay], homes: &[HomeLocation], clock: &LocalClock, radius_m: f64) -> Vec<Stay> {
    let by_month: HashMap<Month, &HomeLocation> = homes.iter().map(|h| (h.month, h)).collect();
    stays
        .iter()
        .filter(|s| {
            by_month
                .get(&clock.month_of(s.start))
                .is_some_and(|h| h.device_id == s.device_id && geodesic_distance(s.centroid, h.loc) > radius_m)
        })
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// POIs
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Poi {
    pub poi_id: Arc<str>,
    pub loc: GeoPoint,
    pub category: String,
}

/// Bucketed lookup of POIs by lat/lon cells at least as wide as the match
/// radius, so a 3x3 neighbourhood always holds every candidate.
#[derive(Clone, Debug)]
pub struct PoiIndex {
    pois: Vec<Poi>,
    radius_m: f64,
    cell_lat: f64,
    cell_lon: f64,
    cells: HashMap<(i64, i64), Vec<u32>>,
}

impl PoiIndex {
    pub fn new(pois: Vec<Poi>, radius_m: f64) -> Result<Self> {
        let mut ids: Vec<&str> = pois.iter().map(|p| &*p.poi_id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!("duplicate poi_id {:?}", w[0])));
        }
        let max_abs_lat = pois.iter().map(|p| p.loc.lat().abs()).fold(0.0, f64::max);
        let lat_deg = (radius_m / crate::geo::EARTH_RADIUS_M).to_degrees() * 1.5;
        let coslat = (max_abs_lat + 1.0).min(89.0).to_radians().cos();
        let (cell_lat, cell_lon) = (lat_deg, lat_deg / coslat);
        let mut cells: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in pois.iter().enumerate() {
            cells
                .entry(Self::key(p.loc, cell_lat, cell_lon))
                .or_default()
                .push(i as u32);
        }
        Ok(Self {
            pois,
            radius_m,
            cell_lat,
            cell_lon,
            cells,
        })
    }

    fn key(p: GeoPoint, cell_lat: f64, cell_lon: f64) -> (i64, i64) {
        ((p.lat() / cell_lat).floor() as i64, (p.lon() / cell_lon).floor() as i64)
    }

    pub fn pois(&self) -> &[Poi] {
        &self.pois
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    /// Nearest POI within the radius; ties go to the smaller `poi_id`.
    pub fn nearest_within(&self, p: GeoPoint) -> Option<&Poi> {
        let (ki, kj) = Self::key(p, self.cell_lat, self.cell_lon);
        let mut best: Option<(f64, &Poi)> = None;
        for di in -1..=1 {
            for dj in -1..=1 {
                let Some(bucket) = self.cells.get(&(ki + di, kj + dj)) else {
                    continue;
                };
                for &i in bucket {
                    let poi = &self.pois[i as usize];
                    let d = geodesic_distance(p, poi.loc);
                    if d > self.radius_m {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bd, bp)) => d < bd || (d == bd && poi.poi_id < bp.poi_id),
                    };
                    if better {
                        best = Some((d, poi));
                    }
                }
            }
        }
        best.map(|(_, poi)| poi)
    }
}

pub fn match_poi<'a>(stay: &Stay, index: &'a PoiIndex) -> Option<&'a Poi> {
    index.nearest_within(stay.centroid)
}

/// Reads `poi_id,lat,lon,category`.
pub fn read_pois<R: Read>(reader: R) -> Result<Vec<Poi>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (row, rec) in rdr.deserialize::<(String, f64, f64, String)>().enumerate() {
        let (id, lat, lon, category) =
            rec.map_err(|e| Error::InvalidInput(format!("poi row {}: {e}", row + 1)))?;
        out.push(Poi {
            poi_id: Arc::from(id.as_str()),
            loc: GeoPoint::new(lat, lon)?,
            category,
        });
    }
    Ok(out)
}

/// Fills the spatial annotations of a stay: hex, stratum, region and POI.
pub struct Annotator<'a> {
    pub grid: &'a GridSpec,
    pub zones: &'a [StratumZone],
    pub regions: &'a [Region],
    pub pois: &'a PoiIndex,
}

impl Annotator<'_> {
    pub fn annotate(&self, stay: &mut Stay) {
        stay.hex = self.grid.hex_id(stay.centroid).ok();
        stay.stratum = stratum_lookup(stay.centroid, self.zones);
        stay.region = region_lookup(stay.centroid, self.regions).map(Arc::from);
        stay.poi_id = match_poi(stay, self.pois).map(|p| p.poi_id.clone());
    }
}
