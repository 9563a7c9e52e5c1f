//! Synthetic two-arm city with a known injected treatment effect.
//!
//! The city is a square split into six horizontal stratum bands (stratum 1
//! in the south) and three vertical regions. Treatment stations sit in
//! band 1 and control stations in band 2. Devices live near a station of
//! their arm (background devices anywhere else) and make a gamma-Poisson
//! number of trips each month to lattice places, each trip realised as a
//! short ping cluster. Night pings at home make the home rule fire.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(seed, device, month)`, so output does not depend on how devices are
//! scheduled across threads.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::{
    regions_to_geojson, zones_to_geojson, GeoPoint, Line, Polygon, Region, Station, StratumZone,
    EARTH_RADIUS_M,
};
use crate::ingest::Ping;
use crate::segregation::{shannon_entropy, StratumSet};
use crate::stays::Poi;
use crate::time::{LocalClock, Month, StudyWindow};

const POI_CATEGORIES: [&str; 8] = ["restaurant", "store", "school", "park", "pharmacy", "bank", "church", "gym"];
const DAY_START_S: i64 = 6 * 3600 + 1800;
const DAY_END_S: i64 = 21 * 3600 + 1800;
const NIGHT_START_S: i64 = 22 * 3600 + 1800;
const NIGHT_LEN_S: i64 = 7 * 3600;
/// Trips never go to places closer than this to home.
const MIN_TRIP_DISTANCE_M: f64 = 250.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_devices_per_arm: usize,
    /// Devices homed away from every station; they only shape POI profiles.
    pub n_background_devices: usize,
    pub window: StudyWindow,
    pub opening: Month,
    pub timezone: LocalClock,
    pub origin: GeoPoint,
    /// Trips per person per month.
    pub base_trip_rate: f64,
    /// Extra monthly trips of treatment devices from `opening` on.
    pub effect_trips: f64,
    /// Variance-to-mean ratio of monthly trip counts (1 = Poisson).
    pub dispersion: f64,
    pub pings_per_stay_min: u32,
    pub pings_per_stay_max: u32,
    pub stay_minutes_min: f64,
    pub stay_minutes_max: f64,
    /// Mean night pings at home per night.
    pub night_ping_rate: f64,
    pub jitter_m: f64,
    pub city_size_m: f64,
    pub poi_spacing_m: f64,
    pub poi_fraction: f64,
    /// Scale of the exponential distance decay of destination choice.
    pub destination_decay_m: f64,
    pub stations_per_arm: usize,
    pub buffer_m: f64,
    /// Treated devices' monthly trips change by `slope * (m - base)` before
    /// the opening, `base` being the month before it.
    pub pretrend_slope: f64,
    /// Monthly probability that a present device stops reporting for good.
    pub attrition_hazard: f64,
    /// Share of devices whose ping rates fall below the quality filter.
    pub sparse_fraction: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_devices_per_arm: 500,
            n_background_devices: 200,
            window: StudyWindow {
                start: Month::new(2018, 7).expect("valid month"),
                end: Month::new(2019, 6).expect("valid month"),
            },
            opening: Month::new(2018, 12).expect("valid month"),
            timezone: LocalClock::parse("America/Bogota").expect("known zone"),
            origin: GeoPoint::new(4.60, -74.10).expect("valid point"),
            base_trip_rate: 100.0,
            effect_trips: 6.5,
            dispersion: 2.0,
            pings_per_stay_min: 2,
            pings_per_stay_max: 4,
            stay_minutes_min: 6.0,
            stay_minutes_max: 30.0,
            night_ping_rate: 1.5,
            jitter_m: 15.2,
            city_size_m: 12_000.0,
            poi_spacing_m: 300.0,
            poi_fraction: 0.6,
            destination_decay_m: 4_000.0,
            stations_per_arm: 4,
            buffer_m: 500.0,
            pretrend_slope: 0.0,
            attrition_hazard: 0.0,
            sparse_fraction: 0.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.window.contains(self.opening) || self.opening == self.window.start {
            return bad(format!("opening {} must fall after the first window month", self.opening));
        }
        if self.n_devices_per_arm == 0 {
            return bad("n_devices_per_arm must be positive".into());
        }
        for (name, v) in [
            ("base_trip_rate", self.base_trip_rate),
            ("night_ping_rate", self.night_ping_rate),
            ("jitter_m", self.jitter_m),
            ("city_size_m", self.city_size_m),
            ("poi_spacing_m", self.poi_spacing_m),
            ("destination_decay_m", self.destination_decay_m),
            ("buffer_m", self.buffer_m),
            ("stay_minutes_min", self.stay_minutes_min),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.dispersion < 1.0 {
            return bad(format!("dispersion must be at least 1, got {}", self.dispersion));
        }
        if self.pings_per_stay_min < 2 || self.pings_per_stay_max < self.pings_per_stay_min {
            return bad("pings per stay must satisfy 2 <= min <= max".into());
        }
        if self.stay_minutes_min <= 5.0 || self.stay_minutes_max < self.stay_minutes_min || self.stay_minutes_max >= 24.0 * 60.0 {
            return bad("stay minutes must satisfy 5 < min <= max < 1440".into());
        }
        for (name, v) in [
            ("poi_fraction", self.poi_fraction),
            ("attrition_hazard", self.attrition_hazard),
            ("sparse_fraction", self.sparse_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        let lowest = self.base_trip_rate + self.pretrend_slope.min(0.0) * self.pre_months() as f64;
        let highest_pre = self.base_trip_rate + self.pretrend_slope.max(0.0) * self.pre_months() as f64;
        if lowest <= 0.0 || highest_pre <= 0.0 || self.base_trip_rate + self.effect_trips <= 0.0 {
            return bad("trip rates must stay positive in every month".into());
        }
        // a stay's pings are at most 3 sigma from the place, so two members
        // are at most 6 sigma apart and the centroid within 3 sigma
        if 6.0 * self.jitter_m >= 100.0 || 3.0 * self.jitter_m >= 50.0 {
            return bad(format!("jitter {} m too large for the 100 m / 50 m rules", self.jitter_m));
        }
        if self.poi_spacing_m < 2.0 * 100.0 + 6.0 * self.jitter_m {
            return bad("poi_spacing_m too small to keep consecutive stays apart".into());
        }
        let band = self.city_size_m / 6.0;
        if self.buffer_m < 100.0 || 2.0 * self.buffer_m > band {
            return bad(format!(
                "infeasible buffer {} m: need 100 m <= buffer <= half a stratum band ({} m)",
                self.buffer_m,
                band / 2.0
            ));
        }
        let row = 4.0 * self.buffer_m + (self.stations_per_arm.max(1) - 1) as f64 * 3.0 * self.buffer_m;
        if self.stations_per_arm == 0 || row > self.city_size_m {
            return bad("stations do not fit in the city".into());
        }
        if self.city_size_m / 2.0 > 90_000.0 {
            return bad("city_size_m too large for the grid domain".into());
        }
        Ok(())
    }

    fn pre_months(&self) -> i32 {
        self.opening.pred().since(self.window.start)
    }

    pub fn n_devices(&self) -> usize {
        2 * self.n_devices_per_arm + self.n_background_devices
    }
}

/// Named pathologies that can be injected into a scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Knob {
    /// Treated devices' trips grow by one per month before the opening.
    PretrendViolation,
    /// 5% monthly dropout hazard.
    Attrition,
    /// 20% of devices report too few pings to pass the quality filter.
    SparseDevices,
}

impl FromStr for Knob {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pretrend_violation" => Ok(Knob::PretrendViolation),
            "attrition" => Ok(Knob::Attrition),
            "sparse_devices" => Ok(Knob::SparseDevices),
            other => Err(Error::Config(format!("unknown knob {other:?}"))),
        }
    }
}

impl fmt::Display for Knob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Knob::PretrendViolation => "pretrend_violation",
            Knob::Attrition => "attrition",
            Knob::SparseDevices => "sparse_devices",
        })
    }
}

pub fn perturb(config: &ScenarioConfig, knob: Knob) -> ScenarioConfig {
    let mut c = config.clone();
    match knob {
        Knob::PretrendViolation => c.pretrend_slope = 1.0,
        Knob::Attrition => c.attrition_hazard = 0.05,
        Knob::SparseDevices => c.sparse_fraction = 0.2,
    }
    c
}

/// Equirectangular frame around the origin; exact enough at city scale.
#[derive(Clone, Copy, Debug)]
struct LocalFrame {
    lat0: f64,
    lon0: f64,
    m_per_deg_lat: f64,
    m_per_deg_lon: f64,
}

impl LocalFrame {
    fn new(origin: GeoPoint) -> Self {
        let m = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        Self {
            lat0: origin.lat(),
            lon0: origin.lon(),
            m_per_deg_lat: m,
            m_per_deg_lon: m * origin.lat().to_radians().cos(),
        }
    }

    fn point(&self, x: f64, y: f64) -> GeoPoint {
        GeoPoint::new_unchecked(self.lat0 + y / self.m_per_deg_lat, self.lon0 + x / self.m_per_deg_lon)
    }
}

#[derive(Clone, Debug)]
pub struct Place {
    pub loc: GeoPoint,
    pub x: f64,
    pub y: f64,
    /// Index into [`CityLayout::pois`].
    pub poi: Option<usize>,
}

/// Static geography of a scenario.
#[derive(Clone, Debug)]
pub struct CityLayout {
    pub stations: Vec<Station>,
    pub zones: Vec<StratumZone>,
    pub regions: Vec<Region>,
    pub places: Vec<Place>,
    pub pois: Vec<Poi>,
    frame_origin: GeoPoint,
    station_xy: Vec<(f64, f64)>,
}

impl CityLayout {
    fn build(cfg: &ScenarioConfig) -> Result<Self> {
        let frame = LocalFrame::new(cfg.origin);
        let half = cfg.city_size_m / 2.0;
        let band = cfg.city_size_m / 6.0;
        let rect = |x0: f64, y0: f64, x1: f64, y1: f64| {
            Polygon::new(vec![vec![
                frame.point(x0, y0),
                frame.point(x1, y0),
                frame.point(x1, y1),
                frame.point(x0, y1),
            ]])
        };
        let zones = (0..6)
            .map(|k| {
                let y0 = -half + k as f64 * band;
                StratumZone::new(format!("band{}", k + 1), rect(-half, y0, half, y0 + band)?, k as u8 + 1)
            })
            .collect::<Result<Vec<_>>>()?;
        let third = cfg.city_size_m / 3.0;
        let regions = ["west", "center", "east"]
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let x0 = -half + k as f64 * third;
                Ok(Region {
                    region_id: name.to_string(),
                    polygon: rect(x0, -half, x0 + third, half)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let spacing = 3.0 * cfg.buffer_m;
        let mut stations = Vec::new();
        let mut station_xy = Vec::new();
        for k in 0..cfg.stations_per_arm {
            let x = -half + 2.0 * cfg.buffer_m + k as f64 * spacing;
            let y = -half + band / 2.0;
            stations.push(Station::new(format!("T{}", k + 1), frame.point(x, y), Line::Treatment, cfg.buffer_m)?);
            station_xy.push((x, y));
        }
        for k in 0..cfg.stations_per_arm {
            let x = half - 2.0 * cfg.buffer_m - k as f64 * spacing;
            let y = -half + 1.5 * band;
            stations.push(Station::new(format!("C{}", k + 1), frame.point(x, y), Line::Control, cfg.buffer_m)?);
            station_xy.push((x, y));
        }

        // places keep clear of band and region edges so a jittered stay
        // never lands in a neighbouring zone
        let margin = 3.0 * cfg.jitter_m + 10.0;
        let near_edge = |v: f64, width: f64| {
            let r = (v + half).rem_euclid(width);
            r < margin || width - r < margin
        };
        let mut rng = stream(cfg.seed, u64::MAX, u64::MAX);
        let mut places = Vec::new();
        let mut pois = Vec::new();
        let n = (cfg.city_size_m / cfg.poi_spacing_m).floor() as usize;
        for iy in 0..n {
            for ix in 0..n {
                let x = -half + (ix as f64 + 0.5) * cfg.poi_spacing_m;
                let y = -half + (iy as f64 + 0.5) * cfg.poi_spacing_m;
                let is_poi = rng.random::<f64>() < cfg.poi_fraction;
                let category = POI_CATEGORIES[rng.random_range(0..POI_CATEGORIES.len())];
                if near_edge(y, band) || near_edge(x, third) {
                    continue;
                }
                let loc = frame.point(x, y);
                let poi = is_poi.then(|| {
                    pois.push(Poi {
                        poi_id: Arc::from(format!("poi{:05}", pois.len() + 1)),
                        loc,
                        category: category.to_string(),
                    });
                    pois.len() - 1
                });
                places.push(Place { loc, x, y, poi });
            }
        }
        if places.len() < 3 {
            return Err(Error::Config("too few destination places".into()));
        }
        Ok(Self {
            stations,
            zones,
            regions,
            places,
            pois,
            frame_origin: cfg.origin,
            station_xy,
        })
    }

    fn frame(&self) -> LocalFrame {
        LocalFrame::new(self.frame_origin)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for one `(seed, device, month)` key.
fn stream(seed: u64, device: u64, month: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ device) ^ month.wrapping_mul(0xD1B5_4A32_D192_ED03));
    ChaCha8Rng::seed_from_u64(key)
}

const DEVICE_KEY: u64 = u64::MAX - 1;

#[derive(Clone, Debug, PartialEq)]
pub struct MonthTruth {
    pub month: Month,
    pub present: bool,
    /// Trips generated this month (all away from home).
    pub trips: u32,
    /// Place index of every trip in time order.
    pub destinations: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceTruth {
    pub device_id: Arc<str>,
    pub arm: Option<Line>,
    pub station_id: Option<String>,
    pub home: GeoPoint,
    pub home_stratum: u8,
    pub sparse: bool,
    pub months: Vec<MonthTruth>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub devices: Vec<DeviceTruth>,
}

/// True per-device-month exposure computed from generated visits.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueExposure {
    pub device_id: Arc<str>,
    pub month: Month,
    pub poi_visits: u64,
    pub mean_entropy: f64,
    pub mean_high_share: f64,
}

impl GroundTruth {
    pub fn trips(&self, device_id: &str, month: Month) -> Option<u32> {
        self.devices
            .iter()
            .find(|d| &*d.device_id == device_id)
            .and_then(|d| d.months.iter().find(|m| m.month == month))
            .filter(|m| m.present)
            .map(|m| m.trips)
    }

    pub fn total_trips(&self) -> u64 {
        self.devices.iter().flat_map(|d| &d.months).map(|m| m.trips as u64).sum()
    }

    /// Exposure from generated POI visits of non-sparse devices, with POI
    /// profiles built from the same visits and true home strata.
    pub fn exposure(&self, layout: &CityLayout) -> Vec<TrueExposure> {
        let high = StratumSet::high_income_visitors();
        let mut counts = vec![[0u64; 6]; layout.pois.len()];
        for d in self.devices.iter().filter(|d| !d.sparse) {
            for m in d.months.iter().filter(|m| m.present) {
                for &p in &m.destinations {
                    if let Some(poi) = layout.places[p as usize].poi {
                        counts[poi][d.home_stratum as usize - 1] += 1;
                    }
                }
            }
        }
        let profile: Vec<(f64, f64)> = counts
            .iter()
            .map(|c| {
                let total: u64 = c.iter().sum();
                let hi: u64 = (1..=6u8).filter(|s| high.contains(*s)).map(|s| c[s as usize - 1]).sum();
                (shannon_entropy(c), if total > 0 { hi as f64 / total as f64 } else { 0.0 })
            })
            .collect();
        let mut out = Vec::new();
        for d in self.devices.iter().filter(|d| !d.sparse) {
            for m in d.months.iter().filter(|m| m.present) {
                let visits: Vec<usize> = m
                    .destinations
                    .iter()
                    .filter_map(|&p| layout.places[p as usize].poi)
                    .collect();
                if visits.is_empty() {
                    continue;
                }
                let n = visits.len() as f64;
                out.push(TrueExposure {
                    device_id: d.device_id.clone(),
                    month: m.month,
                    poi_visits: visits.len() as u64,
                    mean_entropy: visits.iter().map(|&v| profile[v].0).sum::<f64>() / n,
                    mean_high_share: visits.iter().map(|&v| profile[v].1).sum::<f64>() / n,
                });
            }
        }
        out
    }
}

/// Output locations of a generated scenario.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioPaths {
    pub pings: PathBuf,
    pub pois: PathBuf,
    pub stations: PathBuf,
    pub zones: PathBuf,
    pub regions: PathBuf,
    pub ground_truth: PathBuf,
}

impl ScenarioPaths {
    /// Standard file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            pings: dir.join("pings.csv"),
            pois: dir.join("pois.csv"),
            stations: dir.join("stations.csv"),
            zones: dir.join("zones.geojson"),
            regions: dir.join("regions.geojson"),
            ground_truth: dir.join("ground_truth.csv"),
        }
    }

    fn all(&self) -> [&Path; 6] {
        [
            &self.pings,
            &self.pois,
            &self.stations,
            &self.zones,
            &self.regions,
            &self.ground_truth,
        ]
    }
}

/// A validated scenario with its geography.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub layout: CityLayout,
}

struct DevicePlan {
    id: Arc<str>,
    arm: Option<Line>,
    station: Option<usize>,
    x: f64,
    y: f64,
    home: GeoPoint,
    sparse: bool,
    // cumulative destination weights over places
    cumulative: Vec<f64>,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let layout = CityLayout::build(&config)?;
        Ok(Self { config, layout })
    }

    pub fn device_id(&self, idx: usize) -> String {
        let n = self.config.n_devices_per_arm;
        if idx < n {
            format!("t{:05}", idx + 1)
        } else if idx < 2 * n {
            format!("c{:05}", idx - n + 1)
        } else {
            format!("b{:05}", idx - 2 * n + 1)
        }
    }

    fn plan(&self, idx: usize) -> DevicePlan {
        let cfg = &self.config;
        let lay = &self.layout;
        let mut rng = stream(cfg.seed, idx as u64, DEVICE_KEY);
        let n = cfg.n_devices_per_arm;
        let arm = if idx < n {
            Some(Line::Treatment)
        } else if idx < 2 * n {
            Some(Line::Control)
        } else {
            None
        };
        let half = cfg.city_size_m / 2.0;
        let band = cfg.city_size_m / 6.0;
        let (station, x, y) = match arm {
            Some(line) => {
                let offset = if line == Line::Treatment { 0 } else { cfg.stations_per_arm };
                let s = offset + rng.random_range(0..cfg.stations_per_arm);
                let r = 0.9 * cfg.buffer_m * rng.random::<f64>().sqrt();
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                let (sx, sy) = lay.station_xy[s];
                (Some(s), sx + r * theta.cos(), sy + r * theta.sin())
            }
            None => loop {
                let x = rng.random_range(-half..half);
                let y = rng.random_range(-half..half);
                let clear = lay
                    .station_xy
                    .iter()
                    .all(|&(sx, sy)| (x - sx).hypot(y - sy) > cfg.buffer_m + 200.0);
                let r = (y + half).rem_euclid(band);
                if clear && r > 30.0 && band - r > 30.0 {
                    break (None, x, y);
                }
            },
        };
        let sparse = rng.random::<f64>() < cfg.sparse_fraction;
        let home = lay.frame().point(x, y);
        let mut acc = 0.0;
        let cumulative = lay
            .places
            .iter()
            .map(|p| {
                let d = (p.x - x).hypot(p.y - y);
                if d >= MIN_TRIP_DISTANCE_M {
                    acc += (-d / cfg.destination_decay_m).exp();
                }
                acc
            })
            .collect();
        DevicePlan {
            id: Arc::from(self.device_id(idx)),
            arm,
            station,
            x,
            y,
            home,
            sparse,
            cumulative,
        }
    }

    fn home_stratum(&self, y: f64) -> u8 {
        let half = self.config.city_size_m / 2.0;
        let band = self.config.city_size_m / 6.0;
        (((y + half) / band).floor() as i64).clamp(0, 5) as u8 + 1
    }

    fn monthly_mean(&self, plan: &DevicePlan, month: Month) -> f64 {
        let cfg = &self.config;
        let mut mu = cfg.base_trip_rate;
        if plan.arm == Some(Line::Treatment) {
            if month >= cfg.opening {
                mu += cfg.effect_trips;
            } else {
                mu += cfg.pretrend_slope * month.since(cfg.opening.pred()) as f64;
            }
        }
        if plan.sparse {
            mu *= 0.1;
        }
        mu
    }

    fn draw_count(&self, mu: f64, rng: &mut ChaCha8Rng) -> u32 {
        let d = self.config.dispersion;
        let lambda = if d > 1.0 {
            Gamma::new(mu / (d - 1.0), d - 1.0).expect("positive gamma params").sample(rng)
        } else {
            mu
        };
        if lambda <= 0.0 {
            return 0;
        }
        Poisson::new(lambda).expect("positive rate").sample(rng) as u32
    }

    /// Monthly trip counts and presence without realising any pings. Uses
    /// the same draws as [`Scenario::device`].
    pub fn device_counts(&self, idx: usize) -> Vec<MonthTruth> {
        let plan = self.plan(idx);
        let mut present = true;
        self.config
            .window
            .months()
            .enumerate()
            .map(|(k, month)| {
                let mut rng = stream(self.config.seed, idx as u64, k as u64);
                if k > 0 && rng.random::<f64>() < self.config.attrition_hazard {
                    present = false;
                }
                let trips = if present {
                    self.draw_count(self.monthly_mean(&plan, month), &mut rng)
                } else {
                    0
                };
                MonthTruth {
                    month,
                    present,
                    trips,
                    destinations: Vec::new(),
                }
            })
            .collect()
    }

    /// Time-ordered pings and ground truth of one device.
    pub fn device(&self, idx: usize) -> Result<(Vec<Ping>, DeviceTruth)> {
        let cfg = &self.config;
        let plan = self.plan(idx);
        let frame = self.layout.frame();
        let clock = &cfg.timezone;
        let (t_lo, t_hi) = clock.window_bounds(&cfg.window);
        let jitter = Normal::new(0.0, cfg.jitter_m).expect("finite jitter");
        let max_r = 3.0 * cfg.jitter_m;
        let accuracy = Some(cfg.jitter_m as f32);
        let mut pings = Vec::new();
        let mut months = Vec::new();
        let mut present = true;
        let mut prev_dest: Option<usize> = None;
        let total_w = *plan.cumulative.last().expect("places exist");
        if total_w <= 0.0 {
            return Err(Error::Config(format!("device {} has no reachable destination", plan.id)));
        }

        let emit = |rng: &mut ChaCha8Rng, t: i64, cx: f64, cy: f64, pings: &mut Vec<Ping>| {
            let (dx, dy) = loop {
                let dx: f64 = jitter.sample(rng);
                let dy: f64 = jitter.sample(rng);
                if dx.hypot(dy) <= max_r {
                    break (dx, dy);
                }
            };
            if (t_lo..t_hi).contains(&t) {
                pings.push(Ping {
                    device_id: plan.id.clone(),
                    t,
                    loc: frame.point(cx + dx, cy + dy),
                    accuracy_m: accuracy,
                });
            }
        };

        for (k, month) in cfg.window.months().enumerate() {
            let mut rng = stream(cfg.seed, idx as u64, k as u64);
            if k > 0 && rng.random::<f64>() < cfg.attrition_hazard {
                present = false;
            }
            if !present {
                months.push(MonthTruth {
                    month,
                    present,
                    trips: 0,
                    destinations: Vec::new(),
                });
                continue;
            }
            let n_trips = self.draw_count(self.monthly_mean(&plan, month), &mut rng);
            let n_days = month.days() as usize;
            let mut per_day = vec![0u32; n_days];
            for _ in 0..n_trips {
                per_day[rng.random_range(0..n_days)] += 1;
            }
            let first_day = month.first_day();
            let mut destinations = Vec::with_capacity(n_trips as usize);
            let (pmin, pmax) = if plan.sparse {
                (2, 2)
            } else {
                (cfg.pings_per_stay_min, cfg.pings_per_stay_max)
            };
            let night_rate = if plan.sparse { cfg.night_ping_rate * 0.15 } else { cfg.night_ping_rate };
            let night = Poisson::new(night_rate).expect("positive night rate");
            for (day, &count) in per_day.iter().enumerate() {
                let date = first_day + chrono::Days::new(day as u64);
                let midnight = clock.midnight_utc(date);
                if count > 0 {
                    let slot = (DAY_END_S - DAY_START_S) / count as i64;
                    let min_s = (cfg.stay_minutes_min * 60.0).round() as i64;
                    if slot < min_s + 60 {
                        return Err(Error::Config(format!(
                            "device {} has {count} trips on one day; rates too high for the daytime window",
                            plan.id
                        )));
                    }
                    let max_s = ((cfg.stay_minutes_max * 60.0).round() as i64).min(slot - 60);
                    for j in 0..count as i64 {
                        let dur = rng.random_range(min_s..=max_s);
                        let start = midnight + DAY_START_S + j * slot + rng.random_range(0..=slot - dur);
                        let dest = loop {
                            let u = rng.random::<f64>() * total_w;
                            let i = plan.cumulative.partition_point(|&c| c <= u).min(plan.cumulative.len() - 1);
                            if Some(i) != prev_dest {
                                break i;
                            }
                        };
                        prev_dest = Some(dest);
                        destinations.push(dest as u32);
                        let place = &self.layout.places[dest];
                        let n = rng.random_range(pmin..=pmax) as usize;
                        let mut times: Vec<i64> = (0..n - 2).map(|_| start + rng.random_range(0..=dur)).collect();
                        times.push(start);
                        times.push(start + dur);
                        times.sort_unstable();
                        for t in times {
                            emit(&mut rng, t, place.x, place.y, &mut pings);
                        }
                    }
                }
                let n_night = night.sample(&mut rng) as usize;
                let mut times: Vec<i64> = (0..n_night)
                    .map(|_| midnight + NIGHT_START_S + rng.random_range(0..NIGHT_LEN_S))
                    .collect();
                times.sort_unstable();
                for t in times {
                    emit(&mut rng, t, plan.x, plan.y, &mut pings);
                }
            }
            months.push(MonthTruth {
                month,
                present,
                trips: n_trips,
                destinations,
            });
        }
        pings.sort_by_key(|p| p.t);
        let truth = DeviceTruth {
            device_id: plan.id.clone(),
            arm: plan.arm,
            station_id: plan.station.map(|s| self.layout.stations[s].station_id.clone()),
            home: plan.home,
            home_stratum: self.home_stratum(plan.y),
            sparse: plan.sparse,
            months,
        };
        Ok((pings, truth))
    }

    /// All devices in index order, generated in parallel.
    pub fn generate(&self) -> Result<(Vec<Vec<Ping>>, GroundTruth)> {
        let out: Vec<(Vec<Ping>, DeviceTruth)> = (0..self.config.n_devices())
            .into_par_iter()
            .map(|i| self.device(i))
            .collect::<Result<_>>()?;
        let (pings, devices) = out.into_iter().unzip();
        Ok((pings, GroundTruth { devices }))
    }

    /// Writes every scenario file to `paths`.
    pub fn write(&self, paths: &ScenarioPaths) -> Result<GroundTruth> {
        for p in paths.all() {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
        }
        let (pings, truth) = self.generate()?;
        let mut w = std::io::BufWriter::with_capacity(1 << 20, std::fs::File::create(&paths.pings)?);
        writeln!(w, "device_id,timestamp,lat,lon,accuracy_m")?;
        for p in pings.iter().flatten() {
            write!(w, "{},{},{:.7},{:.7},", p.device_id, p.t, p.loc.lat(), p.loc.lon())?;
            match p.accuracy_m {
                Some(a) => writeln!(w, "{a:.1}")?,
                None => writeln!(w)?,
            }
        }
        w.flush()?;
        drop(pings);

        let mut w = std::io::BufWriter::new(std::fs::File::create(&paths.pois)?);
        writeln!(w, "poi_id,lat,lon,category")?;
        for p in &self.layout.pois {
            writeln!(w, "{},{:.7},{:.7},{}", p.poi_id, p.loc.lat(), p.loc.lon(), p.category)?;
        }
        w.flush()?;

        let mut w = std::io::BufWriter::new(std::fs::File::create(&paths.stations)?);
        writeln!(w, "station_id,lat,lon,line,buffer_m")?;
        for s in &self.layout.stations {
            writeln!(
                w,
                "{},{:.7},{:.7},{},{}",
                s.station_id,
                s.location.lat(),
                s.location.lon(),
                s.line,
                s.buffer_m
            )?;
        }
        w.flush()?;

        std::fs::write(&paths.zones, zones_to_geojson(&self.layout.zones))?;
        std::fs::write(&paths.regions, regions_to_geojson(&self.layout.regions))?;
        write_ground_truth(&paths.ground_truth, &truth, &self.layout)?;
        Ok(truth)
    }
}

fn write_ground_truth(path: &Path, truth: &GroundTruth, layout: &CityLayout) -> Result<()> {
    let exposure: std::collections::HashMap<(Arc<str>, Month), TrueExposure> = truth
        .exposure(layout)
        .into_iter()
        .map(|e| ((e.device_id.clone(), e.month), e))
        .collect();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "device_id,month,arm,station_id,home_lat,home_lon,home_stratum,sparse,present,trips,poi_visits,mean_entropy,mean_high_share"
    )?;
    for d in &truth.devices {
        for m in &d.months {
            let poi_visits = m
                .destinations
                .iter()
                .filter(|&&p| layout.places[p as usize].poi.is_some())
                .count();
            let (ent, share) = match exposure.get(&(d.device_id.clone(), m.month)) {
                Some(e) => (format!("{:.9}", e.mean_entropy), format!("{:.9}", e.mean_high_share)),
                None => (String::new(), String::new()),
            };
            writeln!(
                w,
                "{},{},{},{},{:.7},{:.7},{},{},{},{},{},{},{}",
                d.device_id,
                m.month,
                d.arm.map(|a| a.to_string()).unwrap_or_else(|| "background".into()),
                d.station_id.as_deref().unwrap_or(""),
                d.home.lat(),
                d.home.lon(),
                d.home_stratum,
                d.sparse as u8,
                m.present as u8,
                m.trips,
                poi_visits,
                ent,
                share
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::geodesic_distance;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            n_devices_per_arm: 6,
            n_background_devices: 3,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        ScenarioConfig::default().validate().unwrap();
        let s = Scenario::new(ScenarioConfig::default()).unwrap();
        assert_eq!(s.layout.stations.len(), 8);
        assert_eq!(s.layout.zones.len(), 6);
        assert!(s.layout.pois.len() > 500);
    }

    #[test]
    fn tiny_buffer_is_infeasible() {
        let cfg = ScenarioConfig {
            buffer_m: 50.0,
            ..ScenarioConfig::default()
        };
        assert!(matches!(Scenario::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_device() {
        let s = Scenario::new(small()).unwrap();
        let (a, ta) = s.device(3).unwrap();
        let (b, tb) = s.device(3).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let other = Scenario::new(ScenarioConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(other.device(3).unwrap().0, a);
    }

    #[test]
    fn counts_match_full_generation() {
        let s = Scenario::new(perturb(&small(), Knob::Attrition)).unwrap();
        for i in 0..s.config.n_devices() {
            let (_, truth) = s.device(i).unwrap();
            let counts = s.device_counts(i);
            for (a, b) in truth.months.iter().zip(&counts) {
                assert_eq!((a.present, a.trips), (b.present, b.trips));
                assert_eq!(a.destinations.len() as u32, a.trips);
            }
        }
    }

    #[test]
    fn homes_lie_inside_their_buffer() {
        let s = Scenario::new(small()).unwrap();
        for i in 0..s.config.n_devices() {
            let (_, t) = s.device(i).unwrap();
            match &t.station_id {
                Some(id) => {
                    let st = s.layout.stations.iter().find(|s| &s.station_id == id).unwrap();
                    assert!(geodesic_distance(st.location, t.home) <= 0.9 * st.buffer_m + 1e-6);
                    assert_eq!(Some(st.line), t.arm);
                }
                None => assert!(s
                    .layout
                    .stations
                    .iter()
                    .all(|st| geodesic_distance(st.location, t.home) > st.buffer_m)),
            }
        }
    }

    #[test]
    fn pings_are_sorted_and_inside_window() {
        let s = Scenario::new(small()).unwrap();
        let (lo, hi) = s.config.timezone.window_bounds(&s.config.window);
        let (pings, _) = s.device(0).unwrap();
        assert!(pings.windows(2).all(|w| w[0].t <= w[1].t));
        assert!(pings.iter().all(|p| (lo..hi).contains(&p.t)));
    }

    #[test]
    fn knobs_set_their_fields() {
        let base = ScenarioConfig::default();
        assert_eq!(perturb(&base, Knob::PretrendViolation).pretrend_slope, 1.0);
        assert_eq!(perturb(&base, Knob::Attrition).attrition_hazard, 0.05);
        assert_eq!(perturb(&base, Knob::SparseDevices).sparse_fraction, 0.2);
        assert_eq!("attrition".parse::<Knob>().unwrap(), Knob::Attrition);
    }
}
