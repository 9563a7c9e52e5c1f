//! Flat `key = value` pipeline configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::estimator::{SeMode, Solver};
use crate::geo::{GeoPoint, GridSpec};
use crate::ingest::QualityThresholds;
use crate::panel::{DestinationGroups, Outcome};
use crate::segregation::{ExposureWeighting, StratumSet};
use crate::stays::{HomeParams, StayParams};
use crate::synth::{ScenarioConfig, ScenarioPaths};
use crate::time::{LocalClock, Month, StudyWindow};

/// Every recognised key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("pings", "data/pings.csv"),
    ("pois", "data/pois.csv"),
    ("zones", "data/zones.geojson"),
    ("regions", "data/regions.geojson"),
    ("stations", "data/stations.csv"),
    ("ground_truth", "data/ground_truth.csv"),
    ("workdir", "work"),
    ("study_start", "2018-07"),
    ("study_end", "2019-06"),
    ("opening_month", "2018-12"),
    ("base_period", "2018-11"),
    ("timezone", "America/Bogota"),
    ("origin_lat", "4.60"),
    ("origin_lon", "-74.10"),
    ("side_m", "100"),
    ("stay_radius_m", "100"),
    ("stay_min_minutes", "5"),
    ("stay_max_hours", "24"),
    ("min_pings_per_month", "50"),
    ("min_active_days", "10"),
    ("home_radius_m", "100"),
    ("min_night_pings", "5"),
    ("trip_radius_m", "100"),
    ("poi_radius_m", "50"),
    ("buffer_m", "500"),
    ("high_income_strata", "4,5,6"),
    ("dest_low", "1,2"),
    ("dest_mid", "3,4"),
    ("dest_high", "5,6"),
    ("exposure_weighting", "visit"),
    (
        "outcomes",
        "trips_total,trips_low,trips_mid,trips_high,poi_visits,unique_pois,mean_entropy,mean_high_share",
    ),
    ("se_mode", "cluster_by_unit"),
    ("weighted", "false"),
    ("solver", "demeaning"),
    ("sim.seed", "1"),
    ("sim.n_devices_per_arm", "500"),
    ("sim.n_background_devices", "200"),
    ("sim.base_trip_rate", "100"),
    ("sim.effect_trips", "6.5"),
    ("sim.dispersion", "2"),
    ("sim.pings_per_stay_min", "2"),
    ("sim.pings_per_stay_max", "4"),
    ("sim.stay_minutes_min", "6"),
    ("sim.stay_minutes_max", "30"),
    ("sim.night_ping_rate", "1.5"),
    ("sim.jitter_m", "15.2"),
    ("sim.city_size_m", "12000"),
    ("sim.poi_spacing_m", "300"),
    ("sim.poi_fraction", "0.6"),
    ("sim.destination_decay_m", "4000"),
    ("sim.stations_per_arm", "4"),
    ("sim.pretrend_slope", "0"),
    ("sim.attrition_hazard", "0"),
    ("sim.sparse_fraction", "0"),
];

const PATH_KEYS: &[&str] = &["pings", "pois", "zones", "regions", "stations", "ground_truth", "workdir"];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim().to_owned();
        if out.insert(k.clone(), v.trim().to_owned()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(out)
}

/// Resolved pipeline configuration.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    values: BTreeMap<String, String>,
    base_dir: PathBuf,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn strata(key: &str, v: &str) -> Result<StratumSet> {
    let list = v
        .split(',')
        .map(|s| num::<u8>(key, s.trim()))
        .collect::<Result<Vec<u8>>>()?;
    if list.iter().any(|s| !(1..=6).contains(s)) {
        return Err(Error::Config(format!("{key}: strata must lie in 1..6")));
    }
    Ok(StratumSet::new(&list))
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_text(&text, &base)
    }

    /// `base_dir` anchors relative paths.
    pub fn from_text(text: &str, base_dir: &Path) -> Result<Self> {
        let given = parse_kv(text)?;
        let mut values: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in given {
            if !values.contains_key(&k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            values.insert(k, v);
        }
        let cfg = Self {
            values,
            base_dir: base_dir.to_path_buf(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn defaults() -> Self {
        Self::from_text("", Path::new(".")).expect("defaults are valid")
    }

    /// Commented default configuration, as written by `init`.
    pub fn default_text() -> String {
        let mut s = String::from("# mobiscope pipeline configuration\n# paths are relative to this file\n");
        for (k, v) in DEFAULTS {
            if *k == "study_start" {
                s.push_str("\n# study design\n");
            } else if *k == "stay_radius_m" {
                s.push_str("\n# thresholds\n");
            } else if *k == "sim.seed" {
                s.push_str("\n# synthetic scenario used by `simulate`\n");
            }
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_owned(), value.to_owned());
        self.validate()
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn validate(&self) -> Result<()> {
        let window = self.window()?;
        if window.len() < 2 {
            return Err(Error::Config("study window must span at least 2 months".into()));
        }
        let opening = self.opening()?;
        if !window.contains(opening) {
            return Err(Error::Config(format!("opening_month {opening} outside the study window")));
        }
        let base = self.base_period()?;
        if !window.contains(base) {
            return Err(Error::Config(format!("base_period {base} outside the study window")));
        }
        self.clock()?;
        self.grid()?;
        for key in [
            "side_m",
            "stay_radius_m",
            "stay_min_minutes",
            "stay_max_hours",
            "home_radius_m",
            "trip_radius_m",
            "poi_radius_m",
            "buffer_m",
        ] {
            let v: f64 = num(key, self.get(key))?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        for key in ["min_pings_per_month", "min_active_days", "min_night_pings"] {
            if num::<u64>(key, self.get(key))? == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        self.stay_params()?;
        self.groups()?;
        self.high_income()?;
        self.exposure_weighting()?;
        self.outcomes()?;
        self.se_mode()?;
        self.weighted()?;
        self.solver()?;
        self.scenario()?;
        Ok(())
    }

    pub fn path(&self, key: &str) -> PathBuf {
        let p = PathBuf::from(self.get(key));
        if p.is_absolute() {
            p
        } else {
            self.base_dir.join(p)
        }
    }

    /// `MOBISCOPE_WORKDIR` wins over the configured `workdir`.
    pub fn workdir(&self) -> PathBuf {
        match std::env::var_os("MOBISCOPE_WORKDIR") {
            Some(w) if !w.is_empty() => PathBuf::from(w),
            _ => self.path("workdir"),
        }
    }

    pub fn window(&self) -> Result<StudyWindow> {
        StudyWindow::new(self.get("study_start").parse()?, self.get("study_end").parse()?)
    }

    pub fn opening(&self) -> Result<Month> {
        self.get("opening_month").parse()
    }

    pub fn base_period(&self) -> Result<Month> {
        self.get("base_period").parse()
    }

    pub fn clock(&self) -> Result<LocalClock> {
        LocalClock::parse(self.get("timezone"))
    }

    pub fn origin(&self) -> Result<GeoPoint> {
        GeoPoint::new(num("origin_lat", self.get("origin_lat"))?, num("origin_lon", self.get("origin_lon"))?)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.origin()?, num("side_m", self.get("side_m"))?)
    }

    pub fn buffer_m(&self) -> Result<f64> {
        num("buffer_m", self.get("buffer_m"))
    }

    pub fn stay_params(&self) -> Result<StayParams> {
        let p = StayParams {
            radius_m: num("stay_radius_m", self.get("stay_radius_m"))?,
            min_duration_s: (num::<f64>("stay_min_minutes", self.get("stay_min_minutes"))? * 60.0).round() as i64,
            max_duration_s: (num::<f64>("stay_max_hours", self.get("stay_max_hours"))? * 3600.0).round() as i64,
        };
        if p.max_duration_s < p.min_duration_s {
            return Err(Error::Config("stay_max_hours below stay_min_minutes".into()));
        }
        Ok(p)
    }

    pub fn thresholds(&self) -> Result<QualityThresholds> {
        Ok(QualityThresholds {
            min_mean_pings_per_month: num("min_pings_per_month", self.get("min_pings_per_month"))?,
            min_active_days_per_year: num("min_active_days", self.get("min_active_days"))?,
        })
    }

    pub fn home_params(&self) -> Result<HomeParams> {
        Ok(HomeParams {
            radius_m: num("home_radius_m", self.get("home_radius_m"))?,
            min_night_pings: num("min_night_pings", self.get("min_night_pings"))?,
            ..HomeParams::default()
        })
    }

    pub fn trip_radius_m(&self) -> Result<f64> {
        num("trip_radius_m", self.get("trip_radius_m"))
    }

    pub fn poi_radius_m(&self) -> Result<f64> {
        num("poi_radius_m", self.get("poi_radius_m"))
    }

    pub fn high_income(&self) -> Result<StratumSet> {
        strata("high_income_strata", self.get("high_income_strata"))
    }

    pub fn groups(&self) -> Result<DestinationGroups> {
        Ok(DestinationGroups {
            low: strata("dest_low", self.get("dest_low"))?,
            mid: strata("dest_mid", self.get("dest_mid"))?,
            high: strata("dest_high", self.get("dest_high"))?,
        })
    }

    pub fn exposure_weighting(&self) -> Result<ExposureWeighting> {
        self.get("exposure_weighting").parse()
    }

    pub fn outcomes(&self) -> Result<Vec<Outcome>> {
        let list: Vec<Outcome> = self
            .get("outcomes")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()
            .map_err(|e| Error::Config(e.to_string()))?;
        if list.is_empty() {
            return Err(Error::Config("outcomes is empty".into()));
        }
        Ok(list)
    }

    pub fn se_mode(&self) -> Result<SeMode> {
        self.get("se_mode").parse()
    }

    pub fn weighted(&self) -> Result<bool> {
        match self.get("weighted") {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!("weighted: expected true or false, got {v:?}"))),
        }
    }

    pub fn solver(&self) -> Result<Solver> {
        match self.get("solver") {
            "demeaning" => Ok(Solver::Demeaning),
            "dummy_ols" => Ok(Solver::DummyOls),
            v => Err(Error::Config(format!("solver: expected demeaning or dummy_ols, got {v:?}"))),
        }
    }

    pub fn scenario_paths(&self) -> ScenarioPaths {
        ScenarioPaths {
            pings: self.path("pings"),
            pois: self.path("pois"),
            stations: self.path("stations"),
            zones: self.path("zones"),
            regions: self.path("regions"),
            ground_truth: self.path("ground_truth"),
        }
    }

    pub fn scenario(&self) -> Result<ScenarioConfig> {
        let g = |k: &str| self.get(k);
        let cfg = ScenarioConfig {
            seed: num("sim.seed", g("sim.seed"))?,
            n_devices_per_arm: num("sim.n_devices_per_arm", g("sim.n_devices_per_arm"))?,
            n_background_devices: num("sim.n_background_devices", g("sim.n_background_devices"))?,
            window: self.window()?,
            opening: self.opening()?,
            timezone: self.clock()?,
            origin: self.origin()?,
            base_trip_rate: num("sim.base_trip_rate", g("sim.base_trip_rate"))?,
            effect_trips: num("sim.effect_trips", g("sim.effect_trips"))?,
            dispersion: num("sim.dispersion", g("sim.dispersion"))?,
            pings_per_stay_min: num("sim.pings_per_stay_min", g("sim.pings_per_stay_min"))?,
            pings_per_stay_max: num("sim.pings_per_stay_max", g("sim.pings_per_stay_max"))?,
            stay_minutes_min: num("sim.stay_minutes_min", g("sim.stay_minutes_min"))?,
            stay_minutes_max: num("sim.stay_minutes_max", g("sim.stay_minutes_max"))?,
            night_ping_rate: num("sim.night_ping_rate", g("sim.night_ping_rate"))?,
            jitter_m: num("sim.jitter_m", g("sim.jitter_m"))?,
            city_size_m: num("sim.city_size_m", g("sim.city_size_m"))?,
            poi_spacing_m: num("sim.poi_spacing_m", g("sim.poi_spacing_m"))?,
            poi_fraction: num("sim.poi_fraction", g("sim.poi_fraction"))?,
            destination_decay_m: num("sim.destination_decay_m", g("sim.destination_decay_m"))?,
            stations_per_arm: num("sim.stations_per_arm", g("sim.stations_per_arm"))?,
            buffer_m: self.buffer_m()?,
            pretrend_slope: num("sim.pretrend_slope", g("sim.pretrend_slope"))?,
            attrition_hazard: num("sim.attrition_hazard", g("sim.attrition_hazard"))?,
            sparse_fraction: num("sim.sparse_fraction", g("sim.sparse_fraction"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key=value` text of the given keys, used for digests.
    pub fn canonical(&self, keys: &[&str]) -> String {
        keys.iter()
            .map(|k| format!("{k}={}\n", self.get(k)))
            .collect()
    }

    /// Canonical text of every non-path key.
    pub fn canonical_all(&self) -> String {
        self.values
            .iter()
            .filter(|(k, _)| !PATH_KEYS.contains(&k.as_str()))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}
