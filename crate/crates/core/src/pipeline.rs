//! Pipeline stages, in memory and as cached workdir stages.
//!
//! The in-memory functions are what the stages call after loading their
//! inputs; [`analyze_traces`] chains them without touching disk.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::artifacts::{self, Manifest, OutputRecord, PanelRow, StageRecord};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::estimator::{fit_event_study, EventStudyFit, EventStudySpec, FitReport, SeMode};
use crate::geo::{
    read_regions, read_stations, read_zones, region_lookup, stratum_lookup, GridSpec, HexId, Line, Region, Station,
    StratumZone,
};
use crate::ingest::{
    device_quality, open_source, parse_pings, parse_traces, read_source, ParseOptions, Ping, QualityThresholds, RejectReport,
    Traces,
};
use crate::panel::{build_device_records, build_panel, hex_arm, DestinationGroups, DevicePanelRecord, Outcome, PanelCell};
use crate::segregation::{
    exposure_by_device_month, poi_profiles, ExposureRecord, ExposureWeighting, HomeStrata, PoiVisitorProfile,
    StratumSet,
};
use crate::stays::{
    detect_stays, infer_homes, read_pois, trips_outside_home, Annotator, HomeLocation, HomeParams, PoiIndex, Stay,
    StayParams,
};
use crate::synth::Scenario;
use crate::time::{LocalClock, Month, StudyWindow};

/// Spatial inputs shared by several stages.
pub struct Geography {
    pub grid: GridSpec,
    pub stations: Vec<Station>,
    pub zones: Vec<StratumZone>,
    pub regions: Vec<Region>,
    pub pois: PoiIndex,
}

impl Geography {
    pub fn annotator(&self) -> Annotator<'_> {
        Annotator {
            grid: &self.grid,
            zones: &self.zones,
            regions: &self.regions,
            pois: &self.pois,
        }
    }

    pub fn from_scenario(s: &Scenario, side_m: f64, poi_radius_m: f64) -> Result<Self> {
        Ok(Self {
            grid: GridSpec::new(s.config.origin, side_m)?,
            stations: s.layout.stations.clone(),
            zones: s.layout.zones.clone(),
            regions: s.layout.regions.clone(),
            pois: PoiIndex::new(s.layout.pois.clone(), poi_radius_m)?,
        })
    }
}

/// Thresholds and design choices of the analysis.
#[derive(Clone, Debug)]
pub struct AnalysisParams {
    pub window: StudyWindow,
    pub clock: LocalClock,
    pub quality: QualityThresholds,
    pub stay: StayParams,
    pub home: HomeParams,
    pub trip_radius_m: f64,
    pub high_income: StratumSet,
    pub groups: DestinationGroups,
    pub weighting: ExposureWeighting,
}

impl AnalysisParams {
    pub fn from_config(c: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            window: c.window()?,
            clock: c.clock()?,
            quality: c.thresholds()?,
            stay: c.stay_params()?,
            home: c.home_params()?,
            trip_radius_m: c.trip_radius_m()?,
            high_income: c.high_income()?,
            groups: c.groups()?,
            weighting: c.exposure_weighting()?,
        })
    }

    /// The standard thresholds over a scenario's window and time zone.
    pub fn for_scenario(s: &Scenario) -> Self {
        Self {
            window: s.config.window,
            clock: s.config.timezone.clone(),
            quality: QualityThresholds::default(),
            stay: StayParams::default(),
            home: HomeParams::default(),
            trip_radius_m: 100.0,
            high_income: StratumSet::high_income_visitors(),
            groups: DestinationGroups::default(),
            weighting: ExposureWeighting::Visit,
        }
    }
}

/// Whether one device's trace passes the quality filter.
pub fn device_passes(trace: &[Ping], params: &AnalysisParams) -> bool {
    device_quality(trace, &params.window, &params.clock)
        .values()
        .next()
        .is_some_and(|q| q.passes(params.quality.min_mean_pings_per_month, params.quality.min_active_days_per_year))
}

/// Annotated stays of one device.
pub fn device_stays(trace: &[Ping], params: &AnalysisParams, geo: &Geography) -> Result<Vec<Stay>> {
    let mut stays = detect_stays(trace, &params.stay)?;
    let ann = geo.annotator();
    for s in &mut stays {
        ann.annotate(s);
    }
    Ok(stays)
}

pub fn night_pings(trace: &[Ping], params: &AnalysisParams) -> Vec<Ping> {
    trace
        .iter()
        .filter(|p| params.home.night.anchor_day(&params.clock, p.t).is_some())
        .cloned()
        .collect()
}

/// Output of the per-device stages.
#[derive(Clone, Debug, Default)]
pub struct DeviceOutput {
    pub stays: Vec<Stay>,
    pub homes: Vec<HomeLocation>,
    pub trips: Vec<Stay>,
}

pub fn process_device(trace: &[Ping], params: &AnalysisParams, geo: &Geography) -> Result<DeviceOutput> {
    let stays = device_stays(trace, params, geo)?;
    let homes = infer_homes(&night_pings(trace, params), &params.clock, &params.window, &params.home, Some(&geo.grid));
    let trips = trips_outside_home(&stays, &homes, &params.clock, params.trip_radius_m);
    Ok(DeviceOutput { stays, homes, trips })
}

/// Home stratum of every device-month with a home inside a zone.
pub fn home_strata(homes: &[HomeLocation], zones: &[StratumZone]) -> HomeStrata {
    homes
        .iter()
        .filter_map(|h| stratum_lookup(h.loc, zones).map(|s| ((h.device_id.clone(), h.month), s)))
        .collect()
}

pub fn profiles_and_exposure(
    trips: &[Stay],
    homes: &[HomeLocation],
    zones: &[StratumZone],
    params: &AnalysisParams,
) -> (Vec<PoiVisitorProfile>, Vec<ExposureRecord>) {
    let strata = home_strata(homes, zones);
    let profiles = poi_profiles(trips, &strata, &params.clock, &params.high_income);
    let exposure = exposure_by_device_month(trips, &profiles, &params.clock, params.weighting);
    (profiles, exposure)
}

/// Units treated in the event study: hexagons whose nearest station is on
/// the treatment line.
pub fn treated_hexes(panel: &[PanelCell], grid: &GridSpec, stations: &[Station]) -> BTreeSet<HexId> {
    panel
        .iter()
        .map(|c| c.hex_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|&h| hex_arm(grid, h, stations) == Some(Line::Treatment))
        .collect()
}

/// Everything produced by an in-memory run over device traces.
#[derive(Debug)]
pub struct Analysis {
    pub passing: BTreeSet<Arc<str>>,
    pub stays: usize,
    pub homes: Vec<HomeLocation>,
    pub trips: Vec<Stay>,
    pub profiles: Vec<PoiVisitorProfile>,
    pub exposure: Vec<ExposureRecord>,
    pub records: Vec<DevicePanelRecord>,
}

impl Analysis {
    /// Detected trips per device-month.
    pub fn trip_counts(&self) -> BTreeMap<(Arc<str>, Month), u64> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            out.insert((r.device_id.clone(), r.month), r.trips_total);
        }
        out
    }

    pub fn panel(&self, outcome: &Outcome, opening: Month, geo: &Geography) -> Vec<PanelCell> {
        build_panel(&self.records, outcome, opening, &geo.grid, &geo.stations).0
    }
}

/// Runs filter, stays, homes, trips, profiles, exposure and device records
/// over per-device traces (each sorted by time).
pub fn analyze_traces(traces: &[Vec<Ping>], params: &AnalysisParams, geo: &Geography) -> Result<Analysis> {
    let outputs: Vec<Option<DeviceOutput>> = traces
        .par_iter()
        .map(|trace| {
            if trace.is_empty() || !device_passes(trace, params) {
                return Ok(None);
            }
            process_device(trace, params, geo).map(Some)
        })
        .collect::<Result<_>>()?;
    let mut passing = BTreeSet::new();
    let mut stays = 0;
    let mut homes = Vec::new();
    let mut trips = Vec::new();
    for (trace, out) in traces.iter().zip(outputs) {
        if let Some(out) = out {
            passing.insert(trace[0].device_id.clone());
            stays += out.stays.len();
            homes.extend(out.homes);
            trips.extend(out.trips);
        }
    }
    let (profiles, exposure) = profiles_and_exposure(&trips, &homes, &geo.zones, params);
    let (records, _) = build_device_records(&trips, &exposure, &homes, &geo.stations, &params.clock, &params.groups);
    Ok(Analysis {
        passing,
        stays,
        homes,
        trips,
        profiles,
        exposure,
        records,
    })
}

/// Generates a scenario in memory and fits the event study on one outcome.
pub fn simulate_and_fit(scenario: &Scenario, outcome: &Outcome, spec: &EventStudySpec) -> Result<(Analysis, EventStudyFit)> {
    let geo = Geography::from_scenario(scenario, 100.0, 50.0)?;
    let params = AnalysisParams::for_scenario(scenario);
    let (traces, _) = scenario.generate()?;
    let analysis = analyze_traces(&traces, &params, &geo)?;
    drop(traces);
    let panel = analysis.panel(outcome, scenario.config.opening, &geo);
    let mut spec = spec.clone();
    spec.treated_units = Some(treated_hexes(&panel, &geo.grid, &geo.stations));
    let fit = fit_event_study(&panel, &spec)?;
    Ok((analysis, fit))
}

// ---------------------------------------------------------------------------
// Workdir stages
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Stays,
    Homes,
    Profiles,
    Panel,
    Fit,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Stays,
        Stage::Homes,
        Stage::Profiles,
        Stage::Panel,
        Stage::Fit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Stays => "stays",
            Stage::Homes => "homes",
            Stage::Profiles => "profiles",
            Stage::Panel => "panel",
            Stage::Fit => "fit",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

const GRID_KEYS: &[&str] = &["origin_lat", "origin_lon", "side_m"];
const WINDOW_KEYS: &[&str] = &["study_start", "study_end", "timezone"];

/// What happened to a stage in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

/// Drives stages over a workdir, recording digests in `manifest.json`.
pub struct Runner {
    pub config: PipelineConfig,
    pub workdir: PathBuf,
    pub force: bool,
    /// Progress lines go here.
    pub log: Box<dyn FnMut(&str) + Send>,
}

fn fit_file_stem(outcome: &Outcome) -> String {
    format!("fit_{}", outcome.to_string().replace(':', "-"))
}

impl Runner {
    pub fn new(config: PipelineConfig) -> Self {
        let workdir = config.workdir();
        Self {
            config,
            workdir,
            force: false,
            log: Box::new(|s| eprintln!("{s}")),
        }
    }

    fn work(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    fn params(&self) -> Result<AnalysisParams> {
        AnalysisParams::from_config(&self.config)
    }

    fn stage_inputs(&self, stage: Stage) -> Vec<(String, PathBuf)> {
        let cfg = |k: &str| (k.to_string(), self.config.path(k));
        let work = |n: &str| (n.to_string(), self.work(n));
        let mut v = match stage {
            Stage::Ingest => vec![cfg("pings")],
            Stage::Stays => vec![cfg("pings"), work("devices.csv"), cfg("pois"), cfg("zones")],
            Stage::Homes => vec![work("night_pings.csv"), work("stays.csv")],
            Stage::Profiles => vec![work("trips.csv"), work("homes.csv"), cfg("zones")],
            Stage::Panel => vec![work("trips.csv"), work("exposure.csv"), work("homes.csv"), cfg("stations")],
            Stage::Fit => vec![work("panel.csv"), cfg("stations")],
        };
        if matches!(stage, Stage::Stays | Stage::Panel) && !self.config.get("regions").is_empty() {
            v.push(cfg("regions"));
        }
        v
    }

    fn stage_keys(&self, stage: Stage) -> Vec<&'static str> {
        let mut keys: Vec<&'static str> = WINDOW_KEYS.to_vec();
        keys.extend_from_slice(match stage {
            Stage::Ingest => &["min_pings_per_month", "min_active_days"],
            Stage::Stays => &["stay_radius_m", "stay_min_minutes", "stay_max_hours", "poi_radius_m", "origin_lat", "origin_lon", "side_m"],
            Stage::Homes => &["home_radius_m", "min_night_pings", "trip_radius_m", "origin_lat", "origin_lon", "side_m"],
            Stage::Profiles => &["high_income_strata", "exposure_weighting"],
            Stage::Panel => &["buffer_m", "dest_low", "dest_mid", "dest_high", "opening_month", "outcomes", "origin_lat", "origin_lon", "side_m"],
            Stage::Fit => &["buffer_m", "opening_month", "base_period", "outcomes", "se_mode", "weighted", "solver"],
        });
        if stage == Stage::Fit {
            keys.extend_from_slice(GRID_KEYS);
        }
        keys
    }

    fn stage_outputs(&self, stage: Stage) -> Result<Vec<String>> {
        Ok(match stage {
            Stage::Ingest => vec!["devices.csv".into(), "reject_report.json".into()],
            Stage::Stays => vec!["stays.csv".into(), "night_pings.csv".into()],
            Stage::Homes => vec!["homes.csv".into(), "trips.csv".into()],
            Stage::Profiles => vec!["profiles.csv".into(), "exposure.csv".into()],
            Stage::Panel => vec!["device_records.csv".into(), "panel.csv".into(), "panel_stats.json".into()],
            Stage::Fit => self
                .config
                .outcomes()?
                .iter()
                .flat_map(|o| {
                    let stem = fit_file_stem(o);
                    [format!("{stem}.json"), format!("{stem}.csv")]
                })
                .collect(),
        })
    }

    /// Runs one stage unless its recorded digests are current.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageStatus> {
        std::fs::create_dir_all(&self.workdir)?;
        let manifest_path = self.work("manifest.json");
        let mut manifest = Manifest::load(&manifest_path)?;
        let mut inputs = BTreeMap::new();
        for (label, path) in self.stage_inputs(stage) {
            let (digest, _) = artifacts::file_digest(&path).map_err(|e| match e {
                Error::MissingArtifact(_) => Error::MissingArtifact(format!(
                    "stage {stage} needs {label} at {}",
                    path.display()
                )),
                e => e,
            })?;
            inputs.insert(label, digest);
        }
        let params_digest = artifacts::sha256_hex(self.config.canonical(&self.stage_keys(stage)).as_bytes());
        let outputs = self.stage_outputs(stage)?;

        if !self.force {
            if let Some(prev) = manifest.stages.get(stage.name()) {
                let current = prev.params_digest == params_digest
                    && prev.inputs == inputs
                    && outputs.len() == prev.outputs.len()
                    && outputs.iter().all(|o| {
                        prev.outputs.get(o).is_some_and(|rec| {
                            artifacts::file_digest(&self.work(o)).is_ok_and(|(d, _)| d == rec.sha256)
                        })
                    });
                if current {
                    (self.log)(&format!("{stage}: up to date"));
                    return Ok(StageStatus::Skipped);
                }
            }
        }

        let started = Instant::now();
        match stage {
            Stage::Ingest => self.ingest()?,
            Stage::Stays => self.stays()?,
            Stage::Homes => self.homes()?,
            Stage::Profiles => self.profiles()?,
            Stage::Panel => self.panel()?,
            Stage::Fit => self.fit()?,
        }
        let elapsed = started.elapsed().as_secs_f64();

        let mut out_records = BTreeMap::new();
        for o in &outputs {
            let (sha256, lines) = artifacts::file_digest(&self.work(o))?;
            let rows = if o.ends_with(".csv") { lines.saturating_sub(1) } else { lines };
            out_records.insert(o.clone(), OutputRecord { sha256, rows });
        }
        manifest.config_digest = artifacts::sha256_hex(self.config.canonical_all().as_bytes());
        manifest.stages.insert(
            stage.name().to_string(),
            StageRecord {
                params_digest,
                inputs,
                outputs: out_records,
            },
        );
        manifest.save(&manifest_path)?;
        self.record_timing(stage, elapsed)?;
        (self.log)(&format!("{stage}: done in {elapsed:.2} s"));
        Ok(StageStatus::Ran)
    }

    /// Runs every stage in order.
    pub fn run_all(&mut self) -> Result<Vec<StageStatus>> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    fn record_timing(&self, stage: Stage, seconds: f64) -> Result<()> {
        let path = self.work("timings.json");
        let mut t: BTreeMap<String, f64> = match std::fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        t.insert(stage.name().to_string(), seconds);
        std::fs::write(path, serde_json::to_string_pretty(&t)? + "\n")?;
        Ok(())
    }

    fn load_traces(&self) -> Result<(Traces, RejectReport)> {
        let params = self.params()?;
        let opts = ParseOptions {
            window: Some(params.clock.window_bounds(&params.window)),
        };
        parse_traces(&read_source(&self.config.path("pings"))?, &opts)
    }

    fn load_geography(&self) -> Result<Geography> {
        let zones = read_zones(File::open(self.config.path("zones"))?)?;
        let regions = if self.config.get("regions").is_empty() {
            Vec::new()
        } else {
            read_regions(File::open(self.config.path("regions"))?)?
        };
        let pois = read_pois(File::open(self.config.path("pois"))?)?;
        Ok(Geography {
            grid: self.config.grid()?,
            stations: Vec::new(),
            zones,
            regions,
            pois: PoiIndex::new(pois, self.config.poi_radius_m()?)?,
        })
    }

    fn load_stations(&self) -> Result<Vec<Station>> {
        read_stations(File::open(self.config.path("stations"))?, self.config.buffer_m()?)
    }

    fn ingest(&self) -> Result<()> {
        let params = self.params()?;
        let (traces, report) = self.load_traces()?;
        let passes: Vec<bool> = traces.par_iter().map(|(_, t)| device_passes(t, &params)).collect();
        let passing: Vec<&Arc<str>> = traces.iter().zip(&passes).filter(|(_, &ok)| ok).map(|((d, _), _)| d).collect();
        artifacts::write_devices(&self.work("devices.csv"), passing.iter().map(|d| d.as_ref()))?;
        #[derive(serde::Serialize)]
        struct Report<'a> {
            #[serde(flatten)]
            parse: &'a RejectReport,
            devices_seen: usize,
            devices_passing: usize,
        }
        let text = serde_json::to_string_pretty(&Report {
            parse: &report,
            devices_seen: traces.len(),
            devices_passing: passing.len(),
        })?;
        std::fs::write(self.work("reject_report.json"), text + "\n")?;
        Ok(())
    }

    fn stays(&self) -> Result<()> {
        let params = self.params()?;
        let geo = self.load_geography()?;
        let passing: HashSet<String> = artifacts::read_devices(&self.work("devices.csv"))?.into_iter().collect();
        let (mut traces, _) = self.load_traces()?;
        traces.retain(|(d, _)| passing.contains(&**d));
        let per_device: Vec<(Vec<Stay>, Vec<Ping>)> = traces
            .par_iter()
            .map(|(_, trace)| Ok((device_stays(trace, &params, &geo)?, night_pings(trace, &params))))
            .collect::<Result<_>>()?;
        let (stays, nights): (Vec<_>, Vec<_>) = per_device.into_iter().unzip();
        artifacts::write_stays(&self.work("stays.csv"), &stays.concat())?;
        artifacts::write_pings(&self.work("night_pings.csv"), &nights.concat())?;
        Ok(())
    }

    fn homes(&self) -> Result<()> {
        let params = self.params()?;
        let grid = self.config.grid()?;
        let (night, _) = parse_pings(open_source(&self.work("night_pings.csv"))?, &ParseOptions::default())?;
        let stays = artifacts::read_stays(&self.work("stays.csv"))?;
        let mut stays_by_device: BTreeMap<Arc<str>, Vec<Stay>> = BTreeMap::new();
        for s in stays {
            stays_by_device.entry(s.device_id.clone()).or_default().push(s);
        }
        let traces = crate::ingest::group_by_device(night);
        let per_device: Vec<(Vec<HomeLocation>, Vec<Stay>)> = traces
            .par_iter()
            .map(|(dev, trace)| {
                let homes = infer_homes(trace, &params.clock, &params.window, &params.home, Some(&grid));
                let trips = stays_by_device
                    .get(dev)
                    .map(|s| trips_outside_home(s, &homes, &params.clock, params.trip_radius_m))
                    .unwrap_or_default();
                (homes, trips)
            })
            .collect();
        let (homes, trips): (Vec<_>, Vec<_>) = per_device.into_iter().unzip();
        artifacts::write_homes(&self.work("homes.csv"), &homes.concat())?;
        artifacts::write_stays(&self.work("trips.csv"), &trips.concat())?;
        Ok(())
    }

    fn profiles(&self) -> Result<()> {
        let params = self.params()?;
        let zones = read_zones(File::open(self.config.path("zones"))?)?;
        let trips = artifacts::read_stays(&self.work("trips.csv"))?;
        let homes = artifacts::read_homes(&self.work("homes.csv"))?;
        let (profiles, exposure) = profiles_and_exposure(&trips, &homes, &zones, &params);
        artifacts::write_profiles(&self.work("profiles.csv"), &profiles)?;
        artifacts::write_exposure(&self.work("exposure.csv"), &exposure)?;
        Ok(())
    }

    fn panel(&self) -> Result<()> {
        let params = self.params()?;
        let grid = self.config.grid()?;
        let stations = self.load_stations()?;
        let regions = if self.config.get("regions").is_empty() {
            Vec::new()
        } else {
            read_regions(File::open(self.config.path("regions"))?)?
        };
        let mut trips = artifacts::read_stays(&self.work("trips.csv"))?;
        for t in &mut trips {
            t.region = region_lookup(t.centroid, &regions).map(Arc::from);
        }
        let exposure = artifacts::read_exposure(&self.work("exposure.csv"))?;
        let homes = artifacts::read_homes(&self.work("homes.csv"))?;
        let (records, record_stats) =
            build_device_records(&trips, &exposure, &homes, &stations, &params.clock, &params.groups);
        artifacts::write_records(&self.work("device_records.csv"), &records)?;
        let opening = self.config.opening()?;
        let mut rows = Vec::new();
        let mut panel_stats = BTreeMap::new();
        for outcome in self.config.outcomes()? {
            let (cells, stats) = build_panel(&records, &outcome, opening, &grid, &stations);
            panel_stats.insert(outcome.to_string(), stats);
            rows.extend(cells.into_iter().map(|cell| PanelRow {
                outcome: outcome.to_string(),
                cell,
            }));
        }
        artifacts::write_panel(&self.work("panel.csv"), &rows)?;
        let stats = serde_json::json!({ "records": record_stats, "outcomes": panel_stats });
        std::fs::write(self.work("panel_stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
        Ok(())
    }

    pub fn fit_spec(&self) -> Result<EventStudySpec> {
        let mut spec = EventStudySpec::new(self.config.base_period()?);
        spec.se_mode = self.config.se_mode()?;
        spec.weighted = self.config.weighted()?;
        spec.solver = self.config.solver()?;
        Ok(spec)
    }

    fn fit(&self) -> Result<()> {
        let grid = self.config.grid()?;
        let stations = self.load_stations()?;
        let rows = artifacts::read_panel(&self.work("panel.csv"))?;
        let base_spec = self.fit_spec()?;
        for outcome in self.config.outcomes()? {
            let name = outcome.to_string();
            let cells: Vec<PanelCell> = rows.iter().filter(|r| r.outcome == name).map(|r| r.cell.clone()).collect();
            if cells.is_empty() {
                return Err(Error::Estimation(format!("panel has no cells for outcome {name}")));
            }
            let mut spec = base_spec.clone();
            spec.treated_units = Some(treated_hexes(&cells, &grid, &stations));
            let fit = fit_event_study(&cells, &spec).map_err(|e| match e {
                Error::Singular(m) => Error::Singular(format!("{name}: {m}")),
                Error::Estimation(m) => Error::Estimation(format!("{name}: {m}")),
                e => e,
            })?;
            let stem = fit_file_stem(&outcome);
            artifacts::write_fit(
                &self.work(&format!("{stem}.json")),
                &self.work(&format!("{stem}.csv")),
                &FitReport::new(&name, &fit),
            )?;
        }
        Ok(())
    }

    /// Writes the scenario's input files to the configured paths.
    pub fn simulate(&mut self) -> Result<()> {
        let scenario = Scenario::new(self.config.scenario()?)?;
        let started = Instant::now();
        let truth = scenario.write(&self.config.scenario_paths())?;
        (self.log)(&format!(
            "simulate: {} devices, {} trips in {:.2} s",
            truth.devices.len(),
            truth.total_trips(),
            started.elapsed().as_secs_f64()
        ));
        Ok(())
    }

    /// Renders the per-month table of one outcome's fit and writes
    /// `report_<outcome>.csv`.
    pub fn report(&self, outcome: Option<&str>) -> Result<String> {
        let outcome: Outcome = match outcome {
            Some(o) => o.parse()?,
            None => self.config.outcomes()?.remove(0),
        };
        let stem = fit_file_stem(&outcome);
        let fit = artifacts::read_fit(&self.work(&format!("{stem}.json")))?;
        let (text, csv) = render_report(&fit);
        std::fs::write(self.work(&format!("report_{}.csv", outcome.to_string().replace(':', "-"))), csv)?;
        Ok(text)
    }
}

/// Text table and CSV for a fit; months whose interval excludes zero are
/// flagged with `*`.
pub fn render_report(fit: &FitReport) -> (String, String) {
    let se_mode = match fit.se_mode {
        SeMode::Hc1 => "HC1",
        SeMode::ClusterByUnit => "clustered by hexagon",
    };
    let mut t = format!(
        "outcome {}  base {}  opening {}  SE {}  n = {} cells, {} hexagons\n",
        fit.outcome, fit.base_period, fit.opening, se_mode, fit.n_obs, fit.n_units
    );
    t.push_str(&format!(
        "{:<8} {:>10} {:>9} {:>10} {:>10}\n",
        "month", "beta", "se", "ci_lo", "ci_hi"
    ));
    let mut csv = String::from("month,beta,se,ci_lo,ci_hi,flagged\n");
    for p in &fit.periods {
        let flag = p.excludes_zero();
        t.push_str(&format!(
            "{:<8} {:>10.4} {:>9.4} {:>10.4} {:>10.4}{}\n",
            p.month.to_string(),
            p.beta,
            p.se,
            p.ci_lo,
            p.ci_hi,
            if flag { " *" } else { "" }
        ));
        csv.push_str(&format!("{},{},{},{},{},{}\n", p.month, p.beta, p.se, p.ci_lo, p.ci_hi, flag as u8));
    }
    t.push_str(&format!("pooled   {:>10.4} {:>9.4}\n", fit.pooled.beta, fit.pooled.se));
    match &fit.pretrend {
        Some(w) => t.push_str(&format!("pretrend chi2({}) = {:.3}, p = {:.4}\n", w.df, w.stat, w.p)),
        None => t.push_str("pretrend not available\n"),
    }
    t.push_str("* 95% interval excludes 0\n");
    (t, csv)
}
