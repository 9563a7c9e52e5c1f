//! Device-month records and the hexagon-by-month outcome panel.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geo::{in_buffer, nearest_station, GridSpec, HexId, Line, Station};
use crate::segregation::{ExposureRecord, StratumSet};
use crate::stays::{HomeLocation, Stay};
use crate::time::{LocalClock, Month};

/// Destination stratum groups used to split trips.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DestinationGroups {
    pub low: StratumSet,
    pub mid: StratumSet,
    pub high: StratumSet,
}

impl Default for DestinationGroups {
    fn default() -> Self {
        Self {
            low: StratumSet::new(&[1, 2]),
            mid: StratumSet::new(&[3, 4]),
            high: StratumSet::new(&[5, 6]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DevicePanelRecord {
    pub device_id: Arc<str>,
    pub month: Month,
    pub home_hex: HexId,
    pub arm: Line,
    pub trips_total: u64,
    pub trips_low: u64,
    pub trips_mid: u64,
    pub trips_high: u64,
    /// Trips whose destination has no stratum (or a stratum in no group).
    pub trips_unclassified: u64,
    pub trips_by_region: BTreeMap<Arc<str>, u64>,
    pub poi_visits: u64,
    pub unique_pois: u64,
    pub mean_entropy: Option<f64>,
    pub mean_high_share: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RecordStats {
    pub homes_outside_buffers: u64,
    pub homes_without_hex: u64,
    pub movers_dropped: u64,
}

/// Joins trips, exposure and homes into one record per device-month whose
/// home lies in a station buffer. Devices whose arm changes between
/// months are dropped entirely.
pub fn build_device_records(
    trips: &[Stay],
    exposure: &[ExposureRecord],
    homes: &[HomeLocation],
    stations: &[Station],
    clock: &LocalClock,
    groups: &DestinationGroups,
) -> (Vec<DevicePanelRecord>, RecordStats) {
    let mut stats = RecordStats::default();
    let mut by_key: HashMap<(Arc<str>, Month), Vec<&Stay>> = HashMap::new();
    for s in trips {
        by_key.entry((s.device_id.clone(), clock.month_of(s.start))).or_default().push(s);
    }
    let exposure: HashMap<(Arc<str>, Month), &ExposureRecord> =
        exposure.iter().map(|e| ((e.device_id.clone(), e.month), e)).collect();

    let mut records = Vec::new();
    for h in homes {
        let Some(station) = in_buffer(h.loc, stations) else {
            stats.homes_outside_buffers += 1;
            continue;
        };
        let Some(home_hex) = h.hex else {
            stats.homes_without_hex += 1;
            continue;
        };
        let key = (h.device_id.clone(), h.month);
        let mut rec = DevicePanelRecord {
            device_id: h.device_id.clone(),
            month: h.month,
            home_hex,
            arm: station.line,
            trips_total: 0,
            trips_low: 0,
            trips_mid: 0,
            trips_high: 0,
            trips_unclassified: 0,
            trips_by_region: BTreeMap::new(),
            poi_visits: 0,
            unique_pois: 0,
            mean_entropy: None,
            mean_high_share: None,
        };
        let mut pois = BTreeSet::new();
        for s in by_key.get(&key).map(Vec::as_slice).unwrap_or(&[]) {
            rec.trips_total += 1;
            match s.stratum {
                Some(st) if groups.low.contains(st) => rec.trips_low += 1,
                Some(st) if groups.mid.contains(st) => rec.trips_mid += 1,
                Some(st) if groups.high.contains(st) => rec.trips_high += 1,
                _ => rec.trips_unclassified += 1,
            }
            if let Some(r) = &s.region {
                *rec.trips_by_region.entry(r.clone()).or_insert(0) += 1;
            }
            if let Some(p) = &s.poi_id {
                rec.poi_visits += 1;
                pois.insert(p.clone());
            }
        }
        rec.unique_pois = pois.len() as u64;
        if let Some(e) = exposure.get(&key) {
            rec.mean_entropy = Some(e.mean_entropy);
            rec.mean_high_share = Some(e.mean_high_income_share);
        }
        records.push(rec);
    }

    let mut arms: HashMap<Arc<str>, BTreeSet<Line>> = HashMap::new();
    for r in &records {
        arms.entry(r.device_id.clone()).or_default().insert(r.arm);
    }
    let movers: BTreeSet<Arc<str>> = arms
        .into_iter()
        .filter(|(_, a)| a.len() > 1)
        .map(|(d, _)| d)
        .collect();
    stats.movers_dropped = movers.len() as u64;
    records.retain(|r| !movers.contains(&r.device_id));
    records.sort_by(|a, b| a.device_id.cmp(&b.device_id).then(a.month.cmp(&b.month)));
    (records, stats)
}

/// Panel outcome variable.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Outcome {
    TripsTotal,
    TripsLow,
    TripsMid,
    TripsHigh,
    TripsRegion(String),
    PoiVisits,
    UniquePois,
    MeanEntropy,
    MeanHighShare,
}

impl Outcome {
    /// The fixed outcomes; region outcomes depend on the region file.
    pub fn standard() -> Vec<Outcome> {
        vec![
            Outcome::TripsTotal,
            Outcome::TripsLow,
            Outcome::TripsMid,
            Outcome::TripsHigh,
            Outcome::PoiVisits,
            Outcome::UniquePois,
            Outcome::MeanEntropy,
            Outcome::MeanHighShare,
        ]
    }

    pub fn value(&self, r: &DevicePanelRecord) -> Option<f64> {
        Some(match self {
            Outcome::TripsTotal => r.trips_total as f64,
            Outcome::TripsLow => r.trips_low as f64,
            Outcome::TripsMid => r.trips_mid as f64,
            Outcome::TripsHigh => r.trips_high as f64,
            Outcome::TripsRegion(id) => r.trips_by_region.get(id.as_str()).copied().unwrap_or(0) as f64,
            Outcome::PoiVisits => r.poi_visits as f64,
            Outcome::UniquePois => r.unique_pois as f64,
            Outcome::MeanEntropy => r.mean_entropy?,
            Outcome::MeanHighShare => r.mean_high_share?,
        })
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::TripsTotal => f.write_str("trips_total"),
            Outcome::TripsLow => f.write_str("trips_low"),
            Outcome::TripsMid => f.write_str("trips_mid"),
            Outcome::TripsHigh => f.write_str("trips_high"),
            Outcome::TripsRegion(r) => write!(f, "trips_region:{r}"),
            Outcome::PoiVisits => f.write_str("poi_visits"),
            Outcome::UniquePois => f.write_str("unique_pois"),
            Outcome::MeanEntropy => f.write_str("mean_entropy"),
            Outcome::MeanHighShare => f.write_str("mean_high_share"),
        }
    }
}

impl FromStr for Outcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(r) = s.strip_prefix("trips_region:") {
            if r.is_empty() {
                return Err(Error::Config("trips_region needs a region id".into()));
            }
            return Ok(Outcome::TripsRegion(r.to_owned()));
        }
        Ok(match s {
            "trips_total" => Outcome::TripsTotal,
            "trips_low" => Outcome::TripsLow,
            "trips_mid" => Outcome::TripsMid,
            "trips_high" => Outcome::TripsHigh,
            "poi_visits" => Outcome::PoiVisits,
            "unique_pois" => Outcome::UniquePois,
            "mean_entropy" => Outcome::MeanEntropy,
            "mean_high_share" => Outcome::MeanHighShare,
            other => return Err(Error::Config(format!("unknown outcome {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanelCell {
    pub hex_id: HexId,
    pub month: Month,
    pub y: f64,
    pub n_devices: u32,
    pub cable: bool,
}

/// Arm of a hexagon: the line of the station nearest to its center.
pub fn hex_arm(grid: &GridSpec, hex: HexId, stations: &[Station]) -> Option<Line> {
    nearest_station(grid.cell(hex).center, stations).map(|s| s.line)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PanelStats {
    /// Records whose own arm disagrees with their hexagon's arm.
    pub arm_mismatch_dropped: u64,
    /// Records where the outcome is undefined.
    pub undefined_outcome: u64,
}

/// Averages `outcome` over the devices homed in each hexagon-month.
/// `cable` is one for treatment hexagons from `opening` on. Cells are
/// sorted by (hex, month); cells with no defined values are absent.
pub fn build_panel(
    records: &[DevicePanelRecord],
    outcome: &Outcome,
    opening: Month,
    grid: &GridSpec,
    stations: &[Station],
) -> (Vec<PanelCell>, PanelStats) {
    let mut stats = PanelStats::default();
    let mut arms: HashMap<HexId, Option<Line>> = HashMap::new();
    let mut cells: BTreeMap<(HexId, Month), (f64, u32)> = BTreeMap::new();
    for r in records {
        let arm = *arms
            .entry(r.home_hex)
            .or_insert_with(|| hex_arm(grid, r.home_hex, stations));
        if arm != Some(r.arm) {
            stats.arm_mismatch_dropped += 1;
            continue;
        }
        let Some(v) = outcome.value(r) else {
            stats.undefined_outcome += 1;
            continue;
        };
        let c = cells.entry((r.home_hex, r.month)).or_insert((0.0, 0));
        c.0 += v;
        c.1 += 1;
    }
    let panel = cells
        .into_iter()
        .map(|((hex_id, month), (sum, n))| PanelCell {
            hex_id,
            month,
            y: sum / n as f64,
            n_devices: n,
            cable: arms[&hex_id] == Some(Line::Treatment) && month >= opening,
        })
        .collect();
    (panel, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;

    fn setup() -> (GridSpec, Vec<Station>) {
        let origin = GeoPoint::new(4.5, -74.1).unwrap();
        let grid = GridSpec::new(origin, 100.0).unwrap();
        let stations = vec![
            Station::new("T1", origin, Line::Treatment, 500.0).unwrap(),
            Station::new("C1", origin.destination(90.0, 5000.0), Line::Control, 500.0).unwrap(),
        ];
        (grid, stations)
    }

    fn home(dev: &str, month: &str, loc: GeoPoint, grid: &GridSpec) -> HomeLocation {
        HomeLocation {
            device_id: Arc::from(dev),
            month: month.parse().unwrap(),
            loc,
            night_ping_count: 30,
            hex: grid.hex_id(loc).ok(),
        }
    }

    fn trip(dev: &str, t: i64, stratum: Option<u8>, poi: Option<&str>) -> Stay {
        Stay {
            device_id: Arc::from(dev),
            centroid: GeoPoint::new(4.6, -74.0).unwrap(),
            start: t,
            end: t + 600,
            ping_count: 3,
            hex: None,
            stratum,
            region: Some(Arc::from("Center")),
            poi_id: poi.map(Arc::from),
        }
    }

    fn oct(day: i64) -> i64 {
        LocalClock::utc().midnight_utc(chrono::NaiveDate::from_ymd_opt(2018, 10, 1).unwrap()) + day * 86_400 + 36_000
    }

    #[test]
    fn treatment_record_from_home_300m_away() {
        let (grid, stations) = setup();
        let h = home("d", "2018-10", stations[0].location.destination(10.0, 300.0), &grid);
        let trips: Vec<Stay> = (0..12).map(|i| trip("d", oct(i), Some((i % 6) as u8 + 1), None)).collect();
        let (recs, _) = build_device_records(&trips, &[], &[h], &stations, &LocalClock::utc(), &DestinationGroups::default());
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].arm, Line::Treatment);
        assert_eq!(recs[0].trips_total, 12);
        assert_eq!(recs[0].trips_low + recs[0].trips_mid + recs[0].trips_high + recs[0].trips_unclassified, 12);
    }

    #[test]
    fn home_600m_from_every_station_is_omitted() {
        let (grid, stations) = setup();
        let h = home("d", "2018-10", stations[0].location.destination(180.0, 600.0), &grid);
        let (recs, stats) = build_device_records(&[], &[], &[h], &stations, &LocalClock::utc(), &DestinationGroups::default());
        assert!(recs.is_empty());
        assert_eq!(stats.homes_outside_buffers, 1);
    }

    #[test]
    fn movers_between_arms_are_dropped() {
        let (grid, stations) = setup();
        let homes = vec![
            home("m", "2018-10", stations[0].location, &grid),
            home("m", "2018-11", stations[1].location, &grid),
            home("s", "2018-10", stations[1].location, &grid),
        ];
        let (recs, stats) = build_device_records(&[], &[], &homes, &stations, &LocalClock::utc(), &DestinationGroups::default());
        assert_eq!(recs.len(), 1);
        assert_eq!(stats.movers_dropped, 1);
    }

    fn record(dev: &str, month: &str, hex: HexId, arm: Line, trips: u64) -> DevicePanelRecord {
        DevicePanelRecord {
            device_id: Arc::from(dev),
            month: month.parse().unwrap(),
            home_hex: hex,
            arm,
            trips_total: trips,
            trips_low: 0,
            trips_mid: 0,
            trips_high: 0,
            trips_unclassified: trips,
            trips_by_region: BTreeMap::new(),
            poi_visits: 0,
            unique_pois: 0,
            mean_entropy: None,
            mean_high_share: None,
        }
    }

    #[test]
    fn cell_mean_and_cable_indicator() {
        let (grid, stations) = setup();
        let th = grid.hex_id(stations[0].location).unwrap();
        let ch = grid.hex_id(stations[1].location).unwrap();
        let opening: Month = "2018-12".parse().unwrap();
        let recs = vec![
            record("a", "2018-11", th, Line::Treatment, 10),
            record("b", "2018-11", th, Line::Treatment, 20),
            record("a", "2018-12", th, Line::Treatment, 30),
            record("c", "2018-12", ch, Line::Control, 5),
        ];
        let (panel, _) = build_panel(&recs, &Outcome::TripsTotal, opening, &grid, &stations);
        assert_eq!(panel.len(), 3);
        let nov = panel.iter().find(|c| c.hex_id == th && c.month.to_string() == "2018-11").unwrap();
        assert_eq!((nov.y, nov.n_devices, nov.cable), (15.0, 2, false));
        let dec = panel.iter().find(|c| c.hex_id == th && c.month == opening).unwrap();
        assert!(dec.cable);
        assert!(panel.iter().filter(|c| c.hex_id == ch).all(|c| !c.cable));
    }

    #[test]
    fn undefined_outcome_leaves_cell_absent() {
        let (grid, stations) = setup();
        let th = grid.hex_id(stations[0].location).unwrap();
        let recs = vec![record("a", "2018-11", th, Line::Treatment, 3)];
        let (panel, stats) = build_panel(&recs, &Outcome::MeanEntropy, "2018-12".parse().unwrap(), &grid, &stations);
        assert!(panel.is_empty());
        assert_eq!(stats.undefined_outcome, 1);
    }

    #[test]
    fn outcome_names_round_trip() {
        for o in Outcome::standard().into_iter().chain([Outcome::TripsRegion("Center".into())]) {
            assert_eq!(o.to_string().parse::<Outcome>().unwrap(), o);
        }
        assert!("trips_nowhere".parse::<Outcome>().is_err());
    }

    #[test]
    fn trips_are_conserved_by_aggregation() {
        let (grid, stations) = setup();
        let th = grid.hex_id(stations[0].location).unwrap();
        let th2 = HexId { q: th.q + 1, r: th.r };
        let mut recs = Vec::new();
        let mut total = 0;
        for i in 0..20u64 {
            let hex = if i % 3 == 0 { th2 } else { th };
            let month = if i % 2 == 0 { "2018-11" } else { "2019-01" };
            recs.push(record(&format!("d{i}"), month, hex, Line::Treatment, i * 7 % 13));
            total += i * 7 % 13;
        }
        let (panel, _) = build_panel(&recs, &Outcome::TripsTotal, "2018-12".parse().unwrap(), &grid, &stations);
        let sum: f64 = panel.iter().map(|c| c.y * c.n_devices as f64).sum();
        assert!((sum - total as f64).abs() < 1e-9);
    }
}
