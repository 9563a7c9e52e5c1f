//! CSV and JSON artifacts exchanged between pipeline stages, and the run
//! manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::FitReport;
use crate::geo::{GeoPoint, HexId};
use crate::ingest::Ping;
use crate::panel::{DevicePanelRecord, PanelCell};
use crate::segregation::{ExposureRecord, PoiVisitorProfile};
use crate::stays::{HomeLocation, Stay};
use crate::time::{format_iso8601, parse_iso8601, Month};

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(|f| BufReader::with_capacity(1 << 20, f)).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::with_capacity(1 << 20, File::create(path)?))
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// Interns device and POI ids while reading.
#[derive(Default)]
struct Interner(HashMap<String, Arc<str>>);

impl Interner {
    fn get(&mut self, s: &str) -> Arc<str> {
        if let Some(a) = self.0.get(s) {
            return a.clone();
        }
        let a: Arc<str> = Arc::from(s);
        self.0.insert(s.to_owned(), a.clone());
        a
    }
}

struct Row<'a> {
    rec: &'a csv::StringRecord,
    file: &'a Path,
    line: u64,
}

impl Row<'_> {
    fn str(&self, i: usize) -> Result<&str> {
        self.rec.get(i).map(str::trim).ok_or_else(|| self.bad(i, "missing field"))
    }

    fn opt_str(&self, i: usize) -> Option<&str> {
        self.rec.get(i).map(str::trim).filter(|s| !s.is_empty())
    }

    fn parse<T: std::str::FromStr>(&self, i: usize) -> Result<T> {
        self.str(i)?.parse().map_err(|_| self.bad(i, "unparsable value"))
    }

    fn opt_parse<T: std::str::FromStr>(&self, i: usize) -> Result<Option<T>> {
        self.opt_str(i)
            .map(|s| s.parse().map_err(|_| self.bad(i, "unparsable value")))
            .transpose()
    }

    fn time(&self, i: usize) -> Result<i64> {
        parse_iso8601(self.str(i)?).ok_or_else(|| self.bad(i, "bad timestamp"))
    }

    fn point(&self, lat: usize, lon: usize) -> Result<GeoPoint> {
        GeoPoint::new(self.parse(lat)?, self.parse(lon)?).map_err(|e| self.bad(lat, &e.to_string()))
    }

    fn bad(&self, col: usize, what: &str) -> Error {
        Error::InvalidInput(format!("{} line {} column {}: {what}", self.file.display(), self.line, col + 1))
    }
}

fn read_rows(path: &Path, header: &str, mut f: impl FnMut(&Row) -> Result<()>) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(open(path)?);
    let got = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if got != header {
        return Err(Error::InvalidInput(format!(
            "{}: expected header {header:?}, found {got:?}",
            path.display()
        )));
    }
    let mut rec = csv::StringRecord::new();
    let mut line = 1;
    while rdr.read_record(&mut rec)? {
        line += 1;
        f(&Row { rec: &rec, file: path, line })?;
    }
    Ok(())
}

pub const DEVICES_HEADER: &str = "device_id";
pub const STAYS_HEADER: &str = "device_id,start,end,lat,lon,ping_count,hex_id,stratum,poi_id";
pub const HOMES_HEADER: &str = "device_id,month,lat,lon,night_pings,hex_id";
pub const PROFILES_HEADER: &str = "poi_id,n1,n2,n3,n4,n5,n6,entropy,high_income_share";
pub const EXPOSURE_HEADER: &str = "device_id,month,poi_visits,unique_pois,mean_entropy,mean_high_share";
pub const RECORDS_HEADER: &str = "device_id,month,home_hex,arm,trips_total,trips_low,trips_mid,trips_high,trips_unclassified,poi_visits,unique_pois,mean_entropy,mean_high_share,trips_by_region";
pub const PANEL_HEADER: &str = "hex_id,month,outcome,y,n_devices,cable";
pub const FIT_CSV_HEADER: &str = "month,beta,se,ci_lo,ci_hi";

pub fn write_devices(path: &Path, devices: impl IntoIterator<Item = impl AsRef<str>>) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{DEVICES_HEADER}")?;
    for d in devices {
        writeln!(w, "{}", d.as_ref())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_devices(path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    read_rows(path, DEVICES_HEADER, |r| {
        out.push(r.str(0)?.to_owned());
        Ok(())
    })?;
    Ok(out)
}

/// Writes pings in the raw input format with epoch timestamps.
pub fn write_pings(path: &Path, pings: &[Ping]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "device_id,timestamp,lat,lon,accuracy_m")?;
    for p in pings {
        writeln!(
            w,
            "{},{},{},{},{}",
            p.device_id,
            p.t,
            p.loc.lat(),
            p.loc.lon(),
            opt(&p.accuracy_m)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_stays(path: &Path, stays: &[Stay]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{STAYS_HEADER}")?;
    for s in stays {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.device_id,
            format_iso8601(s.start),
            format_iso8601(s.end),
            s.centroid.lat(),
            s.centroid.lon(),
            s.ping_count,
            opt(&s.hex),
            opt(&s.stratum),
            opt(&s.poi_id)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads stays; `region` is not stored and comes back empty.
pub fn read_stays(path: &Path) -> Result<Vec<Stay>> {
    let mut ids = Interner::default();
    let mut pois = Interner::default();
    let mut out = Vec::new();
    read_rows(path, STAYS_HEADER, |r| {
        let stratum: Option<u8> = r.opt_parse(7)?;
        if stratum.is_some_and(|s| !(1..=6).contains(&s)) {
            return Err(r.bad(7, "stratum outside 1..6"));
        }
        out.push(Stay {
            device_id: ids.get(r.str(0)?),
            start: r.time(1)?,
            end: r.time(2)?,
            centroid: r.point(3, 4)?,
            ping_count: r.parse(5)?,
            hex: r.opt_parse(6)?,
            stratum,
            region: None,
            poi_id: r.opt_str(8).map(|p| pois.get(p)),
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_homes(path: &Path, homes: &[HomeLocation]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{HOMES_HEADER}")?;
    for h in homes {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            h.device_id,
            h.month,
            h.loc.lat(),
            h.loc.lon(),
            h.night_ping_count,
            opt(&h.hex)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_homes(path: &Path) -> Result<Vec<HomeLocation>> {
    let mut ids = Interner::default();
    let mut out = Vec::new();
    read_rows(path, HOMES_HEADER, |r| {
        out.push(HomeLocation {
            device_id: ids.get(r.str(0)?),
            month: r.parse(1)?,
            loc: r.point(2, 3)?,
            night_ping_count: r.parse(4)?,
            hex: r.opt_parse(5)?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_profiles(path: &Path, profiles: &[PoiVisitorProfile]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{PROFILES_HEADER}")?;
    for p in profiles {
        let n = &p.visits_by_stratum;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            p.poi_id, n[0], n[1], n[2], n[3], n[4], n[5], p.entropy, p.high_income_share
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_profiles(path: &Path) -> Result<Vec<PoiVisitorProfile>> {
    let mut out = Vec::new();
    read_rows(path, PROFILES_HEADER, |r| {
        let mut n = [0u64; 6];
        for (k, slot) in n.iter_mut().enumerate() {
            *slot = r.parse(k + 1)?;
        }
        out.push(PoiVisitorProfile {
            poi_id: Arc::from(r.str(0)?),
            visits_by_stratum: n,
            entropy: r.parse(7)?,
            high_income_share: r.parse(8)?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_exposure(path: &Path, exposure: &[ExposureRecord]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{EXPOSURE_HEADER}")?;
    for e in exposure {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            e.device_id, e.month, e.poi_visit_count, e.unique_poi_count, e.mean_entropy, e.mean_high_income_share
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_exposure(path: &Path) -> Result<Vec<ExposureRecord>> {
    let mut ids = Interner::default();
    let mut out = Vec::new();
    read_rows(path, EXPOSURE_HEADER, |r| {
        out.push(ExposureRecord {
            device_id: ids.get(r.str(0)?),
            month: r.parse(1)?,
            poi_visit_count: r.parse(2)?,
            unique_poi_count: r.parse(3)?,
            mean_entropy: r.parse(4)?,
            mean_high_income_share: r.parse(5)?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_records(path: &Path, records: &[DevicePanelRecord]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{RECORDS_HEADER}")?;
    for r in records {
        let regions: Vec<String> = r.trips_by_region.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.device_id,
            r.month,
            r.home_hex,
            r.arm,
            r.trips_total,
            r.trips_low,
            r.trips_mid,
            r.trips_high,
            r.trips_unclassified,
            r.poi_visits,
            r.unique_pois,
            opt(&r.mean_entropy),
            opt(&r.mean_high_share),
            regions.join(";")
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the stacked panel file.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelRow {
    pub outcome: String,
    pub cell: PanelCell,
}

pub fn write_panel(path: &Path, rows: &[PanelRow]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{PANEL_HEADER}")?;
    for r in rows {
        let c = &r.cell;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c.hex_id, c.month, r.outcome, c.y, c.n_devices, c.cable as u8
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_panel(path: &Path) -> Result<Vec<PanelRow>> {
    let mut out = Vec::new();
    read_rows(path, PANEL_HEADER, |r| {
        let cable = match r.str(5)? {
            "0" => false,
            "1" => true,
            _ => return Err(r.bad(5, "cable must be 0 or 1")),
        };
        out.push(PanelRow {
            outcome: r.str(2)?.to_owned(),
            cell: PanelCell {
                hex_id: r.parse::<HexId>(0)?,
                month: r.parse::<Month>(1)?,
                y: r.parse(3)?,
                n_devices: r.parse(4)?,
                cable,
            },
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_fit(json_path: &Path, csv_path: &Path, report: &FitReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(json_path, text)?;
    let mut w = create(csv_path)?;
    writeln!(w, "{FIT_CSV_HEADER}")?;
    for p in &report.periods {
        writeln!(w, "{},{},{},{},{}", p.month, p.beta, p.se, p.ci_lo, p.ci_hi)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fit(path: &Path) -> Result<FitReport> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text)?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Digests and manifest
// ---------------------------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 and line count of a file.
pub fn file_digest(path: &Path) -> Result<(String, u64)> {
    let mut r = open(path)?;
    let mut h = Sha256::new();
    let mut lines = 0u64;
    loop {
        let buf = r.fill_buf()?;
        if buf.is_empty() {
            break;
        }
        h.update(buf);
        lines += buf.iter().filter(|&&b| b == b'\n').count() as u64;
        let n = buf.len();
        r.consume(n);
    }
    Ok((hex::encode(h.finalize()), lines))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub sha256: String,
    /// Data rows (header excluded) for CSV files, lines otherwise.
    pub rows: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub params_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, OutputRecord>,
}

/// Digests of everything each stage consumed and produced. Wall-clock
/// timings live in `timings.json` so identical runs give identical
/// manifests.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}
