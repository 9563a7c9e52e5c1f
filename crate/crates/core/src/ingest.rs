//! Ping parsing, validation and device-quality filtering.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::time::{parse_iso8601, LocalClock, Month, StudyWindow};

/// One timestamped observation from one device. `t` is UTC epoch seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Ping {
    pub device_id: Arc<str>,
    pub t: i64,
    pub loc: GeoPoint,
    pub accuracy_m: Option<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    MissingField,
    BadTimestamp,
    BadNumber,
    LatOutOfRange,
    LonOutOfRange,
    BadAccuracy,
    OutsideWindow,
    Duplicate,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::MissingField => "missing field",
            RejectReason::BadTimestamp => "bad timestamp",
            RejectReason::BadNumber => "bad number",
            RejectReason::LatOutOfRange => "lat out of range",
            RejectReason::LonOutOfRange => "lon out of range",
            RejectReason::BadAccuracy => "bad accuracy",
            RejectReason::OutsideWindow => "outside study window",
            RejectReason::Duplicate => "duplicate",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-reason counts of rows that did not become pings.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectReport {
    pub rows: u64,
    pub accepted: u64,
    pub rejected: BTreeMap<String, u64>,
}

impl RejectReport {
    pub fn reject(&mut self, reason: RejectReason) {
        *self.rejected.entry(reason.as_str().to_owned()).or_insert(0) += 1;
    }

    pub fn total_rejected(&self) -> u64 {
        self.rejected.values().sum()
    }

    pub fn count(&self, reason: RejectReason) -> u64 {
        self.rejected.get(reason.as_str()).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParseOptions {
    /// UTC epoch bounds `[start, end)`; rows outside are rejected.
    pub window: Option<(i64, i64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TimestampFormat {
    Epoch,
    Iso8601,
}

fn looks_like_epoch(s: &str) -> bool {
    let digits = s.strip_prefix('-').unwrap_or(s);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

/// Opens a ping source, transparently decompressing gzip by magic bytes.
pub fn open_source(path: &Path) -> Result<Box<dyn Read + Send>> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(format!("{}: {e}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let mut reader = BufReader::with_capacity(1 << 20, file);
    let is_gzip = reader.fill_buf()?.starts_with(&[0x1f, 0x8b]);
    if is_gzip {
        Ok(Box::new(BufReader::with_capacity(
            1 << 20,
            flate2::read::MultiGzDecoder::new(reader),
        )))
    } else {
        Ok(Box::new(reader))
    }
}

struct Columns {
    dev: usize,
    ts: usize,
    lat: usize,
    lon: usize,
    acc: Option<usize>,
}

impl Columns {
    fn from_header(headers: &csv::ByteRecord) -> Result<Self> {
        let col = |name: &str| headers.iter().position(|h| h.trim_ascii() == name.as_bytes());
        let missing = |name: &str| Error::InvalidInput(format!("ping file missing column {name:?}"));
        Ok(Columns {
            dev: col("device_id").ok_or_else(|| missing("device_id"))?,
            ts: col("timestamp").ok_or_else(|| missing("timestamp"))?,
            lat: col("lat").ok_or_else(|| missing("lat"))?,
            lon: col("lon").ok_or_else(|| missing("lon"))?,
            acc: col("accuracy_m"),
        })
    }
}

fn field(record: &csv::ByteRecord, i: usize) -> Option<&str> {
    record
        .get(i)
        .and_then(|b| std::str::from_utf8(b).ok())
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

/// A validated row, before duplicate removal.
struct RawPing<'r> {
    device: &'r str,
    t: i64,
    lat: f64,
    lon: f64,
    accuracy_m: Option<f32>,
}

/// Validates one row. `format` is fixed by the first row that has all
/// required fields.
fn check_row<'r>(
    record: &'r csv::ByteRecord,
    cols: &Columns,
    format: &mut Option<TimestampFormat>,
    opts: &ParseOptions,
) -> std::result::Result<RawPing<'r>, RejectReason> {
    let (Some(device), Some(ts), Some(lat), Some(lon)) = (
        field(record, cols.dev),
        field(record, cols.ts),
        field(record, cols.lat),
        field(record, cols.lon),
    ) else {
        return Err(RejectReason::MissingField);
    };
    let fmt = *format.get_or_insert(if looks_like_epoch(ts) {
        TimestampFormat::Epoch
    } else {
        TimestampFormat::Iso8601
    });
    let t = match fmt {
        TimestampFormat::Epoch if looks_like_epoch(ts) => ts.parse::<i64>().ok(),
        TimestampFormat::Iso8601 => parse_iso8601(ts),
        _ => None,
    }
    .ok_or(RejectReason::BadTimestamp)?;
    let (Ok(lat), Ok(lon)) = (lat.parse::<f64>(), lon.parse::<f64>()) else {
        return Err(RejectReason::BadNumber);
    };
    if !(lat.is_finite() && (-90.0..=90.0).contains(&lat)) {
        return Err(RejectReason::LatOutOfRange);
    }
    if !(lon.is_finite() && (-180.0..=180.0).contains(&lon)) {
        return Err(RejectReason::LonOutOfRange);
    }
    let accuracy_m = match cols.acc.and_then(|i| field(record, i)) {
        None => None,
        Some(a) => match a.parse::<f32>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Some(v),
            _ => return Err(RejectReason::BadAccuracy),
        },
    };
    if let Some((lo, hi)) = opts.window {
        if t < lo || t >= hi {
            return Err(RejectReason::OutsideWindow);
        }
    }
    Ok(RawPing {
        device,
        t,
        lat,
        lon,
        accuracy_m,
    })
}

/// Parses the ping CSV (`device_id,timestamp,lat,lon,accuracy_m`).
///
/// Valid pings come back in input order with exact duplicates (same
/// device, timestamp and location) removed. Every input row is accounted
/// for in the report: `rows == accepted + total_rejected()`.
pub fn parse_pings<R: Read>(reader: R, opts: &ParseOptions) -> Result<(Vec<Ping>, RejectReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .buffer_capacity(1 << 20)
        .from_reader(reader);
    let cols = Columns::from_header(rdr.byte_headers()?)?;

    let mut report = RejectReport::default();
    let mut pings = Vec::new();
    let mut format: Option<TimestampFormat> = None;
    let mut interned: HashMap<Arc<str>, u32> = HashMap::new();
    let mut names: Vec<Arc<str>> = Vec::new();
    let mut last_device: Option<(Vec<u8>, u32)> = None;
    let mut seen: HashSet<(u32, i64, u64, u64)> = HashSet::new();
    let mut record = csv::ByteRecord::new();

    while rdr.read_byte_record(&mut record)? {
        report.rows += 1;
        let row = match check_row(&record, &cols, &mut format, opts) {
            Ok(row) => row,
            Err(reason) => {
                report.reject(reason);
                continue;
            }
        };
        let dev = row.device;
        let idx = match &last_device {
            Some((bytes, idx)) if bytes.as_slice() == dev.as_bytes() => *idx,
            _ => {
                let idx = match interned.get(dev) {
                    Some(&i) => i,
                    None => {
                        let name: Arc<str> = Arc::from(dev);
                        let i = names.len() as u32;
                        names.push(name.clone());
                        interned.insert(name, i);
                        i
                    }
                };
                last_device = Some((dev.as_bytes().to_vec(), idx));
                idx
            }
        };
        if !seen.insert((idx, row.t, row.lat.to_bits(), row.lon.to_bits())) {
            report.reject(RejectReason::Duplicate);
            continue;
        }
        pings.push(Ping {
            device_id: names[idx as usize].clone(),
            t: row.t,
            loc: GeoPoint::new_unchecked(row.lat, row.lon),
            accuracy_m: row.accuracy_m,
        });
        report.accepted += 1;
    }
    Ok((pings, report))
}

/// Reads a whole ping source into memory, decompressing gzip.
pub fn read_source(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    open_source(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

/// Per-device traces, sorted by device id and stably by time.
pub type Traces = Vec<(Arc<str>, Vec<Ping>)>;

/// Parallel equivalent of `group_by_device(parse_pings(..))` over an
/// in-memory file. The body is split at line breaks, so quoted fields
/// must not contain newlines.
pub fn parse_traces(bytes: &[u8], opts: &ParseOptions) -> Result<(Traces, RejectReport)> {
    parse_traces_in(bytes, opts, rayon::current_num_threads() * 4)
}

fn parse_traces_in(bytes: &[u8], opts: &ParseOptions, n_chunks: usize) -> Result<(Traces, RejectReport)> {
    use rayon::prelude::*;

    let header_end = bytes.iter().position(|&b| b == b'\n').map_or(bytes.len(), |i| i + 1);
    let mut hdr = csv::ReaderBuilder::new().has_headers(false).from_reader(&bytes[..header_end]);
    let mut header = csv::ByteRecord::new();
    if !hdr.read_byte_record(&mut header)? {
        return Err(Error::InvalidInput("ping file is empty".into()));
    }
    let cols = Columns::from_header(&header)?;
    let body = &bytes[header_end..];
    let format = detect_format(body, &cols)?;

    let chunks = split_lines(body, n_chunks.max(1));
    let parsed: Vec<(HashMap<Arc<str>, Vec<Ping>>, RejectReport)> = chunks
        .par_iter()
        .map(|chunk| {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .from_reader(*chunk);
            let mut format = format;
            let mut report = RejectReport::default();
            let mut by_device: HashMap<Arc<str>, Vec<Ping>> = HashMap::new();
            let mut record = csv::ByteRecord::new();
            while rdr.read_byte_record(&mut record)? {
                report.rows += 1;
                match check_row(&record, &cols, &mut format, opts) {
                    Ok(row) => {
                        let ping = |device_id| Ping {
                            device_id,
                            t: row.t,
                            loc: GeoPoint::new_unchecked(row.lat, row.lon),
                            accuracy_m: row.accuracy_m,
                        };
                        match by_device.get_mut(row.device) {
                            Some(v) => {
                                let id = v[0].device_id.clone();
                                v.push(ping(id));
                            }
                            None => {
                                let id: Arc<str> = Arc::from(row.device);
                                by_device.insert(id.clone(), vec![ping(id)]);
                            }
                        }
                    }
                    Err(reason) => report.reject(reason),
                }
            }
            Ok((by_device, report))
        })
        .collect::<Result<_>>()?;

    let mut report = RejectReport::default();
    let mut pieces: BTreeMap<Arc<str>, Vec<Vec<Ping>>> = BTreeMap::new();
    for (by_device, r) in parsed {
        report.rows += r.rows;
        for (reason, n) in r.rejected {
            *report.rejected.entry(reason).or_insert(0) += n;
        }
        for (dev, pings) in by_device {
            pieces.entry(dev).or_default().push(pings);
        }
    }
    let traces: Vec<(Arc<str>, Vec<Ping>, u64)> = pieces
        .into_par_iter()
        .map(|(dev, parts)| {
            let mut seen = HashSet::new();
            let mut dups = 0;
            let mut trace = Vec::with_capacity(parts.iter().map(Vec::len).sum());
            for mut p in parts.into_iter().flatten() {
                if seen.insert((p.t, p.loc.lat().to_bits(), p.loc.lon().to_bits())) {
                    p.device_id = dev.clone();
                    trace.push(p);
                } else {
                    dups += 1;
                }
            }
            if !trace.windows(2).all(|w| w[0].t <= w[1].t) {
                trace.sort_by_key(|p| p.t);
            }
            (dev, trace, dups)
        })
        .collect();
    let mut out = Vec::with_capacity(traces.len());
    for (dev, trace, dups) in traces {
        report.accepted += trace.len() as u64;
        if dups > 0 {
            *report.rejected.entry(RejectReason::Duplicate.as_str().to_owned()).or_insert(0) += dups;
        }
        out.push((dev, trace));
    }
    Ok((out, report))
}

/// Timestamp format of the first row with every required field.
fn detect_format(body: &[u8], cols: &Columns) -> Result<Option<TimestampFormat>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(body);
    let mut record = csv::ByteRecord::new();
    while rdr.read_byte_record(&mut record)? {
        if let (Some(_), Some(ts), Some(_), Some(_)) = (
            field(&record, cols.dev),
            field(&record, cols.ts),
            field(&record, cols.lat),
            field(&record, cols.lon),
        ) {
            return Ok(Some(if looks_like_epoch(ts) {
                TimestampFormat::Epoch
            } else {
                TimestampFormat::Iso8601
            }));
        }
    }
    Ok(None)
}

fn split_lines(body: &[u8], n: usize) -> Vec<&[u8]> {
    let target = body.len().div_ceil(n).max(1);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < body.len() {
        let mut end = (start + target).min(body.len());
        while end < body.len() && body[end - 1] != b'\n' {
            end += 1;
        }
        out.push(&body[start..end]);
        start = end;
    }
    out
}

/// Ping activity of one device: the aggregate behind the quality filter.
/// Merging is commutative and associative.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DeviceQuality {
    pub pings_per_month: BTreeMap<Month, u64>,
    /// Distinct local day numbers with at least one ping.
    pub active_days: BTreeSet<i64>,
}

impl DeviceQuality {
    pub fn observe(&mut self, month: Month, day: i64) {
        *self.pings_per_month.entry(month).or_insert(0) += 1;
        self.active_days.insert(day);
    }

    pub fn merge(&mut self, other: &DeviceQuality) {
        for (m, c) in &other.pings_per_month {
            *self.pings_per_month.entry(*m).or_insert(0) += c;
        }
        self.active_days.extend(other.active_days.iter().copied());
    }

    pub fn total_pings(&self) -> u64 {
        self.pings_per_month.values().sum()
    }

    pub fn active_days_by_year(&self) -> BTreeMap<i32, u64> {
        let mut out = BTreeMap::new();
        for &d in &self.active_days {
            let year = crate::time::date_of_day_number(d);
            *out.entry(chrono::Datelike::year(&year)).or_insert(0) += 1;
        }
        out
    }

    /// Mean pings per observed month `>= min_mean` and, for every year the
    /// device appears in, at least `min_days` active days.
    pub fn passes(&self, min_mean_pings: u64, min_active_days: u64) -> bool {
        let months = self.pings_per_month.len() as u64;
        if months == 0 || self.total_pings() < min_mean_pings * months {
            return false;
        }
        self.active_days_by_year().values().all(|&d| d >= min_active_days)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityThresholds {
    pub min_mean_pings_per_month: u64,
    pub min_active_days_per_year: u64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        Self {
            min_mean_pings_per_month: 50,
            min_active_days_per_year: 10,
        }
    }
}

/// Accumulates per-device quality over pings inside `window`.
pub fn device_quality(pings: &[Ping], window: &StudyWindow, clock: &LocalClock) -> BTreeMap<Arc<str>, DeviceQuality> {
    let mut out: HashMap<Arc<str>, DeviceQuality> = HashMap::new();
    let mut last: Option<(Arc<str>, i64, Month)> = None;
    for p in pings {
        let day = clock.day_number(p.t);
        let month = match &last {
            Some((dev, d, m)) if *d == day && Arc::ptr_eq(dev, &p.device_id) => *m,
            _ => clock.month_of(p.t),
        };
        last = Some((p.device_id.clone(), day, month));
        if !window.contains(month) {
            continue;
        }
        out.entry(p.device_id.clone()).or_default().observe(month, day);
    }
    out.into_iter().collect()
}

/// Devices passing both quality rules over the study window.
pub fn filter_devices(
    pings: &[Ping],
    window: &StudyWindow,
    clock: &LocalClock,
    thresholds: &QualityThresholds,
) -> BTreeSet<Arc<str>> {
    device_quality(pings, window, clock)
        .into_iter()
        .filter(|(_, q)| q.passes(thresholds.min_mean_pings_per_month, thresholds.min_active_days_per_year))
        .map(|(d, _)| d)
        .collect()
}

/// Splits pings into per-device traces sorted by device id, each stably
/// sorted by time.
pub fn group_by_device(pings: Vec<Ping>) -> Vec<(Arc<str>, Vec<Ping>)> {
    let mut groups: HashMap<Arc<str>, Vec<Ping>> = HashMap::new();
    for p in pings {
        groups.entry(p.device_id.clone()).or_default().push(p);
    }
    let mut out: Vec<_> = groups.into_iter().collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    for (_, trace) in &mut out {
        if !trace.windows(2).all(|w| w[0].t <= w[1].t) {
            trace.sort_by_key(|p| p.t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    const HEADER: &str = "device_id,timestamp,lat,lon,accuracy_m\n";

    fn parse(text: &str) -> (Vec<Ping>, RejectReport) {
        parse_pings(text.as_bytes(), &ParseOptions::default()).unwrap()
    }

    #[test]
    fn well_formed_row() {
        let (p, r) = parse(&format!("{HEADER}d1,2018-12-01T13:45:02Z,4.6,-74.1,12.5\n"));
        assert_eq!(p.len(), 1);
        assert_eq!(&*p[0].device_id, "d1");
        assert_eq!(p[0].t, parse_iso8601("2018-12-01T13:45:02Z").unwrap());
        assert_eq!(p[0].accuracy_m, Some(12.5));
        assert_eq!(r.rows, 1);
    }

    #[test]
    fn lat_out_of_range_is_rejected_with_reason() {
        let (p, r) = parse(&format!("{HEADER}d1,100,91.0,-74.1,\n"));
        assert!(p.is_empty());
        assert_eq!(r.count(RejectReason::LatOutOfRange), 1);
        assert_eq!(r.rejected.keys().next().unwrap(), "lat out of range");
    }

    #[test]
    fn ten_rows_two_malformed() {
        let mut text = HEADER.to_string();
        for i in 0..8 {
            text.push_str(&format!("d{},{},4.6,-74.1,\n", i % 3, 1_540_000_000 + i));
        }
        text.push_str("d9,1540000100,4.6,\n");
        text.push_str("d9,2018-12-01T00:00:00Z,4.6,-74.1,\n");
        let (p, r) = parse(&text);
        assert_eq!(p.len(), 8);
        assert_eq!(r.total_rejected(), 2);
        assert_eq!(r.count(RejectReason::MissingField), 1);
        // format is fixed per file: an ISO row in an epoch file is bad
        assert_eq!(r.count(RejectReason::BadTimestamp), 1);
    }

    #[test]
    fn duplicates_and_window() {
        let text = format!("{HEADER}a,10,1,1,\na,10,1,1,\na,11,1,1,\na,500,1,1,\n");
        let (p, r) = parse_pings(text.as_bytes(), &ParseOptions { window: Some((0, 100)) }).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(r.count(RejectReason::Duplicate), 1);
        assert_eq!(r.count(RejectReason::OutsideWindow), 1);
    }

    #[test]
    fn missing_column_is_fatal() {
        assert!(parse_pings("device_id,lat,lon\n".as_bytes(), &ParseOptions::default()).is_err());
    }

    #[test]
    fn gzip_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv.gz");
        let mut enc = flate2::write::GzEncoder::new(File::create(&path).unwrap(), flate2::Compression::fast());
        enc.write_all(format!("{HEADER}d1,5,1,1,\nd1,6,1,1,\n").as_bytes()).unwrap();
        enc.finish().unwrap();
        let (p, _) = parse_pings(open_source(&path).unwrap(), &ParseOptions::default()).unwrap();
        assert_eq!(p.len(), 2);
        assert!(matches!(open_source(&dir.path().join("nope.csv")), Err(Error::MissingArtifact(_))));
    }

    proptest! {
        #[test]
        fn parsing_is_lossless(rows in proptest::collection::vec((0u8..4, 0i64..50, -100.0f64..100.0, prop::bool::ANY), 0..60)) {
            let mut text = HEADER.to_string();
            for (d, t, lat, blank) in &rows {
                if *blank {
                    text.push_str(&format!("d{d},,{lat},3,\n"));
                } else {
                    text.push_str(&format!("d{d},{t},{lat},3,\n"));
                }
            }
            let (p, r) = parse(&text);
            prop_assert_eq!(r.rows, rows.len() as u64);
            prop_assert_eq!(p.len() as u64 + r.total_rejected(), r.rows);
            prop_assert_eq!(p.len() as u64, r.accepted);
        }

        #[test]
        fn parallel_parse_matches_sequential(
            rows in proptest::collection::vec((0u8..4, 0i64..30, 0u8..3, 0u8..8), 0..80),
            chunks in 1usize..9,
        ) {
            let mut text = HEADER.to_string();
            for (d, t, lat, kind) in &rows {
                match kind {
                    0 => text.push_str(&format!("d{d},,{lat},3,\n")),
                    1 => text.push_str(&format!("d{d},{t},95,3,\n")),
                    2 => text.push_str(&format!("d{d},{t},{lat},3,-1\n")),
                    _ => text.push_str(&format!("d{d},{t},{lat},3,10\n")),
                }
            }
            let opts = ParseOptions { window: Some((2, 28)) };
            let (p, r) = parse_pings(text.as_bytes(), &opts).unwrap();
            let (traces, r2) = parse_traces_in(text.as_bytes(), &opts, chunks).unwrap();
            prop_assert_eq!(r2, r);
            prop_assert_eq!(traces, group_by_device(p));
        }
    }

    // -- quality filter ------------------------------------------------------

    fn window() -> StudyWindow {
        StudyWindow::new("2018-07".parse().unwrap(), "2019-06".parse().unwrap()).unwrap()
    }

    /// Device pinging `per_month` times in each listed month, spread over
    /// `days` distinct days of each month.
    fn device(id: &str, months: &[&str], per_month: u64, days: u64) -> Vec<Ping> {
        let clock = LocalClock::utc();
        let dev: Arc<str> = Arc::from(id);
        let mut out = Vec::new();
        for m in months {
            let m: Month = m.parse().unwrap();
            let start = clock.midnight_utc(m.first_day());
            for k in 0..per_month {
                let day = (k % days) as i64;
                out.push(Ping {
                    device_id: dev.clone(),
                    t: start + day * 86_400 + 3600 + k as i64,
                    loc: GeoPoint::new_unchecked(4.6, -74.1),
                    accuracy_m: None,
                });
            }
        }
        out
    }

    fn passes(pings: &[Ping]) -> bool {
        !filter_devices(pings, &window(), &LocalClock::utc(), &QualityThresholds::default()).is_empty()
    }

    #[test]
    fn filter_boundaries() {
        assert!(!passes(&device("a", &["2018-08", "2018-09"], 49, 20)));
        assert!(!passes(&device("b", &["2018-08"], 60, 9)));
        assert!(passes(&device("c", &["2018-12", "2019-01"], 50, 10)));
        // mean rule: one sparse month is compensated by a dense one
        let mut mixed = device("d", &["2018-08"], 30, 10);
        mixed.extend(device("d", &["2018-09"], 70, 10));
        assert!(passes(&mixed));
    }

    #[test]
    fn filter_checks_each_year_seen() {
        // 2018 fine, 2019 only 9 days
        let mut p = device("e", &["2018-10"], 100, 12);
        p.extend(device("e", &["2019-02"], 100, 9));
        assert!(!passes(&p));
    }

    proptest! {
        #[test]
        fn filter_is_monotone(per_month in 40u64..60, days in 8u64..12, extra in 0u64..40) {
            let base = device("m", &["2018-11", "2018-12"], per_month, days);
            let mut more = base.clone();
            more.extend(device("m", &["2018-11"], extra, days).into_iter().map(|mut p| { p.t += 7; p }));
            if passes(&base) {
                prop_assert!(passes(&more));
            }
        }

        #[test]
        fn quality_merge_is_order_free(split in 0usize..200) {
            let pings = device("q", &["2018-07", "2018-08"], 100, 15);
            let clock = LocalClock::utc();
            let whole = device_quality(&pings, &window(), &clock);
            let split = split.min(pings.len());
            let mut a = device_quality(&pings[..split], &window(), &clock);
            let b = device_quality(&pings[split..], &window(), &clock);
            for (k, v) in b {
                a.entry(k).or_default().merge(&v);
            }
            prop_assert_eq!(a, whole);
        }
    }

    #[test]
    fn grouping_sorts_per_device() {
        let mut p = device("z", &["2018-07"], 5, 5);
        p.extend(device("a", &["2018-07"], 5, 5));
        p.reverse();
        let g = group_by_device(p);
        assert_eq!(&*g[0].0, "a");
        assert!(g[1].1.windows(2).all(|w| w[0].t <= w[1].t));
    }
}
