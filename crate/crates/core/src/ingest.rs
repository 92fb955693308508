//! Ping ingestion: parsing, cleaning, the pre/post-fire split and the
//! daily-frequent-user filter that defines the resident population.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate};
use chrono_tz::Tz;
use flate2::read::MultiGzDecoder;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::ColumnNames;
use crate::geo::GeoPoint;
use crate::time::{format_utc, local_date, parse_utc, TimeWindow, Timestamp};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("schema error: header lacks mandatory column `{0}`")]
    MissingColumn(String),
    #[error("schema error: {0}")]
    Header(String),
}

/// One device fix without its owner; traces store these.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ping {
    pub timestamp: Timestamp,
    pub lat: f64,
    pub lon: f64,
    pub accuracy_m: Option<f64>,
}

impl Ping {
    pub fn new(timestamp: Timestamp, lat: f64, lon: f64, accuracy_m: Option<f64>) -> Self {
        Self {
            timestamp,
            lat,
            lon,
            accuracy_m,
        }
    }

    pub fn point(&self) -> GeoPoint {
        GeoPoint::new(self.lat, self.lon)
    }

    /// Trace order: time, then position, then best accuracy first.
    fn trace_cmp(&self, other: &Ping) -> Ordering {
        self.timestamp
            .cmp(&other.timestamp)
            .then(self.lat.total_cmp(&other.lat))
            .then(self.lon.total_cmp(&other.lon))
            .then(match (self.accuracy_m, other.accuracy_m) {
                (Some(a), Some(b)) => a.total_cmp(&b),
                (Some(_), None) => Ordering::Less,
                (None, Some(_)) => Ordering::Greater,
                (None, None) => Ordering::Equal,
            })
    }

    fn same_key(&self, other: &Ping) -> bool {
        self.timestamp == other.timestamp && self.lat == other.lat && self.lon == other.lon
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PingRecord {
    pub device_id: String,
    pub timestamp: Timestamp,
    pub lat: f64,
    pub lon: f64,
    pub accuracy_m: Option<f64>,
}

impl PingRecord {
    pub fn ping(&self) -> Ping {
        Ping::new(self.timestamp, self.lat, self.lon, self.accuracy_m)
    }

    pub fn from_ping(device_id: &str, p: &Ping) -> Self {
        Self {
            device_id: device_id.to_string(),
            timestamp: p.timestamp,
            lat: p.lat,
            lon: p.lon,
            accuracy_m: p.accuracy_m,
        }
    }
}

/// Time-ordered pings of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceTrace {
    pub device_id: String,
    pub pings: Vec<Ping>,
}

impl DeviceTrace {
    pub fn new(device_id: impl Into<String>, mut pings: Vec<Ping>) -> Self {
        pings.sort_by(Ping::trace_cmp);
        Self {
            device_id: device_id.into(),
            pings,
        }
    }
}

/// Cleaned traces keyed by device, sorted by device id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceSet {
    traces: Vec<DeviceTrace>,
}

impl TraceSet {
    pub fn new(mut traces: Vec<DeviceTrace>) -> Self {
        traces.retain(|t| !t.pings.is_empty());
        traces.sort_by(|a, b| a.device_id.cmp(&b.device_id));
        Self { traces }
    }

    pub fn get(&self, device_id: &str) -> Option<&DeviceTrace> {
        self.traces
            .binary_search_by(|t| t.device_id.as_str().cmp(device_id))
            .ok()
            .map(|i| &self.traces[i])
    }

    pub fn traces(&self) -> &[DeviceTrace] {
        &self.traces
    }

    pub fn into_traces(self) -> Vec<DeviceTrace> {
        self.traces
    }

    pub fn device_count(&self) -> usize {
        self.traces.len()
    }

    pub fn ping_count(&self) -> usize {
        self.traces.iter().map(|t| t.pings.len()).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = PingRecord> + '_ {
        self.traces.iter().flat_map(|t| {
            t.pings
                .iter()
                .map(move |p| PingRecord::from_ping(&t.device_id, p))
        })
    }

    /// Keeps only the listed devices.
    pub fn restrict(self, devices: &BTreeSet<String>) -> TraceSet {
        TraceSet {
            traces: self
                .traces
                .into_iter()
                .filter(|t| devices.contains(&t.device_id))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub columns: ColumnNames,
    pub delimiter: u8,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            columns: ColumnNames::default(),
            delimiter: b',',
        }
    }
}

/// A skipped input row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseLog {
    pub rows: u64,
    pub errors: Vec<RowError>,
}

impl ParseLog {
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.errors {
            writeln!(w, "line {}: {}", e.line, e.message)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimestampFormat {
    EpochSeconds,
    Iso8601,
}

fn detect_format(sample: &str) -> TimestampFormat {
    let s = sample.trim();
    let digits = s.strip_prefix('-').unwrap_or(s);
    if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
        TimestampFormat::EpochSeconds
    } else {
        TimestampFormat::Iso8601
    }
}

struct Columns {
    device: usize,
    timestamp: usize,
    lat: usize,
    lon: usize,
    accuracy: Option<usize>,
}

fn parse_row(
    rec: &csv::ByteRecord,
    cols: &Columns,
    format: TimestampFormat,
) -> Result<(String, Ping), String> {
    let field = |i: usize, name: &str| -> Result<&str, String> {
        let raw = rec
            .get(i)
            .ok_or_else(|| format!("missing field `{name}`"))?;
        std::str::from_utf8(raw)
            .map(str::trim)
            .map_err(|_| format!("field `{name}` is not UTF-8"))
    };
    let device = field(cols.device, "device_id")?;
    if device.is_empty() {
        return Err("empty device_id".into());
    }
    let ts_raw = field(cols.timestamp, "timestamp")?;
    let timestamp = match format {
        TimestampFormat::EpochSeconds => ts_raw
            .parse::<i64>()
            .ok()
            .and_then(|s| DateTime::from_timestamp(s, 0))
            .ok_or_else(|| format!("bad epoch timestamp {ts_raw:?}"))?,
        TimestampFormat::Iso8601 => {
            parse_utc(ts_raw).map_err(|_| format!("bad ISO-8601 timestamp {ts_raw:?}"))?
        }
    };
    let lat: f64 = field(cols.lat, "lat")?
        .parse()
        .map_err(|_| "unparseable lat".to_string())?;
    if !(-90.0..=90.0).contains(&lat) {
        return Err("lat out of range".into());
    }
    let lon: f64 = field(cols.lon, "lon")?
        .parse()
        .map_err(|_| "unparseable lon".to_string())?;
    if !(-180.0..=180.0).contains(&lon) {
        return Err("lon out of range".into());
    }
    let accuracy_m = match cols.accuracy {
        None => None,
        Some(i) => {
            let raw = field(i, "accuracy")?;
            if raw.is_empty() {
                None
            } else {
                let a: f64 = raw
                    .parse()
                    .map_err(|_| "unparseable accuracy".to_string())?;
                if !(a.is_finite() && a >= 0.0) {
                    return Err("accuracy must be a nonnegative number".into());
                }
                Some(a)
            }
        }
    };
    Ok((
        device.to_string(),
        Ping::new(timestamp, lat, lon, accuracy_m),
    ))
}

/// Streams delimited text, calling `on_ping` for every well-formed row.
///
/// Malformed rows are logged with their line number and skipped. Only an
/// unreadable source or a header missing a mandatory column is fatal. The
/// accuracy column is optional.
pub fn read_pings<R: Read>(
    source: R,
    schema: &Schema,
    mut on_ping: impl FnMut(String, Ping),
) -> Result<ParseLog, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .flexible(true)
        .has_headers(true)
        .from_reader(source);
    let headers = rdr.byte_headers().map_err(csv_fatal)?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| std::str::from_utf8(h).map(str::trim) == Ok(name))
    };
    let need = |name: &str| find(name).ok_or_else(|| IngestError::MissingColumn(name.to_string()));
    let c = &schema.columns;
    let cols = Columns {
        device: need(&c.device_id)?,
        timestamp: need(&c.timestamp)?,
        lat: need(&c.lat)?,
        lon: need(&c.lon)?,
        accuracy: find(&c.accuracy),
    };

    let mut log = ParseLog::default();
    let mut format: Option<TimestampFormat> = None;
    let mut rec = csv::ByteRecord::new();
    loop {
        match rdr.read_byte_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                if let csv::ErrorKind::Io(_) = e.kind() {
                    return Err(csv_fatal(e));
                }
                log.rows += 1;
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                log.errors.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        }
        log.rows += 1;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let fmt = *format.get_or_insert_with(|| {
            detect_format(
                rec.get(cols.timestamp)
                    .and_then(|b| std::str::from_utf8(b).ok())
                    .unwrap_or(""),
            )
        });
        match parse_row(&rec, &cols, fmt) {
            Ok((device, ping)) => on_ping(device, ping),
            Err(message) => log.errors.push(RowError { line, message }),
        }
    }
    Ok(log)
}

fn csv_fatal(e: csv::Error) -> IngestError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IngestError::Io(io),
        other => IngestError::Header(format!("{other:?}")),
    }
}

/// Collects every well-formed row into memory.
pub fn parse_pings<R: Read>(
    source: R,
    schema: &Schema,
) -> Result<(Vec<PingRecord>, ParseLog), IngestError> {
    let mut out = Vec::new();
    let log = read_pings(source, schema, |device_id, p| {
        out.push(PingRecord {
            device_id,
            timestamp: p.timestamp,
            lat: p.lat,
            lon: p.lon,
            accuracy_m: p.accuracy_m,
        })
    })?;
    Ok((out, log))
}

/// Opens a file, transparently decompressing gzip input.
pub fn open_input(path: &Path) -> io::Result<Box<dyn Read + Send>> {
    let mut reader = BufReader::with_capacity(1 << 20, File::open(path)?);
    let magic = reader.fill_buf()?;
    if magic.len() >= 2 && magic[0] == 0x1f && magic[1] == 0x8b {
        Ok(Box::new(BufReader::with_capacity(
            1 << 20,
            MultiGzDecoder::new(reader),
        )))
    } else {
        Ok(Box::new(reader))
    }
}

/// Writes traces as delimited text in the given schema, device by device.
pub fn write_pings<W: Write>(w: W, traces: &TraceSet, schema: &Schema) -> io::Result<()> {
    let mut out = io::BufWriter::with_capacity(1 << 20, w);
    let d = schema.delimiter as char;
    let c = &schema.columns;
    writeln!(
        out,
        "{}{d}{}{d}{}{d}{}{d}{}",
        c.device_id, c.timestamp, c.lat, c.lon, c.accuracy
    )?;
    for t in traces.traces() {
        for p in &t.pings {
            write!(
                out,
                "{}{d}{}{d}{}{d}{}{d}",
                t.device_id,
                format_utc(p.timestamp),
                p.lat,
                p.lon
            )?;
            if let Some(a) = p.accuracy_m {
                write!(out, "{a}")?;
            }
            writeln!(out)?;
        }
    }
    out.flush()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleaningParams {
    pub accuracy_max_m: f64,
    pub study_window: TimeWindow,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CleaningReport {
    pub input_count: u64,
    pub dropped_inaccurate: u64,
    pub dropped_duplicate: u64,
    pub dropped_out_of_bounds: u64,
    pub retained_count: u64,
}

impl CleaningReport {
    pub fn reconciles(&self) -> bool {
        self.input_count
            == self.retained_count
                + self.dropped_inaccurate
                + self.dropped_duplicate
                + self.dropped_out_of_bounds
    }

    pub fn merge(&mut self, other: &CleaningReport) {
        self.input_count += other.input_count;
        self.dropped_inaccurate += other.dropped_inaccurate;
        self.dropped_duplicate += other.dropped_duplicate;
        self.dropped_out_of_bounds += other.dropped_out_of_bounds;
        self.retained_count += other.retained_count;
    }

    pub fn to_text(&self) -> String {
        format!(
            "input_count = {}\ndropped_out_of_bounds = {}\ndropped_inaccurate = {}\ndropped_duplicate = {}\nretained_count = {}\n",
            self.input_count, self.dropped_out_of_bounds, self.dropped_inaccurate, self.dropped_duplicate, self.retained_count
        )
    }
}

/// Incremental cleaner: window and accuracy filters on push, per-device
/// deduplication on finish.
///
/// Records without an accuracy value pass the accuracy filter. Duplicates
/// share `(device_id, timestamp, lat, lon)`; among them the most accurate
/// copy is the one retained, so the output does not depend on input order.
pub struct Cleaner {
    params: CleaningParams,
    by_device: HashMap<String, Vec<Ping>>,
    report: CleaningReport,
}

impl Cleaner {
    pub fn new(params: CleaningParams) -> Self {
        assert!(
            params.accuracy_max_m > 0.0,
            "accuracy_max_m must be positive"
        );
        Self {
            params,
            by_device: HashMap::new(),
            report: CleaningReport::default(),
        }
    }

    fn admit(&mut self, device_id: &str, ping: &Ping) -> bool {
        self.report.input_count += 1;
        if !self.params.study_window.contains(ping.timestamp)
            || !ping.point().is_valid()
            || device_id.is_empty()
        {
            self.report.dropped_out_of_bounds += 1;
            return false;
        }
        if ping
            .accuracy_m
            .is_some_and(|a| a > self.params.accuracy_max_m)
        {
            self.report.dropped_inaccurate += 1;
            return false;
        }
        true
    }

    pub fn push(&mut self, device_id: &str, ping: Ping) {
        if !self.admit(device_id, &ping) {
            return;
        }
        match self.by_device.get_mut(device_id) {
            Some(v) => v.push(ping),
            None => {
                self.by_device.insert(device_id.to_string(), vec![ping]);
            }
        }
    }

    pub fn push_owned(&mut self, device_id: String, ping: Ping) {
        if self.admit(&device_id, &ping) {
            self.by_device.entry(device_id).or_default().push(ping);
        }
    }

    pub fn finish(self) -> (TraceSet, CleaningReport) {
        let mut report = self.report;
        let shards: Vec<(DeviceTrace, u64)> = self
            .by_device
            .into_par_iter()
            .map(|(device_id, mut pings)| {
                pings.sort_by(Ping::trace_cmp);
                let before = pings.len();
                pings.dedup_by(|later, kept| later.same_key(kept));
                let dropped = (before - pings.len()) as u64;
                (DeviceTrace { device_id, pings }, dropped)
            })
            .collect();
        let mut traces = Vec::with_capacity(shards.len());
        for (t, dropped) in shards {
            report.dropped_duplicate += dropped;
            report.retained_count += t.pings.len() as u64;
            traces.push(t);
        }
        (TraceSet::new(traces), report)
    }
}

pub fn clean_pings<I: IntoIterator<Item = PingRecord>>(
    records: I,
    params: &CleaningParams,
) -> (TraceSet, CleaningReport) {
    let mut cleaner = Cleaner::new(*params);
    for r in records {
        let ping = r.ping();
        cleaner.push_owned(r.device_id, ping);
    }
    cleaner.finish()
}

/// Pings strictly before ignition go to the first set; the rest to the second.
pub fn split_pre_post_fire(traces: TraceSet, ignition: Timestamp) -> (TraceSet, TraceSet) {
    let mut pre = Vec::with_capacity(traces.device_count());
    let mut post = Vec::with_capacity(traces.device_count());
    for mut t in traces.into_traces() {
        let cut = t.pings.partition_point(|p| p.timestamp < ignition);
        let after = t.pings.split_off(cut);
        post.push(DeviceTrace {
            device_id: t.device_id.clone(),
            pings: after,
        });
        pre.push(t);
    }
    (TraceSet::new(pre), TraceSet::new(post))
}

/// Devices whose signal count on every listed local date meets the threshold.
pub fn filter_frequent_users(
    pre_fire: &TraceSet,
    pre_fire_days: &[NaiveDate],
    min_daily_signals: u32,
    tz: Tz,
) -> BTreeSet<String> {
    assert!(!pre_fire_days.is_empty(), "pre_fire_days must be non-empty");
    assert!(
        min_daily_signals >= 1,
        "min_daily_signals must be at least 1"
    );
    let first = pre_fire_days.iter().min().copied().unwrap();
    let last = pre_fire_days.iter().max().copied().unwrap();
    let span = (last - first).num_days() as usize + 1;
    pre_fire
        .traces()
        .par_iter()
        .filter(|t| {
            let mut counts = vec![0u32; span];
            for p in &t.pings {
                let d = local_date(p.timestamp, tz);
                if d >= first && d <= last {
                    counts[(d - first).num_days() as usize] += 1;
                }
            }
            pre_fire_days
                .iter()
                .all(|d| counts[(*d - first).num_days() as usize] >= min_daily_signals)
        })
        .map(|t| t.device_id.clone())
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}
