//! Proxy home locations: the centroid of the grid cell holding the most
//! nighttime pings of a resident before the fire.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, Read, Write};

use chrono::{Duration, NaiveDate, NaiveTime, Timelike};
use chrono_tz::Tz;
use rayon::prelude::*;
use thiserror::Error;

use crate::geo::{BoundingBox, CellIndex, GeoError, GeoPoint, GridSpec};
use crate::ingest::{DeviceTrace, Ping, TraceSet};
use crate::time::Timestamp;

/// Local clock window, start-inclusive and end-exclusive. Wraps midnight
/// when `start > end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NightWindow {
    pub start: NaiveTime,
    pub end: NaiveTime,
    pub tz: Tz,
}

impl NightWindow {
    pub fn new(start: NaiveTime, end: NaiveTime, tz: Tz) -> Self {
        Self { start, end, tz }
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        let local = t.with_timezone(&self.tz).time();
        let local = NaiveTime::from_hms_opt(local.hour(), local.minute(), local.second()).unwrap();
        if self.start > self.end {
            local >= self.start || local < self.end
        } else {
            local >= self.start && local < self.end
        }
    }

    /// The local date on which the night containing `t` began, if `t` is
    /// inside the window at all.
    pub fn night_of(&self, t: Timestamp) -> Option<NaiveDate> {
        if !self.contains(t) {
            return None;
        }
        let local = t.with_timezone(&self.tz);
        let date = local.date_naive();
        if self.start > self.end && local.time() < self.end {
            Some(date - Duration::days(1))
        } else {
            Some(date)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomeLocation {
    pub point: GeoPoint,
    pub cell: CellIndex,
    pub night_ping_count: u32,
}

/// Winning cell of a vote over pings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellVote {
    pub cell: CellIndex,
    pub count: u32,
}

/// Cell with the most pings. Ties go to the cell visited most recently,
/// then to the lowest `(row, col)`. Returns the winner (if any) and the
/// number of pings that fell outside the grid.
pub fn most_visited_cell(pings: &[Ping], grid: &GridSpec) -> (Option<CellVote>, usize) {
    let mut tally: HashMap<CellIndex, (u32, Timestamp)> = HashMap::new();
    let mut outside = 0;
    for p in pings {
        match grid.cell_index(p.point()) {
            Ok(cell) => {
                let e = tally.entry(cell).or_insert((0, p.timestamp));
                e.0 += 1;
                e.1 = e.1.max(p.timestamp);
            }
            Err(_) => outside += 1,
        }
    }
    let winner = tally
        .into_iter()
        .max_by(|(ca, (na, la)), (cb, (nb, lb))| na.cmp(nb).then(la.cmp(lb)).then(cb.cmp(ca)))
        .map(|(cell, (count, _))| CellVote { cell, count });
    (winner, outside)
}

pub fn nighttime_filter(trace: &DeviceTrace, w: &NightWindow) -> DeviceTrace {
    DeviceTrace {
        device_id: trace.device_id.clone(),
        pings: trace
            .pings
            .iter()
            .filter(|p| w.contains(p.timestamp))
            .copied()
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomeEstimate {
    pub home: Option<HomeLocation>,
    pub out_of_grid: usize,
}

/// Home of one resident from their nighttime pings; `None` without pings.
pub fn infer_home(night_pings: &DeviceTrace, grid: &GridSpec) -> HomeEstimate {
    let (vote, out_of_grid) = most_visited_cell(&night_pings.pings, grid);
    HomeEstimate {
        home: vote.map(|v| HomeLocation {
            point: grid.cell_centroid(v.cell),
            cell: v.cell,
            night_ping_count: v.count,
        }),
        out_of_grid,
    }
}

/// Study grid: bounding box of the given devices' pings, padded by one cell.
pub fn study_grid(
    pre_fire: &TraceSet,
    residents: &BTreeSet<String>,
    cell_size_m: f64,
) -> Result<Option<GridSpec>, GeoError> {
    let bbox = pre_fire
        .traces()
        .iter()
        .filter(|t| residents.contains(&t.device_id))
        .flat_map(|t| t.pings.iter().map(Ping::point))
        .fold(None::<BoundingBox>, |acc, p| match acc {
            Some(mut b) => {
                b.extend(p);
                Some(b)
            }
            None => Some(BoundingBox::around(p)),
        });
    bbox.map(|b| GridSpec::covering(&b, cell_size_m))
        .transpose()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HomeInference {
    pub homes: BTreeMap<String, HomeLocation>,
    /// Residents without a single nighttime ping.
    pub excluded: Vec<String>,
    pub out_of_grid_pings: usize,
}

pub fn infer_all_homes(
    residents: &BTreeSet<String>,
    pre_fire: &TraceSet,
    w: &NightWindow,
    grid: &GridSpec,
) -> HomeInference {
    let ids: Vec<&String> = residents.iter().collect();
    let estimates: Vec<(String, HomeEstimate)> = ids
        .par_iter()
        .map(|id| {
            let est = match pre_fire.get(id) {
                Some(trace) => infer_home(&nighttime_filter(trace, w), grid),
                None => HomeEstimate {
                    home: None,
                    out_of_grid: 0,
                },
            };
            ((*id).clone(), est)
        })
        .collect();
    let mut out = HomeInference::default();
    for (id, est) in estimates {
        out.out_of_grid_pings += est.out_of_grid;
        match est.home {
            Some(h) => {
                out.homes.insert(id, h);
            }
            None => out.excluded.push(id),
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum HomesFileError {
    #[error("homes file: {0}")]
    Csv(#[from] csv::Error),
    #[error("homes file line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("homes file lacks column `{0}`")]
    MissingColumn(&'static str),
}

const HOMES_HEADER: [&str; 6] = [
    "device_id",
    "lat",
    "lon",
    "cell_col",
    "cell_row",
    "night_ping_count",
];

pub fn write_homes<W: Write>(w: W, homes: &BTreeMap<String, HomeLocation>) -> io::Result<()> {
    let mut out = io::BufWriter::new(w);
    writeln!(out, "{}", HOMES_HEADER.join(","))?;
    for (id, h) in homes {
        writeln!(
            out,
            "{id},{},{},{},{},{}",
            h.point.lat, h.point.lon, h.cell.col, h.cell.row, h.night_ping_count
        )?;
    }
    out.flush()
}

pub fn read_homes<R: Read>(r: R) -> Result<BTreeMap<String, HomeLocation>, HomesFileError> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 6];
    for (slot, name) in idx.iter_mut().zip(HOMES_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or(HomesFileError::MissingColumn(name))?;
    }
    let mut homes = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |m: &str| HomesFileError::Row {
            line,
            message: m.to_string(),
        };
        let get = |i: usize| rec.get(idx[i]).unwrap_or("");
        let lat: f64 = get(1).parse().map_err(|_| bad("bad lat"))?;
        let lon: f64 = get(2).parse().map_err(|_| bad("bad lon"))?;
        let col: u32 = get(3).parse().map_err(|_| bad("bad cell_col"))?;
        let row: u32 = get(4).parse().map_err(|_| bad("bad cell_row"))?;
        let count: u32 = get(5).parse().map_err(|_| bad("bad night_ping_count"))?;
        let point = GeoPoint::new(lat, lon);
        if !point.is_valid() {
            return Err(bad("coordinates out of range"));
        }
        homes.insert(
            get(0).to_string(),
            HomeLocation {
                point,
                cell: CellIndex::new(col, row),
                night_ping_count: count,
            },
        );
    }
    Ok(homes)
}
