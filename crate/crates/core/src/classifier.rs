//! Evacuation-behavior decision tree: absence episodes around each home,
//! then one label per resident with departure timing.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::DepartureAnchor;
use crate::geo::{haversine_km, BoundingBox, GeoPoint, GridSpec};
use crate::home::{most_visited_cell, HomeLocation, NightWindow};
use crate::ingest::{Ping, TraceSet};
use crate::scenario::{HomePlacement, Location, Scenario};
use crate::time::{days_between, format_opt, parse_utc, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ResidentLabel {
    SelfEvacuee,
    ShadowEvacuee,
    EvacueeUnderWarning,
    OrderedEvacuee,
    NonEvacueeInZone,
    NonEvacueeOutsideZone,
    Uncategorized,
}

impl ResidentLabel {
    pub const ALL: [ResidentLabel; 7] = [
        ResidentLabel::SelfEvacuee,
        ResidentLabel::ShadowEvacuee,
        ResidentLabel::EvacueeUnderWarning,
        ResidentLabel::OrderedEvacuee,
        ResidentLabel::NonEvacueeInZone,
        ResidentLabel::NonEvacueeOutsideZone,
        ResidentLabel::Uncategorized,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ResidentLabel::SelfEvacuee => "SELF_EVACUEE",
            ResidentLabel::ShadowEvacuee => "SHADOW_EVACUEE",
            ResidentLabel::EvacueeUnderWarning => "EVACUEE_UNDER_WARNING",
            ResidentLabel::OrderedEvacuee => "ORDERED_EVACUEE",
            ResidentLabel::NonEvacueeInZone => "NON_EVACUEE_IN_ZONE",
            ResidentLabel::NonEvacueeOutsideZone => "NON_EVACUEE_OUTSIDE_ZONE",
            ResidentLabel::Uncategorized => "UNCATEGORIZED",
        }
    }

    pub fn is_evacuee(&self) -> bool {
        matches!(
            self,
            ResidentLabel::SelfEvacuee
                | ResidentLabel::ShadowEvacuee
                | ResidentLabel::EvacueeUnderWarning
                | ResidentLabel::OrderedEvacuee
        )
    }

    pub fn is_non_evacuee(&self) -> bool {
        matches!(
            self,
            ResidentLabel::NonEvacueeInZone | ResidentLabel::NonEvacueeOutsideZone
        )
    }
}

impl fmt::Display for ResidentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResidentLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ResidentLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown label {s:?}"))
    }
}

/// One stretch of pings beyond the home buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsenceEpisode {
    pub t_l: Timestamp,
    pub t_r: Option<Timestamp>,
    /// One dwell location per night spent away, in night order.
    pub night_stops: Vec<GeoPoint>,
    pub duration_days: f64,
    pub first_outside: Timestamp,
    pub last_outside: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierParams {
    pub anchor: DepartureAnchor,
    pub night: NightWindow,
    pub cell_size_m: f64,
}

impl ClassifierParams {
    pub fn from_config(c: &crate::config::Config) -> Self {
        Self {
            anchor: c.departure_anchor,
            night: NightWindow::new(c.night_start, c.night_end, c.tz),
            cell_size_m: c.cell_size_m,
        }
    }
}

fn night_stops(away: &[Ping], night: &NightWindow, cell_size_m: f64) -> Vec<GeoPoint> {
    let mut by_night: BTreeMap<NaiveDate, Vec<Ping>> = BTreeMap::new();
    for p in away {
        if let Some(d) = night.night_of(p.timestamp) {
            by_night.entry(d).or_default().push(*p);
        }
    }
    by_night
        .values()
        .filter_map(|pings| {
            let bbox = BoundingBox::from_points(pings.iter().map(Ping::point))?;
            let grid = GridSpec::covering(&bbox, cell_size_m).ok()?;
            most_visited_cell(pings, &grid)
                .0
                .map(|v| grid.cell_centroid(v.cell))
        })
        .collect()
}

/// Maximal runs of pings farther than `d_km` from `home`. `pings` must be
/// time-sorted. A run that opens the trace is anchored at its first ping.
pub fn detect_absences(
    pings: &[Ping],
    home: GeoPoint,
    d_km: f64,
    anchor: DepartureAnchor,
    night: &NightWindow,
    cell_size_m: f64,
) -> Vec<AbsenceEpisode> {
    let Some(last_seen) = pings.last().map(|p| p.timestamp) else {
        return Vec::new();
    };
    let away: Vec<bool> = pings
        .iter()
        .map(|p| haversine_km(p.point(), home) > d_km)
        .collect();
    let mut episodes = Vec::new();
    let mut i = 0;
    while i < pings.len() {
        if !away[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < pings.len() && away[i] {
            i += 1;
        }
        let run = &pings[start..i];
        let first_outside = run[0].timestamp;
        let t_l = match anchor {
            DepartureAnchor::LastInside if start > 0 => pings[start - 1].timestamp,
            _ => first_outside,
        };
        let t_r = pings.get(i).map(|p| p.timestamp);
        episodes.push(AbsenceEpisode {
            t_l,
            t_r,
            night_stops: night_stops(run, night, cell_size_m),
            duration_days: days_between(t_l, t_r.unwrap_or(last_seen)),
            first_outside,
            last_outside: run[run.len() - 1].timestamp,
        });
    }
    episodes
}

/// Pings that can reveal a post-fire departure: every post-fire ping, led
/// by the pre-fire pings from the last one within the buffer onwards.
pub fn absence_trace(
    pre_fire: &[Ping],
    post_fire: &[Ping],
    home: GeoPoint,
    d_km: f64,
) -> Vec<Ping> {
    let from = pre_fire
        .iter()
        .rposition(|p| haversine_km(p.point(), home) <= d_km)
        .unwrap_or(0);
    pre_fire[from..].iter().chain(post_fire).copied().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationResult {
    pub device_id: String,
    pub label: ResidentLabel,
    pub placement: HomePlacement,
    pub home: GeoPoint,
    pub t_l: Option<Timestamp>,
    pub t_e: Option<Timestamp>,
    pub t_r: Option<Timestamp>,
    pub reason_code: String,
}

struct Verdict {
    label: ResidentLabel,
    reason: &'static str,
    episode: Option<AbsenceEpisode>,
}

impl Verdict {
    fn plain(label: ResidentLabel, reason: &'static str) -> Self {
        Self {
            label,
            reason,
            episode: None,
        }
    }

    fn with(label: ResidentLabel, reason: &'static str, e: &AbsenceEpisode) -> Self {
        Self {
            label,
            reason,
            episode: Some(e.clone()),
        }
    }
}

/// First episode lasting `min_days`, or the reason no episode qualifies.
fn qualifying(episodes: &[AbsenceEpisode], min_days: f64) -> Result<&AbsenceEpisode, &'static str> {
    if let Some(e) = episodes.iter().find(|e| e.duration_days >= min_days) {
        return Ok(e);
    }
    match episodes.last() {
        Some(e) if e.t_r.is_none() => Err("open_absence_too_short"),
        _ => Err("no_qualifying_absence"),
    }
}

fn stops_in_zone(e: &AbsenceEpisode, s: &Scenario) -> bool {
    !e.night_stops.is_empty() && e.night_stops.iter().all(|p| s.in_any_zone(*p))
}

fn classify_outside(episodes: &[AbsenceEpisode], lift: Timestamp, s: &Scenario) -> Verdict {
    use ResidentLabel::*;
    let e = match qualifying(episodes, s.outside_absence_days) {
        Ok(e) => e,
        Err("open_absence_too_short") => {
            return Verdict::plain(Uncategorized, "open_absence_too_short")
        }
        Err(r) => return Verdict::plain(NonEvacueeOutsideZone, r),
    };
    if stops_in_zone(e, s) {
        return Verdict::plain(NonEvacueeOutsideZone, "stops_in_zone");
    }
    if e.t_r.is_some_and(|r| r < lift) {
        return Verdict::plain(Uncategorized, "returned_before_lift");
    }
    if e.t_l < s.first_county_alert() {
        if e.t_l < s.ignition {
            return Verdict::plain(Uncategorized, "left_before_ignition");
        }
        return Verdict::with(SelfEvacuee, "left_before_first_alert", e);
    }
    Verdict::with(ShadowEvacuee, "left_after_first_alert", e)
}

fn classify_inside(episodes: &[AbsenceEpisode], zone_id: &str, s: &Scenario) -> Verdict {
    use ResidentLabel::*;
    let z = s
        .zone(zone_id)
        .expect("placement zone belongs to the scenario");
    let e = match qualifying(episodes, s.inside_absence_days) {
        Ok(e) => e,
        Err("open_absence_too_short") => {
            return Verdict::plain(Uncategorized, "open_absence_too_short")
        }
        Err(r) => return Verdict::plain(NonEvacueeInZone, r),
    };
    if stops_in_zone(e, s) {
        return Verdict::plain(NonEvacueeInZone, "stops_in_zone");
    }
    if e.t_r.is_some_and(|r| r < z.lifted) {
        return Verdict::plain(Uncategorized, "returned_before_lift");
    }
    if e.t_l < z.first_alert() {
        if e.t_l < s.ignition {
            return Verdict::plain(Uncategorized, "left_before_ignition");
        }
        return Verdict::with(SelfEvacuee, "left_before_alert", e);
    }
    if e.t_l >= z.lifted {
        return Verdict::plain(Uncategorized, "left_after_lift");
    }
    match z.order_issued {
        Some(o) if e.t_l >= o => Verdict::with(OrderedEvacuee, "left_under_order", e),
        _ => Verdict::with(EvacueeUnderWarning, "left_under_warning", e),
    }
}

/// Labels one resident. `pre_fire` and `post_fire` are the resident's
/// time-sorted pings on either side of ignition.
pub fn classify_resident(
    home: &HomeLocation,
    placement: &HomePlacement,
    pre_fire: &[Ping],
    post_fire: &[Ping],
    s: &Scenario,
    params: &ClassifierParams,
) -> Option<ClassificationResult> {
    let (verdict, prefix) = match &placement.location {
        Location::OutOfScope => return None,
        Location::InZone { .. } if post_fire.is_empty() => (
            Verdict::plain(ResidentLabel::Uncategorized, "no_post_fire_pings"),
            "in_zone",
        ),
        Location::NearZone { .. } if post_fire.is_empty() => (
            Verdict::plain(ResidentLabel::Uncategorized, "no_post_fire_pings"),
            "near_zone",
        ),
        loc => {
            let trace = absence_trace(pre_fire, post_fire, home.point, s.home_buffer_d_km);
            let episodes: Vec<AbsenceEpisode> = detect_absences(
                &trace,
                home.point,
                s.home_buffer_d_km,
                params.anchor,
                &params.night,
                params.cell_size_m,
            )
            .into_iter()
            .filter(|e| e.last_outside >= s.ignition)
            .collect();
            match loc {
                Location::InZone { zone_id } => (classify_inside(&episodes, zone_id, s), "in_zone"),
                Location::NearZone { .. } => {
                    let lift = s
                        .nearest_zone_lift(&placement.device_id, home.point)
                        .expect("near-zone home has a nearest zone");
                    (classify_outside(&episodes, lift, s), "near_zone")
                }
                Location::OutOfScope => unreachable!(),
            }
        }
    };
    let evacuee = verdict.label.is_evacuee();
    let ep = verdict.episode.as_ref();
    Some(ClassificationResult {
        device_id: placement.device_id.clone(),
        label: verdict.label,
        placement: placement.clone(),
        home: home.point,
        t_l: ep.map(|e| e.t_l),
        t_e: ep.filter(|_| evacuee).map(|e| e.t_l),
        t_r: ep.and_then(|e| e.t_r),
        reason_code: format!("{prefix}.{}", verdict.reason),
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassificationRun {
    pub results: Vec<ClassificationResult>,
    pub out_of_scope: usize,
}

impl ClassificationRun {
    pub fn label_counts(&self) -> BTreeMap<ResidentLabel, usize> {
        let mut m = BTreeMap::new();
        for r in &self.results {
            *m.entry(r.label).or_insert(0) += 1;
        }
        m
    }
}

/// Places every home and labels each in-scope resident, in device order.
pub fn classify_all(
    homes: &BTreeMap<String, HomeLocation>,
    pre_fire: &TraceSet,
    post_fire: &TraceSet,
    s: &Scenario,
    params: &ClassifierParams,
) -> ClassificationRun {
    let entries: Vec<(&String, &HomeLocation)> = homes.iter().collect();
    let pings = |set: &TraceSet, id: &str| {
        set.get(id)
            .map(|t| t.pings.as_slice())
            .unwrap_or(&[])
            .to_vec()
    };
    let outcomes: Vec<Option<ClassificationResult>> = entries
        .par_iter()
        .map(|(id, home)| {
            let placement = s.place_home(id, home.point);
            classify_resident(
                home,
                &placement,
                &pings(pre_fire, id),
                &pings(post_fire, id),
                s,
                params,
            )
        })
        .collect();
    let mut run = ClassificationRun::default();
    for o in outcomes {
        match o {
            Some(r) => run.results.push(r),
            None => run.out_of_scope += 1,
        }
    }
    run
}

const HEADER: [&str; 10] = [
    "device_id",
    "label",
    "reason_code",
    "home_lat",
    "home_lon",
    "tract_id",
    "zone_id",
    "t_l",
    "t_e",
    "t_r",
];

pub fn write_classifications<W: Write>(w: W, results: &[ClassificationResult]) -> io::Result<()> {
    let mut out = io::BufWriter::new(w);
    writeln!(out, "{}", HEADER.join(","))?;
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.device_id,
            r.label,
            r.reason_code,
            r.home.lat,
            r.home.lon,
            r.placement.tract_id.as_deref().unwrap_or(""),
            r.placement.location.zone_id().unwrap_or(""),
            format_opt(r.t_l),
            format_opt(r.t_e),
            format_opt(r.t_r),
        )?;
    }
    out.flush()
}

#[derive(Debug, Error)]
pub enum ClassificationsFileError {
    #[error("classifications file: {0}")]
    Csv(#[from] csv::Error),
    #[error("classifications file line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("classifications file lacks column `{0}`")]
    MissingColumn(&'static str),
}

/// Reads a classifications file; placements are recomputed from the home
/// coordinates against `s`.
pub fn read_classifications<R: Read>(
    r: R,
    s: &Scenario,
) -> Result<Vec<ClassificationResult>, ClassificationsFileError> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 10];
    for (slot, name) in idx.iter_mut().zip(HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or(ClassificationsFileError::MissingColumn(name))?;
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |m: String| ClassificationsFileError::Row { line, message: m };
        let get = |i: usize| rec.get(idx[i]).unwrap_or("");
        let time = |i: usize| -> Result<Option<Timestamp>, ClassificationsFileError> {
            match get(i) {
                "" => Ok(None),
                v => parse_utc(v).map(Some).map_err(|e| bad(e.to_string())),
            }
        };
        let label: ResidentLabel = get(1).parse().map_err(bad)?;
        let lat: f64 = get(3).parse().map_err(|_| bad("bad home_lat".into()))?;
        let lon: f64 = get(4).parse().map_err(|_| bad("bad home_lon".into()))?;
        let home = GeoPoint::new(lat, lon);
        let device_id = get(0).to_string();
        let placement = s.place_home(&device_id, home);
        if placement.location.zone_id().unwrap_or("") != get(6) {
            return Err(bad(format!(
                "zone_id {:?} does not match the home's placement",
                get(6)
            )));
        }
        out.push(ClassificationResult {
            device_id,
            label,
            placement,
            home,
            t_l: time(7)?,
            t_e: time(8)?,
            t_r: time(9)?,
            reason_code: get(2).to_string(),
        });
    }
    Ok(out)
}
