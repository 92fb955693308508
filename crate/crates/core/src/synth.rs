//! Synthetic scenarios and ping streams with known homes, labels and
//! departure times.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Duration, NaiveDate, NaiveTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::classifier::ResidentLabel;
use crate::config::Config;
use crate::geo::{haversine_km, unproject, GeoPoint, Planar, ZoneGeometry};
use crate::home::NightWindow;
use crate::ingest::Ping;
use crate::scenario::{write_tracts, write_zones, EvacZone, Location, Scenario, Tract};
use crate::time::{
    format_opt, format_utc, local_dates_between, local_midnight, local_to_utc, parse_local,
    Timestamp,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("agent {agent}: {message}")]
    Script { agent: String, message: String },
    #[error("invalid mix: {0}")]
    Mix(String),
    #[error("unknown template {0:?} (expected BASIC, ORDER_FIRST or OVERLAPPING)")]
    Template(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Template {
    #[default]
    Basic,
    OrderFirst,
    Overlapping,
}

impl Template {
    pub fn as_str(&self) -> &'static str {
        match self {
            Template::Basic => "BASIC",
            Template::OrderFirst => "ORDER_FIRST",
            Template::Overlapping => "OVERLAPPING",
        }
    }
}

impl FromStr for Template {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "BASIC" => Ok(Template::Basic),
            "ORDER_FIRST" => Ok(Template::OrderFirst),
            "OVERLAPPING" => Ok(Template::Overlapping),
            _ => Err(SynthError::Template(s.to_string())),
        }
    }
}

/// Center of the synthetic study area.
pub const ORIGIN: GeoPoint = GeoPoint::new(38.6, -122.8);

fn at_km(east: f64, north: f64) -> GeoPoint {
    unproject(Planar::new(east * 1000.0, north * 1000.0), ORIGIN)
}

fn rect_km(x0: f64, y0: f64, x1: f64, y1: f64) -> ZoneGeometry {
    let sw = at_km(x0, y0);
    let ne = at_km(x1, y1);
    ZoneGeometry::rectangle(sw.lat, sw.lon, ne.lat, ne.lon).expect("valid rectangle")
}

/// Kincade-like timing: ignition 2019-10-23 21:27 local, data from
/// 2019-10-16 through 2019-11-13.
pub fn synth_config() -> Config {
    let tz = "America/Los_Angeles".parse().expect("known zone");
    Config::with_defaults(
        parse_local("2019-10-23T21:27:00", tz).unwrap(),
        tz,
        parse_local("2019-10-16", tz).unwrap(),
        parse_local("2019-11-13T23:59:59", tz).unwrap(),
    )
}

struct ZoneTemplate {
    id: &'static str,
    rect: (f64, f64, f64, f64),
    warning: Option<i64>,
    order: Option<i64>,
    lift: i64,
}

fn zone_templates(t: Template) -> Vec<ZoneTemplate> {
    let z = |id, rect, warning, order, lift| ZoneTemplate {
        id,
        rect,
        warning,
        order,
        lift,
    };
    match t {
        Template::Basic => vec![z("Z1", (-15.0, -10.0, 15.0, 10.0), Some(3), Some(5), 9)],
        Template::OrderFirst => vec![
            z("Z1", (-15.0, -10.0, 0.0, 10.0), None, Some(2), 9),
            z("Z2", (0.0, -10.0, 15.0, 10.0), Some(3), Some(5), 10),
        ],
        Template::Overlapping => vec![
            z("Z1", (-15.0, -10.0, 5.0, 10.0), Some(3), Some(5), 9),
            z("Z2", (-5.0, -10.0, 15.0, 10.0), Some(4), Some(6), 10),
        ],
    }
}

/// Zones from the template and a 4 x 3 grid of tracts with seeded
/// populations covering the zones and their buffer.
pub fn generate_scenario(
    template: Template,
    seed: u64,
    config: &Config,
) -> Result<Scenario, SynthError> {
    let day = |k: i64| config.ignition + Duration::days(k);
    let zones = zone_templates(template)
        .into_iter()
        .map(|z| EvacZone {
            zone_id: z.id.to_string(),
            geometry: rect_km(z.rect.0, z.rect.1, z.rect.2, z.rect.3),
            warning_issued: z.warning.map(day),
            order_issued: z.order.map(day),
            lifted: day(z.lift),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x0, y0, w, h) = (-28.0, -22.0, 14.0, 44.0 / 3.0);
    let mut tracts = Vec::new();
    for row in 0..3 {
        for col in 0..4 {
            let (tx, ty) = (x0 + w * col as f64, y0 + h * row as f64);
            tracts.push(Tract {
                tract_id: format!("T{row}{col}"),
                geometry: rect_km(tx, ty, tx + w, ty + h),
                population: rng.random_range(1500..9000),
            });
        }
    }
    Scenario::new(zones, tracts, config).map_err(|e| SynthError::Scenario(e.to_string()))
}

/// Share of each label among the agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Mix(Vec<(ResidentLabel, f64)>);

const SHORT_NAMES: [(&str, ResidentLabel); 7] = [
    ("self", ResidentLabel::SelfEvacuee),
    ("shadow", ResidentLabel::ShadowEvacuee),
    ("warning", ResidentLabel::EvacueeUnderWarning),
    ("ordered", ResidentLabel::OrderedEvacuee),
    ("non_in", ResidentLabel::NonEvacueeInZone),
    ("non_out", ResidentLabel::NonEvacueeOutsideZone),
    ("uncat", ResidentLabel::Uncategorized),
];

impl Mix {
    /// Weights are normalized; their sum must lie within 5% of 1.
    pub fn new(weights: Vec<(ResidentLabel, f64)>) -> Result<Self, SynthError> {
        if weights.iter().any(|(_, w)| !w.is_finite() || *w < 0.0) {
            return Err(SynthError::Mix("weights must be non-negative".into()));
        }
        let sum: f64 = weights.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > 0.05 {
            return Err(SynthError::Mix(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self(
            weights.into_iter().map(|(l, w)| (l, w / sum)).collect(),
        ))
    }

    pub fn weights(&self) -> &[(ResidentLabel, f64)] {
        &self.0
    }

    /// Largest-remainder apportionment of `n` agents; ties go to the
    /// earlier entry.
    pub fn counts(&self, n: usize) -> Vec<(ResidentLabel, usize)> {
        let quotas: Vec<f64> = self.0.iter().map(|(_, w)| w * n as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let short = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| {
            (quotas[b] - quotas[b].floor())
                .total_cmp(&(quotas[a] - quotas[a].floor()))
                .then(a.cmp(&b))
        });
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        self.0.iter().map(|(l, _)| *l).zip(counts).collect()
    }
}

impl Default for Mix {
    fn default() -> Self {
        Mix::new(vec![
            (ResidentLabel::SelfEvacuee, 0.10),
            (ResidentLabel::ShadowEvacuee, 0.10),
            (ResidentLabel::EvacueeUnderWarning, 0.10),
            (ResidentLabel::OrderedEvacuee, 0.20),
            (ResidentLabel::NonEvacueeInZone, 0.20),
            (ResidentLabel::NonEvacueeOutsideZone, 0.15),
            (ResidentLabel::Uncategorized, 0.15),
        ])
        .unwrap()
    }
}

impl FromStr for Mix {
    type Err = SynthError;

    /// `self=0.33,shadow=0.23,...`; full label names are accepted too.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut weights = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| SynthError::Mix(format!("expected label=weight, got {part:?}")))?;
            let k = k.trim();
            let label = SHORT_NAMES
                .iter()
                .find(|(n, _)| n.eq_ignore_ascii_case(k))
                .map(|(_, l)| *l)
                .or_else(|| k.to_ascii_uppercase().parse().ok())
                .ok_or_else(|| SynthError::Mix(format!("unknown label {k:?}")))?;
            let w: f64 = v
                .trim()
                .parse()
                .map_err(|_| SynthError::Mix(format!("bad weight {v:?}")))?;
            if weights.iter().any(|(l, _)| *l == label) {
                return Err(SynthError::Mix(format!("label {k:?} given twice")));
            }
            weights.push((label, w));
        }
        Mix::new(weights)
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|(l, w)| format!("{}={w}", l.as_str()))
            .collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub ping_rate_per_hour: f64,
    pub position_noise_m: f64,
    /// Share of extra pings with accuracy beyond the cleaning threshold.
    pub junk_fraction: f64,
    /// Share of pings emitted twice.
    pub duplicate_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            ping_rate_per_hour: 4.0,
            position_noise_m: 30.0,
            junk_fraction: 0.02,
            duplicate_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub agent_id: String,
    pub true_home: GeoPoint,
    pub work: GeoPoint,
    pub behavior: ResidentLabel,
    pub departure: Option<Timestamp>,
    pub destination: Option<GeoPoint>,
    pub return_time: Option<Timestamp>,
    /// No pings from this instant on.
    pub silent_from: Option<Timestamp>,
    pub ping_rate_per_hour: f64,
    pub position_noise_m: f64,
    pub seed: u64,
}

impl AgentSpec {
    fn away_at(&self, t: Timestamp) -> bool {
        match self.departure {
            Some(d) => t > d && self.return_time.is_none_or(|r| t < r),
            None => false,
        }
    }

    fn fail(&self, message: impl Into<String>) -> SynthError {
        SynthError::Script {
            agent: self.agent_id.clone(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub agent_id: String,
    pub label: ResidentLabel,
    pub t_e: Option<Timestamp>,
    pub home: GeoPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticAgent {
    pub spec: AgentSpec,
    /// Emission order, junk and duplicate rows included.
    pub pings: Vec<Ping>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyntheticDataset {
    pub agents: Vec<SyntheticAgent>,
}

impl SyntheticDataset {
    pub fn truth(&self) -> Vec<TruthRow> {
        self.agents.iter().map(|a| truth_row(&a.spec)).collect()
    }

    pub fn ping_count(&self) -> usize {
        self.agents.iter().map(|a| a.pings.len()).sum()
    }
}

fn truth_row(spec: &AgentSpec) -> TruthRow {
    TruthRow {
        agent_id: spec.agent_id.clone(),
        label: spec.behavior,
        t_e: spec.departure.filter(|_| spec.behavior.is_evacuee()),
        home: spec.true_home,
    }
}

fn quantize(x: f64) -> f64 {
    (x * 1e7).round() / 1e7
}

fn quantize_point(p: GeoPoint) -> GeoPoint {
    GeoPoint::new(quantize(p.lat), quantize(p.lon))
}

fn uniform_time(rng: &mut ChaCha8Rng, a: Timestamp, b: Timestamp) -> Timestamp {
    let span = (b - a).num_seconds();
    assert!(span > 0, "empty time range");
    a + Duration::seconds(rng.random_range(0..span))
}

fn hours(h: f64) -> Duration {
    Duration::seconds((h * 3600.0) as i64)
}

fn offset_km(p: GeoPoint, dist_km: f64, bearing: f64) -> GeoPoint {
    unproject(
        Planar::new(
            dist_km * 1000.0 * bearing.cos(),
            dist_km * 1000.0 * bearing.sin(),
        ),
        p,
    )
}

/// Clearance from every zone boundary, in km.
fn zone_clearance(s: &Scenario, p: GeoPoint) -> f64 {
    s.zones
        .iter()
        .map(|z| z.geometry.boundary_distance_km(p))
        .fold(f64::INFINITY, f64::min)
}

const MAX_TRIES: usize = 10_000;

fn sample_in_zone(
    rng: &mut ChaCha8Rng,
    s: &Scenario,
    accept: impl Fn(&EvacZone, GeoPoint) -> bool,
) -> Option<(GeoPoint, String)> {
    let bbox = s
        .zones
        .iter()
        .skip(1)
        .fold(*s.zones[0].geometry.bbox(), |b, z| {
            b.union(z.geometry.bbox())
        });
    for _ in 0..MAX_TRIES {
        let p = quantize_point(GeoPoint::new(
            rng.random_range(bbox.min_lat..bbox.max_lat),
            rng.random_range(bbox.min_lon..bbox.max_lon),
        ));
        if let Location::InZone { zone_id } = s.place_home("", p).location {
            let z = s.zone(&zone_id).unwrap();
            if zone_clearance(s, p) >= 1.0 && accept(z, p) {
                return Some((p, zone_id));
            }
        }
    }
    None
}

fn sample_near_zone(rng: &mut ChaCha8Rng, s: &Scenario) -> Option<GeoPoint> {
    let bbox = s
        .zones
        .iter()
        .skip(1)
        .fold(*s.zones[0].geometry.bbox(), |b, z| {
            b.union(z.geometry.bbox())
        });
    let pad_lat = s.shadow_buffer_km / 111.0;
    let pad_lon = pad_lat / ORIGIN.lat.to_radians().cos();
    for _ in 0..MAX_TRIES {
        let p = quantize_point(GeoPoint::new(
            rng.random_range(bbox.min_lat - pad_lat..bbox.max_lat + pad_lat),
            rng.random_range(bbox.min_lon - pad_lon..bbox.max_lon + pad_lon),
        ));
        if s.in_any_zone(p) {
            continue;
        }
        let d = zone_clearance(s, p);
        if d >= 1.0 && d <= s.shadow_buffer_km - 1.0 {
            return Some(p);
        }
    }
    None
}

/// Destination beyond the buffer and at least 2 km clear of every zone.
fn sample_outside_destination(
    rng: &mut ChaCha8Rng,
    s: &Scenario,
    home: GeoPoint,
) -> Option<GeoPoint> {
    for _ in 0..MAX_TRIES {
        let p = quantize_point(offset_km(
            home,
            rng.random_range(s.home_buffer_d_km + 5.0..s.home_buffer_d_km + 40.0),
            rng.random_range(0.0..std::f64::consts::TAU),
        ));
        if !s.in_any_zone(p) && zone_clearance(s, p) >= 2.0 {
            return Some(p);
        }
    }
    None
}

fn sample_zone_destination(rng: &mut ChaCha8Rng, s: &Scenario, home: GeoPoint) -> Option<GeoPoint> {
    sample_in_zone(rng, s, |_, p| {
        haversine_km(p, home) > s.home_buffer_d_km + 2.0
    })
    .map(|(p, _)| p)
}

/// Draws a behavior script for `label` consistent with the scenario.
pub fn plan_agent(
    agent_id: String,
    label: ResidentLabel,
    s: &Scenario,
    config: &Config,
    params: &SynthParams,
    seed: u64,
) -> Result<AgentSpec, SynthError> {
    use ResidentLabel::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fail = |m: &str| SynthError::Script {
        agent: agent_id.clone(),
        message: m.to_string(),
    };
    let ign = s.ignition;
    let county_alert = s.first_county_alert();
    let after_lift = |rng: &mut ChaCha8Rng, lift: Timestamp| {
        uniform_time(rng, lift + hours(6.0), lift + hours(48.0))
    };

    let in_zone = match label {
        EvacueeUnderWarning | OrderedEvacuee | NonEvacueeInZone => true,
        ShadowEvacuee | NonEvacueeOutsideZone => false,
        SelfEvacuee | Uncategorized => rng.random_bool(0.5),
    };
    let (home, zone) = if in_zone {
        let need_warning = label == EvacueeUnderWarning;
        let need_order = label == OrderedEvacuee;
        let (p, z) = sample_in_zone(&mut rng, s, |z, _| {
            (!need_warning || z.warning_issued.is_some())
                && (!need_order || z.order_issued.is_some())
        })
        .ok_or_else(|| fail("no admissible in-zone home"))?;
        (p, s.zone(&z).cloned())
    } else {
        (
            sample_near_zone(&mut rng, s).ok_or_else(|| fail("no admissible near-zone home"))?,
            None,
        )
    };
    let lift = match &zone {
        Some(z) => z.lifted,
        None => s
            .nearest_zone_lift(&agent_id, home)
            .map_err(|e| fail(&e.to_string()))?,
    };
    let work = quantize_point(offset_km(
        home,
        rng.random_range(0.5..s.home_buffer_d_km / 2.0 - 0.5),
        rng.random_range(0.0..std::f64::consts::TAU),
    ));

    let mut departure = None;
    let mut destination = None;
    let mut return_time = None;
    let mut silent_from = None;
    let outside = |rng: &mut ChaCha8Rng| {
        sample_outside_destination(rng, s, home).ok_or_else(|| fail("no admissible destination"))
    };
    match label {
        SelfEvacuee => {
            let alert = zone
                .as_ref()
                .map(|z| z.first_alert())
                .unwrap_or(county_alert);
            departure = Some(uniform_time(&mut rng, ign + hours(2.0), alert - hours(2.0)));
            destination = Some(outside(&mut rng)?);
            return_time = Some(after_lift(&mut rng, lift));
        }
        ShadowEvacuee => {
            departure = Some(uniform_time(
                &mut rng,
                county_alert + hours(1.0),
                lift - Duration::days(3),
            ));
            destination = Some(outside(&mut rng)?);
            return_time = Some(after_lift(&mut rng, lift));
        }
        EvacueeUnderWarning => {
            let z = zone.as_ref().unwrap();
            let w = z.warning_issued.unwrap();
            let end = z.order_issued.unwrap_or(lift - Duration::days(2));
            departure = Some(uniform_time(&mut rng, w + hours(1.0), end - hours(1.0)));
            destination = Some(outside(&mut rng)?);
            return_time = Some(after_lift(&mut rng, lift));
        }
        OrderedEvacuee => {
            let o = zone.as_ref().unwrap().order_issued.unwrap();
            departure = Some(uniform_time(
                &mut rng,
                o + hours(1.0),
                lift - Duration::days(2),
            ));
            destination = Some(outside(&mut rng)?);
            return_time = Some(after_lift(&mut rng, lift));
        }
        NonEvacueeInZone => {}
        NonEvacueeOutsideZone => match rng.random_range(0..3) {
            0 => {}
            1 => {
                let d = uniform_time(&mut rng, ign + hours(12.0), ign + Duration::days(5));
                departure = Some(d);
                destination = Some(
                    sample_zone_destination(&mut rng, s, home)
                        .ok_or_else(|| fail("no in-zone destination"))?,
                );
                return_time = Some(d + hours(rng.random_range(60.0..96.0)));
            }
            _ => {
                let d = uniform_time(&mut rng, ign + hours(2.0), ign + Duration::days(8));
                departure = Some(d);
                destination = Some(outside(&mut rng)?);
                return_time = Some(d + hours(rng.random_range(6.0..36.0)));
            }
        },
        Uncategorized => {
            let min_days = if in_zone {
                s.inside_absence_days
            } else {
                s.outside_absence_days
            };
            match rng.random_range(0..if in_zone { 3 } else { 2 }) {
                0 => silent_from = Some(ign),
                1 => {
                    let d = uniform_time(&mut rng, ign + hours(2.0), lift - Duration::days(4));
                    departure = Some(d);
                    destination = Some(outside(&mut rng)?);
                    let earliest = d + Duration::days(min_days.ceil() as i64) + hours(12.0);
                    return_time = Some(uniform_time(&mut rng, earliest, lift - hours(6.0)));
                }
                _ => {
                    let d = uniform_time(&mut rng, lift + hours(6.0), lift + Duration::days(2));
                    departure = Some(d);
                    destination = Some(outside(&mut rng)?);
                    return_time = Some(uniform_time(
                        &mut rng,
                        d + hours(36.0),
                        config.study_end - Duration::days(1),
                    ));
                }
            }
        }
    }
    Ok(AgentSpec {
        agent_id,
        true_home: home,
        work,
        behavior: label,
        departure,
        destination,
        return_time,
        silent_from,
        ping_rate_per_hour: params.ping_rate_per_hour,
        position_noise_m: params.position_noise_m,
        seed,
    })
}

/// Pre-fire spans that the daily floor applies to, one per local date.
fn pre_fire_days(config: &Config) -> Vec<(Timestamp, Timestamp)> {
    local_dates_between(config.study_start, config.ignition, config.tz)
        .into_iter()
        .map(|d| {
            let a = local_midnight(d, config.tz).max(config.study_start);
            let b = local_midnight(d + Duration::days(1), config.tz).min(config.ignition);
            (a, b)
        })
        .collect()
}

/// Pre-fire slices of nighttime, one per night.
fn pre_fire_nights(config: &Config) -> Vec<(Timestamp, Timestamp)> {
    let tz = config.tz;
    let first: NaiveDate = crate::time::local_date(config.study_start, tz) - Duration::days(1);
    let last = crate::time::local_date(config.ignition, tz);
    first
        .iter_days()
        .take_while(|d| *d <= last)
        .filter_map(|d| {
            let start = local_to_utc(d.and_time(config.night_start), tz).ok()?;
            let end_date = if config.night_start > config.night_end {
                d + Duration::days(1)
            } else {
                d
            };
            let end = local_to_utc(end_date.and_time(config.night_end), tz).ok()?;
            let (a, b) = (start.max(config.study_start), end.min(config.ignition));
            (a < b).then_some((a, b))
        })
        .collect()
}

fn is_work_hour(t: Timestamp, config: &Config) -> bool {
    let local = t.with_timezone(&config.tz).time();
    local >= NaiveTime::from_hms_opt(9, 0, 0).unwrap()
        && local < NaiveTime::from_hms_opt(17, 0, 0).unwrap()
}

/// Clean pings realizing `spec`, before junk and duplicates are added.
pub fn generate_agent_trace(
    spec: &AgentSpec,
    s: &Scenario,
    config: &Config,
) -> Result<Vec<Ping>, SynthError> {
    if spec.ping_rate_per_hour <= 0.0 {
        return Err(spec.fail("ping rate must be positive"));
    }
    if let (Some(_), Some(dest)) = (spec.departure, spec.destination) {
        if haversine_km(dest, spec.true_home) <= s.home_buffer_d_km {
            return Err(spec.fail("destination lies within the home buffer"));
        }
    }
    if spec.behavior.is_evacuee() && (spec.departure.is_none() || spec.destination.is_none()) {
        return Err(spec.fail("evacuee script needs a departure and a destination"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f0e_a11c_e5e5);
    let end = spec
        .silent_from
        .map(|t| t - Duration::seconds(1))
        .unwrap_or(config.study_end);
    let gap = Exp::new(spec.ping_rate_per_hour / 3600.0).unwrap();
    let mut times = Vec::new();
    let mut t = config.study_start.timestamp() as f64;
    let stop = end.timestamp() as f64;
    loop {
        t += gap.sample(&mut rng);
        if t > stop {
            break;
        }
        times.push(chrono::DateTime::from_timestamp(t.floor() as i64, 0).unwrap());
    }
    for (a, b) in pre_fire_days(config) {
        let have = times.iter().filter(|t| **t >= a && **t < b).count();
        for _ in have..config.min_daily_signals as usize {
            times.push(uniform_time(&mut rng, a, b));
        }
    }
    for (a, b) in pre_fire_nights(config) {
        if !times.iter().any(|t| *t >= a && *t < b) {
            times.push(uniform_time(&mut rng, a, b));
        }
    }
    for t in [spec.departure, spec.return_time].into_iter().flatten() {
        if t <= end {
            times.push(t);
        }
    }
    times.sort_unstable();

    let noise = Normal::new(0.0, spec.position_noise_m.max(0.0)).unwrap();
    let pings = times
        .into_iter()
        .map(|t| {
            let nominal = if spec.away_at(t) {
                spec.destination.unwrap()
            } else if is_work_hour(t, config)
                && Some(t) != spec.departure
                && Some(t) != spec.return_time
            {
                spec.work
            } else {
                spec.true_home
            };
            let p = if spec.position_noise_m > 0.0 {
                unproject(
                    Planar::new(noise.sample(&mut rng), noise.sample(&mut rng)),
                    nominal,
                )
            } else {
                nominal
            };
            let acc = (rng.random_range(3.0..60.0f64) * 10.0).round() / 10.0;
            Ping::new(t, quantize(p.lat), quantize(p.lon), Some(acc))
        })
        .collect::<Vec<_>>();
    validate_trace(spec, &pings, s, config)?;
    Ok(pings)
}

/// Checks that a generated trace honours its own script.
pub fn validate_trace(
    spec: &AgentSpec,
    pings: &[Ping],
    s: &Scenario,
    config: &Config,
) -> Result<(), SynthError> {
    let d = s.home_buffer_d_km;
    for p in pings {
        let far = haversine_km(p.point(), spec.true_home) > d;
        if far != spec.away_at(p.timestamp) {
            return Err(spec.fail(format!(
                "ping at {} is {} the home buffer against the script",
                format_utc(p.timestamp),
                if far { "beyond" } else { "within" }
            )));
        }
    }
    if spec
        .silent_from
        .is_some_and(|t| pings.iter().any(|p| p.timestamp >= t))
    {
        return Err(spec.fail("pings after going silent"));
    }
    for (a, b) in pre_fire_days(config) {
        if pings
            .iter()
            .filter(|p| p.timestamp >= a && p.timestamp < b)
            .count()
            < config.min_daily_signals as usize
        {
            return Err(spec.fail(format!(
                "fewer than {} pings on the day starting {}",
                config.min_daily_signals,
                format_utc(a)
            )));
        }
    }
    let night = NightWindow::new(config.night_start, config.night_end, config.tz);
    for (a, b) in pre_fire_nights(config) {
        if !pings
            .iter()
            .any(|p| p.timestamp >= a && p.timestamp < b && night.contains(p.timestamp))
        {
            return Err(spec.fail(format!(
                "no ping during the night starting {}",
                format_utc(a)
            )));
        }
    }
    Ok(())
}

/// Appends duplicates and inaccurate junk pings; emission stays time-sorted.
fn add_noise_rows(
    spec: &AgentSpec,
    mut pings: Vec<Ping>,
    params: &SynthParams,
    config: &Config,
) -> Vec<Ping> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0d0b_1e5a_17e5_0000);
    let mut out = Vec::with_capacity(pings.len() + pings.len() / 16);
    let n = pings.len();
    for p in pings.drain(..) {
        out.push(p);
        if rng.random_bool(params.duplicate_fraction.clamp(0.0, 1.0)) {
            out.push(p);
        }
    }
    let end = spec.silent_from.unwrap_or(config.study_end);
    let junk = (params.junk_fraction * n as f64).round() as usize;
    for _ in 0..junk {
        let t = uniform_time(&mut rng, config.study_start, end);
        let p = quantize_point(offset_km(
            spec.true_home,
            rng.random_range(1.0..60.0),
            rng.random_range(0.0..std::f64::consts::TAU),
        ));
        let acc = (rng.random_range(config.accuracy_max_m + 1.0..2000.0) * 10.0).round() / 10.0;
        out.push(Ping::new(t, p.lat, p.lon, Some(acc)));
    }
    out.sort_by_key(|p| p.timestamp);
    out
}

fn agent_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 of the pair
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Label of every agent, in agent order.
pub fn agent_labels(n: usize, mix: &Mix, seed: u64) -> Vec<ResidentLabel> {
    let mut labels: Vec<ResidentLabel> = mix
        .counts(n)
        .into_iter()
        .flat_map(|(l, k)| std::iter::repeat_n(l, k))
        .collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    labels
}

pub fn agent_id(index: usize) -> String {
    format!("agent_{index:06}")
}

pub fn generate_agent(
    index: usize,
    label: ResidentLabel,
    s: &Scenario,
    config: &Config,
    params: &SynthParams,
    seed: u64,
) -> Result<SyntheticAgent, SynthError> {
    let spec = plan_agent(
        agent_id(index),
        label,
        s,
        config,
        params,
        agent_seed(seed, index),
    )?;
    let clean = generate_agent_trace(&spec, s, config)?;
    let pings = add_noise_rows(&spec, clean, params, config);
    Ok(SyntheticAgent { spec, pings })
}

pub fn generate_dataset(
    n_agents: usize,
    mix: &Mix,
    s: &Scenario,
    config: &Config,
    params: &SynthParams,
    seed: u64,
) -> Result<SyntheticDataset, SynthError> {
    let labels = agent_labels(n_agents, mix, seed);
    let agents = labels
        .par_iter()
        .enumerate()
        .map(|(i, &l)| generate_agent(i, l, s, config, params, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SyntheticDataset { agents })
}

pub fn write_agent_pings<W: Write>(w: &mut W, agent: &SyntheticAgent) -> io::Result<()> {
    for p in &agent.pings {
        write!(
            w,
            "{},{},{},{},",
            agent.spec.agent_id,
            format_utc(p.timestamp),
            p.lat,
            p.lon
        )?;
        match p.accuracy_m {
            Some(a) => writeln!(w, "{a}")?,
            None => writeln!(w)?,
        }
    }
    Ok(())
}

pub const PINGS_HEADER: &str = "device_id,timestamp,lat,lon,accuracy";

pub fn write_truth<W: Write>(w: W, truth: &[TruthRow]) -> io::Result<()> {
    let mut out = BufWriter::new(w);
    writeln!(out, "agent_id,label,t_e,home_lat,home_lon")?;
    for t in truth {
        writeln!(
            out,
            "{},{},{},{},{}",
            t.agent_id,
            t.label,
            format_opt(t.t_e),
            t.home.lat,
            t.home.lon
        )?;
    }
    out.flush()
}

#[derive(Debug, Error)]
pub enum TruthFileError {
    #[error("truth file: {0}")]
    Csv(#[from] csv::Error),
    #[error("truth file line {line}: {message}")]
    Row { line: u64, message: String },
}

pub fn read_truth<R: io::Read>(r: R) -> Result<Vec<TruthRow>, TruthFileError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |m: String| TruthFileError::Row { line, message: m };
        let get = |i: usize| rec.get(i).unwrap_or("");
        let t_e = match get(2) {
            "" => None,
            v => Some(crate::time::parse_utc(v).map_err(|e| bad(e.to_string()))?),
        };
        out.push(TruthRow {
            agent_id: get(0).to_string(),
            label: get(1).parse().map_err(bad)?,
            t_e,
            home: GeoPoint::new(
                get(3).parse().map_err(|_| bad("bad home_lat".into()))?,
                get(4).parse().map_err(|_| bad("bad home_lon".into()))?,
            ),
        });
    }
    Ok(out)
}

/// File names inside a synthetic bundle.
pub mod bundle {
    pub const PINGS: &str = "pings.csv";
    pub const ZONES: &str = "zones.geojson";
    pub const TRACTS: &str = "tracts.geojson";
    pub const CONFIG: &str = "evactrace.conf";
    pub const TRUTH: &str = "truth.csv";
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleSummary {
    pub agents: usize,
    pub pings: usize,
    pub files: Vec<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the scenario, config, truth table and pings of a synthetic run.
/// Agents are generated in chunks so memory stays bounded.
pub fn write_bundle(
    outdir: &Path,
    template: Template,
    n_agents: usize,
    mix: &Mix,
    params: &SynthParams,
    seed: u64,
) -> Result<BundleSummary, SynthError> {
    fs::create_dir_all(outdir).map_err(io_err(outdir))?;
    let mut config = synth_config();
    let s = generate_scenario(template, seed, &config)?;
    let path = |name: &str| outdir.join(name);
    let zones_path = path(bundle::ZONES);
    write_zones(
        File::create(&zones_path).map_err(io_err(&zones_path))?,
        &s.zones,
    )
    .map_err(io_err(&zones_path))?;
    let tracts_path = path(bundle::TRACTS);
    write_tracts(
        File::create(&tracts_path).map_err(io_err(&tracts_path))?,
        &s.tracts,
    )
    .map_err(io_err(&tracts_path))?;

    let labels = agent_labels(n_agents, mix, seed);
    let pings_path = path(bundle::PINGS);
    let mut out = BufWriter::with_capacity(
        1 << 20,
        File::create(&pings_path).map_err(io_err(&pings_path))?,
    );
    writeln!(out, "{PINGS_HEADER}").map_err(io_err(&pings_path))?;
    let mut truth = Vec::with_capacity(n_agents);
    let mut total = 0;
    const CHUNK: usize = 256;
    for start in (0..n_agents).step_by(CHUNK) {
        let end = (start + CHUNK).min(n_agents);
        let agents = (start..end)
            .into_par_iter()
            .map(|i| generate_agent(i, labels[i], &s, &config, params, seed))
            .collect::<Result<Vec<_>, _>>()?;
        for a in &agents {
            write_agent_pings(&mut out, a).map_err(io_err(&pings_path))?;
            total += a.pings.len();
            truth.push(truth_row(&a.spec));
        }
    }
    out.flush().map_err(io_err(&pings_path))?;

    let truth_path = path(bundle::TRUTH);
    write_truth(
        File::create(&truth_path).map_err(io_err(&truth_path))?,
        &truth,
    )
    .map_err(io_err(&truth_path))?;
    config.pings = Some(PathBuf::from(bundle::PINGS));
    config.zones = Some(PathBuf::from(bundle::ZONES));
    config.tracts = Some(PathBuf::from(bundle::TRACTS));
    let config_path = path(bundle::CONFIG);
    let text = format!(
        "# synthetic bundle: template {}, {n_agents} agents, seed {seed}, mix {mix}\n{}",
        template.as_str(),
        config.to_text()
    );
    fs::write(&config_path, text).map_err(io_err(&config_path))?;
    Ok(BundleSummary {
        agents: n_agents,
        pings: total,
        files: vec![pings_path, zones_path, tracts_path, config_path, truth_path],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basic() -> (Scenario, Config) {
        let c = synth_config();
        (generate_scenario(Template::Basic, 7, &c).unwrap(), c)
    }

    #[test]
    fn scenario_templates() {
        let c = synth_config();
        assert_eq!(
            generate_scenario(Template::Basic, 7, &c).unwrap(),
            generate_scenario(Template::Basic, 7, &c).unwrap()
        );
        let b = generate_scenario(Template::Basic, 7, &c).unwrap();
        assert_eq!(b.zones.len(), 1);
        assert_eq!(
            b.zones[0].warning_issued,
            Some(c.ignition + Duration::days(3))
        );
        assert_eq!(
            b.zones[0].order_issued,
            Some(c.ignition + Duration::days(5))
        );
        assert_eq!(b.zones[0].lifted, c.ignition + Duration::days(9));
        assert_eq!(b.tracts.len(), 12);

        let of = generate_scenario(Template::OrderFirst, 7, &c).unwrap();
        let order_only = of
            .zones
            .iter()
            .find(|z| z.warning_issued.is_none())
            .unwrap();
        let earliest_warning = of
            .zones
            .iter()
            .filter_map(|z| z.warning_issued)
            .min()
            .unwrap();
        assert!(order_only.order_issued.unwrap() < earliest_warning);

        let ov = generate_scenario(Template::Overlapping, 7, &c).unwrap();
        let shared = at_km(0.0, 0.0);
        assert!(ov.zones.iter().all(|z| z.geometry.contains(shared)));
        assert_eq!(ov.place_home("x", shared).location.zone_id(), Some("Z1"));
    }

    #[test]
    fn mix_largest_remainder() {
        let mix: Mix = "self=0.33,shadow=0.23,warning=0.07,ordered=0.38"
            .parse()
            .unwrap();
        let counts: Vec<usize> = mix.counts(100).into_iter().map(|(_, k)| k).collect();
        // The weights sum to 1.01, so exactly 100 agents cannot give 33/23/7/38.
        assert_eq!(counts, vec![33, 23, 7, 37]);
        let even: Mix = "self=0.25,shadow=0.25,warning=0.25,ordered=0.25"
            .parse()
            .unwrap();
        assert_eq!(
            even.counts(10)
                .into_iter()
                .map(|(_, k)| k)
                .collect::<Vec<_>>(),
            vec![3, 3, 2, 2]
        );
        assert!(Mix::default().counts(0).iter().all(|(_, k)| *k == 0));
        assert!("self=0.5".parse::<Mix>().is_err());
        assert!("bogus=1".parse::<Mix>().is_err());
        assert_eq!(
            Mix::default()
                .counts(500)
                .iter()
                .map(|(_, k)| k)
                .sum::<usize>(),
            500
        );
    }

    #[test]
    fn exact_mix_sums() {
        let mix: Mix = "self=0.33,shadow=0.23,warning=0.07,ordered=0.37"
            .parse()
            .unwrap();
        assert_eq!(
            mix.counts(100)
                .into_iter()
                .map(|(_, k)| k)
                .collect::<Vec<_>>(),
            vec![33, 23, 7, 37]
        );
    }

    #[test]
    fn empty_dataset() {
        let (s, c) = basic();
        let d = generate_dataset(0, &Mix::default(), &s, &c, &SynthParams::default(), 1).unwrap();
        assert!(d.agents.is_empty());
    }

    #[test]
    fn scripts_honour_contracts() {
        let (s, c) = basic();
        let params = SynthParams {
            position_noise_m: 0.0,
            ..SynthParams::default()
        };
        for (i, label) in ResidentLabel::ALL.iter().cycle().take(70).enumerate() {
            let a = generate_agent(i, *label, &s, &c, &params, 99).unwrap();
            if *label == ResidentLabel::NonEvacueeInZone {
                assert!(a.spec.departure.is_none());
                let clean = generate_agent_trace(&a.spec, &s, &c).unwrap();
                assert!(clean
                    .iter()
                    .all(|p| haversine_km(p.point(), a.spec.true_home) <= s.home_buffer_d_km));
            }
            if label.is_evacuee() {
                assert!(a.spec.departure.is_some() && a.spec.destination.is_some());
            }
        }
    }

    #[test]
    fn infeasible_script_rejected() {
        let (s, c) = basic();
        let mut spec = plan_agent(
            "a".into(),
            ResidentLabel::OrderedEvacuee,
            &s,
            &c,
            &SynthParams::default(),
            3,
        )
        .unwrap();
        spec.destination = Some(spec.work);
        assert!(matches!(
            generate_agent_trace(&spec, &s, &c),
            Err(SynthError::Script { .. })
        ));
    }

    #[test]
    fn same_seed_same_bytes() {
        let (s, c) = basic();
        let render = |seed| {
            let d = generate_dataset(12, &Mix::default(), &s, &c, &SynthParams::default(), seed)
                .unwrap();
            let mut buf = Vec::new();
            for a in &d.agents {
                write_agent_pings(&mut buf, a).unwrap();
            }
            buf
        };
        assert_eq!(render(5), render(5));
        assert_ne!(render(5), render(6));
    }

    #[test]
    fn pre_fire_floors_hold_at_low_rate() {
        let (s, c) = basic();
        let params = SynthParams {
            ping_rate_per_hour: 0.2,
            position_noise_m: 0.0,
            ..SynthParams::default()
        };
        for i in 0..10 {
            generate_agent(i, ResidentLabel::NonEvacueeInZone, &s, &c, &params, 4).unwrap();
        }
    }

    #[test]
    fn truth_round_trip() {
        let (s, c) = basic();
        let d = generate_dataset(20, &Mix::default(), &s, &c, &SynthParams::default(), 8).unwrap();
        let mut buf = Vec::new();
        write_truth(&mut buf, &d.truth()).unwrap();
        assert_eq!(read_truth(buf.as_slice()).unwrap(), d.truth());
    }
}
