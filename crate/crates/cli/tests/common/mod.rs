#![allow(dead_code)]

use chrono::Duration;

use evactrace_cli::{classify, compare_truth, infer_homes, split, TruthAgreement};
use evactrace_core::classifier::{classify_resident, ClassificationResult, ClassifierParams};
use evactrace_core::config::Config;
use evactrace_core::geo::{unproject, CellIndex, GeoPoint, Planar, ZoneGeometry};
use evactrace_core::home::HomeLocation;
use evactrace_core::ingest::{
    split_pre_post_fire, Cleaner, CleaningParams, DeviceTrace, Ping, TraceSet,
};
use evactrace_core::scenario::{EvacZone, Scenario, Tract};
use evactrace_core::synth::{
    generate_dataset, generate_scenario, synth_config, Mix, SynthParams, Template,
};
use evactrace_core::time::{parse_local, TimeWindow, Timestamp};

/// Ignition at local midnight so "Day k" is a whole number of days.
pub fn day_config() -> Config {
    let tz = "America/Los_Angeles".parse().unwrap();
    Config::with_defaults(
        parse_local("2019-10-23T00:00:00", tz).unwrap(),
        tz,
        parse_local("2019-10-16", tz).unwrap(),
        parse_local("2019-11-13", tz).unwrap(),
    )
}

pub fn day(k: f64) -> Timestamp {
    day_config().ignition + Duration::seconds((k * 86_400.0).round() as i64)
}

pub const CENTER: GeoPoint = GeoPoint::new(38.6, -122.8);

pub fn at_km(east: f64, north: f64) -> GeoPoint {
    unproject(Planar::new(east * 1000.0, north * 1000.0), CENTER)
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> ZoneGeometry {
    let sw = at_km(x0, y0);
    let ne = at_km(x1, y1);
    ZoneGeometry::rectangle(sw.lat, sw.lon, ne.lat, ne.lon).unwrap()
}

/// One 20 km square zone around CENTER lifted on Day 9, inside one tract.
pub fn day_scenario(warning: Option<f64>, order: Option<f64>) -> Scenario {
    let zone = EvacZone {
        zone_id: "Z".into(),
        geometry: rect(-10.0, -10.0, 10.0, 10.0),
        warning_issued: warning.map(day),
        order_issued: order.map(day),
        lifted: day(9.0),
    };
    let tract = Tract {
        tract_id: "T".into(),
        geometry: rect(-30.0, -30.0, 30.0, 30.0),
        population: 10,
    };
    Scenario::new(vec![zone], vec![tract], &day_config()).unwrap()
}

/// Home in the zone's middle, home 13 km east (outside, within the buffer),
/// and a destination far from both.
pub const SQUARE: (f64, f64) = (0.0, 0.0);
pub const TRIANGLE: (f64, f64) = (13.0, 0.0);
pub const AWAY: (f64, f64) = (60.0, 40.0);

/// Hourly pings from Day -7 to `end`: at `home`, except at `dest` strictly
/// between `leave` and `back`.
pub fn trip(home: GeoPoint, dest: GeoPoint, leave: f64, back: Option<f64>, end: f64) -> Vec<Ping> {
    let mut v = Vec::new();
    let mut t = day(-7.0);
    while t <= day(end) {
        let d = (t - day(0.0)).num_seconds() as f64 / 86_400.0;
        let p = if d > leave && back.is_none_or(|b| d < b) {
            dest
        } else {
            home
        };
        v.push(Ping::new(t, p.lat, p.lon, None));
        t += Duration::hours(1);
    }
    v
}

pub fn classify_one(home: GeoPoint, pings: Vec<Ping>, s: &Scenario) -> ClassificationResult {
    let (pre, post) = split_pre_post_fire(
        TraceSet::new(vec![DeviceTrace::new("r", pings)]),
        s.ignition,
    );
    let h = HomeLocation {
        point: home,
        cell: CellIndex::new(0, 0),
        night_ping_count: 1,
    };
    let pre = pre.get("r").map(|t| t.pings.clone()).unwrap_or_default();
    let post = post.get("r").map(|t| t.pings.clone()).unwrap_or_default();
    classify_resident(
        &h,
        &s.place_home("r", home),
        &pre,
        &post,
        s,
        &ClassifierParams::from_config(&day_config()),
    )
    .expect("in scope")
}

/// Generates a synthetic population and runs cleaning, home inference and
/// classification in memory, scored against the truth table.
pub fn oracle_run(template: Template, n: usize, noise_m: f64, seed: u64) -> TruthAgreement {
    let c = synth_config();
    let s = generate_scenario(template, seed, &c).unwrap();
    let params = SynthParams {
        position_noise_m: noise_m,
        ..SynthParams::default()
    };
    let data = generate_dataset(n, &Mix::default(), &s, &c, &params, seed).unwrap();
    let mut cleaner = Cleaner::new(CleaningParams {
        accuracy_max_m: c.accuracy_max_m,
        study_window: TimeWindow::new(c.study_start, c.study_end),
    });
    for a in &data.agents {
        for p in &a.pings {
            cleaner.push(&a.spec.agent_id, *p);
        }
    }
    let (traces, _) = cleaner.finish();
    let sp = split(traces, &c);
    let homes = infer_homes(&sp.pre, &c).unwrap();
    let run = classify(&homes.homes, &sp, &s, &c);
    compare_truth(
        &data.truth(),
        &homes.homes,
        homes.grid.as_ref(),
        &run.results,
    )
}
