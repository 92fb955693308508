//! Fire context: ignition, evacuation zones with alert timelines, census
//! tracts, and where each home sits relative to the zones.

use std::io::{self, Read, Write};

use chrono_tz::Tz;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::Config;
use crate::geo::{GeoError, GeoPoint, Polygon, Ring, ZoneGeometry};
use crate::time::{format_utc, parse_utc, Timestamp};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {what}: {source}")]
    Io {
        what: &'static str,
        source: io::Error,
    },
    #[error("{what} is not valid JSON: {message}")]
    Json { what: &'static str, message: String },
    #[error("invalid scenario:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("home {0} is not near a zone")]
    NotNearZone(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvacZone {
    pub zone_id: String,
    pub geometry: ZoneGeometry,
    pub warning_issued: Option<Timestamp>,
    pub order_issued: Option<Timestamp>,
    pub lifted: Timestamp,
}

impl EvacZone {
    /// Earliest of the warning and the order.
    pub fn first_alert(&self) -> Timestamp {
        match (self.warning_issued, self.order_issued) {
            (Some(w), Some(o)) => w.min(o),
            (Some(t), None) | (None, Some(t)) => t,
            (None, None) => unreachable!("zone {} has neither warning nor order", self.zone_id),
        }
    }

    fn violations(&self, ignition: Timestamp) -> Vec<String> {
        let mut v = Vec::new();
        let id = &self.zone_id;
        match (self.warning_issued, self.order_issued) {
            (None, None) => v.push(format!("zone {id}: needs a warning or an order")),
            (Some(w), Some(o)) if o < w => {
                v.push(format!("zone {id}: order issued before warning"))
            }
            _ => {}
        }
        for (name, t) in [
            ("warning", self.warning_issued),
            ("order", self.order_issued),
        ] {
            if let Some(t) = t {
                if t >= self.lifted {
                    v.push(format!("zone {id}: {name} not before lift"));
                }
                if t < ignition {
                    v.push(format!("zone {id}: {name} precedes ignition"));
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tract {
    pub tract_id: String,
    pub geometry: ZoneGeometry,
    pub population: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Location {
    InZone { zone_id: String },
    NearZone { zone_id: String, distance_km: f64 },
    OutOfScope,
}

impl Location {
    pub fn zone_id(&self) -> Option<&str> {
        match self {
            Location::InZone { zone_id } | Location::NearZone { zone_id, .. } => Some(zone_id),
            Location::OutOfScope => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Location::InZone { .. } => "in_zone",
            Location::NearZone { .. } => "near_zone",
            Location::OutOfScope => "out_of_scope",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomePlacement {
    pub device_id: String,
    pub location: Location,
    pub tract_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub ignition: Timestamp,
    pub tz: Tz,
    pub zones: Vec<EvacZone>,
    pub tracts: Vec<Tract>,
    pub shadow_buffer_km: f64,
    pub home_buffer_d_km: f64,
    pub outside_absence_days: f64,
    pub inside_absence_days: f64,
}

impl Scenario {
    /// Validates every invariant and reports all violations together.
    pub fn new(
        zones: Vec<EvacZone>,
        tracts: Vec<Tract>,
        config: &Config,
    ) -> Result<Self, ScenarioError> {
        let mut v = Vec::new();
        if zones.is_empty() {
            v.push("scenario has no evacuation zones".to_string());
        }
        for (i, z) in zones.iter().enumerate() {
            if zones[..i].iter().any(|o| o.zone_id == z.zone_id) {
                v.push(format!("zone {}: duplicate zone_id", z.zone_id));
            }
            v.extend(z.violations(config.ignition));
        }
        for (i, t) in tracts.iter().enumerate() {
            if tracts[..i].iter().any(|o| o.tract_id == t.tract_id) {
                v.push(format!("tract {}: duplicate tract_id", t.tract_id));
            }
        }
        if !v.is_empty() {
            return Err(ScenarioError::Invalid(v));
        }
        Ok(Self {
            ignition: config.ignition,
            tz: config.tz,
            zones,
            tracts,
            shadow_buffer_km: config.shadow_buffer_km,
            home_buffer_d_km: config.home_buffer_d_km,
            outside_absence_days: config.outside_absence_days,
            inside_absence_days: config.inside_absence_days,
        })
    }

    pub fn zone(&self, zone_id: &str) -> Option<&EvacZone> {
        self.zones.iter().find(|z| z.zone_id == zone_id)
    }

    pub fn in_any_zone(&self, p: GeoPoint) -> bool {
        self.zones.iter().any(|z| z.geometry.contains(p))
    }

    pub fn tract_of(&self, p: GeoPoint) -> Option<&Tract> {
        self.tracts.iter().find(|t| t.geometry.contains(p))
    }

    /// Zone with the smallest boundary distance; ties go to the earlier
    /// lift, then to declaration order.
    fn nearest_zone(&self, p: GeoPoint) -> Option<(&EvacZone, f64)> {
        let mut best: Option<(&EvacZone, f64)> = None;
        for z in &self.zones {
            let d = z.geometry.boundary_distance_km(p);
            best = match best {
                Some((bz, bd)) if bd < d || (bd == d && bz.lifted <= z.lifted) => Some((bz, bd)),
                _ => Some((z, d)),
            };
        }
        best
    }

    pub fn place_home(&self, device_id: &str, home: GeoPoint) -> HomePlacement {
        let location = if let Some(z) = self.zones.iter().find(|z| z.geometry.contains(home)) {
            Location::InZone {
                zone_id: z.zone_id.clone(),
            }
        } else {
            match self.nearest_zone(home) {
                Some((z, d)) if d <= self.shadow_buffer_km => Location::NearZone {
                    zone_id: z.zone_id.clone(),
                    distance_km: d,
                },
                _ => Location::OutOfScope,
            }
        };
        HomePlacement {
            device_id: device_id.to_string(),
            location,
            tract_id: self.tract_of(home).map(|t| t.tract_id.clone()),
        }
    }

    /// Earliest warning or order across all zones.
    pub fn first_county_alert(&self) -> Timestamp {
        self.zones
            .iter()
            .map(EvacZone::first_alert)
            .min()
            .expect("scenario has at least one zone")
    }

    /// Lift time of the zone nearest to a home outside every zone but
    /// within the shadow buffer.
    pub fn nearest_zone_lift(
        &self,
        device_id: &str,
        home: GeoPoint,
    ) -> Result<Timestamp, ScenarioError> {
        if self.in_any_zone(home) {
            return Err(ScenarioError::NotNearZone(device_id.to_string()));
        }
        match self.nearest_zone(home) {
            Some((z, d)) if d <= self.shadow_buffer_km => Ok(z.lifted),
            _ => Err(ScenarioError::NotNearZone(device_id.to_string())),
        }
    }

    pub fn total_population(&self) -> u64 {
        self.tracts.iter().map(|t| t.population).sum()
    }
}

fn read_json<R: Read>(mut r: R, what: &'static str) -> Result<Value, ScenarioError> {
    let mut text = String::new();
    r.read_to_string(&mut text)
        .map_err(|source| ScenarioError::Io { what, source })?;
    serde_json::from_str(&text).map_err(|e| ScenarioError::Json {
        what,
        message: e.to_string(),
    })
}

fn features<'a>(doc: &'a Value, what: &str, v: &mut Vec<String>) -> &'a [Value] {
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        v.push(format!("{what}: top level is not a FeatureCollection"));
    }
    match doc.get("features").and_then(Value::as_array) {
        Some(f) => f,
        None => {
            v.push(format!("{what}: missing `features` array"));
            &[]
        }
    }
}

fn parse_position(v: &Value) -> Result<GeoPoint, String> {
    let arr = v
        .as_array()
        .filter(|a| a.len() >= 2)
        .ok_or("position is not [lon, lat]")?;
    let lon = arr[0].as_f64().ok_or("non-numeric longitude")?;
    let lat = arr[1].as_f64().ok_or("non-numeric latitude")?;
    Ok(GeoPoint::new(lat, lon))
}

fn parse_ring(v: &Value) -> Result<Ring, String> {
    let pts = v.as_array().ok_or("ring is not an array")?;
    let pts = pts
        .iter()
        .map(parse_position)
        .collect::<Result<Vec<_>, _>>()?;
    Ring::new(pts).map_err(|e| e.to_string())
}

fn parse_polygon(v: &Value) -> Result<Polygon, String> {
    let rings = v
        .as_array()
        .filter(|r| !r.is_empty())
        .ok_or("polygon has no rings")?;
    let exterior = parse_ring(&rings[0])?;
    let holes = rings[1..]
        .iter()
        .map(parse_ring)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Polygon::new(exterior, holes))
}

fn parse_geometry(v: Option<&Value>) -> Result<ZoneGeometry, String> {
    let g = v.filter(|g| !g.is_null()).ok_or("missing geometry")?;
    let coords = g.get("coordinates").ok_or("geometry has no coordinates")?;
    let polygons = match g.get("type").and_then(Value::as_str) {
        Some("Polygon") => vec![parse_polygon(coords)?],
        Some("MultiPolygon") => coords
            .as_array()
            .ok_or("MultiPolygon coordinates are not an array")?
            .iter()
            .map(parse_polygon)
            .collect::<Result<Vec<_>, _>>()?,
        other => return Err(format!("unsupported geometry type {other:?}")),
    };
    ZoneGeometry::new(polygons).map_err(|e: GeoError| e.to_string())
}

fn feature_label(f: &Value, key: &str, index: usize) -> String {
    match f
        .get("properties")
        .and_then(|p| p.get(key))
        .and_then(Value::as_str)
    {
        Some(id) => id.to_string(),
        None => match f.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => format!("#{index}"),
        },
    }
}

fn prop<'a>(f: &'a Value, key: &str) -> Option<&'a Value> {
    f.get("properties")
        .and_then(|p| p.get(key))
        .filter(|v| !v.is_null())
}

fn opt_instant(f: &Value, key: &str) -> Result<Option<Timestamp>, String> {
    match prop(f, key) {
        None => Ok(None),
        Some(Value::String(s)) => parse_utc(s).map(Some).map_err(|e| format!("{key}: {e}")),
        Some(_) => Err(format!("{key}: not a string")),
    }
}

fn parse_zones(doc: &Value, v: &mut Vec<String>) -> Vec<EvacZone> {
    let mut zones = Vec::new();
    for (i, f) in features(doc, "zones", v).iter().enumerate() {
        let label = feature_label(f, "zone_id", i);
        let mut errs = Vec::new();
        let zone_id = prop(f, "zone_id")
            .and_then(Value::as_str)
            .map(str::to_string);
        if zone_id.is_none() {
            errs.push("missing required property zone_id".to_string());
        }
        let geometry = parse_geometry(f.get("geometry"))
            .map_err(|e| errs.push(e))
            .ok();
        let warning = opt_instant(f, "warning_issued")
            .map_err(|e| errs.push(e))
            .ok()
            .flatten();
        let order = opt_instant(f, "order_issued")
            .map_err(|e| errs.push(e))
            .ok()
            .flatten();
        let lifted = match opt_instant(f, "lifted") {
            Ok(Some(t)) => Some(t),
            Ok(None) => {
                errs.push("missing required property lifted".into());
                None
            }
            Err(e) => {
                errs.push(e);
                None
            }
        };
        if errs.is_empty() {
            zones.push(EvacZone {
                zone_id: zone_id.unwrap(),
                geometry: geometry.unwrap(),
                warning_issued: warning,
                order_issued: order,
                lifted: lifted.unwrap(),
            });
        } else {
            v.extend(errs.into_iter().map(|e| format!("zone {label}: {e}")));
        }
    }
    zones
}

fn parse_tracts(doc: &Value, v: &mut Vec<String>) -> Vec<Tract> {
    let mut tracts = Vec::new();
    for (i, f) in features(doc, "tracts", v).iter().enumerate() {
        let label = feature_label(f, "tract_id", i);
        let mut errs = Vec::new();
        let tract_id = match prop(f, "tract_id") {
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            _ => {
                errs.push("missing required property tract_id".to_string());
                None
            }
        };
        let population = match prop(f, "population") {
            Some(p) => p
                .as_u64()
                .or_else(|| p.as_str().and_then(|s| s.parse().ok())),
            None => None,
        };
        if population.is_none() {
            errs.push("population must be a non-negative integer".into());
        }
        let geometry = parse_geometry(f.get("geometry"))
            .map_err(|e| errs.push(e))
            .ok();
        if errs.is_empty() {
            tracts.push(Tract {
                tract_id: tract_id.unwrap(),
                geometry: geometry.unwrap(),
                population: population.unwrap(),
            });
        } else {
            v.extend(errs.into_iter().map(|e| format!("tract {label}: {e}")));
        }
    }
    tracts
}

pub fn load_scenario<Z: Read, T: Read>(
    zones: Z,
    tracts: T,
    config: &Config,
) -> Result<Scenario, ScenarioError> {
    let zdoc = read_json(zones, "zones")?;
    let tdoc = read_json(tracts, "tracts")?;
    let mut v = Vec::new();
    let zones = parse_zones(&zdoc, &mut v);
    let tracts = parse_tracts(&tdoc, &mut v);
    match Scenario::new(zones, tracts, config) {
        Ok(s) if v.is_empty() => Ok(s),
        Ok(_) => Err(ScenarioError::Invalid(v)),
        Err(ScenarioError::Invalid(more)) => {
            v.extend(more);
            Err(ScenarioError::Invalid(v))
        }
        Err(e) => Err(e),
    }
}

fn ring_json(r: &Ring) -> Value {
    Value::Array(r.vertices().iter().map(|p| json!([p.lon, p.lat])).collect())
}

pub fn geometry_json(g: &ZoneGeometry) -> Value {
    let polys: Vec<Value> = g
        .polygons()
        .iter()
        .map(|p| {
            Value::Array(
                std::iter::once(&p.exterior)
                    .chain(&p.holes)
                    .map(ring_json)
                    .collect(),
            )
        })
        .collect();
    if polys.len() == 1 {
        json!({"type": "Polygon", "coordinates": polys[0]})
    } else {
        json!({"type": "MultiPolygon", "coordinates": polys})
    }
}

pub fn feature_collection(features: Vec<Value>) -> Value {
    json!({"type": "FeatureCollection", "features": features})
}

pub fn write_zones<W: Write>(mut w: W, zones: &[EvacZone]) -> io::Result<()> {
    let opt = |t: Option<Timestamp>| {
        t.map(|t| Value::String(format_utc(t)))
            .unwrap_or(Value::Null)
    };
    let features = zones
        .iter()
        .map(|z| {
            json!({
                "type": "Feature",
                "properties": {
                    "zone_id": z.zone_id,
                    "warning_issued": opt(z.warning_issued),
                    "order_issued": opt(z.order_issued),
                    "lifted": format_utc(z.lifted),
                },
                "geometry": geometry_json(&z.geometry),
            })
        })
        .collect();
    serde_json::to_writer_pretty(&mut w, &feature_collection(features))?;
    writeln!(w)
}

pub fn write_tracts<W: Write>(mut w: W, tracts: &[Tract]) -> io::Result<()> {
    let features = tracts
        .iter()
        .map(|t| {
            json!({
                "type": "Feature",
                "properties": {"tract_id": t.tract_id, "population": t.population},
                "geometry": geometry_json(&t.geometry),
            })
        })
        .collect();
    serde_json::to_writer_pretty(&mut w, &feature_collection(features))?;
    writeln!(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{unproject, Planar};
    use crate::time::parse_local;
    use chrono::Duration;

    fn la() -> Tz {
        "America/Los_Angeles".parse().unwrap()
    }

    fn config() -> Config {
        let tz = la();
        Config::with_defaults(
            parse_local("2019-10-23T21:27:00", tz).unwrap(),
            tz,
            parse_local("2019-10-16", tz).unwrap(),
            parse_local("2019-11-13", tz).unwrap(),
        )
    }

    fn day(k: i64) -> Timestamp {
        config().ignition + Duration::days(k)
    }

    #[allow(clippy::too_many_arguments)]
    fn zone(
        id: &str,
        s: f64,
        w: f64,
        n: f64,
        e: f64,
        warn: Option<i64>,
        order: Option<i64>,
        lift: i64,
    ) -> EvacZone {
        EvacZone {
            zone_id: id.into(),
            geometry: ZoneGeometry::rectangle(s, w, n, e).unwrap(),
            warning_issued: warn.map(day),
            order_issued: order.map(day),
            lifted: day(lift),
        }
    }

    fn tract(id: &str, s: f64, w: f64, n: f64, e: f64, pop: u64) -> Tract {
        Tract {
            tract_id: id.into(),
            geometry: ZoneGeometry::rectangle(s, w, n, e).unwrap(),
            population: pop,
        }
    }

    /// Zone Z1 spans lon [-122.9, -122.7] and lat [38.5, 38.7].
    fn basic() -> Scenario {
        Scenario::new(
            vec![zone("Z1", 38.5, -122.9, 38.7, -122.7, Some(3), Some(5), 9)],
            vec![tract("T1", 38.4, -123.0, 38.8, -122.6, 1000)],
            &config(),
        )
        .unwrap()
    }

    const EAST_EDGE: GeoPoint = GeoPoint::new(38.6, -122.7);

    fn east_of_edge(km: f64) -> GeoPoint {
        unproject(Planar::new(km * 1000.0, 0.0), EAST_EDGE)
    }

    #[test]
    fn placement_classes() {
        let s = basic();
        let p = s.place_home("a", GeoPoint::new(38.6, -122.8));
        assert_eq!(
            p.location,
            Location::InZone {
                zone_id: "Z1".into()
            }
        );
        assert_eq!(p.tract_id.as_deref(), Some("T1"));
        match s.place_home("b", east_of_edge(3.0)).location {
            Location::NearZone {
                zone_id,
                distance_km,
            } => {
                assert_eq!(zone_id, "Z1");
                assert!((distance_km - 3.0).abs() < 1e-3, "{distance_km}");
            }
            other => panic!("{other:?}"),
        }
        let far = s.place_home("c", east_of_edge(20.0));
        assert_eq!(far.location, Location::OutOfScope);
        assert_eq!(far.tract_id, None);
    }

    #[test]
    fn buffer_edge_is_inclusive() {
        let s = basic();
        assert!(matches!(
            s.place_home("a", east_of_edge(8.04)).location,
            Location::NearZone { .. }
        ));
        assert_eq!(
            s.place_home("b", east_of_edge(8.06)).location,
            Location::OutOfScope
        );
    }

    #[test]
    fn overlap_resolved_by_declaration_order() {
        let cfg = config();
        let a = zone("A", 38.5, -122.9, 38.7, -122.7, Some(3), None, 9);
        let b = zone("B", 38.55, -122.85, 38.75, -122.65, Some(4), None, 9);
        let s = Scenario::new(vec![a.clone(), b.clone()], vec![], &cfg).unwrap();
        let both = GeoPoint::new(38.6, -122.8);
        assert_eq!(s.place_home("x", both).location.zone_id(), Some("A"));
        let s = Scenario::new(vec![b, a], vec![], &cfg).unwrap();
        assert_eq!(s.place_home("x", both).location.zone_id(), Some("B"));
    }

    #[test]
    fn placement_invariant_under_permutation_without_overlap() {
        let cfg = config();
        let zs = vec![
            zone("A", 38.5, -122.9, 38.6, -122.8, Some(3), None, 9),
            zone("B", 38.5, -122.7, 38.6, -122.6, Some(4), None, 10),
            zone("C", 38.7, -122.9, 38.8, -122.8, Some(4), None, 11),
        ];
        let mut rev = zs.clone();
        rev.reverse();
        let s1 = Scenario::new(zs, vec![], &cfg).unwrap();
        let s2 = Scenario::new(rev, vec![], &cfg).unwrap();
        for k in 0..50 {
            let p = GeoPoint::new(38.45 + 0.008 * k as f64, -122.95 + 0.0071 * k as f64);
            assert_eq!(s1.place_home("x", p), s2.place_home("x", p));
        }
    }

    #[test]
    fn first_county_alert_counts_orders() {
        let cfg = config();
        let s = Scenario::new(
            vec![
                zone("A", 38.5, -122.9, 38.6, -122.8, Some(3), Some(5), 9),
                zone("B", 38.7, -122.9, 38.8, -122.8, Some(4), None, 9),
            ],
            vec![],
            &cfg,
        )
        .unwrap();
        assert_eq!(s.first_county_alert(), day(3));
        let s = Scenario::new(
            vec![
                zone("A", 38.5, -122.9, 38.6, -122.8, Some(3), None, 9),
                zone("B", 38.7, -122.9, 38.8, -122.8, None, Some(2), 9),
            ],
            vec![],
            &cfg,
        )
        .unwrap();
        assert_eq!(s.first_county_alert(), day(2));
        assert_eq!(basic().first_county_alert(), day(3));
        for z in &s.zones {
            assert!(s.first_county_alert() <= z.first_alert());
        }
    }

    #[test]
    fn nearest_lift() {
        let cfg = config();
        let s = basic();
        assert_eq!(s.nearest_zone_lift("x", east_of_edge(2.0)).unwrap(), day(9));
        assert!(matches!(
            s.nearest_zone_lift("x", GeoPoint::new(38.6, -122.8)),
            Err(ScenarioError::NotNearZone(_))
        ));
        assert!(s.nearest_zone_lift("x", east_of_edge(30.0)).is_err());

        // Home between two zones: 2 km to A's east edge, about 5 km to B's west edge.
        let home = east_of_edge(2.0);
        let b_west = unproject(Planar::new(7000.0, 0.0), EAST_EDGE).lon;
        let a = zone("A", 38.5, -122.9, 38.7, -122.7, Some(3), None, 9);
        let b = zone("B", 38.5, b_west, 38.7, b_west + 0.1, Some(3), None, 11);
        let s = Scenario::new(vec![b, a], vec![], &cfg).unwrap();
        assert_eq!(s.nearest_zone_lift("x", home).unwrap(), day(9));

        // Equidistant zones (identical geometry): the earlier lift wins in either order.
        let a = zone("A", 38.5, -122.9, 38.7, -122.7, Some(3), None, 11);
        let mut b = a.clone();
        b.zone_id = "B".into();
        b.lifted = day(8);
        let s1 = Scenario::new(vec![a.clone(), b.clone()], vec![], &cfg).unwrap();
        let s2 = Scenario::new(vec![b, a], vec![], &cfg).unwrap();
        assert_eq!(s1.nearest_zone_lift("x", home).unwrap(), day(8));
        assert_eq!(s2.nearest_zone_lift("x", home).unwrap(), day(8));
    }

    const ZONES: &str = r#"{
      "type": "FeatureCollection",
      "features": [
        {"type": "Feature", "properties": {"zone_id": "Z1", "warning_issued": "2019-10-26T04:27:00Z", "order_issued": "2019-10-28T04:27:00Z", "lifted": "2019-11-01T04:27:00Z"},
         "geometry": {"type": "Polygon", "coordinates": [[[-122.9, 38.5], [-122.7, 38.5], [-122.7, 38.7], [-122.9, 38.7], [-122.9, 38.5]]]}},
        {"type": "Feature", "properties": {"zone_id": "Z2", "warning_issued": null, "order_issued": "2019-10-24T10:00:00Z", "lifted": "2019-11-02T00:00:00Z"},
         "geometry": {"type": "MultiPolygon", "coordinates": [[[[-122.6, 38.5], [-122.5, 38.5], [-122.5, 38.6], [-122.6, 38.6], [-122.6, 38.5]]]]}}
      ]
    }"#;

    fn tracts_json(n: usize) -> String {
        let feats: Vec<String> = (0..n)
            .map(|i| {
                let w = -123.0 + 0.1 * i as f64;
                format!(
                    r#"{{"type":"Feature","properties":{{"tract_id":"T{i}","population":{}}},"geometry":{{"type":"Polygon","coordinates":[[[{w},38.4],[{},38.4],[{},38.8],[{w},38.8],[{w},38.4]]]}}}}"#,
                    100 * (i + 1),
                    w + 0.1,
                    w + 0.1
                )
            })
            .collect();
        format!(
            r#"{{"type":"FeatureCollection","features":[{}]}}"#,
            feats.join(",")
        )
    }

    #[test]
    fn loads_two_zones_five_tracts() {
        let s = load_scenario(ZONES.as_bytes(), tracts_json(5).as_bytes(), &config()).unwrap();
        assert_eq!(s.zones.len(), 2);
        assert_eq!(s.tracts.len(), 5);
        assert_eq!(s.zones[1].warning_issued, None);
        assert!(s.zones[1].order_issued.is_some());
        assert_eq!(s.total_population(), 1500);
    }

    #[test]
    fn order_before_warning_is_named() {
        let bad = ZONES.replace("2019-10-28T04:27:00Z", "2019-10-25T04:27:00Z");
        let err = load_scenario(bad.as_bytes(), tracts_json(1).as_bytes(), &config()).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("zone Z1: order issued before warning"),
            "{msg}"
        );
    }

    #[test]
    fn all_violations_reported() {
        let bad = ZONES
            .replace(r#""lifted": "2019-11-02T00:00:00Z""#, r#""lifted": null"#)
            .replace(
                r#""zone_id": "Z1", "warning_issued": "2019-10-26T04:27:00Z""#,
                r#""zone_id": "Z1", "warning_issued": "2019-10-20T00:00:00Z""#,
            );
        let tr = tracts_json(2).replace(r#""population":200"#, r#""population":-4"#);
        match load_scenario(bad.as_bytes(), tr.as_bytes(), &config()).unwrap_err() {
            ScenarioError::Invalid(v) => {
                assert!(
                    v.iter()
                        .any(|m| m.starts_with("zone Z2: missing required property lifted")),
                    "{v:?}"
                );
                assert!(
                    v.iter()
                        .any(|m| m.starts_with("zone Z1: warning precedes ignition")),
                    "{v:?}"
                );
                assert!(
                    v.iter().any(|m| m.starts_with("tract T1: population")),
                    "{v:?}"
                );
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_geometry_rejected() {
        let bow = ZONES.replace(
            "[[[-122.9, 38.5], [-122.7, 38.5], [-122.7, 38.7], [-122.9, 38.7], [-122.9, 38.5]]]",
            "[[[-122.9, 38.5], [-122.7, 38.7], [-122.7, 38.5], [-122.9, 38.7], [-122.9, 38.5]]]",
        );
        let msg = load_scenario(bow.as_bytes(), tracts_json(1).as_bytes(), &config())
            .unwrap_err()
            .to_string();
        assert!(
            msg.contains("zone Z1") && msg.contains("self-intersects"),
            "{msg}"
        );
    }

    #[test]
    fn geojson_round_trip() {
        let s = load_scenario(ZONES.as_bytes(), tracts_json(3).as_bytes(), &config()).unwrap();
        let mut z = Vec::new();
        let mut t = Vec::new();
        write_zones(&mut z, &s.zones).unwrap();
        write_tracts(&mut t, &s.tracts).unwrap();
        let back = load_scenario(z.as_slice(), t.as_slice(), &config()).unwrap();
        assert_eq!(back, s);
    }
}
