//! `key = value` configuration, the single source of pipeline thresholds.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected so typos
//! surface instead of silently falling back to defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveTime;
use chrono_tz::Tz;
use thiserror::Error;

use crate::geo::FIVE_MILES_KM;
use crate::time::{format_utc, parse_clock, parse_local, parse_tz, Timestamp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("config key `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("missing required config key `{0}`")]
    Missing(&'static str),
    #[error("reading config {path}: {message}")]
    Io { path: String, message: String },
}

/// How the left-home instant of an absence is anchored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepartureAnchor {
    /// Last in-buffer ping before the first ping beyond the buffer.
    #[default]
    LastInside,
    /// First ping beyond the buffer.
    FirstOutside,
}

impl DepartureAnchor {
    pub fn as_str(&self) -> &'static str {
        match self {
            DepartureAnchor::LastInside => "last_inside",
            DepartureAnchor::FirstOutside => "first_outside",
        }
    }
}

/// How response-curve bin boundaries are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CurveBinning {
    /// Boundaries at local midnights following ignition.
    #[default]
    LocalDays,
    /// Boundaries every 24 h from ignition.
    Ignition,
}

impl CurveBinning {
    pub fn as_str(&self) -> &'static str {
        match self {
            CurveBinning::LocalDays => "local_days",
            CurveBinning::Ignition => "ignition",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnNames {
    pub device_id: String,
    pub timestamp: String,
    pub lat: String,
    pub lon: String,
    pub accuracy: String,
}

impl Default for ColumnNames {
    fn default() -> Self {
        Self {
            device_id: "device_id".into(),
            timestamp: "timestamp".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            accuracy: "accuracy".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub ignition: Timestamp,
    pub tz: Tz,
    pub study_start: Timestamp,
    pub study_end: Timestamp,
    pub accuracy_max_m: f64,
    pub min_daily_signals: u32,
    pub cell_size_m: f64,
    pub night_start: NaiveTime,
    pub night_end: NaiveTime,
    pub home_buffer_d_km: f64,
    pub shadow_buffer_km: f64,
    pub outside_absence_days: f64,
    pub inside_absence_days: f64,
    pub departure_anchor: DepartureAnchor,
    pub categorized_only: bool,
    pub compliance_period_days: i64,
    pub curve_horizon_days: u32,
    pub curve_binning: CurveBinning,
    pub delimiter: u8,
    pub columns: ColumnNames,
    pub pings: Option<PathBuf>,
    pub zones: Option<PathBuf>,
    pub tracts: Option<PathBuf>,
    pub error_log: Option<PathBuf>,
}

impl Config {
    /// A configuration with every optional key at its default.
    pub fn with_defaults(
        ignition: Timestamp,
        tz: Tz,
        study_start: Timestamp,
        study_end: Timestamp,
    ) -> Self {
        Self {
            ignition,
            tz,
            study_start,
            study_end,
            accuracy_max_m: 250.0,
            min_daily_signals: 20,
            cell_size_m: 20.0,
            night_start: NaiveTime::from_hms_opt(22, 0, 0).unwrap(),
            night_end: NaiveTime::from_hms_opt(6, 0, 0).unwrap(),
            home_buffer_d_km: FIVE_MILES_KM,
            shadow_buffer_km: FIVE_MILES_KM,
            outside_absence_days: 2.0,
            inside_absence_days: 1.0,
            departure_anchor: DepartureAnchor::LastInside,
            categorized_only: false,
            compliance_period_days: 12,
            curve_horizon_days: 12,
            curve_binning: CurveBinning::LocalDays,
            delimiter: b',',
            columns: ColumnNames::default(),
            pings: None,
            zones: None,
            tracts: None,
            error_log: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `overrides` (`key=value` strings) on top.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: idx + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        for (i, ov) in overrides.iter().enumerate() {
            let (k, v) = ov.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("override must be `key=value`, got {ov:?}"),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::parse_with_overrides(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.pings,
            &mut cfg.zones,
            &mut cfg.tracts,
            &mut cfg.error_log,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ConfigError> {
        let last = |key: &str| {
            pairs
                .iter()
                .rev()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
        };
        let tz = parse_tz(last("tz").ok_or(ConfigError::Missing("tz"))?)
            .map_err(|e| value_err("tz", e))?;
        let instant = |key: &'static str| -> Result<Timestamp, ConfigError> {
            let v = last(key).ok_or(ConfigError::Missing(key))?;
            parse_local(v, tz).map_err(|e| value_err(key, e))
        };
        let mut cfg = Self::with_defaults(
            instant("ignition")?,
            tz,
            instant("study_start")?,
            instant("study_end")?,
        );

        for (key, value) in pairs {
            let v = value.as_str();
            match key.as_str() {
                "ignition" | "tz" | "study_start" | "study_end" => {}
                "accuracy_max_m" => cfg.accuracy_max_m = positive(key, v)?,
                "min_daily_signals" => {
                    cfg.min_daily_signals = v.parse().map_err(|e| value_err(key, e))?;
                    if cfg.min_daily_signals == 0 {
                        return Err(value_err(key, "must be at least 1"));
                    }
                }
                "cell_size_m" => cfg.cell_size_m = positive(key, v)?,
                "night_start" => cfg.night_start = parse_clock(v).map_err(|e| value_err(key, e))?,
                "night_end" => cfg.night_end = parse_clock(v).map_err(|e| value_err(key, e))?,
                "home_buffer_d_km" => cfg.home_buffer_d_km = nonnegative(key, v)?,
                "shadow_buffer_km" => cfg.shadow_buffer_km = nonnegative(key, v)?,
                "outside_absence_days" => cfg.outside_absence_days = nonnegative(key, v)?,
                "inside_absence_days" => cfg.inside_absence_days = nonnegative(key, v)?,
                "departure_anchor" => {
                    cfg.departure_anchor = match v {
                        "last_inside" => DepartureAnchor::LastInside,
                        "first_outside" => DepartureAnchor::FirstOutside,
                        _ => return Err(value_err(key, "expected last_inside or first_outside")),
                    }
                }
                "categorized_only" => {
                    cfg.categorized_only = v.parse().map_err(|e| value_err(key, e))?
                }
                "compliance_period_days" => {
                    cfg.compliance_period_days = v.parse().map_err(|e| value_err(key, e))?;
                    if cfg.compliance_period_days <= 0 {
                        return Err(value_err(key, "must be positive"));
                    }
                }
                "curve_horizon_days" => {
                    cfg.curve_horizon_days = v.parse().map_err(|e| value_err(key, e))?;
                    if cfg.curve_horizon_days == 0 {
                        return Err(value_err(key, "must be positive"));
                    }
                }
                "curve_binning" => {
                    cfg.curve_binning = match v {
                        "local_days" => CurveBinning::LocalDays,
                        "ignition" => CurveBinning::Ignition,
                        _ => return Err(value_err(key, "expected local_days or ignition")),
                    }
                }
                "delimiter" => {
                    let d = match v {
                        "\\t" | "tab" => "\t",
                        other => other,
                    };
                    if d.len() != 1 {
                        return Err(value_err(key, "must be a single byte"));
                    }
                    cfg.delimiter = d.as_bytes()[0];
                }
                "col_device_id" => cfg.columns.device_id = v.to_string(),
                "col_timestamp" => cfg.columns.timestamp = v.to_string(),
                "col_lat" => cfg.columns.lat = v.to_string(),
                "col_lon" => cfg.columns.lon = v.to_string(),
                "col_accuracy" => cfg.columns.accuracy = v.to_string(),
                "pings" => cfg.pings = Some(PathBuf::from(v)),
                "zones" => cfg.zones = Some(PathBuf::from(v)),
                "tracts" => cfg.tracts = Some(PathBuf::from(v)),
                "error_log" => cfg.error_log = Some(PathBuf::from(v)),
                _ => return Err(ConfigError::UnknownKey(key.clone())),
            }
        }
        if cfg.study_end < cfg.study_start {
            return Err(value_err("study_end", "precedes study_start"));
        }
        if cfg.ignition < cfg.study_start || cfg.ignition > cfg.study_end {
            return Err(value_err("ignition", "must lie within the study window"));
        }
        Ok(cfg)
    }

    /// Canonical text form with every key; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("ignition", format_utc(self.ignition));
        kv("tz", self.tz.name().to_string());
        kv("study_start", format_utc(self.study_start));
        kv("study_end", format_utc(self.study_end));
        kv("accuracy_max_m", self.accuracy_max_m.to_string());
        kv("min_daily_signals", self.min_daily_signals.to_string());
        kv("cell_size_m", self.cell_size_m.to_string());
        kv(
            "night_start",
            self.night_start.format("%H:%M:%S").to_string(),
        );
        kv("night_end", self.night_end.format("%H:%M:%S").to_string());
        kv("home_buffer_d_km", self.home_buffer_d_km.to_string());
        kv("shadow_buffer_km", self.shadow_buffer_km.to_string());
        kv(
            "outside_absence_days",
            self.outside_absence_days.to_string(),
        );
        kv("inside_absence_days", self.inside_absence_days.to_string());
        kv(
            "departure_anchor",
            self.departure_anchor.as_str().to_string(),
        );
        kv("categorized_only", self.categorized_only.to_string());
        kv(
            "compliance_period_days",
            self.compliance_period_days.to_string(),
        );
        kv("curve_horizon_days", self.curve_horizon_days.to_string());
        kv("curve_binning", self.curve_binning.as_str().to_string());
        kv(
            "delimiter",
            if self.delimiter == b'\t' {
                "tab".to_string()
            } else {
                (self.delimiter as char).to_string()
            },
        );
        kv("col_device_id", self.columns.device_id.clone());
        kv("col_timestamp", self.columns.timestamp.clone());
        kv("col_lat", self.columns.lat.clone());
        kv("col_lon", self.columns.lon.clone());
        kv("col_accuracy", self.columns.accuracy.clone());
        for (k, p) in [
            ("pings", &self.pings),
            ("zones", &self.zones),
            ("tracts", &self.tracts),
            ("error_log", &self.error_log),
        ] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        s
    }
}

fn value_err(key: &str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        message: e.to_string(),
    }
}

fn positive(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = v.parse().map_err(|e| value_err(key, e))?;
    if !(x.is_finite() && x > 0.0) {
        return Err(value_err(key, "must be positive"));
    }
    Ok(x)
}

fn nonnegative(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = v.parse().map_err(|e| value_err(key, e))?;
    if !(x.is_finite() && x >= 0.0) {
        return Err(value_err(key, "must be nonnegative"));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "\
# Kincade-like window
ignition = 2019-10-23T21:27:00
tz = America/Los_Angeles
study_start = 2019-10-16
study_end = 2019-11-13
";

    #[test]
    fn defaults_match_reported_parameters() {
        let cfg = Config::parse(BASE).unwrap();
        assert_eq!(cfg.accuracy_max_m, 250.0);
        assert_eq!(cfg.min_daily_signals, 20);
        assert_eq!(cfg.cell_size_m, 20.0);
        assert_eq!(cfg.night_start, NaiveTime::from_hms_opt(22, 0, 0).unwrap());
        assert_eq!(cfg.night_end, NaiveTime::from_hms_opt(6, 0, 0).unwrap());
        assert_eq!(cfg.outside_absence_days, 2.0);
        assert!((cfg.home_buffer_d_km - 8.0467).abs() < 1e-4);
        assert_eq!(format_utc(cfg.ignition), "2019-10-24T04:27:00Z");
    }

    #[test]
    fn overrides_and_round_trip() {
        let cfg = Config::parse_with_overrides(
            BASE,
            &["min_daily_signals=10".into(), "delimiter=tab".into()],
        )
        .unwrap();
        assert_eq!(cfg.min_daily_signals, 10);
        assert_eq!(cfg.delimiter, b'\t');
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            Config::parse("tz = UTC\n"),
            Err(ConfigError::Missing("ignition"))
        ));
        let bad = format!("{BASE}colour = blue\n");
        assert!(matches!(Config::parse(&bad), Err(ConfigError::UnknownKey(k)) if k == "colour"));
        let bad = format!("{BASE}cell_size_m = -3\n");
        assert!(matches!(
            Config::parse(&bad),
            Err(ConfigError::Value { .. })
        ));
        let bad = format!("{BASE}just words\n");
        assert!(matches!(
            Config::parse(&bad),
            Err(ConfigError::Syntax { line: 6, .. })
        ));
    }
}
