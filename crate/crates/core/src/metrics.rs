//! Aggregates over classification results: compliance rates, cumulative
//! response curves, group proportions and the sampling-bias regression.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};

use chrono::Duration;
use chrono_tz::Tz;
use serde_json::{json, Value};
use thiserror::Error;

use crate::classifier::{ClassificationResult, ResidentLabel};
use crate::config::CurveBinning;
use crate::geo::GeoPoint;
use crate::scenario::{feature_collection, geometry_json, Location, Scenario};
use crate::time::{format_utc, local_date, local_midnight, Period, Timestamp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no residents in the selected universe")]
    EmptyUniverse,
    #[error("regression needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("regressor is constant; slope is undefined")]
    ConstantRegressor,
}

/// Which residents make up the denominator of a compliance rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Denominator {
    #[default]
    AllClassified,
    CategorizedOnly,
}

impl Denominator {
    fn admits(&self, label: ResidentLabel) -> bool {
        match self {
            Denominator::AllClassified => true,
            Denominator::CategorizedOnly => label != ResidentLabel::Uncategorized,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Area {
    Tract(String),
    Zone(String),
    /// Every resident whose home lies in some zone.
    AnyZone,
}

impl Area {
    pub fn id(&self) -> &str {
        match self {
            Area::Tract(id) | Area::Zone(id) => id,
            Area::AnyZone => "ALL_ZONES",
        }
    }

    pub fn holds(&self, r: &ClassificationResult) -> bool {
        match (self, &r.placement.location) {
            (Area::Tract(id), _) => r.placement.tract_id.as_deref() == Some(id),
            (Area::Zone(id), Location::InZone { zone_id }) => zone_id == id,
            (Area::AnyZone, Location::InZone { .. }) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplianceRecord {
    pub area_id: String,
    pub period: Period,
    pub m: u64,
    pub n: u64,
}

impl ComplianceRecord {
    pub fn alpha(&self) -> f64 {
        self.m as f64 / self.n as f64
    }
}

/// Evacuees departing within `period` over residents of `area`; `None`
/// when the area has no residents in the denominator.
pub fn compliance_rate(
    results: &[ClassificationResult],
    area: &Area,
    period: Period,
    denom: Denominator,
) -> Option<ComplianceRecord> {
    let (mut m, mut n) = (0, 0);
    for r in results.iter().filter(|r| area.holds(r)) {
        if denom.admits(r.label) {
            n += 1;
        }
        if r.label.is_evacuee() && r.t_e.is_some_and(|t| period.contains(t)) {
            m += 1;
        }
    }
    (n > 0).then(|| ComplianceRecord {
        area_id: area.id().to_string(),
        period,
        m,
        n,
    })
}

pub fn compliance_by_tract(
    results: &[ClassificationResult],
    s: &Scenario,
    period: Period,
    denom: Denominator,
) -> Vec<(String, Option<ComplianceRecord>)> {
    s.tracts
        .iter()
        .map(|t| {
            (
                t.tract_id.clone(),
                compliance_rate(results, &Area::Tract(t.tract_id.clone()), period, denom),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CurveGroup {
    Label(ResidentLabel),
    All,
}

impl CurveGroup {
    pub fn name(&self) -> &'static str {
        match self {
            CurveGroup::Label(l) => l.as_str(),
            CurveGroup::All => "ALL",
        }
    }
}

const EVACUEE_LABELS: [ResidentLabel; 4] = [
    ResidentLabel::SelfEvacuee,
    ResidentLabel::ShadowEvacuee,
    ResidentLabel::EvacueeUnderWarning,
    ResidentLabel::OrderedEvacuee,
];

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseCurve {
    pub group: CurveGroup,
    /// `cumulative[k]` counts departures before `bins[k]`, except the last
    /// entry, which counts every departure.
    pub bins: Vec<Timestamp>,
    pub cumulative: Vec<u64>,
    /// Departures at or after the last boundary.
    pub beyond_horizon: u64,
}

/// Bin boundaries `b_0 = ignition, b_1, ..., b_horizon`.
pub fn curve_bins(
    ignition: Timestamp,
    tz: Tz,
    horizon_days: u32,
    binning: CurveBinning,
) -> Vec<Timestamp> {
    let mut bins = vec![ignition];
    let first_date = local_date(ignition, tz);
    for k in 1..=horizon_days as i64 {
        bins.push(match binning {
            CurveBinning::Ignition => ignition + Duration::days(k),
            CurveBinning::LocalDays => local_midnight(first_date + Duration::days(k), tz),
        });
    }
    bins
}

/// One curve per evacuee label, then `ALL`.
pub fn response_curves(results: &[ClassificationResult], bins: &[Timestamp]) -> Vec<ResponseCurve> {
    assert!(!bins.is_empty(), "curve needs at least one boundary");
    let last = bins.len() - 1;
    let mut curves: Vec<ResponseCurve> = EVACUEE_LABELS
        .iter()
        .map(|&l| ResponseCurve {
            group: CurveGroup::Label(l),
            bins: bins.to_vec(),
            cumulative: vec![0; bins.len()],
            beyond_horizon: 0,
        })
        .collect();
    for r in results {
        let (Some(g), Some(te)) = (EVACUEE_LABELS.iter().position(|l| *l == r.label), r.t_e) else {
            continue;
        };
        let c = &mut curves[g];
        let first = bins.partition_point(|b| *b <= te);
        for slot in &mut c.cumulative[first.min(last)..] {
            *slot += 1;
        }
        if te >= bins[last] {
            c.beyond_horizon += 1;
        }
    }
    let mut all = ResponseCurve {
        group: CurveGroup::All,
        bins: bins.to_vec(),
        cumulative: vec![0; bins.len()],
        beyond_horizon: 0,
    };
    for c in &curves {
        for (a, v) in all.cumulative.iter_mut().zip(&c.cumulative) {
            *a += v;
        }
        all.beyond_horizon += c.beyond_horizon;
    }
    curves.push(all);
    curves
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Universe {
    AllInScope,
    InZoneOnly,
}

impl Universe {
    pub fn as_str(&self) -> &'static str {
        match self {
            Universe::AllInScope => "ALL_IN_SCOPE",
            Universe::InZoneOnly => "IN_ZONE_ONLY",
        }
    }

    fn admits(&self, r: &ClassificationResult) -> bool {
        match self {
            Universe::AllInScope => true,
            Universe::InZoneOnly => matches!(r.placement.location, Location::InZone { .. }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupProportions {
    pub universe: Universe,
    pub total: u64,
    pub counts: BTreeMap<ResidentLabel, u64>,
}

impl GroupProportions {
    pub fn share(&self, label: ResidentLabel) -> f64 {
        self.counts.get(&label).copied().unwrap_or(0) as f64 / self.total as f64
    }

    pub fn shares(&self) -> BTreeMap<ResidentLabel, f64> {
        ResidentLabel::ALL
            .iter()
            .map(|&l| (l, self.share(l)))
            .collect()
    }
}

pub fn group_proportions<'a, I>(
    results: I,
    universe: Universe,
) -> Result<GroupProportions, MetricsError>
where
    I: IntoIterator<Item = &'a ClassificationResult>,
{
    let mut counts: BTreeMap<ResidentLabel, u64> =
        ResidentLabel::ALL.iter().map(|&l| (l, 0)).collect();
    let mut total = 0;
    for r in results.into_iter().filter(|r| universe.admits(r)) {
        *counts.get_mut(&r.label).unwrap() += 1;
        total += 1;
    }
    if total == 0 {
        return Err(MetricsError::EmptyUniverse);
    }
    Ok(GroupProportions {
        universe,
        total,
        counts,
    })
}

/// Proportions within each tract that holds at least one resident of the universe.
pub fn tract_proportions(
    results: &[ClassificationResult],
    universe: Universe,
) -> BTreeMap<String, GroupProportions> {
    let mut by_tract: BTreeMap<&str, Vec<&ClassificationResult>> = BTreeMap::new();
    for r in results {
        if let Some(t) = r.placement.tract_id.as_deref() {
            by_tract.entry(t).or_default().push(r);
        }
    }
    by_tract
        .into_iter()
        .filter_map(|(t, rs)| {
            group_proportions(rs, universe)
                .ok()
                .map(|g| (t.to_string(), g))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionSummary {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Two-sided p-value of the slope's t statistic with `n - 2` degrees of freedom.
    pub p_value: f64,
    pub slope_std_err: f64,
    pub n_points: usize,
}

/// Ordinary least squares of `y` on `x`.
pub fn ols(points: &[(f64, f64)]) -> Result<RegressionSummary, MetricsError> {
    let n = points.len();
    if n < 3 {
        return Err(MetricsError::TooFewPoints(n));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricsError::ConstantRegressor);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|&(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let df = nf - 2.0;
    let slope_std_err = (ss_res / df / sxx).sqrt();
    let (r_squared, p_value) = if syy == 0.0 {
        (0.0, 1.0)
    } else {
        let r2 = (1.0 - ss_res / syy).clamp(0.0, 1.0);
        let p = if slope_std_err == 0.0 {
            0.0
        } else {
            t_two_sided_p(slope / slope_std_err, df)
        };
        (r2, p)
    };
    Ok(RegressionSummary {
        slope,
        intercept,
        r_squared,
        p_value,
        slope_std_err,
        n_points: n,
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t))
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9.
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta, modified Lentz.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        for num in [
            num,
            -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0)),
        ] {
            d = 1.0 + num * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + num / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Inferred residents per tract, over every tract of the scenario.
pub fn inferred_per_tract<I: IntoIterator<Item = GeoPoint>>(
    homes: I,
    s: &Scenario,
) -> BTreeMap<String, u64> {
    let mut m: BTreeMap<String, u64> = s.tracts.iter().map(|t| (t.tract_id.clone(), 0)).collect();
    for h in homes {
        if let Some(t) = s.tract_of(h) {
            *m.get_mut(&t.tract_id).unwrap() += 1;
        }
    }
    m
}

/// Inferred over population per tract; `None` for unpopulated tracts.
pub fn sampling_rates(
    inferred: &BTreeMap<String, u64>,
    s: &Scenario,
) -> BTreeMap<String, Option<f64>> {
    s.tracts
        .iter()
        .map(|t| {
            let k = inferred.get(&t.tract_id).copied().unwrap_or(0);
            (
                t.tract_id.clone(),
                (t.population > 0).then(|| k as f64 / t.population as f64),
            )
        })
        .collect()
}

pub fn county_sampling_rate(inferred: &BTreeMap<String, u64>, s: &Scenario) -> Option<f64> {
    let pop = s.total_population();
    (pop > 0).then(|| inferred.values().sum::<u64>() as f64 / pop as f64)
}

pub fn sampling_bias_regression(
    inferred: &BTreeMap<String, u64>,
    s: &Scenario,
) -> Result<RegressionSummary, MetricsError> {
    let points: Vec<(f64, f64)> = s
        .tracts
        .iter()
        .map(|t| {
            (
                t.population as f64,
                inferred.get(&t.tract_id).copied().unwrap_or(0) as f64,
            )
        })
        .collect();
    ols(&points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsParams {
    pub period: Period,
    pub denominator: Denominator,
    pub curve_bins: Vec<Timestamp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsBundle {
    pub params: MetricsParams,
    pub zone_compliance: Vec<ComplianceRecord>,
    pub tract_compliance: Vec<(String, Option<ComplianceRecord>)>,
    pub overall: Option<ComplianceRecord>,
    pub curves: Vec<ResponseCurve>,
    pub proportions: Vec<GroupProportions>,
    pub tract_proportions: BTreeMap<String, GroupProportions>,
    pub inferred: BTreeMap<String, u64>,
    pub sampling_rates: BTreeMap<String, Option<f64>>,
    pub county_rate: Option<f64>,
    pub regression: Result<RegressionSummary, MetricsError>,
}

/// Every aggregate. `homes` are the points counted per tract for the
/// sampling analysis.
pub fn compute_metrics(
    results: &[ClassificationResult],
    homes: &[GeoPoint],
    s: &Scenario,
    params: MetricsParams,
) -> MetricsBundle {
    let zone_compliance = s
        .zones
        .iter()
        .filter_map(|z| {
            compliance_rate(
                results,
                &Area::Zone(z.zone_id.clone()),
                params.period,
                params.denominator,
            )
        })
        .collect();
    let inferred = inferred_per_tract(homes.iter().copied(), s);
    MetricsBundle {
        zone_compliance,
        tract_compliance: compliance_by_tract(results, s, params.period, params.denominator),
        overall: compliance_rate(results, &Area::AnyZone, params.period, params.denominator),
        curves: response_curves(results, &params.curve_bins),
        proportions: [Universe::AllInScope, Universe::InZoneOnly]
            .iter()
            .filter_map(|&u| group_proportions(results, u).ok())
            .collect(),
        tract_proportions: tract_proportions(results, Universe::AllInScope),
        sampling_rates: sampling_rates(&inferred, s),
        county_rate: county_sampling_rate(&inferred, s),
        regression: sampling_bias_regression(&inferred, s),
        inferred,
        params,
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_compliance_csv<W: Write>(w: W, b: &MetricsBundle) -> io::Result<()> {
    let mut out = io::BufWriter::new(w);
    writeln!(out, "area_type,area_id,period_start,period_end,m,n,alpha")?;
    let (start, end) = (
        format_utc(b.params.period.start),
        format_utc(b.params.period.end),
    );
    let mut row = |kind: &str, id: &str, rec: Option<&ComplianceRecord>| match rec {
        Some(r) => writeln!(
            out,
            "{kind},{id},{start},{end},{},{},{}",
            r.m,
            r.n,
            r.alpha()
        ),
        None => writeln!(out, "{kind},{id},{start},{end},0,0,"),
    };
    if let Some(o) = &b.overall {
        row("all_zones", o.area_id.as_str(), Some(o))?;
    }
    for r in &b.zone_compliance {
        row("zone", &r.area_id, Some(r))?;
    }
    for (id, r) in &b.tract_compliance {
        row("tract", id, r.as_ref())?;
    }
    out.flush()
}

pub fn write_compliance_geojson<W: Write>(
    mut w: W,
    b: &MetricsBundle,
    s: &Scenario,
) -> io::Result<()> {
    let features: Vec<Value> = s
        .tracts
        .iter()
        .zip(&b.tract_compliance)
        .map(|(t, (_, rec))| {
            json!({
                "type": "Feature",
                "properties": {
                    "tract_id": t.tract_id,
                    "population": t.population,
                    "m": rec.as_ref().map(|r| r.m),
                    "n": rec.as_ref().map(|r| r.n),
                    "alpha": rec.as_ref().map(ComplianceRecord::alpha),
                },
                "geometry": geometry_json(&t.geometry),
            })
        })
        .collect();
    serde_json::to_writer_pretty(&mut w, &feature_collection(features))?;
    writeln!(w)
}

pub fn write_curves_csv<W: Write>(w: W, curves: &[ResponseCurve]) -> io::Result<()> {
    let mut out = io::BufWriter::new(w);
    writeln!(out, "bin,bin_end,group,cumulative")?;
    for c in curves {
        for (k, (b, v)) in c.bins.iter().zip(&c.cumulative).enumerate() {
            writeln!(out, "{k},{},{},{v}", format_utc(*b), c.group.name())?;
        }
    }
    out.flush()
}

pub fn curves_svg(curves: &[ResponseCurve]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 5] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#333333"];
    let bins = curves
        .first()
        .map(|c| c.cumulative.len())
        .unwrap_or(1)
        .max(2);
    let top = curves
        .iter()
        .flat_map(|c| c.cumulative.iter())
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let x = |k: usize| PAD + (W - 2.0 * PAD) * k as f64 / (bins - 1) as f64;
    let y = |v: u64| H - PAD - (H - 2.0 * PAD) * v as f64 / top;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = writeln!(
        svg,
        r##"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="#000000"/>"##,
        H - PAD,
        W - PAD
    );
    for k in 0..bins {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" font-size="10" text-anchor="middle">{k}</text>"#,
            x(k),
            H - PAD + 14.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">days since ignition</text>"#,
        W / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{}</text>"#,
        PAD - 4.0,
        PAD + 4.0,
        top as u64
    );
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = c
            .cumulative
            .iter()
            .enumerate()
            .map(|(k, v)| format!("{:.1},{:.1}", x(k), y(*v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="10" fill="{color}">{}</text>"#,
            PAD + 8.0,
            PAD + 12.0 * (i as f64 + 1.0),
            c.group.name()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_proportions_csv<W: Write>(w: W, b: &MetricsBundle) -> io::Result<()> {
    let mut out = io::BufWriter::new(w);
    writeln!(out, "universe,scope,label,count,share")?;
    let groups = b
        .proportions
        .iter()
        .map(|g| ("county", g))
        .chain(b.tract_proportions.iter().map(|(t, g)| (t.as_str(), g)));
    for (scope, g) in groups {
        for (label, count) in &g.counts {
            writeln!(
                out,
                "{},{scope},{label},{count},{}",
                g.universe.as_str(),
                g.share(*label)
            )?;
        }
    }
    out.flush()
}

pub fn regression_text(b: &MetricsBundle) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# inferred residents ~ tract population");
    match &b.regression {
        Ok(r) => {
            let _ = writeln!(s, "n_points = {}", r.n_points);
            let _ = writeln!(s, "slope = {}", r.slope);
            let _ = writeln!(s, "intercept = {}", r.intercept);
            let _ = writeln!(s, "r_squared = {}", r.r_squared);
            let _ = writeln!(s, "slope_std_err = {}", r.slope_std_err);
            let _ = writeln!(s, "p_value = {}", r.p_value);
        }
        Err(e) => {
            let _ = writeln!(s, "error = {e}");
        }
    }
    let total: u64 = b.inferred.values().sum();
    let _ = writeln!(s, "inferred_total = {total}");
    let _ = writeln!(s, "county_sampling_rate = {}", opt_num(b.county_rate));
    for (t, r) in &b.sampling_rates {
        let _ = writeln!(s, "sampling_rate.{t} = {}", opt_num(*r));
    }
    s
}
