//! Pipeline stages behind the `evactrace` subcommands.
//!
//! Every subcommand and `run-all` call the same stage functions, so the
//! end-to-end run writes the same files as the subcommands chained by hand.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use evactrace_core::classifier::{
    classify_all, read_classifications, write_classifications, ClassificationResult,
    ClassificationRun, ClassifierParams, ResidentLabel,
};
use evactrace_core::config::Config;
use evactrace_core::geo::{haversine_km, GeoPoint, GridSpec};
use evactrace_core::home::{
    infer_all_homes, read_homes, study_grid, write_homes, HomeLocation, NightWindow,
};
use evactrace_core::ingest::{
    filter_frequent_users, open_input, read_pings, split_pre_post_fire, write_pings, Cleaner,
    CleaningParams, CleaningReport, IngestError, ParseLog, Schema, TraceSet,
};
use evactrace_core::metrics::{
    compute_metrics, curve_bins, curves_svg, regression_text, write_compliance_csv,
    write_compliance_geojson, write_curves_csv, write_proportions_csv, Denominator, MetricsBundle,
    MetricsParams,
};
use evactrace_core::scenario::{load_scenario, Scenario};
use evactrace_core::synth::{read_truth, TruthRow};
use evactrace_core::time::{local_dates_between, Period, TimeWindow};

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad flags, config, schema or missing inputs (exit 2).
    Usage,
    /// Anything that fails while running (exit 1).
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: ErrorKind::Usage,
            error: e.into(),
        }
    }

    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: ErrorKind::Runtime,
            error: e.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 2,
            ErrorKind::Runtime => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Sizes the global thread pool. The flag wins over `EVACTRACE_WORKERS`;
/// with neither, rayon uses every logical core.
pub fn configure_workers(flag: Option<usize>) -> Result<()> {
    let env = match std::env::var("EVACTRACE_WORKERS") {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
            CliError::usage(anyhow!(
                "EVACTRACE_WORKERS must be a positive integer, got {v:?}"
            ))
        })?),
        Err(_) => None,
    };
    if let Some(n) = flag.or(env) {
        if n == 0 {
            return Err(CliError::usage(anyhow!("worker count must be at least 1")));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<Config> {
    Config::load(path, overrides).map_err(CliError::usage)
}

fn required<'a>(
    flag: Option<&'a Path>,
    from_config: Option<&'a PathBuf>,
    what: &str,
) -> Result<&'a Path> {
    flag.or(from_config.map(PathBuf::as_path)).ok_or_else(|| {
        CliError::usage(anyhow!(
            "no {what} given (pass --{what} or set `{what}` in the config)"
        ))
    })
}

fn open_existing(path: &Path, what: &str) -> Result<Box<dyn Read + Send>> {
    if !path.is_file() {
        return Err(CliError::usage(anyhow!(
            "{what} file {} does not exist",
            path.display()
        )));
    }
    open_input(path)
        .with_context(|| format!("opening {what} file {}", path.display()))
        .map_err(CliError::runtime)
}

fn schema(c: &Config) -> Schema {
    Schema {
        columns: c.columns.clone(),
        delimiter: c.delimiter,
    }
}

fn ingest_err(path: &Path, e: IngestError) -> CliError {
    let e2 = anyhow!("{e}").context(format!("reading {}", path.display()));
    match e {
        IngestError::Io(_) => CliError::runtime(e2),
        IngestError::MissingColumn(_) | IngestError::Header(_) => CliError::usage(e2),
    }
}

#[derive(Debug, Clone)]
pub struct Cleaned {
    pub traces: TraceSet,
    pub report: CleaningReport,
    pub parse: ParseLog,
}

/// Reads a ping file and applies the window, accuracy and duplicate filters.
/// Cleaning is idempotent, so cleaned files may be fed back in.
pub fn load_and_clean(path: &Path, c: &Config) -> Result<Cleaned> {
    let src = open_existing(path, "pings")?;
    let mut cleaner = Cleaner::new(CleaningParams {
        accuracy_max_m: c.accuracy_max_m,
        study_window: TimeWindow::new(c.study_start, c.study_end),
    });
    let parse = read_pings(src, &schema(c), |id, p| cleaner.push_owned(id, p))
        .map_err(|e| ingest_err(path, e))?;
    let (traces, report) = cleaner.finish();
    Ok(Cleaned {
        traces,
        report,
        parse,
    })
}

/// Tracks files written by a command so a failed run can remove them.
#[derive(Debug, Default)]
pub struct Outputs {
    written: Vec<PathBuf>,
}

impl Outputs {
    /// Writes through a temporary sibling and renames on success.
    pub fn write(
        &mut self,
        path: &Path,
        f: impl FnOnce(&mut File) -> io::Result<()>,
    ) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))
                .map_err(CliError::runtime)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        let result = File::create(&tmp).and_then(|mut file| {
            f(&mut file)?;
            file.flush()
        });
        if let Err(e) = result.and_then(|_| fs::rename(&tmp, path)) {
            let _ = fs::remove_file(&tmp);
            return Err(CliError::runtime(
                anyhow!(e).context(format!("writing {}", path.display())),
            ));
        }
        self.written.push(path.to_path_buf());
        Ok(())
    }

    pub fn write_text(&mut self, path: &Path, text: &str) -> Result<()> {
        self.write(path, |f| f.write_all(text.as_bytes()))
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn remove_all(&mut self) {
        for p in self.written.drain(..) {
            let _ = fs::remove_file(p);
        }
    }
}

pub fn write_cleaned(out: &mut Outputs, path: &Path, cleaned: &Cleaned, c: &Config) -> Result<()> {
    out.write(path, |f| write_pings(f, &cleaned.traces, &schema(c)))
}

pub fn write_parse_log(out: &mut Outputs, path: &Path, log: &ParseLog) -> Result<()> {
    out.write(path, |f| log.write_to(io::BufWriter::new(f)))
}

/// Pre- and post-ignition halves of the cleaned traces.
pub struct Split {
    pub pre: TraceSet,
    pub post: TraceSet,
}

pub fn split(traces: TraceSet, c: &Config) -> Split {
    let (pre, post) = split_pre_post_fire(traces, c.ignition);
    Split { pre, post }
}

#[derive(Debug, Clone, Default)]
pub struct HomeOutcome {
    pub devices: usize,
    pub frequent_users: usize,
    pub homes: BTreeMap<String, HomeLocation>,
    pub excluded: usize,
    pub out_of_grid_pings: usize,
    pub grid: Option<GridSpec>,
}

pub fn infer_homes(pre: &TraceSet, c: &Config) -> Result<HomeOutcome> {
    let days = local_dates_between(c.study_start, c.ignition, c.tz);
    let residents: BTreeSet<String> = if days.is_empty() {
        BTreeSet::new()
    } else {
        filter_frequent_users(pre, &days, c.min_daily_signals, c.tz)
    };
    let mut out = HomeOutcome {
        devices: pre.device_count(),
        frequent_users: residents.len(),
        ..Default::default()
    };
    let grid = study_grid(pre, &residents, c.cell_size_m).map_err(CliError::runtime)?;
    if let Some(grid) = grid {
        let inf = infer_all_homes(
            &residents,
            pre,
            &NightWindow::new(c.night_start, c.night_end, c.tz),
            &grid,
        );
        out.homes = inf.homes;
        out.excluded = inf.excluded.len();
        out.out_of_grid_pings = inf.out_of_grid_pings;
        out.grid = Some(grid);
    }
    Ok(out)
}

pub fn write_homes_file(
    out: &mut Outputs,
    path: &Path,
    homes: &BTreeMap<String, HomeLocation>,
) -> Result<()> {
    out.write(path, |f| write_homes(f, homes))
}

pub fn load_homes(path: &Path) -> Result<BTreeMap<String, HomeLocation>> {
    read_homes(open_existing(path, "homes")?)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::usage)
}

pub fn load_scenario_files(zones: &Path, tracts: &Path, c: &Config) -> Result<Scenario> {
    let z = open_existing(zones, "zones")?;
    let t = open_existing(tracts, "tracts")?;
    load_scenario(z, t, c).map_err(CliError::usage)
}

/// Zones and tracts from flags, falling back to the config.
pub fn scenario_from(zones: Option<&Path>, tracts: Option<&Path>, c: &Config) -> Result<Scenario> {
    load_scenario_files(
        required(zones, c.zones.as_ref(), "zones")?,
        required(tracts, c.tracts.as_ref(), "tracts")?,
        c,
    )
}

pub fn pings_path<'a>(flag: Option<&'a Path>, c: &'a Config) -> Result<&'a Path> {
    required(flag, c.pings.as_ref(), "pings")
}

pub fn classify(
    homes: &BTreeMap<String, HomeLocation>,
    split: &Split,
    s: &Scenario,
    c: &Config,
) -> ClassificationRun {
    classify_all(
        homes,
        &split.pre,
        &split.post,
        s,
        &ClassifierParams::from_config(c),
    )
}

pub fn write_classifications_file(
    out: &mut Outputs,
    path: &Path,
    results: &[ClassificationResult],
) -> Result<()> {
    out.write(path, |f| write_classifications(f, results))
}

pub fn load_classifications(path: &Path, s: &Scenario) -> Result<Vec<ClassificationResult>> {
    read_classifications(open_existing(path, "classifications")?, s)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::usage)
}

pub fn metrics_params(c: &Config) -> MetricsParams {
    MetricsParams {
        period: Period::days_from(c.ignition, c.compliance_period_days),
        denominator: if c.categorized_only {
            Denominator::CategorizedOnly
        } else {
            Denominator::AllClassified
        },
        curve_bins: curve_bins(c.ignition, c.tz, c.curve_horizon_days, c.curve_binning),
    }
}

/// File names written under a metrics directory.
pub mod metrics_files {
    pub const COMPLIANCE_CSV: &str = "compliance.csv";
    pub const COMPLIANCE_GEOJSON: &str = "compliance.geojson";
    pub const CURVES_CSV: &str = "curves.csv";
    pub const CURVES_SVG: &str = "curves.svg";
    pub const PROPORTIONS_CSV: &str = "proportions.csv";
    pub const REGRESSION_TXT: &str = "regression.txt";
}

pub fn run_metrics(
    out: &mut Outputs,
    outdir: &Path,
    results: &[ClassificationResult],
    homes: &[GeoPoint],
    s: &Scenario,
    c: &Config,
) -> Result<MetricsBundle> {
    use metrics_files::*;
    let b = compute_metrics(results, homes, s, metrics_params(c));
    out.write(&outdir.join(COMPLIANCE_CSV), |f| {
        write_compliance_csv(f, &b)
    })?;
    out.write(&outdir.join(COMPLIANCE_GEOJSON), |f| {
        write_compliance_geojson(io::BufWriter::new(f), &b, s)
    })?;
    out.write(&outdir.join(CURVES_CSV), |f| write_curves_csv(f, &b.curves))?;
    out.write_text(&outdir.join(CURVES_SVG), &curves_svg(&b.curves))?;
    out.write(&outdir.join(PROPORTIONS_CSV), |f| {
        write_proportions_csv(f, &b)
    })?;
    out.write_text(&outdir.join(REGRESSION_TXT), &regression_text(&b))?;
    Ok(b)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> io::Result<String> {
    let mut h = Sha256::new();
    let mut r = BufReader::with_capacity(1 << 20, File::open(path)?);
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub name: &'static str,
    pub records_in: u64,
    pub records_out: u64,
    pub seconds: f64,
    pub details: Value,
}

/// What a run consumed and produced, for reproducibility.
#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub config_text: String,
    pub inputs: Vec<(String, PathBuf)>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(c: &Config) -> Self {
        Self {
            config_text: c.to_text(),
            ..Default::default()
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs.push((role.to_string(), path.to_path_buf()));
    }

    pub fn stage(
        &mut self,
        name: &'static str,
        started: Instant,
        records_in: u64,
        records_out: u64,
        details: Value,
    ) {
        self.stages.push(StageRecord {
            name,
            records_in,
            records_out,
            seconds: started.elapsed().as_secs_f64(),
            details,
        });
    }

    pub fn to_json(&self) -> Result<Value> {
        let mut inputs = serde_json::Map::new();
        for (role, path) in &self.inputs {
            let digest = file_digest(path)
                .with_context(|| format!("hashing {}", path.display()))
                .map_err(CliError::runtime)?;
            inputs.insert(
                role.clone(),
                json!({ "path": path.display().to_string(), "sha256": digest }),
            );
        }
        let stages: Vec<Value> = self
            .stages
            .iter()
            .map(|s| json!({ "stage": s.name, "records_in": s.records_in, "records_out": s.records_out, "seconds": s.seconds, "details": s.details }))
            .collect();
        Ok(json!({
            "software": { "name": "evactrace", "version": env!("CARGO_PKG_VERSION") },
            "config": self.config_text,
            "inputs": inputs,
            "stages": stages,
        }))
    }

    pub fn write(&self, out: &mut Outputs, path: &Path) -> Result<Value> {
        let v = self.to_json()?;
        let text = serde_json::to_string_pretty(&v).map_err(CliError::runtime)?;
        out.write_text(path, &(text + "\n"))?;
        Ok(v)
    }
}

pub fn cleaning_details(r: &CleaningReport, parse: &ParseLog) -> Value {
    json!({
        "rows_read": parse.rows,
        "rows_malformed": parse.errors.len(),
        "input_count": r.input_count,
        "dropped_out_of_bounds": r.dropped_out_of_bounds,
        "dropped_inaccurate": r.dropped_inaccurate,
        "dropped_duplicate": r.dropped_duplicate,
        "retained_count": r.retained_count,
        "reconciles": r.reconciles(),
    })
}

pub fn label_details(run: &ClassificationRun) -> Value {
    let counts = run.label_counts();
    let labels: serde_json::Map<String, Value> = ResidentLabel::ALL
        .iter()
        .map(|l| {
            (
                l.as_str().to_string(),
                json!(counts.get(l).copied().unwrap_or(0)),
            )
        })
        .collect();
    json!({ "labels": labels, "out_of_scope": run.out_of_scope })
}

/// File names written by `run-all`.
pub mod run_files {
    pub const CLEANED: &str = "cleaned_pings.csv";
    pub const CLEANING_REPORT: &str = "cleaning_report.txt";
    pub const PARSE_ERRORS: &str = "parse_errors.log";
    pub const HOMES: &str = "homes.csv";
    pub const CLASSIFICATIONS: &str = "classifications.csv";
    pub const METRICS_DIR: &str = "metrics";
    pub const MANIFEST: &str = "manifest.json";
    pub const TRUTH_REPORT: &str = "truth_agreement.json";
}

/// Agreement between a run and a synthetic truth table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TruthAgreement {
    pub agents: usize,
    pub homes_found: usize,
    pub home_cell_exact: usize,
    pub home_within_30m: usize,
    pub labels_compared: usize,
    pub labels_agree: usize,
    pub evacuees: usize,
    /// Largest |t_e - scripted departure| over correctly labeled evacuees.
    pub max_departure_error_s: i64,
    pub mismatches: Vec<(String, String, String)>,
}

impl TruthAgreement {
    pub fn to_json(&self) -> Value {
        json!({
            "agents": self.agents,
            "homes_found": self.homes_found,
            "home_cell_exact": self.home_cell_exact,
            "home_within_30m": self.home_within_30m,
            "labels_compared": self.labels_compared,
            "labels_agree": self.labels_agree,
            "evacuees": self.evacuees,
            "max_departure_error_s": self.max_departure_error_s,
            "mismatches": self.mismatches.iter().map(|(id, want, got)| json!({"agent_id": id, "truth": want, "inferred": got})).collect::<Vec<_>>(),
        })
    }
}

/// Compares homes and labels with the truth. An agent without a home or
/// without a classification counts as a disagreement.
pub fn compare_truth(
    truth: &[TruthRow],
    homes: &BTreeMap<String, HomeLocation>,
    grid: Option<&GridSpec>,
    results: &[ClassificationResult],
) -> TruthAgreement {
    let by_id: BTreeMap<&str, &ClassificationResult> =
        results.iter().map(|r| (r.device_id.as_str(), r)).collect();
    let mut a = TruthAgreement {
        agents: truth.len(),
        ..Default::default()
    };
    for t in truth {
        if let Some(h) = homes.get(&t.agent_id) {
            a.homes_found += 1;
            if grid.and_then(|g| g.cell_index(t.home).ok()) == Some(h.cell) {
                a.home_cell_exact += 1;
            }
            if haversine_km(h.point, t.home) <= 0.030 {
                a.home_within_30m += 1;
            }
        }
        a.labels_compared += 1;
        let got = by_id.get(t.agent_id.as_str());
        match got {
            Some(r) if r.label == t.label => {
                a.labels_agree += 1;
                if let (Some(want), Some(have)) = (t.t_e, r.t_e) {
                    a.evacuees += 1;
                    a.max_departure_error_s = a
                        .max_departure_error_s
                        .max((have - want).num_seconds().abs());
                }
            }
            _ => a.mismatches.push((
                t.agent_id.clone(),
                t.label.as_str().to_string(),
                got.map(|r| format!("{} ({})", r.label.as_str(), r.reason_code))
                    .unwrap_or_else(|| "unclassified".into()),
            )),
        }
    }
    a
}

pub fn load_truth(path: &Path) -> Result<Vec<TruthRow>> {
    read_truth(open_existing(path, "truth")?)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::usage)
}

#[derive(Debug, Clone, Default)]
pub struct RunAllOptions {
    pub zones: Option<PathBuf>,
    pub tracts: Option<PathBuf>,
    pub pings: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RunAllOutcome {
    pub files: Vec<PathBuf>,
    pub manifest: Value,
    pub truth: Option<TruthAgreement>,
}

/// Cleans, infers homes, classifies and aggregates, writing each stage's
/// checkpoint under `outdir`. On error every file written so far is removed.
pub fn run_all(c: &Config, outdir: &Path, opts: &RunAllOptions) -> Result<RunAllOutcome> {
    let mut out = Outputs::default();
    match run_all_inner(c, outdir, opts, &mut out) {
        Ok((manifest, truth)) => Ok(RunAllOutcome {
            files: out.paths().to_vec(),
            manifest,
            truth,
        }),
        Err(e) => {
            out.remove_all();
            Err(e)
        }
    }
}

fn run_all_inner(
    c: &Config,
    outdir: &Path,
    opts: &RunAllOptions,
    out: &mut Outputs,
) -> Result<(Value, Option<TruthAgreement>)> {
    use run_files::*;
    let pings = pings_path(opts.pings.as_deref(), c)?.to_path_buf();
    let s = scenario_from(opts.zones.as_deref(), opts.tracts.as_deref(), c)?;
    let truth = opts.truth.as_deref().map(load_truth).transpose()?;
    let mut manifest = RunManifest::new(c);
    manifest.input("pings", &pings);
    manifest.input(
        "zones",
        required(opts.zones.as_deref(), c.zones.as_ref(), "zones")?,
    );
    manifest.input(
        "tracts",
        required(opts.tracts.as_deref(), c.tracts.as_ref(), "tracts")?,
    );
    if let Some(t) = &opts.truth {
        manifest.input("truth", t);
    }

    let t0 = Instant::now();
    let cleaned = load_and_clean(&pings, c)?;
    let cleaned_path = outdir.join(CLEANED);
    write_cleaned(out, &cleaned_path, &cleaned, c)?;
    out.write_text(&outdir.join(CLEANING_REPORT), &cleaned.report.to_text())?;
    write_parse_log(out, &outdir.join(PARSE_ERRORS), &cleaned.parse)?;
    manifest.stage(
        "clean",
        t0,
        cleaned.parse.rows,
        cleaned.report.retained_count,
        cleaning_details(&cleaned.report, &cleaned.parse),
    );
    drop(cleaned);

    // Later stages read the checkpoint, as the standalone subcommands do.
    let t0 = Instant::now();
    let reread = load_and_clean(&cleaned_path, c)?;
    let retained = reread.report.retained_count;
    let sp = split(reread.traces, c);
    let homes = infer_homes(&sp.pre, c)?;
    write_homes_file(out, &outdir.join(HOMES), &homes.homes)?;
    manifest.stage(
        "infer_homes",
        t0,
        homes.devices as u64,
        homes.homes.len() as u64,
        json!({ "pings": retained, "frequent_users": homes.frequent_users, "no_night_pings": homes.excluded, "out_of_grid_pings": homes.out_of_grid_pings }),
    );

    let t0 = Instant::now();
    let run = classify(&homes.homes, &sp, &s, c);
    write_classifications_file(out, &outdir.join(CLASSIFICATIONS), &run.results)?;
    manifest.stage(
        "classify",
        t0,
        homes.homes.len() as u64,
        run.results.len() as u64,
        label_details(&run),
    );
    drop(sp);

    let t0 = Instant::now();
    let results = load_classifications(&outdir.join(CLASSIFICATIONS), &s)?;
    let home_points: Vec<GeoPoint> = homes.homes.values().map(|h| h.point).collect();
    let bundle = run_metrics(
        out,
        &outdir.join(METRICS_DIR),
        &results,
        &home_points,
        &s,
        c,
    )?;
    manifest.stage(
        "metrics",
        t0,
        results.len() as u64,
        bundle.curves.len() as u64,
        json!({ "overall_compliance": bundle.overall.as_ref().map(|r| json!({"m": r.m, "n": r.n})), "county_sampling_rate": bundle.county_rate }),
    );

    let agreement = truth.map(|t| compare_truth(&t, &homes.homes, homes.grid.as_ref(), &results));
    if let Some(a) = &agreement {
        let text = serde_json::to_string_pretty(&a.to_json()).map_err(CliError::runtime)?;
        out.write_text(&outdir.join(TRUTH_REPORT), &(text + "\n"))?;
    }
    let value = manifest.write(out, &outdir.join(MANIFEST))?;
    Ok((value, agreement))
}
