mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;
use evactrace_core::classifier::{
    read_classifications, write_classifications, ClassificationResult, ResidentLabel,
};
use evactrace_core::config::Config;
use evactrace_core::home::read_homes;
use evactrace_core::scenario::{load_scenario, write_tracts, write_zones};
use evactrace_core::synth::read_truth;

fn evactrace<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_evactrace"))
        .args(args)
        .env_remove("EVACTRACE_WORKERS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, n: usize, extra: &[&str]) -> PathBuf {
    let out = dir.join("bundle");
    let mut args = vec![
        "synth".to_string(),
        "--n".into(),
        n.to_string(),
        "--outdir".into(),
        out.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let o = evactrace(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

/// Config for the Day-k fixtures with zones and tracts written next to it.
fn day_bundle(dir: &Path) -> PathBuf {
    let s = day_scenario(Some(3.0), Some(5.0));
    write_zones(
        fs::File::create(dir.join("zones.geojson")).unwrap(),
        &s.zones,
    )
    .unwrap();
    write_tracts(
        fs::File::create(dir.join("tracts.geojson")).unwrap(),
        &s.tracts,
    )
    .unwrap();
    let mut c = day_config();
    c.zones = Some("zones.geojson".into());
    c.tracts = Some("tracts.geojson".into());
    let path = dir.join("day.conf");
    fs::write(&path, c.to_text()).unwrap();
    path
}

const CLEAN_FIXTURE: &str = "\
device_id,timestamp,lat,lon,accuracy
a,2019-10-20T10:00:00Z,38.5,-122.7,12
a,2019-10-20T10:00:00Z,38.5,-122.7,40
a,2019-10-20T11:00:00Z,38.5,-122.7,300
a,2019-10-01T11:00:00Z,38.5,-122.7,10
a,not-a-time,38.5,-122.7,10
b,2019-10-21T01:00:00Z,38.6,-122.8,
b,2019-10-21T02:00:00Z,38.6,-122.8,5
b,2019-10-21T03:00:00Z,91.0,-122.8,5
c,2019-10-25T12:00:00Z,38.7,-122.9,249.9
";

#[test]
fn clean_fixture_counts() {
    let dir = tempfile::tempdir().unwrap();
    let conf = day_bundle(dir.path());
    let pings = dir.path().join("raw.csv");
    fs::write(&pings, CLEAN_FIXTURE).unwrap();
    let out = dir.path().join("clean.csv");
    let o = evactrace([
        "clean",
        "--config",
        conf.to_str().unwrap(),
        "--pings",
        pings.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // 9 rows: 2 malformed, 1 before the window, 1 over 250 m, 1 duplicate.
    let report = fs::read_to_string(dir.path().join("clean.csv.report.txt")).unwrap();
    assert!(report.contains("input_count = 7"), "{report}");
    assert!(report.contains("dropped_out_of_bounds = 1"));
    assert!(report.contains("dropped_inaccurate = 1"));
    assert!(report.contains("dropped_duplicate = 1"));
    assert!(report.contains("retained_count = 4"));
    let cleaned = fs::read_to_string(&out).unwrap();
    assert_eq!(cleaned.lines().count(), 5);
    assert!(cleaned.contains("a,2019-10-20T10:00:00Z,38.5,-122.7,12\n"));
    assert_eq!(
        fs::read_to_string(dir.path().join("clean.csv.errors.log"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    assert!(dir.path().join("clean.csv.manifest.json").is_file());
}

#[test]
fn clean_empty_and_bad_schema() {
    let dir = tempfile::tempdir().unwrap();
    let conf = day_bundle(dir.path());
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "device_id,timestamp,lat,lon,accuracy\n").unwrap();
    let out = dir.path().join("out.csv");
    let o = evactrace([
        "clean",
        "--config",
        conf.to_str().unwrap(),
        "--pings",
        empty.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(&out).unwrap(),
        "device_id,timestamp,lat,lon,accuracy\n"
    );

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "id,time,y,x\na,2019-10-20T10:00:00Z,38.5,-122.7\n").unwrap();
    let out2 = dir.path().join("out2.csv");
    let o = evactrace([
        "clean",
        "--config",
        conf.to_str().unwrap(),
        "--pings",
        bad.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("device_id"));
    assert!(!out2.exists());

    let o = evactrace([
        "clean",
        "--config",
        conf.to_str().unwrap(),
        "--pings",
        "/nonexistent/pings.csv",
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    let o = evactrace(["clean", "--bogus-flag"]);
    assert_eq!(code(&o), 2);
    let o = evactrace([
        "clean",
        "--config",
        conf.to_str().unwrap(),
        "--set",
        "no_such_key=1",
        "--pings",
        empty.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn infer_homes_exact_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth(dir.path(), 100, &["--noise-m", "0", "--seed", "3"]);
    let conf = b.join("evactrace.conf");
    let homes = dir.path().join("homes.csv");
    let o = evactrace([
        "infer-homes",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        homes.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = fs::read(&homes).unwrap();
    let inferred = read_homes(first.as_slice()).unwrap();
    let truth = read_truth(fs::File::open(b.join("truth.csv")).unwrap()).unwrap();
    assert_eq!(inferred.len(), 100);
    for t in &truth {
        let h = &inferred[&t.agent_id];
        // 20 m cells: the centroid lies within half a diagonal of the true home.
        assert!(
            evactrace_core::geo::haversine_km(h.point, t.home) < 0.0142,
            "{}: {:?} vs {:?}",
            t.agent_id,
            h.point,
            t.home
        );
    }
    let o = evactrace([
        "infer-homes",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        homes.to_str().unwrap(),
        "--workers",
        "1",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&homes).unwrap(), first);
}

#[test]
fn infer_homes_without_frequent_users() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth(dir.path(), 5, &[]);
    let homes = dir.path().join("homes.csv");
    let o = evactrace([
        "infer-homes",
        "--config",
        b.join("evactrace.conf").to_str().unwrap(),
        "--set",
        "min_daily_signals=100000",
        "--out",
        homes.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&homes).unwrap().lines().count(), 1);
}

#[test]
fn classify_two_hundred_agents() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth(dir.path(), 200, &["--noise-m", "0", "--seed", "77"]);
    let conf = b.join("evactrace.conf");
    let homes = dir.path().join("homes.csv");
    let out = dir.path().join("classifications.csv");
    assert_eq!(
        code(&evactrace([
            "infer-homes",
            "--config",
            conf.to_str().unwrap(),
            "--out",
            homes.to_str().unwrap()
        ])),
        0
    );
    let o = evactrace([
        "classify",
        "--config",
        conf.to_str().unwrap(),
        "--homes",
        homes.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c = Config::load(&conf, &[]).unwrap();
    let s = load_scenario(
        fs::File::open(c.zones.unwrap()).unwrap(),
        fs::File::open(c.tracts.unwrap()).unwrap(),
        &Config::load(&conf, &[]).unwrap(),
    )
    .unwrap();
    let results = read_classifications(fs::File::open(&out).unwrap(), &s).unwrap();
    let truth = read_truth(fs::File::open(b.join("truth.csv")).unwrap()).unwrap();
    assert_eq!(results.len(), 200);
    for t in &truth {
        let r = results.iter().find(|r| r.device_id == t.agent_id).unwrap();
        assert_eq!(r.label, t.label, "{} ({})", t.agent_id, r.reason_code);
    }
}

#[test]
fn classify_input_errors_and_out_of_scope() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth(dir.path(), 10, &[]);
    let conf = b.join("evactrace.conf");
    let out = dir.path().join("c.csv");
    let o = evactrace([
        "classify",
        "--config",
        conf.to_str().unwrap(),
        "--homes",
        "/nonexistent/homes.csv",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!out.exists());

    // Every home 200 km from the zones.
    let homes = dir.path().join("far.csv");
    fs::write(&homes, "device_id,lat,lon,cell_col,cell_row,night_ping_count\nagent_000000,40.4,-122.8,0,0,5\nagent_000001,40.4,-122.7,1,0,5\n").unwrap();
    let o = evactrace([
        "classify",
        "--config",
        conf.to_str().unwrap(),
        "--homes",
        homes.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1);
    assert!(
        stderr(&o).contains("0 residents classified, 2 out of scope"),
        "{}",
        stderr(&o)
    );
}

fn fixture_results(split: [usize; 3]) -> Vec<ClassificationResult> {
    use ResidentLabel::*;
    let s = day_scenario(Some(3.0), Some(5.0));
    let home = at_km(0.0, 0.0);
    let total: usize = split.iter().sum();
    (0..total)
        .map(|i| {
            let label = if i < split[0] {
                [SelfEvacuee, EvacueeUnderWarning, OrderedEvacuee][i % 3]
            } else if i < split[0] + split[1] {
                NonEvacueeInZone
            } else {
                Uncategorized
            };
            let t_e = label.is_evacuee().then(|| day(1.0 + (i % 7) as f64));
            let id = format!("r{i:03}");
            ClassificationResult {
                placement: s.place_home(&id, home),
                device_id: id,
                label,
                home,
                t_l: t_e,
                t_e,
                t_r: None,
                reason_code: "fixture".into(),
            }
        })
        .collect()
}

fn run_metrics(dir: &Path, results: &[ClassificationResult], extra: &[&str]) -> PathBuf {
    let conf = day_bundle(dir);
    let classes = dir.join("classifications.csv");
    write_classifications(fs::File::create(&classes).unwrap(), results).unwrap();
    let outdir = dir.join("metrics");
    let mut args: Vec<String> = [
        "metrics",
        "--config",
        conf.to_str().unwrap(),
        "--classifications",
        classes.to_str().unwrap(),
        "--outdir",
        outdir.to_str().unwrap(),
    ]
    .map(String::from)
    .to_vec();
    args.extend(extra.iter().map(|s| s.to_string()));
    let o = evactrace(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    outdir
}

#[test]
fn metrics_categorized_only_rate() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = run_metrics(
        dir.path(),
        &fixture_results([35, 42, 23]),
        &["--set", "categorized_only=true"],
    );
    let csv = fs::read_to_string(outdir.join("compliance.csv")).unwrap();
    let row = csv.lines().find(|l| l.contains("ALL_ZONES")).unwrap();
    let f: Vec<&str> = row.split(',').collect();
    assert_eq!((f[4], f[5]), ("35", "77"), "{row}");
    let alpha: f64 = f[6].parse().unwrap();
    assert_eq!((100.0 * alpha).round(), 45.0);
    assert!((100.0 * alpha - 46.0).abs() < 1.0);
}

#[test]
fn metrics_without_evacuees_and_share_sums() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = run_metrics(dir.path(), &fixture_results([0, 30, 10]), &[]);
    let curves = fs::read_to_string(outdir.join("curves.csv")).unwrap();
    assert!(curves.lines().count() > 1);
    assert!(
        curves.lines().skip(1).all(|l| l.ends_with(",0")),
        "{curves}"
    );
    let props = fs::read_to_string(outdir.join("proportions.csv")).unwrap();
    let mut sums: std::collections::BTreeMap<(String, String), f64> = Default::default();
    for l in props.lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        *sums.entry((f[0].into(), f[1].into())).or_default() += f[4].parse::<f64>().unwrap();
    }
    assert!(!sums.is_empty());
    for (k, v) in sums {
        assert!((v - 1.0).abs() < 1e-12, "{k:?} sums to {v}");
    }
}

#[test]
fn synth_determinism_mix_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let o = evactrace([
            "synth",
            "--n",
            "30",
            "--seed",
            "5",
            "--template",
            "OVERLAPPING",
            "--outdir",
            d.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in [
        "pings.csv",
        "zones.geojson",
        "tracts.geojson",
        "evactrace.conf",
        "truth.csv",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }

    let m = dir.path().join("m");
    let o = evactrace([
        "synth",
        "--n",
        "100",
        "--mix",
        "self=0.33,shadow=0.23,warning=0.07,ordered=0.37",
        "--outdir",
        m.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let truth = read_truth(fs::File::open(m.join("truth.csv")).unwrap()).unwrap();
    let count = |l| truth.iter().filter(|t| t.label == l).count();
    use ResidentLabel::*;
    assert_eq!(
        [
            count(SelfEvacuee),
            count(ShadowEvacuee),
            count(EvacueeUnderWarning),
            count(OrderedEvacuee)
        ],
        [33, 23, 7, 37]
    );

    let z = dir.path().join("z");
    assert_eq!(
        code(&evactrace([
            "synth",
            "--n",
            "0",
            "--outdir",
            z.to_str().unwrap()
        ])),
        0
    );
    assert_eq!(
        fs::read_to_string(z.join("pings.csv"))
            .unwrap()
            .lines()
            .count(),
        1
    );
    assert_eq!(
        fs::read_to_string(z.join("truth.csv"))
            .unwrap()
            .lines()
            .count(),
        1
    );

    assert_eq!(
        code(&evactrace([
            "synth",
            "--mix",
            "self=0.2",
            "--outdir",
            z.to_str().unwrap()
        ])),
        2
    );
    assert_eq!(
        code(&evactrace([
            "synth",
            "--template",
            "ROUND",
            "--outdir",
            z.to_str().unwrap()
        ])),
        2
    );
}

#[test]
fn run_all_matches_composed_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth(dir.path(), 60, &["--seed", "12"]);
    let conf = b.join("evactrace.conf");
    let conf = conf.to_str().unwrap();
    let all = dir.path().join("all");
    let o = evactrace([
        "run-all",
        "--config",
        conf,
        "--truth",
        b.join("truth.csv").to_str().unwrap(),
        "--outdir",
        all.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let step = dir.path().join("step");
    fs::create_dir_all(&step).unwrap();
    let p = |n: &str| step.join(n).display().to_string();
    assert_eq!(
        code(&evactrace([
            "clean",
            "--config",
            conf,
            "--out",
            &p("cleaned_pings.csv")
        ])),
        0
    );
    assert_eq!(
        code(&evactrace([
            "infer-homes",
            "--config",
            conf,
            "--pings",
            &p("cleaned_pings.csv"),
            "--out",
            &p("homes.csv")
        ])),
        0
    );
    assert_eq!(
        code(&evactrace([
            "classify",
            "--config",
            conf,
            "--pings",
            &p("cleaned_pings.csv"),
            "--homes",
            &p("homes.csv"),
            "--out",
            &p("classifications.csv")
        ])),
        0
    );
    assert_eq!(
        code(&evactrace([
            "metrics",
            "--config",
            conf,
            "--classifications",
            &p("classifications.csv"),
            "--homes",
            &p("homes.csv"),
            "--outdir",
            &p("metrics")
        ])),
        0
    );
    for f in [
        "cleaned_pings.csv",
        "homes.csv",
        "classifications.csv",
        "metrics/compliance.csv",
        "metrics/compliance.geojson",
        "metrics/curves.csv",
        "metrics/curves.svg",
        "metrics/proportions.csv",
        "metrics/regression.txt",
    ] {
        assert_eq!(
            fs::read(all.join(f)).unwrap(),
            fs::read(step.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let report = fs::read_to_string(all.join("cleaning_report.txt")).unwrap();
    assert_eq!(
        report,
        fs::read_to_string(step.join("cleaned_pings.csv.report.txt")).unwrap()
    );

    // Manifest counts reconcile with the stage outputs.
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(all.join("manifest.json")).unwrap()).unwrap();
    let stages = m["stages"].as_array().unwrap();
    let clean = &stages[0]["details"];
    assert_eq!(clean["reconciles"], true);
    let sum = [
        "dropped_out_of_bounds",
        "dropped_inaccurate",
        "dropped_duplicate",
        "retained_count",
    ]
    .iter()
    .map(|k| clean[k].as_u64().unwrap())
    .sum::<u64>();
    assert_eq!(sum, clean["input_count"].as_u64().unwrap());
    assert_eq!(
        clean["retained_count"].as_u64().unwrap() as usize,
        fs::read_to_string(all.join("cleaned_pings.csv"))
            .unwrap()
            .lines()
            .count()
            - 1
    );
    let homes = fs::read_to_string(all.join("homes.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    assert_eq!(stages[1]["records_out"].as_u64().unwrap() as usize, homes);
    let classified = fs::read_to_string(all.join("classifications.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    assert_eq!(
        stages[2]["records_out"].as_u64().unwrap() as usize,
        classified
    );
    let labels: u64 = stages[2]["details"]["labels"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(
        labels as usize + stages[2]["details"]["out_of_scope"].as_u64().unwrap() as usize,
        homes
    );
    assert_eq!(m["inputs"]["pings"]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["software"]["version"], env!("CARGO_PKG_VERSION"));
    assert!(m["config"].as_str().unwrap().contains("ignition"));
}

#[test]
fn run_all_failure_removes_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth(dir.path(), 10, &[]);
    let out = dir.path().join("run");
    fs::create_dir_all(&out).unwrap();
    // A plain file where the metrics directory should go makes the last stage fail.
    fs::write(out.join("metrics"), "in the way").unwrap();
    let o = evactrace([
        "run-all",
        "--config",
        b.join("evactrace.conf").to_str().unwrap(),
        "--outdir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let left: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(left, vec!["metrics".to_string()]);
}

#[test]
fn worker_settings() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth(dir.path(), 5, &[]);
    let homes = dir.path().join("h.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_evactrace"))
        .args([
            "infer-homes",
            "--config",
            b.join("evactrace.conf").to_str().unwrap(),
            "--out",
            homes.to_str().unwrap(),
        ])
        .env("EVACTRACE_WORKERS", "two")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let o = evactrace([
        "--workers",
        "0",
        "infer-homes",
        "--config",
        b.join("evactrace.conf").to_str().unwrap(),
        "--out",
        homes.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}
