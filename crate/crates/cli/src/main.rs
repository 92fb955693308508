use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use evactrace_cli::*;
use evactrace_core::geo::GeoPoint;
use evactrace_core::synth::{write_bundle, Mix, SynthParams, Template};

#[derive(Parser)]
#[command(
    name = "evactrace",
    version,
    about = "Infer homes and evacuation behavior from GPS pings"
)]
struct Cli {
    /// Worker threads (default: EVACTRACE_WORKERS, else all logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Drop out-of-window, inaccurate and duplicate pings.
    Clean {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate each frequent user's home cell from pre-fire night pings.
    InferHomes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label every resident with a home in or near an evacuation zone.
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pings: Option<PathBuf>,
        #[arg(long)]
        homes: PathBuf,
        #[arg(long)]
        zones: Option<PathBuf>,
        #[arg(long)]
        tracts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compliance rates, response curves, group shares and sampling analysis.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classifications: PathBuf,
        #[arg(long)]
        zones: Option<PathBuf>,
        #[arg(long)]
        tracts: Option<PathBuf>,
        /// Homes counted per tract for the sampling analysis; defaults to
        /// the homes of the classified residents.
        #[arg(long)]
        homes: Option<PathBuf>,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Write a synthetic scenario, ping file, config and truth table.
    Synth {
        #[arg(long, default_value = "BASIC")]
        template: String,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// e.g. `self=0.1,shadow=0.1,warning=0.1,ordered=0.2,non_in=0.2,non_out=0.15,uncat=0.15`
        #[arg(long)]
        mix: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 4.0)]
        ping_rate: f64,
        #[arg(long, default_value_t = 30.0)]
        noise_m: f64,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Run every stage, writing checkpoints and a manifest under `outdir`.
    RunAll {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pings: Option<PathBuf>,
        #[arg(long)]
        zones: Option<PathBuf>,
        #[arg(long)]
        tracts: Option<PathBuf>,
        /// Synthetic truth table to score the run against.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        outdir: PathBuf,
    },
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn with_cleanup(f: impl FnOnce(&mut Outputs) -> Result<()>) -> Result<()> {
    let mut out = Outputs::default();
    let r = f(&mut out);
    if r.is_err() {
        out.remove_all();
    }
    r
}

fn run(cli: Cli) -> Result<()> {
    configure_workers(cli.workers)?;
    match cli.command {
        Command::Clean { common, pings, out } => with_cleanup(|o| {
            let c = load_config(&common.config, &common.set)?;
            let pings = pings_path(pings.as_deref(), &c)?.to_path_buf();
            let mut m = RunManifest::new(&c);
            m.input("pings", &pings);
            let t0 = Instant::now();
            let cleaned = load_and_clean(&pings, &c)?;
            write_cleaned(o, &out, &cleaned, &c)?;
            let mut report = out.as_os_str().to_owned();
            report.push(".report.txt");
            o.write_text(Path::new(&report), &cleaned.report.to_text())?;
            let mut errors = out.as_os_str().to_owned();
            errors.push(".errors.log");
            write_parse_log(o, Path::new(&errors), &cleaned.parse)?;
            if !cleaned.parse.errors.is_empty() {
                eprintln!(
                    "warning: skipped {} malformed rows (see {})",
                    cleaned.parse.errors.len(),
                    Path::new(&errors).display()
                );
            }
            m.stage(
                "clean",
                t0,
                cleaned.parse.rows,
                cleaned.report.retained_count,
                cleaning_details(&cleaned.report, &cleaned.parse),
            );
            m.write(o, &manifest_path(&out))?;
            eprint!("{}", cleaned.report.to_text());
            Ok(())
        }),
        Command::InferHomes { common, pings, out } => with_cleanup(|o| {
            let c = load_config(&common.config, &common.set)?;
            let pings = pings_path(pings.as_deref(), &c)?.to_path_buf();
            let mut m = RunManifest::new(&c);
            m.input("pings", &pings);
            let t0 = Instant::now();
            let cleaned = load_and_clean(&pings, &c)?;
            let sp = split(cleaned.traces, &c);
            let homes = infer_homes(&sp.pre, &c)?;
            if homes.frequent_users == 0 {
                eprintln!(
                    "warning: no device meets the frequent-user threshold; homes file is empty"
                );
            }
            write_homes_file(o, &out, &homes.homes)?;
            m.stage(
                "infer_homes",
                t0,
                homes.devices as u64,
                homes.homes.len() as u64,
                json!({ "frequent_users": homes.frequent_users, "no_night_pings": homes.excluded, "out_of_grid_pings": homes.out_of_grid_pings }),
            );
            m.write(o, &manifest_path(&out))?;
            eprintln!(
                "{} homes from {} frequent users",
                homes.homes.len(),
                homes.frequent_users
            );
            Ok(())
        }),
        Command::Classify {
            common,
            pings,
            homes,
            zones,
            tracts,
            out,
        } => with_cleanup(|o| {
            let c = load_config(&common.config, &common.set)?;
            let pings = pings_path(pings.as_deref(), &c)?.to_path_buf();
            let home_map = load_homes(&homes)?;
            let s = scenario_from(zones.as_deref(), tracts.as_deref(), &c)?;
            let mut m = RunManifest::new(&c);
            m.input("pings", &pings);
            m.input("homes", &homes);
            let t0 = Instant::now();
            let cleaned = load_and_clean(&pings, &c)?;
            let sp = split(cleaned.traces, &c);
            let run = classify(&home_map, &sp, &s, &c);
            write_classifications_file(o, &out, &run.results)?;
            m.stage(
                "classify",
                t0,
                home_map.len() as u64,
                run.results.len() as u64,
                label_details(&run),
            );
            m.write(o, &manifest_path(&out))?;
            eprintln!(
                "{} residents classified, {} out of scope",
                run.results.len(),
                run.out_of_scope
            );
            Ok(())
        }),
        Command::Metrics {
            common,
            classifications,
            zones,
            tracts,
            homes,
            outdir,
        } => with_cleanup(|o| {
            let c = load_config(&common.config, &common.set)?;
            let s = scenario_from(zones.as_deref(), tracts.as_deref(), &c)?;
            let results = load_classifications(&classifications, &s)?;
            let points: Vec<GeoPoint> = match &homes {
                Some(p) => load_homes(p)?.values().map(|h| h.point).collect(),
                None => results.iter().map(|r| r.home).collect(),
            };
            let mut m = RunManifest::new(&c);
            m.input("classifications", &classifications);
            if let Some(p) = &homes {
                m.input("homes", p);
            }
            let t0 = Instant::now();
            let b = run_metrics(o, &outdir, &results, &points, &s, &c)?;
            m.stage(
                "metrics",
                t0,
                results.len() as u64,
                b.curves.len() as u64,
                json!({}),
            );
            m.write(o, &outdir.join(run_files::MANIFEST))?;
            Ok(())
        }),
        Command::Synth {
            template,
            n,
            mix,
            seed,
            ping_rate,
            noise_m,
            outdir,
        } => {
            let template: Template = template.parse().map_err(CliError::usage)?;
            let mix = match mix {
                Some(m) => m.parse::<Mix>().map_err(CliError::usage)?,
                None => Mix::default(),
            };
            if !(ping_rate > 0.0 && noise_m >= 0.0) {
                return Err(CliError::usage(anyhow!(
                    "--ping-rate must be positive and --noise-m non-negative"
                )));
            }
            let params = SynthParams {
                ping_rate_per_hour: ping_rate,
                position_noise_m: noise_m,
                ..SynthParams::default()
            };
            let summary = write_bundle(&outdir, template, n, &mix, &params, seed)
                .map_err(CliError::runtime)?;
            eprintln!(
                "{} agents, {} pings written to {}",
                summary.agents,
                summary.pings,
                outdir.display()
            );
            Ok(())
        }
        Command::RunAll {
            common,
            pings,
            zones,
            tracts,
            truth,
            outdir,
        } => {
            let c = load_config(&common.config, &common.set)?;
            let opts = RunAllOptions {
                pings,
                zones,
                tracts,
                truth,
            };
            let outcome = run_all(&c, &outdir, &opts)?;
            if let Some(a) = outcome.truth {
                eprintln!(
                    "truth: {}/{} labels agree, {}/{} home cells exact",
                    a.labels_agree, a.labels_compared, a.home_cell_exact, a.agents
                );
            }
            eprintln!(
                "wrote {} files under {}",
                outcome.files.len(),
                outdir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
