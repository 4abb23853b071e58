use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{NaiveDate, Weekday};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ecokit::cluster::GridSpec;
use ecokit::density::GrowthMeasure;
use ecokit::error::{Error, Result};
use ecokit::forecast::RmseMode;
use ecokit::ingest::{self, CorpusConfig, EventFormat};
use ecokit::irf::{self, MetricNormalizer};
use ecokit::persist::{ensure_dir, read_json, write_json};
use ecokit::pipeline::{self, ClusterStage, DensityStage, ForecastStage, IrfStage, PipelineConfig, Stage, VarStage};
use ecokit::synth::{self, SynthSpec};
use ecokit::{overlap, var};

#[derive(Parser)]
#[command(name = "ecokit", version, about = "Competition-mutualism networks among clusters of online groups")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run directory shared by the stage subcommands.
#[derive(Args)]
struct RunDir {
    /// Run directory written to; each stage uses `<out>/<stage>/`.
    #[arg(long, visible_alias = "run-dir")]
    out: PathBuf,
    /// Run directory holding upstream stages, when different from `--out`.
    #[arg(long = "in", id = "upstream")]
    upstream: Option<PathBuf>,
}

impl RunDir {
    /// Copies missing upstream stage directories from `--in` into `--out`.
    fn prepare(&self, stage: Stage) -> Result<&Path> {
        ensure_dir(&self.out)?;
        if let Some(src) = self.upstream.as_deref().filter(|s| *s != self.out) {
            for up in stage.upstream() {
                let from = up.dir(src);
                let to = up.dir(&self.out);
                if from.is_dir() && !to.exists() {
                    copy_tree(&from, &to)?;
                }
            }
        }
        Ok(&self.out)
    }
}

fn copy_tree(from: &Path, to: &Path) -> Result<()> {
    ensure_dir(to)?;
    for entry in fs::read_dir(from).map_err(|e| Error::io(from, e))? {
        let entry = entry.map_err(|e| Error::io(from, e))?;
        let (src, dst) = (entry.path(), to.join(entry.file_name()));
        if src.is_dir() {
            copy_tree(&src, &dst)?;
        } else {
            fs::copy(&src, &dst).map_err(|e| Error::io(&dst, e))?;
        }
    }
    Ok(())
}

#[derive(Subcommand)]
enum Command {
    /// Select the population and build the weekly panel and user-frequency matrix.
    Ingest {
        /// Event file (`user,group,ts` CSV or NDJSON).
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Option<EventFormat>,
        #[arg(long)]
        top_n: Option<usize>,
        /// Group ids to drop, one per line.
        #[arg(long)]
        exclude_file: Option<PathBuf>,
        /// `START..END`, each a Unix timestamp or a `YYYY-MM-DD` date (end exclusive).
        #[arg(long)]
        window: Option<String>,
        /// Corpus settings as JSON; flags override its fields.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "mon")]
        week_anchor: Weekday,
        #[command(flatten)]
        run: RunDir,
    },
    /// Embed the user-frequency matrix and compute overlap densities.
    Overlap {
        #[arg(long, default_value_t = overlap::DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        run: RunDir,
    },
    /// Grid-search clusterings of the embedding, or import labels.
    Cluster {
        /// Grid spec JSON; defaults to the built-in grid.
        #[arg(long)]
        grid_file: Option<PathBuf>,
        /// `group,cluster` CSV used instead of the grid search.
        #[arg(long, conflicts_with = "grid_file")]
        labels: Option<PathBuf>,
        #[arg(long)]
        max_isolates: Option<usize>,
        #[arg(long)]
        min_clusters: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        run: RunDir,
    },
    /// Regress holdout growth on overlap density.
    Density {
        #[arg(long, default_value_t = 24)]
        holdout_weeks: usize,
        /// Average the trailing weeks at each endpoint instead of single weeks.
        #[arg(long)]
        trailing_weeks: Option<usize>,
        #[command(flatten)]
        run: RunDir,
    },
    /// Fit a VAR(1) and the diagonal baseline per cluster.
    Var {
        #[arg(long, default_value_t = var::DEFAULT_MIN_WEEKS)]
        min_weeks: usize,
        #[arg(long, default_value_t = var::DEFAULT_HOLDOUT)]
        holdout: usize,
        /// Start each cluster's sample at its youngest member's creation week.
        #[arg(long)]
        exclude_pre_creation: bool,
        #[command(flatten)]
        run: RunDir,
    },
    /// Bootstrap impulse responses and build interaction networks.
    Irf {
        #[arg(long, default_value_t = irf::DEFAULT_HORIZON)]
        horizon: usize,
        #[arg(long, default_value_t = irf::DEFAULT_REPLICATES)]
        replicates: usize,
        /// Defaults to the horizon.
        #[arg(long)]
        edge_window: Option<usize>,
        #[arg(long, value_enum, default_value = "rows")]
        normalizer: MetricNormalizer,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        run: RunDir,
    },
    /// Score holdout forecasts of the VAR against the baseline.
    Forecast {
        /// Must match the holdout the models were fitted with.
        #[arg(long)]
        holdout: Option<usize>,
        /// Accepted for compatibility; the baseline comparison always runs.
        #[arg(long)]
        compare_baseline: bool,
        #[arg(long, value_enum, default_value = "pooled")]
        rmse_mode: RmseMode,
        #[command(flatten)]
        run: RunDir,
    },
    /// Generate a synthetic corpus with planted interactions.
    Simulate {
        #[arg(long)]
        spec_file: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: EventFormat,
        /// Output directory for events, panel and planted truth.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from a pipeline config, reusing cached stages.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a run directory.
    Report {
        #[arg(long, visible_alias = "run-dir")]
        out: PathBuf,
    },
}

fn parse_instant(s: &str) -> Result<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp())
        .map_err(|_| Error::Config(format!("cannot parse {s:?} as a timestamp or YYYY-MM-DD date")))
}

fn parse_window(s: &str) -> Result<(i64, i64)> {
    let (a, b) = s
        .split_once("..")
        .or_else(|| s.split_once(','))
        .ok_or_else(|| Error::Config(format!("window {s:?} must look like START..END")))?;
    Ok((parse_instant(a)?, parse_instant(b)?))
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest {
            input,
            format,
            top_n,
            exclude_file,
            window,
            corpus,
            week_anchor,
            run,
        } => {
            let mut cfg: CorpusConfig = match &corpus {
                Some(p) => read_json(p)?,
                None => {
                    let (start, end) = parse_window(window.as_deref().ok_or_else(|| Error::Config("--window or --corpus is required".into()))?)?;
                    let mut c = CorpusConfig::new(top_n.unwrap_or(10_000), start, end);
                    c.week_anchor = week_anchor;
                    c
                }
            };
            if corpus.is_some() {
                if let Some(n) = top_n {
                    cfg.top_n = n;
                }
                if let Some(w) = &window {
                    (cfg.window_start, cfg.window_end) = parse_window(w)?;
                }
            }
            if let Some(p) = &exclude_file {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                cfg.exclusion_list.extend(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from));
            }
            let format = format
                .or_else(|| EventFormat::from_path(&input))
                .ok_or_else(|| Error::Config(format!("cannot infer the format of {}; pass --format", input.display())))?;
            let root = run.prepare(Stage::Ingest)?;
            print(&pipeline::ingest_stage(root, &input, format, &cfg)?)
        }
        Command::Overlap { k, seed, run } => {
            let m = pipeline::overlap_stage(run.prepare(Stage::Overlap)?, k, seed)?;
            print(&serde_json::json!({
                "groups": m.groups.len(),
                "k": m.k,
                "warnings": m.warnings,
            }))
        }
        Command::Cluster {
            grid_file,
            labels,
            max_isolates,
            min_clusters,
            seed,
            run,
        } => {
            let mut grid: GridSpec = match &grid_file {
                Some(p) => read_json(p)?,
                None => pipeline::default_grid(),
            };
            if let Some(v) = max_isolates {
                grid.max_isolates = v;
            }
            if let Some(v) = min_clusters {
                grid.min_clusters = v;
            }
            let params = ClusterStage { grid, labels_file: labels };
            let s = pipeline::cluster_stage(run.prepare(Stage::Cluster)?, &params, seed)?;
            print(&serde_json::json!({
                "params": s.assignment.params,
                "n_clusters": s.assignment.n_clusters,
                "n_isolates": s.assignment.n_isolates,
                "silhouette": s.assignment.silhouette,
                "feasible_candidates": s.feasible_candidates,
                "grid_points": s.grid_points,
            }))
        }
        Command::Density {
            holdout_weeks,
            trailing_weeks,
            run,
        } => {
            let params = DensityStage {
                holdout_weeks,
                measure: trailing_weeks.map_or(GrowthMeasure::Endpoint, |weeks| GrowthMeasure::TrailingMean { weeks }),
            };
            let r = pipeline::density_stage(run.prepare(Stage::Density)?, &params)?;
            print(&serde_json::json!({ "fit": r.fit, "verdict": r.verdict }))
        }
        Command::Var {
            min_weeks,
            holdout,
            exclude_pre_creation,
            run,
        } => {
            let params = VarStage {
                min_weeks,
                holdout,
                exclude_pre_creation,
            };
            print(&pipeline::var_stage(run.prepare(Stage::Var)?, &params)?)
        }
        Command::Irf {
            horizon,
            replicates,
            edge_window,
            normalizer,
            seed,
            run,
        } => {
            let params = IrfStage {
                horizon,
                replicates,
                edge_window: edge_window.unwrap_or(horizon),
                normalizer,
            };
            if params.edge_window == 0 || params.edge_window > horizon {
                return Err(Error::Config("--edge-window must lie in 1..=horizon".into()));
            }
            let s = pipeline::irf_stage(run.prepare(Stage::Irf)?, &params, seed)?;
            print(&serde_json::json!({
                "networks": s.networks.len(),
                "skipped": s.skipped,
                "typology": s.typology,
            }))
        }
        Command::Forecast {
            holdout,
            compare_baseline: _,
            rmse_mode,
            run,
        } => {
            let root = run.prepare(Stage::Forecast)?;
            if let Some(h) = holdout {
                let recs: Vec<pipeline::VarRecord> = read_json(&Stage::Var.dir(root).join("summary.json"))?;
                for r in recs.iter().filter(|r| r.fitted) {
                    let spec: var::VarSpec = read_json(&Stage::Var.dir(root).join(&r.cluster).join("spec.json"))?;
                    if spec.holdout != h {
                        return Err(Error::Config(format!(
                            "models were fitted with a {}-week holdout, not {h}; rerun `ecokit var --holdout {h}`",
                            spec.holdout
                        )));
                    }
                }
            }
            print(&pipeline::forecast_stage(root, &ForecastStage { rmse_mode })?)
        }
        Command::Simulate {
            spec_file,
            seed,
            format,
            out,
        } => {
            let mut spec: SynthSpec = read_json(&spec_file)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            ensure_dir(&out)?;
            let truth_path = out.join("truth.json");
            if spec.events.is_some() {
                let corpus = synth::simulate_events(&spec)?;
                let path = out.join(match format {
                    EventFormat::Csv => "events.csv",
                    EventFormat::Ndjson => "events.ndjson",
                });
                let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                match format {
                    EventFormat::Csv => ingest::write_events_csv(BufWriter::new(file), &corpus.events)?,
                    EventFormat::Ndjson => ingest::write_events_ndjson(BufWriter::new(file), &corpus.events)?,
                }
                corpus.panel.write_csv(&out.join("panel.csv"))?;
                write_json(&truth_path, &corpus.truth)?;
                print(&serde_json::json!({ "events": corpus.events.len(), "groups": corpus.panel.n_groups(), "weeks": corpus.panel.n_weeks() }))
            } else {
                let (panel, truth) = synth::simulate_panel(&spec)?;
                panel.write_csv(&out.join("panel.csv"))?;
                write_json(&truth_path, &truth)?;
                print(&serde_json::json!({ "events": 0, "groups": panel.n_groups(), "weeks": panel.n_weeks() }))
            }
        }
        Command::Run { config, seed, out } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let m = pipeline::run(&cfg)?;
            let stages: Vec<_> = m.stages.iter().map(|s| serde_json::json!({ "stage": s.stage, "status": s.status })).collect();
            print(&serde_json::json!({ "output_dir": cfg.output_dir, "stages": stages }))
        }
        Command::Report { out } => {
            let r = pipeline::report_stage(&out)?;
            print!("{}", pipeline::render_markdown(&r));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "kind": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn windows_accept_dates_and_timestamps() {
        assert_eq!(parse_window("2020-01-06..2020-01-13").unwrap(), (1_578_268_800, 1_578_873_600));
        assert_eq!(parse_window("5,10").unwrap(), (5, 10));
        assert!(parse_window("yesterday").is_err());
    }
}
