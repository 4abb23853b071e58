use std::fs;
use std::path::{Path, PathBuf};

use ecokit::ingest::write_events_csv;
use ecokit::persist::read_json;
use ecokit::pipeline::{self, IrfSummary, PipelineConfig, Stage, StageStatus};
use ecokit::synth::{simulate_events, ClusterSpec, EventSpec, SynthSpec};
use ecokit::Error;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn mini_config(out: &Path) -> PipelineConfig {
    let mut cfg: PipelineConfig = read_json(&data("mini_config.json")).unwrap();
    cfg.input = data("mini_events.csv");
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn statuses(m: &pipeline::RunManifest) -> Vec<(Stage, StageStatus)> {
    m.stages.iter().map(|s| (s.stage, s.status)).collect()
}

#[test]
fn mini_run_lists_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let m = pipeline::run(&mini_config(dir.path())).unwrap();
    assert_eq!(m.stages.len(), 8);
    assert!(m.stages.iter().all(|s| s.status == StageStatus::Executed && !s.outputs.is_empty()));
    for s in Stage::ALL {
        assert!(s.dir(dir.path()).is_dir(), "{} missing", s.name());
    }
    assert!(dir.path().join("report/report.md").is_file());
    assert!(dir.path().join("timings.json").is_file());
}

#[test]
fn rerun_is_cached_and_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mini_config(dir.path());
    let first = pipeline::run(&cfg).unwrap();
    let bytes = fs::read(dir.path().join("manifest.json")).unwrap();
    let second = pipeline::run(&cfg).unwrap();
    assert!(second.stages.iter().all(|s| s.status == StageStatus::Cached));
    assert!(first.same_results(&second));
    let other = tempfile::tempdir().unwrap();
    pipeline::run(&mini_config(other.path())).unwrap();
    assert_eq!(bytes, fs::read(other.path().join("manifest.json")).unwrap());
}

#[test]
fn seed_change_reruns_seeded_stages_and_their_dependents() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = mini_config(dir.path());
    let a = pipeline::run(&cfg).unwrap();
    cfg.seed += 1;
    let b = pipeline::run(&cfg).unwrap();
    let st = statuses(&b);
    assert_eq!(st[0], (Stage::Ingest, StageStatus::Cached));
    for s in [Stage::Overlap, Stage::Cluster, Stage::Var, Stage::Irf] {
        assert!(st.contains(&(s, StageStatus::Executed)), "{} not rerun", s.name());
    }
    assert_ne!(a.config_hash, b.config_hash);
    assert_ne!(a.stage(Stage::Overlap).unwrap().fingerprint, b.stage(Stage::Overlap).unwrap().fingerprint);
    assert_ne!(a.stage(Stage::Var).unwrap().fingerprint, b.stage(Stage::Var).unwrap().fingerprint);
}

#[test]
fn edited_output_invalidates_only_that_stage_onward() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mini_config(dir.path());
    pipeline::run(&cfg).unwrap();
    let f = dir.path().join("forecast/scores.json");
    fs::write(&f, "{}").unwrap();
    let m = pipeline::run(&cfg).unwrap();
    assert_eq!(m.stage(Stage::Var).unwrap().status, StageStatus::Cached);
    assert_eq!(m.stage(Stage::Forecast).unwrap().status, StageStatus::Executed);
    assert_ne!(fs::read_to_string(&f).unwrap(), "{}");
}

#[test]
fn stage_failure_names_the_stage_and_keeps_upstream_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = mini_config(dir.path());
    cfg.var.holdout = 39;
    match pipeline::run(&cfg) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "var"),
        other => panic!("expected a var stage failure, got {other:?}"),
    }
    assert!(dir.path().join("ingest/panel.csv").is_file());
    assert!(dir.path().join("cluster/labels.csv").is_file());
    let m: pipeline::RunManifest = read_json(&dir.path().join("manifest.json")).unwrap();
    let last = m.stages.last().unwrap();
    assert_eq!((last.stage, last.status), (Stage::Var, StageStatus::Failed));
    assert!(last.error.as_deref().unwrap().contains("holdout"));
}

#[test]
fn config_rejects_missing_input_and_bad_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = mini_config(dir.path());
    cfg.irf.replicates = 10;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = mini_config(dir.path());
    cfg.input = dir.path().join("nope.csv");
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn relative_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(data("mini_events.csv"), dir.path().join("mini_events.csv")).unwrap();
    fs::copy(data("mini_config.json"), dir.path().join("c.json")).unwrap();
    let cfg = PipelineConfig::load(&dir.path().join("c.json")).unwrap();
    assert_eq!(cfg.input, dir.path().join("mini_events.csv"));
    assert_eq!(cfg.output_dir, dir.path().join("mini_run"));
}

#[test]
fn all_isolate_labels_leave_study_b_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.csv");
    fs::write(&labels, "group,cluster\n").unwrap();
    let mut cfg = mini_config(&dir.path().join("run"));
    cfg.cluster.labels_file = Some(labels);
    pipeline::run(&cfg).unwrap();
    let r = pipeline::report(&cfg.output_dir);
    assert!(r.study_b.is_none());
    assert!(r.unavailable.contains_key("study_b"));
    assert!(r.forecast.is_none());
    assert!(r.study_a.is_some());
}

fn corpus_run(clusters: Vec<ClusterSpec>, t_total: usize, seed: u64) -> (tempfile::TempDir, IrfSummary) {
    let spec = SynthSpec {
        seed,
        t_total,
        noise_sd: 0.15,
        clusters,
        allow_unstable: false,
        events: Some(EventSpec {
            cluster_pool_size: 150,
            group_pool_size: 100,
            sharing_rate: 0.5,
            global_pool_size: 100,
            global_rate: 0.05,
            start_ts: 1_578_268_800,
            max_extra_events: 0,
        }),
    };
    let corpus = simulate_events(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("events.csv");
    write_events_csv(fs::File::create(&events).unwrap(), &corpus.events).unwrap();
    let mut cfg = mini_config(&dir.path().join("run"));
    cfg.input = events;
    cfg.corpus.top_n = corpus.panel.n_groups();
    cfg.corpus.window_end = cfg.corpus.window_start + t_total as i64 * 604_800;
    cfg.cluster.grid.kmeans.as_mut().unwrap().n_clusters = vec![2, 3, 4];
    cfg.var.min_weeks = 100;
    pipeline::run(&cfg).unwrap();
    let summary = read_json(&cfg.output_dir.join("irf/summary.json")).unwrap();
    (dir, summary)
}

#[test]
fn mutualistic_corpus_reports_majority_mutualism() {
    let clusters = (0..3).map(|k| ClusterSpec::uniform(&format!("m{k}"), 4, 0.4, 0.15, 0.45, 0.0)).collect();
    let (dir, s) = corpus_run(clusters, 200, 31);
    let r = pipeline::report(&dir.path().join("run"));
    let b = r.study_b.unwrap();
    assert_eq!(b.clusters_fitted, 3);
    assert!(b.mutualistic_fraction.unwrap() > 0.5);
    assert!(s.networks.iter().all(|n| n.metrics.mean_interaction > 0.0));
    let md = fs::read_to_string(dir.path().join("run/report/report.md")).unwrap();
    assert!(md.contains("mutualistic fraction"));
    assert!(dir.path().join("run/report/networks").read_dir().unwrap().count() == 3);
}

#[test]
fn diagonal_corpus_reports_weak_interactions() {
    let clusters = (0..3).map(|k| ClusterSpec::uniform(&format!("d{k}"), 4, 0.6, 0.0, 1.2, 0.0)).collect();
    let (_dir, s) = corpus_run(clusters, 300, 32);
    assert_eq!(s.networks.len(), 3);
    let mutual = (0..3).map(|k| ClusterSpec::uniform(&format!("m{k}"), 4, 0.4, 0.15, 0.45, 0.0)).collect();
    let (_d2, planted) = corpus_run(mutual, 300, 32);
    let max_diag = s.networks.iter().map(|n| n.metrics.strength).fold(0.0, f64::max);
    let min_planted = planted.networks.iter().map(|n| n.metrics.strength).fold(f64::INFINITY, f64::min);
    assert!(s.networks.iter().all(|n| n.metrics.mean_interaction.abs() < 0.1));
    assert!(max_diag < 0.5 * min_planted, "kappa {max_diag} vs planted {min_planted}");
}
