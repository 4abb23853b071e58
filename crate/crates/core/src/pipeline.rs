//! Stage orchestration: config, per-stage runners over a run directory,
//! content-hash caching, the run manifest and the summary report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cluster::{self, ClusterAssignment, ClusterParams, GridSpec};
use crate::density::{self, DensityReport, GrowthMeasure, Shape};
use crate::error::{Error, Result};
use crate::forecast::{self, ClusterForecasts, RmseMode, ScoreReport};
use crate::ingest::{self, CorpusConfig, EventFormat, GroupPanel, UserFrequencyMatrix};
use crate::irf::{self, EcoNetwork, MetricNormalizer, TypologyReport};
use crate::overlap::{self, OverlapModel};
use crate::persist::{ensure_dir, read_json, sha256_file, sha256_hex, write_json};
use crate::var::{self, VarFit, VarSpec};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const RECORD_FILE: &str = ".stage.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Overlap,
    Cluster,
    Density,
    Var,
    Irf,
    Forecast,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Overlap,
        Stage::Cluster,
        Stage::Density,
        Stage::Var,
        Stage::Irf,
        Stage::Forecast,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Overlap => "overlap",
            Stage::Cluster => "cluster",
            Stage::Density => "density",
            Stage::Var => "var",
            Stage::Irf => "irf",
            Stage::Forecast => "forecast",
            Stage::Report => "report",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Overlap => &[Stage::Ingest],
            Stage::Cluster => &[Stage::Ingest, Stage::Overlap],
            Stage::Density => &[Stage::Ingest, Stage::Overlap],
            Stage::Var => &[Stage::Ingest, Stage::Cluster],
            Stage::Irf => &[Stage::Ingest, Stage::Var],
            Stage::Forecast => &[Stage::Ingest, Stage::Var],
            Stage::Report => &[
                Stage::Ingest,
                Stage::Overlap,
                Stage::Cluster,
                Stage::Density,
                Stage::Var,
                Stage::Irf,
                Stage::Forecast,
            ],
        }
    }

    pub fn uses_seed(self) -> bool {
        matches!(self, Stage::Overlap | Stage::Cluster | Stage::Irf)
    }

    pub fn dir(self, root: &Path) -> PathBuf {
        root.join(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapStage {
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    overlap::DEFAULT_K
}

impl Default for OverlapStage {
    fn default() -> Self {
        OverlapStage { k: default_k() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterStage {
    #[serde(default = "default_grid")]
    pub grid: GridSpec,
    /// Precomputed `group,cluster` labels used instead of the grid search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_file: Option<PathBuf>,
}

impl Default for ClusterStage {
    fn default() -> Self {
        ClusterStage {
            grid: default_grid(),
            labels_file: None,
        }
    }
}

/// k-means, HDBSCAN and affinity propagation over the default embedding size.
pub fn default_grid() -> GridSpec {
    GridSpec {
        kmeans: Some(cluster::KmeansGrid {
            n_clusters: vec![50, 100, 250, 500, 1000],
        }),
        dbscan: None,
        hdbscan: Some(cluster::HdbscanGrid {
            min_cluster_size: vec![2, 3, 5, 10],
            min_samples: vec![1, 2, 5],
        }),
        affinity_propagation: Some(cluster::AffinityGrid {
            damping: vec![0.5, 0.7, 0.9],
            preference: Vec::new(),
        }),
        k_dims: vec![overlap::DEFAULT_K],
        max_isolates: cluster::DEFAULT_MAX_ISOLATES,
        min_clusters: cluster::DEFAULT_MIN_CLUSTERS,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityStage {
    #[serde(default = "default_holdout")]
    pub holdout_weeks: usize,
    #[serde(default)]
    pub measure: GrowthMeasure,
}

fn default_holdout() -> usize {
    density::DEFAULT_HOLDOUT_WEEKS
}

impl Default for DensityStage {
    fn default() -> Self {
        DensityStage {
            holdout_weeks: default_holdout(),
            measure: GrowthMeasure::Endpoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarStage {
    #[serde(default = "default_min_weeks")]
    pub min_weeks: usize,
    #[serde(default = "default_var_holdout")]
    pub holdout: usize,
    #[serde(default)]
    pub exclude_pre_creation: bool,
}

fn default_min_weeks() -> usize {
    var::DEFAULT_MIN_WEEKS
}

fn default_var_holdout() -> usize {
    var::DEFAULT_HOLDOUT
}

impl Default for VarStage {
    fn default() -> Self {
        VarStage {
            min_weeks: default_min_weeks(),
            holdout: default_var_holdout(),
            exclude_pre_creation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IrfStage {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Lags `1..=edge_window` checked by the edge rule.
    #[serde(default = "default_horizon")]
    pub edge_window: usize,
    #[serde(default)]
    pub normalizer: MetricNormalizer,
}

fn default_horizon() -> usize {
    irf::DEFAULT_HORIZON
}

fn default_replicates() -> usize {
    irf::DEFAULT_REPLICATES
}

impl Default for IrfStage {
    fn default() -> Self {
        IrfStage {
            horizon: default_horizon(),
            replicates: default_replicates(),
            edge_window: default_horizon(),
            normalizer: MetricNormalizer::Rows,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastStage {
    #[serde(default)]
    pub rmse_mode: RmseMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: PathBuf,
    /// Inferred from the input extension when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_format: Option<EventFormat>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub overlap: OverlapStage,
    #[serde(default)]
    pub cluster: ClusterStage,
    #[serde(default)]
    pub density: DensityStage,
    #[serde(default)]
    pub var: VarStage,
    #[serde(default)]
    pub irf: IrfStage,
    #[serde(default)]
    pub forecast: ForecastStage,
}

impl PipelineConfig {
    /// Reads a config; relative paths resolve against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = read_json(path).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.input = resolve(&cfg.input);
        cfg.output_dir = resolve(&cfg.output_dir);
        cfg.cluster.labels_file = cfg.cluster.labels_file.as_deref().map(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.input.is_file() {
            return bad(format!("input {} does not exist", self.input.display()));
        }
        self.format()?;
        self.corpus.validate()?;
        if self.overlap.k == 0 {
            return bad("overlap.k must be at least 1".into());
        }
        match &self.cluster.labels_file {
            Some(p) if !p.is_file() => return bad(format!("labels file {} does not exist", p.display())),
            Some(_) => {}
            None => self.cluster.grid.validate()?,
        }
        if self.density.holdout_weeks == 0 {
            return bad("density.holdout_weeks must be at least 1".into());
        }
        if let GrowthMeasure::TrailingMean { weeks: 0 } = self.density.measure {
            return bad("trailing mean needs at least 1 week".into());
        }
        if self.var.holdout == 0 || self.var.min_weeks == 0 {
            return bad("var.holdout and var.min_weeks must be at least 1".into());
        }
        if self.irf.edge_window == 0 || self.irf.edge_window > self.irf.horizon {
            return bad("irf.edge_window must lie in 1..=irf.horizon".into());
        }
        if self.irf.replicates < irf::MIN_REPLICATES {
            return bad(format!("irf.replicates must be at least {}", irf::MIN_REPLICATES));
        }
        Ok(())
    }

    pub fn format(&self) -> Result<EventFormat> {
        self.input_format
            .or_else(|| EventFormat::from_path(&self.input))
            .ok_or_else(|| Error::Config(format!("cannot infer the format of {}; set input_format", self.input.display())))
    }

    /// Parameters that shape the results; paths are left out so that two
    /// runs writing to different places share a hash.
    fn params(&self, stage: Stage) -> Value {
        match stage {
            Stage::Ingest => json!({ "corpus": self.corpus, "format": self.format().ok() }),
            Stage::Overlap => json!(self.overlap),
            Stage::Cluster => match &self.cluster.labels_file {
                Some(_) => json!({ "imported": true }),
                None => json!({ "grid": self.cluster.grid }),
            },
            Stage::Density => json!(self.density),
            Stage::Var => json!(self.var),
            Stage::Irf => json!(self.irf),
            Stage::Forecast => json!(self.forecast),
            Stage::Report => json!({}),
        }
    }

    fn config_hash(&self) -> String {
        let all: BTreeMap<&str, Value> = Stage::ALL.iter().map(|s| (s.name(), self.params(*s))).collect();
        sha256_hex(json!({ "seed": self.seed, "params": all }).to_string().as_bytes())
    }
}

fn label_name(l: i64) -> String {
    format!("cluster_{l:03}")
}

/// Independent 64-bit seed for a named sub-task.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let h = sha256_hex(format!("{seed}:{label}").as_bytes());
    u64::from_str_radix(&h[..16], 16).unwrap_or(seed)
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ensure_dir(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub total_lines: usize,
    pub malformed_lines: usize,
    pub events_in_window: usize,
    pub groups: usize,
    pub weeks: usize,
    pub week_origin: i64,
    pub warnings: Vec<String>,
}

pub fn ingest_stage(root: &Path, input: &Path, format: EventFormat, corpus: &CorpusConfig) -> Result<IngestSummary> {
    let dir = Stage::Ingest.dir(root);
    ensure_dir(&dir)?;
    let loaded = ingest::load_events(input, format)?;
    let population = ingest::select_population(&loaded.records, corpus)?;
    let kept: Vec<_> = ingest::retained_events(&loaded.records, &population.groups, corpus)
        .into_iter()
        .cloned()
        .collect();
    let panel = ingest::build_panel(&kept, &population.groups, corpus)?;
    let ufm = ingest::build_user_frequency(&kept, &population.groups)?;
    panel.write_csv(&dir.join("panel.csv"))?;
    ufm.write_csv(&dir.join("frequency.csv"))?;
    write_json(&dir.join("population.json"), &population)?;
    let summary = IngestSummary {
        total_lines: loaded.total_lines,
        malformed_lines: loaded.malformed,
        events_in_window: kept.len(),
        groups: panel.n_groups(),
        weeks: panel.n_weeks(),
        week_origin: corpus.week_origin(),
        warnings: population.warnings.clone(),
    };
    write_json(&dir.join("ingest.json"), &summary)?;
    Ok(summary)
}

fn read_panel(root: &Path) -> Result<GroupPanel> {
    GroupPanel::read_csv(&Stage::Ingest.dir(root).join("panel.csv"))
}

fn read_frequency(root: &Path, groups: &[String]) -> Result<UserFrequencyMatrix> {
    UserFrequencyMatrix::read_csv(&Stage::Ingest.dir(root).join("frequency.csv"), groups)
}

pub fn overlap_stage(root: &Path, k: usize, seed: u64) -> Result<OverlapModel> {
    let dir = Stage::Overlap.dir(root);
    ensure_dir(&dir)?;
    let panel = read_panel(root)?;
    let ufm = read_frequency(root, &panel.groups)?;
    let model = OverlapModel::build(&ufm, k, seed)?;
    for w in &model.warnings {
        log::warn!("{w}");
    }
    model.write_dir(&dir, k)?;
    Ok(model)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSelection {
    pub assignment: ClusterAssignment,
    pub ranking_rule: String,
    pub feasible_candidates: usize,
    pub grid_points: usize,
}

pub fn cluster_stage(root: &Path, params: &ClusterStage, seed: u64) -> Result<ClusterSelection> {
    let dir = Stage::Cluster.dir(root);
    ensure_dir(&dir)?;
    let model = OverlapModel::read_dir(&Stage::Overlap.dir(root))?;
    let selection = match &params.labels_file {
        Some(path) => {
            let labels = cluster::read_labels_csv(path, &model.groups)?;
            let unit = cluster::unit_columns(&model.embedding);
            ClusterSelection {
                assignment: ClusterAssignment::from_labels(labels, ClusterParams::Imported, model.k, &unit),
                ranking_rule: "imported".into(),
                feasible_candidates: 1,
                grid_points: 0,
            }
        }
        None => {
            let grid = &params.grid;
            grid.validate()?;
            let ufm = read_frequency(root, &model.groups)?;
            let f = overlap::normalize_frequencies(&ufm)?;
            let mut embeddings = Vec::new();
            for &k in &grid.k_dims {
                let m = if k == model.k {
                    model.embedding.clone()
                } else {
                    overlap::embed(&f, k, seed)?.matrix
                };
                embeddings.push((k, m));
            }
            let outcome = cluster::run_grid(&embeddings, grid, seed);
            let outcome = outcome?;
            cluster::write_grid_report(&dir.join("grid.csv"), &outcome.rows)?;
            ClusterSelection {
                assignment: outcome.ranked[0].clone(),
                ranking_rule: cluster::RANKING_RULE.into(),
                feasible_candidates: outcome.ranked.len(),
                grid_points: outcome.rows.len(),
            }
        }
    };
    cluster::write_labels_csv(&dir.join("labels.csv"), &model.groups, &selection.assignment.labels)?;
    write_json(&dir.join("selection.json"), &selection)?;
    Ok(selection)
}

pub fn density_stage(root: &Path, params: &DensityStage) -> Result<DensityReport> {
    let dir = Stage::Density.dir(root);
    ensure_dir(&dir)?;
    let panel = read_panel(root)?;
    let model = OverlapModel::read_dir(&Stage::Overlap.dir(root))?;
    let growth = density::compute_growth(&panel, params.holdout_weeks, params.measure)?;
    let obs = density::join_density(&growth, &model);
    let fit = density::fit_model1(&obs)?;
    let densities: Vec<f64> = obs.iter().map(|o| o.density).collect();
    let verdict = density::shape_test(&fit, &densities);
    let report = DensityReport {
        holdout_weeks: params.holdout_weeks,
        measure: params.measure,
        fit,
        verdict,
        excluded_groups: growth.excluded,
    };
    density::write_outputs(&dir, &obs, &report)?;
    Ok(report)
}

/// Outcome of fitting one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarRecord {
    pub cluster: String,
    pub label: i64,
    pub members: Vec<String>,
    /// Members below the activity threshold.
    pub dropped_members: Vec<String>,
    pub fitted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

fn read_labels(root: &Path, groups: &[String]) -> Result<Vec<i64>> {
    cluster::read_labels_csv(&Stage::Cluster.dir(root).join("labels.csv"), groups)
}

pub fn var_stage(root: &Path, params: &VarStage) -> Result<Vec<VarRecord>> {
    let dir = Stage::Var.dir(root);
    ensure_dir(&dir)?;
    let panel = read_panel(root)?;
    let labels = read_labels(root, &panel.groups)?;
    let t_train = panel.n_weeks().checked_sub(params.holdout).filter(|&t| t >= 2).ok_or_else(|| {
        Error::InvalidInput(format!(
            "panel of {} weeks is too short for a {}-week holdout",
            panel.n_weeks(),
            params.holdout
        ))
    })?;
    let mut by_label: BTreeMap<i64, Vec<String>> = BTreeMap::new();
    for (g, &l) in panel.groups.iter().zip(&labels) {
        if l >= 0 {
            by_label.entry(l).or_default().push(g.clone());
        }
    }

    use rayon::prelude::*;
    let fitted: Vec<(VarRecord, Option<(VarSpec, VarFit, VarFit)>)> = by_label
        .into_par_iter()
        .map(|(label, members)| {
            let (keep, dropped) = var::eligible_members(&panel, &members, t_train, params.min_weeks);
            let mut rec = VarRecord {
                cluster: label_name(label),
                label,
                members: keep.clone(),
                dropped_members: dropped,
                fitted: false,
                reason: None,
            };
            if keep.len() < 2 {
                rec.reason = Some(format!("{} member(s) meet the activity threshold", keep.len()));
                return (rec, None);
            }
            let spec = VarSpec {
                members: keep,
                t_train,
                min_weeks: params.min_weeks,
                holdout: params.holdout,
                exclude_pre_creation: params.exclude_pre_creation,
            };
            match var::fit_var(&panel, &spec).and_then(|f| Ok((f, var::fit_baseline(&panel, &spec)?))) {
                Ok((full, base)) => {
                    rec.fitted = true;
                    (rec, Some((spec, full, base)))
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", rec.cluster);
                    rec.reason = Some(e.to_string());
                    (rec, None)
                }
            }
        })
        .collect();

    let mut records = Vec::with_capacity(fitted.len());
    for (rec, fit) in fitted {
        if let Some((spec, full, base)) = fit {
            let cdir = dir.join(&rec.cluster);
            ensure_dir(&cdir)?;
            write_json(&cdir.join("spec.json"), &spec)?;
            write_json(&cdir.join("full.json"), &full)?;
            write_json(&cdir.join("baseline.json"), &base)?;
        }
        records.push(rec);
    }
    write_json(&dir.join("summary.json"), &records)?;
    Ok(records)
}

fn read_var_records(root: &Path) -> Result<Vec<VarRecord>> {
    read_json(&Stage::Var.dir(root).join("summary.json"))
}

fn read_var_cluster(root: &Path, cluster: &str) -> Result<(VarSpec, VarFit, VarFit)> {
    let d = Stage::Var.dir(root).join(cluster);
    Ok((
        read_json(&d.join("spec.json"))?,
        read_json(&d.join("full.json"))?,
        read_json(&d.join("baseline.json"))?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrfSkip {
    pub cluster: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrfSummary {
    pub networks: Vec<EcoNetwork>,
    pub skipped: Vec<IrfSkip>,
    /// Absent with fewer than two networks.
    pub typology: Option<TypologyReport>,
}

pub fn irf_stage(root: &Path, params: &IrfStage, seed: u64) -> Result<IrfSummary> {
    let dir = Stage::Irf.dir(root);
    ensure_dir(&dir)?;
    let panel = read_panel(root)?;
    let mut networks = Vec::new();
    let mut skipped = Vec::new();
    for rec in read_var_records(root)?.into_iter().filter(|r| r.fitted) {
        let (spec, full, _) = read_var_cluster(root, &rec.cluster)?;
        let cseed = derive_seed(seed, &rec.cluster);
        let result = irf::bootstrap_irf(&panel, &spec, &full, params.horizon, params.replicates, cseed)
            .and_then(|r| Ok((EcoNetwork::build(&rec.cluster, &full, &r, params.edge_window, params.normalizer)?, r)));
        match result {
            Ok((net, r)) => {
                let cdir = dir.join(&rec.cluster);
                ensure_dir(&cdir)?;
                write_json(&cdir.join("irf.json"), &r)?;
                let dot = cdir.join("network.dot");
                fs::write(&dot, net.to_dot()).map_err(|e| Error::io(&dot, e))?;
                let gml = cdir.join("network.graphml");
                fs::write(&gml, net.to_graphml()).map_err(|e| Error::io(&gml, e))?;
                networks.push(net);
            }
            Err(e @ Error::BootstrapAborted { .. }) => {
                log::warn!("skipping {}: {e}", rec.cluster);
                skipped.push(IrfSkip {
                    cluster: rec.cluster.clone(),
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let typology = if networks.len() >= 2 {
        let metrics: Vec<_> = networks.iter().map(|n| n.metrics).collect();
        Some(irf::typology_report(&metrics)?)
    } else {
        None
    };
    irf::write_metrics_csv(&dir.join("metrics.csv"), &networks)?;
    if let Some(t) = &typology {
        irf::write_histogram_csv(&dir.join("histogram.csv"), t)?;
    }
    let summary = IrfSummary {
        networks,
        skipped,
        typology,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn forecast_stage(root: &Path, params: &ForecastStage) -> Result<Option<ScoreReport>> {
    let dir = Stage::Forecast.dir(root);
    ensure_dir(&dir)?;
    let panel = read_panel(root)?;
    let mut clusters = Vec::new();
    for rec in read_var_records(root)?.into_iter().filter(|r| r.fitted) {
        let (spec, full, base) = read_var_cluster(root, &rec.cluster)?;
        let var_fc = forecast::forecast(&full, &panel, spec.holdout)?;
        let base_fc = forecast::forecast(&base, &panel, spec.holdout)?;
        let actual = forecast::actuals(&panel, &var_fc)?;
        clusters.push(ClusterForecasts {
            cluster: rec.cluster,
            var: var_fc,
            baseline: base_fc,
            actual,
        });
    }
    let report = if clusters.is_empty() {
        None
    } else {
        let r = forecast::compare(&clusters, params.rmse_mode)?;
        forecast::write_scores(&dir, &r)?;
        let fcs: Vec<_> = clusters.iter().map(|c| json!({ "cluster": c.cluster, "var": c.var, "baseline": c.baseline })).collect();
        write_json(&dir.join("forecasts.json"), &fcs)?;
        Some(r)
    };
    write_json(&dir.join("summary.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyA {
    pub shape: Shape,
    pub coefficients: [f64; 3],
    pub b1_interval: (f64, f64),
    pub b2_interval: (f64, f64),
    pub vertex: Option<f64>,
    pub vertex_percentile: Option<f64>,
    pub n: usize,
    pub excluded_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub cluster: String,
    pub members: usize,
    pub mean_interaction: f64,
    pub strength: f64,
    pub mutualism_edges: usize,
    pub competition_edges: usize,
    pub unstable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyB {
    pub clusters_fitted: usize,
    pub clusters_skipped: usize,
    pub mutualistic_fraction: Option<f64>,
    pub mean_interaction: Option<f64>,
    pub t_statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub spearman: Option<f64>,
    pub table: Vec<ClusterRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub study_a: Option<StudyA>,
    pub study_b: Option<StudyB>,
    pub forecast: Option<ScoreReport>,
    /// Sections that could not be produced, with the reason.
    pub unavailable: BTreeMap<String, String>,
}

fn try_read<T: serde::de::DeserializeOwned>(path: &Path, what: &str, missing: &mut BTreeMap<String, String>) -> Option<T> {
    match read_json(path) {
        Ok(v) => Some(v),
        Err(e) => {
            missing.insert(what.into(), format!("{}: {e}", path.display()));
            None
        }
    }
}

/// Collects the report from whatever stage outputs exist under `root`.
pub fn report(root: &Path) -> RunReport {
    let mut unavailable = BTreeMap::new();
    let study_a = try_read::<DensityReport>(&Stage::Density.dir(root).join("fit.json"), "study_a", &mut unavailable).map(|d| StudyA {
        shape: d.verdict.shape,
        coefficients: d.fit.coefficients,
        b1_interval: d.verdict.b1_interval,
        b2_interval: d.verdict.b2_interval,
        vertex: d.verdict.vertex,
        vertex_percentile: d.verdict.vertex_percentile,
        n: d.fit.n,
        excluded_groups: d.excluded_groups.len(),
    });
    let var_records: Option<Vec<VarRecord>> = try_read(&Stage::Var.dir(root).join("summary.json"), "study_b", &mut unavailable);
    let irf_summary: Option<IrfSummary> = var_records
        .as_ref()
        .and_then(|_| try_read(&Stage::Irf.dir(root).join("summary.json"), "study_b", &mut unavailable));
    let study_b = match (var_records, irf_summary) {
        (Some(recs), Some(s)) if !s.networks.is_empty() => {
            let t = s.typology.as_ref();
            if t.is_none() {
                unavailable.insert("typology".into(), "fewer than two fitted clusters".into());
            }
            Some(StudyB {
                clusters_fitted: s.networks.len(),
                clusters_skipped: recs.iter().filter(|r| !r.fitted).count() + s.skipped.len(),
                mutualistic_fraction: t.map(|t| t.mutualistic_fraction),
                mean_interaction: t.map(|t| t.mean_of_mean_interaction),
                t_statistic: t.and_then(|t| t.t_statistic),
                p_value: t.and_then(|t| t.p_value),
                spearman: t.and_then(|t| t.spearman),
                table: s
                    .networks
                    .iter()
                    .map(|n| ClusterRow {
                        cluster: n.cluster.clone(),
                        members: n.members.len(),
                        mean_interaction: n.metrics.mean_interaction,
                        strength: n.metrics.strength,
                        mutualism_edges: n.count(irf::Sign::Mutualism),
                        competition_edges: n.count(irf::Sign::Competition),
                        unstable: n.unstable,
                    })
                    .collect(),
            })
        }
        (Some(_), Some(_)) => {
            unavailable.insert("study_b".into(), "no cluster produced an interaction network".into());
            None
        }
        _ => None,
    };
    let forecast = match try_read::<Option<ScoreReport>>(&Stage::Forecast.dir(root).join("summary.json"), "forecast", &mut unavailable) {
        Some(Some(r)) => Some(r),
        Some(None) => {
            unavailable.insert("forecast".into(), "no fitted clusters to forecast".into());
            None
        }
        None => None,
    };
    RunReport {
        study_a,
        study_b,
        forecast,
        unavailable,
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

pub fn render_markdown(r: &RunReport) -> String {
    let mut s = String::from("# ecokit run report\n\n## Study A: density dependence\n\n");
    match &r.study_a {
        Some(a) => {
            let [b0, b1, b2] = a.coefficients;
            let _ = writeln!(s, "- shape: **{}**", serde_json::to_value(a.shape).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
            let _ = writeln!(s, "- coefficients: B0 = {b0:.4}, B1 = {b1:.4}, B2 = {b2:.4}");
            let _ = writeln!(s, "- 95% CI B1: [{:.4}, {:.4}]; B2: [{:.4}, {:.4}]", a.b1_interval.0, a.b1_interval.1, a.b2_interval.0, a.b2_interval.1);
            let _ = writeln!(s, "- vertex: {} (percentile of observed density: {})", opt(a.vertex, 4), opt(a.vertex_percentile, 1));
            let _ = writeln!(s, "- groups: {} ({} excluded as too young)", a.n, a.excluded_groups);
            s.push_str("- plot data: `density_curve.csv`, `density_observations.csv`\n");
        }
        None => s.push_str("Unavailable.\n"),
    }
    s.push_str("\n## Study B: ecological communities\n\n");
    match &r.study_b {
        Some(b) => {
            let _ = writeln!(s, "- clusters fitted: {} (skipped: {})", b.clusters_fitted, b.clusters_skipped);
            let _ = writeln!(s, "- mutualistic fraction: {}", opt(b.mutualistic_fraction, 3));
            let _ = writeln!(s, "- mean average ecological interaction: {} (t = {}, p = {})", opt(b.mean_interaction, 4), opt(b.t_statistic, 3), opt(b.p_value, 4));
            let _ = writeln!(s, "- Spearman correlation of interaction and strength: {}", opt(b.spearman, 3));
            s.push_str("- plot data: `typology_histogram.csv`, `cluster_metrics.csv`, `networks/*.dot`\n\n");
            s.push_str("| cluster | members | mean interaction | strength | mutualism edges | competition edges | unstable |\n");
            s.push_str("|---|---:|---:|---:|---:|---:|---|\n");
            for c in &b.table {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.4} | {:.4} | {} | {} | {} |",
                    c.cluster, c.members, c.mean_interaction, c.strength, c.mutualism_edges, c.competition_edges, c.unstable
                );
            }
        }
        None => s.push_str("Unavailable.\n"),
    }
    s.push_str("\n## Forecast comparison\n\n");
    match &r.forecast {
        Some(f) => {
            let _ = writeln!(s, "| metric | VAR | baseline | winner |\n|---|---:|---:|---|");
            let _ = writeln!(s, "| RMSE | {:.4} | {:.4} | {:?} |", f.var_rmse, f.baseline_rmse, f.rmse_winner);
            let _ = writeln!(s, "| CRPS (sum) | {:.3} | {:.3} | {:?} |", f.var_crps, f.baseline_crps, f.crps_winner);
            let _ = writeln!(s, "\n{} cells scored; per-cluster scores in `forecast/scores.csv`.", f.cells);
        }
        None => s.push_str("Unavailable.\n"),
    }
    if !r.unavailable.is_empty() {
        s.push_str("\n## Unavailable\n\n");
        for (k, v) in &r.unavailable {
            let _ = writeln!(s, "- {k}: {v}");
        }
    }
    s
}

fn copy_if_exists(from: &Path, to: &Path) -> Result<()> {
    if from.is_file() {
        fs::copy(from, to).map_err(|e| Error::io(to, e))?;
    }
    Ok(())
}

/// Writes `report.md`, `report.json` and plot-ready copies of stage outputs.
pub fn report_stage(root: &Path) -> Result<RunReport> {
    let dir = Stage::Report.dir(root);
    ensure_dir(&dir)?;
    let r = report(root);
    let md = dir.join("report.md");
    fs::write(&md, render_markdown(&r)).map_err(|e| Error::io(&md, e))?;
    write_json(&dir.join("report.json"), &r)?;
    let d = Stage::Density.dir(root);
    copy_if_exists(&d.join("curve.csv"), &dir.join("density_curve.csv"))?;
    copy_if_exists(&d.join("observations.csv"), &dir.join("density_observations.csv"))?;
    let i = Stage::Irf.dir(root);
    copy_if_exists(&i.join("histogram.csv"), &dir.join("typology_histogram.csv"))?;
    copy_if_exists(&i.join("metrics.csv"), &dir.join("cluster_metrics.csv"))?;
    if let Some(b) = &r.study_b {
        let nets = dir.join("networks");
        ensure_dir(&nets)?;
        for c in &b.table {
            copy_if_exists(&i.join(&c.cluster).join("network.dot"), &nets.join(format!("{}.dot", c.cluster)))?;
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Executed,
    Cached,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output file (relative to the stage directory) to sha256.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Per-run record; timings live in `timings.json` so this file is stable
/// across identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub ecokit_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub input_hash: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn stage(&self, s: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == s)
    }

    /// Equality ignoring cache status.
    pub fn same_results(&self, other: &RunManifest) -> bool {
        let strip = |m: &RunManifest| {
            let mut m = m.clone();
            for s in &mut m.stages {
                s.status = StageStatus::Executed;
            }
            m
        };
        strip(self) == strip(other)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    fingerprint: String,
    outputs: BTreeMap<String, String>,
}

fn hash_outputs(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else if e.file_name() != RECORD_FILE {
                let rel = p.strip_prefix(base).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_file(&p)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

fn cached(dir: &Path, fingerprint: &str) -> Option<BTreeMap<String, String>> {
    let rec: CacheRecord = read_json(&dir.join(RECORD_FILE)).ok()?;
    if rec.fingerprint != fingerprint || rec.outputs.is_empty() {
        return None;
    }
    let current = hash_outputs(dir).ok()?;
    (current == rec.outputs).then_some(rec.outputs)
}

/// Runs every stage in order, reusing stages whose fingerprint and outputs
/// are unchanged, and writes `manifest.json` and `timings.json`.
pub fn run(config: &PipelineConfig) -> Result<RunManifest> {
    config.validate()?;
    let root = &config.output_dir;
    ensure_dir(root)?;
    let input_hash = sha256_file(&config.input)?;
    let labels_hash = config.cluster.labels_file.as_deref().map(sha256_file).transpose()?;
    let mut manifest = RunManifest {
        ecokit_version: VERSION.into(),
        seed: config.seed,
        config_hash: config.config_hash(),
        input_hash: input_hash.clone(),
        stages: Vec::new(),
    };
    let mut timings = BTreeMap::new();

    for stage in Stage::ALL {
        let upstream: BTreeMap<&str, Value> = stage
            .upstream()
            .iter()
            .map(|u| {
                let r = manifest.stage(*u).expect("upstream stages run first");
                (u.name(), json!({ "fingerprint": r.fingerprint, "outputs": r.outputs }))
            })
            .collect();
        let seed = stage.uses_seed().then_some(config.seed);
        let mut inputs = BTreeMap::new();
        if stage == Stage::Ingest {
            inputs.insert("events", input_hash.clone());
        }
        if let (Stage::Cluster, Some(h)) = (stage, &labels_hash) {
            inputs.insert("labels", h.clone());
        }
        let fingerprint = sha256_hex(
            json!({
                "stage": stage.name(),
                "version": VERSION,
                "params": config.params(stage),
                "seed": seed,
                "inputs": inputs,
                "upstream": upstream,
            })
            .to_string()
            .as_bytes(),
        );
        let dir = stage.dir(root);
        let started = Instant::now();
        let (status, outputs, error) = match cached(&dir, &fingerprint) {
            Some(outputs) => {
                log::info!("{}: cached", stage.name());
                (StageStatus::Cached, outputs, None)
            }
            None => {
                log::info!("{}: running", stage.name());
                fresh_dir(&dir)?;
                match execute(stage, config) {
                    Ok(()) => {
                        let outputs = hash_outputs(&dir)?;
                        write_json(
                            &dir.join(RECORD_FILE),
                            &CacheRecord {
                                fingerprint: fingerprint.clone(),
                                outputs: outputs.clone(),
                            },
                        )?;
                        (StageStatus::Executed, outputs, None)
                    }
                    Err(e) => (StageStatus::Failed, hash_outputs(&dir).unwrap_or_default(), Some(e)),
                }
            }
        };
        timings.insert(stage.name(), started.elapsed().as_secs_f64());
        manifest.stages.push(StageRecord {
            stage,
            status,
            fingerprint,
            seed,
            outputs,
            error: error.as_ref().map(|e| e.to_string()),
        });
        if let Some(e) = error {
            write_json(&root.join("manifest.json"), &manifest)?;
            write_json(&root.join("timings.json"), &timings)?;
            return Err(Error::Stage {
                stage: stage.name().into(),
                source: Box::new(e),
            });
        }
    }
    write_json(&root.join("manifest.json"), &manifest)?;
    write_json(&root.join("timings.json"), &timings)?;
    Ok(manifest)
}

fn execute(stage: Stage, c: &PipelineConfig) -> Result<()> {
    let root = &c.output_dir;
    match stage {
        Stage::Ingest => ingest_stage(root, &c.input, c.format()?, &c.corpus).map(drop),
        Stage::Overlap => overlap_stage(root, c.overlap.k, c.seed).map(drop),
        Stage::Cluster => cluster_stage(root, &c.cluster, c.seed).map(drop),
        Stage::Density => density_stage(root, &c.density).map(drop),
        Stage::Var => var_stage(root, &c.var).map(drop),
        Stage::Irf => irf_stage(root, &c.irf, c.seed).map(drop),
        Stage::Forecast => forecast_stage(root, &c.forecast).map(drop),
        Stage::Report => report_stage(root).map(drop),
    }
}
