//! Impulse responses, bootstrap bands, signed interaction networks and
//! cluster-level interaction metrics.
//!
//! `theta[t][(i, j)]` is the response of member `i` at lag `t` to a unit
//! impulse in member `j`; an edge `j -> i` is read from that cell.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::ingest::GroupPanel;
use crate::linalg::{quantile_sorted, row_major};
use crate::var::{VarFit, VarSpec};

pub const DEFAULT_HORIZON: usize = 10;
pub const DEFAULT_REPLICATES: usize = 1000;
pub const MIN_REPLICATES: usize = 100;
/// Share of failed bootstrap refits above which the bootstrap aborts.
pub const MAX_DROPPED_FRACTION: f64 = 0.10;

/// `Theta_0 = I`, `Theta_t = Theta_{t-1} Phi`, for `t = 0..=horizon`.
pub fn irf(fit: &VarFit, horizon: usize) -> Vec<DMatrix<f64>> {
    irf_of(&fit.phi, horizon)
}

pub fn irf_of(phi: &DMatrix<f64>, horizon: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(DMatrix::identity(phi.nrows(), phi.ncols()));
    for t in 1..=horizon {
        let next = &out[t - 1] * phi;
        out.push(next);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrfResult {
    pub members: Vec<String>,
    pub horizon: usize,
    #[serde(with = "row_major::seq")]
    pub theta: Vec<DMatrix<f64>>,
    #[serde(with = "row_major::seq")]
    pub lower: Vec<DMatrix<f64>>,
    #[serde(with = "row_major::seq")]
    pub upper: Vec<DMatrix<f64>>,
    pub replicates_requested: usize,
    pub replicates_used: usize,
    pub replicates_dropped: usize,
    /// Cells where the point estimate falls outside its band.
    pub band_violations: usize,
    pub seed: u64,
}

impl IrfResult {
    /// True when the band for `(i, j)` at lag `t` excludes zero.
    pub fn significant(&self, t: usize, i: usize, j: usize) -> bool {
        self.lower[t][(i, j)] > 0.0 || self.upper[t][(i, j)] < 0.0
    }
}

/// Recursive residual bootstrap with joint row resampling.
///
/// Each replicate draws residual rows with replacement, regenerates the
/// training series from the fitted parameters starting at the actual
/// pre-sample week, refits and recomputes the IRF. Replicate `r` uses
/// stream `r` of a ChaCha8 generator seeded with `seed`.
pub fn bootstrap_irf(
    panel: &GroupPanel,
    spec: &VarSpec,
    fit: &VarFit,
    horizon: usize,
    replicates: usize,
    seed: u64,
) -> Result<IrfResult> {
    let idx = spec.validate(panel)?;
    if fit.members != spec.members || fit.t_train != spec.t_train {
        return Err(Error::InvalidInput("fit does not belong to this VAR spec".into()));
    }
    let y: Vec<Vec<f64>> = idx.iter().map(|&i| panel.sizes[i][..fit.t_train].to_vec()).collect();
    bootstrap_series(fit, &y, horizon, replicates, seed)
}

/// Bootstrap from raw member series covering `0..fit.t_train`.
pub fn bootstrap_series(
    fit: &VarFit,
    y: &[Vec<f64>],
    horizon: usize,
    replicates: usize,
    seed: u64,
) -> Result<IrfResult> {
    if horizon == 0 {
        return Err(Error::InvalidInput("IRF horizon must be at least 1".into()));
    }
    if replicates < MIN_REPLICATES {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_REPLICATES} bootstrap replicates, got {replicates}"
        )));
    }
    fit.validate()?;
    let m = fit.n_members();
    let n = fit.residuals.nrows();
    let deterministic: Vec<_> = (fit.start_week..fit.t_train).map(|t| fit.deterministic(t)).collect();

    let draws: Vec<Option<Vec<DMatrix<f64>>>> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r);
            let mut ys = y.to_vec();
            for (row, t) in (fit.start_week..fit.t_train).enumerate() {
                let pick = rng.random_range(0..n);
                for i in 0..m {
                    let lag: f64 = (0..m).map(|k| fit.phi[(i, k)] * ys[k][t - 1]).sum();
                    ys[i][t] = deterministic[row][i] + lag + fit.residuals[(pick, i)];
                }
            }
            match fit.refit(&ys) {
                Ok(f) => Ok(Some(irf(&f, horizon))),
                Err(Error::SingularDesign { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let dropped = draws.iter().filter(|d| d.is_none()).count();
    if dropped as f64 > MAX_DROPPED_FRACTION * replicates as f64 {
        return Err(Error::BootstrapAborted {
            dropped,
            requested: replicates,
        });
    }
    if dropped > 0 {
        log::warn!("{dropped} of {replicates} bootstrap refits were singular and dropped");
    }
    let kept: Vec<_> = draws.into_iter().flatten().collect();

    let theta = irf(fit, horizon);
    let mut lower = Vec::with_capacity(horizon + 1);
    let mut upper = Vec::with_capacity(horizon + 1);
    let mut violations = 0;
    let mut buf = Vec::with_capacity(kept.len());
    for t in 0..=horizon {
        let mut lo = DMatrix::zeros(m, m);
        let mut hi = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                buf.clear();
                buf.extend(kept.iter().map(|d| d[t][(i, j)]));
                buf.sort_by(f64::total_cmp);
                lo[(i, j)] = quantile_sorted(&buf, 0.025);
                hi[(i, j)] = quantile_sorted(&buf, 0.975);
                let p = theta[t][(i, j)];
                let slack = 1e-12 * p.abs().max(1.0);
                if p < lo[(i, j)] - slack || p > hi[(i, j)] + slack {
                    violations += 1;
                }
            }
        }
        lower.push(lo);
        upper.push(hi);
    }
    if violations > 0 {
        log::warn!("{violations} IRF cells have point estimates outside their bootstrap band");
    }
    Ok(IrfResult {
        members: fit.members.clone(),
        horizon,
        theta,
        lower,
        upper,
        replicates_requested: replicates,
        replicates_used: kept.len(),
        replicates_dropped: dropped,
        band_violations: violations,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Mutualism,
    Competition,
}

impl Sign {
    pub fn as_str(self) -> &'static str {
        match self {
            Sign::Mutualism => "mutualism",
            Sign::Competition => "competition",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub t: usize,
    pub theta: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Directed influence of `source` on `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: String,
    pub target: String,
    pub sign: Sign,
    pub first_t: usize,
    pub evidence: Vec<Evidence>,
    /// Later significant lags disagree with the first one in sign.
    pub sign_mixed: bool,
}

/// Edge exists when some lag in `1..=window` has a band excluding zero.
pub fn extract_edges(irf: &IrfResult, window: usize) -> Result<Vec<Edge>> {
    if irf.horizon < window || window == 0 {
        return Err(Error::InvalidInput(format!(
            "edge window of {window} needs an IRF horizon of at least {window}, got {}",
            irf.horizon
        )));
    }
    let m = irf.members.len();
    let mut edges = Vec::new();
    for j in 0..m {
        for i in 0..m {
            if i == j {
                continue;
            }
            let evidence: Vec<Evidence> = (1..=window)
                .filter(|&t| irf.significant(t, i, j))
                .map(|t| Evidence {
                    t,
                    theta: irf.theta[t][(i, j)],
                    lower: irf.lower[t][(i, j)],
                    upper: irf.upper[t][(i, j)],
                })
                .collect();
            let Some(first) = evidence.first() else { continue };
            let positive = first.lower > 0.0;
            let sign_mixed = evidence.iter().any(|e| (e.lower > 0.0) != positive);
            edges.push(Edge {
                source: irf.members[j].clone(),
                target: irf.members[i].clone(),
                sign: if positive { Sign::Mutualism } else { Sign::Competition },
                first_t: first.t,
                evidence,
                sign_mixed,
            });
        }
    }
    Ok(edges)
}

/// How the sums over off-diagonal entries are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MetricNormalizer {
    /// `1 / (|M| - 1)`.
    #[default]
    Rows,
    /// `1 / (|M| (|M| - 1))`, the mean over ordered pairs.
    OrderedPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    /// Average ecological interaction (signed).
    pub mean_interaction: f64,
    /// Interaction strength (absolute).
    pub strength: f64,
}

pub fn cluster_metrics(phi: &DMatrix<f64>, normalizer: MetricNormalizer) -> Result<ClusterMetrics> {
    let m = phi.nrows();
    if m < 2 || phi.ncols() != m {
        return Err(Error::InvalidInput(format!(
            "interaction metrics need a square matrix of size at least 2, got {}x{}",
            phi.nrows(),
            phi.ncols()
        )));
    }
    let (mut sum, mut abs) = (0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sum += phi[(i, j)];
                abs += phi[(i, j)].abs();
            }
        }
    }
    let denom = match normalizer {
        MetricNormalizer::Rows => (m - 1) as f64,
        MetricNormalizer::OrderedPairs => (m * (m - 1)) as f64,
    };
    Ok(ClusterMetrics {
        mean_interaction: sum / denom,
        strength: abs / denom,
    })
}

/// Network plus metrics for one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcoNetwork {
    pub cluster: String,
    pub members: Vec<String>,
    pub edges: Vec<Edge>,
    pub metrics: ClusterMetrics,
    pub spectral_radius: f64,
    pub unstable: bool,
}

impl EcoNetwork {
    pub fn build(
        cluster: impl Into<String>,
        fit: &VarFit,
        irf: &IrfResult,
        window: usize,
        normalizer: MetricNormalizer,
    ) -> Result<Self> {
        Ok(EcoNetwork {
            cluster: cluster.into(),
            members: fit.members.clone(),
            edges: extract_edges(irf, window)?,
            metrics: cluster_metrics(&fit.phi, normalizer)?,
            spectral_radius: fit.spectral_radius,
            unstable: fit.unstable,
        })
    }

    pub fn count(&self, sign: Sign) -> usize {
        self.edges.iter().filter(|e| e.sign == sign).count()
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "digraph {} {{", dot_id(&self.cluster));
        let _ = writeln!(
            s,
            "  graph [mean_interaction={}, strength={}];",
            self.metrics.mean_interaction, self.metrics.strength
        );
        for m in &self.members {
            let _ = writeln!(s, "  {};", dot_id(m));
        }
        for e in &self.edges {
            let color = match e.sign {
                Sign::Mutualism => "forestgreen",
                Sign::Competition => "firebrick",
            };
            let _ = writeln!(
                s,
                "  {} -> {} [sign={}, color={}, first_t={}, horizons={}, sign_mixed={}];",
                dot_id(&e.source),
                dot_id(&e.target),
                e.sign.as_str(),
                color,
                e.first_t,
                dot_id(&horizons(e)),
                e.sign_mixed
            );
        }
        s.push_str("}\n");
        s
    }

    pub fn to_graphml(&self) -> String {
        let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        s.push_str("<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n");
        for (id, target, ty) in [
            ("mean_interaction", "graph", "double"),
            ("strength", "graph", "double"),
            ("sign", "edge", "string"),
            ("first_t", "edge", "int"),
            ("theta", "edge", "double"),
            ("horizons", "edge", "string"),
            ("sign_mixed", "edge", "boolean"),
        ] {
            let _ = writeln!(s, "  <key id=\"{id}\" for=\"{target}\" attr.name=\"{id}\" attr.type=\"{ty}\"/>");
        }
        let _ = writeln!(s, "  <graph id=\"{}\" edgedefault=\"directed\">", xml_escape(&self.cluster));
        let _ = writeln!(s, "    <data key=\"mean_interaction\">{}</data>", self.metrics.mean_interaction);
        let _ = writeln!(s, "    <data key=\"strength\">{}</data>", self.metrics.strength);
        for m in &self.members {
            let _ = writeln!(s, "    <node id=\"{}\"/>", xml_escape(m));
        }
        for e in &self.edges {
            let _ = writeln!(
                s,
                "    <edge source=\"{}\" target=\"{}\">",
                xml_escape(&e.source),
                xml_escape(&e.target)
            );
            let _ = writeln!(s, "      <data key=\"sign\">{}</data>", e.sign.as_str());
            let _ = writeln!(s, "      <data key=\"first_t\">{}</data>", e.first_t);
            let _ = writeln!(s, "      <data key=\"theta\">{}</data>", e.evidence[0].theta);
            let _ = writeln!(s, "      <data key=\"horizons\">{}</data>", horizons(e));
            let _ = writeln!(s, "      <data key=\"sign_mixed\">{}</data>", e.sign_mixed);
            s.push_str("    </edge>\n");
        }
        s.push_str("  </graph>\n</graphml>\n");
        s
    }
}

fn horizons(e: &Edge) -> String {
    e.evidence.iter().map(|v| v.t.to_string()).collect::<Vec<_>>().join(",")
}

fn dot_id(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub mean_interaction_lo: f64,
    pub mean_interaction_hi: f64,
    pub strength_lo: f64,
    pub strength_hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypologyReport {
    pub n_clusters: usize,
    pub mutualistic_fraction: f64,
    pub mean_of_mean_interaction: f64,
    /// One-sample t statistic of the mean interactions against 0.
    pub t_statistic: Option<f64>,
    pub p_value: Option<f64>,
    /// Spearman correlation of mean interaction with strength.
    pub spearman: Option<f64>,
    pub histogram: Vec<HistogramBin>,
}

pub const HISTOGRAM_BINS: usize = 20;

pub fn typology_report(metrics: &[ClusterMetrics]) -> Result<TypologyReport> {
    let n = metrics.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("typology needs at least 2 clusters, got {n}")));
    }
    let m: Vec<f64> = metrics.iter().map(|c| c.mean_interaction).collect();
    let k: Vec<f64> = metrics.iter().map(|c| c.strength).collect();
    let mean = m.iter().sum::<f64>() / n as f64;
    let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let (t_statistic, p_value) = if m.iter().any(|&v| v != m[0]) {
        let t = mean / (var / n as f64).sqrt();
        let p = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .ok()
            .map(|d| 2.0 * (1.0 - d.cdf(t.abs())));
        (Some(t), p)
    } else {
        (None, None)
    };
    Ok(TypologyReport {
        n_clusters: n,
        mutualistic_fraction: m.iter().filter(|&&v| v > 0.0).count() as f64 / n as f64,
        mean_of_mean_interaction: mean,
        t_statistic,
        p_value,
        spearman: spearman(&m, &k),
        histogram: histogram_2d(&m, &k, HISTOGRAM_BINS),
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

fn histogram_2d(x: &[f64], y: &[f64], bins: usize) -> Vec<HistogramBin> {
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) }
    };
    let ((xl, xh), (yl, yh)) = (range(x), range(y));
    let bin = |v: f64, lo: f64, hi: f64| (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
    let mut counts = vec![0usize; bins * bins];
    for (&a, &b) in x.iter().zip(y) {
        counts[bin(a, xl, xh) * bins + bin(b, yl, yh)] += 1;
    }
    let edge = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / bins as f64;
    (0..bins * bins)
        .map(|c| {
            let (i, j) = (c / bins, c % bins);
            HistogramBin {
                mean_interaction_lo: edge(xl, xh, i),
                mean_interaction_hi: edge(xl, xh, i + 1),
                strength_lo: edge(yl, yh, j),
                strength_hi: edge(yl, yh, j + 1),
                count: counts[c],
            }
        })
        .collect()
}

pub fn write_histogram_csv(path: &Path, report: &TypologyReport) -> Result<()> {
    let mut w = crate::persist::csv_writer(path)?;
    for b in &report.histogram {
        w.serialize(b)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One metrics row per fitted cluster.
pub fn write_metrics_csv(path: &Path, networks: &[EcoNetwork]) -> Result<()> {
    let mut w = crate::persist::csv_writer(path)?;
    w.write_record([
        "cluster",
        "members",
        "mean_interaction",
        "strength",
        "mutualism_edges",
        "competition_edges",
        "spectral_radius",
        "unstable",
    ])?;
    for n in networks {
        w.write_record([
            n.cluster.clone(),
            n.members.len().to_string(),
            n.metrics.mean_interaction.to_string(),
            n.metrics.strength.to_string(),
            n.count(Sign::Mutualism).to_string(),
            n.count(Sign::Competition).to_string(),
            n.spectral_radius.to_string(),
            n.unstable.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
