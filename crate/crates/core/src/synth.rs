//! Synthetic panels and event corpora with planted VAR structure.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{EventRecord, GroupPanel};
use crate::irf::{cluster_metrics, ClusterMetrics, MetricNormalizer};
use crate::linalg::{row_major, spectral_radius};

const WEEK_SECS: i64 = 7 * 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub name: String,
    /// Defaults to `{name}_{j:02}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<String>>,
    #[serde(with = "row_major")]
    pub phi: DMatrix<f64>,
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
    pub creation_weeks: Vec<usize>,
}

impl ClusterSpec {
    /// `n` members sharing one diagonal and one off-diagonal value.
    pub fn uniform(name: &str, n: usize, diag: f64, off: f64, b0: f64, b1: f64) -> Self {
        ClusterSpec {
            name: name.to_string(),
            members: None,
            phi: DMatrix::from_fn(n, n, |i, j| if i == j { diag } else { off }),
            b0: vec![b0; n],
            b1: vec![b1; n],
            creation_weeks: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.b0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b0.is_empty()
    }

    pub fn member_names(&self) -> Vec<String> {
        self.members
            .clone()
            .unwrap_or_else(|| (0..self.len()).map(|j| format!("{}_{j:02}", self.name)).collect())
    }
}

/// User pools for event generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    /// Users shared by all groups of a cluster.
    pub cluster_pool_size: usize,
    /// Users private to each group.
    pub group_pool_size: usize,
    /// Chance that a draw comes from the cluster pool rather than the group's own.
    pub sharing_rate: f64,
    #[serde(default)]
    pub global_pool_size: usize,
    /// Chance that a draw comes from the corpus-wide pool.
    #[serde(default)]
    pub global_rate: f64,
    /// Unix seconds of week 0; should fall on the panel's week anchor.
    pub start_ts: i64,
    /// Each active user posts `1 + U{0..=max_extra_events}` times that week.
    #[serde(default)]
    pub max_extra_events: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub t_total: usize,
    pub noise_sd: f64,
    pub clusters: Vec<ClusterSpec>,
    #[serde(default)]
    pub allow_unstable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<EventSpec>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.t_total < 2 {
            return bad(format!("t_total must be at least 2, got {}", self.t_total));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd must be finite and >= 0, got {}", self.noise_sd));
        }
        if self.clusters.is_empty() {
            return bad("at least one cluster is required".into());
        }
        let mut names = BTreeSet::new();
        for c in &self.clusters {
            let n = c.len();
            if n == 0
                || c.phi.shape() != (n, n)
                || c.b1.len() != n
                || c.creation_weeks.len() != n
                || c.members.as_ref().is_some_and(|m| m.len() != n)
            {
                return bad(format!("cluster {} has inconsistent dimensions", c.name));
            }
            if c.creation_weeks.iter().any(|&w| w >= self.t_total) {
                return bad(format!("cluster {} has a creation week past t_total", c.name));
            }
            let all = c.phi.iter().chain(&c.b0).chain(&c.b1);
            if all.into_iter().any(|v| !v.is_finite()) {
                return bad(format!("cluster {} has non-finite parameters", c.name));
            }
            let rho = spectral_radius(&c.phi);
            if rho >= 1.0 && !self.allow_unstable {
                return bad(format!(
                    "cluster {} has spectral radius {rho:.4} >= 1; set allow_unstable to permit it",
                    c.name
                ));
            }
            for g in c.member_names() {
                if !names.insert(g.clone()) {
                    return bad(format!("group name {g} is used twice"));
                }
            }
        }
        if let Some(e) = &self.events {
            let rate = |r: f64| (0.0..=1.0).contains(&r);
            if !rate(e.sharing_rate) || !rate(e.global_rate) {
                return bad("sharing_rate and global_rate must lie in [0, 1]".into());
            }
            if e.global_rate > 0.0 && e.global_pool_size == 0 {
                return bad("global_rate > 0 needs a nonempty global pool".into());
            }
            if e.cluster_pool_size + e.group_pool_size == 0 {
                return bad("cluster and group pools cannot both be empty".into());
            }
        }
        Ok(())
    }

    pub fn groups(&self) -> Vec<String> {
        self.clusters.iter().flat_map(|c| c.member_names()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCluster {
    pub name: String,
    pub members: Vec<String>,
    #[serde(with = "row_major")]
    pub phi: DMatrix<f64>,
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
    pub creation_weeks: Vec<usize>,
    pub metrics: ClusterMetrics,
}

/// Ground truth written next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub seed: u64,
    pub t_total: usize,
    pub noise_sd: f64,
    pub clusters: Vec<PlantedCluster>,
    /// Group to planted cluster name.
    pub membership: BTreeMap<String, String>,
}

impl PlantedTruth {
    fn from_spec(spec: &SynthSpec) -> Self {
        let mut membership = BTreeMap::new();
        let clusters = spec
            .clusters
            .iter()
            .map(|c| {
                let members = c.member_names();
                for m in &members {
                    membership.insert(m.clone(), c.name.clone());
                }
                let metrics = cluster_metrics(&c.phi, MetricNormalizer::Rows).unwrap_or(ClusterMetrics {
                    mean_interaction: 0.0,
                    strength: 0.0,
                });
                PlantedCluster {
                    name: c.name.clone(),
                    members,
                    phi: c.phi.clone(),
                    b0: c.b0.clone(),
                    b1: c.b1.clone(),
                    creation_weeks: c.creation_weeks.clone(),
                    metrics,
                }
            })
            .collect();
        PlantedTruth {
            seed: spec.seed,
            t_total: spec.t_total,
            noise_sd: spec.noise_sd,
            clusters,
            membership,
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Runs each cluster's VAR forward; zero before creation, floored at 0.
pub fn simulate_panel(spec: &SynthSpec) -> Result<(GroupPanel, PlantedTruth)> {
    spec.validate()?;
    let t_total = spec.t_total;
    let mut sizes = Vec::new();
    for (k, c) in spec.clusters.iter().enumerate() {
        let mut rng = stream(spec.seed, 2 * k as u64);
        let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
        let n = c.len();
        let mut y = vec![vec![0.0; t_total]; n];
        for t in 0..t_total {
            for i in 0..n {
                if t < c.creation_weeks[i] {
                    continue;
                }
                let lag: f64 = if t == 0 {
                    0.0
                } else {
                    (0..n).map(|j| c.phi[(i, j)] * y[j][t - 1]).sum()
                };
                let e = if spec.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                y[i][t] = (c.b0[i] + c.b1[i] * t as f64 + lag + e).max(0.0);
            }
        }
        sizes.extend(y);
    }
    let panel = GroupPanel::from_sizes(spec.groups(), sizes)?;
    Ok((panel, PlantedTruth::from_spec(spec)))
}

/// Half-up rounding of `exp(y) - 1`.
pub fn count_from_log(y: f64) -> u64 {
    (y.exp() - 1.0 + 0.5).floor().max(0.0) as u64
}

#[derive(Debug, Clone)]
pub struct SimulatedCorpus {
    pub events: Vec<EventRecord>,
    /// Planted distinct-user counts, `counts[group][week]`.
    pub counts: Vec<Vec<u64>>,
    /// The log-size panel that drove the counts.
    pub panel: GroupPanel,
    pub truth: PlantedTruth,
}

/// Event stream whose weekly distinct-user counts match the simulated panel.
pub fn simulate_events(spec: &SynthSpec) -> Result<SimulatedCorpus> {
    let ev = spec
        .events
        .as_ref()
        .ok_or_else(|| Error::Config("event generation needs an `events` section".into()))?;
    let (panel, truth) = simulate_panel(spec)?;
    let counts: Vec<Vec<u64>> = panel.sizes.iter().map(|r| r.iter().map(|&y| count_from_log(y)).collect()).collect();
    let capacity = (ev.cluster_pool_size + ev.group_pool_size + ev.global_pool_size) as u64;
    if let Some(max) = counts.iter().flatten().max().filter(|&&m| m > capacity) {
        return Err(Error::Config(format!(
            "a group-week needs {max} distinct users but the pools only hold {capacity}"
        )));
    }

    let mut events = Vec::new();
    let mut row = 0;
    for (k, c) in spec.clusters.iter().enumerate() {
        let mut rng = stream(spec.seed, 2 * k as u64 + 1);
        for g in c.member_names() {
            for (w, &count) in counts[row].iter().enumerate() {
                let users = draw_users(&mut rng, ev, &c.name, &g, count as usize);
                let week_start = ev.start_ts + w as i64 * WEEK_SECS;
                for u in users {
                    let n = 1 + rng.random_range(0..=ev.max_extra_events);
                    for _ in 0..n {
                        events.push(EventRecord {
                            user: u.clone(),
                            group: g.clone(),
                            ts: week_start + rng.random_range(0..WEEK_SECS),
                        });
                    }
                }
            }
            row += 1;
        }
    }
    events.sort_by(|a, b| (a.ts, &a.group, &a.user).cmp(&(b.ts, &b.group, &b.user)));
    Ok(SimulatedCorpus {
        events,
        counts,
        panel,
        truth,
    })
}

/// `count` distinct users split across global, cluster and private pools;
/// a pool that runs short spills into the next one.
fn draw_users(rng: &mut ChaCha8Rng, ev: &EventSpec, cluster: &str, group: &str, count: usize) -> Vec<String> {
    let (mut global, mut shared) = (0usize, 0usize);
    for _ in 0..count {
        if ev.global_rate > 0.0 && rng.random::<f64>() < ev.global_rate {
            global += 1;
        } else if rng.random::<f64>() < ev.sharing_rate {
            shared += 1;
        }
    }
    let global = global.min(ev.global_pool_size);
    let shared = shared.min(ev.cluster_pool_size);
    let mut own = count - global - shared;
    let mut shared = shared;
    if own > ev.group_pool_size {
        shared += own - ev.group_pool_size;
        own = ev.group_pool_size;
    }
    let mut global = global;
    if shared > ev.cluster_pool_size {
        global += shared - ev.cluster_pool_size;
        shared = ev.cluster_pool_size;
    }
    let mut out = Vec::with_capacity(count);
    let mut pick = |pool: usize, n: usize, name: &dyn Fn(usize) -> String| {
        if n > 0 {
            out.extend(sample(rng, pool, n).into_iter().map(name));
        }
    };
    pick(ev.global_pool_size, global, &|i| format!("global_u{i}"));
    pick(ev.cluster_pool_size, shared, &|i| format!("{cluster}_u{i}"));
    pick(ev.group_pool_size, own, &|i| format!("{group}_p{i}"));
    out
}
