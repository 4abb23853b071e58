//! Grouping of overlap embeddings into ecological communities.
//!
//! Every backend works on cosine geometry: embedded columns are scaled to unit
//! length and the distance between groups is `1 - cosine similarity`. Grid
//! candidates are scored by mean silhouette over non-isolates and filtered by
//! isolate and cluster-count limits.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label given to groups that belong to no cluster.
pub const ISOLATE: i64 = -1;

pub const DEFAULT_MAX_ISOLATES: usize = 5_000;
pub const DEFAULT_MIN_CLUSTERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Kmeans,
    Dbscan,
    Hdbscan,
    AffinityPropagation,
    /// Labels imported from a file.
    Imported,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Algorithm::Kmeans => "kmeans",
            Algorithm::Dbscan => "dbscan",
            Algorithm::Hdbscan => "hdbscan",
            Algorithm::AffinityPropagation => "affinity_propagation",
            Algorithm::Imported => "imported",
        };
        f.write_str(s)
    }
}

/// One backend configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum ClusterParams {
    Kmeans { n_clusters: usize },
    Dbscan { eps: f64, min_samples: usize },
    Hdbscan { min_cluster_size: usize, min_samples: usize },
    AffinityPropagation { damping: f64, preference: Option<f64> },
    Imported,
}

impl ClusterParams {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            ClusterParams::Kmeans { .. } => Algorithm::Kmeans,
            ClusterParams::Dbscan { .. } => Algorithm::Dbscan,
            ClusterParams::Hdbscan { .. } => Algorithm::Hdbscan,
            ClusterParams::AffinityPropagation { .. } => Algorithm::AffinityPropagation,
            ClusterParams::Imported => Algorithm::Imported,
        }
    }

    /// Hyperparameters as a flat key-value map.
    pub fn hyperparameters(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        match self {
            ClusterParams::Kmeans { n_clusters } => {
                m.insert("n_clusters".into(), n_clusters.to_string());
            }
            ClusterParams::Dbscan { eps, min_samples } => {
                m.insert("eps".into(), eps.to_string());
                m.insert("min_samples".into(), min_samples.to_string());
            }
            ClusterParams::Hdbscan {
                min_cluster_size,
                min_samples,
            } => {
                m.insert("min_cluster_size".into(), min_cluster_size.to_string());
                m.insert("min_samples".into(), min_samples.to_string());
            }
            ClusterParams::AffinityPropagation { damping, preference } => {
                m.insert("damping".into(), damping.to_string());
                m.insert(
                    "preference".into(),
                    preference.map_or("median".to_string(), |p| p.to_string()),
                );
            }
            ClusterParams::Imported => {}
        }
        m
    }

    fn describe(&self) -> String {
        let hp: Vec<String> = self
            .hyperparameters()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        hp.join(";")
    }
}

/// A scored partition of groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// One label per group; [`ISOLATE`] for isolates.
    pub labels: Vec<i64>,
    pub params: ClusterParams,
    pub k_dims: usize,
    /// `None` when fewer than two clusters exist among non-isolates.
    pub silhouette: Option<f64>,
    pub n_clusters: usize,
    pub n_isolates: usize,
}

impl ClusterAssignment {
    pub fn from_labels(labels: Vec<i64>, params: ClusterParams, k_dims: usize, unit: &DMatrix<f64>) -> Self {
        let labels = canonical_labels(&labels);
        let n_clusters = count_clusters(&labels);
        let n_isolates = labels.iter().filter(|&&l| l < 0).count();
        let silhouette = silhouette_unit(unit, &labels).ok();
        ClusterAssignment {
            labels,
            params,
            k_dims,
            silhouette,
            n_clusters,
            n_isolates,
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        self.params.algorithm()
    }

    /// Group indices per cluster id, isolates excluded.
    pub fn members(&self) -> BTreeMap<i64, Vec<usize>> {
        let mut m: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= 0 {
                m.entry(l).or_default().push(i);
            }
        }
        m
    }
}

fn count_clusters(labels: &[i64]) -> usize {
    let mut seen: Vec<i64> = labels.iter().copied().filter(|&l| l >= 0).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Renumbers non-negative labels 0.. in order of first appearance.
pub fn canonical_labels(labels: &[i64]) -> Vec<i64> {
    let mut map: HashMap<i64, i64> = HashMap::new();
    labels
        .iter()
        .map(|&l| {
            if l < 0 {
                ISOLATE
            } else {
                let next = map.len() as i64;
                *map.entry(l).or_insert(next)
            }
        })
        .collect()
}

/// Scales every column to unit length; zero columns stay zero.
pub fn unit_columns(embedding: &DMatrix<f64>) -> DMatrix<f64> {
    let mut u = embedding.clone();
    for mut c in u.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c.unscale_mut(n);
        }
    }
    u
}

fn cosine_distances(unit: &DMatrix<f64>) -> DMatrix<f64> {
    let g = unit.transpose() * unit;
    let n = g.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (1.0 - 0.5 * (g[(i, j)] + g[(j, i)])).max(0.0)
        }
    })
}

/// Mean silhouette over non-isolates with cosine distance.
pub fn silhouette(embedding: &DMatrix<f64>, labels: &[i64]) -> Result<f64> {
    silhouette_unit(&unit_columns(embedding), labels)
}

/// Silhouette on pre-normalized columns.
///
/// Mean distance from a point to a cluster is `1 - u . S / |C|` with `S` the
/// sum of the cluster's unit vectors, so no pairwise matrix is formed.
fn silhouette_unit(unit: &DMatrix<f64>, labels: &[i64]) -> Result<f64> {
    if labels.len() != unit.ncols() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} points",
            labels.len(),
            unit.ncols()
        )));
    }
    let mut clusters: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            clusters.entry(l).or_default().push(i);
        }
    }
    if clusters.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "silhouette needs at least 2 clusters, found {}",
            clusters.len()
        )));
    }
    let ids: Vec<i64> = clusters.keys().copied().collect();
    let sums: Vec<nalgebra::DVector<f64>> = clusters
        .values()
        .map(|m| m.iter().fold(nalgebra::DVector::zeros(unit.nrows()), |acc, &i| acc + unit.column(i)))
        .collect();
    let pos: HashMap<i64, usize> = ids.iter().enumerate().map(|(p, &l)| (l, p)).collect();

    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if l < 0 {
            continue;
        }
        count += 1;
        let own = pos[&l];
        let size = clusters[&l].len();
        if size == 1 {
            continue;
        }
        let u = unit.column(i);
        let self_dot = u.dot(&u);
        // distance to self is 0, so subtract its (1 - self_dot) contribution
        let a = ((size as f64) - (u.dot(&sums[own]) - self_dot) - 1.0) / (size - 1) as f64;
        let a = a.max(0.0);
        let b = (0..ids.len())
            .filter(|&p| p != own)
            .map(|p| {
                let n = clusters[&ids[p]].len() as f64;
                (1.0 - u.dot(&sums[p]) / n).max(0.0)
            })
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / count as f64)
}

/// k-means on unit vectors with seeded k-means++ initialization.
pub fn kmeans(unit: &DMatrix<f64>, k: usize, seed: u64) -> Result<Vec<i64>> {
    let n = unit.ncols();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("kmeans needs 1 <= K <= {n}, got {k}")));
    }
    const RESTARTS: u64 = 4;
    let mut best: Option<(f64, Vec<i64>)> = None;
    for r in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r);
        let (inertia, labels) = lloyd(unit, k, &mut rng);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    Ok(best.unwrap().1)
}

fn sq_dist(unit: &DMatrix<f64>, i: usize, c: &nalgebra::DVector<f64>) -> f64 {
    (unit.column(i) - c).norm_squared()
}

fn lloyd(unit: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<i64>) {
    let n = unit.ncols();
    let dim = unit.nrows();
    let mut centers: Vec<nalgebra::DVector<f64>> = Vec::with_capacity(k);
    centers.push(unit.column(rng.random_range(0..n)).into_owned());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(unit, i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(unit.column(pick).into_owned());
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(unit, i, centers.last().unwrap()));
        }
    }

    let mut labels = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    for _ in 0..300 {
        let mut new_inertia = 0.0;
        for i in 0..n {
            let (best, dist) = (0..k)
                .map(|c| (c, sq_dist(unit, i, &centers[c])))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            labels[i] = best;
            new_inertia += dist;
        }
        let mut sums = vec![nalgebra::DVector::<f64>::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            sums[labels[i]] += unit.column(i);
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(unit, a, &centers[labels[a]]).total_cmp(&sq_dist(unit, b, &centers[labels[b]]))
                    })
                    .unwrap();
                centers[c] = unit.column(far).into_owned();
            } else {
                centers[c] = &sums[c] / counts[c] as f64;
            }
        }
        let converged = inertia - new_inertia <= 1e-12 * inertia.abs().max(1.0);
        inertia = new_inertia;
        if converged {
            break;
        }
    }
    (inertia, labels.into_iter().map(|l| l as i64).collect())
}

/// DBSCAN with cosine distance; unreachable points are isolates.
pub fn dbscan(dist: &DMatrix<f64>, eps: f64, min_samples: usize) -> Vec<i64> {
    let n = dist.nrows();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist[(i, j)] <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_samples).collect();
    let mut labels = vec![ISOLATE; n];
    let mut next = 0i64;
    for start in 0..n {
        if !core[start] || labels[start] != ISOLATE {
            continue;
        }
        let mut stack = vec![start];
        labels[start] = next;
        while let Some(p) = stack.pop() {
            if !core[p] {
                continue;
            }
            for &q in &neighbors[p] {
                if labels[q] == ISOLATE {
                    labels[q] = next;
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    labels
}

/// HDBSCAN with excess-of-mass cluster selection (root never selected).
pub fn hdbscan(dist: &DMatrix<f64>, min_cluster_size: usize, min_samples: usize) -> Vec<i64> {
    let n = dist.nrows();
    if n < 2 || min_cluster_size < 2 {
        return vec![ISOLATE; n];
    }
    let ms = min_samples.clamp(1, n);
    let core: Vec<f64> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = dist.row(i).iter().copied().collect();
            row.sort_by(f64::total_cmp);
            row[ms - 1]
        })
        .collect();
    let mreach = |i: usize, j: usize| dist[(i, j)].max(core[i]).max(core[j]);

    // Prim's MST over the mutual-reachability graph.
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        for j in 0..n {
            if !in_tree[j] {
                let d = mreach(current, j);
                if d < best[j] {
                    best[j] = d;
                    from[j] = current;
                }
            }
        }
        let next = (0..n)
            .filter(|&j| !in_tree[j])
            .min_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)))
            .unwrap();
        edges.push((best[next], from[next], next));
        in_tree[next] = true;
        current = next;
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));

    // Single-linkage dendrogram: node ids >= n are merges.
    let mut uf_parent: Vec<usize> = (0..2 * n - 1).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut children: Vec<(usize, usize, f64)> = Vec::with_capacity(n - 1);
    let mut size = vec![1usize; 2 * n - 1];
    for (k, &(d, a, b)) in edges.iter().enumerate() {
        let ra = find(&mut uf_parent, a);
        let rb = find(&mut uf_parent, b);
        let node = n + k;
        uf_parent[ra] = node;
        uf_parent[rb] = node;
        size[node] = size[ra] + size[rb];
        children.push((ra, rb, d));
    }
    let root = 2 * n - 2;
    let lambda_of = |d: f64| 1.0 / d.max(1e-12);

    // Condense: cluster 0 is the root.
    let mut cl_birth = vec![0.0f64];
    let mut cl_parent: Vec<Option<usize>> = vec![None];
    let mut cl_stability = vec![0.0f64];
    let mut cl_children: Vec<Vec<usize>> = vec![Vec::new()];
    let mut point_cluster = vec![0usize; n];
    let mut stack = vec![(root, 0usize)];
    let leaves = |node: usize, out: &mut Vec<usize>| {
        let mut s = vec![node];
        while let Some(x) = s.pop() {
            if x < n {
                out.push(x);
            } else {
                let (l, r, _) = children[x - n];
                s.push(l);
                s.push(r);
            }
        }
    };
    while let Some((node, cl)) = stack.pop() {
        if node < n {
            point_cluster[node] = cl;
            continue;
        }
        let (l, r, d) = children[node - n];
        let lam = lambda_of(d);
        let big_l = size[l] >= min_cluster_size;
        let big_r = size[r] >= min_cluster_size;
        if big_l && big_r {
            for child in [l, r] {
                let id = cl_birth.len();
                cl_birth.push(lam);
                cl_parent.push(Some(cl));
                cl_stability.push(0.0);
                cl_children.push(Vec::new());
                cl_children[cl].push(id);
                cl_stability[cl] += size[child] as f64 * (lam - cl_birth[cl]);
                stack.push((child, id));
            }
        } else {
            for (child, big) in [(l, big_l), (r, big_r)] {
                if big {
                    stack.push((child, cl));
                } else {
                    let mut pts = Vec::new();
                    leaves(child, &mut pts);
                    cl_stability[cl] += pts.len() as f64 * (lam - cl_birth[cl]);
                    for p in pts {
                        point_cluster[p] = cl;
                    }
                }
            }
        }
    }

    // Excess of mass, children before parents (ids increase downward).
    let m = cl_birth.len();
    let mut selected = vec![false; m];
    let mut subtree = cl_stability.clone();
    for c in (1..m).rev() {
        if cl_children[c].is_empty() {
            selected[c] = true;
            continue;
        }
        let child_sum: f64 = cl_children[c].iter().map(|&k| subtree[k]).sum();
        if child_sum > cl_stability[c] {
            subtree[c] = child_sum;
        } else {
            selected[c] = true;
            let mut s = cl_children[c].clone();
            while let Some(k) = s.pop() {
                selected[k] = false;
                s.extend(cl_children[k].iter().copied());
            }
        }
    }
    let mut out = vec![ISOLATE; n];
    for p in 0..n {
        let mut c = Some(point_cluster[p]);
        while let Some(cc) = c {
            if selected[cc] {
                out[p] = cc as i64;
                break;
            }
            c = cl_parent[cc];
        }
    }
    canonical_labels(&out)
}

/// Affinity propagation on negative squared euclidean distance between unit
/// vectors. Non-converged or exemplar-free runs return all isolates.
pub fn affinity_propagation(unit: &DMatrix<f64>, damping: f64, preference: Option<f64>) -> Vec<i64> {
    let n = unit.ncols();
    if n == 0 {
        return Vec::new();
    }
    let g = unit.transpose() * unit;
    let mut s = DMatrix::from_fn(n, n, |i, j| -(g[(i, i)] + g[(j, j)] - 2.0 * g[(i, j)]).max(0.0));
    let pref = preference.unwrap_or_else(|| {
        let mut off: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s[(i, j)])
            .collect();
        if off.is_empty() {
            return 0.0;
        }
        off.sort_by(f64::total_cmp);
        crate::linalg::quantile_sorted(&off, 0.5)
    });
    for i in 0..n {
        s[(i, i)] = pref;
    }
    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut last: Vec<bool> = vec![false; n];
    let mut stable = 0;
    let mut converged = false;
    for _ in 0..500 {
        for i in 0..n {
            let (mut first, mut second, mut arg) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for k in 0..n {
                let v = a[(i, k)] + s[(i, k)];
                if v > first {
                    second = first;
                    first = v;
                    arg = k;
                } else if v > second {
                    second = v;
                }
            }
            for k in 0..n {
                let other = if k == arg { second } else { first };
                r[(i, k)] = damping * r[(i, k)] + (1.0 - damping) * (s[(i, k)] - other);
            }
        }
        for k in 0..n {
            let pos_sum: f64 = (0..n).filter(|&i| i != k).map(|i| r[(i, k)].max(0.0)).sum();
            for i in 0..n {
                let new = if i == k {
                    pos_sum
                } else {
                    (r[(k, k)] + pos_sum - r[(i, k)].max(0.0)).min(0.0)
                };
                a[(i, k)] = damping * a[(i, k)] + (1.0 - damping) * new;
            }
        }
        let ex: Vec<bool> = (0..n).map(|k| a[(k, k)] + r[(k, k)] > 0.0).collect();
        if ex == last {
            stable += 1;
            if stable >= 15 && ex.iter().any(|&e| e) {
                converged = true;
                break;
            }
        } else {
            stable = 0;
            last = ex;
        }
    }
    let exemplars: Vec<usize> = (0..n).filter(|&k| last[k]).collect();
    if !converged || exemplars.is_empty() {
        return vec![ISOLATE; n];
    }
    let labels: Vec<i64> = (0..n)
        .map(|i| {
            if let Some(p) = exemplars.iter().position(|&e| e == i) {
                return p as i64;
            }
            exemplars
                .iter()
                .enumerate()
                .max_by(|x, y| s[(i, *x.1)].total_cmp(&s[(i, *y.1)]).then(y.0.cmp(&x.0)))
                .map(|(p, _)| p as i64)
                .unwrap()
        })
        .collect();
    canonical_labels(&labels)
}

/// Runs one backend configuration.
pub fn cluster_once(embedding: &DMatrix<f64>, params: &ClusterParams, k_dims: usize, seed: u64) -> Result<ClusterAssignment> {
    let unit = unit_columns(embedding);
    let labels = match params {
        ClusterParams::Kmeans { n_clusters } => kmeans(&unit, *n_clusters, seed)?,
        ClusterParams::Dbscan { eps, min_samples } => dbscan(&cosine_distances(&unit), *eps, *min_samples),
        ClusterParams::Hdbscan {
            min_cluster_size,
            min_samples,
        } => hdbscan(&cosine_distances(&unit), *min_cluster_size, *min_samples),
        ClusterParams::AffinityPropagation { damping, preference } => {
            affinity_propagation(&unit, *damping, *preference)
        }
        ClusterParams::Imported => {
            return Err(Error::InvalidInput("imported labels are not a clustering backend".into()))
        }
    };
    Ok(ClusterAssignment::from_labels(labels, params.clone(), k_dims, &unit))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmeansGrid {
    pub n_clusters: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbscanGrid {
    pub eps: Vec<f64>,
    pub min_samples: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HdbscanGrid {
    pub min_cluster_size: Vec<usize>,
    pub min_samples: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffinityGrid {
    pub damping: Vec<f64>,
    /// `null` entries use the median similarity.
    #[serde(default)]
    pub preference: Vec<Option<f64>>,
}

/// Search space for clustering selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub kmeans: Option<KmeansGrid>,
    #[serde(default)]
    pub dbscan: Option<DbscanGrid>,
    #[serde(default)]
    pub hdbscan: Option<HdbscanGrid>,
    #[serde(default)]
    pub affinity_propagation: Option<AffinityGrid>,
    pub k_dims: Vec<usize>,
    #[serde(default = "default_max_isolates")]
    pub max_isolates: usize,
    #[serde(default = "default_min_clusters")]
    pub min_clusters: usize,
}

fn default_max_isolates() -> usize {
    DEFAULT_MAX_ISOLATES
}

fn default_min_clusters() -> usize {
    DEFAULT_MIN_CLUSTERS
}

impl GridSpec {
    pub fn kmeans_only(n_clusters: Vec<usize>, k_dims: Vec<usize>) -> Self {
        GridSpec {
            kmeans: Some(KmeansGrid { n_clusters }),
            dbscan: None,
            hdbscan: None,
            affinity_propagation: None,
            k_dims,
            max_isolates: DEFAULT_MAX_ISOLATES,
            min_clusters: DEFAULT_MIN_CLUSTERS,
        }
    }

    /// Every backend configuration in a fixed order.
    pub fn configurations(&self) -> Vec<ClusterParams> {
        let mut out = Vec::new();
        if let Some(g) = &self.kmeans {
            out.extend(g.n_clusters.iter().map(|&n_clusters| ClusterParams::Kmeans { n_clusters }));
        }
        if let Some(g) = &self.dbscan {
            for &eps in &g.eps {
                for &min_samples in &g.min_samples {
                    out.push(ClusterParams::Dbscan { eps, min_samples });
                }
            }
        }
        if let Some(g) = &self.hdbscan {
            for &min_cluster_size in &g.min_cluster_size {
                for &min_samples in &g.min_samples {
                    out.push(ClusterParams::Hdbscan {
                        min_cluster_size,
                        min_samples,
                    });
                }
            }
        }
        if let Some(g) = &self.affinity_propagation {
            let prefs = if g.preference.is_empty() {
                vec![None]
            } else {
                g.preference.clone()
            };
            for &damping in &g.damping {
                for &preference in &prefs {
                    out.push(ClusterParams::AffinityPropagation { damping, preference });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_dims.is_empty() || self.k_dims.contains(&0) {
            return Err(Error::Config("grid needs nonempty, positive k_dims".into()));
        }
        if self.configurations().is_empty() {
            return Err(Error::Config("grid has no backend configurations".into()));
        }
        if let Some(g) = &self.affinity_propagation {
            if g.damping.iter().any(|d| !(0.5..1.0).contains(d)) {
                return Err(Error::Config("affinity propagation damping must be in [0.5, 1)".into()));
            }
        }
        Ok(())
    }
}

/// One evaluated grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub assignment: ClusterAssignment,
    pub feasible: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    /// Feasible candidates, best first.
    pub ranked: Vec<ClusterAssignment>,
    /// Every grid point in evaluation order.
    pub rows: Vec<GridRow>,
}

/// Ranking rule: silhouette descending, then fewer isolates, then more clusters.
pub const RANKING_RULE: &str = "silhouette desc, n_isolates asc, n_clusters desc, grid order";

/// Evaluates every (k_dims, configuration) pair and ranks the feasible ones.
///
/// `embeddings` pairs each candidate dimension with its `k x n_groups` embedding.
pub fn run_grid(embeddings: &[(usize, DMatrix<f64>)], spec: &GridSpec, seed: u64) -> Result<GridOutcome> {
    spec.validate()?;
    let configs = spec.configurations();
    let jobs: Vec<(usize, &DMatrix<f64>, ClusterParams)> = embeddings
        .iter()
        .flat_map(|(k, e)| configs.iter().map(move |c| (*k, e, c.clone())))
        .collect();
    let evaluated: Vec<Result<ClusterAssignment>> = jobs
        .par_iter()
        .map(|(k, e, c)| cluster_once(e, c, *k, seed))
        .collect();

    let mut rows = Vec::with_capacity(jobs.len());
    for (index, res) in evaluated.into_iter().enumerate() {
        let assignment = match res {
            Ok(a) => a,
            Err(e) => {
                let (k, e_mat, c) = &jobs[index];
                let mut a = ClusterAssignment::from_labels(vec![ISOLATE; e_mat.ncols()], c.clone(), *k, &unit_columns(e_mat));
                a.silhouette = None;
                rows.push(GridRow {
                    index,
                    assignment: a,
                    feasible: false,
                    reason: Some(e.to_string()),
                });
                continue;
            }
        };
        let reason = if assignment.silhouette.is_none() {
            Some(format!("only {} cluster(s)", assignment.n_clusters))
        } else if assignment.n_isolates > spec.max_isolates {
            Some(format!("{} isolates > {}", assignment.n_isolates, spec.max_isolates))
        } else if assignment.n_clusters < spec.min_clusters {
            Some(format!("{} clusters < {}", assignment.n_clusters, spec.min_clusters))
        } else {
            None
        };
        rows.push(GridRow {
            index,
            feasible: reason.is_none(),
            reason,
            assignment,
        });
    }

    let mut feasible: Vec<&GridRow> = rows.iter().filter(|r| r.feasible).collect();
    feasible.sort_by(|a, b| compare_candidates(&a.assignment, &b.assignment).then(a.index.cmp(&b.index)));
    if feasible.is_empty() {
        let mut misses: Vec<&GridRow> = rows.iter().collect();
        misses.sort_by(|a, b| {
            let sa = a.assignment.silhouette.unwrap_or(f64::NEG_INFINITY);
            let sb = b.assignment.silhouette.unwrap_or(f64::NEG_INFINITY);
            sb.total_cmp(&sa).then(a.index.cmp(&b.index))
        });
        let nearest = misses
            .iter()
            .take(3)
            .map(|r| {
                format!(
                    "{} k={} [{}] silhouette={} clusters={} isolates={} ({})",
                    r.assignment.algorithm(),
                    r.assignment.k_dims,
                    r.assignment.params.describe(),
                    r.assignment.silhouette.map_or("n/a".into(), |s| format!("{s:.4}")),
                    r.assignment.n_clusters,
                    r.assignment.n_isolates,
                    r.reason.as_deref().unwrap_or("")
                )
            })
            .collect();
        return Err(Error::NoFeasibleCandidate { nearest });
    }
    let ranked = feasible.iter().map(|r| r.assignment.clone()).collect();
    Ok(GridOutcome { ranked, rows })
}

fn compare_candidates(a: &ClusterAssignment, b: &ClusterAssignment) -> std::cmp::Ordering {
    let sa = a.silhouette.unwrap_or(f64::NEG_INFINITY);
    let sb = b.silhouette.unwrap_or(f64::NEG_INFINITY);
    sb.total_cmp(&sa)
        .then(a.n_isolates.cmp(&b.n_isolates))
        .then(b.n_clusters.cmp(&a.n_clusters))
}

/// Grid report: one row per grid point.
pub fn write_grid_report(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = crate::persist::csv_writer(path)?;
    w.write_record([
        "index",
        "algorithm",
        "k_dims",
        "hyperparameters",
        "silhouette",
        "n_clusters",
        "n_isolates",
        "feasible",
        "reason",
    ])?;
    for r in rows {
        let a = &r.assignment;
        w.write_record([
            r.index.to_string(),
            a.algorithm().to_string(),
            a.k_dims.to_string(),
            a.params.describe(),
            a.silhouette.map_or(String::new(), |s| s.to_string()),
            a.n_clusters.to_string(),
            a.n_isolates.to_string(),
            r.feasible.to_string(),
            r.reason.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `group,cluster` rows.
pub fn write_labels_csv(path: &Path, groups: &[String], labels: &[i64]) -> Result<()> {
    let mut w = crate::persist::csv_writer(path)?;
    w.write_record(["group", "cluster"])?;
    for (g, l) in groups.iter().zip(labels) {
        w.write_record([g.as_str(), &l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads `group,cluster` rows. Groups missing from the file become isolates.
pub fn read_labels_csv(path: &Path, groups: &[String]) -> Result<Vec<i64>> {
    let mut rdr = crate::persist::csv_reader(path)?;
    let mut map = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let l: i64 = rec[1]
            .trim()
            .parse()
            .map_err(|e| Error::InvalidInput(format!("bad cluster label {:?}: {e}", &rec[1])))?;
        map.insert(rec[0].to_string(), l);
    }
    Ok(groups.iter().map(|g| map.get(g).copied().unwrap_or(ISOLATE)).collect())
}

/// Human audit verdict for one sampled group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Judgment {
    Fits,
    DoesNotFit,
    Unavailable,
}

/// Judged-fit fraction `fits / (fits + does-not-fit)`.
///
/// This is the audit purity (share of sampled members judged to belong to
/// their cluster), not contingency-table purity. Isolates and unsampled
/// groups (`None`) are ignored.
pub fn purity(labels: &[i64], flags: &[Option<Judgment>]) -> Result<f64> {
    if labels.len() != flags.len() {
        return Err(Error::InvalidInput("labels and flags differ in length".into()));
    }
    let (mut fits, mut misfits) = (0usize, 0usize);
    for (l, f) in labels.iter().zip(flags) {
        if *l < 0 {
            continue;
        }
        match f {
            Some(Judgment::Fits) => fits += 1,
            Some(Judgment::DoesNotFit) => misfits += 1,
            _ => {}
        }
    }
    if fits + misfits == 0 {
        return Err(Error::InvalidInput("no judged groups".into()));
    }
    Ok(fits as f64 / (fits + misfits) as f64)
}

/// Adjusted Rand index; each isolate counts as its own singleton cluster.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let expand = |labels: &[i64]| -> Vec<i64> {
        let mut next = labels.iter().copied().max().unwrap_or(0).max(0) + 1;
        labels
            .iter()
            .map(|&l| {
                if l < 0 {
                    next += 1;
                    next - 1
                } else {
                    l
                }
            })
            .collect()
    };
    let (a, b) = (expand(a), expand(b));
    let mut table: HashMap<(i64, i64), u64> = HashMap::new();
    let mut ra: HashMap<i64, u64> = HashMap::new();
    let mut rb: HashMap<i64, u64> = HashMap::new();
    for i in 0..n {
        *table.entry((a[i], b[i])).or_default() += 1;
        *ra.entry(a[i]).or_default() += 1;
        *rb.entry(b[i]).or_default() += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let total = c2(n as u64);
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two tight bundles around orthogonal directions.
    fn two_blobs() -> DMatrix<f64> {
        DMatrix::from_fn(3, 8, |r, c| {
            let base = if c < 4 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            base[r] + if r == 2 { 0.01 * c as f64 } else { 0.0 }
        })
    }

    #[test]
    fn separated_blobs_score_high() {
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        assert!(silhouette(&two_blobs(), &labels).unwrap() > 0.9);
    }

    #[test]
    fn coincident_points_score_zero() {
        let e = DMatrix::from_element(2, 6, 1.0);
        let s = silhouette(&e, &[0, 0, 0, 1, 1, 1]).unwrap();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn silhouette_needs_two_clusters() {
        assert!(silhouette(&two_blobs(), &[0; 8]).is_err());
        assert!(silhouette(&two_blobs(), &[0, 0, 0, 0, -1, -1, -1, -1]).is_err());
    }

    #[test]
    fn kmeans_finds_blobs() {
        let unit = unit_columns(&two_blobs());
        let labels = kmeans(&unit, 2, 3).unwrap();
        assert_eq!(canonical_labels(&labels), vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn dbscan_marks_outlier() {
        let mut e = two_blobs().insert_column(8, 0.0);
        e[(2, 8)] = 1.0;
        let a = cluster_once(&e, &ClusterParams::Dbscan { eps: 0.05, min_samples: 3 }, 3, 0).unwrap();
        assert_eq!(a.n_clusters, 2);
        assert_eq!(a.n_isolates, 1);
        assert_eq!(a.labels[8], ISOLATE);
    }

    #[test]
    fn dbscan_everything_isolated_when_eps_tiny() {
        let a = cluster_once(&two_blobs(), &ClusterParams::Dbscan { eps: 1e-9, min_samples: 3 }, 3, 0).unwrap();
        assert_eq!(a.n_isolates, 8);
        assert!(a.silhouette.is_none());
    }

    #[test]
    fn hdbscan_finds_blobs() {
        let a = cluster_once(
            &two_blobs(),
            &ClusterParams::Hdbscan {
                min_cluster_size: 3,
                min_samples: 2,
            },
            3,
            0,
        )
        .unwrap();
        assert_eq!(a.n_clusters, 2);
        assert_eq!(adjusted_rand_index(&a.labels, &[0, 0, 0, 0, 1, 1, 1, 1]), 1.0);
    }

    #[test]
    fn affinity_propagation_finds_blobs() {
        let a = cluster_once(
            &two_blobs(),
            &ClusterParams::AffinityPropagation {
                damping: 0.5,
                preference: None,
            },
            3,
            0,
        )
        .unwrap();
        assert_eq!(a.n_clusters, 2);
        assert_eq!(a.n_isolates, 0);
    }

    #[test]
    fn grid_single_config() {
        let mut spec = GridSpec::kmeans_only(vec![2], vec![3]);
        spec.min_clusters = 2;
        let out = run_grid(&[(3, two_blobs())], &spec, 1).unwrap();
        assert_eq!(out.ranked.len(), 1);
        assert_eq!(out.ranked[0].n_clusters, 2);
    }

    #[test]
    fn grid_filters_all_isolate_candidates() {
        let spec = GridSpec {
            kmeans: Some(KmeansGrid { n_clusters: vec![2] }),
            dbscan: Some(DbscanGrid {
                eps: vec![1e-9],
                min_samples: vec![3],
            }),
            hdbscan: None,
            affinity_propagation: None,
            k_dims: vec![3],
            max_isolates: 0,
            min_clusters: 2,
        };
        let out = run_grid(&[(3, two_blobs())], &spec, 1).unwrap();
        assert_eq!(out.ranked.len(), 1);
        assert_eq!(out.ranked[0].algorithm(), Algorithm::Kmeans);
        assert!(!out.rows[1].feasible);
    }

    #[test]
    fn grid_without_feasible_candidates_reports_misses() {
        let spec = GridSpec::kmeans_only(vec![2, 3], vec![3]);
        match run_grid(&[(3, two_blobs())], &spec, 1) {
            Err(Error::NoFeasibleCandidate { nearest }) => assert_eq!(nearest.len(), 2),
            other => panic!("expected no feasible candidate, got {other:?}"),
        }
    }

    #[test]
    fn purity_examples() {
        let mut flags = vec![Some(Judgment::Fits); 719];
        flags.extend(vec![Some(Judgment::Unavailable); 25]);
        assert_eq!(purity(&vec![0; 744], &flags).unwrap(), 1.0);

        let mut flags = vec![Some(Judgment::Fits); 46];
        flags.extend(vec![Some(Judgment::DoesNotFit); 4]);
        assert!((purity(&vec![1; 50], &flags).unwrap() - 0.92).abs() < 1e-15);

        assert!(purity(&[0, 0], &[None, Some(Judgment::Unavailable)]).is_err());
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]), 1.0);
        assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
    }

    #[test]
    fn labels_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let groups: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let path = dir.path().join("labels.csv");
        write_labels_csv(&path, &groups, &[0, -1, 1]).unwrap();
        assert_eq!(read_labels_csv(&path, &groups).unwrap(), vec![0, -1, 1]);
    }
}
