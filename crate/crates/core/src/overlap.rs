//! User-overlap embedding: max-normalized frequency vectors, truncated SVD,
//! pairwise cosine overlap and normalized overlap density.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::UserFrequencyMatrix;
use crate::sparse::SparseColMatrix;

pub const DEFAULT_K: usize = 600;

/// Randomized range-finder settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SvdOptions {
    pub oversample: usize,
    pub power_iters: usize,
}

impl Default for SvdOptions {
    fn default() -> Self {
        SvdOptions {
            oversample: 10,
            power_iters: 4,
        }
    }
}

/// Divides each column by its largest entry, so every column max is 1.
pub fn normalize_frequencies(ufm: &UserFrequencyMatrix) -> Result<SparseColMatrix> {
    let mut f = ufm.counts.clone();
    for c in 0..f.ncols() {
        let max = f.column(c).1.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "group {} has no events",
                ufm.groups.get(c).map_or("?", String::as_str)
            )));
        }
        for v in f.column_mut_values(c) {
            *v /= max;
        }
    }
    Ok(f)
}

/// Group coordinates in the top-`k` left singular subspace.
#[derive(Debug, Clone)]
pub struct Embedding {
    /// `k x n_groups`, column `j` is `U_k^T F_j`.
    pub matrix: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub k_requested: usize,
    pub warnings: Vec<String>,
}

impl Embedding {
    pub fn k(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Projects the columns of `f` onto its top-`k` left singular vectors.
pub fn embed(f: &SparseColMatrix, k: usize, seed: u64) -> Result<Embedding> {
    embed_with(f, k, seed, SvdOptions::default())
}

pub fn embed_with(f: &SparseColMatrix, k: usize, seed: u64, opts: SvdOptions) -> Result<Embedding> {
    let (m, n) = (f.nrows(), f.ncols());
    if k == 0 {
        return Err(Error::InvalidInput("embedding dimension must be at least 1".into()));
    }
    if m == 0 || n == 0 {
        return Err(Error::InvalidInput("empty frequency matrix".into()));
    }
    let mut warnings = Vec::new();
    let cap = m.min(n);
    let k_eff = if k > cap {
        let w = format!("k={k} exceeds min(rows, cols)={cap}; using k={cap}");
        log::warn!("{w}");
        warnings.push(w);
        cap
    } else {
        k
    };
    let l = (k_eff + opts.oversample).min(cap);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(n, l, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormal_basis(f.mul_dense(&omega));
    for _ in 0..opts.power_iters {
        let z = orthonormal_basis(f.tr_mul_dense(&q));
        q = orthonormal_basis(f.mul_dense(&z));
    }
    // B = Q^T F (l x n)
    let b = f.tr_mul_dense(&q).transpose();
    let svd = b.clone().svd(true, false);
    let u_small = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &c| svd.singular_values[c].total_cmp(&svd.singular_values[a]));
    let top: Vec<usize> = order.into_iter().take(k_eff).collect();

    let uk = DMatrix::from_fn(u_small.nrows(), top.len(), |r, c| u_small[(r, top[c])]);
    let matrix = uk.transpose() * &b;
    let singular_values: Vec<f64> = top.iter().map(|&i| svd.singular_values[i]).collect();

    let smax = singular_values.first().copied().unwrap_or(0.0);
    let rank = singular_values.iter().filter(|&&s| s > smax * 1e-10).count();
    if rank < k_eff {
        let w = format!("k={k_eff} exceeds numerical rank {rank}; trailing dimensions are near zero");
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(Embedding {
        matrix,
        singular_values,
        k_requested: k,
        warnings,
    })
}

fn orthonormal_basis(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// Cosine similarity between embedded columns.
///
/// Columns with zero norm get all-zero similarities (diagonal included); their
/// indices are returned alongside.
pub fn overlap_matrix(embedding: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let n = embedding.ncols();
    let norms: Vec<f64> = (0..n).map(|j| embedding.column(j).norm()).collect();
    let max_norm = norms.iter().copied().fold(0.0, f64::max);
    let zero: Vec<usize> = (0..n).filter(|&j| norms[j] <= 1e-12 * max_norm || norms[j] == 0.0).collect();
    let mut unit = embedding.clone();
    for j in 0..n {
        if zero.contains(&j) {
            unit.column_mut(j).fill(0.0);
        } else {
            unit.column_mut(j).unscale_mut(norms[j]);
        }
    }
    let gram = unit.transpose() * &unit;
    let mut sim = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = if i == j {
                if zero.contains(&i) {
                    0.0
                } else {
                    1.0
                }
            } else {
                (0.5 * (gram[(i, j)] + gram[(j, i)])).clamp(-1.0, 1.0)
            };
            sim[(i, j)] = v;
            sim[(j, i)] = v;
        }
    }
    if !zero.is_empty() {
        log::warn!("{} group(s) have zero-norm embeddings; similarities set to 0", zero.len());
    }
    (sim, zero)
}

/// Raw mean off-diagonal overlap `d*` and its max-normalized form `d`.
pub fn overlap_density(similarities: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = similarities.nrows();
    if similarities.ncols() != n {
        return Err(Error::InvalidInput("similarity matrix is not square".into()));
    }
    if n < 2 {
        return Err(Error::InvalidInput("overlap density needs at least two groups".into()));
    }
    let raw = DVector::from_fn(n, |i, _| {
        (0..n).filter(|&j| j != i).map(|j| similarities[(i, j)]).sum::<f64>() / (n - 1) as f64
    });
    let max = raw.max();
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::InvalidInput(format!(
            "cannot normalize overlap density: max raw density is {max}"
        )));
    }
    let density = raw.map(|v| v / max);
    Ok((raw, density))
}

/// Everything the overlap stage produces.
#[derive(Debug, Clone)]
pub struct OverlapModel {
    pub groups: Vec<String>,
    pub k: usize,
    pub seed: u64,
    pub embedding: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub similarities: DMatrix<f64>,
    pub raw_density: DVector<f64>,
    pub density: DVector<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OverlapMeta {
    k_requested: usize,
    k: usize,
    seed: u64,
    singular_values: Vec<f64>,
    warnings: Vec<String>,
}

impl OverlapModel {
    pub fn build(ufm: &UserFrequencyMatrix, k: usize, seed: u64) -> Result<Self> {
        let f = normalize_frequencies(ufm)?;
        let emb = embed(&f, k, seed)?;
        let (similarities, zero) = overlap_matrix(&emb.matrix);
        let mut warnings = emb.warnings.clone();
        for j in zero {
            warnings.push(format!("group {} has a zero-norm embedding", ufm.groups[j]));
        }
        let (raw_density, density) = overlap_density(&similarities)?;
        Ok(OverlapModel {
            groups: ufm.groups.clone(),
            k: emb.k(),
            seed,
            embedding: emb.matrix,
            singular_values: emb.singular_values,
            similarities,
            raw_density,
            density,
            warnings,
        })
    }

    pub fn density_of(&self, group: &str) -> Option<f64> {
        self.groups.iter().position(|g| g == group).map(|i| self.density[i])
    }

    /// Writes `similarity.csv`, `density.csv`, `embedding.csv` and `overlap.json`.
    pub fn write_dir(&self, dir: &Path, k_requested: usize) -> Result<()> {
        write_labeled_matrix(&dir.join("similarity.csv"), "group", &self.groups, &self.similarities, true)?;
        write_labeled_matrix(&dir.join("embedding.csv"), "dim", &self.groups, &self.embedding, false)?;
        let mut w = crate::persist::csv_writer(&dir.join("density.csv"))?;
        w.write_record(["group", "density", "raw_density"])?;
        for (i, g) in self.groups.iter().enumerate() {
            w.write_record([g.as_str(), &self.density[i].to_string(), &self.raw_density[i].to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        let meta = OverlapMeta {
            k_requested,
            k: self.k,
            seed: self.seed,
            singular_values: self.singular_values.clone(),
            warnings: self.warnings.clone(),
        };
        crate::persist::write_json(&dir.join("overlap.json"), &meta)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta: OverlapMeta = crate::persist::read_json(&dir.join("overlap.json"))?;
        let (groups, similarities) = read_labeled_matrix(&dir.join("similarity.csv"), true)?;
        let (_, embedding) = read_labeled_matrix(&dir.join("embedding.csv"), false)?;
        let mut rdr = crate::persist::csv_reader(&dir.join("density.csv"))?;
        let mut density = Vec::new();
        let mut raw = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            density.push(parse_f64(&rec[1])?);
            raw.push(parse_f64(&rec[2])?);
        }
        Ok(OverlapModel {
            groups,
            k: meta.k,
            seed: meta.seed,
            embedding,
            singular_values: meta.singular_values,
            similarities,
            raw_density: DVector::from_vec(raw),
            density: DVector::from_vec(density),
            warnings: meta.warnings,
        })
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|e| Error::InvalidInput(format!("bad number {s:?}: {e}")))
}

/// Columns are groups. Square matrices label rows by group, others by index.
fn write_labeled_matrix(path: &Path, corner: &str, groups: &[String], m: &DMatrix<f64>, square: bool) -> Result<()> {
    let mut w = crate::persist::csv_writer(path)?;
    let mut header = vec![corner.to_string()];
    header.extend(groups.iter().cloned());
    w.write_record(&header)?;
    for r in 0..m.nrows() {
        let mut row = vec![if square { groups[r].clone() } else { r.to_string() }];
        row.extend((0..m.ncols()).map(|c| m[(r, c)].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_labeled_matrix(path: &Path, square: bool) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = crate::persist::csv_reader(path)?;
    let groups: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let vals = rec.iter().skip(1).map(parse_f64).collect::<Result<Vec<_>>>()?;
        rows.push(vals);
    }
    if square && rows.len() != groups.len() {
        return Err(Error::InvalidInput(format!("{}: matrix is not square", path.display())));
    }
    let m = DMatrix::from_fn(rows.len(), groups.len(), |r, c| rows[r][c]);
    Ok((groups, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ufm_from_dense(d: &DMatrix<f64>) -> UserFrequencyMatrix {
        UserFrequencyMatrix {
            users: (0..d.nrows()).map(|i| format!("u{i}")).collect(),
            groups: (0..d.ncols()).map(|j| format!("g{j}")).collect(),
            counts: SparseColMatrix::from_dense(d),
        }
    }

    #[test]
    fn normalize_column_max() {
        let d = DMatrix::from_row_slice(3, 2, &[4.0, 7.0, 2.0, 0.0, 0.0, 0.0]);
        let f = normalize_frequencies(&ufm_from_dense(&d)).unwrap().to_dense();
        assert_eq!(f.column(0).as_slice(), &[1.0, 0.5, 0.0]);
        assert_eq!(f.column(1).as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_empty_group() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert!(normalize_frequencies(&ufm_from_dense(&d)).is_err());
    }

    #[test]
    fn identity_embedding_preserves_inner_products() {
        let f = SparseColMatrix::from_dense(&DMatrix::identity(2, 2));
        let e = embed(&f, 2, 7).unwrap();
        let g = e.matrix.transpose() * &e.matrix;
        assert!((g - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn disjoint_users_are_orthogonal() {
        let d = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.25]);
        let e = embed(&SparseColMatrix::from_dense(&d), 2, 1).unwrap();
        let (sim, _) = overlap_matrix(&e.matrix);
        assert!(sim[(0, 1)].abs() < 1e-12);
        assert_eq!(sim[(0, 0)], 1.0);
    }

    #[test]
    fn k_is_clamped_with_warning() {
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 1.0, 0.0, 1.0]);
        let e = embed(&SparseColMatrix::from_dense(&d), 600, 1).unwrap();
        assert_eq!(e.k(), 2);
        assert_eq!(e.k_requested, 600);
        assert!(!e.warnings.is_empty());
    }

    #[test]
    fn cosine_identical_and_orthogonal() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, 0.0, 0.0, 3.0]);
        let (sim, zero) = overlap_matrix(&m);
        assert!(zero.is_empty());
        assert!((sim[(0, 1)] - 1.0).abs() < 1e-15);
        assert_eq!(sim[(0, 2)], 0.0);
    }

    #[test]
    fn zero_column_gets_zero_similarity() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let (sim, zero) = overlap_matrix(&m);
        assert_eq!(zero, vec![1]);
        assert_eq!(sim[(1, 1)], 0.0);
        assert_eq!(sim[(0, 1)], 0.0);
    }

    #[test]
    fn density_uniform() {
        let sim = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.5 });
        let (_, d) = overlap_density(&sim).unwrap();
        assert!(d.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn density_worked_example() {
        let sim = DMatrix::from_row_slice(3, 3, &[1.0, 0.8, 0.0, 0.8, 1.0, 0.4, 0.0, 0.4, 1.0]);
        let (raw, d) = overlap_density(&sim).unwrap();
        for (got, want) in raw.iter().zip([0.4, 0.6, 0.2]) {
            assert!((got - want).abs() < 1e-15);
        }
        for (got, want) in d.iter().zip([2.0 / 3.0, 1.0, 1.0 / 3.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn density_needs_two_groups() {
        assert!(overlap_density(&DMatrix::identity(1, 1)).is_err());
    }
}
