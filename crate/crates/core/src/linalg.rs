//! Small dense linear-algebra helpers shared by the regression modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative size of an R diagonal entry, versus its column norm, below which
/// the column is treated as lying in the span of the preceding columns.
const RANK_TOL: f64 = 1e-10;

/// Result of an ordinary least-squares fit `y ~ X b`.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coef: DVector<f64>,
    pub residuals: DVector<f64>,
    pub rss: f64,
    /// Residual variance `rss / (n - p)`.
    pub sigma2: f64,
    /// `(X'X)^{-1}`.
    pub xtx_inv: DMatrix<f64>,
    pub n: usize,
    pub p: usize,
}

impl OlsFit {
    /// Conventional covariance `sigma2 (X'X)^{-1}`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.xtx_inv * self.sigma2
    }

    pub fn std_errors(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.p,
            (0..self.p).map(|i| (self.sigma2 * self.xtx_inv[(i, i)]).max(0.0).sqrt()),
        )
    }

    pub fn df(&self) -> usize {
        self.n - self.p
    }
}

/// Householder-QR least squares with explicit rank checking.
///
/// `names` labels the design columns for diagnostics; a rank-deficient design
/// yields [`Error::SingularDesign`] naming the dependent column together with
/// the earlier columns it is a combination of.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>, names: &[String]) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::InvalidInput(format!(
            "design has {n} rows but response has {}",
            y.len()
        )));
    }
    if names.len() != p {
        return Err(Error::InvalidInput(format!(
            "{p} design columns but {} names",
            names.len()
        )));
    }
    if n <= p {
        return Err(Error::InvalidInput(format!(
            "need more observations than parameters ({n} rows, {p} columns)"
        )));
    }

    let qr = x.clone().qr();
    let r = qr.r();
    for j in 0..p {
        let col_norm = x.column(j).norm();
        if col_norm == 0.0 || r[(j, j)].abs() <= RANK_TOL * col_norm {
            return Err(Error::SingularDesign {
                columns: collinear_group(x, j, names),
            });
        }
    }

    let qty = qr.q().transpose() * y;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::SingularDesign {
            columns: names.to_vec(),
        })?;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularDesign {
            columns: names.to_vec(),
        })?;
    let xtx_inv = &r_inv * r_inv.transpose();

    let residuals = y - x * &coef;
    let rss = residuals.norm_squared();
    let sigma2 = rss / (n - p) as f64;
    Ok(OlsFit {
        coef,
        residuals,
        rss,
        sigma2,
        xtx_inv,
        n,
        p,
    })
}

/// Names column `j` plus every earlier column that participates in expressing it.
fn collinear_group(x: &DMatrix<f64>, j: usize, names: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    if j > 0 && x.column(j).norm() > 0.0 {
        let prev = x.columns(0, j).into_owned();
        let target = x.column(j).into_owned();
        if let Ok(beta) = prev.clone().svd(true, true).solve(&target, 1e-12) {
            let scale = beta.amax().max(f64::MIN_POSITIVE);
            for (i, b) in beta.iter().enumerate() {
                if b.abs() > 1e-6 * scale {
                    out.push(names[i].clone());
                }
            }
        }
    }
    out.push(names[j].clone());
    out
}

/// `m^t` by repeated multiplication.
pub fn matrix_power(m: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..t {
        out = &out * m;
    }
    out
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Quantile with linear interpolation between order statistics (R type 7).
/// `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Two-sided critical value of Student's t for the given confidence level.
pub fn t_critical(df: usize, level: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
    let p = 0.5 + level / 2.0;
    if df == 0 {
        return f64::INFINITY;
    }
    match StudentsT::new(0.0, 1.0, df as f64) {
        Ok(t) => t.inverse_cdf(p),
        Err(_) => Normal::standard().inverse_cdf(p),
    }
}

/// Serde adapter writing a `DMatrix` as `{rows, cols, data}` in row-major order.
pub mod row_major {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let data = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)])
            .collect();
        Repr {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let r = Repr::deserialize(d)?;
        if r.data.len() != r.rows * r.cols {
            return Err(D::Error::custom(format!(
                "matrix data has {} entries, expected {}x{}",
                r.data.len(),
                r.rows,
                r.cols
            )));
        }
        Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
    }

    /// Same layout for a list of matrices.
    pub mod seq {
        use nalgebra::DMatrix;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        #[derive(Serialize, Deserialize)]
        struct Item(#[serde(with = "super")] DMatrix<f64>);

        pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(ms.iter().map(|m| Item(m.clone())))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
            Ok(Vec::<Item>::deserialize(d)?.into_iter().map(|i| i.0).collect())
        }
    }
}
