//! Out-of-sample forecasts from fitted VARs and their RMSE / CRPS scores.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::ingest::GroupPanel;
use crate::linalg::row_major;
use crate::var::{VarFit, VarModel};

/// Mean path and marginal standard deviations for `h = 1..=horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub model: VarModel,
    pub members: Vec<String>,
    /// First forecast week.
    pub origin: usize,
    pub horizon: usize,
    /// Row `h - 1`, column member.
    #[serde(with = "row_major")]
    pub mean: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub sd: DMatrix<f64>,
    pub unstable: bool,
}

/// Forecasts the `horizon` weeks following the training window.
pub fn forecast(fit: &VarFit, panel: &GroupPanel, horizon: usize) -> Result<Forecast> {
    let last: Vec<f64> = member_rows(panel, &fit.members)?
        .into_iter()
        .map(|i| panel.sizes[i][fit.t_train - 1])
        .collect();
    forecast_from(fit, &last, horizon)
}

/// Iterates the mean recursion from the last training observation.
pub fn forecast_from(fit: &VarFit, last: &[f64], horizon: usize) -> Result<Forecast> {
    fit.validate()?;
    let m = fit.n_members();
    if horizon == 0 || last.len() != m {
        return Err(Error::InvalidInput(format!(
            "forecast needs horizon >= 1 and {m} starting values"
        )));
    }
    let mut mean = DMatrix::zeros(horizon, m);
    let mut sd = DMatrix::zeros(horizon, m);
    let mut prev = DVector::from_column_slice(last);
    let mut power = DMatrix::<f64>::identity(m, m);
    let mut v = DMatrix::<f64>::zeros(m, m);
    for h in 0..horizon {
        let t = fit.t_train + h;
        let next = fit.deterministic(t) + &fit.phi * &prev;
        v += &power * &fit.sigma * power.transpose();
        power = &fit.phi * power;
        for j in 0..m {
            mean[(h, j)] = next[j];
            sd[(h, j)] = v[(j, j)].max(0.0).sqrt();
        }
        prev = next;
    }
    Ok(Forecast {
        model: fit.model,
        members: fit.members.clone(),
        origin: fit.t_train,
        horizon,
        mean,
        sd,
        unstable: fit.unstable,
    })
}

/// Forecast covariance `V_h = sum_{i<h} Phi^i Sigma Phi^i'`.
pub fn forecast_covariance(phi: &DMatrix<f64>, sigma: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    let m = phi.nrows();
    let mut power = DMatrix::<f64>::identity(m, m);
    let mut v = DMatrix::zeros(m, m);
    for _ in 0..h {
        v += &power * sigma * power.transpose();
        power = phi * power;
    }
    v
}

fn member_rows(panel: &GroupPanel, members: &[String]) -> Result<Vec<usize>> {
    members
        .iter()
        .map(|g| {
            panel
                .index_of(g)
                .ok_or_else(|| Error::InvalidInput(format!("member {g} is not in the panel")))
        })
        .collect()
}

/// Observed values for the forecast weeks, shaped like `Forecast::mean`.
pub fn actuals(panel: &GroupPanel, fc: &Forecast) -> Result<DMatrix<f64>> {
    let rows = member_rows(panel, &fc.members)?;
    if fc.origin + fc.horizon > panel.n_weeks() {
        return Err(Error::InvalidInput(format!(
            "panel ends at week {} but the forecast runs to week {}",
            panel.n_weeks(),
            fc.origin + fc.horizon
        )));
    }
    Ok(DMatrix::from_fn(fc.horizon, rows.len(), |h, j| panel.sizes[rows[j]][fc.origin + h]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RmseMode {
    /// One root over all (group, horizon) cells.
    #[default]
    Pooled,
    /// Mean over groups of each group's own RMSE.
    PerGroupMean,
}

fn check_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!(
            "forecast is {:?} but actuals are {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// RMSE over a set of forecast/actual pairs.
pub fn rmse(pairs: &[(&DMatrix<f64>, &DMatrix<f64>)], mode: RmseMode) -> Result<f64> {
    for (f, a) in pairs {
        check_shape(f, a)?;
    }
    match mode {
        RmseMode::Pooled => {
            let (mut sse, mut n) = (0.0, 0usize);
            for (f, a) in pairs {
                sse += (*f - *a).norm_squared();
                n += f.len();
            }
            if n == 0 {
                return Err(Error::InvalidInput("no cells to score".into()));
            }
            Ok((sse / n as f64).sqrt())
        }
        RmseMode::PerGroupMean => {
            let per_group: Vec<f64> = pairs
                .iter()
                .flat_map(|(f, a)| {
                    (0..f.ncols()).map(move |j| ((f.column(j) - a.column(j)).norm_squared() / f.nrows() as f64).sqrt())
                })
                .collect();
            if per_group.is_empty() {
                return Err(Error::InvalidInput("no cells to score".into()));
            }
            Ok(per_group.iter().sum::<f64>() / per_group.len() as f64)
        }
    }
}

/// Closed-form CRPS of `N(mu, sigma^2)` at `y`; absolute error when `sigma == 0`.
pub fn crps_normal(y: f64, mu: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return (y - mu).abs();
    }
    let n = Normal::standard();
    let z = (y - mu) / sigma;
    sigma * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / std::f64::consts::PI.sqrt())
}

/// Sum of per-cell CRPS.
pub fn crps(forecasts: &[(&Forecast, &DMatrix<f64>)]) -> Result<f64> {
    let mut total = 0.0;
    for (f, a) in forecasts {
        check_shape(&f.mean, a)?;
        for (k, &y) in a.iter().enumerate() {
            total += crps_normal(y, f.mean[k], f.sd[k]);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Var,
    Baseline,
    Tie,
}

fn winner(var: f64, baseline: f64) -> Winner {
    if var < baseline {
        Winner::Var
    } else if baseline < var {
        Winner::Baseline
    } else {
        Winner::Tie
    }
}

/// Both models' forecasts for one cluster with the held-out truth.
#[derive(Debug, Clone)]
pub struct ClusterForecasts {
    pub cluster: String,
    pub var: Forecast,
    pub baseline: Forecast,
    pub actual: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub cluster: String,
    pub cells: usize,
    pub var_rmse: f64,
    pub baseline_rmse: f64,
    pub var_crps: f64,
    pub baseline_crps: f64,
    /// `var - baseline`; negative favours the VAR.
    pub rmse_difference: f64,
    pub crps_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rmse_mode: RmseMode,
    pub cells: usize,
    pub var_rmse: f64,
    pub baseline_rmse: f64,
    pub var_crps: f64,
    pub baseline_crps: f64,
    pub rmse_winner: Winner,
    pub crps_winner: Winner,
    pub clusters: Vec<ClusterScore>,
}

pub fn compare(clusters: &[ClusterForecasts], mode: RmseMode) -> Result<ScoreReport> {
    let mut rows = Vec::with_capacity(clusters.len());
    for c in clusters {
        if c.var.members != c.baseline.members || c.var.mean.shape() != c.baseline.mean.shape() {
            return Err(Error::InvalidInput(format!(
                "cluster {}: VAR and baseline forecasts cover different cells",
                c.cluster
            )));
        }
        let var_rmse = rmse(&[(&c.var.mean, &c.actual)], mode)?;
        let baseline_rmse = rmse(&[(&c.baseline.mean, &c.actual)], mode)?;
        let var_crps = crps(&[(&c.var, &c.actual)])?;
        let baseline_crps = crps(&[(&c.baseline, &c.actual)])?;
        rows.push(ClusterScore {
            cluster: c.cluster.clone(),
            cells: c.actual.len(),
            var_rmse,
            baseline_rmse,
            var_crps,
            baseline_crps,
            rmse_difference: var_rmse - baseline_rmse,
            crps_difference: var_crps - baseline_crps,
        });
    }
    let var_pairs: Vec<_> = clusters.iter().map(|c| (&c.var.mean, &c.actual)).collect();
    let base_pairs: Vec<_> = clusters.iter().map(|c| (&c.baseline.mean, &c.actual)).collect();
    let var_rmse = rmse(&var_pairs, mode)?;
    let baseline_rmse = rmse(&base_pairs, mode)?;
    let var_crps: f64 = rows.iter().map(|r| r.var_crps).sum();
    let baseline_crps: f64 = rows.iter().map(|r| r.baseline_crps).sum();
    Ok(ScoreReport {
        rmse_mode: mode,
        cells: rows.iter().map(|r| r.cells).sum(),
        var_rmse,
        baseline_rmse,
        var_crps,
        baseline_crps,
        rmse_winner: winner(var_rmse, baseline_rmse),
        crps_winner: winner(var_crps, baseline_crps),
        clusters: rows,
    })
}

/// `scores.csv` with one row per cluster and `scores.json` with the totals.
pub fn write_scores(dir: &Path, report: &ScoreReport) -> Result<()> {
    let path = dir.join("scores.csv");
    let mut w = crate::persist::csv_writer(&path)?;
    for r in &report.clusters {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    crate::persist::write_json(&dir.join("scores.json"), report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit(phi: DMatrix<f64>, sigma: DMatrix<f64>, b0: Vec<f64>) -> VarFit {
        let m = b0.len();
        VarFit {
            model: VarModel::Full,
            members: (0..m).map(|i| format!("g{i}")).collect(),
            creation_week: vec![0; m],
            t_train: 10,
            start_week: 1,
            phi_se: DMatrix::zeros(m, m),
            phi,
            b0,
            b1: vec![0.0; m],
            a_diag: vec![0.0; m],
            sigma,
            b0_se: vec![0.0; m],
            b1_se: vec![0.0; m],
            a_se: vec![0.0; m],
            rss: vec![0.0; m],
            df: vec![5; m],
            residuals: DMatrix::zeros(9, m),
            spectral_radius: 0.0,
            unstable: false,
        }
    }

    #[test]
    fn zero_phi_forecasts_intercept() {
        let sigma = DMatrix::from_row_slice(2, 2, &[0.25, 0.1, 0.1, 0.16]);
        let f = forecast_from(&fit(DMatrix::zeros(2, 2), sigma, vec![1.0, 2.0]), &[5.0, 5.0], 3).unwrap();
        for h in 0..3 {
            assert_eq!(f.mean[(h, 0)], 1.0);
            assert_eq!(f.mean[(h, 1)], 2.0);
            assert!((f.sd[(h, 0)] - 0.5).abs() < 1e-15);
            assert!((f.sd[(h, 1)] - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn geometric_variance() {
        let f = forecast_from(
            &fit(DMatrix::from_diagonal_element(2, 2, 0.5), DMatrix::identity(2, 2), vec![0.0, 0.0]),
            &[1.0, 1.0],
            2,
        )
        .unwrap();
        assert!((f.sd[(1, 0)] - 1.25f64.sqrt()).abs() < 1e-15);
        assert!((f.mean[(1, 1)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rmse_cases() {
        let a = DMatrix::from_element(3, 2, 1.0);
        assert_eq!(rmse(&[(&a, &a)], RmseMode::Pooled).unwrap(), 0.0);
        let b = a.add_scalar(0.5);
        assert!((rmse(&[(&b, &a)], RmseMode::Pooled).unwrap() - 0.5).abs() < 1e-15);
        assert!((rmse(&[(&b, &a)], RmseMode::PerGroupMean).unwrap() - 0.5).abs() < 1e-15);
        assert!(rmse(&[(&DMatrix::zeros(2, 2), &a)], RmseMode::Pooled).is_err());
    }

    #[test]
    fn crps_closed_form_values() {
        let want = 2.0 / (2.0 * std::f64::consts::PI).sqrt() - 1.0 / std::f64::consts::PI.sqrt();
        assert!((crps_normal(0.0, 0.0, 1.0) - want).abs() < 1e-15);
        assert!((want - 0.2337).abs() < 1e-4);
        assert_eq!(crps_normal(3.0, 1.0, 0.0), 2.0);
        assert!((crps_normal(3.0, 1.0, 1e-9) - 2.0).abs() < 1e-8);
    }

    #[test]
    fn identical_forecasts_tie() {
        let f = forecast_from(&fit(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), vec![1.0]), &[1.0], 4).unwrap();
        let mut b = f.clone();
        b.model = VarModel::Baseline;
        let c = ClusterForecasts {
            cluster: "c".into(),
            var: f,
            baseline: b,
            actual: DMatrix::from_element(4, 1, 1.3),
        };
        let r = compare(&[c], RmseMode::Pooled).unwrap();
        assert_eq!(r.rmse_winner, Winner::Tie);
        assert_eq!(r.crps_winner, Winner::Tie);
        assert_eq!(r.clusters[0].rmse_difference, 0.0);
    }

    #[test]
    fn covariance_helper_matches_forecast() {
        let phi = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.4]);
        let sigma = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]);
        let f = forecast_from(&fit(phi.clone(), sigma.clone(), vec![0.0, 0.0]), &[0.0, 0.0], 5).unwrap();
        let v = forecast_covariance(&phi, &sigma, 5);
        assert!((f.sd[(4, 0)] - v[(0, 0)].sqrt()).abs() < 1e-15);
    }
}
