//! Per-cluster VAR(1) with intercept, linear trend and pre-creation
//! counter-trend ramps, fitted equation by equation with OLS.
//!
//! `phi[(i, j)]` is the effect of `y_j(t-1)` on `y_i(t)`, so the recursion
//! reads `Y_t = B0 + B1 t + A x_t + Phi Y_{t-1} + e_t`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::GroupPanel;
use crate::linalg::{ols, row_major, spectral_radius};

pub const DEFAULT_MIN_WEEKS: usize = 156;
pub const DEFAULT_HOLDOUT: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarSpec {
    pub members: Vec<String>,
    /// Training weeks are `[0, t_train)`.
    pub t_train: usize,
    pub min_weeks: usize,
    pub holdout: usize,
    /// Start rows at the latest member creation instead of the earliest.
    #[serde(default)]
    pub exclude_pre_creation: bool,
}

impl VarSpec {
    /// Trains on everything but the last `holdout` weeks of the panel.
    pub fn new(members: Vec<String>, panel: &GroupPanel, holdout: usize) -> Result<Self> {
        let t_train = panel.n_weeks().checked_sub(holdout).filter(|&t| t >= 2).ok_or_else(|| {
            Error::InvalidInput(format!(
                "panel of {} weeks leaves no training data after a {holdout}-week holdout",
                panel.n_weeks()
            ))
        })?;
        Ok(VarSpec {
            members,
            t_train,
            min_weeks: DEFAULT_MIN_WEEKS,
            holdout,
            exclude_pre_creation: false,
        })
    }

    pub fn with_min_weeks(mut self, min_weeks: usize) -> Self {
        self.min_weeks = min_weeks;
        self
    }

    /// Checks the spec against the panel and returns member row indices.
    pub fn validate(&self, panel: &GroupPanel) -> Result<Vec<usize>> {
        if self.members.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a VAR needs at least 2 members, got {}",
                self.members.len()
            )));
        }
        if self.t_train > panel.n_weeks() || self.t_train < 2 {
            return Err(Error::InvalidInput(format!(
                "training window of {} weeks does not fit a {}-week panel",
                self.t_train,
                panel.n_weeks()
            )));
        }
        let mut seen = BTreeSet::new();
        let mut idx = Vec::with_capacity(self.members.len());
        for m in &self.members {
            if !seen.insert(m) {
                return Err(Error::InvalidInput(format!("duplicate member {m}")));
            }
            let i = panel
                .index_of(m)
                .ok_or_else(|| Error::InvalidInput(format!("member {m} is not in the panel")))?;
            if panel.sizes[i][..self.t_train].iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidInput(format!(
                    "member {m} has an all-zero series in the training window"
                )));
            }
            let active = activity_weeks(panel.creation_week[i], self.t_train);
            if active < self.min_weeks {
                return Err(Error::InvalidInput(format!(
                    "member {m} has {active} weeks of activity, fewer than {}",
                    self.min_weeks
                )));
            }
            idx.push(i);
        }
        Ok(idx)
    }
}

/// Weeks between creation and the end of training.
pub fn activity_weeks(creation_week: usize, t_train: usize) -> usize {
    t_train.saturating_sub(creation_week)
}

/// Splits `members` into those meeting the activity threshold and the rest.
pub fn eligible_members(
    panel: &GroupPanel,
    members: &[String],
    t_train: usize,
    min_weeks: usize,
) -> (Vec<String>, Vec<String>) {
    members.iter().cloned().partition(|m| {
        panel.index_of(m).is_some_and(|i| {
            activity_weeks(panel.creation_week[i], t_train) >= min_weeks
                && panel.sizes[i][..t_train.min(panel.n_weeks())].iter().any(|&v| v != 0.0)
        })
    })
}

/// Pre-creation counter ramp: `t` before `creation_week`, 0 after.
pub fn counter_trend(t: usize, creation_week: usize) -> f64 {
    if t < creation_week {
        t as f64
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarModel {
    Full,
    /// Own lag only; off-diagonal Phi fixed at 0.
    Baseline,
}

/// Regressors and response for one equation.
#[derive(Debug, Clone)]
pub struct EquationDesign {
    pub group: String,
    pub columns: Vec<String>,
    /// Week index of each row.
    pub weeks: Vec<usize>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// First regression row: the earliest (or latest) member creation, never 0.
fn first_row(creation: &[usize], exclude_pre_creation: bool) -> usize {
    let c = if exclude_pre_creation {
        creation.iter().copied().max()
    } else {
        creation.iter().copied().min()
    };
    c.unwrap_or(0).max(1)
}

fn design(
    members: &[String],
    y: &[Vec<f64>],
    creation: &[usize],
    start: usize,
    t_train: usize,
    model: VarModel,
    j: usize,
) -> EquationDesign {
    let lags: Vec<usize> = match model {
        VarModel::Full => (0..members.len()).collect(),
        VarModel::Baseline => vec![j],
    };
    let mut columns = vec![
        "intercept".to_string(),
        "trend".to_string(),
        format!("counter[{}]", members[j]),
    ];
    columns.extend(lags.iter().map(|&k| format!("lag[{}]", members[k])));
    let weeks: Vec<usize> = (start..t_train).collect();
    let x = DMatrix::from_fn(weeks.len(), columns.len(), |r, c| {
        let t = weeks[r];
        match c {
            0 => 1.0,
            1 => t as f64,
            2 => counter_trend(t, creation[j]),
            _ => y[lags[c - 3]][t - 1],
        }
    });
    let yv = DVector::from_iterator(weeks.len(), weeks.iter().map(|&t| y[j][t]));
    EquationDesign {
        group: members[j].clone(),
        columns,
        weeks,
        x,
        y: yv,
    }
}

/// Full-model designs, one per member, including all-zero counter columns.
pub fn build_design(panel: &GroupPanel, spec: &VarSpec) -> Result<Vec<EquationDesign>> {
    let idx = spec.validate(panel)?;
    let y: Vec<Vec<f64>> = idx.iter().map(|&i| panel.sizes[i].clone()).collect();
    let creation: Vec<usize> = idx.iter().map(|&i| panel.creation_week[i]).collect();
    let start = first_row(&creation, spec.exclude_pre_creation);
    check_rows(start, spec.t_train)?;
    Ok((0..idx.len())
        .map(|j| design(&spec.members, &y, &creation, start, spec.t_train, VarModel::Full, j))
        .collect())
}

fn check_rows(start: usize, t_train: usize) -> Result<()> {
    if start >= t_train {
        return Err(Error::InvalidInput(format!(
            "no regression rows: first row {start} is not before week {t_train}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarFit {
    pub model: VarModel,
    pub members: Vec<String>,
    pub creation_week: Vec<usize>,
    pub t_train: usize,
    /// First regression week.
    pub start_week: usize,
    #[serde(with = "row_major")]
    pub phi: DMatrix<f64>,
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
    /// Own counter-trend coefficient; 0 when the ramp is empty over the rows.
    pub a_diag: Vec<f64>,
    /// `e_i'e_j / sqrt((n - p_i)(n - p_j))`.
    #[serde(with = "row_major")]
    pub sigma: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub phi_se: DMatrix<f64>,
    pub b0_se: Vec<f64>,
    pub b1_se: Vec<f64>,
    pub a_se: Vec<f64>,
    pub rss: Vec<f64>,
    /// Residual degrees of freedom per equation.
    pub df: Vec<usize>,
    /// Rows are weeks `start_week..t_train`, columns members.
    #[serde(with = "row_major")]
    pub residuals: DMatrix<f64>,
    pub spectral_radius: f64,
    pub unstable: bool,
}

impl VarFit {
    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    /// `B0 + B1 t + A x_t` for every member.
    pub fn deterministic(&self, t: usize) -> DVector<f64> {
        DVector::from_fn(self.n_members(), |j, _| {
            self.b0[j] + self.b1[j] * t as f64 + self.a_diag[j] * counter_trend(t, self.creation_week[j])
        })
    }

    /// Refits the same model on new series sharing this fit's members,
    /// creation weeks and row range.
    pub fn refit(&self, y: &[Vec<f64>]) -> Result<VarFit> {
        fit_series(
            &self.members,
            y,
            &self.creation_week,
            self.start_week,
            self.t_train,
            self.model,
        )
    }

    /// Structural checks for fits read from disk or across the FFI.
    pub fn validate(&self) -> Result<()> {
        let m = self.members.len();
        let square = |d: &DMatrix<f64>| d.nrows() == m && d.ncols() == m;
        let vecs = [&self.b0, &self.b1, &self.a_diag, &self.b0_se, &self.b1_se, &self.a_se, &self.rss];
        if m == 0
            || !square(&self.phi)
            || !square(&self.sigma)
            || !square(&self.phi_se)
            || vecs.iter().any(|v| v.len() != m)
            || self.creation_week.len() != m
            || self.df.len() != m
            || self.residuals.ncols() != m
        {
            return Err(Error::InvalidInput("VAR fit dimensions are inconsistent".into()));
        }
        Ok(())
    }
}

pub fn fit_var(panel: &GroupPanel, spec: &VarSpec) -> Result<VarFit> {
    fit_panel(panel, spec, VarModel::Full)
}

pub fn fit_baseline(panel: &GroupPanel, spec: &VarSpec) -> Result<VarFit> {
    fit_panel(panel, spec, VarModel::Baseline)
}

pub fn fit_panel(panel: &GroupPanel, spec: &VarSpec, model: VarModel) -> Result<VarFit> {
    let idx = spec.validate(panel)?;
    let y: Vec<Vec<f64>> = idx.iter().map(|&i| panel.sizes[i][..spec.t_train].to_vec()).collect();
    let creation: Vec<usize> = idx.iter().map(|&i| panel.creation_week[i]).collect();
    let start = first_row(&creation, spec.exclude_pre_creation);
    fit_series(&spec.members, &y, &creation, start, spec.t_train, model)
}

/// Fits on raw member series; `y[j]` must cover weeks `0..t_train`.
pub fn fit_series(
    members: &[String],
    y: &[Vec<f64>],
    creation: &[usize],
    start: usize,
    t_train: usize,
    model: VarModel,
) -> Result<VarFit> {
    let m = members.len();
    if y.len() != m || creation.len() != m || y.iter().any(|s| s.len() < t_train) {
        return Err(Error::InvalidInput("series do not match the member list".into()));
    }
    check_rows(start.max(1), t_train)?;
    let start = start.max(1);
    let n = t_train - start;

    let mut phi = DMatrix::zeros(m, m);
    let mut phi_se = DMatrix::zeros(m, m);
    let mut b0 = vec![0.0; m];
    let mut b1 = vec![0.0; m];
    let mut a_diag = vec![0.0; m];
    let mut b0_se = vec![0.0; m];
    let mut b1_se = vec![0.0; m];
    let mut a_se = vec![0.0; m];
    let mut rss = vec![0.0; m];
    let mut df = vec![0; m];
    let mut residuals = DMatrix::zeros(n, m);

    for j in 0..m {
        let mut d = design(members, y, creation, start, t_train, model, j);
        let has_counter = d.x.column(2).iter().any(|&v| v != 0.0);
        if !has_counter {
            d.x = d.x.remove_column(2);
            d.columns.remove(2);
        }
        let fit = ols(&d.x, &d.y, &d.columns)?;
        let se = fit.std_errors();
        b0[j] = fit.coef[0];
        b1[j] = fit.coef[1];
        b0_se[j] = se[0];
        b1_se[j] = se[1];
        let mut off = 2;
        if has_counter {
            a_diag[j] = fit.coef[2];
            a_se[j] = se[2];
            off = 3;
        }
        match model {
            VarModel::Full => {
                for k in 0..m {
                    phi[(j, k)] = fit.coef[off + k];
                    phi_se[(j, k)] = se[off + k];
                }
            }
            VarModel::Baseline => {
                phi[(j, j)] = fit.coef[off];
                phi_se[(j, j)] = se[off];
            }
        }
        rss[j] = fit.rss;
        df[j] = fit.df();
        residuals.set_column(j, &fit.residuals);
    }

    let cross = residuals.transpose() * &residuals;
    let sigma = DMatrix::from_fn(m, m, |i, j| cross[(i, j)] / ((df[i] * df[j]) as f64).sqrt());
    let rho = spectral_radius(&phi);
    if rho >= 1.0 {
        log::warn!("VAR fit over {} is unstable (spectral radius {rho:.4})", members.join(","));
    }
    Ok(VarFit {
        model,
        members: members.to_vec(),
        creation_week: creation.to_vec(),
        t_train,
        start_week: start,
        phi,
        b0,
        b1,
        a_diag,
        sigma,
        phi_se,
        b0_se,
        b1_se,
        a_se,
        rss,
        df,
        residuals,
        spectral_radius: rho,
        unstable: rho >= 1.0,
    })
}
