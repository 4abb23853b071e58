//! Density dependence: growth regressed on overlap density and its square.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::GroupPanel;
use crate::linalg::{ols, t_critical};
use crate::overlap::OverlapModel;

pub const DEFAULT_HOLDOUT_WEEKS: usize = 24;

/// How growth over the holdout window is measured on log sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GrowthMeasure {
    /// Last week minus the week `holdout` weeks earlier.
    #[default]
    Endpoint,
    /// Mean of the trailing `weeks` ending at each endpoint.
    TrailingMean { weeks: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthObservation {
    pub group: String,
    pub growth: f64,
    pub density: f64,
}

/// Per-group growth plus the groups left out for being too young.
#[derive(Debug, Clone, Default)]
pub struct Growth {
    pub values: Vec<(String, f64)>,
    pub excluded: Vec<String>,
}

/// Change in log size over the final `holdout_weeks` of the panel.
pub fn compute_growth(panel: &GroupPanel, holdout_weeks: usize, measure: GrowthMeasure) -> Result<Growth> {
    let t = panel.n_weeks();
    if holdout_weeks == 0 || t <= holdout_weeks {
        return Err(Error::InvalidInput(format!(
            "panel of {t} weeks is too short for a {holdout_weeks}-week growth window"
        )));
    }
    let end = t - 1;
    let start = end - holdout_weeks;
    let width = match measure {
        GrowthMeasure::Endpoint => 1,
        GrowthMeasure::TrailingMean { weeks } => weeks.max(1),
    };
    if width > start + 1 {
        return Err(Error::InvalidInput(format!(
            "trailing mean of {width} weeks does not fit before week {start}"
        )));
    }
    let mean = |row: &[f64], last: usize| row[last + 1 - width..=last].iter().sum::<f64>() / width as f64;
    let mut out = Growth::default();
    for (i, g) in panel.groups.iter().enumerate() {
        if panel.creation_week[i] + width - 1 > start {
            log::warn!("group {g} was created inside the growth window; excluded");
            out.excluded.push(g.clone());
            continue;
        }
        let row = &panel.sizes[i];
        out.values.push((g.clone(), mean(row, end) - mean(row, start)));
    }
    Ok(out)
}

/// Pairs growth with overlap density; groups without a density are dropped.
pub fn join_density(growth: &Growth, overlap: &OverlapModel) -> Vec<GrowthObservation> {
    growth
        .values
        .iter()
        .filter_map(|(g, y)| {
            overlap.density_of(g).map(|d| GrowthObservation {
                group: g.clone(),
                growth: *y,
                density: d,
            })
        })
        .collect()
}

/// OLS fit of `Y = B0 + B1 d + B2 d^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub coefficients: [f64; 3],
    /// Conventional `sigma^2 (X'X)^{-1}`.
    pub covariance: [[f64; 3]; 3],
    pub n: usize,
    pub r_squared: f64,
    pub sigma2: f64,
    /// `-B1 / (2 B2)`; absent when `B2 == 0`.
    pub vertex: Option<f64>,
    pub density_min: f64,
    pub density_max: f64,
}

impl QuadraticFit {
    pub fn df(&self) -> usize {
        self.n - 3
    }

    pub fn predict(&self, d: f64) -> f64 {
        let [b0, b1, b2] = self.coefficients;
        b0 + b1 * d + b2 * d * d
    }

    pub fn std_error(&self, i: usize) -> f64 {
        self.covariance[i][i].max(0.0).sqrt()
    }

    /// Two-sided confidence interval for coefficient `i`.
    pub fn confidence_interval(&self, i: usize, level: f64) -> (f64, f64) {
        let h = t_critical(self.df(), level) * self.std_error(i);
        (self.coefficients[i] - h, self.coefficients[i] + h)
    }
}

pub fn fit_model1(observations: &[GrowthObservation]) -> Result<QuadraticFit> {
    let n = observations.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 observations, got {n}")));
    }
    let d: Vec<f64> = observations.iter().map(|o| o.density).collect();
    let y = DVector::from_iterator(n, observations.iter().map(|o| o.growth));
    if d.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite growth or density".into()));
    }
    let x = DMatrix::from_fn(n, 3, |i, j| d[i].powi(j as i32));
    let names = ["intercept", "density", "density^2"].map(String::from);
    let fit = ols(&x, &y, &names)?;
    let cov = fit.covariance();
    let mut covariance = [[0.0; 3]; 3];
    for (i, row) in covariance.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = 0.5 * (cov[(i, j)] + cov[(j, i)]);
        }
    }
    let ybar = y.mean();
    let tss: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let coefficients = [fit.coef[0], fit.coef[1], fit.coef[2]];
    Ok(QuadraticFit {
        coefficients,
        covariance,
        n,
        r_squared: if tss > 0.0 { 1.0 - fit.rss / tss } else { 1.0 },
        sigma2: fit.sigma2,
        vertex: (coefficients[2] != 0.0).then(|| -coefficients[1] / (2.0 * coefficients[2])),
        density_min: d.iter().copied().fold(f64::INFINITY, f64::min),
        density_max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalPoint {
    pub density: f64,
    pub predicted: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Fitted curve with pointwise delta-method intervals.
pub fn marginal_effects(fit: &QuadraticFit, grid: &[f64], level: f64) -> Vec<MarginalPoint> {
    let crit = t_critical(fit.df(), level);
    grid.iter()
        .map(|&d| {
            let g = [1.0, d, d * d];
            let var: f64 = (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| g[i] * fit.covariance[i][j] * g[j])
                .sum();
            let se = var.max(0.0).sqrt();
            let predicted = fit.predict(d);
            MarginalPoint {
                density: d,
                predicted,
                std_error: se,
                lower: predicted - crit * se,
                upper: predicted + crit * se,
            }
        })
        .collect()
}

/// Evenly spaced grid over the observed density range.
pub fn density_grid(fit: &QuadraticFit, points: usize) -> Vec<f64> {
    let points = points.max(2);
    let (lo, hi) = (fit.density_min, fit.density_max);
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    CapShaped,
    UShaped,
    Monotone,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeVerdict {
    pub shape: Shape,
    pub vertex: Option<f64>,
    /// Share (0-100) of observed densities at or below the vertex.
    pub vertex_percentile: Option<f64>,
    pub b1_interval: (f64, f64),
    pub b2_interval: (f64, f64),
}

/// Classifies the fitted curve.
///
/// Cap-shaped needs `B1 > 0` and `B2 < 0`, both 95% intervals excluding
/// zero, and the vertex inside the observed density range; U-shaped is the
/// mirror image. With neither linear nor quadratic term significant the
/// curve is flat; anything else is monotone over the data.
pub fn shape_test(fit: &QuadraticFit, densities: &[f64]) -> ShapeVerdict {
    let b1 = fit.confidence_interval(1, 0.95);
    let b2 = fit.confidence_interval(2, 0.95);
    let excludes_zero = |(lo, hi): (f64, f64)| lo > 0.0 || hi < 0.0;
    let in_range = fit
        .vertex
        .is_some_and(|v| v >= fit.density_min && v <= fit.density_max);
    let [_, c1, c2] = fit.coefficients;
    let (sig1, sig2) = (excludes_zero(b1), excludes_zero(b2));
    let shape = if sig1 && sig2 && in_range && c1 > 0.0 && c2 < 0.0 {
        Shape::CapShaped
    } else if sig1 && sig2 && in_range && c1 < 0.0 && c2 > 0.0 {
        Shape::UShaped
    } else if !sig1 && !sig2 {
        Shape::Flat
    } else {
        Shape::Monotone
    };
    let vertex_percentile = fit.vertex.filter(|_| !densities.is_empty()).map(|v| {
        100.0 * densities.iter().filter(|&&d| d <= v).count() as f64 / densities.len() as f64
    });
    ShapeVerdict {
        shape,
        vertex: fit.vertex,
        vertex_percentile,
        b1_interval: b1,
        b2_interval: b2,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityReport {
    pub holdout_weeks: usize,
    pub measure: GrowthMeasure,
    pub fit: QuadraticFit,
    pub verdict: ShapeVerdict,
    pub excluded_groups: Vec<String>,
}

/// Writes `observations.csv`, `fit.json` and `curve.csv`.
pub fn write_outputs(dir: &Path, observations: &[GrowthObservation], report: &DensityReport) -> Result<()> {
    let mut w = crate::persist::csv_writer(&dir.join("observations.csv"))?;
    w.write_record(["group", "density", "growth"])?;
    for o in observations {
        w.write_record([o.group.as_str(), &o.density.to_string(), &o.growth.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    crate::persist::write_json(&dir.join("fit.json"), report)?;

    let curve = marginal_effects(&report.fit, &density_grid(&report.fit, 101), 0.95);
    let mut w = crate::persist::csv_writer(&dir.join("curve.csv"))?;
    w.write_record(["density", "log10_density", "predicted", "lower", "upper"])?;
    for p in curve {
        let log_d = if p.density > 0.0 { p.density.log10().to_string() } else { String::new() };
        w.write_record([
            p.density.to_string(),
            log_d,
            p.predicted.to_string(),
            p.lower.to_string(),
            p.upper.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(d: &[f64], f: impl Fn(f64) -> f64) -> Vec<GrowthObservation> {
        d.iter()
            .enumerate()
            .map(|(i, &d)| GrowthObservation {
                group: format!("g{i}"),
                growth: f(d),
                density: d,
            })
            .collect()
    }

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn growth_endpoint_difference() {
        let mut row = vec![3.0; 30];
        row[29] = 3.5;
        let panel = GroupPanel::from_sizes(vec!["a".into(), "b".into()], vec![row, vec![2.0; 30]]).unwrap();
        let g = compute_growth(&panel, 24, GrowthMeasure::Endpoint).unwrap();
        assert_eq!(g.values, vec![("a".to_string(), 0.5), ("b".to_string(), 0.0)]);
    }

    #[test]
    fn growth_excludes_young_groups() {
        let mut young = vec![0.0; 30];
        for v in young.iter_mut().skip(10) {
            *v = 1.0;
        }
        let panel = GroupPanel::from_sizes(vec!["y".into()], vec![young]).unwrap();
        let g = compute_growth(&panel, 24, GrowthMeasure::Endpoint).unwrap();
        assert!(g.values.is_empty());
        assert_eq!(g.excluded, vec!["y"]);
    }

    #[test]
    fn growth_trailing_mean() {
        let row: Vec<f64> = (0..30).map(|t| 1.0 + t as f64 * 0.1).collect();
        let panel = GroupPanel::from_sizes(vec!["a".into()], vec![row]).unwrap();
        let g = compute_growth(&panel, 24, GrowthMeasure::TrailingMean { weeks: 4 }).unwrap();
        assert!((g.values[0].1 - 2.4).abs() < 1e-12);
    }

    #[test]
    fn exact_quadratic_recovered() {
        let o = obs(&grid(25), |d| 1.0 + 2.0 * d - 3.0 * d * d);
        let fit = fit_model1(&o).unwrap();
        for (got, want) in fit.coefficients.iter().zip([1.0, 2.0, -3.0]) {
            assert!((got - want).abs() < 1e-10);
        }
        let me = marginal_effects(&fit, &[0.0, 1.0], 0.95);
        assert!((me[0].predicted - 1.0).abs() < 1e-10);
        assert!(me[1].predicted.abs() < 1e-10);
        assert!(me.iter().all(|p| (p.upper - p.lower) < 1e-6));
    }

    #[test]
    fn collinear_density_is_singular() {
        let o = obs(&[0.2, 0.2, 0.5, 0.5], |d| d);
        match fit_model1(&o) {
            Err(Error::SingularDesign { columns }) => assert!(columns.contains(&"density^2".to_string())),
            other => panic!("expected singular design, got {other:?}"),
        }
    }

    #[test]
    fn cap_shape_detected() {
        let o = obs(&grid(101), |d| 1.0 + 2.0 * d - 3.0 * d * d + 1e-3 * (d * 37.0).sin());
        let fit = fit_model1(&o).unwrap();
        let v = shape_test(&fit, &grid(101));
        assert_eq!(v.shape, Shape::CapShaped);
        assert!((v.vertex.unwrap() - 1.0 / 3.0).abs() < 1e-3);
    }

    fn fixed_fit(coefficients: [f64; 3], b2_var: f64) -> QuadraticFit {
        QuadraticFit {
            coefficients,
            covariance: [[1e-6, 0.0, 0.0], [0.0, 1e-6, 0.0], [0.0, 0.0, b2_var]],
            n: 500,
            r_squared: 0.5,
            sigma2: 1.0,
            vertex: (coefficients[2] != 0.0).then(|| -coefficients[1] / (2.0 * coefficients[2])),
            density_min: 0.0,
            density_max: 1.0,
        }
    }

    #[test]
    fn tight_cap_and_wide_monotone() {
        assert_eq!(shape_test(&fixed_fit([1.0, 2.0, -3.0], 1e-6), &grid(11)).shape, Shape::CapShaped);
        assert_eq!(shape_test(&fixed_fit([1.0, 2.0, 0.0], 10.0), &grid(11)).shape, Shape::Monotone);
        assert_eq!(shape_test(&fixed_fit([1.0, -2.0, 3.0], 1e-6), &grid(11)).shape, Shape::UShaped);
    }

    #[test]
    fn zero_covariance_gives_zero_width() {
        let mut fit = fixed_fit([1.0, 2.0, -3.0], 0.0);
        fit.covariance = [[0.0; 3]; 3];
        let me = marginal_effects(&fit, &[0.3], 0.95);
        assert_eq!(me[0].upper - me[0].lower, 0.0);
    }
}
