//! Sharpness-aware temperature scaling.
//!
//! Sharpness is the row mean of `log p_max`. The gap `Δ` between content and
//! concatenated logits is mapped to a temperature either by a quadratic model
//! or by solving `mean log p_max(τ ℓ_concat) = target` directly, which is
//! well posed because `log p_max(τ ℓ)` is non-decreasing in `τ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MastError, Result};
use crate::lama::{BiasedLogits, LogitGroups};
use crate::numerics::{scaled_log_p_max, scaled_softmax};
use crate::tensor::Matrix;

pub const DEFAULT_COEFFICIENTS: [f64; 3] = [0.08395, 0.43705, 1.00998];
pub const CLAMP_MIN: f64 = 1.0;

pub const GRID_MIN: f64 = 0.5;
pub const GRID_MAX: f64 = 8.0;
pub const GRID_STEP: f64 = 0.01;
pub const BISECTION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpnessGap {
    pub delta: f64,
    pub content_sharpness: f64,
    pub concat_sharpness: f64,
}

/// Mean over rows of `log p_max(τ · row)`.
pub fn mean_sharpness(logits: &Matrix, temperature: f64) -> f64 {
    logits.rows().map(|r| scaled_log_p_max(r, temperature)).sum::<f64>() / logits.rows as f64
}

pub fn sharpness_gap(groups: &LogitGroups, biased: &BiasedLogits) -> SharpnessGap {
    let content_sharpness = mean_sharpness(groups.content(), 1.0);
    let concat_sharpness = mean_sharpness(&biased.logits, 1.0);
    SharpnessGap {
        delta: content_sharpness - concat_sharpness,
        content_sharpness,
        concat_sharpness,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSolution {
    pub tau: f64,
    /// `|mean log p_max(τ ℓ) − target|` at the returned `τ`.
    pub residual: f64,
    /// The target lies outside the range reachable on the grid; `tau` is the
    /// nearer grid end.
    pub at_boundary: bool,
}

fn grid_point(k: usize) -> f64 {
    GRID_MIN + k as f64 * GRID_STEP
}

fn grid_len() -> usize {
    ((GRID_MAX - GRID_MIN) / GRID_STEP).round() as usize + 1
}

/// Finds `τ*` on `[0.5, 8]` such that the mean sharpness of `τ ℓ` matches
/// `target`. The 0.01 grid is searched by bisection on its index, then the
/// bracketing cell is refined by bisection to 1e-4.
pub fn solve_temperature(concat: &Matrix, target: f64) -> Result<TemperatureSolution> {
    if !(target.is_finite() && target <= 0.0) {
        return Err(invalid(format!("target sharpness must be finite and <= 0, got {target}")));
    }
    let degenerate = concat.rows().all(|r| {
        let mut finite = r.iter().filter(|v| v.is_finite());
        match finite.next() {
            Some(&first) => finite.all(|&v| v == first),
            None => true,
        }
    });
    if degenerate {
        return Err(MastError::DegenerateLogits(
            "every row is constant; sharpness does not depend on temperature".into(),
        ));
    }
    let f = |t: f64| mean_sharpness(concat, t);
    let n = grid_len();
    let (lo_val, hi_val) = (f(GRID_MIN), f(grid_point(n - 1)));
    if target <= lo_val {
        return Ok(TemperatureSolution { tau: GRID_MIN, residual: lo_val - target, at_boundary: target < lo_val });
    }
    if target >= hi_val {
        let tau = grid_point(n - 1);
        return Ok(TemperatureSolution { tau, residual: target - hi_val, at_boundary: target > hi_val });
    }

    // Smallest grid index whose sharpness reaches the target.
    let (mut lo, mut hi) = (0usize, n - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if f(grid_point(mid)) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (mut a, mut b) = (grid_point(lo), grid_point(hi));
    while b - a > BISECTION_TOL {
        let mid = 0.5 * (a + b);
        if f(mid) >= target {
            b = mid;
        } else {
            a = mid;
        }
    }
    let (ra, rb) = ((f(a) - target).abs(), (f(b) - target).abs());
    let (tau, residual) = if ra <= rb { (a, ra) } else { (b, rb) };
    Ok(TemperatureSolution { tau, residual, at_boundary: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub delta: f64,
    pub tau_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDataset {
    pub samples: Vec<CalibrationSample>,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialFit {
    /// Highest degree first: `[a, b, c]` for `aΔ² + bΔ + c`.
    pub coefficients: Vec<f64>,
    pub r_squared: f64,
    /// Targets had zero variance; `r_squared` is reported as 1 by convention.
    pub constant_targets: bool,
}

pub fn eval_polynomial(coefficients: &[f64], x: f64) -> f64 {
    coefficients.iter().fold(0.0, |acc, &c| acc * x + c)
}

/// `1 − SS_res / SS_tot` of the raw polynomial on `samples`; 1 when the
/// targets are constant and fit exactly.
pub fn r_squared(coefficients: &[f64], samples: &[CalibrationSample]) -> (f64, bool) {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.tau_star).sum::<f64>() / n;
    let ss_tot: f64 = samples.iter().map(|s| (s.tau_star - mean).powi(2)).sum();
    let ss_res: f64 = samples
        .iter()
        .map(|s| (s.tau_star - eval_polynomial(coefficients, s.delta)).powi(2))
        .sum();
    if samples.iter().all(|s| s.tau_star == samples[0].tau_star) || ss_tot == 0.0 {
        if ss_res > 1e-18 * n {
            return (0.0, true);
        }
        (1.0, true)
    } else {
        (1.0 - ss_res / ss_tot, false)
    }
}

/// Ordinary least squares through a Householder QR of the Vandermonde matrix.
pub fn fit_temperature_model(data: &CalibrationDataset, degree: usize) -> Result<PolynomialFit> {
    if !(1..=4).contains(&degree) {
        return Err(invalid(format!("degree must be 1..=4, got {degree}")));
    }
    let samples = &data.samples;
    let mut distinct: Vec<f64> = samples.iter().map(|s| s.delta).collect();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    if distinct.len() < degree + 1 {
        return Err(MastError::SingularFit(format!(
            "{} distinct deltas cannot determine a degree-{degree} polynomial",
            distinct.len()
        )));
    }
    let cols = degree + 1;
    let a = DMatrix::from_fn(samples.len(), cols, |i, j| samples[i].delta.powi((degree - j) as i32));
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.tau_star));

    // Column scaling keeps the triangular solve well conditioned when deltas
    // are far from unit magnitude.
    let scales: Vec<f64> = (0..cols)
        .map(|j| a.column(j).amax().max(f64::MIN_POSITIVE))
        .collect();
    let mut scaled = a.clone();
    for (j, s) in scales.iter().enumerate() {
        scaled.column_mut(j).unscale_mut(*s);
    }
    let qr = scaled.qr();
    let r = qr.r();
    let diag_max = (0..cols).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..cols).any(|i| r[(i, i)].abs() <= 1e-12 * diag_max) {
        return Err(MastError::SingularFit("design matrix is rank deficient".into()));
    }
    let qty = qr.q().transpose() * y;
    let sol = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| MastError::SingularFit("triangular solve failed".into()))?;
    let coefficients: Vec<f64> = sol.iter().zip(&scales).map(|(c, s)| c / s).collect();
    let (r_squared, constant_targets) = self::r_squared(&coefficients, samples);
    if constant_targets {
        log::warn!("calibration targets are constant; R^2 reported as 1");
    }
    Ok(PolynomialFit { coefficients, r_squared, constant_targets })
}

/// Polynomial `τ(Δ)` clamped from below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub coefficients: Vec<f64>,
    pub clamp_min: f64,
}

impl Default for TemperatureModel {
    fn default() -> Self {
        Self { coefficients: DEFAULT_COEFFICIENTS.to_vec(), clamp_min: CLAMP_MIN }
    }
}

impl TemperatureModel {
    pub fn predict(&self, delta: f64) -> f64 {
        eval_polynomial(&self.coefficients, delta).max(self.clamp_min)
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len().saturating_sub(1)
    }
}

pub fn predict_temperature(model: &TemperatureModel, delta: f64) -> f64 {
    model.predict(delta)
}

/// On-disk coefficient file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientFile {
    pub degree: usize,
    pub coefficients: Vec<f64>,
    pub clamp_min: f64,
    pub r_squared: f64,
}

impl CoefficientFile {
    pub fn from_fit(fit: &PolynomialFit, r_squared: f64) -> Self {
        Self {
            degree: fit.coefficients.len() - 1,
            coefficients: fit.coefficients.clone(),
            clamp_min: CLAMP_MIN,
            r_squared,
        }
    }

    pub fn model(&self) -> Result<TemperatureModel> {
        if self.coefficients.len() != self.degree + 1 {
            return Err(MastError::Format(format!(
                "degree {} needs {} coefficients, found {}",
                self.degree,
                self.degree + 1,
                self.coefficients.len()
            )));
        }
        Ok(TemperatureModel { coefficients: self.coefficients.clone(), clamp_min: self.clamp_min })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| MastError::Format(format!("coefficient file: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Row-wise softmax of `τ · logits`.
pub fn apply_sts(biased: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    let data = biased.rows().flat_map(|r| scaled_softmax(r, tau)).collect();
    Matrix::new(biased.rows, biased.cols, data)
}

/// Mean per-row standard deviation of the attention probabilities. Kept for
/// comparison only; it grows with support size rather than peak dominance.
pub fn std_sharpness(weights: &Matrix) -> f64 {
    let n = weights.cols as f64;
    weights
        .rows()
        .map(|r| {
            let mean = r.iter().sum::<f64>() / n;
            (r.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .sum::<f64>()
        / weights.rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::entropy;
    use approx::assert_abs_diff_eq;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn gap_zero_when_content_only() {
        let content = m(2, 3, &[1.0, 0.0, -1.0, 0.3, 0.2, 2.0]);
        let style = m(2, 1, &[0.0, 0.0]);
        let g = LogitGroups::new(vec![style], content.clone(), 4).unwrap();
        let t = crate::lama::MassTargets::new(vec![vec![0.0, 0.0]], vec![1.0, 1.0]).unwrap();
        let biased = crate::lama::apply_lama(&g, &t).unwrap();
        let gap = sharpness_gap(&g, &biased);
        assert_abs_diff_eq!(gap.delta, 0.0, epsilon = 1e-15);
        assert_eq!(gap.delta, gap.content_sharpness - gap.concat_sharpness);
    }

    #[test]
    fn gap_against_uniform_concat() {
        let content = m(1, 3, &[60.0, 0.0, 0.0]);
        let g = LogitGroups::new(vec![m(1, 2, &[0.0, 0.0])], content.clone(), 1).unwrap();
        let uniform = BiasedLogits { logits: m(1, 5, &[0.0; 5]), group_widths: vec![2, 3] };
        let gap = sharpness_gap(&g, &uniform);
        let lpm = crate::numerics::log_p_max(content.row(0), 1.0).unwrap();
        assert_abs_diff_eq!(gap.delta, lpm + 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn solver_examples() {
        let two = m(1, 2, &[1.0, 0.0]);
        let sol = solve_temperature(&two, 0.9f64.ln()).unwrap();
        assert_abs_diff_eq!(sol.tau, 9f64.ln(), epsilon = 0.01);
        assert!(!sol.at_boundary);

        let x = m(2, 4, &[0.3, -0.2, 1.1, 0.0, 2.0, 0.5, 0.1, -1.0]);
        let sol = solve_temperature(&x, mean_sharpness(&x, 1.0)).unwrap();
        assert_abs_diff_eq!(sol.tau, 1.0, epsilon = GRID_STEP);

        let sol = solve_temperature(&x, -50.0).unwrap();
        assert_eq!(sol.tau, GRID_MIN);
        assert!(sol.at_boundary && sol.residual > 0.0);
        let sol = solve_temperature(&x, -1e-12).unwrap();
        assert_abs_diff_eq!(sol.tau, GRID_MAX, epsilon = 1e-9);
        assert!(sol.at_boundary);

        let flat = m(2, 3, &[1.0; 6]);
        assert!(matches!(solve_temperature(&flat, -0.5), Err(MastError::DegenerateLogits(_))));
        assert!(solve_temperature(&x, 0.5).is_err());
    }

    #[test]
    fn grid_has_expected_extent() {
        assert_eq!(grid_len(), 751);
        assert_abs_diff_eq!(grid_point(750), GRID_MAX, epsilon = 1e-12);
    }

    #[test]
    fn predict_examples() {
        let model = TemperatureModel::default();
        assert_eq!(model.predict(0.0), 1.00998);
        assert_abs_diff_eq!(model.predict(1.0), 1.53098, epsilon = 1e-12);
        assert_abs_diff_eq!(eval_polynomial(&model.coefficients, -5.0), 0.92348, epsilon = 1e-12);
        assert_eq!(model.predict(-5.0), 1.0);
    }

    #[test]
    fn fit_recovers_exact_polynomial() {
        let samples = (0..200)
            .map(|i| {
                let delta = -1.0 + i as f64 * 0.025;
                CalibrationSample { delta, tau_star: eval_polynomial(&DEFAULT_COEFFICIENTS, delta) }
            })
            .collect();
        let data = CalibrationDataset { samples, provenance: "exact".into() };
        let fit = fit_temperature_model(&data, 2).unwrap();
        for (got, want) in fit.coefficients.iter().zip(DEFAULT_COEFFICIENTS) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fit_constant_targets() {
        let samples = (0..10).map(|i| CalibrationSample { delta: i as f64, tau_star: 1.7 }).collect();
        let fit = fit_temperature_model(&CalibrationDataset { samples, provenance: String::new() }, 2).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.coefficients[1], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.coefficients[2], 1.7, epsilon = 1e-10);
        assert_eq!(fit.r_squared, 1.0);
        assert!(fit.constant_targets);
    }

    #[test]
    fn fit_rejects_too_few_distinct_deltas() {
        let samples = vec![
            CalibrationSample { delta: 1.0, tau_star: 1.0 },
            CalibrationSample { delta: 1.0, tau_star: 2.0 },
            CalibrationSample { delta: 2.0, tau_star: 2.0 },
        ];
        let data = CalibrationDataset { samples, provenance: String::new() };
        assert!(matches!(fit_temperature_model(&data, 2), Err(MastError::SingularFit(_))));
        assert!(fit_temperature_model(&data, 1).is_ok());
    }

    #[test]
    fn coefficient_file_roundtrip_and_schema() {
        let f = CoefficientFile { degree: 2, coefficients: DEFAULT_COEFFICIENTS.to_vec(), clamp_min: 1.0, r_squared: 0.93 };
        let json = f.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 4);
        for k in ["degree", "coefficients", "clamp_min", "r_squared"] {
            assert!(v.get(k).is_some());
        }
        assert_eq!(CoefficientFile::from_json(&json).unwrap(), f);
        assert!(CoefficientFile::from_json(r#"{"degree":1,"coefficients":[1,2],"clamp_min":1,"r_squared":1,"x":0}"#).is_err());
        let bad = CoefficientFile { degree: 3, ..f };
        assert!(bad.model().is_err());
    }

    #[test]
    fn sts_sharpens() {
        let x = m(3, 5, &[0.1, 0.9, -0.3, 0.4, 0.0, 1.2, -0.7, 0.3, 0.3, 0.8, -2.0, 0.5, 0.6, 1.5, 0.2]);
        assert_eq!(apply_sts(&x, 1.0).unwrap().data, x.rows().flat_map(|r| scaled_softmax(r, 1.0)).collect::<Vec<_>>());
        let h = |w: &Matrix| w.rows().map(entropy).sum::<f64>() / w.rows as f64;
        assert!(h(&apply_sts(&x, 2.0).unwrap()) <= h(&apply_sts(&x, 1.0).unwrap()));
        let hot = apply_sts(&x, 200.0).unwrap();
        for r in hot.rows() {
            assert!(r.iter().cloned().fold(0.0, f64::max) > 0.99);
        }
        assert!(apply_sts(&x, 0.0).is_err());
    }

    #[test]
    fn std_sharpness_of_uniform_is_zero() {
        let w = apply_sts(&m(2, 4, &[0.0; 8]), 1.0).unwrap();
        assert_abs_diff_eq!(std_sharpness(&w), 0.0, epsilon = 1e-15);
    }
}
