//! Synthetic `(Δ, τ*)` pairs for fitting the temperature polynomial.
//!
//! Each sample is a block of logits on a square token grid with a random
//! token count, content sharpness and style mass. `Δ` is the sharpness gap
//! after mass allocation and `τ*` the temperature that restores the
//! content-only sharpness.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lama::{apply_lama, LogitGroups, MassTargets};
use crate::masks::resample_to_tokens;
use crate::rng::FixtureRng;
use crate::sts::{fit_temperature_model, r_squared, sharpness_gap, solve_temperature, CalibrationDataset, CalibrationSample, PolynomialFit};
use crate::tensor::Matrix;

/// Square token grids, 64 to 1024 tokens.
pub const GRID_SIDES: [usize; 5] = [8, 12, 16, 24, 32];
pub const QUERIES_PER_SAMPLE: usize = 16;
pub const STYLES_PER_SAMPLE: usize = 2;
/// Range of the content peak height (the sharpness level).
pub const PEAK_RANGE: (f32, f32) = (3.0, 8.0);
pub const PI_STAR_RANGE: (f32, f32) = (0.3, 0.95);
/// Peak radius as a fraction of the grid side.
const PEAK_RADIUS: f64 = 0.1;
const FIELD_SIDE: usize = 4;

/// Samples whose solved temperature hit the search boundary are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub requested: usize,
    pub kept: usize,
    pub at_boundary: usize,
}

/// Smooth random field on a `side × side` grid, upsampled from a coarse
/// lattice so its shape does not depend on the resolution.
fn smooth_field(rng: &mut FixtureRng, side: usize) -> Result<Vec<f64>> {
    let coarse = rng.bell_tensor(vec![FIELD_SIDE, FIELD_SIDE], 1.0);
    Ok(resample_to_tokens(&coarse, side, side)?.data().iter().map(|&v| f64::from(v)).collect())
}

/// Logits for one sample: each query sees a Gaussian bump of content
/// affinity around a random location plus a smooth field; style logits are
/// smooth fields only.
pub fn sample_logits(rng: &mut FixtureRng, side: usize, peak: f64) -> Result<LogitGroups> {
    let t = side * side;
    let rows = QUERIES_PER_SAMPLE;
    let mut content = Matrix::new(rows, t, vec![0.0; rows * t])?;
    let mut styles = (0..STYLES_PER_SAMPLE)
        .map(|_| Matrix::new(rows, t, vec![0.0; rows * t]))
        .collect::<Result<Vec<_>>>()?;
    let unit = (side - 1).max(1) as f64;
    for q in 0..rows {
        let (y0, x0) = (f64::from(rng.uniform01()), f64::from(rng.uniform01()));
        let field = smooth_field(rng, side)?;
        for (k, v) in content.row_mut(q).iter_mut().enumerate() {
            let (y, x) = ((k / side) as f64 / unit, (k % side) as f64 / unit);
            let d2 = (y - y0).powi(2) + (x - x0).powi(2);
            *v = peak * (-d2 / (2.0 * PEAK_RADIUS * PEAK_RADIUS)).exp() + field[k];
        }
        for s in styles.iter_mut() {
            let field = smooth_field(rng, side)?;
            s.row_mut(q).copy_from_slice(&field);
        }
    }
    LogitGroups::new(styles, content, 1)
}

fn sample(seed: u64, index: usize) -> Result<Option<CalibrationSample>> {
    let mut rng = FixtureRng::new(seed, index as u64);
    let side = GRID_SIDES[rng.below(GRID_SIDES.len() as u32) as usize];
    let pi_star = f64::from(rng.range(PI_STAR_RANGE.0, PI_STAR_RANGE.1));
    let peak = f64::from(rng.range(PEAK_RANGE.0, PEAK_RANGE.1));
    let groups = sample_logits(&mut rng, side, peak)?;
    let n = STYLES_PER_SAMPLE;
    let rows = QUERIES_PER_SAMPLE;
    let targets = MassTargets::new(vec![vec![pi_star / n as f64; rows]; n], vec![1.0 - pi_star; rows])?;
    let biased = apply_lama(&groups, &targets)?;
    let gap = sharpness_gap(&groups, &biased);
    let sol = solve_temperature(&biased.logits, gap.content_sharpness)?;
    Ok((!sol.at_boundary).then_some(CalibrationSample { delta: gap.delta, tau_star: sol.tau }))
}

/// `n` deterministic samples for `seed`, independent of thread count.
pub fn generate_dataset(n: usize, seed: u64) -> Result<(CalibrationDataset, GenerationStats)> {
    #[cfg(feature = "parallel")]
    let it = (0..n).into_par_iter();
    #[cfg(not(feature = "parallel"))]
    let it = 0..n;
    let raw = it.map(|i| sample(seed, i)).collect::<Result<Vec<_>>>()?;
    let samples: Vec<_> = raw.into_iter().flatten().collect();
    let stats = GenerationStats { requested: n, kept: samples.len(), at_boundary: n - samples.len() };
    let provenance = format!("synthetic logits, seed {seed}, {n} requested, {} kept", samples.len());
    Ok((CalibrationDataset { samples, provenance }, stats))
}

/// Every tenth sample goes to the held-out set.
pub fn split_holdout(data: &CalibrationDataset) -> (CalibrationDataset, Vec<CalibrationSample>) {
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, s) in data.samples.iter().enumerate() {
        if i % 10 == 9 { held.push(*s) } else { train.push(*s) }
    }
    (CalibrationDataset { samples: train, provenance: data.provenance.clone() }, held)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeReport {
    pub degree: usize,
    pub fit: PolynomialFit,
    pub heldout_r_squared: f64,
}

/// Fits each degree on the training split and scores it on the held-out split.
pub fn fit_degrees(data: &CalibrationDataset, degrees: &[usize]) -> Result<Vec<DegreeReport>> {
    let (train, held) = split_holdout(data);
    if held.is_empty() {
        return Err(invalid("too few samples for a held-out split"));
    }
    degrees
        .iter()
        .map(|&degree| {
            let fit = fit_temperature_model(&train, degree)?;
            let heldout_r_squared = r_squared(&fit.coefficients, &held).0;
            Ok(DegreeReport { degree, fit, heldout_r_squared })
        })
        .collect()
}
