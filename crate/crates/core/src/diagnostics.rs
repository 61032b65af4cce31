//! Boundary Laplacian statistics and attention sharpness profiles.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, MastError, Result};
use crate::masks::{smooth_mask, MaskSet};
use crate::numerics::{entropy, row_max};
use crate::rng::FixtureRng;
use crate::tensor::{Matrix, Tensor};

pub const DEFAULT_BAND_PX: usize = 3;

/// `|4-neighbour Laplacian|` with replicated borders.
pub fn laplacian_map(img: &Tensor) -> Result<Tensor> {
    let (h, w) = img.dims2()?;
    if h < 3 || w < 3 {
        return Err(invalid(format!("laplacian needs at least 3x3, got {h}x{w}")));
    }
    let at = |y: isize, x: isize| {
        img.get2(y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize) as f64
    };
    Tensor::from_fn2(h, w, |y, x| {
        let (y, x) = (y as isize, x as isize);
        let lap = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
        lap.abs() as f32
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    #[serde(skip)]
    pub laplacian_map: Option<Tensor>,
    pub boundary_band_mean: f64,
    pub interior_mean: f64,
    pub band_pixels: usize,
}

/// Pixels where some mask crosses the 0.5 level against a 4-neighbour.
fn crossing_pixels(ms: &MaskSet) -> Vec<bool> {
    let (h, w) = ms.grid();
    let mut out = vec![false; h * w];
    for m in ms.masks() {
        let above = |y: usize, x: usize| m.get2(y, x) >= 0.5;
        for y in 0..h {
            for x in 0..w {
                let here = above(y, x);
                let differs = (y > 0 && above(y - 1, x) != here)
                    || (y + 1 < h && above(y + 1, x) != here)
                    || (x > 0 && above(y, x - 1) != here)
                    || (x + 1 < w && above(y, x + 1) != here);
                out[y * w + x] |= differs;
            }
        }
    }
    out
}

/// Mean `map` value within `band_px` (Chebyshev) of a mask 0.5 crossing,
/// against the mean over all other pixels.
pub fn boundary_band_stats(map: &Tensor, ms: &MaskSet, band_px: usize) -> Result<BoundaryReport> {
    if band_px == 0 {
        return Err(invalid("band_px must be at least 1"));
    }
    let (h, w) = map.dims2()?;
    if ms.grid() != (h, w) {
        return Err(invalid(format!("mask grid {:?} differs from map {:?}", ms.grid(), (h, w))));
    }
    let crossing = crossing_pixels(ms);
    if !crossing.iter().any(|&c| c) {
        return Err(MastError::EmptyBand);
    }
    // Separable Chebyshev dilation: rows, then columns.
    let b = band_px as isize;
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = (x as isize - b).max(0) as usize;
            let hi = (x as isize + b).min(w as isize - 1) as usize;
            rows[y * w + x] = (lo..=hi).any(|xx| crossing[y * w + xx]);
        }
    }
    let mut band = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = (y as isize - b).max(0) as usize;
            let hi = (y as isize + b).min(h as isize - 1) as usize;
            band[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    let (mut sb, mut nb, mut si, mut ni) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (&v, &inb) in map.data().iter().zip(&band) {
        if inb {
            sb += v as f64;
            nb += 1;
        } else {
            si += v as f64;
            ni += 1;
        }
    }
    Ok(BoundaryReport {
        laplacian_map: None,
        boundary_band_mean: sb / nb as f64,
        interior_mean: if ni == 0 { 0.0 } else { si / ni as f64 },
        band_pixels: nb,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub mean_entropy: f64,
    pub mean_log_p_max: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Entropy (nats) and `log p_max` per row of an attention matrix.
pub fn attention_entropy_profile(weights: &Matrix) -> Result<EntropyProfile> {
    let mut entropies = Vec::with_capacity(weights.rows);
    let mut lpm = 0.0;
    for (i, r) in weights.rows().enumerate() {
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > 1e-6 || r.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
            return Err(invalid(format!("row {i} is not a probability vector (sum {s})")));
        }
        entropies.push(entropy(r));
        lpm += row_max(r).ln();
    }
    let n = weights.rows as f64;
    let mean_entropy = entropies.iter().sum::<f64>() / n;
    entropies.sort_by(|a, b| a.total_cmp(b));
    Ok(EntropyProfile {
        mean_entropy,
        mean_log_p_max: lpm / n,
        q10: quantile(&entropies, 0.1),
        q50: quantile(&entropies, 0.5),
        q90: quantile(&entropies, 0.9),
    })
}

/// Hard and smooth composites of two textures split by the same mask.
#[derive(Debug, Clone)]
pub struct CompositePair {
    pub hard: Tensor,
    pub smooth: Tensor,
    pub mask: MaskSet,
}

/// Two textured regions with different base intensity, joined along a
/// randomly placed vertical boundary. The hard composite switches at the
/// mask; the smooth one blends through a Gaussian-smoothed copy of it.
pub fn paired_composite(seed: u64, h: usize, w: usize, sigma: f64) -> Result<CompositePair> {
    if h < 3 || w < 8 {
        return Err(invalid("composite needs at least 3x8 pixels"));
    }
    let mut rng = FixtureRng::new(seed, 0xC0_4D05);
    let split = w / 4 + (rng.next_u32() as usize % (w / 2));
    let base_a = 0.2 + 0.1 * rng.uniform01();
    let base_b = 0.7 + 0.1 * rng.uniform01();
    let tex_a: Vec<f32> = (0..h * w).map(|_| 0.05 * rng.uniform()).collect();
    let tex_b: Vec<f32> = (0..h * w).map(|_| 0.05 * rng.uniform()).collect();
    let hard_mask = Tensor::from_fn2(h, w, |_, x| if x >= split { 1.0 } else { 0.0 })?;
    let soft_mask = smooth_mask(&hard_mask, sigma)?;
    let blend = |m: &Tensor| -> Result<Tensor> {
        Tensor::from_fn2(h, w, |y, x| {
            let i = y * w + x;
            let mv = m.get2(y, x);
            (1.0 - mv) * (base_a + tex_a[i]) + mv * (base_b + tex_b[i])
        })
    };
    Ok(CompositePair {
        hard: blend(&hard_mask)?,
        smooth: blend(&soft_mask)?,
        mask: MaskSet::new(vec![hard_mask], (h, w))?,
    })
}

/// Boundary-band Laplacian means for one composite pair: `(hard, smooth)`.
pub fn paired_boundary_means(pair: &CompositePair, band_px: usize) -> Result<(BoundaryReport, BoundaryReport)> {
    let hard = boundary_band_stats(&laplacian_map(&pair.hard)?, &pair.mask, band_px)?;
    let smooth = boundary_band_stats(&laplacian_map(&pair.smooth)?, &pair.mask, band_px)?;
    Ok((hard, smooth))
}

/// Min-max scales a map to `[0, 1]`; returns the scaled map with `(min, max)`.
pub fn min_max_scale(map: &Tensor) -> (Tensor, f32, f32) {
    let lo = map.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let scaled = if span > 0.0 { map.map(|v| (v - lo) / span) } else { map.map(|_| 0.0) };
    (scaled, lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sts::apply_sts;
    use approx::assert_abs_diff_eq;

    #[test]
    fn laplacian_cases() {
        let c = Tensor::filled(vec![5, 5], 2.0).unwrap();
        assert!(laplacian_map(&c).unwrap().data().iter().all(|&v| v == 0.0));

        let ramp = Tensor::from_fn2(6, 7, |y, x| 0.5 * y as f32 - 0.25 * x as f32).unwrap();
        let l = laplacian_map(&ramp).unwrap();
        for y in 1..5 {
            for x in 1..6 {
                assert_abs_diff_eq!(l.get2(y, x), 0.0, epsilon = 1e-6);
            }
        }

        // Column step 0 | 1 between x=2 and x=3; hand convolution gives 1 on
        // both sides of the step and 0 elsewhere.
        let step = Tensor::from_fn2(4, 6, |_, x| (x >= 3) as u8 as f32).unwrap();
        let l = laplacian_map(&step).unwrap();
        for y in 0..4 {
            assert_eq!(l.row(y), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        }
        assert!(laplacian_map(&Tensor::zeros(vec![2, 5]).unwrap()).is_err());
    }

    #[test]
    fn band_stats_cases() {
        let mask = Tensor::from_fn2(10, 12, |_, x| (x >= 6) as u8 as f32).unwrap();
        let ms = MaskSet::new(vec![mask.clone()], (10, 12)).unwrap();
        let lap = laplacian_map(&mask).unwrap();
        let r = boundary_band_stats(&lap, &ms, 1).unwrap();
        assert!(r.boundary_band_mean > 0.3);
        assert_eq!(r.interior_mean, 0.0);
        assert_eq!(r.band_pixels, 10 * 4);

        let zero = Tensor::zeros(vec![10, 12]).unwrap();
        let r = boundary_band_stats(&zero, &ms, 3).unwrap();
        assert_eq!((r.boundary_band_mean, r.interior_mean), (0.0, 0.0));

        let flat = MaskSet::new(vec![Tensor::filled(vec![10, 12], 1.0).unwrap()], (10, 12)).unwrap();
        assert!(matches!(boundary_band_stats(&zero, &flat, 3), Err(MastError::EmptyBand)));
    }

    #[test]
    fn smooth_composite_has_weaker_boundary() {
        for seed in 0..5 {
            let pair = paired_composite(seed, 32, 32, 2.0).unwrap();
            let (hard, smooth) = paired_boundary_means(&pair, DEFAULT_BAND_PX).unwrap();
            assert!(smooth.boundary_band_mean < hard.boundary_band_mean);
            assert!(hard.boundary_band_mean > hard.interior_mean);
        }
    }

    #[test]
    fn entropy_profile_cases() {
        let uniform = Matrix::new(3, 8, vec![0.125; 24]).unwrap();
        let p = attention_entropy_profile(&uniform).unwrap();
        assert_abs_diff_eq!(p.mean_entropy, 8f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(p.mean_log_p_max, -(8f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(p.q50, 8f64.ln(), epsilon = 1e-12);

        let mut onehot = vec![0.0; 12];
        onehot[1] = 1.0;
        onehot[4 + 3] = 1.0;
        onehot[8] = 1.0;
        let p = attention_entropy_profile(&Matrix::new(3, 4, onehot).unwrap()).unwrap();
        assert_eq!(p.mean_entropy, 0.0);

        let logits = Matrix::new(2, 4, vec![0.3, 1.2, -0.5, 0.9, 2.0, 0.0, 0.4, 0.1]).unwrap();
        let h1 = attention_entropy_profile(&apply_sts(&logits, 1.0).unwrap()).unwrap();
        let h2 = attention_entropy_profile(&apply_sts(&logits, 2.0).unwrap()).unwrap();
        assert!(h2.mean_entropy < h1.mean_entropy);

        let bad = Matrix::new(1, 2, vec![0.5, 0.6]).unwrap();
        assert!(attention_entropy_profile(&bad).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_abs_diff_eq!(quantile(&s, 0.1), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(quantile(&s, 0.5), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(quantile(&[2.0, 4.0], 0.5), 3.0, epsilon = 1e-12);
    }
}
