//! Numerically stable reductions shared by every stage.
//!
//! Inputs may be stored as `f32` or `f64`; all accumulation happens in `f64`.

use crate::error::{invalid, MastError, Result};
use crate::tensor::Tensor;

fn check_finite<T: Copy + Into<f64>>(v: &[T]) -> Result<()> {
    if v.is_empty() {
        return Err(invalid("empty vector"));
    }
    if let Some(i) = v.iter().position(|&x| !x.into().is_finite()) {
        return Err(invalid(format!("non-finite entry at index {i}")));
    }
    Ok(())
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// `log Σ exp(v_j)` via max-shift.
pub fn logsumexp<T: Copy + Into<f64>>(v: &[T]) -> Result<f64> {
    check_finite(v)?;
    Ok(scaled_logsumexp(v, 1.0))
}

/// Softmax of `temperature · v`. Temperature multiplies the logits, so values
/// above one sharpen the distribution.
pub fn softmax<T: Copy + Into<f64>>(v: &[T], temperature: f64) -> Result<Vec<f64>> {
    check_finite(v)?;
    check_temperature(temperature)?;
    Ok(scaled_softmax(v, temperature))
}

/// `log p_max(τ v) = τ max(v) − logsumexp(τ v)`, always `≤ 0`.
pub fn log_p_max<T: Copy + Into<f64>>(v: &[T], temperature: f64) -> Result<f64> {
    check_finite(v)?;
    check_temperature(temperature)?;
    Ok(scaled_log_p_max(v, temperature))
}

/// Shannon entropy in nats of the softmax of `temperature · v`.
pub fn softmax_entropy<T: Copy + Into<f64>>(v: &[T], temperature: f64) -> Result<f64> {
    check_finite(v)?;
    check_temperature(temperature)?;
    Ok(scaled_entropy(v, temperature))
}

// The `scaled_*` helpers skip validation and tolerate `-inf` entries (masked
// columns) as long as at least one entry is finite.

pub(crate) fn row_max<T: Copy + Into<f64>>(v: &[T]) -> f64 {
    v.iter().map(|&x| x.into()).fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn scaled_logsumexp<T: Copy + Into<f64>>(v: &[T], t: f64) -> f64 {
    let m = row_max(v);
    let s: f64 = v.iter().map(|&x| (t * (x.into() - m)).exp()).sum();
    t * m + s.ln()
}

pub(crate) fn scaled_log_p_max<T: Copy + Into<f64>>(v: &[T], t: f64) -> f64 {
    // τ·max − lse(τ v) = −log Σ exp(τ (v − max)); the shifted form avoids
    // cancellation between two large terms.
    let m = row_max(v);
    let s: f64 = v.iter().map(|&x| (t * (x.into() - m)).exp()).sum();
    -s.ln()
}

pub(crate) fn scaled_softmax<T: Copy + Into<f64>>(v: &[T], t: f64) -> Vec<f64> {
    let m = row_max(v);
    let mut out: Vec<f64> = v.iter().map(|&x| (t * (x.into() - m)).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    out
}

pub(crate) fn scaled_entropy<T: Copy + Into<f64>>(v: &[T], t: f64) -> f64 {
    // H = log Z − τ E[ℓ] evaluated on the shifted logits.
    let m = row_max(v);
    let mut z = 0.0;
    let mut weighted = 0.0;
    for &x in v {
        let s = t * (x.into() - m);
        if s == f64::NEG_INFINITY {
            continue;
        }
        let e = s.exp();
        z += e;
        weighted += e * s;
    }
    (z.ln() - weighted / z).max(0.0)
}

/// Entropy in nats of an already normalized probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Cosine similarity of two tensors, flattened.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b, "cosine_similarity")?;
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(MastError::DegenerateInput(
            "cosine similarity of a zero-norm tensor".into(),
        ));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Per-channel mean and population standard deviation of a `C×H×W` tensor.
pub fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (c, h, w) = x.dims3()?;
    let plane = h * w;
    let mut means = Vec::with_capacity(c);
    let mut stds = Vec::with_capacity(c);
    for ch in x.data().chunks_exact(plane).take(c) {
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let var = ch
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / plane as f64;
        means.push(mean);
        stds.push(var.sqrt());
    }
    Ok((means, stds))
}
