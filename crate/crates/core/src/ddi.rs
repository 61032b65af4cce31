//! Discrepancy-aware detail injection: a Gaussian high-pass in the frequency
//! domain extracts content detail, which is added back scaled by the cosine
//! discrepancy between stylized and content features.

use crate::error::{invalid, Result};
use crate::fft::{fft2, ifft2_complex};
use crate::numerics::cosine_similarity;
use crate::tensor::{ComplexTensor, Tensor};

pub const DEFAULT_RADIUS: f64 = 0.3;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HighPassSpec {
    pub r: f64,
    pub epsilon: f64,
}

impl Default for HighPassSpec {
    fn default() -> Self {
        Self { r: DEFAULT_RADIUS, epsilon: DEFAULT_EPSILON }
    }
}

impl HighPassSpec {
    pub fn new(r: f64, epsilon: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) || !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(invalid(format!("high-pass needs r > 0 and epsilon > 0, got r={r} epsilon={epsilon}")));
        }
        Ok(Self { r, epsilon })
    }

    /// `1 − exp(−D² / (2r² + ε))` at normalized distance `d` from DC.
    pub fn gain(&self, d: f64) -> f64 {
        1.0 - (-(d * d) / (2.0 * self.r * self.r + self.epsilon)).exp()
    }
}

#[derive(Debug, Clone)]
pub struct ResidualFeatures {
    pub phi_c: Tensor,
    pub phi_cs: Tensor,
    pub delta_phi_cs: Tensor,
}

/// Normalized distance `|k| / n` of bin `k` from DC, folding the upper half
/// onto negative frequencies.
fn norm_freq(k: usize, n: usize) -> f64 {
    k.min(n - k) as f64 / n as f64
}

/// Mask over the centered spectrum (DC at `(⌊h/2⌋, ⌊w/2⌋)`), for display.
pub fn gaussian_highpass_mask(h: usize, w: usize, spec: &HighPassSpec) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(invalid("mask extents must be positive"));
    }
    Tensor::from_fn2(h, w, |y, x| {
        let dy = (y as f64 - (h / 2) as f64) / h as f64;
        let dx = (x as f64 - (w / 2) as f64) / w as f64;
        spec.gain((dy * dy + dx * dx).sqrt()) as f32
    })
}

/// Same mask in unshifted FFT layout, kept in f64.
fn highpass_gains(h: usize, w: usize, spec: &HighPassSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = norm_freq(y, h);
        for x in 0..w {
            let fx = norm_freq(x, w);
            out.push(spec.gain((fy * fy + fx * fx).sqrt()));
        }
    }
    out
}

/// Applies `gains` (unshifted layout) to each `H×W` channel of a `C×H×W` tensor.
fn filter_channels(x: &Tensor, gains: &[f64]) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(c * plane);
    for ch in x.data().chunks_exact(plane) {
        let t = Tensor::new(vec![h, w], ch.to_vec())?;
        let f = fft2(&t)?;
        let filtered = ComplexTensor::new(
            f.shape.clone(),
            f.re.iter().zip(gains).map(|(v, g)| v * g).collect(),
            f.im.iter().zip(gains).map(|(v, g)| v * g).collect(),
        )?;
        // The mask is symmetric under k → n − k, so the result is real up to
        // rounding; the imaginary residue is discarded.
        out.extend(ifft2_complex(&filtered)?.iter().map(|z| z.re as f32));
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn extract_high_freq(phi_c: &Tensor, spec: &HighPassSpec) -> Result<Tensor> {
    let (_, h, w) = phi_c.dims3()?;
    filter_channels(phi_c, &highpass_gains(h, w, spec))
}

/// Filters with the squared gains; equals two successive applications of
/// [`extract_high_freq`].
pub fn extract_high_freq_squared(phi_c: &Tensor, spec: &HighPassSpec) -> Result<Tensor> {
    let (_, h, w) = phi_c.dims3()?;
    let g: Vec<f64> = highpass_gains(h, w, spec).iter().map(|g| g * g).collect();
    filter_channels(phi_c, &g)
}

/// `ω = 1 − cos(φ_cs, φ_c)` over the flattened tensors; 1 if either is zero.
pub fn discrepancy_weight(phi_cs: &Tensor, phi_c: &Tensor) -> Result<f64> {
    match cosine_similarity(phi_cs, phi_c) {
        Ok(c) => Ok(1.0 - c),
        Err(crate::error::MastError::DegenerateInput(_)) => Ok(1.0),
        Err(e) => Err(e),
    }
}

/// `φ_cs + Δφ_cs + ω · φ_c^high` with an explicit weight.
pub fn inject_with_weight(f: &ResidualFeatures, high: &Tensor, omega: f64) -> Result<Tensor> {
    f.phi_cs.ensure_same_shape(&f.delta_phi_cs, "inject_details")?;
    f.phi_cs.ensure_same_shape(high, "inject_details")?;
    let base = f.phi_cs.zip_map(&f.delta_phi_cs, |a, b| a + b)?;
    base.zip_map(high, |b, h| (b as f64 + omega * h as f64) as f32)
}

#[derive(Debug, Clone)]
pub struct Injection {
    pub output: Tensor,
    pub omega: f64,
    pub high: Tensor,
}

pub fn inject_details(f: &ResidualFeatures, spec: &HighPassSpec) -> Result<Injection> {
    f.phi_c.ensure_same_shape(&f.phi_cs, "inject_details")?;
    let omega = discrepancy_weight(&f.phi_cs, &f.phi_c)?;
    let high = extract_high_freq(&f.phi_c, spec)?;
    let output = inject_with_weight(f, &high, omega)?;
    Ok(Injection { output, omega, high })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn texture(c: usize, h: usize, w: usize, salt: f32) -> Tensor {
        let data = (0..c * h * w)
            .map(|i| ((i as f32 * 0.61 + salt).sin() * 1.7 + (i as f32 * 2.3).cos()) * 0.5)
            .collect();
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn mask_values() {
        let spec = HighPassSpec::default();
        assert_eq!(spec.gain(0.0), 0.0);
        assert_abs_diff_eq!(spec.gain(0.3 * 2f64.sqrt()), 1.0 - (-1f64).exp(), epsilon = 1e-6);
        assert_abs_diff_eq!(1.0 - (-1f64).exp(), 0.632121, epsilon = 1e-6);

        let m = gaussian_highpass_mask(8, 6, &spec).unwrap();
        assert_eq!(m.get2(4, 3), 0.0);
        assert!(m.data().iter().all(|&v| (0.0..1.0).contains(&v)));

        let tiny = HighPassSpec::new(1e-6, 1e-14).unwrap();
        let m = gaussian_highpass_mask(5, 5, &tiny).unwrap();
        for (i, &v) in m.data().iter().enumerate() {
            if i == 12 {
                assert_eq!(v, 0.0);
            } else {
                assert!(v > 0.999_999);
            }
        }
        assert!(HighPassSpec::new(0.0, 1e-8).is_err());
    }

    #[test]
    fn constant_channel_is_removed() {
        let x = Tensor::filled(vec![2, 7, 9], 3.5).unwrap();
        let hp = extract_high_freq(&x, &HighPassSpec::default()).unwrap();
        assert!(hp.max_abs() < 1e-4);
    }

    #[test]
    fn checkerboard_passes_scaled_by_nyquist_gain() {
        let spec = HighPassSpec::default();
        let x = Tensor::new(
            vec![1, 8, 8],
            (0..64).map(|i| if (i / 8 + i % 8) % 2 == 0 { 1.0 } else { -1.0 }).collect(),
        )
        .unwrap();
        let hp = extract_high_freq(&x, &spec).unwrap();
        let g = spec.gain((0.5f64 * 0.5 + 0.5 * 0.5).sqrt());
        assert_abs_diff_eq!(g, 0.9378, epsilon = 1e-4);
        for (a, b) in hp.data().iter().zip(x.data()) {
            assert_abs_diff_eq!(*a as f64, g * *b as f64, epsilon = 1e-5);
        }
    }

    #[test]
    fn linear_and_squared_mask_identity() {
        let spec = HighPassSpec::default();
        let x = texture(3, 10, 12, 0.3);
        let hp = extract_high_freq(&x, &spec).unwrap();
        let scaled = extract_high_freq(&x.map(|v| 2.5 * v), &spec).unwrap();
        assert!(scaled.max_abs_diff(&hp.map(|v| 2.5 * v)).unwrap() < 1e-5);
        let twice = extract_high_freq(&hp, &spec).unwrap();
        let squared = extract_high_freq_squared(&x, &spec).unwrap();
        assert!(twice.max_abs_diff(&squared).unwrap() < 1e-5);
        for ch in hp.data().chunks(120) {
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / 120.0;
            assert!(mean.abs() <= 1e-4 * x.max_abs() as f64);
        }
    }

    #[test]
    fn weight_examples() {
        let a = texture(1, 4, 4, 0.0);
        assert_abs_diff_eq!(discrepancy_weight(&a, &a).unwrap(), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(discrepancy_weight(&a.map(|v| -v), &a).unwrap(), 2.0, epsilon = 1e-6);
        let e1 = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::new(vec![2], vec![0.0, 3.0]).unwrap();
        assert_abs_diff_eq!(discrepancy_weight(&e1, &e2).unwrap(), 1.0, epsilon = 1e-6);
        let z = Tensor::zeros(vec![2]).unwrap();
        assert_eq!(discrepancy_weight(&z, &e1).unwrap(), 1.0);
    }

    #[test]
    fn weight_grows_with_rotation() {
        let base = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let mut prev = -1.0;
        for k in 0..=36 {
            let th = k as f64 * std::f64::consts::PI / 36.0;
            let v = Tensor::new(vec![2], vec![th.cos() as f32, th.sin() as f32]).unwrap();
            let w = discrepancy_weight(&v, &base).unwrap();
            assert!(w >= prev);
            prev = w;
        }
    }

    #[test]
    fn injection_cases() {
        let spec = HighPassSpec::default();
        let phi_c = texture(2, 6, 6, 0.0);
        let delta = texture(2, 6, 6, 4.0).map(|v| 0.1 * v);
        let same = ResidualFeatures { phi_c: phi_c.clone(), phi_cs: phi_c.clone(), delta_phi_cs: delta.clone() };
        let out = inject_details(&same, &spec).unwrap();
        let base = phi_c.zip_map(&delta, |a, b| a + b).unwrap();
        assert!(out.output.max_abs_diff(&base).unwrap() < 1e-5);

        let flat = Tensor::filled(vec![2, 6, 6], 0.7).unwrap();
        let stylized = texture(2, 6, 6, 1.1);
        let f = ResidualFeatures { phi_c: flat, phi_cs: stylized.clone(), delta_phi_cs: delta.clone() };
        let out = inject_details(&f, &spec).unwrap();
        let base = stylized.zip_map(&delta, |a, b| a + b).unwrap();
        assert!(out.output.max_abs_diff(&base).unwrap() < 1e-4);

        let f = ResidualFeatures { phi_c: phi_c.clone(), phi_cs: stylized.clone(), delta_phi_cs: delta.clone() };
        let out = inject_details(&f, &spec).unwrap();
        let omega = discrepancy_weight(&stylized, &phi_c).unwrap();
        let high = extract_high_freq(&phi_c, &spec).unwrap();
        let manual = Tensor::new(
            vec![2, 6, 6],
            (0..72)
                .map(|i| (stylized.data()[i] as f64 + delta.data()[i] as f64 + omega * high.data()[i] as f64) as f32)
                .collect(),
        )
        .unwrap();
        assert!(out.output.max_abs_diff(&manual).unwrap() < 1e-5);

        let w1 = inject_with_weight(&f, &high, omega).unwrap();
        let w2 = inject_with_weight(&f, &high, 2.0 * omega).unwrap();
        let diff = w2.zip_map(&w1, |a, b| a - b).unwrap();
        assert!(diff.max_abs_diff(&high.map(|h| (omega * h as f64) as f32)).unwrap() < 1e-6);
    }
}
