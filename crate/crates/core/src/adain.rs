//! Region-wise AdaIN initialization of the stylization latent.

use crate::error::{invalid, Result};
use crate::masks::MaskSet;
use crate::numerics::channel_stats;
use crate::tensor::Tensor;

/// Added to the content standard deviation before dividing.
pub const ADAIN_EPS: f64 = 1e-5;

/// Renormalizes every content channel to the style channel's mean and
/// population standard deviation. Statistics cover the full channel.
pub fn adain(content: &Tensor, style: &Tensor) -> Result<Tensor> {
    content.ensure_same_shape(style, "adain")?;
    let (_, h, w) = content.dims3()?;
    let (mu_c, sd_c) = channel_stats(content)?;
    let (mu_s, sd_s) = channel_stats(style)?;
    let plane = h * w;
    let mut out = content.clone();
    for (c, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let gain = sd_s[c] / (sd_c[c] + ADAIN_EPS);
        for v in chunk.iter_mut() {
            *v = ((*v as f64 - mu_c[c]) * gain + mu_s[c]) as f32;
        }
    }
    Ok(out)
}

/// `z_cs = Σ_i M_i ⊙ AdaIN(z_c, z_s_i) + (1 − Σ_i M_i) ⊙ z_c`, with masks
/// broadcast over channels. Tokens with zero coverage copy `z_c` exactly.
pub fn region_adain_init(z_c: &Tensor, z_s: &[Tensor], ms: &MaskSet) -> Result<Tensor> {
    let (_, h, w) = z_c.dims3()?;
    if z_s.len() != ms.n_styles() {
        return Err(invalid(format!(
            "{} style latents for {} masks",
            z_s.len(),
            ms.n_styles()
        )));
    }
    if ms.grid() != (h, w) {
        return Err(invalid(format!(
            "mask grid {:?} does not match latent plane {:?}",
            ms.grid(),
            (h, w)
        )));
    }
    let styled = z_s
        .iter()
        .map(|s| adain(z_c, s))
        .collect::<Result<Vec<_>>>()?;
    let coverage = ms.coverage();
    let plane = h * w;
    let mut out = z_c.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let q = idx % plane;
        if coverage[q] == 0.0 {
            continue;
        }
        let mut acc = (1.0 - coverage[q]) * *v as f64;
        for (m, s) in ms.masks().iter().zip(&styled) {
            acc += m.data()[q] as f64 * s.data()[idx] as f64;
        }
        *v = acc as f32;
    }
    Ok(out)
}
