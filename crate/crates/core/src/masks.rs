//! Spatial style masks: loading, smoothing, resampling to the attention token
//! grid, and the feasibility check required before mass allocation.

use std::path::Path;

use crate::error::{invalid, MastError, Result};
use crate::tensor::Tensor;

/// Tolerance on `π*·Σ_i M_i(q) ≤ 1`.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Reads a binary PGM (`P5`, maxval ≤ 255) or a rank-2 `MSTT` file and
/// scales values into `[0, 1]`.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path.as_ref())?;
    if bytes.starts_with(b"P5") {
        parse_pgm(&bytes)
    } else if bytes.starts_with(crate::tensor::MAGIC) {
        let t = Tensor::from_bytes(&bytes)?;
        if t.rank() != 2 {
            return Err(MastError::Format(format!(
                "mask tensor must be rank 2, got shape {:?}",
                t.shape()
            )));
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(MastError::Format("mask tensor values outside [0, 1]".into()));
        }
        Ok(t)
    } else {
        Err(MastError::Format(format!(
            "{}: neither a P5 PGM nor an MSTT tensor",
            path.as_ref().display()
        )))
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let mut fields = [0usize; 3];
    let magic = next_token(bytes, &mut pos).ok_or_else(|| fmt("missing magic"))?;
    if magic != b"P5" {
        return Err(fmt("only binary P5 PGM is supported"));
    }
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        let tok = next_token(bytes, &mut pos).ok_or_else(|| fmt(&format!("missing {name}")))?;
        fields[k] = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt(&format!("bad {name}")))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fmt("zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fmt(&format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt("missing raster separator"));
    }
    let raster = &bytes[pos + 1..];
    if raster.len() < width * height {
        return Err(fmt("truncated raster"));
    }
    let scale = maxval as f32;
    let data = raster[..width * height]
        .iter()
        .map(|&b| (b as f32 / scale).min(1.0))
        .collect();
    Tensor::new(vec![height, width], data)
}

fn fmt(msg: &str) -> MastError {
    MastError::Format(format!("PGM: {msg}"))
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Encodes `values` (already in `[0, 1]`) as an 8-bit P5 PGM.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = img.dims2()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= s);
    k
}

/// Separable Gaussian blur, kernel truncated at `3σ`, replicate borders,
/// output clipped to `[0, 1]`. `sigma == 0` returns the input unchanged.
pub fn smooth_mask(m: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    let (h, w) = m.dims2()?;
    if sigma == 0.0 {
        return Ok(m.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();

    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kw)| {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    kw * src[y * w + xx]
                })
                .sum();
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = k
                .iter()
                .enumerate()
                .map(|(i, &kw)| {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    kw * tmp[yy * w + x]
                })
                .sum();
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Source coordinate for corner-aligned sampling: output pixel `i` of `n`
/// maps onto `[0, src - 1]` with both end points pinned.
fn corner_aligned(i: usize, n: usize, src: usize) -> f64 {
    if n == 1 {
        (src - 1) as f64 / 2.0
    } else {
        i as f64 * (src - 1) as f64 / (n - 1) as f64
    }
}

/// Bilinear resampling with corner-aligned sample positions.
pub fn resample_to_tokens(m: &Tensor, h_t: usize, w_t: usize) -> Result<Tensor> {
    if h_t == 0 || w_t == 0 {
        return Err(invalid("token grid extents must be positive"));
    }
    let (h, w) = m.dims2()?;
    if (h, w) == (h_t, w_t) {
        return Ok(m.clone());
    }
    let src = m.data();
    let mut out = Vec::with_capacity(h_t * w_t);
    for i in 0..h_t {
        let sy = corner_aligned(i, h_t, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for j in 0..w_t {
            let sx = corner_aligned(j, w_t, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let at = |y: usize, x: usize| src[y * w + x] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32);
        }
    }
    Tensor::new(vec![h_t, w_t], out)
}

/// `N` token-resolution masks sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    masks: Vec<Tensor>,
    source_resolution: (usize, usize),
}

impl MaskSet {
    pub fn new(masks: Vec<Tensor>, source_resolution: (usize, usize)) -> Result<Self> {
        let first = masks.first().ok_or_else(|| invalid("mask set needs at least one mask"))?;
        first.dims2()?;
        for (i, m) in masks.iter().enumerate() {
            m.ensure_same_shape(first, &format!("mask {i}"))?;
            if let Some(v) = m.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(invalid(format!("mask {i} has value {v} outside [0, 1]")));
            }
        }
        Ok(Self { masks, source_resolution })
    }

    /// Loads, resamples to the token grid, then smooths at token resolution.
    pub fn from_sources(sources: &[Tensor], grid: (usize, usize), sigma: f64) -> Result<Self> {
        let first = sources.first().ok_or_else(|| invalid("no masks given"))?;
        let source_resolution = first.dims2()?;
        let masks = sources
            .iter()
            .map(|m| smooth_mask(&resample_to_tokens(m, grid.0, grid.1)?, sigma))
            .collect::<Result<Vec<_>>>()?;
        Self::new(masks, source_resolution)
    }

    pub fn n_styles(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[Tensor] {
        &self.masks
    }

    pub fn grid(&self) -> (usize, usize) {
        self.masks[0].dims2().expect("validated rank 2")
    }

    pub fn n_tokens(&self) -> usize {
        self.masks[0].len()
    }

    pub fn source_resolution(&self) -> (usize, usize) {
        self.source_resolution
    }

    /// `Σ_i M_i(q)` for every token.
    pub fn coverage(&self) -> Vec<f64> {
        let mut sum = vec![0.0f64; self.n_tokens()];
        for m in &self.masks {
            for (s, &v) in sum.iter_mut().zip(m.data()) {
                *s += v as f64;
            }
        }
        sum
    }

    /// Divides every token whose coverage exceeds one by that coverage.
    pub fn renormalized(&self) -> Self {
        let cov = self.coverage();
        let masks = self
            .masks
            .iter()
            .map(|m| {
                let mut m = m.clone();
                for (v, &c) in m.data_mut().iter_mut().zip(&cov) {
                    if c > 1.0 {
                        *v = (*v as f64 / c) as f32;
                    }
                }
                m
            })
            .collect();
        Self { masks, source_resolution: self.source_resolution }
    }
}

/// Checks `π*·Σ_i M_i(q) ≤ 1 + 1e-6` at every token.
pub fn validate_feasibility(ms: MaskSet, pi_star: f64) -> Result<MaskSet> {
    if !(pi_star > 0.0 && pi_star <= 1.0) {
        return Err(invalid(format!("pi_star must lie in (0, 1], got {pi_star}")));
    }
    let (token, value) = ms
        .coverage()
        .iter()
        .map(|c| pi_star * c)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    if value > 1.0 + FEASIBILITY_TOL {
        return Err(MastError::InfeasibleMasks { token, value });
    }
    Ok(ms)
}
