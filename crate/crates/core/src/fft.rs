//! Exact-size 2D discrete Fourier transforms backed by `rustfft`, which
//! handles arbitrary lengths through mixed-radix and Bluestein plans.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::Result;
use crate::tensor::{ComplexTensor, Tensor};

fn transform_2d(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_plan, col_plan) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row_plan.process(buf);

    let mut column = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col_plan.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// Unnormalized forward transform; the DC bin holds `Σ x`.
pub fn fft2(x: &Tensor) -> Result<ComplexTensor> {
    let (h, w) = x.dims2()?;
    let mut buf: Vec<Complex64> = x
        .data()
        .iter()
        .map(|&v| Complex64::new(v as f64, 0.0))
        .collect();
    transform_2d(&mut buf, h, w, false);
    ComplexTensor::new(
        vec![h, w],
        buf.iter().map(|c| c.re).collect(),
        buf.iter().map(|c| c.im).collect(),
    )
}

/// Inverse transform scaled by `1/(H·W)`; the imaginary residue is dropped.
pub fn ifft2(spectrum: &ComplexTensor) -> Result<Tensor> {
    let mut buf = ifft2_complex(spectrum)?;
    let shape = spectrum.shape.clone();
    Tensor::new(shape, buf.drain(..).map(|c| c.re as f32).collect())
}

pub(crate) fn ifft2_complex(spectrum: &ComplexTensor) -> Result<Vec<Complex64>> {
    let (h, w) = match spectrum.shape[..] {
        [h, w] => (h, w),
        _ => {
            return Err(crate::error::invalid(format!(
                "ifft2 expects rank 2, got {:?}",
                spectrum.shape
            )))
        }
    };
    let mut buf: Vec<Complex64> = spectrum
        .re
        .iter()
        .zip(&spectrum.im)
        .map(|(&re, &im)| Complex64::new(re, im))
        .collect();
    transform_2d(&mut buf, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    /// O(N²) direct DFT, independent of the planner.
    fn naive_dft(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (h, w) = x.dims2().unwrap();
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let phase = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        let val = x.get2(y, xx) as f64;
                        sr += val * phase.cos();
                        si += val * phase.sin();
                    }
                }
                re[u * w + v] = sr;
                im[u * w + v] = si;
            }
        }
        (re, im)
    }

    fn pseudo_random(h: usize, w: usize, salt: u32) -> Tensor {
        Tensor::from_fn2(h, w, |i, j| {
            let k = (i * 7919 + j * 104729) as u32 ^ salt.wrapping_mul(2654435761);
            ((k.wrapping_mul(1103515245).wrapping_add(12345) >> 8) as f32 / (1 << 24) as f32) * 2.0 - 1.0
        })
        .unwrap()
    }

    #[test]
    fn constant_image_is_dc_only() {
        let x = Tensor::filled(vec![4, 6], 0.5).unwrap();
        let f = fft2(&x).unwrap();
        assert_abs_diff_eq!(f.re[0], 12.0, epsilon = 1e-12);
        for k in 1..24 {
            assert_abs_diff_eq!(f.re[k], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(f.im[k], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn delta_is_flat_spectrum() {
        let mut x = Tensor::zeros(vec![5, 3]).unwrap();
        x.data_mut()[0] = 1.0;
        let f = fft2(&x).unwrap();
        for k in 0..15 {
            assert_abs_diff_eq!(f.re[k], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(f.im[k], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn matches_naive_dft_and_roundtrips() {
        for &(h, w) in &[(1, 1), (8, 8), (3, 5), (7, 12), (16, 9)] {
            let x = pseudo_random(h, w, (h * w) as u32);
            let f = fft2(&x).unwrap();
            let (re, im) = naive_dft(&x);
            for k in 0..h * w {
                assert_abs_diff_eq!(f.re[k], re[k], epsilon = 1e-4);
                assert_abs_diff_eq!(f.im[k], im[k], epsilon = 1e-4);
            }
            let back = ifft2(&f).unwrap();
            assert!(back.max_abs_diff(&x).unwrap() < 1e-5);
        }
    }
}
