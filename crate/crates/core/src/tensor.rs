//! Dense row-major `f32` tensors and the `MSTT` binary container.
//!
//! File layout (all integers little-endian):
//!
//! | bytes            | content                           |
//! |------------------|-----------------------------------|
//! | 0..4             | magic `"MSTT"`                    |
//! | 4..8             | `u32` version, currently `1`      |
//! | 8..12            | `u32` rank                        |
//! | 12..12 + 4*rank  | `u32` extents                     |
//! | rest             | `f32` payload, row-major          |

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{invalid, MastError, Result};

pub const MAGIC: &[u8; 4] = b"MSTT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(invalid("tensor rank must be at least 1"));
        }
        if shape.contains(&0) {
            return Err(invalid(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn from_fn2(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(invalid(format!("expected rank 2, got shape {:?}", self.shape))),
        }
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(invalid(format!("expected rank 3, got shape {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn get2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(invalid(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Row-major product `self · otherᵀ` for rank-2 operands, accumulated in f64.
    pub fn matmul_transposed(&self, other: &Tensor) -> Result<Vec<f64>> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(invalid(format!(
                "inner dimensions differ: {:?} · {:?}ᵀ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                let b = other.row(j);
                out[i * n + j] = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
            }
        }
        Ok(out)
    }

    /// SHA-256 of the little-endian payload bytes, prefixed by the shape.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for &e in &self.shape {
            hasher.update((e as u32).to_le_bytes());
        }
        for &x in &self.data {
            hasher.update(x.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(MastError::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut cur, "version")?;
        if version != FORMAT_VERSION {
            return Err(MastError::Format(format!("unsupported version {version}")));
        }
        let rank = read_u32(&mut cur, "rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(MastError::Format(format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut cur, "extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| MastError::Format("extent product overflows".into()))?;
        if cur.len() != n * 4 {
            return Err(MastError::Format(format!(
                "payload is {} bytes, shape {shape:?} needs {}",
                cur.len(),
                n * 4
            )));
        }
        let data = cur
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data).map_err(|e| MastError::Format(e.to_string()))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| MastError::Format(format!("truncated header reading {what}")))
}

fn read_u32(cur: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Frequency-domain companion of [`Tensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    pub shape: Vec<usize>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: Vec<usize>, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(invalid(format!(
                "complex tensor {shape:?} needs {n} elements, got re={} im={}",
                re.len(),
                im.len()
            )));
        }
        Ok(Self { shape, re, im })
    }
}

/// Row-major `f64` matrix used for logits and attention weights, where the
/// extra precision keeps group-mass checks meaningful at 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(invalid(format!(
                "matrix {rows}x{cols} with {} elements",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (r, c) = t.dims2()?;
        Self::new(r, c, t.data().iter().map(|&x| x as f64).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.rows, self.cols],
            self.data.iter().map(|&x| x as f32).collect(),
        )
        .expect("matrix dimensions are validated on construction")
    }
}
