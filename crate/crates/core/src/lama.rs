//! Logit-level attention mass allocation.
//!
//! For each query `q` the style groups `ℓ_cs^(i)` and the content group `ℓ_c`
//! are concatenated. Adding the per-query scalar
//!
//! ```text
//! b_i(q) = log(π_i(q) / π_c(q)) + log Z_c(q) − log Z_i(q)
//! ```
//!
//! to style group `i` makes its softmax mass exactly `π_i(q)`, where `Z` is
//! the partition function of a group's row. A scalar shift leaves the order
//! inside each group untouched.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{invalid, MastError, Result};
use crate::masks::MaskSet;
use crate::numerics::{scaled_logsumexp, scaled_softmax};
use crate::tensor::{Matrix, Tensor};

pub const DEFAULT_PI_STAR: f64 = 0.9;

/// Style targets below this are excluded instead of biased toward `log 0`.
pub const MASS_EPSILON: f64 = 1e-8;

/// Largest usable `π*`. At `π* = 1` a fully covered token would need
/// `π_c = 0`, which no finite bias represents.
pub const MAX_PI_STAR: f64 = 1.0 - 1e-4;

pub fn effective_pi_star(pi_star: f64) -> f64 {
    pi_star.min(MAX_PI_STAR)
}

#[derive(Debug, Clone)]
pub struct LogitGroups {
    style: Vec<Matrix>,
    content: Matrix,
    d: usize,
}

impl LogitGroups {
    pub fn new(style: Vec<Matrix>, content: Matrix, d: usize) -> Result<Self> {
        if style.is_empty() {
            return Err(invalid("at least one style group is required"));
        }
        for (i, g) in style.iter().enumerate() {
            if g.rows != content.rows {
                return Err(invalid(format!(
                    "style group {i} has {} query rows, content has {}",
                    g.rows, content.rows
                )));
            }
        }
        for g in style.iter().chain(std::iter::once(&content)) {
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(invalid("logits must be finite"));
            }
        }
        Ok(Self { style, content, d })
    }

    pub fn from_tensors(style: &[Tensor], content: &Tensor, d: usize) -> Result<Self> {
        let style = style.iter().map(Matrix::from_tensor).collect::<Result<Vec<_>>>()?;
        Self::new(style, Matrix::from_tensor(content)?, d)
    }

    /// `ℓ = Q̂ Kᵀ / √d` for every style key set and the content keys.
    pub fn from_projections(queries: &Tensor, style_keys: &[Tensor], content_keys: &Tensor) -> Result<Self> {
        let (t_q, d) = queries.dims2()?;
        let scale = 1.0 / (d as f64).sqrt();
        let project = |keys: &Tensor| -> Result<Matrix> {
            let (t_k, _) = keys.dims2()?;
            let mut m = queries.matmul_transposed(keys)?;
            m.iter_mut().for_each(|v| *v *= scale);
            Matrix::new(t_q, t_k, m)
        };
        let style = style_keys.iter().map(project).collect::<Result<Vec<_>>>()?;
        Self::new(style, project(content_keys)?, d)
    }

    pub fn style(&self) -> &[Matrix] {
        &self.style
    }

    pub fn content(&self) -> &Matrix {
        &self.content
    }

    pub fn key_dim(&self) -> usize {
        self.d
    }

    pub fn n_queries(&self) -> usize {
        self.content.rows
    }

    pub fn n_styles(&self) -> usize {
        self.style.len()
    }

    /// Column counts in concatenation order, content last.
    pub fn group_widths(&self) -> Vec<usize> {
        self.style
            .iter()
            .map(|g| g.cols)
            .chain(std::iter::once(self.content.cols))
            .collect()
    }
}

/// Per-query mass targets for every style group plus the content remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct MassTargets {
    style: Vec<Vec<f64>>,
    content: Vec<f64>,
}

impl MassTargets {
    pub fn new(style: Vec<Vec<f64>>, content: Vec<f64>) -> Result<Self> {
        for (i, s) in style.iter().enumerate() {
            if s.len() != content.len() {
                return Err(invalid(format!(
                    "style target {i} has {} queries, content has {}",
                    s.len(),
                    content.len()
                )));
            }
        }
        for q in 0..content.len() {
            let mut total = content[q];
            for s in &style {
                if !(0.0..=1.0).contains(&s[q]) {
                    return Err(invalid(format!("style target {} at query {q} outside [0, 1]", s[q])));
                }
                total += s[q];
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("targets at query {q} sum to {total}")));
            }
        }
        Ok(Self { style, content })
    }

    /// `π_i(q) = π*·M_i(q)`, `π_c(q) = 1 − Σ_i π_i(q)`, with `π*` capped at
    /// [`MAX_PI_STAR`]. Content targets can be non-positive when the masks
    /// are infeasible; [`compute_bias`] rejects those tokens.
    pub fn from_masks(ms: &MaskSet, pi_star: f64) -> Result<Self> {
        if !(pi_star > 0.0 && pi_star <= 1.0) {
            return Err(invalid(format!("pi_star must lie in (0, 1], got {pi_star}")));
        }
        let pi = effective_pi_star(pi_star);
        let style: Vec<Vec<f64>> = ms
            .masks()
            .iter()
            .map(|m| m.data().iter().map(|&v| pi * v as f64).collect())
            .collect();
        let content = (0..ms.n_tokens())
            .map(|q| 1.0 - style.iter().map(|s| s[q]).sum::<f64>())
            .collect();
        Ok(Self { style, content })
    }

    /// Uniform target `pi` for a single style group over `n` queries.
    pub fn uniform_single(n: usize, pi: f64) -> Result<Self> {
        Self::new(vec![vec![pi; n]], vec![1.0 - pi; n])
    }

    pub fn style(&self) -> &[Vec<f64>] {
        &self.style
    }

    pub fn content(&self) -> &[f64] {
        &self.content
    }

    pub fn n_queries(&self) -> usize {
        self.content.len()
    }
}

/// Per-query log partition functions `(log Z_i for each style, log Z_c)`.
pub fn partition_log_z(groups: &LogitGroups) -> (Vec<Vec<f64>>, Vec<f64>) {
    let lz = |m: &Matrix| m.rows().map(|r| scaled_logsumexp(r, 1.0)).collect::<Vec<_>>();
    (groups.style.iter().map(lz).collect(), lz(&groups.content))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroupBias {
    Shift(f64),
    /// Target mass is below [`MASS_EPSILON`]; the group's columns are masked
    /// out for this query.
    Excluded,
}

/// Closed-form bias for a single style group against content.
pub fn single_style_bias(style_row: &[f64], content_row: &[f64], target: f64) -> f64 {
    let content_target = 1.0 - target;
    (target / content_target).ln() + scaled_logsumexp(content_row, 1.0) - scaled_logsumexp(style_row, 1.0)
}

/// Biases indexed `[style][query]`.
pub fn compute_bias(groups: &LogitGroups, targets: &MassTargets) -> Result<Vec<Vec<GroupBias>>> {
    if targets.style.len() != groups.n_styles() || targets.n_queries() != groups.n_queries() {
        return Err(invalid(format!(
            "targets cover {} styles x {} queries, logits have {} x {}",
            targets.style.len(),
            targets.n_queries(),
            groups.n_styles(),
            groups.n_queries()
        )));
    }
    if let Some(q) = targets.content.iter().position(|&c| c <= 0.0) {
        return Err(MastError::InfeasibleMasks { token: q, value: 1.0 - targets.content[q] });
    }
    let (log_z_style, log_z_content) = partition_log_z(groups);
    Ok(targets
        .style
        .iter()
        .zip(&log_z_style)
        .map(|(pis, lzs)| {
            pis.iter()
                .zip(lzs)
                .zip(&targets.content)
                .zip(&log_z_content)
                .map(|(((&pi, &lz), &pc), &lzc)| {
                    if pi < MASS_EPSILON {
                        GroupBias::Excluded
                    } else {
                        GroupBias::Shift((pi / pc).ln() + lzc - lz)
                    }
                })
                .collect()
        })
        .collect())
}

/// Concatenated logits `[ℓ_cs^(1) + b_1, …, ℓ_cs^(N) + b_N, ℓ_c]` together
/// with the group layout.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasedLogits {
    pub logits: Matrix,
    pub group_widths: Vec<usize>,
}

impl BiasedLogits {
    /// Plain concatenation without any bias.
    pub fn unbiased(groups: &LogitGroups) -> Self {
        Self::assemble(groups, |_, _| GroupBias::Shift(0.0))
    }

    fn assemble(groups: &LogitGroups, bias: impl Fn(usize, usize) -> GroupBias) -> Self {
        let widths = groups.group_widths();
        let cols: usize = widths.iter().sum();
        let rows = groups.n_queries();
        let mut data = Vec::with_capacity(rows * cols);
        for q in 0..rows {
            for (i, g) in groups.style.iter().enumerate() {
                match bias(i, q) {
                    GroupBias::Shift(b) => data.extend(g.row(q).iter().map(|&l| l + b)),
                    GroupBias::Excluded => data.extend(std::iter::repeat_n(f64::NEG_INFINITY, g.cols)),
                }
            }
            data.extend_from_slice(groups.content.row(q));
        }
        Self {
            logits: Matrix::new(rows, cols, data).expect("group layout is consistent"),
            group_widths: widths,
        }
    }

    /// Softmax mass of every group for every row at the given temperature,
    /// indexed `[row][group]` with content last.
    pub fn group_masses(&self, temperature: f64) -> Vec<Vec<f64>> {
        self.logits
            .rows()
            .map(|row| group_masses_of_row(row, &self.group_widths, temperature))
            .collect()
    }

    pub fn n_styles(&self) -> usize {
        self.group_widths.len() - 1
    }

    /// Column range of the content group.
    pub fn content_columns(&self) -> std::ops::Range<usize> {
        let start: usize = self.group_widths[..self.n_styles()].iter().sum();
        start..self.logits.cols
    }
}

pub fn group_masses_of_row(row: &[f64], widths: &[usize], temperature: f64) -> Vec<f64> {
    let p = scaled_softmax(row, temperature);
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let m = p[start..start + w].iter().sum();
            start += w;
            m
        })
        .collect()
}

pub fn apply_lama(groups: &LogitGroups, targets: &MassTargets) -> Result<BiasedLogits> {
    let bias = compute_bias(groups, targets)?;
    Ok(BiasedLogits::assemble(groups, |i, q| bias[i][q]))
}

/// Row-softmax of `temperature · logits` times `V_concat`.
pub fn attention_output(logits: &Matrix, v_concat: &Tensor, temperature: f64) -> Result<Tensor> {
    let (t_k, d_v) = v_concat.dims2()?;
    if t_k != logits.cols {
        return Err(invalid(format!(
            "logits have {} columns, values have {t_k} rows",
            logits.cols
        )));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    let values = v_concat.data();
    let row_out = |row: &[f64]| -> Vec<f32> {
        let p = scaled_softmax(row, temperature);
        let mut acc = vec![0.0f64; d_v];
        for (j, &pj) in p.iter().enumerate() {
            if pj == 0.0 {
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(&values[j * d_v..(j + 1) * d_v]) {
                *a += pj * v as f64;
            }
        }
        acc.into_iter().map(|x| x as f32).collect()
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<f32>> = logits.data.par_chunks(logits.cols).map(row_out).collect();
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<f32>> = logits.rows().map(row_out).collect();
    Tensor::new(vec![logits.rows, d_v], rows.concat())
}

/// Stacks `V_s^(1), …, V_s^(N), V_c` row-wise.
pub fn concat_values(style_values: &[Tensor], content_values: &Tensor) -> Result<Tensor> {
    let (_, d_v) = content_values.dims2()?;
    let mut rows = 0;
    let mut data = Vec::new();
    for v in style_values.iter().chain(std::iter::once(content_values)) {
        let (r, d) = v.dims2()?;
        if d != d_v {
            return Err(invalid(format!("value width {d} differs from {d_v}")));
        }
        rows += r;
        data.extend_from_slice(v.data());
    }
    Tensor::new(vec![rows, d_v], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::new(rows, cols, data.to_vec()).unwrap()
    }

    /// Direct evaluation: exponentiate every entry and sum per group.
    fn brute_masses(row: &[f64], widths: &[usize]) -> Vec<f64> {
        let e: Vec<f64> = row.iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        let mut start = 0;
        widths
            .iter()
            .map(|&w| {
                let s = e[start..start + w].iter().sum::<f64>() / z;
                start += w;
                s
            })
            .collect()
    }

    #[test]
    fn partition_examples() {
        let g = LogitGroups::new(vec![m(1, 2, &[0.0, 0.0])], m(1, 1, &[0.0]), 1).unwrap();
        let (s, c) = partition_log_z(&g);
        assert_abs_diff_eq!(s[0][0], 2f64.ln(), epsilon = 1e-15);
        assert_eq!(c[0], 0.0);
        let g = LogitGroups::new(vec![m(1, 2, &[1.0, 0.0])], m(1, 1, &[0.0]), 1).unwrap();
        let (s, _) = partition_log_z(&g);
        assert_abs_diff_eq!(s[0][0], 1.313262, epsilon = 1e-6);
        let g2 = LogitGroups::new(vec![m(1, 2, &[3.5, 2.5])], m(1, 1, &[0.0]), 1).unwrap();
        let (s2, _) = partition_log_z(&g2);
        assert_abs_diff_eq!(s2[0][0] - s[0][0], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn bias_examples() {
        let cases = [
            (vec![0.0, 0.0], vec![0.0, 0.0], 0.5, 0.0),
            (vec![0.0, 0.0], vec![0.0, 0.0], 0.9, 9f64.ln()),
            (vec![1.0, 0.0], vec![0.0], 0.75, 3f64.ln() - (1f64.exp() + 1.0).ln()),
        ];
        for (s, c, pi, want) in cases {
            let g = LogitGroups::new(vec![m(1, s.len(), &s)], m(1, c.len(), &c), 1).unwrap();
            let t = MassTargets::uniform_single(1, pi).unwrap();
            let b = compute_bias(&g, &t).unwrap();
            let GroupBias::Shift(b) = b[0][0] else { panic!("unexpected exclusion") };
            assert_abs_diff_eq!(b, want, epsilon = 1e-12);
            let biased = apply_lama(&g, &t).unwrap();
            let masses = brute_masses(biased.logits.row(0), &biased.group_widths);
            assert_abs_diff_eq!(masses[0], pi, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(9f64.ln(), 2.197225, epsilon = 1e-6);
        assert_abs_diff_eq!(3f64.ln() - (1f64.exp() + 1.0).ln(), -0.214649, epsilon = 1e-6);
    }

    #[test]
    fn zero_target_excludes_style() {
        let g = LogitGroups::new(vec![m(2, 2, &[5.0, 1.0, 0.0, 0.0])], m(2, 2, &[0.0, 1.0, 2.0, 0.0]), 1).unwrap();
        let t = MassTargets::new(vec![vec![0.0, 0.9]], vec![1.0, 0.1]).unwrap();
        let b = compute_bias(&g, &t).unwrap();
        assert_eq!(b[0][0], GroupBias::Excluded);
        let biased = apply_lama(&g, &t).unwrap();
        let masses = biased.group_masses(1.0);
        assert_eq!(masses[0][0], 0.0);
        assert_abs_diff_eq!(masses[0][1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(masses[1][0], 0.9, epsilon = 1e-12);
    }

    #[test]
    fn zero_content_target_is_infeasible() {
        let g = LogitGroups::new(vec![m(1, 1, &[0.0])], m(1, 1, &[0.0]), 1).unwrap();
        let t = MassTargets::new(vec![vec![1.0]], vec![0.0]).unwrap();
        assert!(matches!(compute_bias(&g, &t), Err(MastError::InfeasibleMasks { token: 0, .. })));
    }

    #[test]
    fn two_styles_half_masks() {
        let g = LogitGroups::new(
            vec![m(1, 3, &[0.2, -1.0, 0.7]), m(1, 2, &[2.0, 1.5])],
            m(1, 2, &[0.3, -0.4]),
            4,
        )
        .unwrap();
        let half = Tensor::filled(vec![1, 1], 0.5).unwrap();
        let ms = MaskSet::new(vec![half.clone(), half], (1, 1)).unwrap();
        let t = MassTargets::from_masks(&ms, 0.9).unwrap();
        let biased = apply_lama(&g, &t).unwrap();
        let masses = brute_masses(biased.logits.row(0), &biased.group_widths);
        assert_abs_diff_eq!(masses[0], 0.45, epsilon = 1e-9);
        assert_abs_diff_eq!(masses[1], 0.45, epsilon = 1e-9);
        assert_abs_diff_eq!(masses[2], 0.10, epsilon = 1e-9);
    }

    #[test]
    fn pi_star_is_capped() {
        let ones = Tensor::filled(vec![1, 2], 1.0).unwrap();
        let ms = MaskSet::new(vec![ones], (1, 2)).unwrap();
        let t = MassTargets::from_masks(&ms, 1.0).unwrap();
        assert_eq!(t.style()[0][0], MAX_PI_STAR);
        assert!(t.content()[0] > 0.0);
    }

    #[test]
    fn attention_output_cases() {
        let v = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let onehot = m(1, 3, &[0.0, 80.0, 0.0]);
        let out = attention_output(&onehot, &v, 1.0).unwrap();
        assert_abs_diff_eq!(out.data()[0], 3.0, epsilon = 1e-4);
        assert_abs_diff_eq!(out.data()[1], 4.0, epsilon = 1e-4);
        let uniform = m(1, 3, &[0.5, 0.5, 0.5]);
        let out = attention_output(&uniform, &v, 1.0).unwrap();
        assert_abs_diff_eq!(out.data()[0], 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(out.data()[1], 4.0, epsilon = 1e-6);
        assert!(attention_output(&m(1, 2, &[0.0, 0.0]), &v, 1.0).is_err());
    }

    #[test]
    fn concat_values_orders_style_first() {
        let s = Tensor::filled(vec![2, 2], 1.0).unwrap();
        let c = Tensor::filled(vec![1, 2], 7.0).unwrap();
        let v = concat_values(&[s], &c).unwrap();
        assert_eq!(v.shape(), &[3, 2]);
        assert_eq!(v.row(2), &[7.0, 7.0]);
    }

    #[test]
    fn mismatched_rows_rejected() {
        assert!(LogitGroups::new(vec![m(2, 1, &[0.0, 0.0])], m(1, 1, &[0.0]), 1).is_err());
        assert!(LogitGroups::new(vec![m(1, 1, &[f64::NAN])], m(1, 1, &[0.0]), 1).is_err());
    }
}
