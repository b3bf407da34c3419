//! Similarity and contrastive-loss numerics.
//!
//! Embeddings are stored as `f32`, but every reduction here accumulates in
//! `f64`. The loss functions take an *image-major* similarity matrix:
//! `s[(i, j)]` is the similarity of image `i` and text `j`, so the
//! image-to-text loss is a softmax along each row and the text-to-image loss
//! a softmax along each column. The positive pair sits on the diagonal and
//! is included in its own softmax denominator.

use thiserror::Error;

/// Lower bound that the trainer clamps the temperature to after each update.
pub const TAU_MIN: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value at index {0}")]
    NonFiniteInput(usize),
    #[error("similarity matrix must be square, got {rows}x{cols}")]
    NonSquareMatrix { rows: usize, cols: usize },
    #[error("similarity {value} at ({row}, {col}) is outside [-1, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("batch of {0} pairs is too small, contrastive loss needs at least 2")]
    BatchTooSmall(usize),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
}

pub type Result<T, E = MathError> = std::result::Result<T, E>;

/// A validated dense embedding: non-empty, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(MathError::EmptyInput);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MathError::NonFiniteInput(i));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl std::ops::Deref for Embedding {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Softmax temperature. Similarities are divided by it before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(MathError::InvalidTemperature(tau))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn clamped(self, tau_min: f64) -> Self {
        Self(self.0.max(tau_min))
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(1.0)
    }
}

/// Row-major dense matrix of similarities in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MathError::DimensionMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        for (k, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(MathError::NonFiniteInput(k));
            }
            if !(-1.0..=1.0).contains(&value) {
                return Err(MathError::OutOfRange {
                    row: k / cols.max(1),
                    col: k % cols.max(1),
                    value,
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(MathError::DimensionMismatch {
                left: bad.len(),
                right: cols,
            });
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    fn require_square(&self) -> Result<usize> {
        if self.rows != self.cols || self.rows == 0 {
            return Err(MathError::NonSquareMatrix {
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(self.rows)
    }
}

pub(crate) fn dot<A, B>(a: &[A], b: &[B]) -> f64
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.into() * y.into())
        .sum()
}

pub(crate) fn l2_norm<A: Copy + Into<f64>>(a: &[A]) -> f64 {
    a.iter()
        .map(|&x| {
            let x = x.into();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Cosine from a precomputed dot product and norms, clamped to `[-1, 1]`.
#[inline]
pub(crate) fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

/// `a·b / (‖a‖‖b‖)`, accumulated in `f64` and clamped to `[-1, 1]`.
///
/// Zero vectors are rejected rather than mapped to 0: they mean the encoder
/// produced a degenerate embedding.
pub fn cosine_similarity<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    if a.len() != b.len() {
        return Err(MathError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(MathError::EmptyInput);
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(MathError::ZeroVector);
    }
    Ok(cosine_from_parts(dot(a, b), na, nb))
}

/// `log Σ exp(x)` with max subtraction. Caller guarantees non-empty, finite input.
pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(MathError::EmptyInput);
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(MathError::NonFiniteInput(i));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// Image-to-text loss: mean over rows of `-log softmax(row / tau)[diag]`.
pub fn loss_i2t(s: &SimilarityMatrix, tau: Temperature) -> Result<f64> {
    let n = s.require_square()?;
    let inv = 1.0 / tau.get();
    let total: f64 = (0..n)
        .map(|i| {
            let row = s.row(i);
            log_sum_exp(row.iter().map(|&x| x * inv)) - row[i] * inv
        })
        .sum();
    Ok(total / n as f64)
}

/// Text-to-image loss: the same softmax taken down each column.
pub fn loss_t2i(s: &SimilarityMatrix, tau: Temperature) -> Result<f64> {
    let n = s.require_square()?;
    let inv = 1.0 / tau.get();
    let total: f64 = (0..n)
        .map(|j| log_sum_exp((0..n).map(|i| s.get(i, j) * inv)) - s.get(j, j) * inv)
        .sum();
    Ok(total / n as f64)
}

pub fn total_loss(s: &SimilarityMatrix, tau: Temperature) -> Result<f64> {
    Ok(0.5 * (loss_i2t(s, tau)? + loss_t2i(s, tau)?))
}

/// Loss value together with its gradient with respect to every input.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub texts: Vec<Vec<f64>>,
    pub images: Vec<Vec<f64>>,
    pub tau: f64,
}

/// Total contrastive loss of a paired batch and its analytic gradient.
///
/// With `S_ij = cos(t_i, v_j)` and `Z = S / tau`, the loss is
/// `½ (mean_i CE(Z_i·, i) + mean_j CE(Z_·j, j))` and
///
/// ```text
/// dL/dZ_ij = (P_ij + Q_ij - 2 δ_ij) / (2N)    P row softmax, Q column softmax
/// dL/dS_ij = dL/dZ_ij / tau
/// dL/dtau  = -Σ dL/dZ_ij · S_ij / tau²
/// dS_ij/dt_i = (v̂_j - S_ij t̂_i) / ‖t_i‖
/// ```
pub fn total_loss_grad<T, I>(texts: &[T], images: &[I], tau: Temperature) -> Result<ContrastiveGrad>
where
    T: AsRef<[f64]>,
    I: AsRef<[f64]>,
{
    let n = texts.len();
    if images.len() != n {
        return Err(MathError::DimensionMismatch {
            left: n,
            right: images.len(),
        });
    }
    if n < 2 {
        return Err(MathError::BatchTooSmall(n));
    }
    let d = texts[0].as_ref().len();
    for v in texts.iter().map(AsRef::as_ref).chain(images.iter().map(AsRef::as_ref)) {
        if v.len() != d {
            return Err(MathError::DimensionMismatch { left: v.len(), right: d });
        }
    }

    let unit = |v: &[f64]| -> Result<(Vec<f64>, f64)> {
        let norm = l2_norm(v);
        if norm == 0.0 {
            return Err(MathError::ZeroVector);
        }
        Ok((v.iter().map(|x| x / norm).collect(), norm))
    };
    let t_units = texts.iter().map(|t| unit(t.as_ref())).collect::<Result<Vec<_>>>()?;
    let v_units = images.iter().map(|v| unit(v.as_ref())).collect::<Result<Vec<_>>>()?;

    // No clamping here: the gradient must describe the same function it differentiates.
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = dot(&t_units[i].0, &v_units[j].0);
        }
    }
    let tau = tau.get();
    let inv = 1.0 / tau;

    let mut p = vec![0.0; n * n];
    let mut q = vec![0.0; n * n];
    let mut row_loss = 0.0;
    let mut col_loss = 0.0;
    for i in 0..n {
        let row = &s[i * n..(i + 1) * n];
        let lse = log_sum_exp(row.iter().map(|&x| x * inv));
        row_loss += lse - row[i] * inv;
        for j in 0..n {
            p[i * n + j] = (row[j] * inv - lse).exp();
        }
    }
    for j in 0..n {
        let lse = log_sum_exp((0..n).map(|i| s[i * n + j] * inv));
        col_loss += lse - s[j * n + j] * inv;
        for i in 0..n {
            q[i * n + j] = (s[i * n + j] * inv - lse).exp();
        }
    }
    let loss = 0.5 * (row_loss + col_loss) / n as f64;

    let mut d_s = vec![0.0; n * n];
    let mut d_tau = 0.0;
    let scale = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            let delta = if i == j { 2.0 } else { 0.0 };
            let d_z = (p[k] + q[k] - delta) * scale;
            d_s[k] = d_z * inv;
            d_tau -= d_z * s[k] * inv * inv;
        }
    }

    let mut g_t = vec![vec![0.0; d]; n];
    let mut g_v = vec![vec![0.0; d]; n];
    for i in 0..n {
        let (t_hat, t_norm) = &t_units[i];
        for j in 0..n {
            let (v_hat, v_norm) = &v_units[j];
            let (g, sij) = (d_s[i * n + j], s[i * n + j]);
            if g == 0.0 {
                continue;
            }
            let (ct, cv) = (g / t_norm, g / v_norm);
            for k in 0..d {
                g_t[i][k] += ct * (v_hat[k] - sij * t_hat[k]);
                g_v[j][k] += cv * (t_hat[k] - sij * v_hat[k]);
            }
        }
    }

    Ok(ContrastiveGrad {
        loss,
        texts: g_t,
        images: g_v,
        tau: d_tau,
    })
}
