//! Local alignment: weight each image patch by how closely it agrees with the
//! whole-image embedding, then score a text against the weighted patches.
//!
//! ```text
//! w_k   = softmax_k(alpha * cos(patch_k, global))
//! score = Σ_k w_k * cos(patch_k, text)
//! ```
//!
//! The weights do not depend on the text, so corpus-scale scoring computes
//! them once per image. Because the score is linear in the text direction,
//! an image can further be collapsed to `Σ_k w_k * patch_k / ‖patch_k‖` and
//! scored with a single dot product.

use thiserror::Error;

use crate::math::{self, cosine_from_parts, dot, l2_norm, MathError, SimilarityMatrix};
use crate::store::EmbeddingRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("patch set is empty")]
    EmptyPatchSet,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("alpha must be finite and non-negative, got {0}")]
    InvalidAlpha(f64),
    #[error("image {0:?} has no patch embeddings")]
    MissingPatches(String),
    #[error(transparent)]
    Math(MathError),
}

impl From<MathError> for AlignError {
    fn from(e: MathError) -> Self {
        match e {
            MathError::DimensionMismatch { left, right } => Self::DimMismatch { left, right },
            MathError::ZeroVector => Self::ZeroVector,
            other => Self::Math(other),
        }
    }
}

pub type Result<T, E = AlignError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScoreMode {
    /// Weighted patch-to-text similarity.
    #[default]
    Local,
    /// Plain cosine between the global image embedding and the text.
    Global,
}

impl std::str::FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "local" => Ok(Self::Local),
            "global" => Ok(Self::Global),
            other => Err(format!("unknown mode {other:?}, expected local or global")),
        }
    }
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Local => "local",
            Self::Global => "global",
        })
    }
}

/// Softmax weights over an image's patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchWeights {
    pub weights: Vec<f64>,
    pub alpha: f64,
}

impl PatchWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .weights
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|&w| w * w.ln())
            .sum::<f64>()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha >= 0.0 {
        Ok(())
    } else {
        Err(AlignError::InvalidAlpha(alpha))
    }
}

/// Weights from precomputed patch-to-global similarities.
pub fn weights_from_similarities(similarities: &[f64], alpha: f64) -> Result<PatchWeights> {
    check_alpha(alpha)?;
    if similarities.is_empty() {
        return Err(AlignError::EmptyPatchSet);
    }
    let logits: Vec<f64> = similarities.iter().map(|s| alpha * s).collect();
    Ok(PatchWeights {
        weights: math::stable_softmax(&logits)?,
        alpha,
    })
}

pub fn patch_weights<P: AsRef<[f32]>>(global: &[f32], patches: &[P], alpha: f64) -> Result<PatchWeights> {
    check_alpha(alpha)?;
    if patches.is_empty() {
        return Err(AlignError::EmptyPatchSet);
    }
    let sims = patches
        .iter()
        .map(|p| math::cosine_similarity(p.as_ref(), global))
        .collect::<Result<Vec<_>, _>>()?;
    weights_from_similarities(&sims, alpha)
}

pub fn local_aligned_score<P: AsRef<[f32]>>(text: &[f32], global: &[f32], patches: &[P], alpha: f64) -> Result<f64> {
    let w = patch_weights(global, patches, alpha)?;
    let mut score = 0.0;
    for (wk, p) in w.weights.iter().zip(patches) {
        score += wk * math::cosine_similarity(p.as_ref(), text)?;
    }
    Ok(score.clamp(-1.0, 1.0))
}

/// Unit direction of `v` in `f64`.
pub(crate) fn unit(v: &[f32]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if norm == 0.0 {
        return Err(AlignError::ZeroVector);
    }
    Ok(v.iter().map(|&x| x as f64 / norm).collect())
}

/// Collapse an image into the single direction that its local score is a
/// dot product against: `Σ_k w_k * patch_k / ‖patch_k‖`.
pub(crate) fn aggregate_patches(weights: &PatchWeights, patches: &[Vec<f32>], dim: usize) -> Result<Vec<f64>> {
    let mut agg = vec![0.0; dim];
    for (wk, p) in weights.weights.iter().zip(patches) {
        let u = unit(p)?;
        for (a, x) in agg.iter_mut().zip(&u) {
            *a += wk * x;
        }
    }
    Ok(agg)
}

/// Per-image scoring prep shared by [`score_matrix`] and the retrieval index.
#[derive(Debug, Clone)]
pub(crate) struct PreparedImage {
    /// Direction a unit text vector is dotted against.
    pub direction: Vec<f64>,
    pub weights: Option<PatchWeights>,
}

pub(crate) fn prepare_image(
    record: &EmbeddingRecord,
    dim: usize,
    alpha: f64,
    mode: ScoreMode,
    strict: bool,
) -> Result<PreparedImage> {
    if record.global.len() != dim {
        return Err(AlignError::DimMismatch {
            left: record.global.len(),
            right: dim,
        });
    }
    match mode {
        ScoreMode::Global => Ok(PreparedImage {
            direction: unit(&record.global)?,
            weights: None,
        }),
        ScoreMode::Local if record.patches.is_empty() => {
            if strict {
                Err(AlignError::MissingPatches(record.id.clone()))
            } else {
                log::warn!("image {:?} has no patches, scoring it globally", record.id);
                Ok(PreparedImage {
                    direction: unit(&record.global)?,
                    weights: None,
                })
            }
        }
        ScoreMode::Local => {
            let w = patch_weights(&record.global, &record.patches, alpha)?;
            Ok(PreparedImage {
                direction: aggregate_patches(&w, &record.patches, dim)?,
                weights: Some(w),
            })
        }
    }
}

/// Text-major similarity matrix: entry `(t, i)` scores text `t` against image `i`.
///
/// Global mode evaluates the plain cosine for every pair. Local mode computes
/// patch weights once per image. `strict` rejects images without patches in
/// local mode; otherwise they fall back to the global cosine.
pub fn score_matrix(
    texts: &[EmbeddingRecord],
    images: &[EmbeddingRecord],
    alpha: f64,
    mode: ScoreMode,
    strict: bool,
) -> Result<SimilarityMatrix> {
    check_alpha(alpha)?;
    let dim = texts
        .first()
        .or(images.first())
        .map_or(0, |r| r.global.len());
    for t in texts {
        if t.global.len() != dim {
            return Err(AlignError::DimMismatch {
                left: t.global.len(),
                right: dim,
            });
        }
    }
    let mut data = Vec::with_capacity(texts.len() * images.len());
    match mode {
        ScoreMode::Global => {
            let text_norms = texts.iter().map(|t| nonzero_norm(&t.global)).collect::<Result<Vec<_>>>()?;
            let image_norms = images
                .iter()
                .map(|i| {
                    if i.global.len() != dim {
                        return Err(AlignError::DimMismatch {
                            left: i.global.len(),
                            right: dim,
                        });
                    }
                    nonzero_norm(&i.global)
                })
                .collect::<Result<Vec<_>>>()?;
            for (t, tn) in texts.iter().zip(&text_norms) {
                for (i, inorm) in images.iter().zip(&image_norms) {
                    data.push(cosine_from_parts(dot(&t.global, &i.global), *tn, *inorm));
                }
            }
        }
        ScoreMode::Local => {
            let prepared = images
                .iter()
                .map(|i| prepare_image(i, dim, alpha, mode, strict))
                .collect::<Result<Vec<_>>>()?;
            let units = texts.iter().map(|t| unit(&t.global)).collect::<Result<Vec<_>>>()?;
            for u in &units {
                for p in &prepared {
                    data.push(dot(u, &p.direction).clamp(-1.0, 1.0));
                }
            }
        }
    }
    Ok(SimilarityMatrix::from_vec(texts.len(), images.len(), data)?)
}

fn nonzero_norm(v: &[f32]) -> Result<f64> {
    let n = l2_norm(v);
    if n == 0.0 {
        Err(AlignError::ZeroVector)
    } else {
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn singleton_weight_is_one() {
        for alpha in [0.0, 1.02, 1e4] {
            let w = patch_weights(&[1.0, 2.0], &[vec![-3.0f32, 0.5]], alpha).unwrap();
            assert_eq!(w.weights, vec![1.0]);
        }
    }

    #[test]
    fn identical_patches_are_uniform() {
        let p = vec![0.3f32, -0.2, 0.9];
        let w = patch_weights(&[1.0, 0.0, 0.0], &[p.clone(), p.clone(), p.clone(), p], 1.02).unwrap();
        assert!(w.weights.iter().all(|&x| close(x, 0.25, 1e-15)));
    }

    #[test]
    fn two_patch_example() {
        // global e1; patches at cosines 0.9 and 0.5 to it
        let global = [1.0f32, 0.0];
        let p1 = vec![0.9f32, (1.0f32 - 0.81).sqrt()];
        let p2 = vec![0.5f32, (1.0f32 - 0.25).sqrt()];
        let w = patch_weights(&global, &[p1, p2], 1.02).unwrap();
        // softmax(1.02 * [0.9, 0.5]), mpmath
        assert!(close(w.weights[0], 0.600_608_219_551_274_5, 1e-6));
        assert!(close(w.weights[1], 0.399_391_780_448_725_5, 1e-6));
        let exact = weights_from_similarities(&[0.9, 0.5], 1.02).unwrap();
        assert!(close(exact.weights[0], 0.600_608_219_551_274_5, 1e-14));
    }

    #[test]
    fn weight_errors() {
        let none: [Vec<f32>; 0] = [];
        assert_eq!(patch_weights(&[1.0], &none, 1.0), Err(AlignError::EmptyPatchSet));
        assert_eq!(
            patch_weights(&[1.0, 0.0], &[vec![1.0f32]], 1.0),
            Err(AlignError::DimMismatch { left: 1, right: 2 })
        );
        assert_eq!(patch_weights(&[1.0, 0.0], &[vec![0.0f32, 0.0]], 1.0), Err(AlignError::ZeroVector));
        assert_eq!(patch_weights(&[1.0], &[vec![1.0f32]], -1.0), Err(AlignError::InvalidAlpha(-1.0)));
        assert!(patch_weights(&[1.0], &[vec![1.0f32]], f64::NAN).is_err());
    }

    #[test]
    fn local_score_reductions() {
        let text = [0.2f32, 0.7, -0.1];
        let global = [0.5f32, 0.5, 0.5];
        let patch = vec![1.0f32, -0.4, 0.3];
        let s = local_aligned_score(&text, &global, std::slice::from_ref(&patch), 1.02).unwrap();
        assert!(close(s, math::cosine_similarity(&patch, &text).unwrap(), 1e-15));

        let s = local_aligned_score(&text, &global, &[global.to_vec(), global.to_vec()], 1.02).unwrap();
        assert!(close(s, math::cosine_similarity(&global, &text).unwrap(), 1e-15));
    }

    #[test]
    fn alpha_zero_is_the_mean() {
        // text e1; patches with text-cosines 0.2 and 0.6
        let text = [1.0f32, 0.0];
        let p1 = vec![0.2f32, (1.0f32 - 0.04).sqrt()];
        let p2 = vec![0.6f32, 0.8];
        let s = local_aligned_score(&text, &[0.0, 1.0], &[p1, p2], 0.0).unwrap();
        assert!(close(s, 0.4, 1e-7));
    }

    #[test]
    fn entropy_of_uniform() {
        let w = weights_from_similarities(&[0.1, 0.1, 0.1, 0.1], 3.0).unwrap();
        assert!(close(w.entropy(), 4f64.ln(), 1e-12));
        assert_eq!(weights_from_similarities(&[0.3], 1.0).unwrap().entropy(), 0.0);
    }

    #[test]
    fn matrix_shapes_and_errors() {
        let texts = [EmbeddingRecord::text("t", vec![1.0, 0.0])];
        let images = [EmbeddingRecord::image("i", vec![0.6, 0.8], vec![vec![1.0, 0.0]])];
        let g = score_matrix(&texts, &images, 1.02, ScoreMode::Global, true).unwrap();
        assert_eq!((g.rows(), g.cols()), (1, 1));
        assert!(close(g.get(0, 0), 0.6, 1e-7));
        let l = score_matrix(&texts, &images, 1.02, ScoreMode::Local, true).unwrap();
        assert!(close(l.get(0, 0), 1.0, 1e-12));

        let bare = [EmbeddingRecord::image("bare", vec![0.6, 0.8], vec![])];
        assert_eq!(
            score_matrix(&texts, &bare, 1.02, ScoreMode::Local, true),
            Err(AlignError::MissingPatches("bare".into()))
        );
        let lenient = score_matrix(&texts, &bare, 1.02, ScoreMode::Local, false).unwrap();
        assert!(close(lenient.get(0, 0), 0.6, 1e-7));

        let wide = [EmbeddingRecord::image("w", vec![1.0, 0.0, 0.0], vec![])];
        assert!(matches!(
            score_matrix(&texts, &wide, 1.02, ScoreMode::Global, true),
            Err(AlignError::DimMismatch { .. })
        ));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("local".parse::<ScoreMode>().unwrap(), ScoreMode::Local);
        assert_eq!("global".parse::<ScoreMode>().unwrap(), ScoreMode::Global);
        assert!("both".parse::<ScoreMode>().is_err());
        assert_eq!(ScoreMode::default().to_string(), "local");
    }
}
