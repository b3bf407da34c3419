//! Exact top-K retrieval in both directions.
//!
//! Every candidate is scored; there is no approximate index. Results are
//! ordered by descending score, and equal scores by ascending candidate id,
//! so output is identical across runs, thread counts and platforms.

use std::cmp::Ordering;
use std::path::Path;

use thiserror::Error;

use crate::alignment::{self, AlignError, PatchWeights, PreparedImage, ScoreMode};
use crate::math::{dot, SimilarityMatrix};
use crate::store::{EmbeddingStore, StoreError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("text dim {text} does not match image dim {image}")]
    DimMismatch { text: usize, image: usize },
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("k = {k} exceeds corpus size {corpus}")]
    KExceedsCorpus { k: usize, corpus: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("query has dim {got}, index dim is {expected}")]
    QueryDim { expected: usize, got: usize },
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Text query, image candidates.
    T2i,
    /// Image query, text candidates.
    I2t,
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "t2i" => Ok(Self::T2i),
            "i2t" => Ok(Self::I2t),
            other => Err(format!("unknown direction {other:?}, expected t2i or i2t")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub query_id: String,
    pub candidate_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexOptions {
    pub mode: ScoreMode,
    pub alpha: f64,
    /// Reject patch-free images in local mode and oversized `k` instead of
    /// falling back / clamping.
    pub strict: bool,
    /// Queries scored per block in batch paths.
    pub block_size: usize,
}

impl Default for IndexOptions {
    fn default() -> Self {
        Self {
            mode: ScoreMode::Local,
            alpha: crate::DEFAULT_ALPHA,
            strict: true,
            block_size: 256,
        }
    }
}

impl IndexOptions {
    pub fn new(mode: ScoreMode, alpha: f64) -> Self {
        Self {
            mode,
            alpha,
            ..Self::default()
        }
    }
}

/// Immutable, thread-shareable retrieval index over a text store and an image store.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    texts: EmbeddingStore,
    images: EmbeddingStore,
    opts: IndexOptions,
    text_units: Vec<Vec<f64>>,
    prepared: Vec<PreparedImage>,
}

/// Total order used for ranking: score descending, then candidate id ascending.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_id.cmp(b_id))
}

impl RetrievalIndex {
    pub fn build(texts: EmbeddingStore, images: EmbeddingStore, opts: IndexOptions) -> Result<Self> {
        if texts.dim() != images.dim() {
            return Err(RetrievalError::DimMismatch {
                text: texts.dim(),
                image: images.dim(),
            });
        }
        let dim = texts.dim();
        let text_units = texts
            .records()
            .iter()
            .map(|t| alignment::unit(&t.global))
            .collect::<Result<Vec<_>, _>>()?;
        let prepared = images
            .records()
            .iter()
            .map(|r| alignment::prepare_image(r, dim, opts.alpha, opts.mode, opts.strict))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            texts,
            images,
            opts,
            text_units,
            prepared,
        })
    }

    pub fn open(texts: &Path, images: &Path, opts: IndexOptions) -> Result<Self> {
        Self::build(EmbeddingStore::open(texts)?, EmbeddingStore::open(images)?, opts)
    }

    pub fn texts(&self) -> &EmbeddingStore {
        &self.texts
    }

    pub fn images(&self) -> &EmbeddingStore {
        &self.images
    }

    pub fn options(&self) -> IndexOptions {
        self.opts
    }

    pub fn dim(&self) -> usize {
        self.texts.dim()
    }

    /// Number of images with cached patch weights.
    pub fn cached_weight_sets(&self) -> usize {
        self.prepared.iter().filter(|p| p.weights.is_some()).count()
    }

    pub fn patch_weights(&self, image_id: &str) -> Option<&PatchWeights> {
        let i = self.images.index_of(image_id)?;
        self.prepared[i].weights.as_ref()
    }

    /// Score of text `t` against image `i`, by store position.
    pub fn score(&self, t: usize, i: usize) -> f64 {
        dot(&self.text_units[t], &self.prepared[i].direction).clamp(-1.0, 1.0)
    }

    fn scores_for_unit(&self, unit: &[f64]) -> Vec<f64> {
        self.prepared
            .iter()
            .map(|p| dot(unit, &p.direction).clamp(-1.0, 1.0))
            .collect()
    }

    /// All candidate scores for one query, by candidate store position.
    pub fn query_scores(&self, direction: Direction, query: usize) -> Vec<f64> {
        match direction {
            Direction::T2i => self.scores_for_unit(&self.text_units[query]),
            Direction::I2t => {
                let dir = &self.prepared[query].direction;
                self.text_units.iter().map(|u| dot(u, dir).clamp(-1.0, 1.0)).collect()
            }
        }
    }

    fn candidates(&self, direction: Direction) -> &EmbeddingStore {
        match direction {
            Direction::T2i => &self.images,
            Direction::I2t => &self.texts,
        }
    }

    fn queries(&self, direction: Direction) -> &EmbeddingStore {
        match direction {
            Direction::T2i => &self.texts,
            Direction::I2t => &self.images,
        }
    }

    fn effective_k(&self, k: usize, corpus: usize) -> Result<usize> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if k > corpus {
            if self.opts.strict {
                return Err(RetrievalError::KExceedsCorpus { k, corpus });
            }
            log::warn!("k = {k} exceeds corpus size {corpus}, clamping");
            return Ok(corpus);
        }
        Ok(k)
    }

    fn top_k(
        &self,
        direction: Direction,
        query_id: &str,
        scores: &[f64],
        k: usize,
        keep: &dyn Fn(usize) -> bool,
    ) -> Vec<ScoredPair> {
        let cands = self.candidates(direction).records();
        let mut idx: Vec<usize> = (0..scores.len()).filter(|&c| keep(c)).collect();
        let cmp = |a: &usize, b: &usize| rank_order(scores[*a], &cands[*a].id, scores[*b], &cands[*b].id);
        let k = k.min(idx.len());
        if k == 0 {
            return Vec::new();
        }
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, cmp);
            idx.truncate(k);
        }
        idx.sort_unstable_by(cmp);
        idx.into_iter()
            .enumerate()
            .map(|(r, c)| ScoredPair {
                query_id: query_id.to_owned(),
                candidate_id: cands[c].id.clone(),
                score: scores[c],
                rank: r + 1,
            })
            .collect()
    }

    /// Top-K by query position, restricted to candidates for which `keep` holds.
    pub fn query_filtered(
        &self,
        direction: Direction,
        query: usize,
        k: usize,
        keep: &dyn Fn(usize) -> bool,
    ) -> Result<Vec<ScoredPair>> {
        let k = self.effective_k(k, self.candidates(direction).len())?;
        let scores = self.query_scores(direction, query);
        let qid = &self.queries(direction).records()[query].id;
        Ok(self.top_k(direction, qid, &scores, k, keep))
    }

    pub fn query_by_id(&self, direction: Direction, id: &str, k: usize) -> Result<Vec<ScoredPair>> {
        let q = self
            .queries(direction)
            .index_of(id)
            .ok_or_else(|| RetrievalError::UnknownId(id.to_owned()))?;
        self.query_filtered(direction, q, k, &|_| true)
    }

    pub fn query_t2i(&self, text_id: &str, k: usize) -> Result<Vec<ScoredPair>> {
        self.query_by_id(Direction::T2i, text_id, k)
    }

    pub fn query_i2t(&self, image_id: &str, k: usize) -> Result<Vec<ScoredPair>> {
        self.query_by_id(Direction::I2t, image_id, k)
    }

    /// Text-to-image search with an embedding that is not in the text store.
    pub fn query_t2i_vector(&self, query: &[f32], k: usize) -> Result<Vec<ScoredPair>> {
        if query.len() != self.dim() {
            return Err(RetrievalError::QueryDim {
                expected: self.dim(),
                got: query.len(),
            });
        }
        let k = self.effective_k(k, self.images.len())?;
        let unit = alignment::unit(query)?;
        let scores = self.scores_for_unit(&unit);
        Ok(self.top_k(Direction::T2i, "<query>", &scores, k, &|_| true))
    }

    /// Top-K for many queries (store positions), scored in blocks of
    /// `block_size` queries. Output is in query order.
    pub fn batch_query(&self, direction: Direction, queries: &[usize], k: usize) -> Result<Vec<Vec<ScoredPair>>> {
        let k = self.effective_k(k, self.candidates(direction).len())?;
        let qs = self.queries(direction).records();
        let run_block = |block: &[usize]| -> Vec<Vec<ScoredPair>> {
            block
                .iter()
                .map(|&q| {
                    let scores = self.query_scores(direction, q);
                    self.top_k(direction, &qs[q].id, &scores, k, &|_| true)
                })
                .collect()
        };
        Ok(self.map_blocks(queries, run_block))
    }

    /// Full text-major score matrix (texts × images), computed in query blocks.
    pub fn score_all(&self) -> SimilarityMatrix {
        let all: Vec<usize> = (0..self.texts.len()).collect();
        let rows = self.map_blocks(&all, |block| {
            block
                .iter()
                .map(|&t| self.query_scores(Direction::T2i, t))
                .collect()
        });
        SimilarityMatrix::from_vec(self.texts.len(), self.images.len(), rows.concat())
            .expect("clamped scores are always in range")
    }

    #[cfg(feature = "parallel")]
    fn map_blocks<T: Send>(&self, items: &[usize], f: impl Fn(&[usize]) -> Vec<T> + Sync + Send) -> Vec<T> {
        use rayon::prelude::*;
        items
            .par_chunks(self.opts.block_size.max(1))
            .map(f)
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    }

    #[cfg(not(feature = "parallel"))]
    fn map_blocks<T>(&self, items: &[usize], f: impl Fn(&[usize]) -> Vec<T>) -> Vec<T> {
        items.chunks(self.opts.block_size.max(1)).flat_map(f).collect()
    }
}
