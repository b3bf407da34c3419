//! Cross-modal image/text retrieval over precomputed embeddings.
//!
//! The crate covers the full offline loop:
//!
//! - [`math`]: cosine similarity, stable softmax and the bidirectional
//!   temperature-scaled contrastive loss with hand-derived gradients.
//! - [`dataset`]: JSON Lines manifests and the per-(volume, category)
//!   7:1:2 train/test/val partition.
//! - [`store`]: the `CEMB` binary container for global and patch embeddings.
//! - [`alignment`]: patch weights and the weighted local-to-global score.
//! - [`retrieval`]: exact top-K search in both directions.
//! - [`eval`]: Recall@K / Mean Recall reporting.
//! - [`trainer`]: linear projection heads trained with the contrastive loss.

pub mod alignment;
pub mod dataset;
pub mod eval;
pub mod fsutil;
pub mod math;
pub mod retrieval;
pub mod rng;
pub mod store;
pub mod trainer;

pub use alignment::{local_aligned_score, patch_weights, score_matrix, PatchWeights, ScoreMode};
pub use math::{cosine_similarity, stable_softmax, SimilarityMatrix, Temperature};
pub use retrieval::{Direction, RetrievalIndex, ScoredPair};
pub use store::{EmbeddingRecord, EmbeddingStore, StoreHeader};

/// Scaling factor applied to patch/global similarities before the weight softmax.
pub const DEFAULT_ALPHA: f64 = 1.02;

/// Seed used when none is given on the command line.
pub const DEFAULT_SEED: u64 = 42;
