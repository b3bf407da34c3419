//! Linear projection heads trained with the bidirectional contrastive loss.
//!
//! Each modality gets a square matrix applied to its frozen global embedding;
//! the temperature is learned jointly and clamped to `tau_min` after every
//! update. Negatives are the other pairs in the same batch.

use std::path::Path;

use thiserror::Error;

use crate::alignment::ScoreMode;
use crate::eval::{self, EvalError, GoldMapping};
use crate::fsutil::write_atomic;
use crate::math::{self, cosine_similarity, MathError, SimilarityMatrix, Temperature, TAU_MIN};
use crate::retrieval::{IndexOptions, RetrievalError, RetrievalIndex};
use crate::rng::SplitMix64;
use crate::store::{EmbeddingRecord, EmbeddingStore, StoreError};

pub const HEAD_MAGIC: [u8; 4] = *b"CHED";
pub const HEAD_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch of {0} pairs is too small, need at least 2")]
    BatchTooSmall(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("id {0:?} is missing from one of the stores")]
    MissingId(String),
    #[error("bad head file: {0}")]
    BadHead(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("{0}")]
    Io(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8, no weight decay.
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(format!("unknown optimizer {other:?}, expected adam or sgd")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub tau_min: f64,
    /// Freeze both matrices and only learn the temperature.
    pub tau_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 5e-5,
            epochs: 3,
            seed: crate::DEFAULT_SEED,
            optimizer: Optimizer::Adam,
            tau_min: TAU_MIN,
            tau_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.tau_min.is_finite() && self.tau_min > 0.0) {
            return Err(TrainError::InvalidConfig(format!("tau_min must be positive, got {}", self.tau_min)));
        }
        Ok(())
    }
}

/// Per-modality `d×d` projections (row-major) and the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    dim: usize,
    pub text: Vec<f64>,
    pub image: Vec<f64>,
    pub tau: f64,
}

impl ProjectionHead {
    pub fn identity(dim: usize) -> Self {
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        Self {
            dim,
            text: eye.clone(),
            image: eye,
            tau: 1.0,
        }
    }

    pub fn from_parts(dim: usize, text: Vec<f64>, image: Vec<f64>, tau: f64) -> Result<Self> {
        if text.len() != dim * dim || image.len() != dim * dim {
            return Err(TrainError::DimMismatch {
                expected: dim * dim,
                got: text.len().min(image.len()),
            });
        }
        if text.iter().chain(&image).any(|x| !x.is_finite()) || !(tau.is_finite() && tau > 0.0) {
            return Err(TrainError::InvalidConfig("head entries and tau must be finite, tau > 0".into()));
        }
        Ok(Self { dim, text, image, tau })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn temperature(&self) -> Temperature {
        Temperature::new(self.tau).expect("tau is kept positive")
    }

    fn project(matrix: &[f64], dim: usize, x: &[f64]) -> Vec<f64> {
        matrix.chunks_exact(dim).map(|row| math::dot(row, x)).collect()
    }

    pub fn project_text(&self, x: &[f64]) -> Vec<f64> {
        Self::project(&self.text, self.dim, x)
    }

    pub fn project_image(&self, x: &[f64]) -> Vec<f64> {
        Self::project(&self.image, self.dim, x)
    }

    fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(2 * self.dim * self.dim + 1);
        p.extend_from_slice(&self.text);
        p.extend_from_slice(&self.image);
        p.push(self.tau);
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let n = self.dim * self.dim;
        self.text.copy_from_slice(&p[..n]);
        self.image.copy_from_slice(&p[n..2 * n]);
        self.tau = p[2 * n];
    }

    /// `CHED` layout: magic | version u16 | dim u32 | text d×d f32 | image d×d f32 | tau f32,
    /// little-endian, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + (2 * self.dim * self.dim + 1) * 4);
        out.extend_from_slice(&HEAD_MAGIC);
        out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in self.text.iter().chain(&self.image).chain(std::iter::once(&self.tau)) {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || bytes[..4] != HEAD_MAGIC {
            return Err(TrainError::BadHead("missing CHED magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != HEAD_VERSION {
            return Err(TrainError::BadHead(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let n = dim * dim;
        if dim == 0 || bytes.len() != 10 + (2 * n + 1) * 4 {
            return Err(TrainError::BadHead(format!("length {} does not match dim {dim}", bytes.len())));
        }
        let floats: Vec<f64> = bytes[10..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::from_parts(dim, floats[..n].to_vec(), floats[n..2 * n].to_vec(), floats[2 * n])
            .map_err(|e| TrainError::BadHead(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Text-major similarities of a projected batch: `S_ij = cos(W_t t_i, W_v v_j)`.
pub fn forward<T: AsRef<[f64]>, V: AsRef<[f64]>>(head: &ProjectionHead, texts: &[T], images: &[V]) -> Result<SimilarityMatrix> {
    let d = head.dim();
    for v in texts.iter().map(AsRef::as_ref).chain(images.iter().map(AsRef::as_ref)) {
        if v.len() != d {
            return Err(TrainError::DimMismatch { expected: d, got: v.len() });
        }
    }
    let xs: Vec<_> = texts.iter().map(|t| head.project_text(t.as_ref())).collect();
    let ys: Vec<_> = images.iter().map(|v| head.project_image(v.as_ref())).collect();
    let mut data = Vec::with_capacity(xs.len() * ys.len());
    for x in &xs {
        for y in &ys {
            data.push(cosine_similarity(x, y)?);
        }
    }
    Ok(SimilarityMatrix::from_vec(xs.len(), ys.len(), data)?)
}

/// Loss of a batch and its gradient w.r.t. both matrices and tau.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub loss: f64,
    pub text: Vec<f64>,
    pub image: Vec<f64>,
    pub tau: f64,
}

pub fn head_grad<T: AsRef<[f64]>, V: AsRef<[f64]>>(head: &ProjectionHead, texts: &[T], images: &[V]) -> Result<HeadGrad> {
    let d = head.dim();
    if texts.len() < 2 {
        return Err(TrainError::BatchTooSmall(texts.len()));
    }
    for v in texts.iter().map(AsRef::as_ref).chain(images.iter().map(AsRef::as_ref)) {
        if v.len() != d {
            return Err(TrainError::DimMismatch { expected: d, got: v.len() });
        }
    }
    let xs: Vec<_> = texts.iter().map(|t| head.project_text(t.as_ref())).collect();
    let ys: Vec<_> = images.iter().map(|v| head.project_image(v.as_ref())).collect();
    let g = math::total_loss_grad(&xs, &ys, head.temperature())?;
    let outer = |grads: &[Vec<f64>], inputs: &[&[f64]]| {
        let mut out = vec![0.0; d * d];
        for (gi, xi) in grads.iter().zip(inputs) {
            for r in 0..d {
                let gr = gi[r];
                for (o, x) in out[r * d..(r + 1) * d].iter_mut().zip(xi.iter()) {
                    *o += gr * x;
                }
            }
        }
        out
    };
    let ts: Vec<&[f64]> = texts.iter().map(AsRef::as_ref).collect();
    let vs: Vec<&[f64]> = images.iter().map(AsRef::as_ref).collect();
    Ok(HeadGrad {
        loss: g.loss,
        text: outer(&g.texts, &ts),
        image: outer(&g.images, &vs),
        tau: g.tau,
    })
}

/// Adam moments (unused for SGD) and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(head: &ProjectionHead) -> Self {
        let n = 2 * head.dim() * head.dim() + 1;
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// One optimizer update on a paired batch. Returns the updated head and the
/// loss measured before the update.
pub fn train_step<T: AsRef<[f64]>, V: AsRef<[f64]>>(
    head: &ProjectionHead,
    state: &mut OptimizerState,
    texts: &[T],
    images: &[V],
    config: &TrainConfig,
) -> Result<(ProjectionHead, f64)> {
    config.validate()?;
    if texts.len() != images.len() {
        return Err(TrainError::DimMismatch {
            expected: texts.len(),
            got: images.len(),
        });
    }
    let g = head_grad(head, texts, images)?;
    let mut grad = Vec::with_capacity(state.m.len());
    if config.tau_only {
        grad.resize(g.text.len() + g.image.len(), 0.0);
    } else {
        grad.extend_from_slice(&g.text);
        grad.extend_from_slice(&g.image);
    }
    grad.push(g.tau);

    let mut params = head.params();
    let lr = config.learning_rate;
    state.t += 1;
    match config.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
        }
        Optimizer::Adam => {
            let t = state.t as i32;
            let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
            for (k, (p, g)) in params.iter_mut().zip(&grad).enumerate() {
                state.m[k] = BETA1 * state.m[k] + (1.0 - BETA1) * g;
                state.v[k] = BETA2 * state.v[k] + (1.0 - BETA2) * g * g;
                let m_hat = state.m[k] / c1;
                let v_hat = state.v[k] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
    }
    let mut next = head.clone();
    next.set_params(&params);
    next.tau = next.tau.max(config.tau_min);
    Ok((next, g.loss))
}

/// Paired global embeddings, promoted to `f64`, with their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedData {
    pub ids: Vec<String>,
    pub texts: Vec<Vec<f64>>,
    pub images: Vec<Vec<f64>>,
}

impl PairedData {
    /// Pairs `ids` from a text store and an image store keyed by the same id.
    pub fn from_stores<'a>(
        texts: &EmbeddingStore,
        images: &EmbeddingStore,
        ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        if texts.dim() != images.dim() {
            return Err(TrainError::DimMismatch {
                expected: texts.dim(),
                got: images.dim(),
            });
        }
        let promote = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let mut out = PairedData {
            ids: Vec::new(),
            texts: Vec::new(),
            images: Vec::new(),
        };
        for id in ids {
            let (Some(t), Some(i)) = (texts.get(id), images.get(id)) else {
                return Err(TrainError::MissingId(id.to_owned()));
            };
            out.ids.push(id.to_owned());
            out.texts.push(promote(&t.global));
            out.images.push(promote(&i.global));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.texts.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training objective after the epoch: mean in-batch loss over the
    /// training pairs, batched in their stored order.
    pub loss: f64,
    /// Mean of the losses seen by the epoch's (shuffled) steps.
    pub step_loss: f64,
    /// Text-to-image R@1 (percent) on the validation pairs after the epoch.
    pub val_r1: Option<f64>,
}

impl EpochRecord {
    pub fn to_tsv(&self) -> String {
        match self.val_r1 {
            Some(r) => format!("{}\t{:.6}\t{:.6}\t{:.2}", self.epoch, self.loss, self.step_loss, r),
            None => format!("{}\t{:.6}\t{:.6}\t-", self.epoch, self.loss, self.step_loss),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub head: ProjectionHead,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
}

/// Batches of indices for one epoch. A trailing singleton is folded into the
/// previous batch since a one-pair batch has no negatives.
fn epoch_batches(order: &[usize], batch: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch).collect();
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        out.pop();
        let k = out.len() - 1;
        let start = k * batch;
        out[k] = &order[start..];
    }
    out
}

/// Mean in-batch loss of `data` under `head`, batched in stored order.
pub fn dataset_loss(head: &ProjectionHead, data: &PairedData, batch_size: usize) -> Result<f64> {
    let order: Vec<usize> = (0..data.len()).collect();
    let batches = epoch_batches(&order, batch_size);
    let mut total = 0.0;
    for batch in &batches {
        let ts: Vec<&[f64]> = batch.iter().map(|&i| data.texts[i].as_slice()).collect();
        let vs: Vec<&[f64]> = batch.iter().map(|&i| data.images[i].as_slice()).collect();
        total += head_grad(head, &ts, &vs)?.loss;
    }
    Ok(total / batches.len() as f64)
}

/// Text-to-image R@1 of `data` under `head`, global scoring, full pool.
pub fn validation_r1(head: &ProjectionHead, data: &PairedData) -> Result<f64> {
    let (ts, is) = project_pairs(head, data)?;
    let index = RetrievalIndex::build(ts, is, IndexOptions::new(ScoreMode::Global, crate::DEFAULT_ALPHA))?;
    let gold = GoldMapping::identity(data.ids.iter().map(String::as_str))?;
    Ok(eval::evaluate_split(&index, &gold, [1, 1, 1])?.t2i[0])
}

fn project_pairs(head: &ProjectionHead, data: &PairedData) -> Result<(EmbeddingStore, EmbeddingStore)> {
    let d = head.dim();
    let demote = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    let ts = data
        .ids
        .iter()
        .zip(&data.texts)
        .map(|(id, t)| EmbeddingRecord::text(id.clone(), demote(head.project_text(t))))
        .collect();
    let is = data
        .ids
        .iter()
        .zip(&data.images)
        .map(|(id, v)| EmbeddingRecord::image(id.clone(), demote(head.project_image(v)), vec![]))
        .collect();
    Ok((EmbeddingStore::new(ts, d, false)?, EmbeddingStore::new(is, d, false)?))
}

/// Run `config.epochs` epochs of shuffled mini-batch training.
pub fn train(head_init: &ProjectionHead, data: &PairedData, config: &TrainConfig, val: Option<&PairedData>) -> Result<TrainOutcome> {
    config.validate()?;
    if data.len() < 2 && config.epochs > 0 {
        return Err(TrainError::BatchTooSmall(data.len()));
    }
    for d in std::iter::once(data).chain(val) {
        if !d.is_empty() && d.dim() != head_init.dim() {
            return Err(TrainError::DimMismatch {
                expected: head_init.dim(),
                got: d.dim(),
            });
        }
    }
    let mut head = head_init.clone();
    let mut state = OptimizerState::new(&head);
    let mut rng = SplitMix64::new(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let batches = epoch_batches(&order, config.batch_size);
        for batch in &batches {
            let ts: Vec<&[f64]> = batch.iter().map(|&i| data.texts[i].as_slice()).collect();
            let vs: Vec<&[f64]> = batch.iter().map(|&i| data.images[i].as_slice()).collect();
            let (next, loss) = train_step(&head, &mut state, &ts, &vs, config)?;
            head = next;
            total += loss;
        }
        let val_r1 = match val {
            Some(v) if !v.is_empty() => Some(validation_r1(&head, v)?),
            _ => None,
        };
        history.push(EpochRecord {
            epoch,
            loss: dataset_loss(&head, data, config.batch_size)?,
            step_loss: total / batches.len() as f64,
            val_r1,
        });
    }
    Ok(TrainOutcome {
        head,
        history,
        steps: state.steps(),
    })
}

/// Map every global and patch vector of `store` through the text or image matrix.
pub fn apply_head(head: &ProjectionHead, store: &EmbeddingStore, image_side: bool) -> Result<EmbeddingStore> {
    let d = head.dim();
    if store.dim() != d {
        return Err(TrainError::DimMismatch {
            expected: d,
            got: store.dim(),
        });
    }
    let matrix = if image_side { &head.image } else { &head.text };
    let map = |v: &[f32]| -> Vec<f32> {
        let x: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        ProjectionHead::project(matrix, d, &x).into_iter().map(|y| y as f32).collect()
    };
    let records = store
        .records()
        .iter()
        .map(|r| EmbeddingRecord {
            id: r.id.clone(),
            global: map(&r.global),
            patches: r.patches.iter().map(|p| map(p)).collect(),
        })
        .collect();
    Ok(EmbeddingStore::new(records, d, false)?)
}
