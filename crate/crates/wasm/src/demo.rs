use laclip_core::alignment::weights_from_similarities;
use laclip_core::eval::{evaluate_split, GoldMapping, RecallReport, DEFAULT_KS};
use laclip_core::math::{cosine_similarity, total_loss, SimilarityMatrix, Temperature};
use laclip_core::retrieval::IndexOptions;
use laclip_core::{EmbeddingRecord, EmbeddingStore, PatchWeights, RetrievalIndex, ScoreMode};
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub type Result<T> = std::result::Result<T, String>;

const MAX_BATCH: usize = 512;
const MAX_CORPUS: usize = 2000;
const MAX_DIM: usize = 1024;

fn gaussian(rng: &mut StdRng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn check_size(name: &str, value: usize, lo: usize, hi: usize) -> Result<()> {
    if (lo..=hi).contains(&value) {
        Ok(())
    } else {
        Err(format!("{name} must be in {lo}..={hi}, got {value}"))
    }
}

pub fn weights(similarities: &[f64], alpha: f64) -> Result<PatchWeights> {
    weights_from_similarities(similarities, alpha).map_err(|e| e.to_string())
}

pub fn tau_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(format!("need 0 < lo < hi, got [{lo}, {hi}]"));
    }
    check_size("points", points, 2, 4096)?;
    let (a, b) = (lo.ln(), hi.ln());
    let step = (b - a) / (points - 1) as f64;
    Ok((0..points).map(|i| (a + step * i as f64).exp()).collect())
}

/// Cosine matrix of `n` pairs where each text is its image plus Gaussian noise.
pub fn noisy_batch(n: usize, dim: usize, noise: f64, seed: u64) -> Result<SimilarityMatrix> {
    check_size("n", n, 2, MAX_BATCH)?;
    check_size("dim", dim, 1, MAX_DIM)?;
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(format!("noise must be finite and >= 0, got {noise}"));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let images: Vec<Vec<f32>> = (0..n).map(|_| gaussian(&mut rng, dim)).collect();
    let texts: Vec<Vec<f32>> = images
        .iter()
        .map(|v| {
            let e = gaussian(&mut rng, dim);
            v.iter().zip(e).map(|(x, e)| x + noise as f32 * e).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * n);
    for t in &texts {
        for v in &images {
            data.push(cosine_similarity(t, v).map_err(|e| e.to_string())?);
        }
    }
    SimilarityMatrix::from_vec(n, n, data).map_err(|e| e.to_string())
}

pub fn loss_curve(n: usize, dim: usize, noise: f64, seed: u64, taus: &[f64]) -> Result<Vec<f64>> {
    let s = noisy_batch(n, dim, noise, seed)?;
    taus.iter()
        .map(|&tau| {
            let t = Temperature::new(tau).map_err(|e| e.to_string())?;
            total_loss(&s, t).map_err(|e| e.to_string())
        })
        .collect()
}

/// Each text equals one patch of its image; the global is the mean of the
/// remaining patches.
pub fn toy_corpus(n: usize, dim: usize, patches: usize, seed: u64) -> Result<(EmbeddingStore, EmbeddingStore)> {
    check_size("n", n, 2, MAX_CORPUS)?;
    check_size("dim", dim, 1, MAX_DIM)?;
    check_size("patches", patches, 2, 64)?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut texts = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("item{i:04}");
        let t = gaussian(&mut rng, dim);
        let mut ps: Vec<Vec<f32>> = (1..patches).map(|_| gaussian(&mut rng, dim)).collect();
        let global: Vec<f32> = (0..dim)
            .map(|k| ps.iter().map(|p| p[k]).sum::<f32>() / ps.len() as f32)
            .collect();
        ps.insert(i % patches, t.clone());
        texts.push(EmbeddingRecord::text(id.clone(), t));
        images.push(EmbeddingRecord::image(id, global, ps));
    }
    let texts = EmbeddingStore::new(texts, dim, false).map_err(|e| e.to_string())?;
    let images = EmbeddingStore::new(images, dim, false).map_err(|e| e.to_string())?;
    Ok((texts, images))
}

pub struct Comparison {
    pub local: RecallReport,
    pub global: RecallReport,
}

pub fn toy_retrieval(n: usize, dim: usize, patches: usize, alpha: f64, seed: u64) -> Result<Comparison> {
    let (texts, images) = toy_corpus(n, dim, patches, seed)?;
    let gold = GoldMapping::identity(texts.records().iter().map(|r| r.id.as_str())).map_err(|e| e.to_string())?;
    let report = |mode| -> Result<RecallReport> {
        let index = RetrievalIndex::build(texts.clone(), images.clone(), IndexOptions::new(mode, alpha))
            .map_err(|e| e.to_string())?;
        evaluate_split(&index, &gold, DEFAULT_KS).map_err(|e| e.to_string())
    };
    Ok(Comparison {
        local: report(ScoreMode::Local)?,
        global: report(ScoreMode::Global)?,
    })
}
