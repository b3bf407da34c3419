//! Generators and naive oracles shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Ordering;

use laclip_core::trainer::PairedData;
use laclip_core::{EmbeddingRecord, EmbeddingStore};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut StdRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn gauss_f32(rng: &mut StdRng, d: usize) -> Vec<f32> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Plain textbook cosine in `f64`.
pub fn naive_cos(a: &[f32], b: &[f32]) -> f64 {
    let (a, b) = (to_f64(a), to_f64(b));
    dot(&a, &b) / (norm(&a) * norm(&b))
}

/// Patch weights recomputed from scratch: exp of scaled cosines over their sum.
pub fn naive_weights(global: &[f32], patches: &[Vec<f32>], alpha: f64) -> Vec<f64> {
    let logits: Vec<f64> = patches.iter().map(|p| alpha * naive_cos(p, global)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Weighted sum of patch-to-text cosines, one pair at a time.
pub fn naive_local(text: &[f32], global: &[f32], patches: &[Vec<f32>], alpha: f64) -> f64 {
    naive_weights(global, patches, alpha)
        .iter()
        .zip(patches)
        .map(|(w, p)| w * naive_cos(p, text))
        .sum()
}

/// Contrastive loss written out directly from its definition. `s` is text-major.
pub fn naive_loss(s: &[Vec<f64>], tau: f64) -> f64 {
    let n = s.len();
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for i in 0..n {
        // image i against all texts: column i of the text-major matrix
        let col: f64 = (0..n).map(|j| (s[j][i] / tau).exp()).sum();
        i2t -= ((s[i][i] / tau).exp() / col).ln();
        let row: f64 = (0..n).map(|j| (s[i][j] / tau).exp()).sum();
        t2i -= ((s[i][i] / tau).exp() / row).ln();
    }
    0.5 * (i2t + t2i) / n as f64
}

pub fn cos_matrix(texts: &[Vec<f64>], images: &[Vec<f64>]) -> Vec<Vec<f64>> {
    texts
        .iter()
        .map(|t| images.iter().map(|v| dot(t, v) / (norm(t) * norm(v))).collect())
        .collect()
}

pub fn matvec(m: &[f64], d: usize, x: &[f64]) -> Vec<f64> {
    (0..d).map(|r| dot(&m[r * d..(r + 1) * d], x)).collect()
}

/// Exhaustive ranking: every candidate scored, stable sort by score
/// descending then id ascending, first `k` kept.
pub fn brute_force_top_k(scores: &[f64], ids: &[String], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = ids.iter().cloned().zip(scores.iter().copied()).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Random orthogonal matrix (rows) by Gram-Schmidt on Gaussian vectors.
pub fn random_rotation(rng: &mut StdRng, d: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v = gauss(rng, d);
        for q in &rows {
            let p = dot(&v, q);
            v.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-6 {
            rows.push(v.iter().map(|x| x / n).collect());
        }
    }
    rows
}

/// Images are standard Gaussian; each text is `R·image + σ·noise` for one
/// hidden rotation `R` shared by the train and val splits.
pub fn hidden_rotation_corpus(seed: u64, n_train: usize, n_val: usize, d: usize, sigma: f64) -> (PairedData, PairedData) {
    let mut rng = rng(seed);
    let r = random_rotation(&mut rng, d);
    let mut make = |n: usize, prefix: &str| {
        let mut data = PairedData {
            ids: Vec::new(),
            texts: Vec::new(),
            images: Vec::new(),
        };
        for i in 0..n {
            let v = gauss(&mut rng, d);
            let e = gauss(&mut rng, d);
            let t: Vec<f64> = r.iter().zip(&e).map(|(row, ek)| dot(row, &v) + sigma * ek).collect();
            data.ids.push(format!("{prefix}{i:04}"));
            data.texts.push(t);
            data.images.push(v);
        }
        data
    };
    let train = make(n_train, "tr");
    let val = make(n_val, "va");
    (train, val)
}

/// Each text equals one patch of its image; the image's other patches are
/// unrelated directions and its global is their mean, so the text is far from
/// the global but exactly matches a patch.
pub fn local_vs_global_corpus(seed: u64, n: usize, d: usize, n_patches: usize) -> (EmbeddingStore, EmbeddingStore) {
    let mut rng = rng(seed);
    let mut texts = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("item{i:04}");
        let t = gauss_f32(&mut rng, d);
        let others: Vec<Vec<f32>> = (1..n_patches).map(|_| gauss_f32(&mut rng, d)).collect();
        let global: Vec<f32> = (0..d)
            .map(|k| others.iter().map(|p| p[k]).sum::<f32>() / others.len() as f32)
            .collect();
        let mut patches = others;
        let slot = rng.gen_range(0..n_patches);
        patches.insert(slot, t.clone());
        texts.push(EmbeddingRecord::text(id.clone(), t));
        images.push(EmbeddingRecord::image(id, global, patches));
    }
    (
        EmbeddingStore::new(texts, d, false).unwrap(),
        EmbeddingStore::new(images, d, false).unwrap(),
    )
}

/// Store of random records: texts have no patches, images have `n_patches`.
pub fn random_store(rng: &mut StdRng, n: usize, d: usize, n_patches: usize, prefix: &str) -> EmbeddingStore {
    let records = (0..n)
        .map(|i| {
            let id = format!("{prefix}{i:05}");
            let global = gauss_f32(rng, d);
            let patches = (0..n_patches).map(|_| gauss_f32(rng, d)).collect();
            EmbeddingRecord::image(id, global, patches)
        })
        .collect();
    EmbeddingStore::new(records, d, false).unwrap()
}

/// Norm-wise relative error between two gradients.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn batch_loss(texts: &[Vec<f64>], images: &[Vec<f64>], tau: f64) -> f64 {
    naive_loss(&cos_matrix(texts, images), tau)
}

/// Central differences of the loss with respect to every text coordinate,
/// image coordinate and tau, flattened in that order.
pub fn finite_difference(texts: &[Vec<f64>], images: &[Vec<f64>], tau: f64, h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for side in 0..2 {
        let base = if side == 0 { texts } else { images };
        for i in 0..base.len() {
            for k in 0..base[i].len() {
                let mut plus = base.to_vec();
                let mut minus = base.to_vec();
                plus[i][k] += h;
                minus[i][k] -= h;
                let (lp, lm) = if side == 0 {
                    (batch_loss(&plus, images, tau), batch_loss(&minus, images, tau))
                } else {
                    (batch_loss(texts, &plus, tau), batch_loss(texts, &minus, tau))
                };
                out.push((lp - lm) / (2.0 * h));
            }
        }
    }
    out.push((batch_loss(texts, images, tau + h) - batch_loss(texts, images, tau - h)) / (2.0 * h));
    out
}

pub fn head_loss(head: &laclip_core::trainer::ProjectionHead, texts: &[Vec<f64>], images: &[Vec<f64>]) -> f64 {
    let d = head.dim();
    let xs: Vec<Vec<f64>> = texts.iter().map(|t| matvec(&head.text, d, t)).collect();
    let ys: Vec<Vec<f64>> = images.iter().map(|v| matvec(&head.image, d, v)).collect();
    naive_loss(&cos_matrix(&xs, &ys), head.tau)
}

/// Central differences of the head loss with respect to every text-matrix
/// entry, image-matrix entry and tau, flattened in that order.
pub fn head_finite_difference(
    head: &laclip_core::trainer::ProjectionHead,
    texts: &[Vec<f64>],
    images: &[Vec<f64>],
    h: f64,
) -> Vec<f64> {
    let d = head.dim();
    let mut out = Vec::with_capacity(2 * d * d + 1);
    for side in 0..2 {
        for k in 0..d * d {
            let mut plus = head.clone();
            let mut minus = head.clone();
            let (p, m) = if side == 0 {
                (&mut plus.text, &mut minus.text)
            } else {
                (&mut plus.image, &mut minus.image)
            };
            p[k] += h;
            m[k] -= h;
            out.push((head_loss(&plus, texts, images) - head_loss(&minus, texts, images)) / (2.0 * h));
        }
    }
    let mut plus = head.clone();
    let mut minus = head.clone();
    plus.tau += h;
    minus.tau -= h;
    out.push((head_loss(&plus, texts, images) - head_loss(&minus, texts, images)) / (2.0 * h));
    out
}
