//! Browser bindings for three small interactive views over `laclip-core`:
//! patch weights as alpha varies, the contrastive loss as a function of the
//! temperature, and local versus global retrieval on a synthetic corpus.
//!
//! The computations live in [`demo`] and are plain Rust; the exported
//! functions below only convert errors for JavaScript.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// Softmax weights of `alpha · similarity`.
#[wasm_bindgen(js_name = patchWeights)]
pub fn patch_weights(similarities: Vec<f64>, alpha: f64) -> Result<Vec<f64>, JsError> {
    demo::weights(&similarities, alpha).map(|w| w.weights).map_err(js)
}

/// Entropy in nats of the weights returned by `patchWeights`.
#[wasm_bindgen(js_name = weightEntropy)]
pub fn weight_entropy(similarities: Vec<f64>, alpha: f64) -> Result<f64, JsError> {
    demo::weights(&similarities, alpha).map(|w| w.entropy()).map_err(js)
}

/// `points` temperatures spaced evenly in log scale over `[lo, hi]`.
#[wasm_bindgen(js_name = tauGrid)]
pub fn tau_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>, JsError> {
    demo::tau_grid(lo, hi, points).map_err(js)
}

/// Loss of one synthetic batch at every temperature of `tauGrid(lo, hi, points)`.
#[wasm_bindgen(js_name = lossCurve)]
pub fn loss_curve(n: usize, dim: usize, noise: f64, seed: u32, lo: f64, hi: f64, points: usize) -> Result<Vec<f64>, JsError> {
    let taus = demo::tau_grid(lo, hi, points).map_err(js)?;
    demo::loss_curve(n, dim, noise, seed.into(), &taus).map_err(js)
}

/// `[local R@1, global R@1, local MR, global MR]` over a corpus where each text
/// equals one patch of its image.
#[wasm_bindgen(js_name = toyRetrieval)]
pub fn toy_retrieval(n: usize, dim: usize, patches: usize, alpha: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    let c = demo::toy_retrieval(n, dim, patches, alpha, seed.into()).map_err(js)?;
    Ok(vec![c.local.t2i[0], c.global.t2i[0], c.local.mr, c.global.mr])
}
