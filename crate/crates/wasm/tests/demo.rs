use laclip_core::math::{total_loss, Temperature};
use laclip_wasm::demo;

#[test]
fn weights_form_a_distribution_that_sharpens_with_alpha() {
    let sims = [0.9, 0.6, 0.3, 0.1, -0.2];
    let flat = demo::weights(&sims, 0.0).unwrap();
    assert!(flat.weights.iter().all(|w| (w - 0.2).abs() < 1e-12));
    let mut prev = f64::INFINITY;
    for alpha in [0.0, 1.02, 5.0, 20.0, 100.0] {
        let w = demo::weights(&sims, alpha).unwrap();
        assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.entropy() <= prev + 1e-12);
        prev = w.entropy();
    }
    assert!(demo::weights(&sims, 100.0).unwrap().weights[0] > 0.99);
    assert!(demo::weights(&[], 1.0).is_err());
    assert!(demo::weights(&sims, -1.0).is_err());
}

#[test]
fn tau_grid_is_log_spaced() {
    let g = demo::tau_grid(0.01, 100.0, 5).unwrap();
    for (a, b) in g.iter().zip([0.01, 0.1, 1.0, 10.0, 100.0]) {
        assert!((a / b - 1.0).abs() < 1e-12);
    }
    assert!(demo::tau_grid(0.0, 1.0, 5).is_err());
    assert!(demo::tau_grid(1.0, 1.0, 5).is_err());
    assert!(demo::tau_grid(0.1, 1.0, 1).is_err());
}

#[test]
fn loss_curve_matches_core_and_tends_to_ln_n() {
    let n = 24;
    let taus = demo::tau_grid(0.01, 1e4, 50).unwrap();
    let curve = demo::loss_curve(n, 16, 1.0, 42, &taus).unwrap();
    let s = demo::noisy_batch(n, 16, 1.0, 42).unwrap();
    for (tau, l) in taus.iter().zip(&curve) {
        assert_eq!(*l, total_loss(&s, Temperature::new(*tau).unwrap()).unwrap());
    }
    // all logits collapse to zero as tau grows
    assert!((curve.last().unwrap() - (n as f64).ln()).abs() < 1e-3);
    assert_eq!(curve, demo::loss_curve(n, 16, 1.0, 42, &taus).unwrap());
    assert!(demo::loss_curve(1, 16, 1.0, 42, &taus).is_err());
    assert!(demo::loss_curve(n, 16, f64::NAN, 42, &taus).is_err());
}

#[test]
fn local_scoring_beats_global_on_the_toy_corpus() {
    let c = demo::toy_retrieval(200, 32, 4, 1.02, 42).unwrap();
    assert!(c.local.t2i[0] > c.global.t2i[0] + 10.0, "{:?} vs {:?}", c.local, c.global);
    assert!(c.local.mr > c.global.mr);
    let again = demo::toy_retrieval(200, 32, 4, 1.02, 42).unwrap();
    assert_eq!(c.local, again.local);
    assert!(demo::toy_retrieval(200, 32, 1, 1.02, 42).is_err());
}

#[test]
fn toy_corpus_texts_are_patches() {
    let (texts, images) = demo::toy_corpus(10, 8, 3, 1).unwrap();
    for (i, (t, v)) in texts.records().iter().zip(images.records()).enumerate() {
        assert_eq!(t.id, v.id);
        assert_eq!(v.patches.len(), 3);
        assert_eq!(v.patches[i % 3], t.global);
    }
}
