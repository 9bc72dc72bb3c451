//! End-to-end flows through the public API.

use greenlist::attacks::{edit_distance, greenaware_attack, random_edit_attack, EditMix};
use greenlist::certificates::{certified_edit_budget, PenaltyBound};
use greenlist::detector::{detect_any, Detector, Threshold};
use greenlist::lm::{entropy_diagnostics, ngram_fit, synthetic_corpus, uniform_lm, NextTokenModel};
use greenlist::partition::{keygen, partition};
use greenlist::rng;
use greenlist::watermarker::{generate, Decoding, GenerationConfig};
use greenlist::{Scheme, WatermarkKey};

fn key(scheme: Scheme, vocab: usize, seed: u64) -> WatermarkKey {
    keygen(0.5, 2.0, scheme, vocab, &mut rng::from_u64(seed)).unwrap()
}

#[test]
fn watermarked_text_is_detected_and_plain_text_is_not() {
    let lm = uniform_lm(1000).unwrap();
    for scheme in [Scheme::FixedSplit, Scheme::BigramHash] {
        let k = key(scheme, 1000, 1);
        let cfg = GenerationConfig::new(200, Decoding::Multinomial, 7).unwrap();
        let marked = generate(&lm, &[], Some(&k), &cfg).unwrap();
        let plain = generate(&lm, &[], None, &cfg).unwrap();
        assert_eq!(detect_any(&marked, &k, Threshold::Fixed(6.0)).unwrap().decision, 1);
        assert_eq!(detect_any(&plain, &k, Threshold::Fixed(6.0)).unwrap().decision, 0);
    }
}

#[test]
fn key_file_round_trip_preserves_detection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("key.toml");
    let k = key(Scheme::FixedSplit, 500, 3);
    k.save(&path).unwrap();
    let loaded = WatermarkKey::load(&path).unwrap();
    assert_eq!(loaded, k);
    assert_eq!(partition(&loaded).unwrap(), partition(&k).unwrap());
}

#[test]
fn certified_budget_survives_worst_case_replacement() {
    let lm = uniform_lm(1000).unwrap();
    let k = key(Scheme::FixedSplit, 1000, 4);
    let green = partition(&k).unwrap();
    let mut r = rng::from_u64(5);
    for seed in 0..50 {
        let y = generate(&lm, &[], Some(&k), &GenerationConfig::new(200, Decoding::Multinomial, seed).unwrap()).unwrap();
        let report = detect_any(&y, &k, Threshold::Fixed(6.0)).unwrap();
        let cert = certified_edit_budget(report.z, 200, 0.5, 6.0, Scheme::FixedSplit, PenaltyBound::Normalized).unwrap();
        assert_eq!(report.certified_eta, Some(cert.certified_eta));
        let u = greenaware_attack(&y, &green, cert.certified_eta, &mut r).unwrap();
        let after = detect_any(&u.tokens, &k, Threshold::Fixed(6.0)).unwrap();
        assert_eq!(after.decision, report.decision, "seed {seed}");
    }
}

#[test]
fn green_aware_replacement_lowers_z_by_exactly_one_step_per_edit() {
    // each green-to-red swap at fixed length moves z by 1/sqrt(n γ(1-γ));
    // that exceeds the published per-edit allowance (1+γ/2)/sqrt(n)
    let lm = uniform_lm(1000).unwrap();
    let k = key(Scheme::FixedSplit, 1000, 6);
    let green = partition(&k).unwrap();
    let y = generate(&lm, &[], Some(&k), &GenerationConfig::new(200, Decoding::Multinomial, 1).unwrap()).unwrap();
    let mut det = Detector::new(&k).unwrap();
    let z_y = det.z(&y).unwrap().unwrap();
    let step = 1.0 / (200.0f64 * 0.25).sqrt();
    for eta in [1usize, 5, 20] {
        let u = greenaware_attack(&y, &green, eta, &mut rng::from_u64(eta as u64)).unwrap();
        let z_u = det.z(&u.tokens).unwrap().unwrap();
        assert!(((z_y - z_u) - eta as f64 * step).abs() < 1e-9);
        assert!((z_y - z_u) / eta as f64 > 1.25 / 200f64.sqrt());
    }
}

#[test]
fn attacks_stay_within_budget_on_generated_text() {
    let lm = uniform_lm(300).unwrap();
    let k = key(Scheme::BigramHash, 300, 8);
    let y = generate(&lm, &[], Some(&k), &GenerationConfig::new(150, Decoding::TopP(0.9), 2).unwrap()).unwrap();
    let mut r = rng::from_u64(9);
    let mix = EditMix::new(0.25, 0.25, 0.5).unwrap();
    for eta in 0..40 {
        let u = random_edit_attack(&y, eta, mix, 300, &mut r).unwrap();
        assert!(edit_distance(&y, &u.tokens) <= eta);
    }
}

#[test]
fn surrogate_model_has_lower_entropy_than_uniform() {
    let corpus = synthetic_corpus(500, 50_000, 500, 7).unwrap();
    let lm = ngram_fit(&corpus, 2, 0.01, 500).unwrap();
    assert_eq!(lm.vocab_size(), 500);
    let surrogate = entropy_diagnostics(&lm, &[], 100, 20, 1).unwrap();
    let flat = entropy_diagnostics(&uniform_lm(500).unwrap(), &[], 100, 20, 1).unwrap();
    assert!(surrogate.xi_hat > 10.0 * flat.xi_hat, "{} vs {}", surrogate.xi_hat, flat.xi_hat);
}
