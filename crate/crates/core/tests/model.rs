mod common;

use common::*;
use wsdmil::gradcheck::{gradcheck_model, GradcheckOptions};
use wsdmil::model::{WsdConfig, WsdModel, VARIANTS};
use wsdmil_autograd::Graph;

fn model(variant: &str, seed: u64) -> WsdModel {
    let config = WsdConfig::default().variant(variant).unwrap();
    WsdModel::new(config, seed).unwrap().perturbed(0.1, seed + 1)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn full_sequence_gives_finite_logits() {
    let m = model("full", 0);
    let seq = random_sequence(256, 16, 4, 1);
    assert_eq!(seq.padded_len(), 256);
    let logits = m.predict(&seq).unwrap();
    assert_eq!(logits.len(), 2);
    assert!(logits.iter().all(|v| v.is_finite()));
}

#[test]
fn disabled_wsda_is_the_identity() {
    let m = model("no-wsda", 2);
    let seq = random_sequence(100, 16, 4, 3);
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let x = g.constant(seq.features.clone().reshape(&[256, 16]).unwrap());
    let out = m.wsda_forward(&mut g, &bound, x, &seq.mask).unwrap();
    assert_eq!(g.value(out), seq.features.data());
}

#[test]
fn without_both_modules_it_is_plain_attention_pooling() {
    let m = model("no-wsda-serg", 4);
    let seq = random_sequence(37, 16, 4, 5);
    let p = |n: &str| m.param(n).unwrap().data().to_vec();
    let (v, w, wc, bc) = (p("aggregator.v"), p("aggregator.w"), p("classifier.weight"), p("classifier.bias"));
    let f = 16;
    let rows: Vec<&[f64]> = (0..37).map(|i| &seq.features.data()[i * f..(i + 1) * f]).collect();
    let scores: Vec<f64> = rows
        .iter()
        .map(|x| {
            (0..128)
                .map(|h| w[h] * (0..f).map(|j| v[h * f + j] * x[j]).sum::<f64>().tanh())
                .sum()
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let bag: Vec<f64> = (0..f)
        .map(|j| rows.iter().zip(&scores).map(|(x, s)| (s - max).exp() / z * x[j]).sum())
        .collect();
    let expected: Vec<f64> = (0..2).map(|c| bc[c] + (0..f).map(|j| wc[c * f + j] * bag[j]).sum::<f64>()).collect();
    assert!(max_abs_diff(&m.predict(&seq).unwrap(), &expected) < 1e-12);
}

#[test]
fn padding_contents_never_reach_the_logits() {
    for (i, variant) in VARIANTS.iter().enumerate() {
        let m = model(variant, 10 + i as u64);
        let base = m.config.sequence_base();
        let seq = random_sequence(100, 16, base, 20 + i as u64);
        let clean = m.predict(&seq).unwrap();
        let noisy = m.predict(&with_garbage_padding(&seq, 30 + i as u64)).unwrap();
        let dev = max_abs_diff(&clean, &noisy);
        assert!(dev < 1e-10, "{variant}: {dev:e}");
    }
}

#[test]
fn extra_padding_is_inert_without_spatial_stages() {
    for variant in ["no-wsda-serg", "mean-pool", "max-pool"] {
        let m = model(variant, 40);
        let seq = random_sequence(100, 16, 4, 41);
        let dev = max_abs_diff(&m.predict(&seq).unwrap(), &m.predict(&seq.with_extra_padding(256)).unwrap());
        assert!(dev < 1e-10, "{variant}: {dev:e}");
    }
}

#[test]
fn every_variant_is_finite_with_gradients() {
    for (i, variant) in VARIANTS.iter().enumerate() {
        let m = model(variant, 50 + i as u64);
        let seq = random_sequence(70, 16, m.config.sequence_base(), 60 + i as u64);
        let (loss, grads, peak) = m.loss_and_grads(&seq, 1).unwrap();
        assert!(loss.is_finite(), "{variant}");
        assert!(peak > 0);
        assert_eq!(grads.len(), m.params().len(), "{variant}");
        assert!(grads.values().flatten().all(|g| g.is_finite()), "{variant}");
    }
}

#[test]
fn mismatched_feature_width_is_rejected() {
    let m = model("full", 0);
    let seq = random_sequence(20, 8, 4, 1);
    assert!(m.predict(&seq).is_err());
}

#[test]
fn small_full_model_passes_gradcheck() {
    let config = WsdConfig {
        feature_dim: 8,
        heads: 2,
        landmarks: 8,
        attention_hidden: 8,
        ..WsdConfig::default()
    };
    let m = WsdModel::new(config, 7).unwrap().perturbed(0.1, 8);
    let seq = random_sequence(40, 8, 4, 9);
    let report = gradcheck_model(&m, &seq, 0, &GradcheckOptions::default()).unwrap();
    assert!(report.passed, "{} at {:e}", report.worst, report.max_rel_err);
    assert_eq!(report.groups.len(), m.params().len());
}

#[test]
fn corrupted_gradient_is_caught_and_named() {
    let m = model("no-wsda-serg", 11);
    let seq = random_sequence(12, 16, 4, 12);
    let opts = GradcheckOptions {
        corrupt: Some("classifier.bias".into()),
        ..GradcheckOptions::default()
    };
    let report = gradcheck_model(&m, &seq, 1, &opts).unwrap();
    assert!(!report.passed);
    assert_eq!(report.worst, "classifier.bias");
}
