use rand::Rng as _;

use super::ops::FeatureMap;
use super::*;
use crate::mask::{Image, Shape};
use crate::rng;

fn small_arch(rank: Option<usize>) -> ArchConfig {
    ArchConfig {
        height: 16,
        width: 16,
        widths: [4, 6, 8],
        num_masks: 3,
        adapter_rank: rank,
    }
}

fn random_image(shape: Shape, seed: u64) -> Image {
    let mut r = rng::substream(seed, "test-image", &[]);
    Image::new(shape, (0..shape.len()).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

fn prompts() -> PromptSet {
    PromptSet::new(
        vec![
            PointPrompt::positive(3, 4),
            PointPrompt::positive(10, 12),
            PointPrompt::negative(14, 1),
        ],
        1,
    )
    .unwrap()
}

/// Gives every adapter `B` factor small random values so adapter gradients
/// are non-trivial.
fn perturb_adapters(p: &mut ModelParams, seed: u64) {
    let mut r = rng::substream(seed, "perturb", &[]);
    for layer in AdaptedLayer::ALL {
        let (_, b) = layer.factors();
        for v in p.get_mut(b).unwrap().iter_mut() {
            *v = r.random_range(-0.2..0.2);
        }
    }
}

#[test]
fn forward_is_deterministic_with_three_hypotheses() {
    let p = init_params(&ArchConfig::default(), 4).unwrap();
    let img = random_image(Shape::new(64, 64), 1);
    let a = forward(&p, &img, &prompts()).unwrap();
    let b = forward(&p, &img, &prompts()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mask_logits.len(), 3);
    assert_eq!(a.quality_scores.len(), 3);
    assert_eq!(a.mask_logits[0].shape(), Shape::new(64, 64));
}

#[test]
fn point_order_within_polarity_is_irrelevant() {
    let p = init_params(&small_arch(Some(4)), 4).unwrap();
    let img = random_image(Shape::new(16, 16), 2);
    let mut reordered = prompts();
    reordered.points.swap(0, 1);
    reordered.points.rotate_left(1);
    assert_eq!(
        forward(&p, &img, &prompts()).unwrap(),
        forward(&p, &img, &reordered).unwrap()
    );
}

#[test]
fn out_of_bounds_point_rejected() {
    let p = init_params(&small_arch(None), 4).unwrap();
    let img = random_image(Shape::new(16, 16), 2);
    let bad = PromptSet::new(vec![PointPrompt::positive(16, 0)], 1).unwrap();
    assert!(matches!(
        forward(&p, &img, &bad),
        Err(crate::error::Error::Contract(_))
    ));
}

#[test]
fn fresh_adapters_match_adapterless_forward_exactly() {
    let base = init_params(&ArchConfig { adapter_rank: None, ..ArchConfig::default() }, 9).unwrap();
    let img = random_image(Shape::new(64, 64), 3);
    for r in ALLOWED_RANKS {
        let adapted = base.with_adapters(Some(r), 77).unwrap();
        assert_eq!(
            forward(&base, &img, &prompts()).unwrap(),
            forward(&adapted, &img, &prompts()).unwrap()
        );
    }
}

#[test]
fn square_adapter_has_two_r_d_factors() {
    // widths [16, 16, 64] make the first decoder map 64 x 64.
    let arch = ArchConfig {
        widths: [16, 16, 64],
        ..ArchConfig::default()
    };
    let p = init_params(&arch, 1).unwrap();
    assert_eq!(AdaptedLayer::Up1.dims(&arch), (64, 64));
    let n = p.get(ParamId::Up1LoraA).len() + p.get(ParamId::Up1LoraB).len();
    assert_eq!(n, 2 * 64 * 64);
}

fn probe_objective(p: &ModelParams, img: &Image, probes: &[Vec<f64>]) -> f64 {
    let out = forward(p, img, &prompts()).unwrap();
    out.mask_logits
        .iter()
        .zip(probes)
        .map(|(l, pr)| ops::dot(l.values(), pr))
        .sum()
}

fn analytic(p: &ModelParams, img: &Image, probes: &[Vec<f64>], mode: TrainMode) -> Gradients {
    let enc = encode(p, img).unwrap();
    let prepared = Prepared::new(p);
    let (_, cache) = prepared.decode(&enc, &prompts()).unwrap();
    let mut grads = Gradients::zeros_like(p);
    let f = &enc.features;
    let mut df = FeatureMap::zeros(f.height, f.width, f.channels);
    prepared.decode_backward(&cache, probes, None, &mut grads, Some(&mut df));
    encode_backward(p, &enc, df, &mut grads);
    finish_gradients(p, &mut grads, mode);
    grads
}

#[test]
fn network_gradients_match_central_differences() {
    let mut p = init_params(&small_arch(Some(4)), 11).unwrap();
    perturb_adapters(&mut p, 5);
    let img = random_image(Shape::new(16, 16), 4);
    let mut r = rng::substream(1, "probe", &[]);
    let probes: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..256).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let grads = analytic(&p, &img, &probes, TrainMode::Full);
    let h = 1e-6;
    for &id in ParamId::ALL {
        if id == ParamId::QualityW || id == ParamId::QualityB {
            continue;
        }
        let n = p.get(id).len();
        for k in (0..n).step_by((n / 12).max(1)) {
            let mut plus = p.clone();
            plus.get_mut(id).unwrap()[k] += h;
            let mut minus = p.clone();
            minus.get_mut(id).unwrap()[k] -= h;
            let fd = (probe_objective(&plus, &img, &probes) - probe_objective(&minus, &img, &probes))
                / (2.0 * h);
            let a = grads.get(id)[k];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err < 1e-5, "{}[{k}]: analytic {a} vs fd {fd}", id.name());
        }
    }
}

#[test]
fn adapters_only_leaves_base_gradients_zero() {
    let mut p = init_params(&small_arch(Some(8)), 2).unwrap();
    perturb_adapters(&mut p, 1);
    let img = random_image(Shape::new(16, 16), 4);
    let probes = vec![vec![1.0; 256]; 3];
    let g = analytic(&p, &img, &probes, TrainMode::AdaptersOnly);
    for &id in ParamId::ALL {
        if !id.is_adapter() {
            assert!(g.get(id).iter().all(|v| *v == 0.0), "{}", id.name());
        }
    }
    assert!(g.get(ParamId::MixLoraB).iter().any(|v| *v != 0.0));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut p = init_params(&small_arch(Some(4)), 3).unwrap();
    perturb_adapters(&mut p, 3);
    let echo = serde_json::json!({"seed": 3, "note": "test"});
    let bytes = write_checkpoint(&p, &echo);
    let (back, echo_back) = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, p);
    assert_eq!(echo_back, echo);
    assert_eq!(write_checkpoint(&back, &echo_back), bytes);

    let frozen = clone_frozen(&p);
    let (fb, _) = read_checkpoint(&write_checkpoint(&frozen, &echo)).unwrap();
    assert!(fb.is_frozen());

    let mut tampered = bytes.clone();
    let mid = tampered.len() / 2;
    tampered[mid] ^= 1;
    assert!(read_checkpoint(&tampered).is_err());
}

#[test]
fn frozen_copy_is_independent() {
    let mut actor = init_params(&small_arch(Some(4)), 3).unwrap();
    let reference = clone_frozen(&actor);
    let before = reference.content_hash();
    actor.get_mut(ParamId::MixLoraB).unwrap()[0] = 1.0;
    assert_eq!(reference.content_hash(), before);
    assert_ne!(actor.content_hash(), before);
}
