mod common;

use multirater::network::{attention_gate, AttentionGateParams, Model, NetworkConfig, Variant};
use multirater::tensor::Tensor;
use multirater::variational::WeightMode;
use multirater::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(1, size, size, (0..size * size).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

#[test]
fn structural_contracts() {
    let cfg = NetworkConfig {
        depth: 3,
        base_channels: 4,
        num_branches: 3,
        ..Default::default()
    };
    let om = Model::build(Variant::Om, &cfg, 0).unwrap();
    assert_eq!((om.encoder_count(), om.decoder_count()), (1, 3));
    let ens = Model::build(Variant::Ensemble, &cfg, 0).unwrap();
    assert_eq!((ens.encoder_count(), ens.decoder_count()), (3, 3));
    let count = |v| Model::build(v, &cfg, 0).unwrap().param_count();
    for v in [Variant::Om, Variant::Oma] {
        assert!(ens.param_count() > count(v), "{v}");
    }
    // mean and rho per Bayesian decoder weight
    assert!(count(Variant::Omba) > count(Variant::Oma));
    assert!(matches!("unet3d".parse::<Variant>(), Err(Error::UnknownVariant(_))));
}

#[test]
fn fused_map_ignores_branch_order() {
    for variant in [Variant::Om, Variant::Omba] {
        let model = Model::build(variant, &common::tiny_net(3), 1).unwrap();
        let (s0, s2) = (model.decoder_span(0).unwrap(), model.decoder_span(2).unwrap());
        let mut swapped = model.clone();
        swapped.params_mut()[s0.clone()].copy_from_slice(&model.params()[s2.clone()]);
        swapped.params_mut()[s2].copy_from_slice(&model.params()[s0]);
        let img = image(2, 16);
        let a = model.forward(&img, &mut ChaCha8Rng::seed_from_u64(0), 1, WeightMode::Mean).unwrap();
        let b = swapped.forward(&img, &mut ChaCha8Rng::seed_from_u64(0), 1, WeightMode::Mean).unwrap();
        assert_eq!(a.fused, b.fused);
        assert_eq!(a.branch_probs[0], b.branch_probs[2]);
    }
}

#[test]
fn identical_decoders_give_identical_branches() {
    let mut model = Model::build(Variant::Omba, &common::tiny_net(2), 3).unwrap();
    let (s0, s1) = (model.decoder_span(0).unwrap(), model.decoder_span(1).unwrap());
    let copy = model.params()[s0].to_vec();
    model.params_mut()[s1].copy_from_slice(&copy);
    let feats = model.encode(0, &image(4, 16)).unwrap();
    let a = model.decode_branch(&feats, 0, &mut ChaCha8Rng::seed_from_u64(7), WeightMode::Sample).unwrap();
    let b = model.decode_branch(&feats, 1, &mut ChaCha8Rng::seed_from_u64(7), WeightMode::Sample).unwrap();
    assert_eq!(a, b);
    assert!(a.data.iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn single_deterministic_branch_is_the_fused_map() {
    let model = Model::build(Variant::Vanilla, &common::tiny_net(3), 0).unwrap();
    let pred = model.forward(&image(5, 16), &mut ChaCha8Rng::seed_from_u64(0), 1, WeightMode::Sample).unwrap();
    assert_eq!(pred.fused, pred.branch_probs[0]);
    assert_eq!(pred.mc_samples.len(), 1);
}

#[test]
fn stochastic_branches_produce_distinct_draws() {
    let mut model = Model::build(Variant::Omba, &common::tiny_net(3), 0).unwrap();
    for r in 0..3 {
        for (_, rho) in model.posterior_spans(r).unwrap() {
            model.params_mut()[rho].iter_mut().for_each(|v| *v = 0.5);
        }
    }
    let pred = model.forward(&image(6, 16), &mut ChaCha8Rng::seed_from_u64(0), 4, WeightMode::Sample).unwrap();
    assert_eq!(pred.sample_probs.len(), 12);
    assert_ne!(pred.sample_probs[0], pred.sample_probs[1]);
}

#[test]
fn gate_examples() {
    let f_e = Tensor::from_vec(2, 2, 2, (1..=8).map(|v| v as f32).collect()).unwrap();
    let f_s = Tensor::from_vec(3, 2, 2, vec![0.5; 12]).unwrap();
    let (out, coeff) = attention_gate(&f_e, &f_s, &AttentionGateParams::zeros(2, 3)).unwrap();
    assert!(coeff.data.iter().all(|&c| c == 0.5));
    assert_eq!(out.data, f_e.data.iter().map(|v| v * 0.5).collect::<Vec<_>>());
    let small = Tensor::zeros(3, 1, 1);
    assert!(matches!(attention_gate(&f_e, &small, &AttentionGateParams::zeros(2, 3)), Err(Error::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perturbing_one_decoder_leaves_the_others(
        seed in 0u64..1000,
        r in 0usize..3,
        delta in -0.5f32..0.5,
        variant in prop::sample::select(vec![Variant::Om, Variant::Oma, Variant::Omba]),
    ) {
        let model = Model::build(variant, &common::tiny_net(3), seed).unwrap();
        let mut other = model.clone();
        let span = other.decoder_span(r).unwrap();
        other.params_mut()[span].iter_mut().for_each(|p| *p += delta);
        let feats = model.encode(0, &image(seed, 8)).unwrap();
        for r2 in (0..3).filter(|&x| x != r) {
            let a = model.decode_branch(&feats, r2, &mut ChaCha8Rng::seed_from_u64(seed), WeightMode::Sample).unwrap();
            let b = other.decode_branch(&feats, r2, &mut ChaCha8Rng::seed_from_u64(seed), WeightMode::Sample).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn gate_coefficients_lie_in_open_unit_interval(seed in 0u64..1000) {
        let model = Model::build(Variant::Oma, &common::tiny_net(2), seed).unwrap();
        let feats = model.encode(0, &image(seed, 8)).unwrap();
        for r in 0..2 {
            for c in model.gate_coefficients(&feats, r, &mut ChaCha8Rng::seed_from_u64(0), WeightMode::Mean).unwrap() {
                prop_assert!(c.data.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }
}
