use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recast_core::integrate::{
    combine_dora, combine_dora_with, combine_lora, combine_mask, combine_rosa, export_dense, Adapter, AdapterKind,
    DoraNorm,
};
use recast_core::model::linear;
use recast_core::{RecastConfig, RecastModel, Tape, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
}

#[test]
fn identity_elements_are_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let w = random(&[4, 5], &mut rng);
        let a = random(&[3, 5], &mut rng);
        let b0 = Tensor::zeros(&[4, 3]);
        assert_eq!(combine_lora(&w, &b0, &a).unwrap(), w);
        assert_eq!(combine_mask(&w, &Tensor::ones(&[4, 5])).unwrap(), w);
        assert_eq!(combine_rosa(&w, &Tensor::zeros(&[4, 5]), &b0, &a).unwrap(), w);
        assert_eq!(combine_dora(&w, &b0, &a).unwrap(), w);
        assert_eq!(combine_dora_with(&w, &b0, &a, DoraNorm::PerOutput).unwrap(), w);
    }
}

#[test]
fn dora_preserves_norm_under_direction_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let w = random(&[5, 4], &mut rng);
        let b = random(&[5, 2], &mut rng);
        let a = random(&[2, 4], &mut rng);
        for t in [0.1, 1.0, 10.0] {
            let out = combine_dora(&w, &b.scale(t), &a).unwrap();
            assert!((out.frobenius_norm() - w.frobenius_norm()).abs() < 1e-10);
        }
        let rows = combine_dora_with(&w, &b, &a, DoraNorm::PerOutput).unwrap();
        for i in 0..5 {
            let n = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n(rows.row(i)) - n(w.row(i))).abs() < 1e-10);
        }
    }
}

#[test]
fn mask_support_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = random(&[6, 6], &mut rng);
    let m = binary(&[6, 6], &mut rng);
    let out = combine_mask(&w, &m).unwrap();
    for i in 0..36 {
        assert_eq!(out.data()[i] != 0.0, w.data()[i] != 0.0 && m.data()[i] == 1.0);
    }
}

#[test]
fn rosa_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let w = random(&[4, 3], &mut rng);
        let s = binary(&[4, 3], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let a = random(&[2, 3], &mut rng);
        let out = combine_rosa(&w, &s, &b, &a).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let ba: f64 = (0..2).map(|r| b.data()[i * 2 + r] * a.data()[r * 3 + j]).sum();
                let idx = i * 3 + j;
                let expect = w.data()[idx] + s.data()[idx] * w.data()[idx] + ba;
                assert!((out.data()[idx] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn combinators_are_pure_and_check_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = random(&[3, 3], &mut rng);
    let (b, a) = (random(&[3, 1], &mut rng), random(&[1, 3], &mut rng));
    assert_eq!(combine_dora(&w, &b, &a).unwrap(), combine_dora(&w, &b, &a).unwrap());
    assert!(combine_lora(&w, &random(&[2, 1], &mut rng), &a).is_err());
    assert!(combine_rosa(&w, &Tensor::full(&[3, 3], 2.0), &b, &a).is_err());
}

#[test]
fn merged_weights_match_composed_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let kinds = [
        AdapterKind::Lora { rank: 2 },
        AdapterKind::Mask,
        AdapterKind::Dora {
            rank: 2,
            norm: DoraNorm::Frobenius,
        },
        AdapterKind::Dora {
            rank: 3,
            norm: DoraNorm::PerOutput,
        },
        AdapterKind::Rosa { rank: 1, sparsity: 0.6 },
    ];
    for (i, kind) in kinds.into_iter().enumerate() {
        let mut ad = Adapter::init(kind, 5, 4, i as u64).unwrap();
        // Move away from the identity so the check is not trivial.
        match &mut ad {
            Adapter::Lora { b, .. } | Adapter::Dora { b, .. } | Adapter::Rosa { b, .. } => *b = random(b.shape(), &mut rng),
            Adapter::Mask { mask } => *mask = binary(mask.shape(), &mut rng),
        }
        let w = random(&[5, 4], &mut rng);
        let x = random(&[7, 4], &mut rng);
        let bias = random(&[5], &mut rng);
        let composed = ad.composed_forward(&w, &x, &bias).unwrap();
        let merged = ad.merge(&w).unwrap();
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(merged), tape.constant(bias));
        let y = linear(&mut tape, xv, wv, bv).unwrap();
        let diff = tape.value(y).sub(&composed).unwrap();
        let max = diff.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12, "{kind:?}: {max:e}");
    }
}

#[test]
fn dense_export_matches_model_forward() {
    let config = RecastConfig::uniform(4, 1, 6, 2, 2, 2);
    let model = RecastModel::init(config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut adapters = BTreeMap::new();
    let mut lora = Adapter::init(AdapterKind::Lora { rank: 2 }, 6, 6, 1).unwrap();
    if let Adapter::Lora { b, .. } = &mut lora {
        *b = random(&[6, 2], &mut rng);
    }
    adapters.insert((1, 0), lora.clone());
    let dense = export_dense(&model, &adapters).unwrap();
    assert_eq!(dense.layers[0][0].weight, model.weight(0, 0).unwrap());
    assert_eq!(dense.layers[1][0].weight, lora.merge(&model.weight(1, 0).unwrap()).unwrap());

    // Composed: generated weights on a tape with the LoRA path kept separate.
    let x = random(&[3, 6], &mut rng);
    let mut h = x.clone();
    for l in 0..4 {
        let w = model.weight(l, 0).unwrap();
        let y = match adapters.get(&(l, 0)) {
            Some(ad) => ad.composed_forward(&w, &h, &model.biases[l][0]).unwrap(),
            None => {
                let z = h.matmul(&w.transpose().unwrap()).unwrap();
                let bias = &model.biases[l][0];
                Tensor::from_fn(z.shape(), |i| z.data()[i] + bias.data()[i % 6])
            }
        };
        h = y.map(|v| v.max(0.0));
    }
    let mut tape = Tape::new();
    let mut hv = tape.constant(x);
    for module in &dense.layers {
        let (w, b) = (tape.constant(module[0].weight.clone()), tape.constant(module[0].bias.clone()));
        let y = linear(&mut tape, hv, w, b).unwrap();
        hv = tape.relu(y);
    }
    let diff = tape.value(hv).sub(&h).unwrap();
    assert!(diff.data().iter().all(|v| v.abs() < 1e-12));
    assert!(export_dense(&model, &BTreeMap::from([((9, 0), lora)])).is_err());
}

proptest! {
    #[test]
    fn dora_norm_always_preserved(
        w in prop::collection::vec(-2.0f64..2.0, 12),
        b in prop::collection::vec(-2.0f64..2.0, 8),
        a in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let w = Tensor::new(&[4, 3], w).unwrap();
        let b = Tensor::new(&[4, 2], b).unwrap();
        let a = Tensor::new(&[2, 3], a).unwrap();
        let v = combine_lora(&w, &b, &a).unwrap();
        prop_assume!(v.frobenius_norm() > 1e-6);
        let out = combine_dora(&w, &b, &a).unwrap();
        prop_assert!((out.frobenius_norm() - w.frobenius_norm()).abs() < 1e-10);
    }
}
