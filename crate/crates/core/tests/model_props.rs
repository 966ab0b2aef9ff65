use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recast_core::model::closed_form_savings;
use recast_core::{
    generate_weight, group_index, param_accounting, CoefficientSet, RecastConfig, RecastModel, TemplateBank, Tensor,
};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Literal double sum over sets and templates, scaled by `1/K`.
fn oracle(templates: &[Tensor], c: &Tensor) -> Vec<f64> {
    let (k, n) = (c.shape()[0], c.shape()[1]);
    let len = templates[0].numel();
    (0..len)
        .map(|e| {
            let mut acc = 0.0;
            for s in 0..k {
                for i in 0..n {
                    acc += c.data()[s * n + i] * templates[i].data()[e];
                }
            }
            acc / k as f64
        })
        .collect()
}

#[test]
fn weight_generation_matches_oracle_and_collapses_to_mean_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let (n, k) = (rng.random_range(1..5), rng.random_range(1..5));
        let shape = [rng.random_range(1..6), rng.random_range(1..6)];
        let templates: Vec<Tensor> = (0..n).map(|_| random(&shape, &mut rng)).collect();
        let c = random(&[k, n], &mut rng);
        let bank = TemplateBank::new(1, templates.clone()).unwrap();
        let w = generate_weight(&bank, &CoefficientSet::new(0, 0, c.clone()).unwrap()).unwrap();
        assert_eq!(w.shape(), shape);
        let expect = oracle(&templates, &c);
        // A single averaged set produces the same weight.
        let mean: Vec<f64> = (0..n).map(|i| (0..k).map(|s| c.data()[s * n + i]).sum::<f64>() / k as f64).collect();
        let collapsed = Tensor::new(&[1, n], mean).unwrap();
        let w1 = generate_weight(&bank, &CoefficientSet::new(0, 0, collapsed).unwrap()).unwrap();
        for ((a, b), c) in w.data().iter().zip(&expect).zip(w1.data()) {
            assert!((a - b).abs() < 1e-12);
            assert!((a - c).abs() < 1e-12);
        }
    }
}

#[test]
fn accounting_matches_brute_force_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let layers = rng.random_range(1..9);
        let groups = rng.random_range(1..=layers);
        let m = rng.random_range(1..4);
        let d = rng.random_range(1..20);
        let (n, k) = (rng.random_range(1..4), rng.random_range(1..4));
        let config = RecastConfig::uniform(layers, m, d, groups, n, k);
        let acc = param_accounting(&config).unwrap();
        let model = RecastModel::init(config, 0).unwrap();
        let coeffs: usize = model.coefficients.iter().flatten().map(|c| c.values.numel()).sum();
        let templates: usize = model.banks.iter().flat_map(|b| &b.templates).map(Tensor::numel).sum();
        let dense: usize = (0..layers).flat_map(|l| (0..m).map(move |j| (l, j))).map(|(l, j)| model.weight(l, j).unwrap().numel()).sum();
        assert_eq!(acc.task_params, coeffs);
        assert_eq!(acc.template_params, templates);
        assert_eq!(acc.dense_params, dense);
        assert_eq!(acc.savings, dense as i64 - (templates + coeffs) as i64);
        let cf = closed_form_savings(layers as u64, m as u64, d as u64, groups as u64, n as u64, k as u64);
        assert_eq!(acc.savings, cf);
    }
}

#[test]
fn worked_savings_example() {
    assert_eq!(closed_form_savings(12, 2, 64, 6, 2, 2), 49_056);
    let acc = param_accounting(&RecastConfig::uniform(12, 2, 64, 6, 2, 2)).unwrap();
    assert_eq!(acc.savings, 49_056);
}

proptest! {
    #[test]
    fn group_index_is_monotone_and_surjective(layers in 1usize..40, groups_seed in 0usize..40) {
        let groups = groups_seed % layers + 1;
        let idx: Vec<usize> = (1..=layers).map(|l| group_index(l, layers, groups).unwrap()).collect();
        prop_assert_eq!(idx[0], 1);
        prop_assert_eq!(*idx.last().unwrap(), groups);
        prop_assert!(idx.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        for (l, &g) in (1..=layers).zip(&idx) {
            // g - 1 < l·G/L <= g
            prop_assert!((g - 1) * layers < l * groups && l * groups <= g * layers);
        }
    }

    #[test]
    fn weight_generation_is_linear(
        c1 in prop::collection::vec(-2.0f64..2.0, 6),
        c2 in prop::collection::vec(-2.0f64..2.0, 6),
        alpha in -3.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = TemplateBank::new(1, (0..3).map(|_| random(&[3, 4], &mut rng)).collect()).unwrap();
        let set = |v: Vec<f64>| CoefficientSet::new(0, 0, Tensor::new(&[2, 3], v).unwrap()).unwrap();
        let mixed: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| alpha * a + b).collect();
        let lhs = generate_weight(&bank, &set(mixed)).unwrap();
        let rhs = generate_weight(&bank, &set(c1)).unwrap().scale(alpha)
            .add(&generate_weight(&bank, &set(c2)).unwrap()).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
