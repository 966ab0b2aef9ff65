//! Analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recast_core::integrate::lora_on_tape;
use recast_core::mimicry::{total_loss_gradients, LossKind, TeacherModel, TeacherModule};
use recast_core::model::{apply_module, linear};
use recast_core::{Activation, ModuleKind, RecastConfig, RecastModel, Reduction, Tape, Tensor};

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;
const SEEDS: u64 = 20;

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`
fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.sub(b).unwrap().frobenius_norm();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn numeric_grad(params: &[Tensor], which: usize, loss: &dyn Fn(&[Tensor]) -> f64) -> Tensor {
    let mut p = params.to_vec();
    let base = p[which].clone();
    let g: Vec<f64> = (0..base.numel())
        .map(|i| {
            let mut plus = base.data().to_vec();
            plus[i] += H;
            p[which] = Tensor::new(base.shape(), plus).unwrap();
            let fp = loss(&p);
            let mut minus = base.data().to_vec();
            minus[i] -= H;
            p[which] = Tensor::new(base.shape(), minus).unwrap();
            let fm = loss(&p);
            (fp - fm) / (2.0 * H)
        })
        .collect();
    Tensor::new(base.shape(), g).unwrap()
}

/// Two GELU layers sharing one bank, LoRA on the first layer, linear head,
/// cross-entropy. Parameter order: T1, T2, C1, C2, B, A, head W, head b.
struct Pipeline {
    x: Tensor,
    y: Vec<usize>,
    biases: [Tensor; 2],
}

impl Pipeline {
    fn new(rng: &mut ChaCha8Rng) -> (Self, Vec<Tensor>) {
        let (d, r, classes, batch) = (4, 2, 3, 5);
        let params = vec![
            random(&[d, d], 0.8, rng),
            random(&[d, d], 0.8, rng),
            random(&[2, 2], 1.0, rng),
            random(&[2, 2], 1.0, rng),
            random(&[d, r], 0.5, rng),
            random(&[r, d], 0.5, rng),
            random(&[classes, d], 0.8, rng),
            random(&[classes], 0.3, rng),
        ];
        let pipe = Pipeline {
            x: random(&[batch, d], 1.5, rng),
            y: (0..batch).map(|_| rng.random_range(0..classes)).collect(),
            biases: [random(&[d], 0.2, rng), random(&[d], 0.2, rng)],
        };
        (pipe, params)
    }

    fn run(&self, params: &[Tensor], grads: bool) -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let v: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let mut h = tape.constant(self.x.clone());
        for l in 0..2 {
            let mut w = tape.combine(v[2 + l], &v[..2]).unwrap();
            if l == 0 {
                w = lora_on_tape(&mut tape, w, v[4], v[5]).unwrap();
            }
            let b = tape.constant(self.biases[l].clone());
            let z = linear(&mut tape, h, w, b).unwrap();
            h = tape.gelu(z);
        }
        let logits = linear(&mut tape, h, v[6], v[7]).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &self.y).unwrap();
        let value = tape.value(loss).item();
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        (value, v.iter().map(|&p| tape.grad(p).clone()).collect())
    }
}

fn check_pipeline(indices: &[usize], label: &str) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pipe, params) = Pipeline::new(&mut rng);
        let (_, analytic) = pipe.run(&params, true);
        for &i in indices {
            let numeric = numeric_grad(&params, i, &|p| pipe.run(p, false).0);
            let err = rel_err(&analytic[i], &numeric);
            assert!(err < TOL, "{label} param {i} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn coefficient_gradients_match_finite_differences() {
    check_pipeline(&[2, 3], "coefficients");
}

#[test]
fn template_gradients_match_finite_differences() {
    check_pipeline(&[0, 1], "templates");
}

#[test]
fn lora_factor_gradients_match_finite_differences() {
    check_pipeline(&[4, 5], "lora");
}

#[test]
fn classifier_gradients_match_finite_differences() {
    check_pipeline(&[6, 7], "classifier");
}

fn check_module(kind: ModuleKind, x_shape: &[usize], activation: Activation) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let w_shape = kind.weight_shape();
        let params = vec![
            random(&w_shape, 0.7, &mut rng),
            random(&w_shape, 0.7, &mut rng),
            random(&[2, 2], 1.0, &mut rng),
            random(&[kind.bias_len()], 0.3, &mut rng),
        ];
        let x = random(x_shape, 1.0, &mut rng);
        let run = |p: &[Tensor], grads: bool| {
            let mut tape = Tape::new();
            let v: Vec<_> = p.iter().map(|t| tape.param(t.clone())).collect();
            let w = tape.combine(v[2], &v[..2]).unwrap();
            let xv = tape.constant(x.clone());
            let outs = apply_module(&mut tape, &kind, activation, w, v[3], xv).unwrap();
            // Weight each output differently so Q, K and V all matter.
            let mut total = None;
            for (j, o) in outs.into_iter().enumerate() {
                let sq = tape.mul(o, o).unwrap();
                let s = tape.sum(sq);
                let s = tape.scale(s, 1.0 + j as f64);
                total = Some(match total {
                    None => s,
                    Some(t) => tape.add(t, s).unwrap(),
                });
            }
            let loss = total.unwrap();
            let value = tape.value(loss).item();
            if !grads {
                return (value, Vec::new());
            }
            tape.backward(loss).unwrap();
            (value, v.iter().map(|&p| tape.grad(p).clone()).collect::<Vec<_>>())
        };
        let (_, analytic) = run(&params, true);
        for i in 0..params.len() {
            let numeric = numeric_grad(&params, i, &|p| run(p, false).0);
            let err = rel_err(&analytic[i], &numeric);
            assert!(err < TOL, "{kind:?} param {i} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn conv_module_gradients() {
    check_module(
        ModuleKind::ConvKernel {
            c_out: 2,
            c_in: 2,
            k: 3,
            stride: 1,
            padding: 1,
        },
        &[2, 2, 4, 4],
        Activation::Identity,
    );
    check_module(
        ModuleKind::ConvKernel {
            c_out: 3,
            c_in: 1,
            k: 2,
            stride: 2,
            padding: 0,
        },
        &[1, 1, 4, 4],
        Activation::Identity,
    );
}

#[test]
fn qkv_module_gradients() {
    check_module(ModuleKind::AttentionQkv { d: 3 }, &[2, 4, 3], Activation::Identity);
}

#[test]
fn fc_gelu_module_gradients() {
    check_module(ModuleKind::FullyConnected { d_out: 3, d_in: 4 }, &[5, 4], Activation::Gelu);
}

#[test]
fn mse_gradient_is_two_diff_over_n() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[3, 4], 2.0, &mut rng);
        let b = random(&[3, 4], 2.0, &mut rng);
        let mut tape = Tape::new();
        let (av, bv) = (tape.param(a.clone()), tape.constant(b.clone()));
        let l = tape.mse(av, bv, Reduction::Mean).unwrap();
        tape.backward(l).unwrap();
        let closed = a.sub(&b).unwrap().scale(2.0 / 12.0);
        assert!(rel_err(tape.grad(av), &closed) < 1e-14);
        let numeric = numeric_grad(&[a, b.clone()], 0, &|p| recast_core::mimicry::mse(&p[0], &b).unwrap());
        assert!(rel_err(tape.grad(av), &numeric) < 1e-6);
    }
}

fn shared_bank_fixture(seed: u64) -> (TeacherModel, RecastModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = RecastConfig::uniform(2, 1, 3, 1, 2, 3);
    let mut model = RecastModel::init(config, seed).unwrap();
    for c in model.coefficients.iter_mut().flatten() {
        c.values = random(&[3, 2], 1.0, &mut rng);
    }
    let teacher = TeacherModel {
        activation: Activation::Relu,
        layers: (0..2)
            .map(|_| {
                vec![TeacherModule {
                    weight: random(&[3, 3], 1.0, &mut rng),
                    bias: Tensor::zeros(&[3]),
                }]
            })
            .collect(),
        head: None,
    };
    (teacher, model)
}

fn mimicry_loss(teacher: &TeacherModel, model: &RecastModel, loss: LossKind) -> f64 {
    let mut total = 0.0;
    for l in 0..2 {
        total += loss.evaluate(&model.weight(l, 0).unwrap(), &teacher.layers[l][0].weight, Reduction::Sum).unwrap();
    }
    total
}

#[test]
fn coefficient_gradient_is_scaled_template_inner_product() {
    for seed in 0..SEEDS {
        let (teacher, model) = shared_bank_fixture(seed);
        for loss in [LossKind::SmoothL1 { beta: 1.0 }, LossKind::Mse] {
            let (gc, _) = total_loss_gradients(&teacher, &model, loss, Reduction::Sum).unwrap();
            for l in 0..2 {
                // dL/dW* of this module's own term.
                let mut tape = Tape::new();
                let w = tape.param(model.weight(l, 0).unwrap());
                let target = tape.constant(teacher.layers[l][0].weight.clone());
                let lv = match loss {
                    LossKind::SmoothL1 { beta } => tape.smooth_l1(w, target, beta, Reduction::Sum).unwrap(),
                    LossKind::Mse => tape.mse(w, target, Reduction::Sum).unwrap(),
                };
                tape.backward(lv).unwrap();
                let dw = tape.grad(w);
                let k = 3.0;
                let expected = Tensor::from_fn(&[3, 2], |idx| {
                    dw.dot(&model.banks[0].templates[idx % 2]).unwrap() / k
                });
                let err = rel_err(&gc[l][0], &expected);
                assert!(err < 1e-10, "seed {seed} layer {l}: {err:e}");
            }
        }
    }
}

#[test]
fn shared_template_gradient_accumulates_over_layers() {
    for seed in 0..SEEDS {
        let (teacher, model) = shared_bank_fixture(seed);
        let loss = LossKind::Mse;
        let (_, gt) = total_loss_gradients(&teacher, &model, loss, Reduction::Sum).unwrap();
        for i in 0..2 {
            let params: Vec<Tensor> = model.banks[0].templates.clone();
            let numeric = numeric_grad(&params, i, &|p| {
                let mut m = model.clone();
                m.banks[0].templates = p.to_vec();
                mimicry_loss(&teacher, &m, loss)
            });
            let err = rel_err(&gt[0][i], &numeric);
            assert!(err < TOL, "seed {seed} template {i}: {err:e}");
        }
    }
}
