//! Task-incremental adaptation on synthetic Gaussian-mixture suites.
//!
//! Templates stay frozen while each task trains only its coefficients and a
//! private classifier head. A task's snapshot therefore fully determines its
//! behavior, and restoring it later reproduces the original logits exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{RecastError, Result};
use crate::mimicry::{TeacherModel, TeacherModule};
use crate::model::{linear, param_accounting, ClassifierHead, RecastConfig, RecastModel, Trainable};
use crate::optim::{step_decay, AdamW, MomentState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    /// Random orthogonal rotation of the inputs plus a class permutation.
    #[default]
    Rotation,
    /// Class permutation only.
    MeanShuffle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub tasks: usize,
    pub classes: usize,
    pub dim: usize,
    pub shift: ShiftKind,
    pub seed: u64,
    /// Distance between any two class means.
    pub separation: f64,
    pub cluster_std: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            tasks: 4,
            classes: 3,
            dim: 16,
            shift: ShiftKind::Rotation,
            seed: 0,
            separation: 4.0,
            cluster_std: 1.0,
            train_size: 600,
            val_size: 100,
            test_size: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × d`
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: usize,
    pub classes: usize,
    pub seed: u64,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Orthogonal map applied to every input of this task.
    pub rotation: Tensor,
    /// `permutation[c]` is the label of mixture component `c`.
    pub permutation: Vec<usize>,
}

/// Haar-random orthogonal matrix via Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal(d: usize, rng: &mut impl Rng) -> Tensor {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for j in 0..d {
            for i in 0..j {
                let proj: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let (done, rest) = cols.split_at_mut(j);
                for (x, q) in rest[0].iter_mut().zip(&done[i]) {
                    *x -= proj * q;
                }
            }
            let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-10 {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|x| *x /= norm);
        }
        if ok {
            return Tensor::from_fn(&[d, d], |idx| cols[idx % d][idx / d]);
        }
    }
}

/// Builds `tasks` classification problems sharing one set of class means.
/// Task 0 is unshifted; every later task applies its own shift.
pub fn make_task_suite(cfg: &SuiteConfig) -> Result<Vec<TaskSpec>> {
    if cfg.tasks < 2 || cfg.classes < 2 {
        return Err(RecastError::InvalidArgument(format!(
            "a suite needs at least 2 tasks and 2 classes, got {} and {}",
            cfg.tasks, cfg.classes
        )));
    }
    if cfg.classes > cfg.dim {
        return Err(RecastError::InvalidArgument(format!(
            "{} classes do not fit orthogonal means in dimension {}",
            cfg.classes, cfg.dim
        )));
    }
    if !(cfg.separation > 0.0 && cfg.cluster_std > 0.0) {
        return Err(RecastError::InvalidArgument("separation and cluster_std must be > 0".into()));
    }
    if cfg.train_size == 0 || cfg.test_size == 0 {
        return Err(RecastError::InvalidArgument("train and test splits must be nonempty".into()));
    }
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Orthonormal directions scaled so every pair of means is `separation` apart.
    let basis = random_orthogonal(d, &mut rng);
    let radius = cfg.separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|c| (0..d).map(|i| radius * basis.data()[i * d + c]).collect())
        .collect();

    let mut suite = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let (rotation, permutation) = if t == 0 {
            (Tensor::eye(d), (0..cfg.classes).collect())
        } else {
            let q = match cfg.shift {
                ShiftKind::Rotation => random_orthogonal(d, &mut rng),
                ShiftKind::MeanShuffle => Tensor::eye(d),
            };
            let mut perm: Vec<usize> = (0..cfg.classes).collect();
            perm.shuffle(&mut rng);
            (q, perm)
        };
        let mut sample = |n: usize| -> Dataset {
            let mut x = Vec::with_capacity(n * d);
            let mut y = Vec::with_capacity(n);
            let mut raw = vec![0.0; d];
            for _ in 0..n {
                let c = rng.random_range(0..cfg.classes);
                for (r, m) in raw.iter_mut().zip(&means[c]) {
                    *r = m + cfg.cluster_std * rng.sample::<f64, _>(StandardNormal);
                }
                for i in 0..d {
                    x.push((0..d).map(|j| rotation.data()[i * d + j] * raw[j]).sum());
                }
                y.push(permutation[c]);
            }
            Dataset {
                x: Tensor::from_raw(vec![n, d], x),
                y,
            }
        };
        let train = sample(cfg.train_size);
        let val = sample(cfg.val_size.max(1));
        let test = sample(cfg.test_size);
        suite.push(TaskSpec {
            id: t,
            classes: cfg.classes,
            seed: cfg.seed,
            train,
            val,
            test,
            rotation,
            permutation,
        });
    }
    Ok(suite)
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = logits.argmax_rows()?;
    if pred.len() != labels.len() || labels.is_empty() {
        return Err(RecastError::InvalidArgument(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

fn adam_apply(opt: &AdamW, state: &mut MomentState, param: &mut Tensor, grad: &Tensor, lr: f64) {
    opt.update(state, param.data_mut(), grad.data(), lr);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub adam: AdamW,
    /// Minimum training accuracy the teacher must reach.
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1000,
            learning_rate: 0.01,
            adam: AdamW::default(),
            target_accuracy: 0.9,
            seed: 0,
        }
    }
}

/// Trains a plain network with `config`'s topology (a chain of fully
/// connected layers) plus a head on `task`, full batch.
pub fn pretrain_teacher(task: &TaskSpec, config: &RecastConfig, cfg: &PretrainConfig) -> Result<(TeacherModel, f64)> {
    config.validate()?;
    let probe = RecastModel::init(config.clone(), cfg.seed)?;
    let (d_in, d_out) = probe.feature_chain()?;
    if task.train.x.shape()[1] != d_in {
        return Err(RecastError::Topology(format!(
            "task inputs have width {}, network expects {d_in}",
            task.train.x.shape()[1]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights: Vec<Tensor> = config
        .layers
        .iter()
        .map(|mods| {
            let kind = mods[0];
            let bound = 1.0 / (kind.fan_in() as f64).sqrt();
            Tensor::from_fn(&kind.weight_shape(), |_| rng.random_range(-bound..=bound))
        })
        .collect();
    let mut biases: Vec<Tensor> = config.layers.iter().map(|m| Tensor::zeros(&[m[0].bias_len()])).collect();
    let mut head = ClassifierHead::init(d_out, task.classes, cfg.seed ^ 0x5eed);
    let layers = weights.len();
    let mut states = vec![MomentState::default(); 2 * layers + 2];

    for step in 0..cfg.steps {
        let lr = step_decay(cfg.learning_rate, step, cfg.steps, 0.1, 3);
        let mut tape = Tape::new();
        let wv: Vec<Var> = weights.iter().map(|w| tape.param(w.clone())).collect();
        let bv: Vec<Var> = biases.iter().map(|b| tape.param(b.clone())).collect();
        let mut h = tape.constant(task.train.x.clone());
        for (w, b) in wv.iter().zip(&bv) {
            let y = linear(&mut tape, h, *w, *b)?;
            h = config.activation.apply(&mut tape, y);
        }
        let (logits, hw, hb) = head.forward(&mut tape, h, true)?;
        let loss = tape.softmax_cross_entropy(logits, &task.train.y)?;
        if !tape.value(loss).item().is_finite() {
            return Err(RecastError::Numerical(format!("teacher pretraining diverged at step {step}")));
        }
        tape.backward(loss)?;
        for l in 0..layers {
            adam_apply(&cfg.adam, &mut states[2 * l], &mut weights[l], tape.grad(wv[l]), lr);
            adam_apply(&cfg.adam, &mut states[2 * l + 1], &mut biases[l], tape.grad(bv[l]), lr);
        }
        adam_apply(&cfg.adam, &mut states[2 * layers], &mut head.weight, tape.grad(hw), lr);
        adam_apply(&cfg.adam, &mut states[2 * layers + 1], &mut head.bias, tape.grad(hb), lr);
    }

    let teacher = TeacherModel {
        activation: config.activation,
        layers: weights
            .into_iter()
            .zip(biases)
            .map(|(weight, bias)| vec![TeacherModule { weight, bias }])
            .collect(),
        head: Some(head),
    };
    let acc = accuracy(&teacher.logits(&task.train.x)?, &task.train.y)?;
    if acc < cfg.target_accuracy {
        return Err(RecastError::Numerical(format!(
            "teacher reached {:.2}% train accuracy after {} steps, below the {:.2}% target",
            acc * 100.0,
            cfg.steps,
            cfg.target_accuracy * 100.0
        )));
    }
    Ok((teacher, acc))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Frozen templates; coefficients and head train.
    #[default]
    CoefficientsHead,
    HeadOnly,
    /// Templates, coefficients, biases and head all train.
    Full,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::CoefficientsHead => "coefficients-head",
            TrainMode::HeadOnly => "head-only",
            TrainMode::Full => "full",
        })
    }
}

impl std::str::FromStr for TrainMode {
    type Err = RecastError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coefficients-head" | "coefficients+head" => Ok(TrainMode::CoefficientsHead),
            "head-only" => Ok(TrainMode::HeadOnly),
            "full" => Ok(TrainMode::Full),
            _ => Err(RecastError::InvalidArgument(format!(
                "unknown mode {s:?} (expected coefficients-head, head-only or full)"
            ))),
        }
    }
}

/// Cap on trainable parameters per task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub limit: usize,
}

impl ParamBudget {
    pub fn unlimited() -> Self {
        ParamBudget { limit: usize::MAX }
    }

    pub fn check(&self, required: usize) -> Result<()> {
        if required > self.limit {
            return Err(RecastError::Budget {
                required,
                limit: self.limit,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TilConfig {
    pub steps: usize,
    pub coefficient_lr: f64,
    pub head_lr: f64,
    /// Template and bias rate in full mode.
    pub backbone_lr: f64,
    pub adam: AdamW,
    pub decay_factor: f64,
    pub decay_phases: usize,
    /// Scale of a fresh head relative to the default uniform initialization.
    pub head_init_scale: f64,
    /// One-based layers whose coefficients adapt; all when `None`.
    pub adapted_layers: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for TilConfig {
    fn default() -> Self {
        TilConfig {
            steps: 600,
            coefficient_lr: 0.05,
            head_lr: 0.05,
            backbone_lr: 0.01,
            adam: AdamW::default(),
            decay_factor: 0.1,
            decay_phases: 3,
            head_init_scale: 0.1,
            adapted_layers: None,
            seed: 0,
        }
    }
}

impl TilConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        for (name, lr) in [
            ("coefficient_lr", self.coefficient_lr),
            ("head_lr", self.head_lr),
            ("backbone_lr", self.backbone_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(RecastError::InvalidArgument(format!("{name} must be > 0, got {lr}")));
            }
        }
        if let Some(sel) = &self.adapted_layers {
            if let Some(&l) = sel.iter().find(|&&l| l == 0 || l > layers) {
                return Err(RecastError::InvalidArgument(format!(
                    "adapted layer {l} outside 1..={layers}"
                )));
            }
        }
        Ok(())
    }

    fn adapted(&self, layers: usize) -> Vec<bool> {
        match &self.adapted_layers {
            None => vec![true; layers],
            Some(sel) => (1..=layers).map(|l| sel.contains(&l)).collect(),
        }
    }
}

/// Everything task-specific: coefficients for every module and the head.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSnapshot {
    pub task: usize,
    pub mode: TrainMode,
    /// `[layer][module]`, each `K × n`.
    pub coefficients: Vec<Vec<Tensor>>,
    pub head: ClassifierHead,
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    /// Parameters that received updates while training this task.
    pub trainable_params: usize,
}

impl TaskSnapshot {
    /// Stored parameters: all coefficients plus the head.
    pub fn param_count(&self) -> usize {
        self.coefficients.iter().flatten().map(Tensor::numel).sum::<usize>() + self.head.param_count()
    }
}

/// Trainable parameter count of one task under `mode`.
pub fn trainable_params(model: &RecastModel, mode: TrainMode, cfg: &TilConfig, head_params: usize) -> Result<usize> {
    let c = &model.config;
    let adapted = cfg.adapted(c.layer_count());
    let coeffs: usize = c
        .layers
        .iter()
        .zip(&adapted)
        .filter(|(_, &a)| a)
        .map(|(mods, _)| mods.len() * c.templates * c.coeff_sets)
        .sum();
    Ok(match mode {
        TrainMode::HeadOnly => head_params,
        TrainMode::CoefficientsHead => coeffs + head_params,
        TrainMode::Full => {
            let acc = param_accounting(c)?;
            let biases: usize = c.modules().map(|(_, _, k)| k.bias_len()).sum();
            acc.template_params + acc.task_params + biases + head_params
        }
    })
}

/// Trains task `task` from the model's current coefficients and a fresh
/// head, then installs the result in the model.
pub fn train_task(
    model: &mut RecastModel,
    task: &TaskSpec,
    budget: ParamBudget,
    mode: TrainMode,
    cfg: &TilConfig,
) -> Result<TaskSnapshot> {
    model.validate()?;
    let layers = model.config.layer_count();
    cfg.validate(layers)?;
    let (_, features) = model.feature_chain()?;
    let init = ClassifierHead::init(features, task.classes, cfg.seed.wrapping_add(task.id as u64));
    let mut head = ClassifierHead {
        weight: init.weight.scale(cfg.head_init_scale),
        bias: init.bias,
    };
    let required = trainable_params(model, mode, cfg, head.param_count())?;
    budget.check(required)?;

    let trainable = match mode {
        TrainMode::HeadOnly => Trainable::nothing(layers),
        TrainMode::CoefficientsHead => Trainable {
            coefficients: cfg.adapted(layers),
            ..Trainable::nothing(layers)
        },
        TrainMode::Full => Trainable::everything(layers),
    };
    let mut coeff_states: Vec<Vec<MomentState>> = model
        .config
        .layers
        .iter()
        .map(|mods| vec![MomentState::default(); mods.len()])
        .collect();
    let mut bias_states = coeff_states.clone();
    let mut template_states = vec![vec![MomentState::default(); model.config.templates]; model.config.groups];
    let mut head_states = [MomentState::default(), MomentState::default()];

    for step in 0..cfg.steps {
        let decay = step_decay(1.0, step, cfg.steps, cfg.decay_factor, cfg.decay_phases);
        let mut tape = Tape::new();
        let params = model.register(&mut tape, &trainable);
        let x = tape.constant(task.train.x.clone());
        let h = model.forward_sequential(&mut tape, &params, x)?;
        let (logits, hw, hb) = head.forward(&mut tape, h, true)?;
        let loss = tape.softmax_cross_entropy(logits, &task.train.y)?;
        if !tape.value(loss).item().is_finite() {
            return Err(RecastError::Numerical(format!(
                "task {} training diverged at step {step}",
                task.id
            )));
        }
        tape.backward(loss)?;

        let head_lr = cfg.head_lr * decay;
        adam_apply(&cfg.adam, &mut head_states[0], &mut head.weight, tape.grad(hw), head_lr);
        adam_apply(&cfg.adam, &mut head_states[1], &mut head.bias, tape.grad(hb), head_lr);
        for (l, mods) in model.coefficients.iter_mut().enumerate() {
            if !trainable.coefficients[l] {
                continue;
            }
            for (m, c) in mods.iter_mut().enumerate() {
                let g = tape.grad(params.coefficients[l][m]);
                adam_apply(&cfg.adam, &mut coeff_states[l][m], &mut c.values, g, cfg.coefficient_lr * decay);
            }
        }
        if trainable.templates {
            let lr = cfg.backbone_lr * decay;
            for (g, bank) in model.banks.iter_mut().enumerate() {
                for (i, t) in bank.templates.iter_mut().enumerate() {
                    adam_apply(&cfg.adam, &mut template_states[g][i], t, tape.grad(params.templates[g][i]), lr);
                }
            }
        }
        if trainable.biases {
            let lr = cfg.backbone_lr * decay;
            for (l, mods) in model.biases.iter_mut().enumerate() {
                for (m, b) in mods.iter_mut().enumerate() {
                    adam_apply(&cfg.adam, &mut bias_states[l][m], b, tape.grad(params.biases[l][m]), lr);
                }
            }
        }
    }
    if model.coefficients.iter().flatten().any(|c| !c.values.all_finite()) || !head.weight.all_finite() {
        return Err(RecastError::Numerical(format!("task {} produced non-finite parameters", task.id)));
    }

    model.heads.insert(task.id, head.clone());
    let test_accuracy = accuracy(&model.logits(task.id, &task.test.x)?, &task.test.y)?;
    let val_accuracy = accuracy(&model.logits(task.id, &task.val.x)?, &task.val.y)?;
    Ok(TaskSnapshot {
        task: task.id,
        mode,
        coefficients: model
            .coefficients
            .iter()
            .map(|mods| mods.iter().map(|c| c.values.clone()).collect())
            .collect(),
        head,
        test_accuracy,
        val_accuracy,
        trainable_params: required,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub logits: Tensor,
}

/// Writes `snapshot` into `model` and evaluates it on the task's test split.
/// Banks and biases are left untouched.
pub fn restore_and_eval(model: &mut RecastModel, snapshot: &TaskSnapshot, task: &TaskSpec) -> Result<Evaluation> {
    restore(model, snapshot)?;
    let logits = model.logits(snapshot.task, &task.test.x)?;
    Ok(Evaluation {
        accuracy: accuracy(&logits, &task.test.y)?,
        logits,
    })
}

/// Installs a snapshot's coefficients and head.
pub fn restore(model: &mut RecastModel, snapshot: &TaskSnapshot) -> Result<()> {
    let c = &model.config;
    let fits = snapshot.coefficients.len() == c.layer_count()
        && snapshot.coefficients.iter().zip(&model.coefficients).all(|(s, m)| {
            s.len() == m.len() && s.iter().zip(m).all(|(a, b)| a.shape() == b.values.shape())
        });
    if !fits {
        return Err(RecastError::Topology(format!(
            "snapshot of task {} does not match the model's coefficient layout",
            snapshot.task
        )));
    }
    if let Ok((_, features)) = model.feature_chain() {
        if snapshot.head.features() != features {
            return Err(RecastError::Topology(format!(
                "snapshot head expects {} features, backbone yields {features}",
                snapshot.head.features()
            )));
        }
    }
    for (mods, snap) in model.coefficients.iter_mut().zip(&snapshot.coefficients) {
        for (c, s) in mods.iter_mut().zip(snap) {
            c.values = s.clone();
        }
    }
    model.heads.insert(snapshot.task, snapshot.head.clone());
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceReport {
    pub mode: TrainMode,
    /// Task ids in training order.
    pub tasks: Vec<usize>,
    /// `accuracy[i][j]`: test accuracy of the j-th task after training the
    /// i-th (`j ≤ i`).
    pub accuracy: Vec<Vec<f64>>,
    pub snapshots: Vec<TaskSnapshot>,
    /// Mean of the final row.
    pub average_top1: f64,
}

/// Trains every task in order from the same starting coefficients,
/// re-evaluating all earlier tasks after each one.
pub fn run_sequence(
    model: &mut RecastModel,
    suite: &[TaskSpec],
    budget: ParamBudget,
    mode: TrainMode,
    cfg: &TilConfig,
) -> Result<SequenceReport> {
    if suite.is_empty() {
        return Err(RecastError::InvalidArgument("empty task suite".into()));
    }
    let base: Vec<Vec<Tensor>> = model
        .coefficients
        .iter()
        .map(|mods| mods.iter().map(|c| c.values.clone()).collect())
        .collect();
    let mut snapshots: Vec<TaskSnapshot> = Vec::with_capacity(suite.len());
    let mut rows = Vec::with_capacity(suite.len());
    for task in suite {
        for (mods, b) in model.coefficients.iter_mut().zip(&base) {
            for (c, v) in mods.iter_mut().zip(b) {
                c.values = v.clone();
            }
        }
        snapshots.push(train_task(model, task, budget, mode, cfg)?);
        let mut row = Vec::with_capacity(snapshots.len());
        for (snap, t) in snapshots.iter().zip(suite) {
            row.push(restore_and_eval(model, snap, t)?.accuracy);
        }
        rows.push(row);
    }
    let last = rows.last().expect("nonempty suite");
    let average_top1 = last.iter().sum::<f64>() / last.len() as f64;
    Ok(SequenceReport {
        mode,
        tasks: suite.iter().map(|t| t.id).collect(),
        accuracy: rows,
        snapshots,
        average_top1,
    })
}
