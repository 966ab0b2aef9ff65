//! Neural mimicry: fit template banks and coefficients so that generated
//! weights reproduce a pretrained teacher's weights.
//!
//! Each epoch visits every module `(l, m)` in layer order, generates `W*`
//! from (optionally noise-perturbed) coefficients, measures the discrepancy
//! against the teacher weight and takes a gradient step on both the module's
//! coefficients and its group's templates. Groups never share parameters, so
//! they can be fitted on separate threads with bit-identical results.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Reduction, Tape, Var};
use crate::error::{RecastError, Result};
use crate::model::{Activation, ClassifierHead, RecastConfig, RecastModel, TemplateBank};
use crate::optim::{sgd_update, AdamW, MomentState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModule {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A plain (non-templated) network whose module weights mimicry reproduces.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub activation: Activation,
    /// Indexed `[layer][module]`.
    pub layers: Vec<Vec<TeacherModule>>,
    pub head: Option<ClassifierHead>,
}

impl TeacherModel {
    pub fn check_topology(&self, config: &RecastConfig) -> Result<()> {
        if self.layers.len() != config.layer_count() {
            return Err(RecastError::Topology(format!(
                "teacher has {} layers, config expects {}",
                self.layers.len(),
                config.layer_count()
            )));
        }
        for (l, (mods, kinds)) in self.layers.iter().zip(&config.layers).enumerate() {
            if mods.len() != kinds.len() {
                return Err(RecastError::Topology(format!(
                    "layer {}: teacher has {} modules, config expects {}",
                    l + 1,
                    mods.len(),
                    kinds.len()
                )));
            }
            for (m, (module, kind)) in mods.iter().zip(kinds).enumerate() {
                if module.weight.shape() != kind.weight_shape().as_slice() || module.bias.shape() != [kind.bias_len()] {
                    return Err(RecastError::Topology(format!(
                        "layer {} module {}: teacher weight {:?} / bias {:?} vs expected {:?} / [{}]",
                        l + 1,
                        m + 1,
                        module.weight.shape(),
                        module.bias.shape(),
                        kind.weight_shape(),
                        kind.bias_len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Logits of a sequential fully connected teacher with a head.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| RecastError::InvalidArgument("teacher has no classifier head".into()))?;
        let mut tape = Tape::new();
        let mut h = tape.constant(x.clone());
        for (l, mods) in self.layers.iter().enumerate() {
            let [module] = &mods[..] else {
                return Err(RecastError::Topology(format!("layer {} is not a single module", l + 1)));
            };
            let w = tape.constant(module.weight.clone());
            let b = tape.constant(module.bias.clone());
            let y = crate::model::linear(&mut tape, h, w, b)?;
            h = self.activation.apply(&mut tape, y);
        }
        let (logits, ..) = head.forward(&mut tape, h, false)?;
        Ok(tape.value(logits).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    SmoothL1 {
        #[serde(default = "default_beta")]
        beta: f64,
    },
    Mse,
}

fn default_beta() -> f64 {
    1.0
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::SmoothL1 { beta: 1.0 }
    }
}

impl LossKind {
    fn on_tape(self, tape: &mut Tape, a: Var, b: Var, reduction: Reduction) -> Result<Var> {
        match self {
            LossKind::SmoothL1 { beta } => tape.smooth_l1(a, b, beta, reduction),
            LossKind::Mse => tape.mse(a, b, reduction),
        }
    }

    pub fn evaluate(self, a: &Tensor, b: &Tensor, reduction: Reduction) -> Result<f64> {
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let l = self.on_tape(&mut tape, av, bv, reduction)?;
        Ok(tape.value(l).item())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MimicryOptimizer {
    /// `p ← p − η·∂L/∂p`
    #[default]
    GradientDescent,
    Adam(AdamW),
}

/// When template updates are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateSchedule {
    /// After every module visit.
    #[default]
    PerModule,
    /// Once per epoch from the gradient of the epoch's summed loss.
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MimicryConfig {
    pub loss: LossKind,
    /// Reduction of each module's weight discrepancy.
    pub reduction: Reduction,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Standard deviation of the coefficient noise.
    pub sigma: f64,
    pub noise_enabled: bool,
    pub seed: u64,
    pub optimizer: MimicryOptimizer,
    pub schedule: UpdateSchedule,
    /// Worker threads for group-parallel fitting.
    pub threads: usize,
}

impl Default for MimicryConfig {
    fn default() -> Self {
        MimicryConfig {
            loss: LossKind::default(),
            reduction: Reduction::Sum,
            learning_rate: 0.01,
            max_epochs: 2000,
            sigma: 0.01,
            noise_enabled: false,
            seed: 0,
            optimizer: MimicryOptimizer::GradientDescent,
            schedule: UpdateSchedule::PerModule,
            threads: 1,
        }
    }
}

impl MimicryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(RecastError::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(RecastError::InvalidArgument(format!("sigma must be ≥ 0, got {}", self.sigma)));
        }
        if let LossKind::SmoothL1 { beta } = self.loss {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(RecastError::InvalidArgument(format!("beta must be > 0, got {beta}")));
            }
        }
        if self.threads == 0 {
            return Err(RecastError::InvalidArgument("threads must be ≥ 1".into()));
        }
        Ok(())
    }

    fn effective_sigma(&self) -> f64 {
        if self.noise_enabled {
            self.sigma
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleReport {
    pub layer: usize,
    pub module: usize,
    pub loss: f64,
    pub cosine_similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionReport {
    pub modules: Vec<ModuleReport>,
    pub epochs_run: usize,
    /// Summed module losses of every epoch.
    pub loss_history: Vec<f64>,
    pub wall_seconds: f64,
}

impl ReconstructionReport {
    pub fn min_similarity(&self) -> f64 {
        self.modules.iter().map(|m| m.cosine_similarity).fold(f64::INFINITY, f64::min)
    }
}

/// Mean SmoothL1 discrepancy.
pub fn smooth_l1(a: &Tensor, b: &Tensor, beta: f64) -> Result<f64> {
    LossKind::SmoothL1 { beta }.evaluate(a, b, Reduction::Mean)
}

/// Mean squared discrepancy.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    LossKind::Mse.evaluate(a, b, Reduction::Mean)
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.numel() != b.numel() {
        return Err(RecastError::shape("cosine_similarity", a.shape(), b.shape()));
    }
    let (na, nb) = (a.frobenius_norm(), b.frobenius_norm());
    if na == 0.0 || nb == 0.0 {
        return Err(RecastError::UndefinedMetric("cosine similarity of a zero vector".into()));
    }
    Ok((a.dot(b)? / (na * nb)).clamp(-1.0, 1.0))
}

/// I.i.d. `N(0, σ²)` noise shaped like `shape`.
pub fn sample_noise(shape: &[usize], sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(RecastError::InvalidArgument(format!("sigma must be ≥ 0, got {sigma}")));
    }
    Ok(Tensor::from_fn(shape, |_| sigma * rng.sample::<f64, _>(StandardNormal)))
}

/// `C + ε` with fresh noise; `σ = 0` returns `C` unchanged.
pub fn perturb_coefficients(coeffs: &Tensor, sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if sigma == 0.0 {
        return Ok(coeffs.clone());
    }
    coeffs.add(&sample_noise(coeffs.shape(), sigma, rng)?)
}

fn noise_rng(seed: u64, l: usize, m: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((l as u64) << 32) | m as u64);
    rng
}

struct ModuleState {
    layer: usize,
    module: usize,
    coeffs: Tensor,
    target: Tensor,
    rng: ChaCha8Rng,
    moments: MomentState,
}

/// All mutable state of one group's fit.
struct GroupFit<'a> {
    cfg: &'a MimicryConfig,
    bank: TemplateBank,
    bank_moments: Vec<MomentState>,
    modules: Vec<ModuleState>,
}

impl GroupFit<'_> {
    fn apply(&mut self, slot: Slot, grad: &Tensor) {
        let lr = self.cfg.learning_rate;
        let (param, moments) = match slot {
            Slot::Template(i) => (&mut self.bank.templates[i], &mut self.bank_moments[i]),
            Slot::Coeffs(j) => {
                let m = &mut self.modules[j];
                (&mut m.coeffs, &mut m.moments)
            }
        };
        match self.cfg.optimizer {
            MimicryOptimizer::GradientDescent => sgd_update(param.data_mut(), grad.data(), lr),
            MimicryOptimizer::Adam(adam) => adam.update(moments, param.data_mut(), grad.data(), lr),
        }
    }

    fn module_loss(&self, tape: &mut Tape, templates: &[Var], j: usize, coeffs: Var) -> Result<Var> {
        let w = tape.combine(coeffs, templates)?;
        let target = tape.constant(self.modules[j].target.clone());
        self.cfg.loss.on_tape(tape, w, target, self.cfg.reduction)
    }

    fn perturbed(&mut self, tape: &mut Tape, j: usize, c: Var) -> Result<Var> {
        let sigma = self.cfg.effective_sigma();
        if sigma == 0.0 {
            return Ok(c);
        }
        let shape = self.modules[j].coeffs.shape().to_vec();
        let eps = sample_noise(&shape, sigma, &mut self.modules[j].rng)?;
        let e = tape.constant(eps);
        tape.add(c, e)
    }

    fn diverged(&self, epoch: usize, j: usize) -> RecastError {
        let m = &self.modules[j];
        RecastError::Numerical(format!(
            "mimicry diverged at epoch {epoch} (layer {}, module {}); try a smaller learning rate",
            m.layer + 1,
            m.module + 1
        ))
    }

    /// One epoch; returns each module's loss in visiting order.
    fn epoch(&mut self, epoch: usize) -> Result<Vec<f64>> {
        match self.cfg.schedule {
            UpdateSchedule::PerModule => {
                let mut losses = Vec::with_capacity(self.modules.len());
                for j in 0..self.modules.len() {
                    let mut tape = Tape::new();
                    let templates: Vec<Var> = self.bank.templates.iter().map(|t| tape.param(t.clone())).collect();
                    let c = tape.param(self.modules[j].coeffs.clone());
                    let cp = self.perturbed(&mut tape, j, c)?;
                    let loss = self.module_loss(&mut tape, &templates, j, cp)?;
                    let value = tape.value(loss).item();
                    if !value.is_finite() {
                        return Err(self.diverged(epoch, j));
                    }
                    tape.backward(loss)?;
                    self.apply(Slot::Coeffs(j), tape.grad(c));
                    for (i, t) in templates.iter().enumerate() {
                        self.apply(Slot::Template(i), tape.grad(*t));
                    }
                    losses.push(value);
                }
                Ok(losses)
            }
            UpdateSchedule::PerEpoch => {
                let mut tape = Tape::new();
                let templates: Vec<Var> = self.bank.templates.iter().map(|t| tape.param(t.clone())).collect();
                let mut coeff_vars = Vec::with_capacity(self.modules.len());
                let mut loss_vars = Vec::with_capacity(self.modules.len());
                for j in 0..self.modules.len() {
                    let c = tape.param(self.modules[j].coeffs.clone());
                    let cp = self.perturbed(&mut tape, j, c)?;
                    coeff_vars.push(c);
                    loss_vars.push(self.module_loss(&mut tape, &templates, j, cp)?);
                }
                let mut total = loss_vars[0];
                for &l in &loss_vars[1..] {
                    total = tape.add(total, l)?;
                }
                let losses: Vec<f64> = loss_vars.iter().map(|&l| tape.value(l).item()).collect();
                if let Some(j) = losses.iter().position(|v| !v.is_finite()) {
                    return Err(self.diverged(epoch, j));
                }
                tape.backward(total)?;
                for (j, c) in coeff_vars.iter().enumerate() {
                    self.apply(Slot::Coeffs(j), tape.grad(*c));
                }
                for (i, t) in templates.iter().enumerate() {
                    self.apply(Slot::Template(i), tape.grad(*t));
                }
                Ok(losses)
            }
        }
    }

    fn run(&mut self, epochs: usize) -> Result<Vec<Vec<f64>>> {
        (1..=epochs).map(|e| self.epoch(e)).collect()
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Template(usize),
    Coeffs(usize),
}

/// Fits `model`'s banks and coefficients to `teacher`, copies the teacher's
/// biases, and reports per-module loss and cosine similarity. Progress lines
/// `epoch=<e> total_loss=<v>` are written to `progress` when given.
pub fn run_mimicry(
    teacher: &TeacherModel,
    model: &mut RecastModel,
    cfg: &MimicryConfig,
    mut progress: Option<&mut dyn Write>,
) -> Result<ReconstructionReport> {
    cfg.validate()?;
    model.validate()?;
    teacher.check_topology(&model.config)?;
    let started = Instant::now();

    for (l, mods) in teacher.layers.iter().enumerate() {
        for (m, module) in mods.iter().enumerate() {
            model.biases[l][m] = module.bias.clone();
        }
    }

    let config = model.config.clone();
    let mut fits: Vec<GroupFit> = (0..config.groups)
        .map(|g| GroupFit {
            cfg,
            bank: model.banks[g].clone(),
            bank_moments: vec![MomentState::default(); config.templates],
            modules: config
                .layers_in_group(g)
                .into_iter()
                .flat_map(|l| (0..config.layers[l].len()).map(move |m| (l, m)))
                .map(|(l, m)| ModuleState {
                    layer: l,
                    module: m,
                    coeffs: model.coefficients[l][m].values.clone(),
                    target: teacher.layers[l][m].weight.clone(),
                    rng: noise_rng(cfg.seed, l, m),
                    moments: MomentState::default(),
                })
                .collect(),
        })
        .collect();

    // losses[g][epoch][j]
    let per_group: Vec<Vec<Vec<f64>>> = if cfg.threads <= 1 || fits.len() <= 1 {
        let mut per_group = vec![Vec::with_capacity(cfg.max_epochs); fits.len()];
        for epoch in 1..=cfg.max_epochs {
            for (fit, hist) in fits.iter_mut().zip(&mut per_group) {
                hist.push(fit.epoch(epoch)?);
            }
            if let Some(out) = progress.as_deref_mut() {
                let total = epoch_total(&config, &fits, &per_group, epoch - 1);
                writeln!(out, "epoch={epoch} total_loss={total}")?;
            }
        }
        per_group
    } else {
        let chunk = fits.len().div_ceil(cfg.threads);
        let results: Vec<Result<Vec<Vec<Vec<f64>>>>> = std::thread::scope(|s| {
            let handles: Vec<_> = fits
                .chunks_mut(chunk)
                .map(|part| {
                    s.spawn(move || part.iter_mut().map(|f| f.run(cfg.max_epochs)).collect::<Result<Vec<_>>>())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("mimicry worker panicked")).collect()
        });
        let mut per_group = Vec::with_capacity(fits.len());
        for r in results {
            per_group.extend(r?);
        }
        if let Some(out) = progress.as_mut() {
            for epoch in 0..cfg.max_epochs {
                let total = epoch_total(&config, &fits, &per_group, epoch);
                writeln!(out, "epoch={} total_loss={total}", epoch + 1)?;
            }
        }
        per_group
    };

    let loss_history = (0..cfg.max_epochs)
        .map(|e| epoch_total(&config, &fits, &per_group, e))
        .collect();

    for (g, fit) in fits.into_iter().enumerate() {
        model.banks[g] = fit.bank;
        for ms in fit.modules {
            model.coefficients[ms.layer][ms.module].values = ms.coeffs;
        }
    }
    model.validate()?;

    let mut modules = Vec::with_capacity(config.module_count());
    for (l, m, _) in config.modules() {
        let generated = model.weight(l, m)?;
        let target = &teacher.layers[l][m].weight;
        let loss = cfg.loss.evaluate(&generated, target, cfg.reduction)?;
        if !loss.is_finite() || !generated.all_finite() {
            return Err(RecastError::Numerical(format!(
                "non-finite reconstruction for layer {} module {}",
                l + 1,
                m + 1
            )));
        }
        modules.push(ModuleReport {
            layer: l,
            module: m,
            loss,
            cosine_similarity: cosine_similarity(&generated, target)?,
        });
    }

    Ok(ReconstructionReport {
        modules,
        epochs_run: cfg.max_epochs,
        loss_history,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Sum of one epoch's module losses in layer-major order.
fn epoch_total(config: &RecastConfig, fits: &[GroupFit], per_group: &[Vec<Vec<f64>>], epoch: usize) -> f64 {
    let mut total = 0.0;
    for (l, m, _) in config.modules() {
        let g = config.group_of(l);
        let j = fits[g].modules.iter().position(|s| s.layer == l && s.module == m).expect("module in group");
        total += per_group[g][epoch][j];
    }
    total
}

/// Gradients of the summed, unperturbed mimicry loss with respect to every
/// coefficient set (`[layer][module]`) and template (`[group][i]`).
pub fn total_loss_gradients(
    teacher: &TeacherModel,
    model: &RecastModel,
    loss: LossKind,
    reduction: Reduction,
) -> Result<(Vec<Vec<Tensor>>, Vec<Vec<Tensor>>)> {
    teacher.check_topology(&model.config)?;
    let mut tape = Tape::new();
    let params = model.register(
        &mut tape,
        &crate::model::Trainable {
            templates: true,
            coefficients: vec![true; model.config.layer_count()],
            biases: false,
        },
    );
    let mut total: Option<Var> = None;
    for (l, m, _) in model.config.modules() {
        let w = model.weight_var(&mut tape, &params, l, m)?;
        let target = tape.constant(teacher.layers[l][m].weight.clone());
        let lv = loss.on_tape(&mut tape, w, target, reduction)?;
        total = Some(match total {
            None => lv,
            Some(t) => tape.add(t, lv)?,
        });
    }
    let total = total.expect("validated model has modules");
    tape.backward(total)?;
    let coeffs = params
        .coefficients
        .iter()
        .map(|mods| mods.iter().map(|v| tape.grad(*v).clone()).collect())
        .collect();
    let templates = params
        .templates
        .iter()
        .map(|ts| ts.iter().map(|v| tape.grad(*v).clone()).collect())
        .collect();
    Ok((coeffs, templates))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_branches() {
        let z = Tensor::zeros(&[1]);
        assert_eq!(smooth_l1(&Tensor::full(&[1], 0.5), &z, 1.0).unwrap(), 0.125);
        assert_eq!(smooth_l1(&Tensor::full(&[1], 2.0), &z, 1.0).unwrap(), 1.5);
        assert!(smooth_l1(&z, &Tensor::zeros(&[2]), 1.0).is_err());
        assert!(smooth_l1(&z, &z, 0.0).is_err());
    }

    #[test]
    fn equal_inputs_give_zero_loss_and_gradient() {
        let a = Tensor::from_fn(&[3], |i| i as f64);
        let mut tape = Tape::new();
        let (x, y) = (tape.param(a.clone()), tape.param(a.clone()));
        let l = tape.smooth_l1(x, y, 1.0, Reduction::Mean).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(tape.grad(x).data().iter().all(|&g| g == 0.0));
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mse_reference() {
        let a = Tensor::new(&[2], vec![1.0, 3.0]).unwrap();
        let b = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        assert_eq!(mse(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn cosine_reference_values() {
        let a = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&a, &a.scale(2.0)).unwrap() - 1.0).abs() < 1e-15);
        let e1 = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&e1, &Tensor::zeros(&[2])),
            Err(RecastError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn zero_sigma_is_identity() {
        let c = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb_coefficients(&c, 0.0, &mut rng).unwrap(), c);
        assert!(perturb_coefficients(&c, -1.0, &mut rng).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = MimicryConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = MimicryConfig::default();
        c.sigma = -0.1;
        assert!(c.validate().is_err());
        let mut c = MimicryConfig::default();
        c.loss = LossKind::SmoothL1 { beta: 0.0 };
        assert!(c.validate().is_err());
    }
}
