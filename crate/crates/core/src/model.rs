//! Template banks, coefficient sets, and dynamic weight generation.
//!
//! Layers are partitioned into `G` contiguous groups. Every group owns one
//! [`TemplateBank`] of `n` templates, and every module `(l, m)` owns a `K×n`
//! [`CoefficientSet`]. A module's weight is generated on demand as
//!
//! ```text
//! W_{l,m} = (1/K) · Σ_k Σ_i C^k_{l,m,i} · T_{g(l),i}
//! ```
//!
//! Biases are ordinary per-module tensors and never templated.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{combine_sets, Tape, Var};
use crate::error::{RecastError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModuleKind {
    FullyConnected {
        d_out: usize,
        d_in: usize,
    },
    /// Fused query/key/value projection with a `3d×d` weight.
    AttentionQkv { d: usize },
    ConvKernel {
        c_out: usize,
        c_in: usize,
        k: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
}

fn one() -> usize {
    1
}

impl ModuleKind {
    pub fn conv(c_out: usize, c_in: usize, k: usize) -> Self {
        ModuleKind::ConvKernel {
            c_out,
            c_in,
            k,
            stride: 1,
            padding: 0,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            ModuleKind::FullyConnected { d_out, d_in } => vec![d_out, d_in],
            ModuleKind::AttentionQkv { d } => vec![3 * d, d],
            ModuleKind::ConvKernel { c_out, c_in, k, .. } => vec![c_out, c_in, k, k],
        }
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn bias_len(&self) -> usize {
        self.weight_shape()[0]
    }

    pub fn fan_in(&self) -> usize {
        self.weight_shape()[1..].iter().product()
    }

    fn validate(&self) -> Result<()> {
        if self.weight_shape().contains(&0) {
            return Err(RecastError::InvalidShape(format!("module {self:?} has a zero extent")));
        }
        if let ModuleKind::ConvKernel { stride: 0, .. } = self {
            return Err(RecastError::InvalidArgument("conv stride must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// Structural hyperparameters: `L` layers (with their module layouts),
/// `G` groups, `n` templates per bank and `K` coefficient sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecastConfig {
    pub groups: usize,
    pub templates: usize,
    pub coeff_sets: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Module layout of each layer, in layer order.
    pub layers: Vec<Vec<ModuleKind>>,
}

impl RecastConfig {
    /// A chain of fully connected layers `widths[l] → widths[l+1]`.
    pub fn mlp(widths: &[usize], groups: usize, templates: usize, coeff_sets: usize) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| vec![ModuleKind::FullyConnected { d_out: w[1], d_in: w[0] }])
            .collect();
        RecastConfig {
            groups,
            templates,
            coeff_sets,
            activation: Activation::Relu,
            layers,
        }
    }

    /// `layers` identical layers of `modules_per_layer` square `d×d` FC modules.
    pub fn uniform(layers: usize, modules_per_layer: usize, d: usize, groups: usize, templates: usize, coeff_sets: usize) -> Self {
        RecastConfig {
            groups,
            templates,
            coeff_sets,
            activation: Activation::Relu,
            layers: vec![vec![ModuleKind::FullyConnected { d_out: d, d_in: d }; modules_per_layer]; layers],
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Zero-based group of zero-based layer `l`.
    pub fn group_of(&self, l: usize) -> usize {
        group_index(l + 1, self.layer_count(), self.groups).expect("validated config") - 1
    }

    /// Zero-based layers belonging to zero-based group `g`.
    pub fn layers_in_group(&self, g: usize) -> Vec<usize> {
        (0..self.layer_count()).filter(|&l| self.group_of(l) == g).collect()
    }

    pub fn modules(&self) -> impl Iterator<Item = (usize, usize, &ModuleKind)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, mods)| mods.iter().enumerate().map(move |(m, k)| (l, m, k)))
    }

    pub fn module_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layer_count();
        if l == 0 {
            return Err(RecastError::InvalidArgument("at least one layer is required".into()));
        }
        if self.groups == 0 || self.groups > l {
            return Err(RecastError::InvalidArgument(format!(
                "group count G={} must satisfy 1 ≤ G ≤ L={l}",
                self.groups
            )));
        }
        if self.templates == 0 || self.coeff_sets == 0 {
            return Err(RecastError::InvalidArgument("n and K must both be ≥ 1".into()));
        }
        for (i, mods) in self.layers.iter().enumerate() {
            if mods.is_empty() {
                return Err(RecastError::InvalidArgument(format!("layer {} has no modules", i + 1)));
            }
            mods.iter().try_for_each(ModuleKind::validate)?;
        }
        for g in 0..self.groups {
            let layers = self.layers_in_group(g);
            if layers.is_empty() {
                return Err(RecastError::InvalidArgument(format!("group {} has no layers", g + 1)));
            }
            let shape = self.layers[layers[0]][0].weight_shape();
            for &li in &layers {
                for kind in &self.layers[li] {
                    if kind.weight_shape() != shape {
                        return Err(RecastError::Topology(format!(
                            "group {} mixes weight shapes {:?} and {:?} (layer {})",
                            g + 1,
                            shape,
                            kind.weight_shape(),
                            li + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Template shape shared by every module of zero-based group `g`.
    pub fn group_shape(&self, g: usize) -> Vec<usize> {
        let first = self.layers_in_group(g)[0];
        self.layers[first][0].weight_shape()
    }

    pub fn group_fan_in(&self, g: usize) -> usize {
        let first = self.layers_in_group(g)[0];
        self.layers[first][0].fan_in()
    }
}

/// One-based group index `⌈l / (L/G)⌉` for one-based layer `l`, with `L/G`
/// treated as an exact rational.
pub fn group_index(l: usize, layers: usize, groups: usize) -> Result<usize> {
    if l == 0 || l > layers {
        return Err(RecastError::InvalidArgument(format!("layer {l} outside 1..={layers}")));
    }
    if groups == 0 || groups > layers {
        return Err(RecastError::InvalidArgument(format!(
            "group count {groups} outside 1..={layers}"
        )));
    }
    // ⌈l / (L/G)⌉ = ⌈l·G / L⌉
    Ok((l * groups).div_ceil(layers))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateBank {
    /// One-based group id.
    pub group: usize,
    pub templates: Vec<Tensor>,
}

impl TemplateBank {
    pub fn new(group: usize, templates: Vec<Tensor>) -> Result<Self> {
        let Some(first) = templates.first() else {
            return Err(RecastError::InvalidArgument("a bank needs at least one template".into()));
        };
        if let Some(t) = templates.iter().find(|t| t.shape() != first.shape()) {
            return Err(RecastError::shape("template bank", first.shape(), t.shape()));
        }
        Ok(TemplateBank { group, templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.templates[0].shape()
    }
}

/// `K×n` coefficients of module `m` in layer `l` (both zero-based).
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientSet {
    pub layer: usize,
    pub module: usize,
    pub values: Tensor,
}

impl CoefficientSet {
    pub fn new(layer: usize, module: usize, values: Tensor) -> Result<Self> {
        values.dims2()?;
        if !values.all_finite() {
            return Err(RecastError::Numerical(format!(
                "non-finite coefficient for layer {} module {}",
                layer + 1,
                module + 1
            )));
        }
        Ok(CoefficientSet { layer, module, values })
    }

    pub fn sets(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn templates(&self) -> usize {
        self.values.shape()[1]
    }
}

/// `W = (1/K)·Σ_k W^k` with `W^k = Σ_i C^k_i·T_i`.
pub fn generate_weight(bank: &TemplateBank, coeffs: &CoefficientSet) -> Result<Tensor> {
    let (_, n) = coeffs.values.dims2()?;
    if n != bank.len() {
        return Err(RecastError::InvalidArgument(format!(
            "coefficients address {n} templates but the bank holds {}",
            bank.len()
        )));
    }
    let data: Vec<&[f64]> = bank.templates.iter().map(Tensor::data).collect();
    Ok(Tensor::from_raw(bank.shape().to_vec(), combine_sets(coeffs.values.data(), n, &data)))
}

/// Fan-in scaled uniform templates, `U(−1/√fan_in, 1/√fan_in)`.
pub fn init_templates(config: &RecastConfig, seed: u64) -> Result<Vec<TemplateBank>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.groups)
        .map(|g| {
            let shape = config.group_shape(g);
            let bound = 1.0 / (config.group_fan_in(g) as f64).sqrt();
            let templates = (0..config.templates)
                .map(|_| Tensor::from_fn(&shape, |_| rng.random_range(-bound..=bound)))
                .collect();
            TemplateBank::new(g + 1, templates)
        })
        .collect()
}

/// Orthonormal-row coefficient matrices for every module. When `K > n` the
/// rows are orthonormalized in consecutive blocks of `n`.
pub fn init_coefficients(config: &RecastConfig, seed: u64) -> Result<Vec<Vec<CoefficientSet>>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (k, n) = (config.coeff_sets, config.templates);
    config
        .layers
        .iter()
        .enumerate()
        .map(|(l, mods)| {
            (0..mods.len())
                .map(|m| {
                    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
                    while rows.len() < k {
                        let block = (k - rows.len()).min(n);
                        rows.extend(orthonormal_rows(&mut rng, block, n));
                    }
                    let values = Tensor::from_raw(vec![k, n], rows.concat());
                    CoefficientSet::new(l, m, values)
                })
                .collect()
        })
        .collect()
}

/// `count ≤ n` orthonormal rows of length `n` by Gram–Schmidt on Gaussian
/// draws.
fn orthonormal_rows(rng: &mut ChaCha8Rng, count: usize, n: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    while rows.len() < count {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for r in &rows {
                let proj: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    rows
}

/// Per-task linear classifier on top of the backbone features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    /// `classes × features`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn init(features: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (features as f64).sqrt();
        ClassifierHead {
            weight: Tensor::from_fn(&[classes, features], |_| rng.random_range(-bound..=bound)),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn forward(&self, tape: &mut Tape, features: Var, trainable: bool) -> Result<(Var, Var, Var)> {
        let (w, b) = if trainable {
            (tape.param(self.weight.clone()), tape.param(self.bias.clone()))
        } else {
            (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))
        };
        let logits = linear(tape, features, w, b)?;
        Ok((logits, w, b))
    }
}

/// `x·Wᵀ + b`
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let y = tape.matmul(x, wt)?;
    tape.add_bias(y, b)
}

/// Output of a single module forward.
#[derive(Clone, Debug, PartialEq)]
pub enum ModuleOutput {
    Single(Tensor),
    Qkv { q: Tensor, k: Tensor, v: Tensor },
}

/// Applies one module with an already generated weight on a tape.
///
/// * `FullyConnected`: `act(x·Wᵀ + b)` for `x: B×d_in`.
/// * `AttentionQkv`: `x·Wᵀ + b` for `x: B×d` or `B×S×d`, split into
///   `[Q, K, V]` along the feature axis.
/// * `ConvKernel`: `conv2d(x, W) + b` for `x: B×C_in×H×W`.
pub fn apply_module(
    tape: &mut Tape,
    kind: &ModuleKind,
    activation: Activation,
    weight: Var,
    bias: Var,
    x: Var,
) -> Result<Vec<Var>> {
    let x_shape = tape.value(x).shape().to_vec();
    match *kind {
        ModuleKind::FullyConnected { d_in, .. } => {
            if x_shape.len() != 2 || x_shape[1] != d_in {
                return Err(RecastError::shape("fully_connected", &x_shape, &kind.weight_shape()));
            }
            let y = linear(tape, x, weight, bias)?;
            Ok(vec![activation.apply(tape, y)])
        }
        ModuleKind::AttentionQkv { d } => {
            let (rows, lead) = match x_shape[..] {
                [b, dd] if dd == d => (b, vec![b]),
                [b, s, dd] if dd == d => (b * s, vec![b, s]),
                _ => return Err(RecastError::shape("attention_qkv", &x_shape, &kind.weight_shape())),
            };
            let flat = tape.reshape(x, &[rows, d])?;
            let y = linear(tape, flat, weight, bias)?;
            let mut out = Vec::with_capacity(3);
            for part in 0..3 {
                let piece = tape.slice_cols(y, part * d, (part + 1) * d)?;
                let mut shape = lead.clone();
                shape.push(d);
                out.push(tape.reshape(piece, &shape)?);
            }
            Ok(out)
        }
        ModuleKind::ConvKernel { stride, padding, c_in, .. } => {
            if x_shape.len() != 4 || x_shape[1] != c_in {
                return Err(RecastError::shape("conv_kernel", &x_shape, &kind.weight_shape()));
            }
            let y = tape.conv2d(x, weight, stride, padding)?;
            Ok(vec![tape.add_channel_bias(y, bias)?])
        }
    }
}

/// Which parameter families receive gradients when a model is placed on a
/// tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub templates: bool,
    /// Per zero-based layer.
    pub coefficients: Vec<bool>,
    pub biases: bool,
}

impl Trainable {
    pub fn nothing(layers: usize) -> Self {
        Trainable {
            templates: false,
            coefficients: vec![false; layers],
            biases: false,
        }
    }

    pub fn coefficients_only(layers: usize) -> Self {
        Trainable {
            coefficients: vec![true; layers],
            ..Self::nothing(layers)
        }
    }

    pub fn everything(layers: usize) -> Self {
        Trainable {
            templates: true,
            coefficients: vec![true; layers],
            biases: true,
        }
    }
}

/// Tape handles of a model's parameters.
#[derive(Clone, Debug)]
pub struct TapeParams {
    pub templates: Vec<Vec<Var>>,
    pub coefficients: Vec<Vec<Var>>,
    pub biases: Vec<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecastModel {
    pub config: RecastConfig,
    /// Indexed by zero-based group.
    pub banks: Vec<TemplateBank>,
    /// Indexed `[layer][module]`, zero-based.
    pub coefficients: Vec<Vec<CoefficientSet>>,
    pub biases: Vec<Vec<Tensor>>,
    /// Per-task classifier heads keyed by task id.
    pub heads: BTreeMap<usize, ClassifierHead>,
}

impl RecastModel {
    /// Fresh model: uniform templates, orthonormal coefficients, zero biases.
    pub fn init(config: RecastConfig, seed: u64) -> Result<Self> {
        let banks = init_templates(&config, seed)?;
        let coefficients = init_coefficients(&config, seed)?;
        let biases = config
            .layers
            .iter()
            .map(|mods| mods.iter().map(|k| Tensor::zeros(&[k.bias_len()])).collect())
            .collect();
        Ok(RecastModel {
            config,
            banks,
            coefficients,
            biases,
            heads: BTreeMap::new(),
        })
    }

    /// Checks every structural invariant against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.banks.len() != c.groups {
            return Err(RecastError::Topology(format!("{} banks for {} groups", self.banks.len(), c.groups)));
        }
        for (g, bank) in self.banks.iter().enumerate() {
            if bank.len() != c.templates || bank.shape() != c.group_shape(g).as_slice() {
                return Err(RecastError::Topology(format!(
                    "bank {} holds {} templates of shape {:?}; expected {} of {:?}",
                    g + 1,
                    bank.len(),
                    bank.shape(),
                    c.templates,
                    c.group_shape(g)
                )));
            }
        }
        if self.coefficients.len() != c.layer_count() || self.biases.len() != c.layer_count() {
            return Err(RecastError::Topology("per-layer parameter lists do not match L".into()));
        }
        for (l, mods) in c.layers.iter().enumerate() {
            if self.coefficients[l].len() != mods.len() || self.biases[l].len() != mods.len() {
                return Err(RecastError::Topology(format!("layer {} module count mismatch", l + 1)));
            }
            for (m, kind) in mods.iter().enumerate() {
                if self.coefficients[l][m].values.shape() != [c.coeff_sets, c.templates] {
                    return Err(RecastError::Topology(format!(
                        "coefficients of layer {} module {} have shape {:?}",
                        l + 1,
                        m + 1,
                        self.coefficients[l][m].values.shape()
                    )));
                }
                if self.biases[l][m].shape() != [kind.bias_len()] {
                    return Err(RecastError::Topology(format!("bias of layer {} module {}", l + 1, m + 1)));
                }
            }
        }
        Ok(())
    }

    pub fn bank_for_layer(&self, l: usize) -> &TemplateBank {
        &self.banks[self.config.group_of(l)]
    }

    pub fn weight(&self, l: usize, m: usize) -> Result<Tensor> {
        generate_weight(self.bank_for_layer(l), &self.coefficients[l][m])
    }

    pub fn register(&self, tape: &mut Tape, trainable: &Trainable) -> TapeParams {
        let leaf = |tape: &mut Tape, t: &Tensor, train: bool| {
            if train {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let templates = self
            .banks
            .iter()
            .map(|b| b.templates.iter().map(|t| leaf(tape, t, trainable.templates)).collect())
            .collect();
        let coefficients = self
            .coefficients
            .iter()
            .enumerate()
            .map(|(l, mods)| {
                let train = trainable.coefficients.get(l).copied().unwrap_or(false);
                mods.iter().map(|c| leaf(tape, &c.values, train)).collect()
            })
            .collect();
        let biases = self
            .biases
            .iter()
            .map(|mods| mods.iter().map(|b| leaf(tape, b, trainable.biases)).collect())
            .collect();
        TapeParams {
            templates,
            coefficients,
            biases,
        }
    }

    pub fn weight_var(&self, tape: &mut Tape, params: &TapeParams, l: usize, m: usize) -> Result<Var> {
        tape.combine(params.coefficients[l][m], &params.templates[self.config.group_of(l)])
    }

    /// Runs module `(l, m)` on a tape.
    pub fn module_on_tape(&self, tape: &mut Tape, params: &TapeParams, l: usize, m: usize, x: Var) -> Result<Vec<Var>> {
        let kind = self.module_kind(l, m)?;
        let w = self.weight_var(tape, params, l, m)?;
        apply_module(tape, &kind, self.config.activation, w, params.biases[l][m], x)
    }

    fn module_kind(&self, l: usize, m: usize) -> Result<ModuleKind> {
        self.config
            .layers
            .get(l)
            .and_then(|mods| mods.get(m))
            .copied()
            .ok_or_else(|| RecastError::InvalidArgument(format!("no module {} in layer {}", m + 1, l + 1)))
    }

    /// Pure forward of module `(l, m)` (zero-based) on input `x`.
    pub fn forward_module(&self, l: usize, m: usize, x: &Tensor) -> Result<ModuleOutput> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, &Trainable::nothing(self.config.layer_count()));
        let xv = tape.constant(x.clone());
        let outs = self.module_on_tape(&mut tape, &params, l, m, xv)?;
        Ok(match outs[..] {
            [y] => ModuleOutput::Single(tape.value(y).clone()),
            [q, k, v] => ModuleOutput::Qkv {
                q: tape.value(q).clone(),
                k: tape.value(k).clone(),
                v: tape.value(v).clone(),
            },
            _ => unreachable!("modules yield one or three outputs"),
        })
    }

    /// Input width of a sequential stack of single fully connected modules.
    pub fn feature_chain(&self) -> Result<(usize, usize)> {
        let mut dims = None::<(usize, usize)>;
        for (l, mods) in self.config.layers.iter().enumerate() {
            let [ModuleKind::FullyConnected { d_out, d_in }] = mods[..] else {
                return Err(RecastError::Topology(format!(
                    "sequential forward needs exactly one fully connected module per layer (layer {})",
                    l + 1
                )));
            };
            dims = match dims {
                None => Some((d_in, d_out)),
                Some((input, prev)) if prev == d_in => Some((input, d_out)),
                Some((_, prev)) => {
                    return Err(RecastError::Topology(format!(
                        "layer {} expects width {d_in} but receives {prev}",
                        l + 1
                    )))
                }
            };
        }
        dims.ok_or_else(|| RecastError::Topology("empty model".into()))
    }

    /// Feeds `x` through every layer in order.
    pub fn forward_sequential(&self, tape: &mut Tape, params: &TapeParams, x: Var) -> Result<Var> {
        self.feature_chain()?;
        let mut h = x;
        for l in 0..self.config.layer_count() {
            h = self.module_on_tape(tape, params, l, 0, h)?[0];
        }
        Ok(h)
    }

    /// Pure backbone features for a batch.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, &Trainable::nothing(self.config.layer_count()));
        let xv = tape.constant(x.clone());
        let h = self.forward_sequential(&mut tape, &params, xv)?;
        Ok(tape.value(h).clone())
    }

    /// Logits of task `task`'s head on a batch.
    pub fn logits(&self, task: usize, x: &Tensor) -> Result<Tensor> {
        let head = self
            .heads
            .get(&task)
            .ok_or_else(|| RecastError::InvalidArgument(format!("no head for task {task}")))?;
        let mut tape = Tape::new();
        let params = self.register(&mut tape, &Trainable::nothing(self.config.layer_count()));
        let xv = tape.constant(x.clone());
        let h = self.forward_sequential(&mut tape, &params, xv)?;
        let (logits, ..) = head.forward(&mut tape, h, false)?;
        Ok(tape.value(logits).clone())
    }
}

/// Trainable-parameter counts and memory savings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamAccounting {
    /// `Σ_l M_l·n·K`
    pub task_params: usize,
    /// Parameters of the dense weights being replaced, `Σ_{l,m} |W_{l,m}|`.
    pub dense_params: usize,
    /// Shared template parameters, `Σ_g n·|T_g|`.
    pub template_params: usize,
    /// `dense − (templates + task)`; negative when templating costs memory.
    pub savings: i64,
}

pub fn param_accounting(config: &RecastConfig) -> Result<ParamAccounting> {
    config.validate()?;
    let task_params = config.module_count() * config.templates * config.coeff_sets;
    let dense_params: usize = config.modules().map(|(_, _, k)| k.weight_len()).sum();
    let template_params: usize = (0..config.groups)
        .map(|g| config.templates * config.group_shape(g).iter().product::<usize>())
        .sum();
    let savings = dense_params as i64 - (template_params as i64 + task_params as i64);
    Ok(ParamAccounting {
        task_params,
        dense_params,
        template_params,
        savings,
    })
}

/// Closed form `L·M·d² − (G·n·d² + L·M·n·K)` for `M` square `d×d` modules in
/// each of `L` layers.
pub fn closed_form_savings(layers: u64, modules: u64, d: u64, groups: u64, templates: u64, coeff_sets: u64) -> i64 {
    let d2 = (d * d) as i64;
    (layers * modules) as i64 * d2 - (groups as i64 * templates as i64 * d2 + (layers * modules * templates * coeff_sets) as i64)
}
