//! Merging generated weights with adapter updates.
//!
//! Every combinator is a pure function of the generated weight and the
//! adapter parameters and returns one dense matrix, so an adapted model can
//! be exported as a plain network.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{RecastError, Result};
use crate::mimicry::{TeacherModel, TeacherModule};
use crate::model::RecastModel;
use crate::tensor::Tensor;

fn check_binary(name: &str, m: &Tensor) -> Result<()> {
    match m.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(RecastError::InvalidArgument(format!(
            "{name} must be binary; entry {i} is {}",
            m.data()[i]
        ))),
        None => Ok(()),
    }
}

fn check_same(op: &'static str, w: &Tensor, other: &Tensor) -> Result<()> {
    if w.shape() != other.shape() {
        return Err(RecastError::shape(op, w.shape(), other.shape()));
    }
    Ok(())
}

fn low_rank(w: &Tensor, b: &Tensor, a: &Tensor) -> Result<Tensor> {
    let ba = b.matmul(a)?;
    check_same("low_rank_update", w, &ba)?;
    Ok(ba)
}

/// `W + B·A`
pub fn combine_lora(w: &Tensor, b: &Tensor, a: &Tensor) -> Result<Tensor> {
    w.add(&low_rank(w, b, a)?)
}

/// `W ⊙ M` for a binary mask `M`.
pub fn combine_mask(w: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_same("combine_mask", w, mask)?;
    check_binary("mask", mask)?;
    w.mul(mask)
}

/// How the DoRA magnitude is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoraNorm {
    /// One Frobenius norm over the whole matrix.
    #[default]
    Frobenius,
    /// One norm per output unit (row).
    PerOutput,
}

/// `‖W‖ · (W + B·A) / ‖W + B·A‖` with the whole-matrix Frobenius norm.
pub fn combine_dora(w: &Tensor, b: &Tensor, a: &Tensor) -> Result<Tensor> {
    combine_dora_with(w, b, a, DoraNorm::Frobenius)
}

pub fn combine_dora_with(w: &Tensor, b: &Tensor, a: &Tensor, norm: DoraNorm) -> Result<Tensor> {
    let v = combine_lora(w, b, a)?;
    let scales = dora_scales(w, &v, norm)?;
    let (rows, cols) = v.dims2()?;
    Ok(Tensor::from_fn(&[rows, cols], |i| scales[i / cols] * v.data()[i]))
}

/// Per-row factors `‖W‖/‖V‖` (all equal for the Frobenius variant).
fn dora_scales(w: &Tensor, v: &Tensor, norm: DoraNorm) -> Result<Vec<f64>> {
    let (rows, _) = w.dims2()?;
    match norm {
        DoraNorm::Frobenius => {
            let nv = v.frobenius_norm();
            if nv == 0.0 {
                return Err(RecastError::Numerical("DoRA direction W + BA has zero norm".into()));
            }
            Ok(vec![w.frobenius_norm() / nv; rows])
        }
        DoraNorm::PerOutput => (0..rows)
            .map(|i| {
                let nv = v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                if nv == 0.0 {
                    return Err(RecastError::Numerical(format!("DoRA direction row {i} has zero norm")));
                }
                Ok(w.row(i).iter().map(|x| x * x).sum::<f64>().sqrt() / nv)
            })
            .collect(),
    }
}

/// `W + S ⊙ W + B·A` for a binary `S`.
pub fn combine_rosa(w: &Tensor, s: &Tensor, b: &Tensor, a: &Tensor) -> Result<Tensor> {
    check_same("combine_rosa", w, s)?;
    check_binary("sparse mask", s)?;
    w.add(&s.mul(w)?)?.add(&low_rank(w, b, a)?)
}

/// `W + B·A` on a tape.
pub fn lora_on_tape(tape: &mut Tape, w: Var, b: Var, a: Var) -> Result<Var> {
    let ba = tape.matmul(b, a)?;
    tape.add(w, ba)
}

/// Adapter family and size, without parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdapterKind {
    Lora {
        rank: usize,
    },
    Mask,
    Dora {
        rank: usize,
        #[serde(default)]
        norm: DoraNorm,
    },
    Rosa {
        rank: usize,
        /// Fraction of zero entries in the sparse mask.
        sparsity: f64,
    },
}

impl AdapterKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AdapterKind::Lora { rank } | AdapterKind::Dora { rank, .. } if rank == 0 => {
                Err(RecastError::InvalidArgument("adapter rank must be ≥ 1".into()))
            }
            AdapterKind::Rosa { rank, sparsity } => {
                if rank == 0 {
                    return Err(RecastError::InvalidArgument("adapter rank must be ≥ 1".into()));
                }
                if !(0.0..=1.0).contains(&sparsity) {
                    return Err(RecastError::InvalidArgument(format!("sparsity must lie in [0, 1], got {sparsity}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// An adapter with its per-module parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    Lora { b: Tensor, a: Tensor },
    Mask { mask: Tensor },
    Dora { b: Tensor, a: Tensor, norm: DoraNorm },
    Rosa { s: Tensor, b: Tensor, a: Tensor },
}

impl Adapter {
    /// Standard initialization for a `d_out × d_in` weight: `B = 0` and small
    /// random `A`, an all-ones mask, and a random sparse mask with
    /// `round(sparsity · d_out · d_in)` zeros. `B = 0` makes every
    /// low-rank adapter start at the identity.
    pub fn init(kind: AdapterKind, d_out: usize, d_in: usize, seed: u64) -> Result<Self> {
        kind.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut factors = |rank: usize| {
            let bound = 1.0 / (d_in as f64).sqrt();
            let a = Tensor::from_fn(&[rank, d_in], |_| rng.random_range(-bound..=bound));
            (Tensor::zeros(&[d_out, rank]), a)
        };
        Ok(match kind {
            AdapterKind::Lora { rank } => {
                let (b, a) = factors(rank);
                Adapter::Lora { b, a }
            }
            AdapterKind::Mask => Adapter::Mask {
                mask: Tensor::ones(&[d_out, d_in]),
            },
            AdapterKind::Dora { rank, norm } => {
                let (b, a) = factors(rank);
                Adapter::Dora { b, a, norm }
            }
            AdapterKind::Rosa { rank, sparsity } => {
                let (b, a) = factors(rank);
                let n = d_out * d_in;
                let zeros = (sparsity * n as f64).round() as usize;
                let mut s = vec![1.0; n];
                for i in sample(&mut rng, n, zeros.min(n)) {
                    s[i] = 0.0;
                }
                Adapter::Rosa {
                    s: Tensor::from_raw(vec![d_out, d_in], s),
                    b,
                    a,
                }
            }
        })
    }

    /// The combined dense weight.
    pub fn merge(&self, w: &Tensor) -> Result<Tensor> {
        match self {
            Adapter::Lora { b, a } => combine_lora(w, b, a),
            Adapter::Mask { mask } => combine_mask(w, mask),
            Adapter::Dora { b, a, norm } => combine_dora_with(w, b, a, *norm),
            Adapter::Rosa { s, b, a } => combine_rosa(w, s, b, a),
        }
    }

    /// `x·W_combinedᵀ + bias` evaluated without forming the combined weight:
    /// the low-rank path runs as `(x·Aᵀ)·Bᵀ` and the sparse path separately.
    pub fn composed_forward(&self, w: &Tensor, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let base = x.matmul(&w.transpose()?)?;
        let low_rank = |b: &Tensor, a: &Tensor| x.matmul(&a.transpose()?)?.matmul(&b.transpose()?);
        let y = match self {
            Adapter::Lora { b, a } => base.add(&low_rank(b, a)?)?,
            Adapter::Mask { mask } => {
                check_same("combine_mask", w, mask)?;
                check_binary("mask", mask)?;
                x.matmul(&w.mul(mask)?.transpose()?)?
            }
            Adapter::Dora { b, a, norm } => {
                let v = combine_lora(w, b, a)?;
                let scales = dora_scales(w, &v, *norm)?;
                let raw = base.add(&low_rank(b, a)?)?;
                let (_, cols) = raw.dims2()?;
                Tensor::from_fn(raw.shape(), |i| scales[i % cols] * raw.data()[i])
            }
            Adapter::Rosa { s, b, a } => {
                check_same("combine_rosa", w, s)?;
                check_binary("sparse mask", s)?;
                let sparse = x.matmul(&s.mul(w)?.transpose()?)?;
                base.add(&sparse)?.add(&low_rank(b, a)?)?
            }
        };
        let (rows, cols) = y.dims2()?;
        if bias.shape() != [cols] {
            return Err(RecastError::shape("composed_forward", y.shape(), bias.shape()));
        }
        Ok(Tensor::from_fn(&[rows, cols], |i| y.data()[i] + bias.data()[i % cols]))
    }

    /// Trainable scalars (masks count as fixed).
    pub fn param_count(&self) -> usize {
        match self {
            Adapter::Lora { b, a } | Adapter::Dora { b, a, .. } | Adapter::Rosa { b, a, .. } => b.numel() + a.numel(),
            Adapter::Mask { .. } => 0,
        }
    }
}

/// Dense export of a model with adapters on selected `(layer, module)`
/// pairs (zero-based). Unadapted modules keep their generated weight.
pub fn export_dense(model: &RecastModel, adapters: &BTreeMap<(usize, usize), Adapter>) -> Result<TeacherModel> {
    model.validate()?;
    if let Some(&(l, m)) = adapters
        .keys()
        .find(|(l, m)| model.config.layers.get(*l).is_none_or(|mods| *m >= mods.len()))
    {
        return Err(RecastError::Topology(format!("no module {} in layer {}", m + 1, l + 1)));
    }
    let mut layers = Vec::with_capacity(model.config.layer_count());
    for (l, mods) in model.config.layers.iter().enumerate() {
        let mut out = Vec::with_capacity(mods.len());
        for m in 0..mods.len() {
            let w = model.weight(l, m)?;
            let weight = match adapters.get(&(l, m)) {
                Some(ad) => ad.merge(&w.matricize())?.reshape(w.shape())?,
                None => w,
            };
            out.push(TeacherModule {
                weight,
                bias: model.biases[l][m].clone(),
            });
        }
        layers.push(out);
    }
    Ok(TeacherModel {
        activation: model.config.activation,
        layers,
        head: None,
    })
}
