//! Template-bank reparameterization of neural-network weights.
//!
//! Layer weights are generated from group-shared template banks and small
//! per-module coefficient sets. The crate covers the whole pipeline:
//!
//! * [`tensor`] and [`autograd`]: dense `f64` tensors and a reverse-mode tape.
//! * [`model`]: banks, coefficients, weight generation and parameter accounting.
//! * [`mimicry`]: fitting banks and coefficients to a pretrained teacher.
//! * [`diagnostics`]: bank diversity, singular-value entropy, coefficient similarity.
//! * [`til`]: task-incremental adaptation that trains only coefficients and heads.
//! * [`integrate`]: merging generated weights with LoRA, masks, DoRA and RoSA.
//! * [`optim`]: gradient descent, AdamW and step decay.
//! * [`persist`]: the `RCST` checkpoint format.
//! * [`config`]: the JSON run configuration consumed by the CLI.

pub mod autograd;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod integrate;
pub mod mimicry;
pub mod model;
pub mod optim;
pub mod persist;
pub mod tensor;
pub mod til;

pub use autograd::{Reduction, Tape, Var};
pub use error::{RecastError, Result};
pub use model::{
    generate_weight, group_index, param_accounting, Activation, ClassifierHead, CoefficientSet, ModuleKind,
    RecastConfig, RecastModel, TemplateBank,
};
pub use tensor::Tensor;
