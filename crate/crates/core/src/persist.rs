//! The `RCST` checkpoint format.
//!
//! ```text
//! "RCST" | version: u32 LE | manifest length: u64 LE | manifest (JSON) | payload
//! ```
//!
//! The manifest lists every tensor's name, shape and byte offset into the
//! payload; tensors are stored back to back as little-endian `f64` in
//! manifest order. See `docs/format.md` for a worked example.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{RecastError, Result};
use crate::mimicry::{TeacherModel, TeacherModule};
use crate::model::{Activation, ClassifierHead, CoefficientSet, RecastConfig, RecastModel, TemplateBank};
use crate::tensor::Tensor;
use crate::til::{TaskSnapshot, TrainMode};

pub const MAGIC: &[u8; 4] = b"RCST";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: String,
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// A decoded checkpoint before interpretation.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn payload_len(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel() * 8).sum()
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    for (name, t) in &ckpt.tensors {
        if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
            return Err(RecastError::Format(format!(
                "tensor {name} holds a non-finite value at index {i}"
            )));
        }
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel() as u64 * 8;
    }
    let manifest = serde_json::to_vec(&Manifest {
        kind: ckpt.kind.clone(),
        meta: ckpt.meta.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in &ckpt.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn format_err(msg: impl Into<String>) -> RecastError {
    RecastError::Format(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(format!("{} bytes is too short for a checkpoint header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(format!("bad magic {:02x?}, expected \"RCST\"", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(format!("unsupported format version {version}")));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[HEADER_LEN..];
    if manifest_len > rest.len() as u64 {
        return Err(format_err(format!(
            "manifest length {manifest_len} exceeds the {} bytes that follow the header",
            rest.len()
        )));
    }
    let (manifest_bytes, payload) = rest.split_at(manifest_len as usize);
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| format_err(format!("invalid manifest: {e}")))?;

    let mut expected = 0u64;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.offset != expected {
            return Err(format_err(format!(
                "tensor {} starts at offset {}, expected {expected}",
                e.name, e.offset
            )));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &s| acc.checked_mul(s as u64))
            .filter(|_| e.shape.iter().all(|&s| s > 0))
            .ok_or_else(|| format_err(format!("tensor {} has an invalid shape {:?}", e.name, e.shape)))?;
        let len = numel
            .checked_mul(8)
            .and_then(|b| b.checked_add(e.offset))
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| format_err(format!("tensor {} runs past the end of the payload", e.name)))?;
        let data: Vec<f64> = payload[e.offset as usize..len as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| format_err(format!("tensor {}: {err}", e.name)))?;
        tensors.push((e.name, t));
        expected = len;
    }
    if expected != payload.len() as u64 {
        return Err(format_err(format!(
            "payload holds {} bytes but the manifest accounts for {expected}",
            payload.len()
        )));
    }
    Ok(Checkpoint {
        kind: manifest.kind,
        meta: manifest.meta,
        tensors,
    })
}

/// Writes through a sibling temporary file so readers never see a partial
/// checkpoint.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_kind(path: &Path, kind: &str) -> Result<Checkpoint> {
    let ckpt = decode_checkpoint(&fs::read(path)?)?;
    if ckpt.kind != kind {
        return Err(format_err(format!(
            "{} holds a {} checkpoint, expected {kind}",
            path.display(),
            ckpt.kind
        )));
    }
    Ok(ckpt)
}

/// Pops tensors in order, checking each name.
struct Reader {
    tensors: std::vec::IntoIter<(String, Tensor)>,
}

impl Reader {
    fn new(ckpt: Checkpoint) -> Self {
        Reader {
            tensors: ckpt.tensors.into_iter(),
        }
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        match self.tensors.next() {
            Some((n, t)) if n == name && t.shape() == shape => Ok(t),
            Some((n, t)) => Err(format_err(format!(
                "expected tensor {name} {shape:?}, found {n} {:?}",
                t.shape()
            ))),
            None => Err(format_err(format!("missing tensor {name}"))),
        }
    }

    fn finish(mut self) -> Result<()> {
        match self.tensors.next() {
            Some((n, _)) => Err(format_err(format!("unexpected extra tensor {n}"))),
            None => Ok(()),
        }
    }
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    let v = meta.get(key).ok_or_else(|| format_err(format!("manifest meta lacks {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| format_err(format!("manifest meta {key:?}: {e}")))
}

fn head_tensors(out: &mut Vec<(String, Tensor)>, prefix: &str, head: &ClassifierHead) {
    out.push((format!("{prefix}.weight"), head.weight.clone()));
    out.push((format!("{prefix}.bias"), head.bias.clone()));
}

fn read_head(r: &mut Reader, prefix: &str, shape: [usize; 2]) -> Result<ClassifierHead> {
    Ok(ClassifierHead {
        weight: r.take(&format!("{prefix}.weight"), &shape)?,
        bias: r.take(&format!("{prefix}.bias"), &[shape[0]])?,
    })
}

pub fn model_checkpoint(model: &RecastModel) -> Result<Checkpoint> {
    model.validate()?;
    let mut tensors = Vec::new();
    for (g, bank) in model.banks.iter().enumerate() {
        for (i, t) in bank.templates.iter().enumerate() {
            tensors.push((format!("bank.{}.template.{}", g + 1, i + 1), t.clone()));
        }
    }
    for (l, mods) in model.coefficients.iter().enumerate() {
        for (m, c) in mods.iter().enumerate() {
            tensors.push((format!("coeff.{}.{}", l + 1, m + 1), c.values.clone()));
        }
    }
    for (l, mods) in model.biases.iter().enumerate() {
        for (m, b) in mods.iter().enumerate() {
            tensors.push((format!("bias.{}.{}", l + 1, m + 1), b.clone()));
        }
    }
    let mut heads = Vec::new();
    for (task, head) in &model.heads {
        heads.push(json!({ "task": task, "classes": head.classes(), "features": head.features() }));
        head_tensors(&mut tensors, &format!("head.{task}"), head);
    }
    Ok(Checkpoint {
        kind: "model".into(),
        meta: json!({ "config": model.config, "heads": heads }),
        tensors,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    task: usize,
    classes: usize,
    features: usize,
}

pub fn model_from_checkpoint(ckpt: Checkpoint) -> Result<RecastModel> {
    if ckpt.kind != "model" {
        return Err(format_err(format!("expected a model checkpoint, found {}", ckpt.kind)));
    }
    let config: RecastConfig = meta_field(&ckpt.meta, "config")?;
    config.validate()?;
    let heads_meta: Vec<HeadMeta> = meta_field(&ckpt.meta, "heads")?;
    let mut r = Reader::new(ckpt);
    let mut banks = Vec::with_capacity(config.groups);
    for g in 0..config.groups {
        let shape = config.group_shape(g);
        let templates = (0..config.templates)
            .map(|i| r.take(&format!("bank.{}.template.{}", g + 1, i + 1), &shape))
            .collect::<Result<Vec<_>>>()?;
        banks.push(TemplateBank::new(g + 1, templates)?);
    }
    let mut coefficients = Vec::with_capacity(config.layer_count());
    for (l, mods) in config.layers.iter().enumerate() {
        let row = (0..mods.len())
            .map(|m| {
                let v = r.take(&format!("coeff.{}.{}", l + 1, m + 1), &[config.coeff_sets, config.templates])?;
                CoefficientSet::new(l, m, v)
            })
            .collect::<Result<Vec<_>>>()?;
        coefficients.push(row);
    }
    let mut biases = Vec::with_capacity(config.layer_count());
    for (l, mods) in config.layers.iter().enumerate() {
        let row = mods
            .iter()
            .enumerate()
            .map(|(m, k)| r.take(&format!("bias.{}.{}", l + 1, m + 1), &[k.bias_len()]))
            .collect::<Result<Vec<_>>>()?;
        biases.push(row);
    }
    let mut heads = std::collections::BTreeMap::new();
    for h in heads_meta {
        let head = read_head(&mut r, &format!("head.{}", h.task), [h.classes, h.features])?;
        if heads.insert(h.task, head).is_some() {
            return Err(format_err(format!("duplicate head for task {}", h.task)));
        }
    }
    r.finish()?;
    let model = RecastModel {
        config,
        banks,
        coefficients,
        biases,
        heads,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &RecastModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(&model_checkpoint(model)?)?)
}

pub fn load_model(path: &Path) -> Result<RecastModel> {
    model_from_checkpoint(read_kind(path, "model")?)
}

pub fn snapshot_checkpoint(s: &TaskSnapshot) -> Result<Checkpoint> {
    let layout: Vec<usize> = s.coefficients.iter().map(Vec::len).collect();
    let shape = s
        .coefficients
        .iter()
        .flatten()
        .next()
        .map(|t| t.shape().to_vec())
        .ok_or_else(|| format_err("snapshot holds no coefficients"))?;
    let mut tensors = Vec::new();
    for (l, mods) in s.coefficients.iter().enumerate() {
        for (m, c) in mods.iter().enumerate() {
            if c.shape() != shape.as_slice() {
                return Err(RecastError::Topology(format!(
                    "coefficient {}.{} has shape {:?}, expected {shape:?}",
                    l + 1,
                    m + 1,
                    c.shape()
                )));
            }
            tensors.push((format!("coeff.{}.{}", l + 1, m + 1), c.clone()));
        }
    }
    head_tensors(&mut tensors, "head", &s.head);
    tensors.push((
        "accuracy".into(),
        Tensor::new(&[2], vec![s.test_accuracy, s.val_accuracy])?,
    ));
    Ok(Checkpoint {
        kind: "snapshot".into(),
        meta: json!({
            "task": s.task,
            "mode": s.mode,
            "modules_per_layer": layout,
            "coeff_shape": shape,
            "classes": s.head.classes(),
            "features": s.head.features(),
            "trainable_params": s.trainable_params,
        }),
        tensors,
    })
}

pub fn snapshot_from_checkpoint(ckpt: Checkpoint) -> Result<TaskSnapshot> {
    if ckpt.kind != "snapshot" {
        return Err(format_err(format!("expected a snapshot checkpoint, found {}", ckpt.kind)));
    }
    let task: usize = meta_field(&ckpt.meta, "task")?;
    let mode: TrainMode = meta_field(&ckpt.meta, "mode")?;
    let layout: Vec<usize> = meta_field(&ckpt.meta, "modules_per_layer")?;
    let shape: Vec<usize> = meta_field(&ckpt.meta, "coeff_shape")?;
    let classes: usize = meta_field(&ckpt.meta, "classes")?;
    let features: usize = meta_field(&ckpt.meta, "features")?;
    let trainable_params: usize = meta_field(&ckpt.meta, "trainable_params")?;
    let mut r = Reader::new(ckpt);
    let coefficients = layout
        .iter()
        .enumerate()
        .map(|(l, &mods)| {
            (0..mods)
                .map(|m| r.take(&format!("coeff.{}.{}", l + 1, m + 1), &shape))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let head = read_head(&mut r, "head", [classes, features])?;
    let acc = r.take("accuracy", &[2])?;
    r.finish()?;
    Ok(TaskSnapshot {
        task,
        mode,
        coefficients,
        head,
        test_accuracy: acc.data()[0],
        val_accuracy: acc.data()[1],
        trainable_params,
    })
}

pub fn save_snapshot(s: &TaskSnapshot, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(&snapshot_checkpoint(s)?)?)
}

pub fn load_snapshot(path: &Path) -> Result<TaskSnapshot> {
    snapshot_from_checkpoint(read_kind(path, "snapshot")?)
}

pub fn teacher_checkpoint(t: &TeacherModel) -> Result<Checkpoint> {
    let mut tensors = Vec::new();
    let mut shapes = Vec::new();
    for (l, mods) in t.layers.iter().enumerate() {
        let mut row = Vec::new();
        for (m, module) in mods.iter().enumerate() {
            row.push(module.weight.shape().to_vec());
            tensors.push((format!("layer.{}.{}.weight", l + 1, m + 1), module.weight.clone()));
            tensors.push((format!("layer.{}.{}.bias", l + 1, m + 1), module.bias.clone()));
        }
        shapes.push(row);
    }
    let head = t.head.as_ref().map(|h| [h.classes(), h.features()]);
    if let Some(h) = &t.head {
        head_tensors(&mut tensors, "head", h);
    }
    Ok(Checkpoint {
        kind: "teacher".into(),
        meta: json!({ "activation": t.activation, "weight_shapes": shapes, "head": head }),
        tensors,
    })
}

pub fn teacher_from_checkpoint(ckpt: Checkpoint) -> Result<TeacherModel> {
    if ckpt.kind != "teacher" {
        return Err(format_err(format!("expected a teacher checkpoint, found {}", ckpt.kind)));
    }
    let activation: Activation = meta_field(&ckpt.meta, "activation")?;
    let shapes: Vec<Vec<Vec<usize>>> = meta_field(&ckpt.meta, "weight_shapes")?;
    let head_shape: Option<[usize; 2]> = meta_field(&ckpt.meta, "head")?;
    let mut r = Reader::new(ckpt);
    let mut layers = Vec::with_capacity(shapes.len());
    for (l, mods) in shapes.iter().enumerate() {
        let mut row = Vec::with_capacity(mods.len());
        for (m, shape) in mods.iter().enumerate() {
            let out = *shape.first().ok_or_else(|| format_err("empty weight shape"))?;
            row.push(TeacherModule {
                weight: r.take(&format!("layer.{}.{}.weight", l + 1, m + 1), shape)?,
                bias: r.take(&format!("layer.{}.{}.bias", l + 1, m + 1), &[out])?,
            });
        }
        layers.push(row);
    }
    let head = head_shape.map(|s| read_head(&mut r, "head", s)).transpose()?;
    r.finish()?;
    Ok(TeacherModel {
        activation,
        layers,
        head,
    })
}

pub fn save_teacher(t: &TeacherModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(&teacher_checkpoint(t)?)?)
}

pub fn load_teacher(path: &Path) -> Result<TeacherModel> {
    teacher_from_checkpoint(read_kind(path, "teacher")?)
}
