use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recast_core::mimicry::{TeacherModel, TeacherModule};
use recast_core::persist::{
    decode_checkpoint, encode_checkpoint, load_model, load_snapshot, load_teacher, model_checkpoint, save_model,
    save_snapshot, save_teacher, snapshot_checkpoint,
};
use recast_core::til::{restore, TaskSnapshot, TrainMode};
use recast_core::{Activation, ClassifierHead, ModuleKind, RecastConfig, RecastError, RecastModel, Tensor};

fn model_with_heads(config: RecastConfig, seed: u64) -> RecastModel {
    let mut m = RecastModel::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in m.biases.iter_mut().flatten() {
        *b = Tensor::from_fn(b.shape(), |_| rng.random_range(-1.0..1.0));
    }
    let features = m.config.layers.last().unwrap()[0].bias_len();
    m.heads.insert(0, ClassifierHead::init(features, 3, 1));
    m.heads.insert(2, ClassifierHead::init(features, 5, 2));
    m
}

fn snapshot_for(model: &RecastModel, head: ClassifierHead) -> TaskSnapshot {
    TaskSnapshot {
        task: 1,
        mode: TrainMode::CoefficientsHead,
        coefficients: model
            .coefficients
            .iter()
            .map(|mods| mods.iter().map(|c| c.values.scale(1.5)).collect())
            .collect(),
        head,
        test_accuracy: 0.1 + 0.2,
        val_accuracy: 2.0 / 3.0,
        trainable_params: 24 + 51,
    }
}

#[test]
fn model_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = model_with_heads(RecastConfig::uniform(6, 1, 16, 3, 2, 2), 4);
    let (a, b) = (dir.path().join("a.rcst"), dir.path().join("b.rcst"));
    save_model(&model, &a).unwrap();
    let loaded = load_model(&a).unwrap();
    assert_eq!(loaded, model);
    save_model(&loaded, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn round_trip_covers_conv_and_attention() {
    let config = RecastConfig {
        groups: 2,
        templates: 3,
        coeff_sets: 2,
        activation: Activation::Gelu,
        layers: vec![
            vec![ModuleKind::conv(4, 2, 3), ModuleKind::conv(4, 2, 3)],
            vec![ModuleKind::AttentionQkv { d: 5 }],
        ],
    };
    let model = RecastModel::init(config, 1).unwrap();
    let ckpt = model_checkpoint(&model).unwrap();
    let back = recast_core::persist::model_from_checkpoint(decode_checkpoint(&encode_checkpoint(&ckpt).unwrap()).unwrap())
        .unwrap();
    assert_eq!(back, model);
}

#[test]
fn manifest_counts_every_tensor() {
    let model = model_with_heads(RecastConfig::uniform(6, 2, 4, 3, 2, 2), 0);
    let ckpt = model_checkpoint(&model).unwrap();
    let (g, n, modules, heads) = (3, 2, 12, 2);
    assert_eq!(ckpt.tensors.len(), g * n + modules + modules + 2 * heads);
}

#[test]
fn corrupted_magic_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rcst");
    save_model(&model_with_heads(RecastConfig::uniform(2, 1, 3, 1, 2, 2), 0), &path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes[1] = b'x';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_model(&path), Err(RecastError::Format(_))));
}

#[test]
fn wrong_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rcst");
    let model = model_with_heads(RecastConfig::uniform(2, 1, 3, 1, 2, 2), 0);
    save_model(&model, &path).unwrap();
    assert!(matches!(load_snapshot(&path), Err(RecastError::Format(_))));
    assert!(matches!(load_teacher(&path), Err(RecastError::Format(_))));
}

#[test]
fn nan_model_refuses_to_save() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = model_with_heads(RecastConfig::uniform(2, 1, 3, 1, 2, 2), 0);
    let head = model.heads.get_mut(&0).unwrap();
    head.bias = Tensor::from_fn(&[3], |i| if i == 1 { f64::NAN } else { 0.0 });
    let path = dir.path().join("nan.rcst");
    assert!(matches!(save_model(&model, &path), Err(RecastError::Format(_))));
    assert!(!path.exists());
}

#[test]
fn snapshot_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = model_with_heads(RecastConfig::uniform(6, 1, 16, 3, 2, 2), 1);
    let snap = snapshot_for(&model, ClassifierHead::init(16, 3, 9));
    let path = dir.path().join("s.rcst");
    save_snapshot(&snap, &path).unwrap();
    let back = load_snapshot(&path).unwrap();
    assert_eq!(back, snap);
    assert_eq!(back.test_accuracy.to_bits(), snap.test_accuracy.to_bits());
}

#[test]
fn snapshot_size_is_independent_of_width() {
    let head = ClassifierHead::init(8, 3, 0);
    let mut sizes = Vec::new();
    for d in [8, 32, 128] {
        let model = RecastModel::init(RecastConfig::uniform(6, 1, d, 3, 2, 2), 0).unwrap();
        let snap = snapshot_for(&model, head.clone());
        let ckpt = snapshot_checkpoint(&snap).unwrap();
        // Coefficients + head + the two recorded accuracies.
        assert_eq!(ckpt.payload_len(), 8 * (6 * 2 * 2 + head.param_count() + 2));
        sizes.push(encode_checkpoint(&ckpt).unwrap().len());
    }
    assert!(sizes.windows(2).all(|w| w[0] == w[1]), "{sizes:?}");

    let more_layers = RecastModel::init(RecastConfig::uniform(12, 2, 8, 3, 2, 2), 0).unwrap();
    let ckpt = snapshot_checkpoint(&snapshot_for(&more_layers, head.clone())).unwrap();
    assert_eq!(ckpt.payload_len(), 8 * (12 * 2 * 2 * 2 + head.param_count() + 2));
}

#[test]
fn snapshot_is_tiny_relative_to_a_wide_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = RecastModel::init(RecastConfig::uniform(6, 1, 768, 3, 2, 2), 0).unwrap();
    let (mp, sp) = (dir.path().join("m.rcst"), dir.path().join("s.rcst"));
    save_model(&model, &mp).unwrap();
    save_snapshot(&snapshot_for(&model, ClassifierHead::init(768, 3, 0)), &sp).unwrap();
    let (m, s) = (fs::metadata(&mp).unwrap().len(), fs::metadata(&sp).unwrap().len());
    assert!(s * 1000 < m, "snapshot {s} B vs model {m} B");
}

#[test]
fn snapshot_into_mismatched_model_is_topology_error() {
    let model = RecastModel::init(RecastConfig::uniform(6, 1, 16, 3, 2, 2), 0).unwrap();
    let snap = snapshot_for(&model, ClassifierHead::init(16, 3, 0));
    let mut other = RecastModel::init(RecastConfig::uniform(4, 1, 16, 2, 2, 2), 0).unwrap();
    assert!(matches!(restore(&mut other, &snap), Err(RecastError::Topology(_))));
    let mut narrow = RecastModel::init(RecastConfig::uniform(6, 1, 8, 3, 2, 2), 0).unwrap();
    assert!(matches!(restore(&mut narrow, &snap), Err(RecastError::Topology(_))));
    let mut wrong_n = RecastModel::init(RecastConfig::uniform(6, 1, 16, 3, 3, 2), 0).unwrap();
    assert!(matches!(restore(&mut wrong_n, &snap), Err(RecastError::Topology(_))));
}

#[test]
fn teacher_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let teacher = TeacherModel {
        activation: Activation::Relu,
        layers: vec![
            vec![TeacherModule {
                weight: Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0)),
                bias: Tensor::from_fn(&[4], |_| rng.random_range(-1.0..1.0)),
            }],
            vec![TeacherModule {
                weight: Tensor::from_fn(&[2, 4], |_| rng.random_range(-1.0..1.0)),
                bias: Tensor::zeros(&[2]),
            }],
        ],
        head: Some(ClassifierHead::init(2, 3, 0)),
    };
    let path = dir.path().join("t.rcst");
    save_teacher(&teacher, &path).unwrap();
    assert_eq!(load_teacher(&path).unwrap(), teacher);
    let headless = TeacherModel { head: None, ..teacher };
    save_teacher(&headless, &path).unwrap();
    assert_eq!(load_teacher(&path).unwrap(), headless);
}

#[test]
fn checked_in_fuzz_seeds_stay_valid() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus");
    let read = |t: &str, n: &str| fs::read(root.join(t).join(n)).unwrap();
    let model = recast_core::persist::model_from_checkpoint(decode_checkpoint(&read("load_model", "model.rcst")).unwrap());
    assert!(model.is_ok());
    assert!(recast_core::persist::model_from_checkpoint(decode_checkpoint(&read("load_model", "conv_qkv.rcst")).unwrap()).is_ok());
    assert!(recast_core::persist::snapshot_from_checkpoint(decode_checkpoint(&read("load_snapshot", "snapshot.rcst")).unwrap()).is_ok());
    assert!(recast_core::persist::teacher_from_checkpoint(decode_checkpoint(&read("load_teacher", "teacher.rcst")).unwrap()).is_ok());
    for n in ["empty.json", "default.json", "adapter.json"] {
        let text = String::from_utf8(read("run_config", n)).unwrap();
        recast_core::config::parse_run_config(&text).unwrap();
    }
}

#[test]
fn documented_example_bytes() {
    let teacher = TeacherModel {
        activation: Activation::Relu,
        layers: vec![vec![TeacherModule {
            weight: Tensor::new(&[1, 2], vec![0.5, -1.0]).unwrap(),
            bias: Tensor::new(&[1], vec![0.25]).unwrap(),
        }]],
        head: None,
    };
    let bytes = encode_checkpoint(&recast_core::persist::teacher_checkpoint(&teacher).unwrap()).unwrap();
    let manifest = r#"{"kind":"teacher","meta":{"activation":"relu","head":null,"weight_shapes":[[[1,2]]]},"tensors":[{"name":"layer.1.1.weight","shape":[1,2],"offset":0},{"name":"layer.1.1.bias","shape":[1],"offset":16}]}"#;
    let mut expect = b"RCST".to_vec();
    expect.extend(1u32.to_le_bytes());
    expect.extend((manifest.len() as u64).to_le_bytes());
    expect.extend(manifest.as_bytes());
    expect.extend([0, 0, 0, 0, 0, 0, 0xe0, 0x3f, 0, 0, 0, 0, 0, 0, 0xf0, 0xbf, 0, 0, 0, 0, 0, 0, 0xd0, 0x3f]);
    assert_eq!(manifest.len(), 0xc8);
    assert_eq!(bytes.len(), 240);
    assert_eq!(bytes, expect);
}
