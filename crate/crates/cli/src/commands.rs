use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use recast_core::config::RunConfig;
use recast_core::diagnostics::diagnose;
use recast_core::integrate::{export_dense, Adapter, AdapterKind};
use recast_core::mimicry::{run_mimicry, LossKind, MimicryConfig};
use recast_core::persist::{load_model, load_teacher, save_model, save_snapshot, save_teacher, write_atomic};
use recast_core::til::{make_task_suite, pretrain_teacher, run_sequence, trainable_params, ParamBudget};
use recast_core::RecastModel;

use crate::{CliError, CliResult, LossArg};

pub(crate) struct MimicryOverrides {
    pub loss: Option<LossArg>,
    pub sigma: Option<f64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
}

impl MimicryOverrides {
    pub fn apply(self, cfg: &mut RunConfig) -> CliResult {
        let m = &mut cfg.mimicry;
        match self.loss {
            Some(LossArg::Smoothl1) => m.loss = LossKind::SmoothL1 { beta: 1.0 },
            Some(LossArg::Mse) => m.loss = LossKind::Mse,
            None => {}
        }
        if let Some(s) = self.sigma {
            m.sigma = s;
            m.noise_enabled = s > 0.0;
        }
        if let Some(e) = self.epochs {
            m.max_epochs = e;
        }
        if let Some(lr) = self.lr {
            m.learning_rate = lr;
        }
        m.validate()?;
        Ok(())
    }
}

/// Serializes rows to CSV and writes them atomically.
pub(crate) fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::usage(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} not found: {}", path.display())))
    }
}

pub(crate) fn pretrain(cfg: &RunConfig, out: &Path, stdout: &mut dyn Write) -> CliResult {
    let suite = make_task_suite(&cfg.suite)?;
    let (teacher, acc) = pretrain_teacher(&suite[0], &cfg.model, &cfg.pretrain)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_teacher(&teacher, out)?;
    writeln!(stdout, "train_accuracy={acc}")?;
    Ok(())
}

pub(crate) fn reconstruct(
    cfg: &RunConfig,
    teacher_path: &Path,
    out: &Path,
    threads: usize,
    stdout: &mut dyn Write,
) -> CliResult {
    require_file(teacher_path, "teacher checkpoint")?;
    let teacher = load_teacher(teacher_path)?;
    teacher.check_topology(&cfg.model)?;
    let mimicry = MimicryConfig {
        threads,
        ..cfg.mimicry.clone()
    };
    mimicry.validate()?;
    let mut model = RecastModel::init(cfg.model.clone(), cfg.seed)?;

    fs::create_dir_all(out)?;
    let report = run_mimicry(&teacher, &mut model, &mimicry, Some(stdout))?;
    if let Some(head) = &teacher.head {
        model.heads.insert(0, head.clone());
    }
    save_model(&model, &out.join("model.rcst"))?;
    let rows: Vec<Vec<String>> = report
        .modules
        .iter()
        .map(|m| {
            vec![
                (m.layer + 1).to_string(),
                (m.module + 1).to_string(),
                m.loss.to_string(),
                m.cosine_similarity.to_string(),
            ]
        })
        .collect();
    write_csv(&out.join("reconstruction.csv"), &["layer", "module", "loss", "cosine_sim"], &rows)?;
    let curve: Vec<Vec<String>> = report
        .loss_history
        .iter()
        .enumerate()
        .map(|(e, v)| vec![(e + 1).to_string(), v.to_string()])
        .collect();
    write_csv(&out.join("loss_curve.csv"), &["epoch", "total_loss"], &curve)?;
    eprintln!("reconstruction finished in {:.2} s", report.wall_seconds);

    let failures: Vec<String> = report
        .modules
        .iter()
        .filter(|m| !(m.cosine_similarity >= cfg.similarity_threshold))
        .map(|m| {
            format!(
                "layer {} module {}: cosine_sim={} < {}",
                m.layer + 1,
                m.module + 1,
                m.cosine_similarity,
                cfg.similarity_threshold
            )
        })
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::numerical(format!(
            "similarity below threshold:\n{}",
            failures.join("\n")
        )))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub(crate) fn diag(model_path: &Path, out: &Path, stdout: &mut dyn Write) -> CliResult {
    require_file(model_path, "model checkpoint")?;
    let model = load_model(model_path)?;
    let report = diagnose(&model)?;
    fs::create_dir_all(out)?;
    let rows: Vec<Vec<String>> = report
        .groups
        .iter()
        .map(|g| {
            let layers: Vec<String> = g.layers.iter().map(usize::to_string).collect();
            vec![g.group.to_string(), layers.join(";"), opt(g.avg_frobenius), g.avg_entropy.to_string()]
        })
        .collect();
    write_csv(&out.join("diagnostics.csv"), &["group", "layers", "frobenius", "entropy"], &rows)?;
    let mut sim = Vec::new();
    for g in &report.groups {
        let Some(s) = &g.similarity else { continue };
        for (i, row) in s.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                sim.push(vec![g.group.to_string(), g.layers[i].to_string(), g.layers[j].to_string(), v.to_string()]);
            }
        }
    }
    write_csv(&out.join("similarity.csv"), &["group", "layer_i", "layer_j", "similarity"], &sim)?;
    writeln!(stdout, "groups={}", report.groups.len())?;
    Ok(())
}

pub(crate) fn til(cfg: &RunConfig, model_path: &Path, out: &Path, stdout: &mut dyn Write) -> CliResult {
    require_file(model_path, "model checkpoint")?;
    let mut model = load_model(model_path)?;
    let suite = make_task_suite(&cfg.suite)?;
    // Task 0 is the pretraining task; the sequence is everything after it.
    let tasks = &suite[1..];
    cfg.til.validate(model.config.layer_count())?;
    let (_, features) = model.feature_chain()?;
    let head_params = features * cfg.suite.classes + cfg.suite.classes;
    let required = trainable_params(&model, cfg.mode, &cfg.til, head_params)?;
    let budget = cfg.budget.map(|limit| ParamBudget { limit }).unwrap_or_else(ParamBudget::unlimited);
    budget.check(required)?;

    let report = run_sequence(&mut model, tasks, budget, cfg.mode, &cfg.til)?;
    fs::create_dir_all(out.join("snapshots"))?;
    for s in &report.snapshots {
        save_snapshot(s, &out.join("snapshots").join(format!("task_{}.rcst", s.task)))?;
    }
    let mut header = vec!["after_task".to_string()];
    header.extend(report.tasks.iter().map(|t| format!("task_{t}")));
    let rows: Vec<Vec<String>> = report
        .accuracy
        .iter()
        .zip(&report.tasks)
        .map(|(row, t)| {
            let mut r = vec![t.to_string()];
            r.extend((0..report.tasks.len()).map(|j| row.get(j).map(f64::to_string).unwrap_or_default()));
            r
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&out.join("accuracy.csv"), &header_refs, &rows)?;

    let per_task: Vec<Vec<String>> = report
        .snapshots
        .iter()
        .map(|s| {
            vec![
                s.task.to_string(),
                s.mode.to_string(),
                s.test_accuracy.to_string(),
                s.val_accuracy.to_string(),
                (s.trainable_params - s.head.param_count()).to_string(),
                s.head.param_count().to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("tasks.csv"),
        &["task", "mode", "test_accuracy", "val_accuracy", "task_params", "head_params"],
        &per_task,
    )?;
    let task_params = required - head_params;
    let summary = format!("avg_top1={} task_params={task_params}\n", report.average_top1);
    write_atomic(&out.join("summary.txt"), summary.as_bytes())?;
    stdout.write_all(summary.as_bytes())?;
    Ok(())
}

pub(crate) fn combine(cfg: &RunConfig, model_path: &Path, out: &Path, stdout: &mut dyn Write) -> CliResult {
    require_file(model_path, "model checkpoint")?;
    let model = load_model(model_path)?;
    let kind = cfg.adapter.unwrap_or(AdapterKind::Lora { rank: 2 });
    kind.validate()?;
    let mut adapters = BTreeMap::new();
    for (l, m, k) in model.config.modules() {
        let shape = k.weight_shape();
        let cols = shape[1..].iter().product();
        let seed = cfg.seed.wrapping_add((l * 1000 + m) as u64);
        adapters.insert((l, m), Adapter::init(kind, shape[0], cols, seed)?);
    }
    let dense = export_dense(&model, &adapters)?;
    let mut rows = Vec::new();
    for (&(l, m), ad) in &adapters {
        let base = model.weight(l, m)?;
        let merged = &dense.layers[l][m].weight;
        let delta = merged.sub(&base)?.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        rows.push(vec![
            (l + 1).to_string(),
            (m + 1).to_string(),
            ad.param_count().to_string(),
            base.numel().to_string(),
            delta.to_string(),
        ]);
    }
    fs::create_dir_all(out)?;
    save_teacher(&dense, &out.join("dense.rcst"))?;
    write_csv(
        &out.join("adapters.csv"),
        &["layer", "module", "adapter_params", "dense_params", "max_abs_delta"],
        &rows,
    )?;
    let total: usize = adapters.values().map(Adapter::param_count).sum();
    writeln!(stdout, "adapter={kind:?} adapter_params={total}")?;
    Ok(())
}
