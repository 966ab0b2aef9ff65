//! Bank diversity, singular-value entropy and coefficient similarity.

use serde::Serialize;

use crate::error::{RecastError, Result};
use crate::model::{RecastModel, TemplateBank};
use crate::tensor::Tensor;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const SVD_MAX_DIM: usize = 512;

/// Singular values of a 2-D tensor in descending order (one-sided Jacobi).
pub fn svd_small(a: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = a.dims2()?;
    if rows > SVD_MAX_DIM || cols > SVD_MAX_DIM {
        return Err(RecastError::InvalidArgument(format!(
            "svd_small supports at most {SVD_MAX_DIM}×{SVD_MAX_DIM}, got {rows}×{cols}"
        )));
    }
    // Orthogonalize the columns of the taller orientation.
    let (m, n, mut u) = if rows >= cols {
        (rows, cols, columns(a.data(), rows, cols))
    } else {
        (cols, rows, columns(a.transpose()?.data(), cols, rows))
    };

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = gram(&u[p], &u[q]);
                if gamma == 0.0 {
                    continue;
                }
                let scale = (alpha * beta).sqrt();
                if scale > 0.0 {
                    off = off.max(gamma.abs() / scale);
                }
                if scale == 0.0 || gamma.abs() <= JACOBI_TOL * scale {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = u.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if off <= JACOBI_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(RecastError::Numerical(format!(
            "Jacobi SVD did not converge within {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }
    debug_assert!(u.iter().all(|c| c.len() == m));
    let mut sigma: Vec<f64> = u.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(sigma)
}

fn columns(data: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..cols).map(|j| (0..rows).map(|i| data[i * cols + j]).collect()).collect()
}

fn gram(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    let mut g = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        a += xi * xi;
        b += yi * yi;
        g += xi * yi;
    }
    (a, b, g)
}

/// `1/(n(n−1)) · Σ_{i<j} ‖T_i − T_j‖_F`
pub fn frobenius_diversity(bank: &TemplateBank) -> Result<f64> {
    let n = bank.len();
    if n < 2 {
        return Err(RecastError::UndefinedMetric(format!(
            "Frobenius diversity needs at least 2 templates, bank has {n}"
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += bank.templates[i].sub(&bank.templates[j])?.frobenius_norm();
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Shannon entropy (natural log) of one matrix's normalized singular values.
pub fn template_entropy(t: &Tensor) -> Result<f64> {
    let sigma = svd_small(&t.matricize())?;
    let total: f64 = sigma.iter().sum();
    if total == 0.0 {
        return Err(RecastError::UndefinedMetric("entropy of an all-zero template".into()));
    }
    Ok(-sigma
        .iter()
        .map(|s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>())
}

/// Mean singular-value entropy over the bank.
pub fn sv_entropy(bank: &TemplateBank) -> Result<f64> {
    if bank.is_empty() {
        return Err(RecastError::UndefinedMetric("entropy of an empty bank".into()));
    }
    let mut total = 0.0;
    for t in &bank.templates {
        total += template_entropy(t)?;
    }
    Ok(total / bank.len() as f64)
}

fn layer_coefficients(model: &RecastModel, l: usize) -> Vec<f64> {
    model.coefficients[l].iter().flat_map(|c| c.values.data().iter().copied()).collect()
}

/// Pairwise cosine similarity of per-layer coefficient vectors within a
/// group (zero-based). Rows follow the group's layer order.
pub fn coefficient_similarity(model: &RecastModel, group: usize) -> Result<Vec<Vec<f64>>> {
    if group >= model.config.groups {
        return Err(RecastError::InvalidArgument(format!(
            "group {} out of range (G = {})",
            group + 1,
            model.config.groups
        )));
    }
    let layers = model.config.layers_in_group(group);
    if layers.len() < 2 {
        return Err(RecastError::UndefinedMetric(format!(
            "coefficient similarity needs at least 2 layers in group {}",
            group + 1
        )));
    }
    let vecs: Vec<Vec<f64>> = layers.iter().map(|&l| layer_coefficients(model, l)).collect();
    let norms: Vec<f64> = vecs.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(RecastError::UndefinedMetric(format!(
            "layer {} has an all-zero coefficient vector",
            layers[i] + 1
        )));
    }
    if vecs.iter().any(|v| v.len() != vecs[0].len()) {
        return Err(RecastError::Topology(format!(
            "layers of group {} have different coefficient counts",
            group + 1
        )));
    }
    let k = layers.len();
    let mut sim = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
            let s = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    Ok(sim)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupDiagnostics {
    /// One-based group index.
    pub group: usize,
    pub layers: Vec<usize>,
    pub avg_frobenius: Option<f64>,
    pub avg_entropy: f64,
    /// `None` when the group has a single layer.
    pub similarity: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub groups: Vec<GroupDiagnostics>,
}

/// All metrics for every group. Diversity is omitted for single-template
/// banks and similarity for single-layer groups.
pub fn diagnose(model: &RecastModel) -> Result<DiagnosticsReport> {
    model.validate()?;
    let mut groups = Vec::with_capacity(model.config.groups);
    for (g, bank) in model.banks.iter().enumerate() {
        let layers = model.config.layers_in_group(g);
        groups.push(GroupDiagnostics {
            group: g + 1,
            avg_frobenius: if bank.len() >= 2 { Some(frobenius_diversity(bank)?) } else { None },
            avg_entropy: sv_entropy(bank)?,
            similarity: if layers.len() >= 2 { Some(coefficient_similarity(model, g)?) } else { None },
            layers: layers.iter().map(|l| l + 1).collect(),
        });
    }
    Ok(DiagnosticsReport { groups })
}
