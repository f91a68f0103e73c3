//! Training objectives: the temperature-scaled contrastive loss over pooled
//! stream vectors, the masked reconstruction loss, target patch
//! normalization, their weighted combination, and batch matching accuracy.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::graph::{Graph, NodeId};
use crate::mask::MaskPlan;
use crate::tensor::Tensor;

/// Epsilon inside the per-patch normalization denominator.
pub const PATCH_NORM_EPS: f64 = 1e-6;

/// Loss wiring and constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_c: f64,
    /// Normalize reconstruction targets per patch.
    pub target_norm: bool,
    /// Average both contrastive directions instead of visual→audio only.
    pub symmetric: bool,
    /// Sum each patch's squared errors instead of averaging them.
    pub patch_sum: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.05,
            lambda_c: 0.01,
            target_norm: true,
            symmetric: false,
            patch_sum: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(CoreError::invalid("tau must be positive"));
        }
        if self.lambda_c < 0.0 {
            return Err(CoreError::invalid("lambda_c must be non-negative"));
        }
        Ok(())
    }

    /// Contrastive weight after variant gating (reconstruction-only variants
    /// force λ_c to 0).
    pub fn effective_lambda_c(&self, variant: crate::model::Variant) -> f64 {
        if variant.has_contrastive() {
            self.lambda_c
        } else {
            0.0
        }
    }
}

/// Pooled single-modality vectors for one batch, one row per sample.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    pub c_a: Tensor,
    pub c_v: Tensor,
}

impl BatchEmbeddings {
    pub fn new(c_a: Tensor, c_v: Tensor) -> Result<Self> {
        let (na, da) = c_a.dims2()?;
        let (nv, dv) = c_v.dims2()?;
        if na != nv || da != dv {
            return Err(CoreError::ShapeMismatch {
                op: "batch_embeddings",
                lhs: c_a.shape().to_vec(),
                rhs: c_v.shape().to_vec(),
            });
        }
        Ok(BatchEmbeddings { c_a, c_v })
    }

    pub fn len(&self) -> usize {
        self.c_a.dims2().map(|(n, _)| n).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn normalized_rows(t: &Tensor, label: &str) -> Result<Vec<Vec<f64>>> {
    let (n, d) = t.dims2()?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let row = &t.data()[i * d..(i + 1) * d];
        let norm = fmath::sqrt(row.iter().map(|v| v * v).sum());
        if norm <= 0.0 {
            return Err(CoreError::invalid(format!(
                "zero-norm {label} embedding for sample {i}"
            )));
        }
        rows.push(row.iter().map(|v| v / norm).collect());
    }
    Ok(rows)
}

/// Cosine similarities `s[i][j]` between `c_v` row i and `c_a` row j.
pub fn similarity_matrix(be: &BatchEmbeddings) -> Result<Tensor> {
    let (n, _) = be.c_a.dims2()?;
    let va = normalized_rows(&be.c_v, "visual")?;
    let aa = normalized_rows(&be.c_a, "audio")?;
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = va[i].iter().zip(&aa[j]).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![n, n], s)
}

fn nce_direction(s: &Tensor, tau: f64, transpose: bool) -> f64 {
    let n = s.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n)
            .map(|j| {
                let v = if transpose { s.at(j, i) } else { s.at(i, j) };
                v / tau
            })
            .collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| fmath::exp(v - m)).sum();
        total += (row[i] - m) - fmath::ln(denom);
    }
    -total / n as f64
}

/// Temperature-scaled batch contrastive loss,
/// `−(1/N)·Σ_i log[exp(s_ii/τ) / Σ_k exp(s_ik/τ)]`,
/// visual→audio by default, both directions averaged when `symmetric`.
pub fn contrastive_loss(be: &BatchEmbeddings, tau: f64, symmetric: bool) -> Result<f64> {
    if be.len() < 2 {
        return Err(CoreError::invalid("contrastive loss needs at least 2 samples"));
    }
    if !(tau > 0.0) {
        return Err(CoreError::invalid("tau must be positive"));
    }
    let s = similarity_matrix(be)?;
    let forward = nce_direction(&s, tau, false);
    Ok(if symmetric {
        0.5 * (forward + nce_direction(&s, tau, true))
    } else {
        forward
    })
}

/// Fraction of rows whose highest similarity is the matched pair (ties go to
/// the lowest index, so a tie with an earlier column does not count).
pub fn matching_accuracy(be: &BatchEmbeddings) -> Result<f64> {
    if be.len() < 2 {
        return Err(CoreError::invalid("matching accuracy needs at least 2 samples"));
    }
    let s = similarity_matrix(be)?;
    let n = s.shape()[0];
    let mut hits = 0;
    for i in 0..n {
        let mut best = 0;
        for j in 1..n {
            if s.at(i, j) > s.at(i, best) {
                best = j;
            }
        }
        if best == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Per-patch standardization: subtract the patch mean, divide by
/// `sqrt(var + 1e-6)` (population variance). Rows are patches.
pub fn patch_normalize(patches: &Tensor) -> Result<Tensor> {
    let (m, p) = patches.dims2()?;
    if p == 0 {
        return Err(CoreError::invalid("patch_normalize on empty patches"));
    }
    let mut out = Vec::with_capacity(m * p);
    for i in 0..m {
        let row = patches.row(i);
        let mean = row.iter().sum::<f64>() / p as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
        let denom = fmath::sqrt(var + PATCH_NORM_EPS);
        out.extend(row.iter().map(|v| (v - mean) / denom));
    }
    Tensor::new(patches.shape().to_vec(), out)
}

/// Mean squared error over the masked patches of one modality; returns 0 for
/// an empty masked set. With `patch_sum` the per-patch reduction is a sum
/// rather than a mean.
pub fn masked_mse(
    pred_full: &Tensor,
    target_full: &Tensor,
    plan: &MaskPlan,
    patch_sum: bool,
) -> Result<f64> {
    let (np, pp) = pred_full.dims2()?;
    let (nt, pt) = target_full.dims2()?;
    if np != nt || pp != pt {
        return Err(CoreError::ShapeMismatch {
            op: "masked_mse",
            lhs: pred_full.shape().to_vec(),
            rhs: target_full.shape().to_vec(),
        });
    }
    if np != plan.n_tokens() {
        return Err(CoreError::invalid(format!(
            "masked_mse: {np} patches but plan covers {}",
            plan.n_tokens()
        )));
    }
    if plan.masked_idx.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &i in &plan.masked_idx {
        let mut patch = 0.0;
        for j in 0..pp {
            let d = pred_full.at(i, j) - target_full.at(i, j);
            patch += d * d;
        }
        total += if patch_sum { patch } else { patch / pp as f64 };
    }
    Ok(total / plan.masked_idx.len() as f64)
}

/// Reconstruction loss value plus any empty-modality warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconLoss {
    pub value: f64,
    pub warnings: Vec<String>,
}

/// Masked reconstruction loss: the sum of both modality terms, each a mean
/// over masked patches of the per-patch (mean or summed) squared error
/// against the raw or per-patch-normalized target.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_loss(
    pred_a: Option<&Tensor>,
    pred_v: Option<&Tensor>,
    target_a: Option<&Tensor>,
    target_v: Option<&Tensor>,
    plan_a: Option<&MaskPlan>,
    plan_v: Option<&MaskPlan>,
    target_norm: bool,
    patch_sum: bool,
) -> Result<ReconLoss> {
    let mut value = 0.0;
    let mut warnings = Vec::new();
    for (label, pred, target, plan) in [
        ("audio", pred_a, target_a, plan_a),
        ("visual", pred_v, target_v, plan_v),
    ] {
        match (pred, target, plan) {
            (None, None, None) => {}
            (Some(p), Some(t), Some(plan)) => {
                if plan.masked_idx.is_empty() {
                    warnings.push(format!("{label}: empty masked set, term is 0"));
                    continue;
                }
                let target = if target_norm {
                    patch_normalize(t)?
                } else {
                    t.clone()
                };
                value += masked_mse(p, &target, plan, patch_sum)?;
            }
            _ => {
                return Err(CoreError::invalid(format!(
                    "{label}: prediction, target, and plan must be given together"
                )))
            }
        }
    }
    Ok(ReconLoss { value, warnings })
}

/// `L = L_r + λ_c·L_c` (absent terms contribute nothing).
pub fn total_loss(loss_r: Option<f64>, loss_c: Option<f64>, lambda_c: f64) -> f64 {
    loss_r.unwrap_or(0.0) + lambda_c * loss_c.unwrap_or(0.0)
}

// ---- graph builders (training-time differentiable versions) ----

/// Builds the contrastive loss over stacked embedding matrices in the graph.
pub fn contrastive_loss_graph(
    g: &mut Graph,
    c_v: NodeId,
    c_a: NodeId,
    tau: f64,
    symmetric: bool,
) -> Result<NodeId> {
    let (n, _) = g.value(c_v).dims2()?;
    if n < 2 {
        return Err(CoreError::invalid("contrastive loss needs at least 2 samples"));
    }
    if !(tau > 0.0) {
        return Err(CoreError::invalid("tau must be positive"));
    }
    let nv = g.l2_normalize_rows(c_v)?;
    let na = g.l2_normalize_rows(c_a)?;
    let nat = g.transpose(na)?;
    let s = g.matmul(nv, nat)?;
    let scaled = g.scale(s, 1.0 / tau);
    let forward = nce_direction_graph(g, scaled, n)?;
    if !symmetric {
        return Ok(forward);
    }
    let st = g.transpose(scaled)?;
    let backward = nce_direction_graph(g, st, n)?;
    let sum = g.add(forward, backward)?;
    Ok(g.scale(sum, 0.5))
}

fn nce_direction_graph(g: &mut Graph, scaled: NodeId, n: usize) -> Result<NodeId> {
    let probs = g.softmax_rows(scaled)?;
    let logp = g.log(probs)?;
    let mut eye = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        eye.data_mut()[i * n + i] = 1.0;
    }
    let eye = g.constant(eye);
    let diag = g.mul(logp, eye)?;
    let total = g.sum_all(diag);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Builds mean softmax cross-entropy over logit rows with integer labels.
pub fn cross_entropy_graph(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (n, k) = g.value(logits).dims2()?;
    if labels.len() != n {
        return Err(CoreError::invalid(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    let mut onehot = Tensor::zeros(vec![n, k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(CoreError::invalid(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        onehot.data_mut()[i * k + y] = 1.0;
    }
    let probs = g.softmax_rows(logits)?;
    let logp = g.log(probs)?;
    let mask = g.constant(onehot);
    let picked = g.mul(logp, mask)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Fraction of logit rows whose argmax equals the label (ties to the lowest
/// index).
pub fn argmax_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(CoreError::invalid(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(CoreError::invalid("accuracy over empty batch"));
    }
    let mut hits = 0;
    for (i, &y) in labels.iter().enumerate() {
        let mut best = 0;
        for j in 1..k {
            if logits.at(i, j) > logits.at(i, best) {
                best = j;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Builds one modality's masked reconstruction term in the graph. The target
/// (already normalized if requested) enters as a constant restricted to
/// masked rows.
pub fn masked_mse_graph(
    g: &mut Graph,
    pred_full: NodeId,
    target_full: &Tensor,
    plan: &MaskPlan,
    patch_sum: bool,
) -> Result<NodeId> {
    let (rows, p) = g.value(pred_full).dims2()?;
    if rows != plan.n_tokens() {
        return Err(CoreError::invalid(format!(
            "masked_mse: {rows} predicted patches but plan covers {}",
            plan.n_tokens()
        )));
    }
    if plan.masked_idx.is_empty() {
        return Err(CoreError::invalid("masked_mse over empty masked set"));
    }
    let m = plan.masked_idx.len();
    let pred_masked = g.gather_rows(pred_full, &plan.masked_idx)?;
    let mut tdata = Vec::with_capacity(m * p);
    for &i in &plan.masked_idx {
        tdata.extend_from_slice(target_full.row(i));
    }
    let target = g.constant(Tensor::new(vec![m, p], tdata)?);
    let diff = g.sub(pred_masked, target)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum_all(sq);
    let denom = if patch_sum { m } else { m * p };
    Ok(g.scale(total, 1.0 / denom as f64))
}
