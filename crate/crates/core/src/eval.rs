//! Evaluation harness over pretrained checkpoints: clip-level embeddings and
//! cross-modal retrieval, sound-source localization heatmaps, masking/MSE
//! sweeps, the pairing-shuffle ablation, and missing-modality classification.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::loss::{self, BatchEmbeddings, LossConfig};
use crate::mask::{sample_mask, MaskPlan, MaskStrategy};
use crate::metrics::{recall_at_k, RetrievalDirection};
use crate::model::{
    feature_dim, ClassifierFeature, Modality, ModalityMode, ModelBuild, ModelDims, ParamMap,
    PosTables, TokenGeometry, Variant,
};
use crate::patch::patchify;
use crate::rng::{self, stream};
use crate::synth::{shuffle_pairs, SampleRecord};
use crate::tensor::Tensor;
use crate::trainer::{
    self, features_for_records, linear_probe, pretrain, FinetuneConfig, PretrainView, TrainConfig,
};

/// Everything needed to run a pretrained backbone forward.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub variant: Variant,
    pub dims: ModelDims,
    pub geo: TokenGeometry,
    pub tables: PosTables,
    pub patch_size: usize,
}

impl EvalContext {
    pub fn new(
        variant: Variant,
        dims: ModelDims,
        geo: TokenGeometry,
        patch_size: usize,
    ) -> Result<Self> {
        dims.validate()?;
        if patch_size != geo.patch_size {
            return Err(CoreError::invalid(format!(
                "patch size {} disagrees with geometry patch size {}",
                patch_size, geo.patch_size
            )));
        }
        Ok(EvalContext {
            variant,
            dims,
            geo,
            tables: PosTables::new(&dims, &geo)?,
            patch_size,
        })
    }
}

/// Clip-level embeddings from one modality's independent forward pass:
/// masking disabled, mean-pooled stream output, features averaged over all
/// frames on the visual side. Returns `[n_records × d_enc]`.
pub fn clip_embeddings(
    ctx: &EvalContext,
    params: &ParamMap,
    modality: Modality,
    records: &[SampleRecord],
) -> Result<Tensor> {
    let mode = match modality {
        Modality::Audio => ModalityMode::Audio,
        Modality::Visual => ModalityMode::Visual,
    };
    features_for_records(
        ctx.variant,
        &ctx.dims,
        &ctx.geo,
        &ctx.tables,
        params,
        mode,
        ClassifierFeature::Sm,
        ctx.patch_size,
        records,
    )
}

/// Cosine similarity matrix between visual (rows) and audio (cols) clip
/// embeddings of the same record list.
pub fn clip_similarity(
    ctx: &EvalContext,
    params: &ParamMap,
    records: &[SampleRecord],
) -> Result<Tensor> {
    let a = clip_embeddings(ctx, params, Modality::Audio, records)?;
    let v = clip_embeddings(ctx, params, Modality::Visual, records)?;
    loss::similarity_matrix(&BatchEmbeddings::new(a, v)?)
}

/// Recall@k in both retrieval directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub n: usize,
    pub ks: Vec<usize>,
    /// Recall@k per entry of `ks`, visual queries → audio gallery.
    pub v2a: Vec<f64>,
    /// Recall@k per entry of `ks`, audio queries → visual gallery.
    pub a2v: Vec<f64>,
}

/// Runs both independent passes and evaluates recall at each requested rank.
pub fn retrieval_eval(
    ctx: &EvalContext,
    params: &ParamMap,
    records: &[SampleRecord],
    ks: &[usize],
) -> Result<RetrievalReport> {
    let sim = clip_similarity(ctx, params, records)?;
    let mut v2a = Vec::with_capacity(ks.len());
    let mut a2v = Vec::with_capacity(ks.len());
    for &k in ks {
        v2a.push(recall_at_k(&sim, k, RetrievalDirection::VisualToAudio)?);
        a2v.push(recall_at_k(&sim, k, RetrievalDirection::AudioToVisual)?);
    }
    Ok(RetrievalReport {
        n: records.len(),
        ks: ks.to_vec(),
        v2a,
        a2v,
    })
}

/// Localization heatmap: cosine similarity between the clip-level audio
/// embedding and every visual patch token, shaped `[visual_rows ×
/// visual_cols]`. Values lie in [−1, 1].
pub fn localization_heatmap(
    ctx: &EvalContext,
    params: &ParamMap,
    audio: &Tensor,
    frame: &Tensor,
) -> Result<Tensor> {
    let a_patches = patchify(audio, ctx.patch_size)?.patches;
    let v_patches = patchify(frame, ctx.patch_size)?.patches;
    let empty_a = MaskPlan::empty(ctx.geo.audio_rows, ctx.geo.audio_cols);
    let empty_v = MaskPlan::empty(ctx.geo.visual_rows, ctx.geo.visual_cols);

    // Two independent passes, as in retrieval.
    let mut g = Graph::new();
    let mut b = ModelBuild::new(&mut g, params, ctx.dims, ctx.geo, ctx.variant)?;
    let (_, pooled) = b.encode_single(Modality::Audio, &a_patches, &empty_a, &ctx.tables)?;
    let a_vec = b.g.value(pooled).clone();

    let mut g2 = Graph::new();
    let mut b2 = ModelBuild::new(&mut g2, params, ctx.dims, ctx.geo, ctx.variant)?;
    let (tokens, _) = b2.encode_single(Modality::Visual, &v_patches, &empty_v, &ctx.tables)?;
    let v_tokens = b2.g.value(tokens).clone();

    let (n_tok, d) = v_tokens.dims2()?;
    if n_tok != ctx.geo.visual_tokens() || a_vec.numel() != d {
        return Err(CoreError::invalid(format!(
            "unexpected embedding shapes: {n_tok} tokens × {d}, audio {}",
            a_vec.numel()
        )));
    }
    let a_norm = crate::fmath::sqrt(a_vec.data().iter().map(|x| x * x).sum());
    let mut heat = Vec::with_capacity(n_tok);
    for i in 0..n_tok {
        let row = v_tokens.row(i);
        let r_norm = crate::fmath::sqrt(row.iter().map(|x| x * x).sum::<f64>());
        let denom = a_norm * r_norm;
        heat.push(if denom > 0.0 {
            row.iter()
                .zip(a_vec.data())
                .map(|(x, y)| x * y)
                .sum::<f64>()
                / denom
        } else {
            0.0
        });
    }
    Tensor::new(vec![ctx.geo.visual_rows, ctx.geo.visual_cols], heat)
}

/// Quadrant (2·row_half + col_half) of the hottest patch; ties resolve to the
/// lowest flat index, matching the dataset's quadrant convention.
pub fn heatmap_argmax_quadrant(heat: &Tensor) -> Result<u8> {
    let (rows, cols) = heat.dims2()?;
    if rows < 2 || cols < 2 {
        return Err(CoreError::invalid(format!(
            "heatmap {rows}×{cols} too small for quadrants"
        )));
    }
    let mut best = 0usize;
    for i in 1..heat.numel() {
        if heat.data()[i] > heat.data()[best] {
            best = i;
        }
    }
    let (r, c) = (best / cols, best % cols);
    Ok(((r >= rows.div_ceil(2)) as u8) * 2 + (c >= cols.div_ceil(2)) as u8)
}

/// Fraction of records whose heatmap argmax falls in the record's motif
/// quadrant (first frame of each record).
pub fn localization_hit_rate(
    ctx: &EvalContext,
    params: &ParamMap,
    records: &[SampleRecord],
) -> Result<f64> {
    if records.is_empty() {
        return Err(CoreError::invalid("localization over empty record list"));
    }
    let mut hits = 0usize;
    for rec in records {
        let frame = rec
            .frames
            .first()
            .ok_or_else(|| CoreError::invalid("record has no frames"))?;
        let q = rec
            .quadrants
            .first()
            .copied()
            .ok_or_else(|| CoreError::invalid("record has no quadrant"))?;
        let heat = localization_heatmap(ctx, params, &rec.audio, frame)?;
        if heatmap_argmax_quadrant(&heat)? == q {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// One cell of the masking sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub mean_mse: f64,
    pub n_samples: usize,
}

/// Mean masked audio reconstruction error per (strategy, ratio) cell with
/// inference-time masks, averaged over at least 20 samples. The visual input
/// stays fully visible so every cell sees identical context. Ratio 0 rows are
/// vacuous (no masked patches) and report 0.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_mse_sweep(
    ctx: &EvalContext,
    params: &ParamMap,
    loss_cfg: &LossConfig,
    records: &[SampleRecord],
    strategies: &[MaskStrategy],
    ratios: &[f64],
    seed: u64,
) -> Result<Vec<SweepCell>> {
    if !ctx.variant.has_decoder() {
        return Err(CoreError::invalid(format!(
            "variant {} has no decoder to sweep",
            ctx.variant.name()
        )));
    }
    if !ctx.variant.uses_audio() {
        return Err(CoreError::invalid(format!(
            "variant {} has no audio reconstruction term",
            ctx.variant.name()
        )));
    }
    if records.len() < 20 {
        return Err(CoreError::invalid(format!(
            "sweep needs at least 20 samples, got {}",
            records.len()
        )));
    }
    if strategies.is_empty() || ratios.is_empty() {
        return Err(CoreError::invalid("sweep needs strategies and ratios"));
    }
    let pair = ctx.variant.uses_visual();
    let empty_v = MaskPlan::empty(ctx.geo.visual_rows, ctx.geo.visual_cols);
    let mut cells = Vec::with_capacity(strategies.len() * ratios.len());
    for (si, &strategy) in strategies.iter().enumerate() {
        for (ri, &ratio) in ratios.iter().enumerate() {
            if ratio == 0.0 {
                cells.push(SweepCell {
                    strategy,
                    ratio,
                    mean_mse: 0.0,
                    n_samples: records.len(),
                });
                continue;
            }
            let cell_id = (si * ratios.len() + ri) as u64;
            let mut sum = 0.0;
            for rec in records {
                let a_patches = patchify(&rec.audio, ctx.patch_size)?.patches;
                let plan = sample_mask(
                    ctx.geo.audio_rows,
                    ctx.geo.audio_cols,
                    ratio,
                    strategy,
                    rng::derive_seed(&[seed, stream::MASK, cell_id, rec.sample_id]),
                )?;
                let mut g = Graph::new();
                let mut b = ModelBuild::new(&mut g, params, ctx.dims, ctx.geo, ctx.variant)?;
                let (pred_a, plan_ref) = if pair {
                    let frame = rec
                        .frames
                        .first()
                        .ok_or_else(|| CoreError::invalid("record has no frames"))?;
                    let v_patches = patchify(frame, ctx.patch_size)?.patches;
                    let so =
                        b.encode_pair(&a_patches, &plan, &v_patches, &empty_v, &ctx.tables, false)?;
                    let (pred_a, _) =
                        b.decode(so.tokens, Some(&plan), Some(&empty_v), &ctx.tables)?;
                    (pred_a, &plan)
                } else {
                    let (tokens, _) =
                        b.encode_single(Modality::Audio, &a_patches, &plan, &ctx.tables)?;
                    let (pred_a, _) = b.decode(tokens, Some(&plan), None, &ctx.tables)?;
                    (pred_a, &plan)
                };
                let pred =
                    pred_a.ok_or_else(|| CoreError::invalid("decoder produced no audio output"))?;
                let pred_t = b.g.value(pred).clone();
                let target = if loss_cfg.target_norm {
                    loss::patch_normalize(&a_patches)?
                } else {
                    a_patches.clone()
                };
                sum += loss::masked_mse(&pred_t, &target, plan_ref, loss_cfg.patch_sum)?;
            }
            cells.push(SweepCell {
                strategy,
                ratio,
                mean_mse: sum / records.len() as f64,
                n_samples: records.len(),
            });
        }
    }
    Ok(cells)
}

/// Outcome of the pairing-shuffle ablation: pretrain on true pairs and on
/// deranged pairs, then compare held-out matching accuracy and probe accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleReport {
    /// Diagonal matching accuracy of held-out clip embeddings (absent for
    /// single-modality variants).
    pub paired_match_acc: Option<f64>,
    pub shuffled_match_acc: Option<f64>,
    pub paired_probe_acc: f64,
    pub shuffled_probe_acc: f64,
    /// The derangement applied to the audio side.
    pub sigma: Vec<usize>,
}

/// Pretrains the configured variant twice — once on the given records, once
/// with audio↔visual pairings deranged — and reports both models' held-out
/// matching accuracy and linear-probe accuracy.
pub fn shuffle_experiment(
    cfg: &TrainConfig,
    records: &[SampleRecord],
    probe_train: &[SampleRecord],
    probe_eval: &[SampleRecord],
    probe_cfg: &FinetuneConfig,
    shuffle_seed: u64,
) -> Result<ShuffleReport> {
    let (shuffled, sigma) = shuffle_pairs(records, shuffle_seed)?;
    let paired = pretrain(cfg, &PretrainView::new(records), None)?;
    let broken = pretrain(cfg, &PretrainView::new(&shuffled), None)?;

    let both = cfg.variant.uses_audio() && cfg.variant.uses_visual();
    let (paired_match_acc, shuffled_match_acc) = if both && probe_eval.len() >= 2 {
        let geo = trainer::record_geometry(cfg.variant, cfg.patch_size, probe_eval)?;
        let ctx = EvalContext::new(cfg.variant, cfg.dims, geo, cfg.patch_size)?;
        let acc_of = |params: &ParamMap| -> Result<f64> {
            let a = clip_embeddings(&ctx, params, Modality::Audio, probe_eval)?;
            let v = clip_embeddings(&ctx, params, Modality::Visual, probe_eval)?;
            loss::matching_accuracy(&BatchEmbeddings::new(a, v)?)
        };
        (Some(acc_of(&paired.params)?), Some(acc_of(&broken.params)?))
    } else {
        (None, None)
    };

    let paired_probe = linear_probe(
        cfg.variant,
        cfg.dims,
        &paired.params,
        probe_cfg,
        probe_train,
        probe_eval,
    )?;
    let shuffled_probe = linear_probe(
        cfg.variant,
        cfg.dims,
        &broken.params,
        probe_cfg,
        probe_train,
        probe_eval,
    )?;

    Ok(ShuffleReport {
        paired_match_acc,
        shuffled_match_acc,
        paired_probe_acc: paired_probe.eval_accuracy,
        shuffled_probe_acc: shuffled_probe.eval_accuracy,
        sigma,
    })
}

/// Classification features when only one modality is present at inference
/// for a head trained on both (the missing stream contributes zeros).
/// Returns `[n_records × feature_dim(feature, d_enc, both)]`.
pub fn missing_modality_features(
    ctx: &EvalContext,
    params: &ParamMap,
    feature: ClassifierFeature,
    available: Modality,
    records: &[SampleRecord],
) -> Result<Tensor> {
    let d = ctx.dims.d_enc;
    let fd = feature_dim(feature, d, true);
    let mode = match available {
        Modality::Audio => ModalityMode::Audio,
        Modality::Visual => ModalityMode::Visual,
    };
    // Per-record stream vector and token mean of the available modality.
    let pooled = features_for_records(
        ctx.variant,
        &ctx.dims,
        &ctx.geo,
        &ctx.tables,
        params,
        mode,
        ClassifierFeature::Sm,
        ctx.patch_size,
        records,
    )?;
    let (n, _) = pooled.dims2()?;
    let mut data = Vec::with_capacity(n * fd);
    for i in 0..n {
        let p = pooled.row(i);
        match feature {
            // Mean over the only token sequence present.
            ClassifierFeature::Mm => data.extend_from_slice(p),
            // Audio slot first, visual slot second; absent side zero.
            ClassifierFeature::Sm => match available {
                Modality::Audio => {
                    data.extend_from_slice(p);
                    data.extend(core::iter::repeat(0.0).take(d));
                }
                Modality::Visual => {
                    data.extend(core::iter::repeat(0.0).take(d));
                    data.extend_from_slice(p);
                }
            },
            // Pooled tokens + present stream vector + zeros: the pooled mean
            // and the stream vector coincide for a lone stream, so the sum is
            // twice the pooled vector.
            ClassifierFeature::MmSm => data.extend(p.iter().map(|x| 2.0 * x)),
        }
    }
    Tensor::new(vec![n, fd], data)
}

/// Accuracy of a both-modality head evaluated with one modality missing.
pub fn missing_modality_accuracy(
    ctx: &EvalContext,
    params: &ParamMap,
    feature: ClassifierFeature,
    available: Modality,
    records: &[SampleRecord],
) -> Result<f64> {
    let feats = missing_modality_features(ctx, params, feature, available, records)?;
    let w = params
        .get("head.w")
        .ok_or_else(|| CoreError::invalid("missing head.w (model not fine-tuned)"))?;
    let bias = params
        .get("head.b")
        .ok_or_else(|| CoreError::invalid("missing head.b (model not fine-tuned)"))?;
    let mut logits = feats.matmul(w)?;
    let (n, k) = logits.dims2()?;
    for i in 0..n {
        for j in 0..k {
            logits.data_mut()[i * k + j] += bias.data()[j];
        }
    }
    let labels: Vec<usize> = records.iter().map(|r| r.label as usize).collect();
    loss::argmax_accuracy(&logits, &labels)
}
