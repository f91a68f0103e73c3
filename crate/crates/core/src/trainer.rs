//! Training loops: self-supervised masked-autoencoder pretraining and
//! supervised fine-tuning / linear probing on top of a pretrained backbone.
//!
//! Everything is deterministic in the configured seed: batch order, frame
//! picks, mask draws, and the time-shift augmentation each consume their own
//! derived seed stream, so shuffled loaders reproduce bit-identically.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::loss::{self, LossConfig};
use crate::mask::{sample_mask, MaskPlan, MaskStrategy};
use crate::model::{
    assemble_feature, feature_dim, head_specs, init_from_specs, init_params, validate_params,
    ClassifierFeature, Modality, ModalityMode, ModelBuild, ModelDims, ParamMap, PosTables,
    TokenGeometry, Variant,
};
use crate::optim::{lr_at_epoch, AdamConfig, OptimState, ScheduleConfig};
use crate::patch::{patchify, select_frame_indices, FrameMode};
use crate::rng::{self, stream};
use crate::synth::SampleRecord;
use crate::tensor::Tensor;

/// Pretraining configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub dims: ModelDims,
    pub loss: LossConfig,
    pub mask_ratio_audio: f64,
    pub mask_ratio_visual: f64,
    pub mask_audio: MaskStrategy,
    pub mask_visual: MaskStrategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Circularly shift the spectrogram along time by a random offset.
    pub time_shift: bool,
    pub patch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::CavMae,
            dims: ModelDims::default(),
            loss: LossConfig::default(),
            mask_ratio_audio: 0.75,
            mask_ratio_visual: 0.75,
            mask_audio: MaskStrategy::Uniform,
            mask_visual: MaskStrategy::Uniform,
            epochs: 10,
            batch_size: 8,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
            time_shift: true,
            patch_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        if self.batch_size < 2 {
            return Err(CoreError::invalid(
                "batch_size must be at least 2 (paired objectives need 2+ samples)",
            ));
        }
        if self.patch_size == 0 {
            return Err(CoreError::invalid("patch_size must be positive"));
        }
        for (name, r) in [
            ("mask_ratio_audio", self.mask_ratio_audio),
            ("mask_ratio_visual", self.mask_ratio_visual),
        ] {
            if !(r > 0.0 && r < 1.0) {
                return Err(CoreError::invalid(format!("{name} {r} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// One optimizer step's bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// 1-based optimizer step count, matching the Adam state's counter.
    pub step: u64,
    pub loss_total: f64,
    /// Reconstruction term; absent for variants without a decoder.
    pub loss_r: Option<f64>,
    /// Contrastive term; absent for variants without the contrastive head.
    pub loss_c: Option<f64>,
    pub lr: f64,
    /// In-batch diagonal matching accuracy of the contrastive similarities.
    pub match_acc: Option<f64>,
}

/// Read-only dataset view for pretraining that counts every label access, so
/// tests can assert the self-supervised loop never touches labels.
pub struct PretrainView<'a> {
    records: &'a [SampleRecord],
    label_reads: core::cell::Cell<usize>,
}

impl<'a> PretrainView<'a> {
    pub fn new(records: &'a [SampleRecord]) -> Self {
        PretrainView {
            records,
            label_reads: core::cell::Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sample_id(&self, i: usize) -> u64 {
        self.records[i].sample_id
    }

    pub fn audio(&self, i: usize) -> &Tensor {
        &self.records[i].audio
    }

    pub fn frames(&self, i: usize) -> &[Tensor] {
        &self.records[i].frames
    }

    /// Label accessor — instrumented; pretraining must never call this.
    pub fn label(&self, i: usize) -> u32 {
        self.label_reads.set(self.label_reads.get() + 1);
        self.records[i].label
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.get()
    }
}

/// Result of a pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub params: ParamMap,
    pub records: Vec<StepRecord>,
}

/// Callback invoked after each epoch with the current parameters and that
/// epoch's step records (for checkpointing / manifests).
pub type EpochHook<'h> = dyn FnMut(usize, &ParamMap, &[StepRecord]) -> Result<()> + 'h;

/// Rotates a rank-2 tensor's rows: output row `t` is input row `(t + s) % rows`.
pub fn circular_shift_rows(t: &Tensor, s: usize) -> Result<Tensor> {
    let (rows, cols) = t.dims2()?;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        data.extend_from_slice(t.row((r + s) % rows));
    }
    Tensor::new(vec![rows, cols], data)
}

/// Shapes shared by every record of a dataset, derived from the first record.
fn dataset_geometry(
    variant: Variant,
    patch_size: usize,
    n: usize,
    audio_of: impl Fn(usize) -> (usize, usize),
    frames_of: impl Fn(usize) -> (usize, Vec<usize>),
) -> Result<TokenGeometry> {
    if n == 0 {
        return Err(CoreError::invalid("dataset is empty"));
    }
    let (t0, m0) = audio_of(0);
    let (nf0, fshape0) = frames_of(0);
    if variant.uses_visual() && nf0 == 0 {
        return Err(CoreError::invalid("record 0 has no frames"));
    }
    let (h, w, ch) = match fshape0.as_slice() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        other if !variant.uses_visual() => {
            // Visual side unused; pick trivially divisible stand-ins unless the
            // record actually carries frames of a usable shape.
            if other.is_empty() {
                (patch_size * 2, patch_size * 2, 1)
            } else {
                return Err(CoreError::invalid(format!(
                    "record 0 frame shape {other:?} is not an image"
                )));
            }
        }
        other => {
            return Err(CoreError::invalid(format!(
                "record 0 frame shape {other:?} is not an image"
            )))
        }
    };
    for i in 1..n {
        if audio_of(i) != (t0, m0) {
            return Err(CoreError::invalid(format!(
                "record {i} audio shape {:?} differs from record 0 {:?}",
                audio_of(i),
                (t0, m0)
            )));
        }
        let (nf, fshape) = frames_of(i);
        if variant.uses_visual() {
            if nf == 0 {
                return Err(CoreError::invalid(format!("record {i} has no frames")));
            }
            if fshape != fshape0 {
                return Err(CoreError::invalid(format!(
                    "record {i} frame shape {fshape:?} differs from record 0 {fshape0:?}"
                )));
            }
        }
    }
    TokenGeometry::from_inputs(t0, m0, h, w, ch, patch_size)
}

/// Token geometry implied by a record list (validates shape consistency).
pub fn record_geometry(
    variant: Variant,
    patch_size: usize,
    records: &[SampleRecord],
) -> Result<TokenGeometry> {
    dataset_geometry(
        variant,
        patch_size,
        records.len(),
        |i| {
            let s = records[i].audio.shape();
            (s[0], s.get(1).copied().unwrap_or(0))
        },
        |i| {
            let fs = &records[i].frames;
            (
                fs.len(),
                fs.first().map(|f| f.shape().to_vec()).unwrap_or_default(),
            )
        },
    )
}

/// Audio patches for one record at one epoch: optional circular time shift,
/// then patchify.
fn audio_patches(
    audio: &Tensor,
    time_shift: bool,
    patch_size: usize,
    seed: u64,
    epoch: usize,
    sample_id: u64,
) -> Result<Tensor> {
    let shifted;
    let src = if time_shift {
        let rows = audio.dims2()?.0;
        let mut r = rng::rng_from_seed(rng::derive_seed(&[
            seed,
            stream::SHIFT,
            epoch as u64,
            sample_id,
        ]));
        let s = rng::uniform_index(&mut r, rows);
        shifted = circular_shift_rows(audio, s)?;
        &shifted
    } else {
        audio
    };
    Ok(patchify(src, patch_size)?.patches)
}

/// Loss components of one forward pass over a fixed batch, optionally with
/// the analytic gradients of the total loss.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss_total: f64,
    pub loss_r: Option<f64>,
    pub loss_c: Option<f64>,
    pub match_acc: Option<f64>,
    /// Present only when requested; gradients of `loss_total` w.r.t. every
    /// parameter that participated in the graph.
    pub grads: Option<ParamMap>,
}

/// Evaluates the full training objective over one batch exactly as a training
/// step would — same per-sample mask, frame, and shift draws for the given
/// `(cfg.seed, epoch, sample id)` — but without updating any parameters.
/// `chunk` holds indices into `data`. Useful for gradient checking and for
/// probing the loss surface at fixed randomness.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    cfg: &TrainConfig,
    data: &PretrainView<'_>,
    geo: &TokenGeometry,
    tables: &PosTables,
    params: &ParamMap,
    epoch: usize,
    chunk: &[usize],
    with_grads: bool,
) -> Result<BatchObjective> {
    let variant = cfg.variant;
    let lambda = cfg.loss.effective_lambda_c(variant);
    let mut g = Graph::new();
    let mut b = ModelBuild::new(&mut g, params, cfg.dims, *geo, variant)?;

    let mut recon_nodes: Vec<NodeId> = Vec::new();
    let mut ca_nodes: Vec<NodeId> = Vec::new();
    let mut cv_nodes: Vec<NodeId> = Vec::new();

    for &i in chunk {
        let sample_id = data.sample_id(i);
        let ep = epoch as u64;

        let a_patches = if variant.uses_audio() {
            Some(audio_patches(
                data.audio(i),
                cfg.time_shift,
                cfg.patch_size,
                cfg.seed,
                epoch,
                sample_id,
            )?)
        } else {
            None
        };
        let v_patches = if variant.uses_visual() {
            let frames = data.frames(i);
            let fseed = rng::derive_seed(&[cfg.seed, stream::FRAME, ep, sample_id]);
            let fi = select_frame_indices(frames.len(), FrameMode::Train, fseed)[0];
            Some(patchify(&frames[fi], cfg.patch_size)?.patches)
        } else {
            None
        };

        let a_plan = if variant.uses_audio() {
            Some(sample_mask(
                geo.audio_rows,
                geo.audio_cols,
                cfg.mask_ratio_audio,
                cfg.mask_audio,
                rng::derive_seed(&[cfg.seed, stream::MASK, ep, sample_id, 0]),
            )?)
        } else {
            None
        };
        let v_plan = if variant.uses_visual() {
            Some(sample_mask(
                geo.visual_rows,
                geo.visual_cols,
                cfg.mask_ratio_visual,
                cfg.mask_visual,
                rng::derive_seed(&[cfg.seed, stream::MASK, ep, sample_id, 1]),
            )?)
        } else {
            None
        };

        // Encode.
        let (tokens, c_a, c_v) = if variant.uses_audio() && variant.uses_visual() {
            let so = b.encode_pair(
                a_patches.as_ref().expect("audio present"),
                a_plan.as_ref().expect("audio plan"),
                v_patches.as_ref().expect("visual present"),
                v_plan.as_ref().expect("visual plan"),
                tables,
                variant.has_contrastive(),
            )?;
            (so.tokens, so.c_a, so.c_v)
        } else if variant.uses_audio() {
            let (tok, _pooled) = b.encode_single(
                Modality::Audio,
                a_patches.as_ref().expect("audio present"),
                a_plan.as_ref().expect("audio plan"),
                tables,
            )?;
            (tok, None, None)
        } else {
            let (tok, _pooled) = b.encode_single(
                Modality::Visual,
                v_patches.as_ref().expect("visual present"),
                v_plan.as_ref().expect("visual plan"),
                tables,
            )?;
            (tok, None, None)
        };

        if variant.has_contrastive() {
            ca_nodes.push(c_a.ok_or_else(|| CoreError::invalid("missing audio stream vector"))?);
            cv_nodes.push(c_v.ok_or_else(|| CoreError::invalid("missing visual stream vector"))?);
        }

        // Decode and accumulate the reconstruction term.
        if variant.has_decoder() {
            let (pred_a, pred_v) =
                b.decode(tokens, a_plan.as_ref(), v_plan.as_ref(), tables)?;
            let mut sample_recon: Option<NodeId> = None;
            let modalities = [
                (pred_a, a_patches.as_ref(), a_plan.as_ref()),
                (pred_v, v_patches.as_ref(), v_plan.as_ref()),
            ];
            for (pred, patches, plan) in modalities {
                let (Some(pred), Some(patches), Some(plan)) = (pred, patches, plan) else {
                    continue;
                };
                let target = if cfg.loss.target_norm {
                    loss::patch_normalize(patches)?
                } else {
                    patches.clone()
                };
                let term = loss::masked_mse_graph(b.g, pred, &target, plan, cfg.loss.patch_sum)?;
                sample_recon = Some(match sample_recon {
                    None => term,
                    Some(acc) => b.g.add(acc, term)?,
                });
            }
            recon_nodes
                .push(sample_recon.ok_or_else(|| CoreError::invalid("no reconstruction term"))?);
        }
    }

    // Batch-level objective.
    let l_r = if recon_nodes.is_empty() {
        None
    } else {
        let mut acc = recon_nodes[0];
        for &r in &recon_nodes[1..] {
            acc = b.g.add(acc, r)?;
        }
        Some(b.g.scale(acc, 1.0 / recon_nodes.len() as f64))
    };
    let (l_c, match_acc) = if variant.has_contrastive() {
        let cv = b.g.concat_rows(&cv_nodes)?;
        let ca = b.g.concat_rows(&ca_nodes)?;
        let lc = loss::contrastive_loss_graph(b.g, cv, ca, cfg.loss.tau, cfg.loss.symmetric)?;
        let be = loss::BatchEmbeddings::new(b.g.value(ca).clone(), b.g.value(cv).clone())?;
        (Some(lc), Some(loss::matching_accuracy(&be)?))
    } else {
        (None, None)
    };
    let total = match (l_r, l_c) {
        (Some(r), Some(c)) => {
            let scaled = b.g.scale(c, lambda);
            b.g.add(r, scaled)?
        }
        (Some(r), None) => r,
        // Contrastive-only training uses the contrastive term at weight 1.
        (None, Some(c)) => c,
        (None, None) => return Err(CoreError::invalid("variant produced no training objective")),
    };

    let loss_total = b.g.scalar_value(total)?;
    if !loss_total.is_finite() {
        return Err(CoreError::NonFinite(format!(
            "batch loss at epoch {epoch} is {loss_total}"
        )));
    }
    let loss_r = l_r.map(|id| b.g.scalar_value(id)).transpose()?;
    let loss_c = l_c.map(|id| b.g.scalar_value(id)).transpose()?;

    let grads = if with_grads {
        let mut grads = b.g.backward(total, None)?;
        Some(b.into_grad_map(&mut grads))
    } else {
        None
    };

    Ok(BatchObjective {
        loss_total,
        loss_r,
        loss_c,
        match_acc,
        grads,
    })
}

/// Builds the whole-batch training graph, steps the optimizer, and returns the
/// step's record.
#[allow(clippy::too_many_arguments)]
fn pretrain_step(
    cfg: &TrainConfig,
    data: &PretrainView<'_>,
    geo: &TokenGeometry,
    tables: &PosTables,
    params: &mut ParamMap,
    opt: &mut OptimState,
    epoch: usize,
    lr: f64,
    chunk: &[usize],
) -> Result<StepRecord> {
    let out = batch_objective(cfg, data, geo, tables, params, epoch, chunk, true)?;
    let grads = out.grads.expect("gradients requested");
    opt.step(params, &grads, lr)?;
    Ok(StepRecord {
        epoch,
        step: opt.step,
        loss_total: out.loss_total,
        loss_r: out.loss_r,
        loss_c: out.loss_c,
        lr,
        match_acc: out.match_acc,
    })
}

/// Self-supervised pretraining. Labels are never read (the view counts
/// accesses). Batches follow a per-epoch seeded shuffle; chunks with fewer
/// than 2 samples are dropped because the paired objectives are undefined on
/// them. The hook runs after every epoch with that epoch's records.
pub fn pretrain(
    cfg: &TrainConfig,
    data: &PretrainView<'_>,
    mut on_epoch: Option<&mut EpochHook<'_>>,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(CoreError::invalid("pretraining needs at least 2 samples"));
    }
    let geo = dataset_geometry(
        cfg.variant,
        cfg.patch_size,
        data.len(),
        |i| {
            let s = data.records[i].audio.shape();
            (s[0], s.get(1).copied().unwrap_or(0))
        },
        |i| {
            let fs = data.frames(i);
            (
                fs.len(),
                fs.first().map(|f| f.shape().to_vec()).unwrap_or_default(),
            )
        },
    )?;
    let tables = PosTables::new(&cfg.dims, &geo)?;
    let mut params = init_params(&cfg.dims, &geo, cfg.variant, cfg.seed)?;
    let mut opt = OptimState::new(cfg.adam);
    let mut records: Vec<StepRecord> = Vec::new();

    for epoch in 0..cfg.epochs {
        let epoch_start = records.len();
        let lr = lr_at_epoch(&cfg.schedule, epoch);
        let mut order_rng = rng::rng_from_seed(rng::derive_seed(&[
            cfg.seed,
            stream::BATCH_ORDER,
            epoch as u64,
        ]));
        let order = rng::permutation(&mut order_rng, data.len());
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let rec = pretrain_step(
                cfg, data, &geo, &tables, &mut params, &mut opt, epoch, lr, chunk,
            )?;
            records.push(rec);
        }
        if let Some(hook) = on_epoch.as_mut() {
            hook(epoch, &params, &records[epoch_start..])?;
        }
    }
    Ok(PretrainOutput { params, records })
}

// ---- fine-tuning and linear probing ----

/// Supervised training configuration on top of a pretrained backbone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub modality: ModalityMode,
    pub feature: ClassifierFeature,
    pub n_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Train only the head on features from the frozen backbone.
    pub freeze_backbone: bool,
    pub patch_size: usize,
    /// Evaluate every this many epochs (0 = only once, at the end).
    pub eval_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            modality: ModalityMode::Both,
            feature: ClassifierFeature::Mm,
            n_classes: 8,
            epochs: 20,
            batch_size: 16,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
            freeze_backbone: true,
            patch_size: 8,
            eval_every: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.n_classes < 2 {
            return Err(CoreError::invalid("n_classes must be at least 2"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::invalid("batch_size must be positive"));
        }
        if self.patch_size == 0 {
            return Err(CoreError::invalid("patch_size must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch supervised bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Held-out accuracy, present on evaluation epochs.
    pub eval_accuracy: Option<f64>,
}

/// Result of fine-tuning or probing.
#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    /// Backbone (decoder dropped) plus the trained `head.*` tensors.
    pub params: ParamMap,
    pub records: Vec<EpochEval>,
    pub eval_accuracy: f64,
    pub train_accuracy: f64,
}

/// Checks a feature source against the modality mode and variant.
fn validate_feature(
    variant: Variant,
    modality: ModalityMode,
    feature: ClassifierFeature,
) -> Result<()> {
    match modality {
        ModalityMode::Both => {
            if !(variant.uses_audio() && variant.uses_visual()) {
                return Err(CoreError::invalid(format!(
                    "variant {} does not take audio-visual pairs",
                    variant.name()
                )));
            }
            if feature != ClassifierFeature::Mm && !variant.multi_stream() {
                return Err(CoreError::invalid(format!(
                    "feature source {} needs the multi-stream encoder; variant {} is fused",
                    feature.name(),
                    variant.name()
                )));
            }
        }
        ModalityMode::Audio | ModalityMode::Visual => {
            let ok = match modality {
                ModalityMode::Audio => variant.uses_audio(),
                _ => variant.uses_visual(),
            };
            if !ok {
                return Err(CoreError::invalid(format!(
                    "variant {} has no {} pathway",
                    variant.name(),
                    modality.name()
                )));
            }
            if feature == ClassifierFeature::MmSm {
                return Err(CoreError::invalid(format!(
                    "feature source {} is invalid in single-modality mode",
                    feature.name()
                )));
            }
        }
    }
    Ok(())
}

/// Builds the un-masked feature node for one record's chosen inputs.
fn feature_node(
    b: &mut ModelBuild<'_, '_>,
    tables: &PosTables,
    audio: Option<&Tensor>,
    visual: Option<&Tensor>,
    modality: ModalityMode,
    feature: ClassifierFeature,
) -> Result<NodeId> {
    let geo = b.geo;
    let empty_a = MaskPlan::empty(geo.audio_rows, geo.audio_cols);
    let empty_v = MaskPlan::empty(geo.visual_rows, geo.visual_cols);
    match modality {
        ModalityMode::Both => {
            let ap = audio.ok_or_else(|| CoreError::invalid("missing audio input"))?;
            let vp = visual.ok_or_else(|| CoreError::invalid("missing visual input"))?;
            let with_streams = b.variant.multi_stream() && feature != ClassifierFeature::Mm;
            let so = b.encode_pair(ap, &empty_a, vp, &empty_v, tables, with_streams)?;
            assemble_feature(b, feature, &so)
        }
        ModalityMode::Audio => {
            let ap = audio.ok_or_else(|| CoreError::invalid("missing audio input"))?;
            let (tokens, pooled) = b.encode_single(Modality::Audio, ap, &empty_a, tables)?;
            match feature {
                ClassifierFeature::Mm => b.g.mean_axis(tokens, 0),
                ClassifierFeature::Sm => Ok(pooled),
                ClassifierFeature::MmSm => Err(CoreError::invalid(
                    "feature source mm_sm is invalid in single-modality mode",
                )),
            }
        }
        ModalityMode::Visual => {
            let vp = visual.ok_or_else(|| CoreError::invalid("missing visual input"))?;
            let (tokens, pooled) = b.encode_single(Modality::Visual, vp, &empty_v, tables)?;
            match feature {
                ClassifierFeature::Mm => b.g.mean_axis(tokens, 0),
                ClassifierFeature::Sm => Ok(pooled),
                ClassifierFeature::MmSm => Err(CoreError::invalid(
                    "feature source mm_sm is invalid in single-modality mode",
                )),
            }
        }
    }
}

/// Inference-mode features for a record list: no masking, no augmentation,
/// features averaged over all frames. Returns `[n_records × feature_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn features_for_records(
    variant: Variant,
    dims: &ModelDims,
    geo: &TokenGeometry,
    tables: &PosTables,
    params: &ParamMap,
    modality: ModalityMode,
    feature: ClassifierFeature,
    patch_size: usize,
    records: &[SampleRecord],
) -> Result<Tensor> {
    let fd = feature_dim(feature, dims.d_enc, modality == ModalityMode::Both);
    let needs_audio = modality != ModalityMode::Visual;
    let needs_visual = modality != ModalityMode::Audio;
    let mut data = Vec::with_capacity(records.len() * fd);
    for (ri, rec) in records.iter().enumerate() {
        let ap = if needs_audio {
            Some(patchify(&rec.audio, patch_size)?.patches)
        } else {
            None
        };
        let passes: Vec<Option<usize>> = if needs_visual {
            if rec.frames.is_empty() {
                return Err(CoreError::invalid(format!("record {ri} has no frames")));
            }
            (0..rec.frames.len()).map(Some).collect()
        } else {
            vec![None]
        };
        let mut acc = vec![0.0f64; fd];
        for fi in &passes {
            let vp = match fi {
                Some(fi) => Some(patchify(&rec.frames[*fi], patch_size)?.patches),
                None => None,
            };
            let mut g = Graph::new();
            let mut b = ModelBuild::new(&mut g, params, *dims, *geo, variant)?;
            let feat = feature_node(&mut b, tables, ap.as_ref(), vp.as_ref(), modality, feature)?;
            let v = b.g.value(feat);
            if v.numel() != fd {
                return Err(CoreError::invalid(format!(
                    "feature has {} elements, expected {fd}",
                    v.numel()
                )));
            }
            for (a, x) in acc.iter_mut().zip(v.data()) {
                *a += x;
            }
        }
        let inv = 1.0 / passes.len() as f64;
        data.extend(acc.into_iter().map(|x| x * inv));
    }
    Tensor::new(vec![records.len(), fd], data)
}

/// `feats · head.w + head.b` as plain tensors.
fn affine_logits(feats: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut out = feats.matmul(w)?;
    let (n, k) = out.dims2()?;
    if bias.numel() != k {
        return Err(CoreError::ShapeMismatch {
            op: "affine_logits",
            lhs: out.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    for i in 0..n {
        for j in 0..k {
            out.data_mut()[i * k + j] += bias.data()[j];
        }
    }
    Ok(out)
}

fn labels_of(records: &[SampleRecord], n_classes: usize) -> Result<Vec<usize>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let y = r.label as usize;
            if y >= n_classes {
                return Err(CoreError::invalid(format!(
                    "record {i} label {y} outside 0..{n_classes}"
                )));
            }
            Ok(y)
        })
        .collect()
}

fn rows_of(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (_, d) = t.dims2()?;
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), d], data)
}

/// Supervised training of a classification head on a pretrained backbone.
/// The decoder is dropped, masking is disabled, and the head trains at
/// `head_lr_multiplier` times the backbone rate. With `freeze_backbone`, the
/// backbone is bit-frozen and features are precomputed once.
pub fn finetune(
    variant: Variant,
    dims: ModelDims,
    pretrained: &ParamMap,
    cfg: &FinetuneConfig,
    train: &[SampleRecord],
    eval: &[SampleRecord],
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    dims.validate()?;
    validate_feature(variant, cfg.modality, cfg.feature)?;
    if train.is_empty() {
        return Err(CoreError::invalid("training split is empty"));
    }
    if eval.is_empty() {
        return Err(CoreError::invalid("evaluation split is empty"));
    }
    let geo = record_geometry(variant, cfg.patch_size, train)?;
    let eval_geo = record_geometry(variant, cfg.patch_size, eval)?;
    if eval_geo != geo {
        return Err(CoreError::invalid(
            "evaluation split geometry differs from training split",
        ));
    }
    validate_params(pretrained, &dims, &geo, variant)?;
    let tables = PosTables::new(&dims, &geo)?;

    // Backbone without the decoder, plus a fresh head.
    let mut params = ParamMap::new();
    for (name, t) in pretrained {
        let is_decoder =
            name == "mask_token" || name.starts_with("dec.") || name.starts_with("dtype.");
        if !is_decoder && !name.starts_with("head.") {
            params.insert(name.clone(), t.clone());
        }
    }
    let fd = feature_dim(cfg.feature, dims.d_enc, cfg.modality == ModalityMode::Both);
    let head = init_from_specs(
        &head_specs(fd, cfg.n_classes),
        rng::derive_seed(&[cfg.seed, stream::HEAD]),
    );
    params.extend(head);

    let train_labels = labels_of(train, cfg.n_classes)?;
    let eval_labels = labels_of(eval, cfg.n_classes)?;
    let mut records: Vec<EpochEval> = Vec::new();

    let eval_due = |epoch: usize| cfg.eval_every != 0 && (epoch + 1) % cfg.eval_every == 0;

    if cfg.freeze_backbone {
        let feats = features_for_records(
            variant,
            &dims,
            &geo,
            &tables,
            &params,
            cfg.modality,
            cfg.feature,
            cfg.patch_size,
            train,
        )?;
        let eval_feats = features_for_records(
            variant,
            &dims,
            &geo,
            &tables,
            &params,
            cfg.modality,
            cfg.feature,
            cfg.patch_size,
            eval,
        )?;
        let mut head_opt = OptimState::new(cfg.adam);
        for epoch in 0..cfg.epochs {
            let lr = lr_at_epoch(&cfg.schedule, epoch) * cfg.schedule.head_lr_multiplier;
            let mut order_rng = rng::rng_from_seed(rng::derive_seed(&[
                cfg.seed,
                stream::BATCH_ORDER,
                epoch as u64,
            ]));
            let order = rng::permutation(&mut order_rng, train.len());
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let x_rows = rows_of(&feats, chunk)?;
                let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
                let mut g = Graph::new();
                let x = g.constant(x_rows);
                let w = g.param(params["head.w"].clone());
                let bias = g.param(params["head.b"].clone());
                let xw = g.matmul(x, w)?;
                let logits = g.add(xw, bias)?;
                let ce = loss::cross_entropy_graph(&mut g, logits, &labels)?;
                loss_sum += g.scalar_value(ce)?;
                batches += 1;
                let mut grads = g.backward(ce, None)?;
                let mut gm = ParamMap::new();
                if let Some(t) = grads.take(w) {
                    gm.insert(String::from("head.w"), t);
                }
                if let Some(t) = grads.take(bias) {
                    gm.insert(String::from("head.b"), t);
                }
                head_opt.step(&mut params, &gm, lr)?;
            }
            let eval_accuracy = if eval_due(epoch) {
                let logits = affine_logits(&eval_feats, &params["head.w"], &params["head.b"])?;
                Some(loss::argmax_accuracy(&logits, &eval_labels)?)
            } else {
                None
            };
            records.push(EpochEval {
                epoch,
                lr,
                mean_loss: loss_sum / batches.max(1) as f64,
                eval_accuracy,
            });
        }
        let eval_logits = affine_logits(&eval_feats, &params["head.w"], &params["head.b"])?;
        let train_logits = affine_logits(&feats, &params["head.w"], &params["head.b"])?;
        return Ok(FinetuneOutput {
            eval_accuracy: loss::argmax_accuracy(&eval_logits, &eval_labels)?,
            train_accuracy: loss::argmax_accuracy(&train_logits, &train_labels)?,
            params,
            records,
        });
    }

    // Unfrozen path: backbone and head step with separate optimizer states.
    let mut backbone_opt = OptimState::new(cfg.adam);
    let mut head_opt = OptimState::new(cfg.adam);
    let needs_audio = cfg.modality != ModalityMode::Visual;
    let needs_visual = cfg.modality != ModalityMode::Audio;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(&cfg.schedule, epoch);
        let head_lr = lr * cfg.schedule.head_lr_multiplier;
        let mut order_rng = rng::rng_from_seed(rng::derive_seed(&[
            cfg.seed,
            stream::BATCH_ORDER,
            epoch as u64,
        ]));
        let order = rng::permutation(&mut order_rng, train.len());
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let mut b = ModelBuild::new(&mut g, &params, dims, geo, variant)?;
            let mut feat_nodes = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let rec = &train[i];
                let ap = if needs_audio {
                    Some(patchify(&rec.audio, cfg.patch_size)?.patches)
                } else {
                    None
                };
                let vp = if needs_visual {
                    let fseed = rng::derive_seed(&[
                        cfg.seed,
                        stream::FRAME,
                        epoch as u64,
                        rec.sample_id,
                    ]);
                    let fi = select_frame_indices(rec.frames.len(), FrameMode::Train, fseed)[0];
                    Some(patchify(&rec.frames[fi], cfg.patch_size)?.patches)
                } else {
                    None
                };
                feat_nodes.push(feature_node(
                    &mut b,
                    &tables,
                    ap.as_ref(),
                    vp.as_ref(),
                    cfg.modality,
                    cfg.feature,
                )?);
                labels.push(train_labels[i]);
            }
            let stacked = b.g.concat_rows(&feat_nodes)?;
            let logits = b.classify(stacked)?;
            let ce = loss::cross_entropy_graph(b.g, logits, &labels)?;
            loss_sum += b.g.scalar_value(ce)?;
            batches += 1;
            let mut grads = b.g.backward(ce, None)?;
            let grad_map = b.into_grad_map(&mut grads);
            let mut head_grads = ParamMap::new();
            let mut backbone_grads = ParamMap::new();
            for (name, t) in grad_map {
                if name.starts_with("head.") {
                    head_grads.insert(name, t);
                } else {
                    backbone_grads.insert(name, t);
                }
            }
            backbone_opt.step(&mut params, &backbone_grads, lr)?;
            head_opt.step(&mut params, &head_grads, head_lr)?;
        }
        let eval_accuracy = if eval_due(epoch) {
            let ef = features_for_records(
                variant,
                &dims,
                &geo,
                &tables,
                &params,
                cfg.modality,
                cfg.feature,
                cfg.patch_size,
                eval,
            )?;
            let logits = affine_logits(&ef, &params["head.w"], &params["head.b"])?;
            Some(loss::argmax_accuracy(&logits, &eval_labels)?)
        } else {
            None
        };
        records.push(EpochEval {
            epoch,
            lr,
            mean_loss: loss_sum / batches.max(1) as f64,
            eval_accuracy,
        });
    }
    let eval_feats = features_for_records(
        variant,
        &dims,
        &geo,
        &tables,
        &params,
        cfg.modality,
        cfg.feature,
        cfg.patch_size,
        eval,
    )?;
    let train_feats = features_for_records(
        variant,
        &dims,
        &geo,
        &tables,
        &params,
        cfg.modality,
        cfg.feature,
        cfg.patch_size,
        train,
    )?;
    let eval_logits = affine_logits(&eval_feats, &params["head.w"], &params["head.b"])?;
    let train_logits = affine_logits(&train_feats, &params["head.w"], &params["head.b"])?;
    Ok(FinetuneOutput {
        eval_accuracy: loss::argmax_accuracy(&eval_logits, &eval_labels)?,
        train_accuracy: loss::argmax_accuracy(&train_logits, &train_labels)?,
        params,
        records,
    })
}

/// Linear probe: fine-tune with the backbone frozen.
pub fn linear_probe(
    variant: Variant,
    dims: ModelDims,
    pretrained: &ParamMap,
    cfg: &FinetuneConfig,
    train: &[SampleRecord],
    eval: &[SampleRecord],
) -> Result<FinetuneOutput> {
    let mut cfg = cfg.clone();
    cfg.freeze_backbone = true;
    finetune(variant, dims, pretrained, &cfg, train, eval)
}
