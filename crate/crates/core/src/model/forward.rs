//! Graph construction for every forward pathway: token embedding, modality
//! encoders, the three-stream joint encoder, the decoder, and heads.
//!
//! All builders route parameters through one cache, so a tensor used by
//! several streams (the shared joint MSA/MLP) appears as a single graph leaf
//! and its gradient accumulates across streams automatically.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{table_rows, ModelDims, ParamMap, PosTables, TokenGeometry, Variant, LN_EPS};
use crate::error::{CoreError, Result};
use crate::fmath;
use crate::graph::{Gradients, Graph, NodeId};
use crate::mask::{apply_mask, MaskPlan};
use crate::tensor::Tensor;

/// Which modality a tensor belongs to; doubles as the parameter-name suffix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn key(self) -> &'static str {
        match self {
            Modality::Audio => "a",
            Modality::Visual => "v",
        }
    }
}

/// Feature fed to the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierFeature {
    /// Mean-pooled multi-modal stream tokens.
    Mm,
    /// Concatenated single-modality stream vectors (or the present one alone
    /// in single-modality mode).
    Sm,
    /// Elementwise sum of the pooled multi-modal and single-modality vectors.
    MmSm,
}

impl ClassifierFeature {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierFeature::Mm => "mm",
            ClassifierFeature::Sm => "sm",
            ClassifierFeature::MmSm => "mm_sm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "mm" => ClassifierFeature::Mm,
            "sm" => ClassifierFeature::Sm,
            "mm_sm" => ClassifierFeature::MmSm,
            other => {
                return Err(CoreError::invalid(format!(
                    "unknown feature source '{other}' (expected mm, sm, or mm_sm)"
                )))
            }
        })
    }
}

/// Outputs of one encoded sample.
#[derive(Debug, Clone, Copy)]
pub struct StreamOutputs {
    /// Pooled audio-stream vector (absent when the variant or the call skips
    /// the single-modality streams).
    pub c_a: Option<NodeId>,
    /// Pooled visual-stream vector.
    pub c_v: Option<NodeId>,
    /// Token sequence of the fused pathway (multi-modal stream, or the only
    /// stack's output), audio tokens first.
    pub tokens: NodeId,
    pub audio_unmasked: usize,
    pub visual_unmasked: usize,
}

/// Builder tying a graph to a parameter map for one forward construction.
pub struct ModelBuild<'g, 'p> {
    pub g: &'g mut Graph,
    params: &'p ParamMap,
    ids: BTreeMap<String, NodeId>,
    pub dims: ModelDims,
    pub geo: TokenGeometry,
    pub variant: Variant,
}

impl<'g, 'p> ModelBuild<'g, 'p> {
    pub fn new(
        g: &'g mut Graph,
        params: &'p ParamMap,
        dims: ModelDims,
        geo: TokenGeometry,
        variant: Variant,
    ) -> Result<Self> {
        dims.validate()?;
        Ok(ModelBuild {
            g,
            params,
            ids: BTreeMap::new(),
            dims,
            geo,
            variant,
        })
    }

    /// Graph leaf for a named parameter (one leaf per name per graph).
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| CoreError::invalid(format!("unknown parameter '{name}'")))?;
        let id = self.g.param(t.clone());
        self.ids.insert(name.into(), id);
        Ok(id)
    }

    /// Drains accumulated leaf gradients into a name-keyed map. Parameters
    /// never touched by the loss are absent (structural zeros).
    pub fn into_grad_map(self, grads: &mut Gradients) -> ParamMap {
        let mut out = ParamMap::new();
        for (name, id) in self.ids {
            if let Some(g) = grads.take(id) {
                out.insert(name, g);
            }
        }
        out
    }

    /// `x·W + b` with parameters `{prefix}.w`, `{prefix}.b`.
    pub fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let xw = self.g.matmul(x, w)?;
        self.g.add(xw, b)
    }

    fn layer_norm_named(&mut self, x: NodeId, base: &str) -> Result<NodeId> {
        let gain = self.param(&format!("{base}.g"))?;
        let bias = self.param(&format!("{base}.b"))?;
        self.g.layer_norm(x, gain, bias, LN_EPS)
    }

    /// Multi-head scaled dot-product self-attention with parameters under
    /// `{prefix}.attn`.
    fn attention(&mut self, x: NodeId, prefix: &str, n_heads: usize) -> Result<NodeId> {
        let d = self.g.value(x).dims2()?.1;
        let dh = d / n_heads;
        let q = self.linear_qkv(x, prefix, "q")?;
        let k = self.linear_qkv(x, prefix, "k")?;
        let v = self.linear_qkv(x, prefix, "v")?;
        let scale = 1.0 / fmath::sqrt(dh as f64);
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
            let qh = self.g.gather_cols(q, &cols)?;
            let kh = self.g.gather_cols(k, &cols)?;
            let vh = self.g.gather_cols(v, &cols)?;
            let kt = self.g.transpose(kh)?;
            let scores = self.g.matmul(qh, kt)?;
            let scaled = self.g.scale(scores, scale);
            let attn = self.g.softmax_rows(scaled)?;
            heads.push(self.g.matmul(attn, vh)?);
        }
        let mixed = self.g.concat_cols(&heads)?;
        let wo = self.param(&format!("{prefix}.attn.wo"))?;
        let bo = self.param(&format!("{prefix}.attn.bo"))?;
        let out = self.g.matmul(mixed, wo)?;
        self.g.add(out, bo)
    }

    fn linear_qkv(&mut self, x: NodeId, prefix: &str, which: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.attn.w{which}"))?;
        let b = self.param(&format!("{prefix}.attn.b{which}"))?;
        let xw = self.g.matmul(x, w)?;
        self.g.add(xw, b)
    }

    /// Pre-norm transformer layer:
    /// `x′ = MSA(LN1(x)) + x`, `y = MLP(LN2(x′)) + x′`.
    /// `ln_infix` selects the stream-specific LN pair of the joint layer.
    pub fn transformer_layer(
        &mut self,
        x: NodeId,
        prefix: &str,
        ln_infix: Option<&str>,
        n_heads: usize,
    ) -> Result<NodeId> {
        if self.g.value(x).dims2()?.0 == 0 {
            return Err(CoreError::invalid(
                "transformer layer over empty token sequence",
            ));
        }
        let ln_base = |ln: &str| match ln_infix {
            Some(infix) => format!("{prefix}.{ln}.{infix}"),
            None => format!("{prefix}.{ln}"),
        };
        let normed = self.layer_norm_named(x, &ln_base("ln1"))?;
        let attended = self.attention(normed, prefix, n_heads)?;
        let x1 = self.g.add(attended, x)?;
        let normed2 = self.layer_norm_named(x1, &ln_base("ln2"))?;
        let h1 = self.mlp_in(normed2, prefix)?;
        let act = self.g.gelu(h1);
        let h2 = self.mlp_out(act, prefix)?;
        self.g.add(h2, x1)
    }

    fn mlp_in(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.mlp.w1"))?;
        let b = self.param(&format!("{prefix}.mlp.b1"))?;
        let xw = self.g.matmul(x, w)?;
        self.g.add(xw, b)
    }

    fn mlp_out(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.mlp.w2"))?;
        let b = self.param(&format!("{prefix}.mlp.b2"))?;
        let xw = self.g.matmul(x, w)?;
        self.g.add(xw, b)
    }

    /// Sequential stack `{base}.l0 .. {base}.l{layers-1}`.
    pub fn encode_stack(
        &mut self,
        mut x: NodeId,
        base: &str,
        layers: usize,
        n_heads: usize,
    ) -> Result<NodeId> {
        for l in 0..layers {
            x = self.transformer_layer(x, &format!("{base}.l{l}"), None, n_heads)?;
        }
        Ok(x)
    }

    /// Projects kept patches and adds type + positional embeddings:
    /// `Proj(patch) + E_type + E_pos`, already restricted to unmasked rows.
    pub fn embed_tokens(
        &mut self,
        patches: &Tensor,
        modality: Modality,
        plan: &MaskPlan,
        tables: &PosTables,
    ) -> Result<NodeId> {
        let kept = apply_mask(patches, plan)?;
        let expected = match modality {
            Modality::Audio => self.geo.audio_patch_len(),
            Modality::Visual => self.geo.visual_patch_len(),
        };
        if kept.dims2()?.1 != expected {
            return Err(CoreError::invalid(format!(
                "{} patch length {} does not match projection input {expected}",
                modality.key(),
                kept.dims2()?.1
            )));
        }
        let table = match modality {
            Modality::Audio => &tables.audio_enc,
            Modality::Visual => &tables.visual_enc,
        };
        let pos = table_rows(table, &plan.unmasked_idx);
        let x = self.g.constant(kept);
        let projected = self.linear(x, &format!("proj.{}", modality.key()))?;
        let ty = self.param(&format!("type.{}", modality.key()))?;
        let typed = self.g.add(projected, ty)?;
        let pos_c = self.g.constant(pos);
        self.g.add(typed, pos_c)
    }

    /// Runs the joint layer stack for one stream (its own LN pair per layer).
    fn joint_stream(&mut self, mut x: NodeId, ln_infix: &str) -> Result<NodeId> {
        for l in 0..self.dims.enc_layers_joint {
            x = self.transformer_layer(x, &format!("joint.l{l}"), Some(ln_infix), self.dims.n_heads)?;
        }
        Ok(x)
    }

    /// Encodes a full audio-visual pair for the variant's architecture.
    ///
    /// `with_streams` additionally runs the two single-modality streams of
    /// the joint layer and pools them into `c_a`/`c_v` (required for the
    /// contrastive loss; skippable when only reconstruction is needed).
    /// For single-stack variants the stream vectors are never produced here —
    /// use [`ModelBuild::encode_single`] per modality instead.
    pub fn encode_pair(
        &mut self,
        audio: &Tensor,
        audio_plan: &MaskPlan,
        visual: &Tensor,
        visual_plan: &MaskPlan,
        tables: &PosTables,
        with_streams: bool,
    ) -> Result<StreamOutputs> {
        if !(self.variant.uses_audio() && self.variant.uses_visual()) {
            return Err(CoreError::invalid(format!(
                "variant {} does not take audio-visual pairs",
                self.variant.name()
            )));
        }
        let a_emb = self.embed_tokens(audio, Modality::Audio, audio_plan, tables)?;
        let v_emb = self.embed_tokens(visual, Modality::Visual, visual_plan, tables)?;
        let (ua, uv) = (
            audio_plan.unmasked_idx.len(),
            visual_plan.unmasked_idx.len(),
        );
        if self.variant.multi_stream() {
            let heads = self.dims.n_heads;
            let a_enc = self.encode_stack(a_emb, "enc.a", self.dims.enc_layers_modal, heads)?;
            let v_enc = self.encode_stack(v_emb, "enc.v", self.dims.enc_layers_modal, heads)?;
            let av_in = self.g.concat_rows(&[a_enc, v_enc])?;
            let x = self.joint_stream(av_in, "av")?;
            let (c_a, c_v) = if with_streams {
                let a_s = self.joint_stream(a_enc, "a")?;
                let v_s = self.joint_stream(v_enc, "v")?;
                (
                    Some(self.g.mean_axis(a_s, 0)?),
                    Some(self.g.mean_axis(v_s, 0)?),
                )
            } else {
                (None, None)
            };
            Ok(StreamOutputs {
                c_a,
                c_v,
                tokens: x,
                audio_unmasked: ua,
                visual_unmasked: uv,
            })
        } else {
            let fused_in = self.g.concat_rows(&[a_emb, v_emb])?;
            let layers = self.dims.enc_layers_modal + self.dims.enc_layers_joint;
            let x = self.encode_stack(fused_in, "enc.j", layers, self.dims.n_heads)?;
            Ok(StreamOutputs {
                c_a: None,
                c_v: None,
                tokens: x,
                audio_unmasked: ua,
                visual_unmasked: uv,
            })
        }
    }

    /// Encodes one modality alone (single-modality variants, the independent
    /// retrieval passes, and single-modality fine-tuning). Returns the final
    /// token sequence and its mean-pooled vector.
    pub fn encode_single(
        &mut self,
        modality: Modality,
        patches: &Tensor,
        plan: &MaskPlan,
        tables: &PosTables,
    ) -> Result<(NodeId, NodeId)> {
        let uses = match modality {
            Modality::Audio => self.variant.uses_audio(),
            Modality::Visual => self.variant.uses_visual(),
        };
        if !uses {
            return Err(CoreError::invalid(format!(
                "variant {} has no {} branch",
                self.variant.name(),
                modality.key()
            )));
        }
        let emb = self.embed_tokens(patches, modality, plan, tables)?;
        let tokens = if self.variant.multi_stream() {
            let enc = self.encode_stack(
                emb,
                &format!("enc.{}", modality.key()),
                self.dims.enc_layers_modal,
                self.dims.n_heads,
            )?;
            self.joint_stream(enc, modality.key())?
        } else {
            let layers = self.dims.enc_layers_modal + self.dims.enc_layers_joint;
            self.encode_stack(emb, "enc.j", layers, self.dims.n_heads)?
        };
        let pooled = self.g.mean_axis(tokens, 0)?;
        Ok((tokens, pooled))
    }

    /// Decoder: restores full-length sequences by scattering encoded tokens
    /// to their original positions with the shared mask token in the gaps,
    /// adds decoder-side type and positional embeddings, runs the decoder
    /// stack over both modalities jointly, and projects to patch space.
    /// Returns full-length predictions per present modality.
    pub fn decode(
        &mut self,
        x: NodeId,
        audio_plan: Option<&MaskPlan>,
        visual_plan: Option<&MaskPlan>,
        tables: &PosTables,
    ) -> Result<(Option<NodeId>, Option<NodeId>)> {
        if !self.variant.has_decoder() {
            return Err(CoreError::invalid(format!(
                "variant {} has no decoder",
                self.variant.name()
            )));
        }
        let ua = audio_plan.map_or(0, |p| p.unmasked_idx.len());
        let uv = visual_plan.map_or(0, |p| p.unmasked_idx.len());
        let rows = self.g.value(x).dims2()?.0;
        if rows != ua + uv {
            return Err(CoreError::invalid(format!(
                "decoder input has {rows} tokens but plans cover {ua}+{uv}"
            )));
        }
        let xe = self.linear(x, "dec.embed")?;
        let mask_token = self.param("mask_token")?;
        let mut parts = Vec::new();
        let mut full_counts = Vec::new();
        if let Some(plan) = audio_plan {
            let idx: Vec<usize> = (0..ua).collect();
            let part = self.g.gather_rows(xe, &idx)?;
            let full = self
                .g
                .scatter_rows(part, mask_token, &plan.unmasked_idx, plan.n_tokens())?;
            let ty = self.param("dtype.a")?;
            let typed = self.g.add(full, ty)?;
            let pos = self.g.constant(tables.audio_dec.clone());
            parts.push(self.g.add(typed, pos)?);
            full_counts.push(plan.n_tokens());
        }
        if let Some(plan) = visual_plan {
            let idx: Vec<usize> = (ua..ua + uv).collect();
            let part = self.g.gather_rows(xe, &idx)?;
            let full = self
                .g
                .scatter_rows(part, mask_token, &plan.unmasked_idx, plan.n_tokens())?;
            let ty = self.param("dtype.v")?;
            let typed = self.g.add(full, ty)?;
            let pos = self.g.constant(tables.visual_dec.clone());
            parts.push(self.g.add(typed, pos)?);
            full_counts.push(plan.n_tokens());
        }
        if parts.is_empty() {
            return Err(CoreError::invalid("decoder called with no modalities"));
        }
        let seq = if parts.len() == 1 {
            parts[0]
        } else {
            self.g.concat_rows(&parts)?
        };
        let decoded = self.encode_stack(seq, "dec", self.dims.dec_layers, self.dims.dec_heads)?;
        let mut offset = 0;
        let mut pred_a = None;
        let mut pred_v = None;
        if audio_plan.is_some() {
            let idx: Vec<usize> = (0..full_counts[0]).collect();
            let toks = self.g.gather_rows(decoded, &idx)?;
            pred_a = Some(self.linear(toks, "dec.out.a")?);
            offset = full_counts[0];
        }
        if visual_plan.is_some() {
            let count = *full_counts.last().expect("visual plan present");
            let idx: Vec<usize> = (offset..offset + count).collect();
            let toks = self.g.gather_rows(decoded, &idx)?;
            pred_v = Some(self.linear(toks, "dec.out.v")?);
        }
        Ok((pred_a, pred_v))
    }

    /// Affine classification head over a feature row vector (or batch).
    pub fn classify(&mut self, features: NodeId) -> Result<NodeId> {
        self.linear(features, "head")
    }
}

/// Feature dimension for a head over the given source and modality presence.
pub fn feature_dim(source: ClassifierFeature, d_enc: usize, both_modalities: bool) -> usize {
    match source {
        ClassifierFeature::Mm | ClassifierFeature::MmSm => d_enc,
        ClassifierFeature::Sm => {
            if both_modalities {
                2 * d_enc
            } else {
                d_enc
            }
        }
    }
}

/// Assembles the head input from stream outputs.
///
/// MM: mean-pooled fused tokens. SM: `c_a ‖ c_v`. MM+SM: elementwise sum of
/// the pooled fused vector and both stream vectors.
pub fn assemble_feature(
    b: &mut ModelBuild,
    source: ClassifierFeature,
    streams: &StreamOutputs,
) -> Result<NodeId> {
    let need_streams = !matches!(source, ClassifierFeature::Mm);
    if need_streams && (streams.c_a.is_none() || streams.c_v.is_none()) {
        return Err(CoreError::invalid(format!(
            "feature source {} needs single-modality stream vectors",
            source.name()
        )));
    }
    match source {
        ClassifierFeature::Mm => b.g.mean_axis(streams.tokens, 0),
        ClassifierFeature::Sm => {
            let (ca, cv) = (streams.c_a.unwrap(), streams.c_v.unwrap());
            b.g.concat_cols(&[ca, cv])
        }
        ClassifierFeature::MmSm => {
            let pooled = b.g.mean_axis(streams.tokens, 0)?;
            let (ca, cv) = (streams.c_a.unwrap(), streams.c_v.unwrap());
            let s = b.g.add(pooled, ca)?;
            b.g.add(s, cv)
        }
    }
}
