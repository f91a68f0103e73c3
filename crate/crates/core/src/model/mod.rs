//! The parameterized model: projections, embeddings, modality encoders, the
//! shared-weight multi-stream joint encoder, the decoder with its mask token,
//! and classification heads.

mod forward;
mod params;

pub use forward::{
    assemble_feature, feature_dim, ClassifierFeature, Modality, ModelBuild, StreamOutputs,
};
pub use params::{
    count_params, expected_param_count, head_specs, init_from_specs, init_params, param_specs,
    validate_params, ParamInit, ParamMap, ParamSpec,
};

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::pos::positional_embedding_2d;
use crate::tensor::Tensor;

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-6;

/// Transformer dimensions. Defaults are the desk-scale configuration; larger
/// configurations (e.g. 768-d, 11+1 layers, 512-d/8-layer decoder) plug into
/// the same fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_enc: usize,
    pub enc_layers_modal: usize,
    pub enc_layers_joint: usize,
    pub n_heads: usize,
    pub d_dec: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_enc: 32,
            enc_layers_modal: 2,
            enc_layers_joint: 1,
            n_heads: 4,
            d_dec: 16,
            dec_layers: 2,
            dec_heads: 4,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_enc == 0 || self.n_heads == 0 || self.d_enc % self.n_heads != 0 {
            return Err(CoreError::invalid(alloc::format!(
                "d_enc {} must be a positive multiple of n_heads {}",
                self.d_enc,
                self.n_heads
            )));
        }
        if self.d_dec == 0 || self.dec_heads == 0 || self.d_dec % self.dec_heads != 0 {
            return Err(CoreError::invalid(alloc::format!(
                "d_dec {} must be a positive multiple of dec_heads {}",
                self.d_dec,
                self.dec_heads
            )));
        }
        if self.enc_layers_joint == 0 {
            return Err(CoreError::invalid("need at least one joint layer"));
        }
        Ok(())
    }
}

/// Token-grid geometry shared by tokenizer, model, and datagen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGeometry {
    pub patch_size: usize,
    /// Audio grid: rows = time patches, cols = frequency patches.
    pub audio_rows: usize,
    pub audio_cols: usize,
    pub visual_rows: usize,
    pub visual_cols: usize,
    pub visual_channels: usize,
}

impl Default for TokenGeometry {
    fn default() -> Self {
        // 128×32 spectrogram and 32×32×3 image, both at patch 8.
        TokenGeometry {
            patch_size: 8,
            audio_rows: 16,
            audio_cols: 4,
            visual_rows: 4,
            visual_cols: 4,
            visual_channels: 3,
        }
    }
}

impl TokenGeometry {
    /// Derives the grid from raw input dimensions, checking divisibility.
    pub fn from_inputs(
        target_frames: usize,
        n_mels: usize,
        image_h: usize,
        image_w: usize,
        channels: usize,
        patch_size: usize,
    ) -> Result<Self> {
        for (name, v) in [
            ("target_frames", target_frames),
            ("n_mels", n_mels),
            ("image height", image_h),
            ("image width", image_w),
        ] {
            if patch_size == 0 || v % patch_size != 0 {
                return Err(CoreError::invalid(alloc::format!(
                    "{name} {v} not divisible by patch size {patch_size}"
                )));
            }
        }
        Ok(TokenGeometry {
            patch_size,
            audio_rows: target_frames / patch_size,
            audio_cols: n_mels / patch_size,
            visual_rows: image_h / patch_size,
            visual_cols: image_w / patch_size,
            visual_channels: channels,
        })
    }

    pub fn audio_tokens(&self) -> usize {
        self.audio_rows * self.audio_cols
    }

    pub fn visual_tokens(&self) -> usize {
        self.visual_rows * self.visual_cols
    }

    pub fn audio_patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn visual_patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.visual_channels
    }
}

/// The six trainable variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    AudioMae,
    VisualMae,
    Cav,
    VanillaAvMae,
    AvMae,
    CavMae,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::AudioMae => "audio_mae",
            Variant::VisualMae => "visual_mae",
            Variant::Cav => "cav",
            Variant::VanillaAvMae => "vanilla_av_mae",
            Variant::AvMae => "av_mae",
            Variant::CavMae => "cav_mae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "audio_mae" => Variant::AudioMae,
            "visual_mae" => Variant::VisualMae,
            "cav" => Variant::Cav,
            "vanilla_av_mae" => Variant::VanillaAvMae,
            "av_mae" => Variant::AvMae,
            "cav_mae" => Variant::CavMae,
            other => {
                return Err(CoreError::invalid(alloc::format!(
                    "unknown variant '{other}'"
                )))
            }
        })
    }

    /// Modality-specific encoder stacks plus the shared-weight joint layer
    /// with per-stream layer norms. The alternative is one fused stack.
    pub fn multi_stream(self) -> bool {
        matches!(self, Variant::Cav | Variant::AvMae | Variant::CavMae)
    }

    pub fn has_decoder(self) -> bool {
        !matches!(self, Variant::Cav)
    }

    pub fn has_contrastive(self) -> bool {
        matches!(self, Variant::Cav | Variant::CavMae)
    }

    pub fn uses_audio(self) -> bool {
        !matches!(self, Variant::VisualMae)
    }

    pub fn uses_visual(self) -> bool {
        !matches!(self, Variant::AudioMae)
    }
}

/// Which modalities feed the model at fine-tune or inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMode {
    Audio,
    Visual,
    Both,
}

impl ModalityMode {
    pub fn name(self) -> &'static str {
        match self {
            ModalityMode::Audio => "a",
            ModalityMode::Visual => "v",
            ModalityMode::Both => "av",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "a" | "audio" => ModalityMode::Audio,
            "v" | "visual" => ModalityMode::Visual,
            "av" | "both" => ModalityMode::Both,
            other => {
                return Err(CoreError::invalid(alloc::format!(
                    "unknown modality mode '{other}' (expected a, v, or av)"
                )))
            }
        })
    }
}

/// Precomputed sinusoidal tables for encoder and decoder widths.
#[derive(Debug, Clone)]
pub struct PosTables {
    pub audio_enc: Tensor,
    pub visual_enc: Tensor,
    pub audio_dec: Tensor,
    pub visual_dec: Tensor,
}

impl PosTables {
    pub fn new(dims: &ModelDims, geo: &TokenGeometry) -> Result<Self> {
        Ok(PosTables {
            audio_enc: positional_embedding_2d(geo.audio_rows, geo.audio_cols, dims.d_enc)?,
            visual_enc: positional_embedding_2d(geo.visual_rows, geo.visual_cols, dims.d_enc)?,
            audio_dec: positional_embedding_2d(geo.audio_rows, geo.audio_cols, dims.d_dec)?,
            visual_dec: positional_embedding_2d(geo.visual_rows, geo.visual_cols, dims.d_dec)?,
        })
    }
}

/// Rows of a positional table at the given token indices.
pub fn table_rows(table: &Tensor, idx: &[usize]) -> Tensor {
    let (_, d) = table.dims2().expect("positional table is a matrix");
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(table.row(i));
    }
    Tensor::new(alloc::vec![idx.len(), d], data).expect("consistent shape")
}
