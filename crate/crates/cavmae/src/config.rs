//! Flat key=value experiment configuration.
//!
//! Every command has a fixed key vocabulary with defaults. Values come from,
//! in increasing precedence: built-in defaults, a config file (`key=value`
//! lines, `#` comments), the `CAVMAE_SEED` environment variable (seed only),
//! and command-line `--key value` overrides. Unknown keys anywhere are usage
//! errors.

use std::collections::BTreeMap;

use cavmae_core::loss::LossConfig;
use cavmae_core::mask::MaskStrategy;
use cavmae_core::model::{ClassifierFeature, ModalityMode, ModelDims, Variant};
use cavmae_core::optim::{AdamConfig, ScheduleConfig};
use cavmae_core::synth::CorpusSpec;
use cavmae_core::trainer::{FinetuneConfig, TrainConfig};

use crate::error::{CliError, Result};

/// One configuration key: name, default value, help text.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn k(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default, help }
}

const SEED: &[KeySpec] = &[k("seed", "0", "master RNG seed (u64)")];

const CORPUS: &[KeySpec] = &[
    k("n_classes", "8", "number of classes (2..=8)"),
    k("samples_per_class", "64", "samples generated per class"),
    k("target_frames", "128", "spectrogram time frames"),
    k("n_mels", "32", "mel bins"),
    k("image_size", "32", "square image side"),
    k("channels", "3", "image channels (1..=3)"),
    k("n_frames", "4", "video frames per clip"),
    k("patch_size", "8", "square patch side"),
    k("noise_std", "0.5", "additive noise level"),
    k(
        "correspondence_prob",
        "1.0",
        "probability a clip's audio and visual motifs agree",
    ),
];

const DIMS: &[KeySpec] = &[
    k("d_enc", "32", "encoder width"),
    k("enc_layers_modal", "2", "modality-specific encoder layers"),
    k("enc_layers_joint", "1", "shared joint encoder layers"),
    k("n_heads", "4", "encoder attention heads"),
    k("d_dec", "16", "decoder width"),
    k("dec_layers", "2", "decoder layers"),
    k("dec_heads", "4", "decoder attention heads"),
];

const LOSS: &[KeySpec] = &[
    k("tau", "0.05", "contrastive temperature"),
    k("lambda_c", "0.01", "contrastive weight in the combined loss"),
    k("target_norm", "true", "normalize reconstruction targets per patch"),
    k("symmetric", "false", "symmetrize the contrastive loss"),
    k("patch_sum", "false", "sum (not mean) squared error within a patch"),
];

const OPT: &[KeySpec] = &[
    k("base_lr", "1e-3", "base learning rate"),
    k("head_lr_multiplier", "10", "classifier-head learning-rate multiplier"),
    k("decay_start_epoch", "10", "first epoch of learning-rate decay"),
    k("decay_rate", "0.5", "multiplicative decay factor"),
    k("decay_step", "5", "epochs between decays"),
    k("beta1", "0.95", "Adam first-moment decay"),
    k("beta2", "0.999", "Adam second-moment decay"),
    k("weight_decay", "5e-7", "decoupled weight decay"),
];

const MASKS: &[KeySpec] = &[
    k("mask_ratio_audio", "0.75", "fraction of audio tokens masked"),
    k("mask_ratio_visual", "0.75", "fraction of visual tokens masked"),
    k(
        "mask_audio",
        "uniform",
        "audio strategy: uniform|time|frequency|time_frequency",
    ),
    k(
        "mask_visual",
        "uniform",
        "visual strategy: uniform|time|frequency|time_frequency",
    ),
];

const PRETRAIN: &[KeySpec] = &[
    k("data", "", "dataset path (.cavd); empty = built-in toy corpus"),
    k(
        "variant",
        "cav_mae",
        "model variant: audio_mae|visual_mae|cav|vanilla_av_mae|av_mae|cav_mae",
    ),
    k("epochs", "10", "training epochs"),
    k("batch_size", "16", "samples per optimizer step"),
    k("time_shift", "true", "random circular time shift on audio"),
    k("patch_size", "8", "square patch side"),
];

const CKPT_DATA: &[KeySpec] = &[
    k("checkpoint", "", "checkpoint path (.cavc), required"),
    k("data", "", "dataset path (.cavd); empty = built-in toy corpus"),
];

const CLASSIFIER: &[KeySpec] = &[
    k("modality", "av", "input modality: a|v|av"),
    k("feature", "mm", "classifier feature: mm|sm|mm_sm"),
    k("n_classes", "8", "classifier output classes"),
    k("epochs", "20", "classifier training epochs"),
    k("batch_size", "16", "classifier batch size"),
    k("eval_every", "0", "epochs between held-out evaluations (0 = final only)"),
];

const CLS_OPT: &[KeySpec] = &[
    k("base_lr", "1e-2", "base learning rate"),
    k("head_lr_multiplier", "1", "classifier-head learning-rate multiplier"),
    k("decay_start_epoch", "10", "first epoch of learning-rate decay"),
    k("decay_rate", "0.5", "multiplicative decay factor"),
    k("decay_step", "5", "epochs between decays"),
    k("beta1", "0.95", "Adam first-moment decay"),
    k("beta2", "0.999", "Adam second-moment decay"),
    k("weight_decay", "5e-7", "decoupled weight decay"),
];

const RETRIEVE: &[KeySpec] = &[k("ks", "1,5,10", "comma-separated recall cutoffs")];

const RECONSTRUCT: &[KeySpec] = &[
    k("strategy", "uniform", "audio mask strategy for the dumped samples"),
    k("ratio", "0.75", "audio mask ratio for the dumped samples"),
    k("n_samples", "4", "evaluation samples to reconstruct and dump"),
];

const LOCALIZE: &[KeySpec] = &[k("n_dump", "4", "heatmaps to write as grids + images")];

const SWEEP: &[KeySpec] = &[
    k(
        "strategies",
        "uniform,time,frequency,time_frequency",
        "comma-separated mask strategies",
    ),
    k(
        "ratios",
        "0.15,0.3,0.5,0.65,0.75,0.85",
        "comma-separated mask ratios",
    ),
];

const SHUFFLE: &[KeySpec] = &[
    k("shuffle_seed", "1", "seed for the pair derangement"),
    k("probe_epochs", "20", "linear-probe epochs"),
    k("probe_batch_size", "16", "linear-probe batch size"),
    k("probe_lr", "1e-2", "linear-probe base learning rate"),
    k("modality", "av", "probe input modality: a|v|av"),
    k("feature", "mm", "probe feature: mm|sm|mm_sm"),
    k("n_classes", "8", "probe output classes"),
];

const GRADCHECK: &[KeySpec] = &[
    k("h", "1e-5", "central-difference step"),
    k("tol", "1e-4", "max relative error accepted"),
    k(
        "max_probes",
        "4",
        "probed elements per parameter tensor (0 = every element)",
    ),
    k("batch_size", "2", "batch size of the checked objective"),
];

/// Key vocabulary for one command. Order here fixes `--help` order; lookups
/// are name-based so duplicates across groups are a bug.
pub fn keys_for(command: &str) -> Option<Vec<KeySpec>> {
    let groups: Vec<&[KeySpec]> = match command {
        "gen-data" => vec![SEED, CORPUS],
        "pretrain" => vec![SEED, PRETRAIN, DIMS, LOSS, OPT, MASKS],
        "finetune" | "probe" => vec![SEED, CKPT_DATA, CLASSIFIER, CLS_OPT],
        "retrieve" => vec![SEED, CKPT_DATA, RETRIEVE],
        "reconstruct" => vec![SEED, CKPT_DATA, RECONSTRUCT],
        "localize" => vec![SEED, CKPT_DATA, LOCALIZE],
        "sweep" => vec![SEED, CKPT_DATA, SWEEP],
        "shuffle-exp" => vec![SEED, PRETRAIN, DIMS, LOSS, OPT, MASKS, SHUFFLE],
        "gradcheck" => {
            vec![SEED, GRADCHECK, DIMS, LOSS, MASKS, CORPUS, PRETRAIN_TOY]
        }
        _ => return None,
    };
    let mut out = Vec::new();
    for g in groups {
        for &ks in g {
            debug_assert!(
                out.iter().all(|o: &KeySpec| o.key != ks.key),
                "duplicate key {}",
                ks.key
            );
            out.push(ks);
        }
    }
    Some(out)
}

/// gradcheck shares the model-side pretrain keys but defaults to a tiny
/// geometry so a full probe stays fast.
const PRETRAIN_TOY: &[KeySpec] = &[
    k(
        "variant",
        "cav_mae",
        "model variant: audio_mae|visual_mae|cav|vanilla_av_mae|av_mae|cav_mae",
    ),
    k("time_shift", "true", "random circular time shift on audio"),
];

/// Fully resolved configuration for one command.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub command: String,
    values: BTreeMap<String, String>,
}

/// Parses `key=value` lines; `#`-prefixed and blank lines are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::usage(format!(
                "config line {}: expected key=value, got '{raw}'",
                ln + 1
            )));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

impl ExperimentConfig {
    /// Applies the precedence chain defaults < file < CAVMAE_SEED < CLI.
    /// Unknown keys in the file or the override list are usage errors.
    pub fn resolve(
        command: &str,
        file_pairs: &[(String, String)],
        env_seed: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let keys = keys_for(command)
            .ok_or_else(|| CliError::usage(format!("unknown command '{command}'")))?;
        let mut values: BTreeMap<String, String> = keys
            .iter()
            .map(|ks| (ks.key.to_string(), ks.default.to_string()))
            .collect();
        let known = |key: &str| keys.iter().any(|ks| ks.key == key);
        for (key, value) in file_pairs {
            if !known(key) {
                return Err(CliError::usage(format!(
                    "unknown config key '{key}' for command '{command}'"
                )));
            }
            values.insert(key.clone(), value.clone());
        }
        if let Some(seed) = env_seed {
            seed.trim().parse::<u64>().map_err(|_| {
                CliError::usage(format!("CAVMAE_SEED '{seed}' is not a valid u64"))
            })?;
            values.insert("seed".to_string(), seed.trim().to_string());
        }
        for (key, value) in overrides {
            if !known(key) {
                return Err(CliError::usage(format!(
                    "unknown config key '{key}' for command '{command}'"
                )));
            }
            values.insert(key.clone(), value.clone());
        }
        Ok(ExperimentConfig {
            command: command.to_string(),
            values,
        })
    }

    /// Sorted `key=value` lines; the canonical form hashed into the run-dir
    /// name and echoed into the run directory.
    pub fn canonical_lines(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.values {
            out.push_str(key);
            out.push('=');
            out.push_str(value);
            out.push('\n');
        }
        out
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::usage(format!("key '{key}' not in this command's vocabulary")))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let raw = self.get_str(key)?;
        raw.parse::<T>()
            .map_err(|_| CliError::usage(format!("key '{key}': cannot parse '{raw}' as {what}")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.parse_as(key, "u64")
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.parse_as(key, "usize")
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.parse_as(key, "f64")
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get_str(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CliError::usage(format!(
                "key '{key}': expected a boolean, got '{other}'"
            ))),
        }
    }

    pub fn get_list_f64(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.get_str(key)?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    CliError::usage(format!("key '{key}': cannot parse '{s}' as f64"))
                })
            })
            .collect()
    }

    pub fn get_list_usize(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.get_str(key)?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>().map_err(|_| {
                    CliError::usage(format!("key '{key}': cannot parse '{s}' as usize"))
                })
            })
            .collect()
    }

    pub fn get_strategy(&self, key: &str) -> Result<MaskStrategy> {
        MaskStrategy::parse(self.get_str(key)?)
            .map_err(|e| CliError::usage(format!("key '{key}': {e}")))
    }

    pub fn get_strategies(&self, key: &str) -> Result<Vec<MaskStrategy>> {
        self.get_str(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| MaskStrategy::parse(s).map_err(|e| CliError::usage(format!("key '{key}': {e}"))))
            .collect()
    }

    pub fn get_variant(&self, key: &str) -> Result<Variant> {
        Variant::parse(self.get_str(key)?).map_err(|e| CliError::usage(format!("key '{key}': {e}")))
    }

    pub fn get_modality(&self, key: &str) -> Result<ModalityMode> {
        ModalityMode::parse(self.get_str(key)?)
            .map_err(|e| CliError::usage(format!("key '{key}': {e}")))
    }

    pub fn get_feature(&self, key: &str) -> Result<ClassifierFeature> {
        ClassifierFeature::parse(self.get_str(key)?)
            .map_err(|e| CliError::usage(format!("key '{key}': {e}")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get_u64("seed")
    }

    // ---- Builders into the numeric crate's config structs ----

    pub fn corpus_spec(&self) -> Result<CorpusSpec> {
        Ok(CorpusSpec {
            n_classes: self.get_usize("n_classes")?,
            samples_per_class: self.get_usize("samples_per_class")?,
            target_frames: self.get_usize("target_frames")?,
            n_mels: self.get_usize("n_mels")?,
            image_size: self.get_usize("image_size")?,
            channels: self.get_usize("channels")?,
            n_frames: self.get_usize("n_frames")?,
            patch_size: self.get_usize("patch_size")?,
            noise_std: self.get_f64("noise_std")?,
            correspondence_prob: self.get_f64("correspondence_prob")?,
            seed: self.seed()?,
        })
    }

    pub fn model_dims(&self) -> Result<ModelDims> {
        Ok(ModelDims {
            d_enc: self.get_usize("d_enc")?,
            enc_layers_modal: self.get_usize("enc_layers_modal")?,
            enc_layers_joint: self.get_usize("enc_layers_joint")?,
            n_heads: self.get_usize("n_heads")?,
            d_dec: self.get_usize("d_dec")?,
            dec_layers: self.get_usize("dec_layers")?,
            dec_heads: self.get_usize("dec_heads")?,
        })
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            tau: self.get_f64("tau")?,
            lambda_c: self.get_f64("lambda_c")?,
            target_norm: self.get_bool("target_norm")?,
            symmetric: self.get_bool("symmetric")?,
            patch_sum: self.get_bool("patch_sum")?,
        })
    }

    pub fn adam(&self, prefix: &str) -> Result<AdamConfig> {
        let p = |base: &str| format!("{prefix}{base}");
        Ok(AdamConfig {
            beta1: self.get_f64(&p("beta1"))?,
            beta2: self.get_f64(&p("beta2"))?,
            weight_decay: self.get_f64(&p("weight_decay"))?,
            epsilon: AdamConfig::default().epsilon,
        })
    }

    pub fn schedule(&self, prefix: &str) -> Result<ScheduleConfig> {
        let p = |base: &str| format!("{prefix}{base}");
        Ok(ScheduleConfig {
            base_lr: self.get_f64(&p("base_lr"))?,
            head_lr_multiplier: self.get_f64(&p("head_lr_multiplier"))?,
            decay_start_epoch: self.get_usize(&p("decay_start_epoch"))?,
            decay_rate: self.get_f64(&p("decay_rate"))?,
            decay_step: self.get_usize(&p("decay_step"))?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            variant: self.get_variant("variant")?,
            dims: self.model_dims()?,
            loss: self.loss_config()?,
            mask_ratio_audio: self.get_f64("mask_ratio_audio")?,
            mask_ratio_visual: self.get_f64("mask_ratio_visual")?,
            mask_audio: self.get_strategy("mask_audio")?,
            mask_visual: self.get_strategy("mask_visual")?,
            epochs: self.get_usize("epochs")?,
            batch_size: self.get_usize("batch_size")?,
            schedule: self.schedule("")?,
            adam: self.adam("")?,
            seed: self.seed()?,
            time_shift: self.get_bool("time_shift")?,
            patch_size: self.get_usize("patch_size")?,
        })
    }

    /// Classifier config; `patch_size` comes from the loaded checkpoint, and
    /// `freeze` is fixed by the command (finetune vs probe).
    pub fn finetune_config(&self, patch_size: usize, freeze: bool) -> Result<FinetuneConfig> {
        Ok(FinetuneConfig {
            modality: self.get_modality("modality")?,
            feature: self.get_feature("feature")?,
            n_classes: self.get_usize("n_classes")?,
            epochs: self.get_usize("epochs")?,
            batch_size: self.get_usize("batch_size")?,
            schedule: self.schedule("")?,
            adam: self.adam("")?,
            seed: self.seed()?,
            freeze_backbone: freeze,
            patch_size,
            eval_every: self.get_usize("eval_every")?,
        })
    }
}
