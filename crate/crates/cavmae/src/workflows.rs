//! The ten workflows behind the CLI subcommands. Each takes the resolved
//! configuration, runs the corresponding numeric pipeline, writes every
//! artifact under the run directory, and returns human-readable summary
//! lines for stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cavmae_core::eval::{
    localization_heatmap, localization_hit_rate, reconstruction_mse_sweep, retrieval_eval,
    shuffle_experiment, EvalContext,
};
use cavmae_core::gradcheck::{finite_diff_check, GradCheckOptions};
use cavmae_core::graph::Graph;
use cavmae_core::loss;
use cavmae_core::mask::{sample_mask, MaskPlan};
use cavmae_core::model::{init_params, Modality, ModelBuild, ParamMap, PosTables};
use cavmae_core::patch::patchify;
use cavmae_core::rng::{self, stream};
use cavmae_core::synth::{generate_corpus, generate_sample, CorpusSpec, SampleRecord};
use cavmae_core::tensor::Tensor;
use cavmae_core::trainer::{
    batch_objective, finetune, pretrain, record_geometry, FinetuneConfig, PretrainView,
    TrainConfig,
};

use crate::checkpoint::{self, CheckpointMeta, HeadMeta};
use crate::config::ExperimentConfig;
use crate::container::{read_dataset, write_dataset, Dataset};
use crate::error::{CliError, Result};
use crate::{artifacts, manifest, run};

/// Resolved invocation: configuration plus its run directory.
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
}

/// Runs the command named in `cfg` with all outputs under
/// `runs_root/<command>-<hash>-s<seed>/`. Returns summary lines for stdout.
pub fn execute(cfg: ExperimentConfig, runs_root: &Path) -> Result<Vec<String>> {
    let (hash, dir) = run::run_dir(runs_root, &cfg)?;
    std::fs::create_dir_all(&dir)?;
    run::write_text(&dir.join("config.txt"), &cfg.canonical_lines())?;
    let ctx = RunContext { cfg, hash, dir };
    let mut lines = match ctx.cfg.command.as_str() {
        "gen-data" => gen_data(&ctx)?,
        "pretrain" => pretrain_cmd(&ctx)?,
        "finetune" => classifier_cmd(&ctx, false)?,
        "probe" => classifier_cmd(&ctx, true)?,
        "retrieve" => retrieve_cmd(&ctx)?,
        "reconstruct" => reconstruct_cmd(&ctx)?,
        "localize" => localize_cmd(&ctx)?,
        "sweep" => sweep_cmd(&ctx)?,
        "shuffle-exp" => shuffle_cmd(&ctx)?,
        "gradcheck" => gradcheck_cmd(&ctx)?,
        other => return Err(CliError::usage(format!("unknown command '{other}'"))),
    };
    lines.push(format!("run_dir {}", ctx.dir.display()));
    Ok(lines)
}

/// Built-in toy corpus used when no dataset path is configured: small enough
/// that a sanity-check pretrain finishes in seconds.
pub fn toy_spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        n_classes: 4,
        samples_per_class: 25,
        target_frames: 64,
        n_mels: 24,
        image_size: 16,
        channels: 1,
        n_frames: 2,
        patch_size: 8,
        noise_std: 0.5,
        correspondence_prob: 1.0,
        seed,
    }
}

/// Loads the dataset named by the `data` key, or generates the toy corpus
/// when the key is empty. Either way the records carry float32-quantized
/// values, so file-backed and generated runs are interchangeable.
fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg.get_str("data")?;
    if path.is_empty() {
        let corpus = generate_corpus(&toy_spec(cfg.seed()?))?;
        Ok(Dataset::from_corpus(&corpus))
    } else {
        read_dataset(Path::new(path))
    }
}

fn required_checkpoint(cfg: &ExperimentConfig) -> Result<(CheckpointMeta, ParamMap)> {
    let path = cfg.get_str("checkpoint")?;
    if path.is_empty() {
        return Err(CliError::usage(
            "this command needs --checkpoint <path-to-.cavc>",
        ));
    }
    checkpoint::read_checkpoint(Path::new(path))
}

fn eval_context(meta: &CheckpointMeta) -> Result<EvalContext> {
    Ok(EvalContext::new(
        meta.variant,
        meta.dims,
        meta.geo,
        meta.geo.patch_size,
    )?)
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

// ---------------------------------------------------------------- gen-data

fn gen_data(ctx: &RunContext) -> Result<Vec<String>> {
    let spec = ctx.cfg.corpus_spec()?;
    let corpus = generate_corpus(&spec)?;
    let ds = Dataset::from_corpus(&corpus);
    let out = ctx.dir.join("corpus.cavd");
    write_dataset(&out, &ds)?;
    Ok(vec![
        format!(
            "generated {} samples ({} train / {} eval) across {} classes",
            ds.record_count(),
            ds.train.len(),
            ds.eval.len(),
            spec.n_classes
        ),
        format!("dataset {}", out.display()),
    ])
}

// ---------------------------------------------------------------- pretrain

fn pretrain_cmd(ctx: &RunContext) -> Result<Vec<String>> {
    let ds = load_dataset(&ctx.cfg)?;
    let tc = ctx.cfg.train_config()?;
    let view = PretrainView::new(&ds.train);
    let out = pretrain(&tc, &view, None)?;
    let geo = record_geometry(tc.variant, tc.patch_size, &ds.train)?;
    let meta = CheckpointMeta {
        variant: tc.variant,
        dims: tc.dims,
        geo,
        loss: tc.loss,
        seed: tc.seed,
        epochs: tc.epochs,
        head: None,
    };
    let ck = ctx.dir.join("checkpoint.cavc");
    checkpoint::write_checkpoint(&ck, &meta, &out.params)?;
    let header = [
        ("command", ctx.cfg.command.clone()),
        ("config_hash", ctx.hash.clone()),
        ("variant", tc.variant.name().to_string()),
        ("n_train", ds.train.len().to_string()),
        ("epochs", tc.epochs.to_string()),
    ];
    run::write_text(
        &ctx.dir.join("manifest.txt"),
        &manifest::render_manifest(&header.each_ref().map(|(k, v)| (*k, v.clone())), &out.records),
    )?;
    let last = out
        .records
        .last()
        .ok_or_else(|| CliError::runtime("training produced no steps"))?;
    let mut lines = vec![format!(
        "pretrained {} for {} epochs on {} samples ({} steps)",
        tc.variant.name(),
        tc.epochs,
        ds.train.len(),
        out.records.len()
    )];
    lines.push(format!("final loss_total {}", fmt4(last.loss_total)));
    if let Some(r) = last.loss_r {
        lines.push(format!("final loss_r {}", fmt4(r)));
    }
    if let Some(c) = last.loss_c {
        lines.push(format!("final loss_c {}", fmt4(c)));
    }
    if let Some(m) = last.match_acc {
        lines.push(format!("final match_acc {}", fmt4(m)));
    }
    lines.push(format!("checkpoint {}", ck.display()));
    Ok(lines)
}

// ------------------------------------------------------- finetune / probe

fn classifier_cmd(ctx: &RunContext, freeze: bool) -> Result<Vec<String>> {
    let (meta, params) = required_checkpoint(&ctx.cfg)?;
    let ds = load_dataset(&ctx.cfg)?;
    let fc = ctx.cfg.finetune_config(meta.geo.patch_size, freeze)?;
    let max_label = ds
        .train
        .iter()
        .chain(ds.eval.iter())
        .map(|r| r.label)
        .max()
        .unwrap_or(0);
    if max_label as usize >= fc.n_classes {
        return Err(CliError::runtime(format!(
            "dataset has label {max_label} but the classifier only has {} outputs \
             (raise --n_classes)",
            fc.n_classes
        )));
    }
    let out = finetune(meta.variant, meta.dims, &params, &fc, &ds.train, &ds.eval)?;
    let head = HeadMeta {
        modality: fc.modality,
        feature: fc.feature,
        n_classes: fc.n_classes,
    };
    let out_meta = CheckpointMeta {
        head: Some(head),
        ..meta.clone()
    };
    let name = if freeze { "probe.cavc" } else { "finetuned.cavc" };
    let ck = ctx.dir.join(name);
    checkpoint::write_checkpoint(&ck, &out_meta, &out.params)?;

    let rows: Vec<Vec<String>> = out
        .records
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.lr.to_string(),
                r.mean_loss.to_string(),
                r.eval_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    run::write_text(
        &ctx.dir.join("metrics.csv"),
        &artifacts::csv_text("epoch,lr,mean_loss,eval_accuracy", &rows)?,
    )?;
    Ok(vec![
        format!(
            "{} {} classifier on {} ({} epochs, modality {}, feature {})",
            if freeze { "linear-probed" } else { "finetuned" },
            meta.variant.name(),
            if ctx.cfg.get_str("data")?.is_empty() {
                "toy corpus".to_string()
            } else {
                ctx.cfg.get_str("data")?.to_string()
            },
            fc.epochs,
            fc.modality.name(),
            fc.feature.name(),
        ),
        format!("train_accuracy {}", fmt4(out.train_accuracy)),
        format!("eval_accuracy {}", fmt4(out.eval_accuracy)),
        format!("checkpoint {}", ck.display()),
    ])
}

// ---------------------------------------------------------------- retrieve

fn retrieve_cmd(ctx: &RunContext) -> Result<Vec<String>> {
    let (meta, params) = required_checkpoint(&ctx.cfg)?;
    let ds = load_dataset(&ctx.cfg)?;
    let ks = ctx.cfg.get_list_usize("ks")?;
    if ks.is_empty() || ks.iter().any(|&k| k == 0) {
        return Err(CliError::usage("ks must be a non-empty list of positive cutoffs"));
    }
    let ectx = eval_context(&meta)?;
    let report = retrieval_eval(&ectx, &params, &ds.eval, &ks)?;
    let mut rows = Vec::new();
    for (i, &k) in report.ks.iter().enumerate() {
        rows.push(vec![
            "v2a".to_string(),
            k.to_string(),
            report.v2a[i].to_string(),
            report.n.to_string(),
        ]);
    }
    for (i, &k) in report.ks.iter().enumerate() {
        rows.push(vec![
            "a2v".to_string(),
            k.to_string(),
            report.a2v[i].to_string(),
            report.n.to_string(),
        ]);
    }
    run::write_text(
        &ctx.dir.join("retrieval.csv"),
        &artifacts::csv_text("direction,k,recall,n_queries", &rows)?,
    )?;
    let chance = 1.0 / report.n as f64;
    Ok(vec![
        format!(
            "retrieval over {} held-out clips (chance R@1 = {})",
            report.n,
            fmt4(chance)
        ),
        format!("v2a R@{} {}", report.ks[0], fmt4(report.v2a[0])),
        format!("a2v R@{} {}", report.ks[0], fmt4(report.a2v[0])),
    ])
}

// ------------------------------------------------------------- reconstruct

/// Reassembles `[rows·ps × cols·ps]` audio grid from `[rows·cols × ps·ps]`
/// patch rows.
fn unpatchify_audio(patches: &Tensor, rows: usize, cols: usize, ps: usize) -> Result<Tensor> {
    let (n, len) = patches.dims2()?;
    if n != rows * cols || len != ps * ps {
        return Err(CoreErrorShim(format!(
            "patch matrix {n}×{len} does not match {rows}×{cols} grid of {ps}×{ps} patches"
        ))
        .into());
    }
    let width = cols * ps;
    let mut grid = Tensor::zeros(vec![rows * ps, width]);
    for pr in 0..rows {
        for pc in 0..cols {
            let p = patches.row(pr * cols + pc);
            for r in 0..ps {
                for c in 0..ps {
                    grid.data_mut()[(pr * ps + r) * width + pc * ps + c] = p[r * ps + c];
                }
            }
        }
    }
    Ok(grid)
}

struct CoreErrorShim(String);

impl From<CoreErrorShim> for CliError {
    fn from(e: CoreErrorShim) -> Self {
        CliError::runtime(e.0)
    }
}

/// Per-patch inverse of target normalization: scales predicted patches by
/// the original patch's standard deviation and restores its mean.
fn denormalize_like(pred: &Tensor, original: &Tensor) -> Result<Tensor> {
    let (n, len) = pred.dims2()?;
    let mut out = pred.clone();
    for i in 0..n {
        let orig = original.row(i);
        let mean = orig.iter().sum::<f64>() / len as f64;
        let var = orig.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let scale = (var + loss::PATCH_NORM_EPS).sqrt();
        for v in &mut out.data_mut()[i * len..(i + 1) * len] {
            *v = *v * scale + mean;
        }
    }
    Ok(out)
}

fn reconstruct_cmd(ctx: &RunContext) -> Result<Vec<String>> {
    let (meta, params) = required_checkpoint(&ctx.cfg)?;
    if !meta.variant.has_decoder() || !meta.variant.uses_audio() {
        return Err(CliError::runtime(format!(
            "variant {} cannot reconstruct audio (needs a decoder and the audio stream)",
            meta.variant.name()
        )));
    }
    let ds = load_dataset(&ctx.cfg)?;
    let strategy = ctx.cfg.get_strategy("strategy")?;
    let ratio = ctx.cfg.get_f64("ratio")?;
    let n_samples = ctx.cfg.get_usize("n_samples")?.max(1).min(ds.eval.len());
    if ds.eval.is_empty() {
        return Err(CliError::runtime("dataset has no evaluation records"));
    }
    let seed = ctx.cfg.seed()?;
    let ectx = eval_context(&meta)?;
    let geo = ectx.geo;
    let ps = geo.patch_size;
    let pair = meta.variant.uses_visual();
    let empty_v = MaskPlan::empty(geo.visual_rows.max(1), geo.visual_cols.max(1));

    let mut rows = Vec::new();
    let mut mean_mse = 0.0;
    for (i, rec) in ds.eval.iter().take(n_samples).enumerate() {
        let a_patches = patchify(&rec.audio, ps)?.patches;
        let plan = sample_mask(
            geo.audio_rows,
            geo.audio_cols,
            ratio,
            strategy,
            rng::derive_seed(&[seed, stream::MASK, i as u64, rec.sample_id]),
        )?;
        let mut g = Graph::new();
        let mut b = ModelBuild::new(&mut g, &params, meta.dims, geo, meta.variant)?;
        let pred_node = if pair {
            let frame = rec
                .frames
                .first()
                .ok_or_else(|| CliError::runtime("record has no frames"))?;
            let v_patches = patchify(frame, ps)?.patches;
            let so = b.encode_pair(&a_patches, &plan, &v_patches, &empty_v, &ectx.tables, false)?;
            let (pred_a, _) = b.decode(so.tokens, Some(&plan), Some(&empty_v), &ectx.tables)?;
            pred_a
        } else {
            let (tokens, _) = b.encode_single(Modality::Audio, &a_patches, &plan, &ectx.tables)?;
            let (pred_a, _) = b.decode(tokens, Some(&plan), None, &ectx.tables)?;
            pred_a
        };
        let pred = b
            .g
            .value(pred_node.ok_or_else(|| CliError::runtime("decoder produced no audio output"))?)
            .clone();
        let target = if meta.loss.target_norm {
            loss::patch_normalize(&a_patches)?
        } else {
            a_patches.clone()
        };
        let mse = loss::masked_mse(&pred, &target, &plan, meta.loss.patch_sum)?;
        mean_mse += mse;
        rows.push(vec![
            rec.sample_id.to_string(),
            rec.label.to_string(),
            strategy.name().to_string(),
            ratio.to_string(),
            mse.to_string(),
        ]);

        // Compose dumps: original, masked input, and reconstruction with
        // predicted patches filled in at the masked positions.
        let pred_raw = if meta.loss.target_norm {
            denormalize_like(&pred, &a_patches)?
        } else {
            pred.clone()
        };
        let original = unpatchify_audio(&a_patches, geo.audio_rows, geo.audio_cols, ps)?;
        let lo = original.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let mut masked_patches = a_patches.clone();
        let mut recon_patches = a_patches.clone();
        let len = ps * ps;
        for &m in &plan.masked_idx {
            masked_patches.data_mut()[m * len..(m + 1) * len].fill(lo);
            recon_patches.data_mut()[m * len..(m + 1) * len]
                .copy_from_slice(&pred_raw.data()[m * len..(m + 1) * len]);
        }
        let masked = unpatchify_audio(&masked_patches, geo.audio_rows, geo.audio_cols, ps)?;
        let recon = unpatchify_audio(&recon_patches, geo.audio_rows, geo.audio_cols, ps)?;
        let sid = rec.sample_id;
        for (tag, grid) in [("original", &original), ("masked", &masked), ("pred", &recon)] {
            run::atomic_write(
                &ctx.dir.join(format!("recon_{sid}_{tag}.pgm")),
                &artifacts::pgm_bytes(grid)?,
            )?;
        }
        run::write_text(
            &ctx.dir.join(format!("recon_{sid}_pred.csv")),
            &artifacts::float_grid_text(&recon)?,
        )?;
    }
    mean_mse /= n_samples as f64;
    run::write_text(
        &ctx.dir.join("reconstruction.csv"),
        &artifacts::csv_text("sample_id,label,strategy,ratio,masked_mse", &rows)?,
    )?;
    Ok(vec![
        format!(
            "reconstructed {n_samples} held-out clips ({} masking at ratio {ratio})",
            strategy.name()
        ),
        format!("mean masked_mse {}", fmt4(mean_mse)),
    ])
}

// ----------------------------------------------------------------- localize

fn localize_cmd(ctx: &RunContext) -> Result<Vec<String>> {
    let (meta, params) = required_checkpoint(&ctx.cfg)?;
    if !(meta.variant.uses_audio() && meta.variant.uses_visual()) {
        return Err(CliError::runtime(format!(
            "variant {} cannot localize (needs both modalities)",
            meta.variant.name()
        )));
    }
    let ds = load_dataset(&ctx.cfg)?;
    if ds.eval.is_empty() {
        return Err(CliError::runtime("dataset has no evaluation records"));
    }
    let ectx = eval_context(&meta)?;
    let hit = localization_hit_rate(&ectx, &params, &ds.eval)?;
    run::write_text(
        &ctx.dir.join("localization.csv"),
        &artifacts::csv_text(
            "n_samples,hit_rate,chance",
            &[vec![
                ds.eval.len().to_string(),
                hit.to_string(),
                "0.25".to_string(),
            ]],
        )?,
    )?;
    let n_dump = ctx.cfg.get_usize("n_dump")?.min(ds.eval.len());
    for rec in ds.eval.iter().take(n_dump) {
        let frame = rec
            .frames
            .first()
            .ok_or_else(|| CliError::runtime("record has no frames"))?;
        let heat = localization_heatmap(&ectx, &params, &rec.audio, frame)?;
        let sid = rec.sample_id;
        run::write_text(
            &ctx.dir.join(format!("heatmap_{sid}.csv")),
            &artifacts::float_grid_text(&heat)?,
        )?;
        run::atomic_write(
            &ctx.dir.join(format!("heatmap_{sid}.pgm")),
            &artifacts::pgm_bytes(&heat)?,
        )?;
    }
    Ok(vec![
        format!(
            "localization over {} held-out clips: hit_rate {} (chance 0.25)",
            ds.eval.len(),
            fmt4(hit)
        ),
        format!("dumped {n_dump} heatmaps"),
    ])
}

// -------------------------------------------------------------------- sweep

fn sweep_cmd(ctx: &RunContext) -> Result<Vec<String>> {
    let (meta, params) = required_checkpoint(&ctx.cfg)?;
    let ds = load_dataset(&ctx.cfg)?;
    let strategies = ctx.cfg.get_strategies("strategies")?;
    let ratios = ctx.cfg.get_list_f64("ratios")?;
    let ectx = eval_context(&meta)?;
    let cells = reconstruction_mse_sweep(
        &ectx,
        &params,
        &meta.loss,
        &ds.eval,
        &strategies,
        &ratios,
        ctx.cfg.seed()?,
    )?;
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.strategy.name().to_string(),
                c.ratio.to_string(),
                c.mean_mse.to_string(),
                c.n_samples.to_string(),
            ]
        })
        .collect();
    run::write_text(
        &ctx.dir.join("sweep.csv"),
        &artifacts::csv_text("strategy,ratio,mean_mse,n_samples", &rows)?,
    )?;
    let mut lines = vec![format!(
        "masked-reconstruction sweep: {} strategies × {} ratios over {} samples",
        strategies.len(),
        ratios.len(),
        ds.eval.len()
    )];
    for c in &cells {
        if (c.ratio - 0.75).abs() < 1e-12 {
            lines.push(format!("{} @0.75 mean_mse {}", c.strategy.name(), fmt4(c.mean_mse)));
        }
    }
    Ok(lines)
}

// -------------------------------------------------------------- shuffle-exp

fn shuffle_cmd(ctx: &RunContext) -> Result<Vec<String>> {
    let ds = load_dataset(&ctx.cfg)?;
    let tc = ctx.cfg.train_config()?;
    let probe_cfg = FinetuneConfig {
        modality: ctx.cfg.get_modality("modality")?,
        feature: ctx.cfg.get_feature("feature")?,
        n_classes: ctx.cfg.get_usize("n_classes")?,
        epochs: ctx.cfg.get_usize("probe_epochs")?,
        batch_size: ctx.cfg.get_usize("probe_batch_size")?,
        schedule: cavmae_core::optim::ScheduleConfig {
            base_lr: ctx.cfg.get_f64("probe_lr")?,
            head_lr_multiplier: 1.0,
            ..Default::default()
        },
        adam: Default::default(),
        seed: tc.seed,
        freeze_backbone: true,
        patch_size: tc.patch_size,
        eval_every: 0,
    };
    let report = shuffle_experiment(
        &tc,
        &ds.train,
        &ds.train,
        &ds.eval,
        &probe_cfg,
        ctx.cfg.get_u64("shuffle_seed")?,
    )?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let rows = vec![
        vec![
            "match_acc".to_string(),
            opt(report.paired_match_acc),
            opt(report.shuffled_match_acc),
        ],
        vec![
            "probe_acc".to_string(),
            report.paired_probe_acc.to_string(),
            report.shuffled_probe_acc.to_string(),
        ],
    ];
    run::write_text(
        &ctx.dir.join("shuffle.csv"),
        &artifacts::csv_text("metric,paired,shuffled", &rows)?,
    )?;
    let mut lines = vec![format!(
        "pairing-shuffle ablation for {} ({} train samples)",
        tc.variant.name(),
        ds.train.len()
    )];
    if let (Some(p), Some(s)) = (report.paired_match_acc, report.shuffled_match_acc) {
        lines.push(format!("match_acc paired {} shuffled {}", fmt4(p), fmt4(s)));
    }
    lines.push(format!(
        "probe_acc paired {} shuffled {}",
        fmt4(report.paired_probe_acc),
        fmt4(report.shuffled_probe_acc)
    ));
    Ok(lines)
}

// ---------------------------------------------------------------- gradcheck

fn gradcheck_cmd(ctx: &RunContext) -> Result<Vec<String>> {
    let cfg = &ctx.cfg;
    let spec = cfg.corpus_spec()?;
    spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let batch = cfg.get_usize("batch_size")?;
    let tc = TrainConfig {
        variant: cfg.get_variant("variant")?,
        dims: cfg.model_dims()?,
        loss: cfg.loss_config()?,
        mask_ratio_audio: cfg.get_f64("mask_ratio_audio")?,
        mask_ratio_visual: cfg.get_f64("mask_ratio_visual")?,
        mask_audio: cfg.get_strategy("mask_audio")?,
        mask_visual: cfg.get_strategy("mask_visual")?,
        epochs: 1,
        batch_size: batch.max(2),
        schedule: Default::default(),
        adam: Default::default(),
        seed: cfg.seed()?,
        time_shift: cfg.get_bool("time_shift")?,
        patch_size: spec.patch_size,
    };
    tc.validate()?;
    let records: Vec<SampleRecord> = (0..batch.max(2) as u64)
        .map(|i| generate_sample(&spec, i))
        .collect();
    let report = run_gradcheck(
        &tc,
        &records,
        &GradCheckOptions {
            h: cfg.get_f64("h")?,
            tol: cfg.get_f64("tol")?,
            max_probes_per_tensor: match cfg.get_usize("max_probes")? {
                0 => usize::MAX,
                n => n,
            },
            probe_seed: cfg.seed()?,
            ..Default::default()
        },
    )?;
    run::write_text(&ctx.dir.join("gradcheck.txt"), &report.render())?;

    let mut modules: BTreeMap<&str, f64> = BTreeMap::new();
    for t in &report.tensors {
        let module = t.name.split('.').next().unwrap_or("other");
        let entry = modules.entry(module).or_insert(0.0);
        if t.max_rel_err > *entry {
            *entry = t.max_rel_err;
        }
    }
    let mut lines: Vec<String> = modules
        .iter()
        .map(|(m, e)| format!("module {m}: max_rel_err {e:.3e}"))
        .collect();
    lines.push(format!(
        "all modules: max_rel_err {:.3e} (tolerance {:.1e})",
        report.max_rel_err,
        cfg.get_f64("tol")?
    ));
    if report.passed {
        lines.push("gradient check PASS".to_string());
        Ok(lines)
    } else {
        lines.push("gradient check FAIL".to_string());
        Err(CliError::runtime(lines.join("\n")))
    }
}

/// Shared by the CLI command and the test suite: finite-difference check of
/// the full training objective at freshly initialized parameters.
pub fn run_gradcheck(
    tc: &TrainConfig,
    records: &[SampleRecord],
    opts: &GradCheckOptions,
) -> Result<cavmae_core::gradcheck::GradCheckReport> {
    let geo = record_geometry(tc.variant, tc.patch_size, records)?;
    let tables = PosTables::new(&tc.dims, &geo)?;
    let params = init_params(&tc.dims, &geo, tc.variant, tc.seed)?;
    let view = PretrainView::new(records);
    let chunk: Vec<usize> = (0..records.len()).collect();
    let analytic = batch_objective(tc, &view, &geo, &tables, &params, 0, &chunk, true)?
        .grads
        .expect("gradients requested");
    let objective = |p: &ParamMap| {
        batch_objective(tc, &view, &geo, &tables, p, 0, &chunk, false).map(|o| o.loss_total)
    };
    Ok(finite_diff_check(objective, &params, &analytic, opts)?)
}
