//! Run manifest: a line-delimited text record of every optimizer step.
//!
//! `#`-prefixed header lines carry run identity (command, config hash,
//! variant). A single schema line follows, then one comma-separated row per
//! step: `epoch,step,loss_r,loss_c,lr,match_acc`. Fields not produced by the
//! variant (e.g. no reconstruction loss for a contrastive-only model) are
//! left empty. No timestamps are recorded anywhere, so identical runs render
//! identical manifests.

use cavmae_core::trainer::StepRecord;

use crate::error::{CliError, Result};

pub const SCHEMA: &str = "epoch,step,loss_r,loss_c,lr,match_acc";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders header pairs + step records into manifest text.
pub fn render_manifest(header: &[(&str, String)], records: &[StepRecord]) -> String {
    let mut out = String::new();
    for (key, value) in header {
        out.push_str(&format!("# {key}={value}\n"));
    }
    out.push_str(SCHEMA);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.step,
            fmt_opt(r.loss_r),
            fmt_opt(r.loss_c),
            r.lr,
            fmt_opt(r.match_acc),
        ));
    }
    out
}

/// One parsed manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub epoch: usize,
    pub step: u64,
    pub loss_r: Option<f64>,
    pub loss_c: Option<f64>,
    pub lr: f64,
    pub match_acc: Option<f64>,
}

/// Parses manifest text back into header pairs and rows.
pub fn parse_manifest(text: &str) -> Result<(Vec<(String, String)>, Vec<ManifestRow>)> {
    let mut header = Vec::new();
    let mut rows = Vec::new();
    let mut seen_schema = false;
    for (ln, raw) in text.lines().enumerate() {
        let bad = |msg: &str| CliError::runtime(format!("manifest line {}: {msg}", ln + 1));
        if let Some(rest) = raw.strip_prefix('#') {
            let rest = rest.trim();
            if let Some((k, v)) = rest.split_once('=') {
                header.push((k.trim().to_string(), v.trim().to_string()));
            }
            continue;
        }
        if !seen_schema {
            if raw != SCHEMA {
                return Err(bad(&format!("expected schema '{SCHEMA}', got '{raw}'")));
            }
            seen_schema = true;
            continue;
        }
        if raw.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = raw.split(',').collect();
        if parts.len() != 6 {
            return Err(bad(&format!("expected 6 fields, got {}", parts.len())));
        }
        let opt = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|_| bad(&format!("bad {what} '{s}'")))
            }
        };
        rows.push(ManifestRow {
            epoch: parts[0]
                .parse()
                .map_err(|_| bad(&format!("bad epoch '{}'", parts[0])))?,
            step: parts[1]
                .parse()
                .map_err(|_| bad(&format!("bad step '{}'", parts[1])))?,
            loss_r: opt(parts[2], "loss_r")?,
            loss_c: opt(parts[3], "loss_c")?,
            lr: parts[4]
                .parse()
                .map_err(|_| bad(&format!("bad lr '{}'", parts[4])))?,
            match_acc: opt(parts[5], "match_acc")?,
        });
    }
    if !seen_schema {
        return Err(CliError::runtime("manifest has no schema line"));
    }
    Ok((header, rows))
}
