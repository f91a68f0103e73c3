//! Masking strategies over the token grid: unstructured uniform sampling plus
//! the structured time / frequency / time-frequency variants for audio.
//!
//! Grid convention: rows index time, columns index frequency. A token's flat
//! index is `row · grid_cols + col`, matching patchify order.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Which structure the masked set has.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Uniform,
    /// Whole time steps (grid rows).
    Time,
    /// Whole frequency bands (grid columns).
    Frequency,
    /// Union of sampled whole rows and whole columns.
    TimeFrequency,
}

impl MaskStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Uniform => "uniform",
            MaskStrategy::Time => "time",
            MaskStrategy::Frequency => "frequency",
            MaskStrategy::TimeFrequency => "time_frequency",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "uniform" => MaskStrategy::Uniform,
            "time" => MaskStrategy::Time,
            "frequency" => MaskStrategy::Frequency,
            "time_frequency" => MaskStrategy::TimeFrequency,
            other => {
                return Err(CoreError::invalid(alloc::format!(
                    "unknown mask strategy '{other}'"
                )))
            }
        })
    }

    pub const ALL: [MaskStrategy; 4] = [
        MaskStrategy::Uniform,
        MaskStrategy::Time,
        MaskStrategy::Frequency,
        MaskStrategy::TimeFrequency,
    ];
}

/// A sampled partition of the token grid into masked and unmasked indices.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub strategy: MaskStrategy,
    /// Requested masking ratio.
    pub ratio: f64,
    /// Fraction actually masked once structure constraints rounded the count.
    pub achieved_ratio: f64,
    /// Ascending, disjoint, exhaustive over `0..rows·cols` together.
    pub masked_idx: Vec<usize>,
    pub unmasked_idx: Vec<usize>,
    pub seed: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl MaskPlan {
    pub fn n_tokens(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// A plan that masks nothing (evaluation without masking).
    pub fn empty(grid_rows: usize, grid_cols: usize) -> MaskPlan {
        MaskPlan {
            strategy: MaskStrategy::Uniform,
            ratio: 0.0,
            achieved_ratio: 0.0,
            masked_idx: Vec::new(),
            unmasked_idx: (0..grid_rows * grid_cols).collect(),
            seed: 0,
            grid_rows,
            grid_cols,
        }
    }
}

/// Samples a masking plan for an `grid_rows × grid_cols` token grid.
///
/// `uniform` masks `round(ratio·N)` tokens without replacement; `time` masks
/// whole rows, `frequency` whole columns (count rounded to the nearest
/// achievable); `time_frequency` takes the union of `t` rows and `f` columns
/// with `(t,f)` chosen so the union size is nearest `ratio·N` (ties broken
/// toward balanced row/column proportions, then fewer rows). Deterministic in
/// `seed`.
pub fn sample_mask(
    grid_rows: usize,
    grid_cols: usize,
    ratio: f64,
    strategy: MaskStrategy,
    seed: u64,
) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CoreError::invalid(alloc::format!(
            "mask ratio {ratio} outside (0, 1)"
        )));
    }
    if grid_rows < 2 || grid_cols < 2 {
        return Err(CoreError::invalid(alloc::format!(
            "token grid {grid_rows}×{grid_cols} too small to mask (need ≥ 2 per axis)"
        )));
    }
    let n = grid_rows * grid_cols;
    let mut r = rng::rng_from_seed(seed);
    let masked: Vec<usize> = match strategy {
        MaskStrategy::Uniform => {
            let k = round_count(ratio * n as f64);
            rng::sample_indices(&mut r, n, k)
        }
        MaskStrategy::Time => {
            let k_rows = round_count(ratio * grid_rows as f64);
            let rows = rng::sample_indices(&mut r, grid_rows, k_rows);
            rows_to_tokens(&rows, grid_cols)
        }
        MaskStrategy::Frequency => {
            let k_cols = round_count(ratio * grid_cols as f64);
            let cols = rng::sample_indices(&mut r, grid_cols, k_cols);
            cols_to_tokens(&cols, grid_rows, grid_cols)
        }
        MaskStrategy::TimeFrequency => {
            let (t, f) = best_union_counts(grid_rows, grid_cols, ratio);
            let rows = rng::sample_indices(&mut r, grid_rows, t);
            let cols = rng::sample_indices(&mut r, grid_cols, f);
            let mut hit = alloc::vec![false; n];
            for &row in &rows {
                for c in 0..grid_cols {
                    hit[row * grid_cols + c] = true;
                }
            }
            for &col in &cols {
                for row in 0..grid_rows {
                    hit[row * grid_cols + col] = true;
                }
            }
            hit.iter()
                .enumerate()
                .filter_map(|(i, &h)| h.then_some(i))
                .collect()
        }
    };
    let mut is_masked = alloc::vec![false; n];
    for &i in &masked {
        is_masked[i] = true;
    }
    let unmasked: Vec<usize> = (0..n).filter(|&i| !is_masked[i]).collect();
    let achieved = masked.len() as f64 / n as f64;
    Ok(MaskPlan {
        strategy,
        ratio,
        achieved_ratio: achieved,
        masked_idx: masked,
        unmasked_idx: unmasked,
        seed,
        grid_rows,
        grid_cols,
    })
}

/// Nearest-integer rounding with half-away-from-zero, as a count.
fn round_count(x: f64) -> usize {
    crate::fmath::round(x) as usize
}

fn rows_to_tokens(rows: &[usize], grid_cols: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows.len() * grid_cols);
    for &r in rows {
        for c in 0..grid_cols {
            out.push(r * grid_cols + c);
        }
    }
    out
}

fn cols_to_tokens(cols: &[usize], grid_rows: usize, grid_cols: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(cols.len() * grid_rows);
    for r in 0..grid_rows {
        for &c in cols {
            out.push(r * grid_cols + c);
        }
    }
    out
}

/// Chooses how many whole rows (t) and columns (f) to mask so that
/// `|union| = t·C + f·R − t·f` is closest to `ratio · R·C`.
fn best_union_counts(rows: usize, cols: usize, ratio: f64) -> (usize, usize) {
    let target = ratio * (rows * cols) as f64;
    let mut best = (0usize, 0usize);
    let mut best_key = (f64::INFINITY, f64::INFINITY, usize::MAX);
    for t in 0..=rows {
        for f in 0..=cols {
            let union = (t * cols + f * rows - t * f) as f64;
            let err = (union - target).abs();
            let balance = (t as f64 / rows as f64 - f as f64 / cols as f64).abs();
            let key = (err, balance, t);
            if key < best_key {
                best_key = key;
                best = (t, f);
            }
        }
    }
    best
}

/// Keeps only the unmasked rows of a token matrix, ascending index order.
pub fn apply_mask(tokens: &Tensor, plan: &MaskPlan) -> Result<Tensor> {
    let (n, d) = tokens.dims2()?;
    if n != plan.n_tokens() {
        return Err(CoreError::invalid(alloc::format!(
            "apply_mask: {n} tokens but plan covers {} ({}×{})",
            plan.n_tokens(),
            plan.grid_rows,
            plan.grid_cols
        )));
    }
    let mut data = Vec::with_capacity(plan.unmasked_idx.len() * d);
    for &i in &plan.unmasked_idx {
        data.extend_from_slice(tokens.row(i));
    }
    Tensor::new(alloc::vec![plan.unmasked_idx.len(), d], data)
}

/// Validates the partition invariant; returns a description of any violation.
pub fn check_partition(plan: &MaskPlan) -> core::result::Result<(), String> {
    let n = plan.n_tokens();
    let mut seen = alloc::vec![0u8; n];
    for &i in &plan.masked_idx {
        if i >= n {
            return Err(alloc::format!("masked index {i} out of range {n}"));
        }
        seen[i] += 1;
    }
    for &i in &plan.unmasked_idx {
        if i >= n {
            return Err(alloc::format!("unmasked index {i} out of range {n}"));
        }
        seen[i] += 1;
    }
    if let Some(i) = seen.iter().position(|&c| c != 1) {
        return Err(alloc::format!(
            "token {i} covered {} times (must be exactly once)",
            seen[i]
        ));
    }
    if !plan.masked_idx.windows(2).all(|w| w[0] < w[1])
        || !plan.unmasked_idx.windows(2).all(|w| w[0] < w[1])
    {
        return Err("index lists not strictly ascending".into());
    }
    Ok(())
}
