//! Property and sweep tests for mask sampling: partition correctness, count
//! contracts per strategy, structural shape (whole rows / columns), seed
//! determinism, and per-token uniform-masking frequency.

use cavmae_core::mask::{apply_mask, check_partition, sample_mask, MaskStrategy};
use cavmae_core::tensor::Tensor;
use proptest::prelude::*;

const ALL_STRATEGIES: [MaskStrategy; 4] = [
    MaskStrategy::Uniform,
    MaskStrategy::Time,
    MaskStrategy::Frequency,
    MaskStrategy::TimeFrequency,
];

/// Half-away-from-zero rounding, matching the library's count rule.
fn round_count(x: f64) -> usize {
    x.round() as usize
}

/// Expected masked-token count for the three strategies with closed-form
/// counts. `TimeFrequency` is checked separately against the best achievable
/// union size.
fn expected_count(strategy: MaskStrategy, rows: usize, cols: usize, ratio: f64) -> Option<usize> {
    let n = rows * cols;
    match strategy {
        MaskStrategy::Uniform => Some(round_count(ratio * n as f64)),
        MaskStrategy::Time => Some(round_count(ratio * rows as f64) * cols),
        MaskStrategy::Frequency => Some(round_count(ratio * cols as f64) * rows),
        MaskStrategy::TimeFrequency => None,
    }
}

/// Smallest achievable |union − ratio·N| over all whole-row/whole-column
/// union sizes t·C + f·R − t·f.
fn best_union_error(rows: usize, cols: usize, ratio: f64) -> f64 {
    let target = ratio * (rows * cols) as f64;
    let mut best = f64::INFINITY;
    for t in 0..=rows {
        for f in 0..=cols {
            let union = (t * cols + f * rows - t * f) as f64;
            best = best.min((union - target).abs());
        }
    }
    best
}

fn strategy_strategy() -> impl Strategy<Value = MaskStrategy> {
    prop_oneof![
        Just(MaskStrategy::Uniform),
        Just(MaskStrategy::Time),
        Just(MaskStrategy::Frequency),
        Just(MaskStrategy::TimeFrequency),
    ]
}

proptest! {
    /// Masked and unmasked index lists always partition the token set, with
    /// both lists strictly ascending, for every strategy / grid / ratio / seed.
    #[test]
    fn partition_holds(
        strategy in strategy_strategy(),
        rows in 2usize..40,
        cols in 2usize..40,
        ratio in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let plan = sample_mask(rows, cols, ratio, strategy, seed).unwrap();
        prop_assert!(check_partition(&plan).is_ok(), "{:?}", check_partition(&plan));
        prop_assert_eq!(plan.masked_idx.len() + plan.unmasked_idx.len(), rows * cols);
        prop_assert!((plan.achieved_ratio
            - plan.masked_idx.len() as f64 / (rows * cols) as f64).abs() < 1e-15);
    }

    /// Closed-form masked counts for uniform / time / frequency; best
    /// achievable union size for time+frequency.
    #[test]
    fn counts_match_contract(
        strategy in strategy_strategy(),
        rows in 2usize..40,
        cols in 2usize..40,
        ratio in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let plan = sample_mask(rows, cols, ratio, strategy, seed).unwrap();
        match expected_count(strategy, rows, cols, ratio) {
            Some(k) => prop_assert_eq!(plan.masked_idx.len(), k),
            None => {
                let err = (plan.masked_idx.len() as f64 - ratio * (rows * cols) as f64).abs();
                let best = best_union_error(rows, cols, ratio);
                prop_assert!(
                    (err - best).abs() < 1e-9,
                    "union size {} misses target by {err}, best achievable {best}",
                    plan.masked_idx.len()
                );
            }
        }
    }

    /// Time masks whole rows only; frequency masks whole columns only; their
    /// union strategy masks exactly a union of whole rows and whole columns.
    #[test]
    fn structural_shape(
        strategy in strategy_strategy(),
        rows in 2usize..24,
        cols in 2usize..24,
        ratio in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let plan = sample_mask(rows, cols, ratio, strategy, seed).unwrap();
        let mut grid = vec![vec![false; cols]; rows];
        for &i in &plan.masked_idx {
            grid[i / cols][i % cols] = true;
        }
        let full_rows: Vec<usize> =
            (0..rows).filter(|&r| grid[r].iter().all(|&m| m)).collect();
        let full_cols: Vec<usize> =
            (0..cols).filter(|&c| (0..rows).all(|r| grid[r][c])).collect();
        match strategy {
            MaskStrategy::Uniform => {} // no structural requirement
            MaskStrategy::Time => {
                // every masked token lies in a fully masked row
                for &i in &plan.masked_idx {
                    prop_assert!(full_rows.contains(&(i / cols)));
                }
            }
            MaskStrategy::Frequency => {
                for &i in &plan.masked_idx {
                    prop_assert!(full_cols.contains(&(i % cols)));
                }
            }
            MaskStrategy::TimeFrequency => {
                for &i in &plan.masked_idx {
                    let in_row = full_rows.contains(&(i / cols));
                    let in_col = full_cols.contains(&(i % cols));
                    prop_assert!(in_row || in_col,
                        "token {i} masked but in no fully masked row or column");
                }
            }
        }
    }

    /// The same seed reproduces the identical plan.
    #[test]
    fn seed_determinism(
        strategy in strategy_strategy(),
        rows in 2usize..24,
        cols in 2usize..24,
        ratio in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let a = sample_mask(rows, cols, ratio, strategy, seed).unwrap();
        let b = sample_mask(rows, cols, ratio, strategy, seed).unwrap();
        prop_assert_eq!(a.masked_idx, b.masked_idx);
        prop_assert_eq!(a.unmasked_idx, b.unmasked_idx);
    }

    /// apply_mask keeps exactly the unmasked rows, in ascending order.
    #[test]
    fn apply_mask_selects_unmasked_rows(
        strategy in strategy_strategy(),
        rows in 2usize..12,
        cols in 2usize..12,
        ratio in 0.1f64..0.9,
        seed in any::<u64>(),
    ) {
        let plan = sample_mask(rows, cols, ratio, strategy, seed).unwrap();
        let n = rows * cols;
        let d = 3;
        let data: Vec<f64> = (0..n * d).map(|v| v as f64).collect();
        let tokens = Tensor::new(vec![n, d], data).unwrap();
        let kept = apply_mask(&tokens, &plan).unwrap();
        assert_eq!(kept.shape(), &[plan.unmasked_idx.len(), d]);
        for (out_row, &src) in plan.unmasked_idx.iter().enumerate() {
            prop_assert_eq!(kept.row(out_row), tokens.row(src));
        }
    }
}

/// Deterministic sweep on the working grids: every strategy × a spread of
/// ratios × 100 seeds keeps the partition and count contracts.
#[test]
fn sweep_all_strategies_ratios_seeds() {
    let ratios = [0.15, 0.3, 0.5, 0.75, 0.9];
    for &(rows, cols) in &[(16usize, 4usize), (4, 4)] {
        for strategy in ALL_STRATEGIES {
            for &ratio in &ratios {
                for seed in 0..100u64 {
                    let plan = sample_mask(rows, cols, ratio, strategy, seed).unwrap();
                    if let Err(e) = check_partition(&plan) {
                        panic!("{strategy:?} {rows}x{cols} ratio {ratio} seed {seed}: {e}");
                    }
                    if let Some(k) = expected_count(strategy, rows, cols, ratio) {
                        assert_eq!(
                            plan.masked_idx.len(),
                            k,
                            "{strategy:?} {rows}x{cols} ratio {ratio} seed {seed}"
                        );
                    }
                }
            }
        }
    }
}

/// Uniform masking hits every token with empirical frequency close to the
/// requested ratio (averaged over many seeds) — no positional bias.
#[test]
fn uniform_per_token_frequency_is_flat() {
    let (rows, cols, ratio) = (16usize, 4usize, 0.75f64);
    let n = rows * cols;
    let trials = 4000u64;
    let mut hits = vec![ 0u32; n];
    for seed in 0..trials {
        let plan = sample_mask(rows, cols, ratio, MaskStrategy::Uniform, seed).unwrap();
        for &i in &plan.masked_idx {
            hits[i] += 1;
        }
    }
    for (i, &h) in hits.iter().enumerate() {
        let freq = h as f64 / trials as f64;
        assert!(
            (freq - ratio).abs() < 0.02,
            "token {i}: frequency {freq:.4} deviates from {ratio} by more than 0.02"
        );
    }
}

/// Degenerate requests are rejected: ratio outside (0,1), grid below 2×2.
#[test]
fn invalid_inputs_rejected() {
    assert!(sample_mask(4, 4, 0.0, MaskStrategy::Uniform, 0).is_err());
    assert!(sample_mask(4, 4, 1.0, MaskStrategy::Uniform, 0).is_err());
    assert!(sample_mask(4, 4, -0.5, MaskStrategy::Time, 0).is_err());
    assert!(sample_mask(1, 8, 0.5, MaskStrategy::Uniform, 0).is_err());
    assert!(sample_mask(8, 1, 0.5, MaskStrategy::Frequency, 0).is_err());
}
