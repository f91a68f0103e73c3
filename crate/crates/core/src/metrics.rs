//! Retrieval recall and classification metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Which side of the similarity matrix queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalDirection {
    /// Rows query: each visual clip retrieves audio clips.
    VisualToAudio,
    /// Columns query: each audio clip retrieves visual clips.
    AudioToVisual,
}

impl RetrievalDirection {
    pub fn name(self) -> &'static str {
        match self {
            RetrievalDirection::VisualToAudio => "v2a",
            RetrievalDirection::AudioToVisual => "a2v",
        }
    }
}

/// Rank of the true match (diagonal) for query `i`, 1-based. Ties resolve
/// toward the lowest candidate index: an equal-scoring earlier candidate
/// outranks the match.
fn match_rank(s: &Tensor, i: usize, direction: RetrievalDirection) -> usize {
    let m = s.shape()[0];
    let score = |j: usize| match direction {
        RetrievalDirection::VisualToAudio => s.at(i, j),
        RetrievalDirection::AudioToVisual => s.at(j, i),
    };
    let own = score(i);
    let mut rank = 1;
    for j in 0..m {
        if j == i {
            continue;
        }
        let v = score(j);
        if v > own || (v == own && j < i) {
            rank += 1;
        }
    }
    rank
}

/// Fraction of queries whose true match ranks within the top `k`.
pub fn recall_at_k(s: &Tensor, k: usize, direction: RetrievalDirection) -> Result<f64> {
    let (m, n) = s.dims2()?;
    if m != n || m == 0 {
        return Err(CoreError::invalid(format!(
            "similarity matrix must be square and non-empty, got {m}×{n}"
        )));
    }
    if k == 0 || k > m {
        return Err(CoreError::invalid(format!("k={k} out of range for {m} items")));
    }
    let hits = (0..m)
        .filter(|&i| match_rank(s, i, direction) <= k)
        .count();
    Ok(hits as f64 / m as f64)
}

/// Per-sample class scores with ground-truth labels (multi-label allowed).
#[derive(Debug, Clone)]
pub struct RankedPrediction {
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

/// Macro-averaged mean average precision plus warnings for skipped classes.
#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub value: f64,
    pub per_class: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// Average precision for one class over the full ranking: the mean, over
/// positives, of precision at each positive's rank. Ties rank the lower
/// sample index first.
fn average_precision(scored: &mut Vec<(usize, f64, bool)>) -> Option<f64> {
    let n_pos = scored.iter().filter(|(_, _, p)| *p).count();
    if n_pos == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut seen_pos = 0usize;
    let mut total = 0.0;
    for (rank0, (_, _, positive)) in scored.iter().enumerate() {
        if *positive {
            seen_pos += 1;
            total += seen_pos as f64 / (rank0 + 1) as f64;
        }
    }
    Some(total / n_pos as f64)
}

/// Macro mAP over `n_classes`; classes with no positive are skipped with a
/// warning.
pub fn mean_average_precision(preds: &[RankedPrediction], n_classes: usize) -> Result<MapResult> {
    if preds.is_empty() {
        return Err(CoreError::invalid("mAP over empty prediction list"));
    }
    for (i, p) in preds.iter().enumerate() {
        if p.scores.len() != n_classes {
            return Err(CoreError::invalid(format!(
                "prediction {i} has {} scores for {n_classes} classes",
                p.scores.len()
            )));
        }
        if !p.scores.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite(format!("scores of prediction {i}")));
        }
        if let Some(&bad) = p.labels.iter().find(|&&l| l >= n_classes) {
            return Err(CoreError::invalid(format!(
                "label {bad} out of range in prediction {i}"
            )));
        }
    }
    let mut per_class = Vec::with_capacity(n_classes);
    let mut warnings = Vec::new();
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..n_classes {
        let mut scored: Vec<(usize, f64, bool)> = preds
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.scores[c], p.labels.contains(&c)))
            .collect();
        match average_precision(&mut scored) {
            Some(ap) => {
                per_class.push(Some(ap));
                total += ap;
                counted += 1;
            }
            None => {
                per_class.push(None);
                warnings.push(format!("class {c} has no positives, skipped"));
            }
        }
    }
    if counted == 0 {
        return Err(CoreError::invalid("no class has a positive example"));
    }
    Ok(MapResult {
        value: total / counted as f64,
        per_class,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::Rng;

    #[test]
    fn identity_similarity_gives_perfect_recall() {
        let mut s = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            s.data_mut()[i * 4 + i] = 1.0;
        }
        for dir in [
            RetrievalDirection::VisualToAudio,
            RetrievalDirection::AudioToVisual,
        ] {
            assert_eq!(recall_at_k(&s, 1, dir).unwrap(), 1.0);
        }
    }

    #[test]
    fn second_ranked_diagonal() {
        // Off-diagonal 2s outrank the diagonal 1s in every row.
        let s = Tensor::new(
            vec![3, 3],
            vec![1.0, 2.0, 0.0, 0.0, 1.0, 2.0, 2.0, 0.0, 1.0],
        )
        .unwrap();
        let d = RetrievalDirection::VisualToAudio;
        assert_eq!(recall_at_k(&s, 1, d).unwrap(), 0.0);
        assert_eq!(recall_at_k(&s, 2, d).unwrap(), 1.0);
        assert_eq!(recall_at_k(&s, 3, d).unwrap(), 1.0);
        assert!(recall_at_k(&s, 5, d).is_err()); // k > M
    }

    #[test]
    fn ties_break_toward_lowest_index() {
        // Row 1 ties with column 0: the earlier index outranks the match.
        let s = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(
            recall_at_k(&s, 1, RetrievalDirection::VisualToAudio).unwrap(),
            0.5
        );
    }

    #[test]
    fn recall_monotone_in_k_and_random_chance_level() {
        let mut r = crate::rng::rng_from_seed(77);
        let mut total_r1 = 0.0;
        let trials = 200;
        let m = 100;
        for _ in 0..trials {
            let mut s = Tensor::zeros(vec![m, m]);
            for v in s.data_mut() {
                *v = r.random::<f64>() * 2.0 - 1.0;
            }
            let mut prev = 0.0;
            for k in [1, 2, 5, 10, 50, 100] {
                let rk = recall_at_k(&s, k, RetrievalDirection::VisualToAudio).unwrap();
                assert!(rk >= prev);
                prev = rk;
            }
            total_r1 += recall_at_k(&s, 1, RetrievalDirection::VisualToAudio).unwrap();
        }
        let mean_r1 = total_r1 / trials as f64;
        assert!((mean_r1 - 0.01).abs() < 0.005, "{mean_r1}");
    }

    fn single_class(scores: &[f64], positives: &[bool]) -> Vec<RankedPrediction> {
        scores
            .iter()
            .zip(positives)
            .map(|(&s, &p)| RankedPrediction {
                scores: vec![s],
                labels: if p { vec![0] } else { vec![] },
            })
            .collect()
    }

    #[test]
    fn map_hand_oracles() {
        // Perfect ranking.
        let preds = single_class(&[0.9, 0.8, 0.1], &[true, true, false]);
        assert_eq!(mean_average_precision(&preds, 1).unwrap().value, 1.0);
        // Positives at ranks 1 and 3 of 4.
        let preds = single_class(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]);
        let m = mean_average_precision(&preds, 1).unwrap();
        assert!((m.value - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        // Reversed perfect: one positive ranked last of 4.
        let preds = single_class(&[0.4, 0.3, 0.2, 0.1], &[false, false, false, true]);
        assert_eq!(mean_average_precision(&preds, 1).unwrap().value, 0.25);
    }

    #[test]
    fn map_skips_empty_classes_with_warning() {
        let preds = vec![
            RankedPrediction {
                scores: vec![0.9, 0.5],
                labels: vec![0],
            },
            RankedPrediction {
                scores: vec![0.1, 0.7],
                labels: vec![0],
            },
        ];
        let m = mean_average_precision(&preds, 2).unwrap();
        assert_eq!(m.value, 1.0);
        assert_eq!(m.per_class, vec![Some(1.0), None]);
        assert_eq!(m.warnings.len(), 1);
    }

    /// Independent oracle: precision at each positive computed by counting
    /// pairwise rank comparisons, no sorting.
    fn ap_oracle(scores: &[f64], positives: &[bool]) -> f64 {
        let n = scores.len();
        let rank = |i: usize| {
            1 + (0..n)
                .filter(|&j| {
                    j != i && (scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                })
                .count()
        };
        let mut aps = Vec::new();
        for i in 0..n {
            if positives[i] {
                let r = rank(i);
                let pos_at_or_above = (0..n)
                    .filter(|&j| positives[j] && rank(j) <= r)
                    .count();
                aps.push(pos_at_or_above as f64 / r as f64);
            }
        }
        aps.iter().sum::<f64>() / aps.len() as f64
    }

    #[test]
    fn map_matches_oracle_exhaustively_up_to_six_items() {
        for n in 1..=6usize {
            // Distinct scores so the ranking is unambiguous.
            let scores: Vec<f64> = (0..n).map(|i| 1.0 - 0.13 * i as f64).collect();
            for pattern in 1..(1u32 << n) {
                let positives: Vec<bool> = (0..n).map(|i| pattern & (1 << i) != 0).collect();
                let preds = single_class(&scores, &positives);
                let got = mean_average_precision(&preds, 1).unwrap().value;
                let want = ap_oracle(&scores, &positives);
                assert!(
                    (got - want).abs() < 1e-12,
                    "n={n} pattern={pattern:b}: {got} vs {want}"
                );
            }
        }
    }
}
