//! Fixed 2-D sinusoidal positional embeddings.

use alloc::vec;

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::tensor::Tensor;

/// `[rows·cols × dim]` table: the first `dim/2` channels encode the row
/// index, the second half the column index, each as interleaved sin/cos pairs
/// with geometric frequencies (base 10000). Deterministic and never trained.
pub fn positional_embedding_2d(rows: usize, cols: usize, dim: usize) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(CoreError::invalid(alloc::format!(
            "positional embedding dim {dim} not divisible by 4"
        )));
    }
    let half = dim / 2;
    let pairs = half / 2;
    let mut out = Tensor::zeros(vec![rows * cols, dim]);
    for r in 0..rows {
        for c in 0..cols {
            let row_off = (r * cols + c) * dim;
            for j in 0..pairs {
                let freq = fmath::powf(10_000.0, -(j as f64) / pairs as f64);
                let (ar, ac) = (r as f64 * freq, c as f64 * freq);
                let d = out.data_mut();
                d[row_off + 2 * j] = fmath::sin(ar);
                d[row_off + 2 * j + 1] = fmath::cos(ar);
                d[row_off + half + 2 * j] = fmath::sin(ac);
                d[row_off + half + 2 * j + 1] = fmath::cos(ac);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_alternating_zero_one() {
        let t = positional_embedding_2d(2, 2, 8).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn dim_must_divide_by_four() {
        assert!(positional_embedding_2d(2, 2, 6).is_err());
        assert!(positional_embedding_2d(2, 2, 8).is_ok());
    }

    #[test]
    fn all_positions_distinct_on_14x14() {
        let t = positional_embedding_2d(14, 14, 32).unwrap();
        let n = 14 * 14;
        let mut min_linf = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                let linf = t
                    .row(i)
                    .iter()
                    .zip(t.row(j))
                    .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
                min_linf = min_linf.min(linf);
            }
        }
        assert!(min_linf > 0.0, "two positions share an embedding");
    }

    #[test]
    fn stateless_across_calls() {
        let a = positional_embedding_2d(16, 4, 32).unwrap();
        let b = positional_embedding_2d(16, 4, 32).unwrap();
        assert_eq!(a, b);
    }
}
