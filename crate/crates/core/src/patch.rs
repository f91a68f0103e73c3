//! Patchification of spectrograms and images, plus frame selection for the
//! one-frame-per-clip training scheme.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// A grid cut into square patches, each flattened to a row.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// `[grid_rows·grid_cols × patch_size²·channels]`, row-major over the
    /// patch grid; within a patch, flattening order is (row, col, channel).
    pub patches: Tensor,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchSequence {
    pub fn n_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Splits a `[rows × cols]` or `[rows × cols × channels]` grid into square
/// patches in row-major grid order.
pub fn patchify(grid: &Tensor, patch_size: usize) -> Result<PatchSequence> {
    let (rows, cols, channels) = match grid.shape() {
        [r, c] => (*r, *c, 1),
        [r, c, ch] => (*r, *c, *ch),
        other => {
            return Err(CoreError::invalid(alloc::format!(
                "patchify expects rank 2 or 3 grid, got {other:?}"
            )))
        }
    };
    if patch_size == 0 || rows % patch_size != 0 || cols % patch_size != 0 {
        return Err(CoreError::invalid(alloc::format!(
            "grid {rows}×{cols} not divisible by patch size {patch_size}"
        )));
    }
    let grid_rows = rows / patch_size;
    let grid_cols = cols / patch_size;
    let patch_len = patch_size * patch_size * channels;
    let mut data = Vec::with_capacity(grid_rows * grid_cols * patch_len);
    for pr in 0..grid_rows {
        for pc in 0..grid_cols {
            for r in 0..patch_size {
                for c in 0..patch_size {
                    let src = ((pr * patch_size + r) * cols + pc * patch_size + c) * channels;
                    data.extend_from_slice(&grid.data()[src..src + channels]);
                }
            }
        }
    }
    Ok(PatchSequence {
        patches: Tensor::new(vec![grid_rows * grid_cols, patch_len], data)?,
        grid_rows,
        grid_cols,
        patch_size,
        channels,
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(seq: &PatchSequence) -> Result<Tensor> {
    let (n, plen) = (seq.n_patches(), seq.patch_len());
    if seq.patches.shape() != [n, plen] {
        return Err(CoreError::invalid(alloc::format!(
            "patch tensor shape {:?} inconsistent with geometry {}×{} patch {} ch {}",
            seq.patches.shape(),
            seq.grid_rows,
            seq.grid_cols,
            seq.patch_size,
            seq.channels
        )));
    }
    let rows = seq.grid_rows * seq.patch_size;
    let cols = seq.grid_cols * seq.patch_size;
    let shape = if seq.channels == 1 {
        vec![rows, cols]
    } else {
        vec![rows, cols, seq.channels]
    };
    let mut out = Tensor::zeros(shape);
    for pr in 0..seq.grid_rows {
        for pc in 0..seq.grid_cols {
            let patch = seq.patches.row(pr * seq.grid_cols + pc);
            let mut i = 0;
            for r in 0..seq.patch_size {
                for c in 0..seq.patch_size {
                    let dst =
                        ((pr * seq.patch_size + r) * cols + pc * seq.patch_size + c) * seq.channels;
                    out.data_mut()[dst..dst + seq.channels]
                        .copy_from_slice(&patch[i..i + seq.channels]);
                    i += seq.channels;
                }
            }
        }
    }
    Ok(out)
}

/// The frames of one clip (all the same shape).
#[derive(Debug, Clone)]
pub struct FrameSet {
    frames: Vec<Tensor>,
}

impl FrameSet {
    pub fn new(frames: Vec<Tensor>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| CoreError::invalid("frame set must contain at least one frame"))?;
        for f in &frames[1..] {
            if f.shape() != first.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "frame_set",
                    lhs: first.shape().to_vec(),
                    rhs: f.shape().to_vec(),
                });
            }
        }
        Ok(FrameSet { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor guarantees ≥ 1 frame
    }

    pub fn frame(&self, i: usize) -> &Tensor {
        &self.frames[i]
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }
}

/// Frame usage mode: one random frame while training, all frames (for
/// prediction averaging) at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameMode {
    Train,
    Infer,
}

/// Indices of the frames to use. Train mode draws one uniform index from the
/// seed; infer mode returns all indices in order.
pub fn select_frame_indices(n_frames: usize, mode: FrameMode, seed: u64) -> Vec<usize> {
    match mode {
        FrameMode::Train => {
            let mut r = rng::rng_from_seed(seed);
            vec![rng::uniform_index(&mut r, n_frames)]
        }
        FrameMode::Infer => (0..n_frames).collect(),
    }
}

/// Borrowing convenience over [`select_frame_indices`].
pub fn select_frames(fs: &FrameSet, mode: FrameMode, seed: u64) -> Vec<&Tensor> {
    select_frame_indices(fs.len(), mode, seed)
        .into_iter()
        .map(|i| fs.frame(i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal};

    #[test]
    fn patchify_geometry_desk_scale() {
        // 128×32 spectrogram with patch 8 → 16×4 grid of length-64 patches.
        let grid = Tensor::zeros(vec![128, 32]);
        let seq = patchify(&grid, 8).unwrap();
        assert_eq!((seq.grid_rows, seq.grid_cols), (16, 4));
        assert_eq!(seq.patches.shape(), &[64, 64]);
        // 32×32×3 image with patch 8 → 4×4 grid of length-192 patches.
        let img = Tensor::zeros(vec![32, 32, 3]);
        let seq = patchify(&img, 8).unwrap();
        assert_eq!((seq.grid_rows, seq.grid_cols), (4, 4));
        assert_eq!(seq.patches.shape(), &[16, 192]);
    }

    #[test]
    fn single_patch_is_flattened_grid() {
        let mut grid = Tensor::zeros(vec![4, 4]);
        for (i, v) in grid.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let seq = patchify(&grid, 4).unwrap();
        assert_eq!(seq.patches.shape(), &[1, 16]);
        assert_eq!(seq.patches.data(), grid.data());
    }

    #[test]
    fn indivisible_dims_error() {
        let grid = Tensor::zeros(vec![10, 8]);
        assert!(patchify(&grid, 4).is_err());
    }

    #[test]
    fn round_trip_random_grids() {
        let mut rng = rng_from_seed(9);
        for shape in [vec![16, 8], vec![8, 8, 3], vec![24, 16, 2]] {
            let mut g = Tensor::zeros(shape);
            for v in g.data_mut() {
                *v = standard_normal(&mut rng);
            }
            let seq = patchify(&g, 4).unwrap();
            let back = unpatchify(&seq).unwrap();
            assert_eq!(g, back);
        }
    }

    #[test]
    fn zeroed_patch_diff_confined_to_block() {
        let mut rng = rng_from_seed(10);
        let mut g = Tensor::zeros(vec![16, 8]);
        for v in g.data_mut() {
            *v = standard_normal(&mut rng) + 3.0; // keep away from zero
        }
        let mut seq = patchify(&g, 4).unwrap();
        // zero out patch (1, 0) → grid rows 4..8, cols 0..4
        let cols = seq.patches.shape()[1];
        let target = 1 * seq.grid_cols + 0;
        for v in &mut seq.patches.data_mut()[target * cols..(target + 1) * cols] {
            *v = 0.0;
        }
        let back = unpatchify(&seq).unwrap();
        for r in 0..16 {
            for c in 0..8 {
                let inside = (4..8).contains(&r) && (0..4).contains(&c);
                let same = (back.at(r, c) - g.at(r, c)).abs() < 1e-15;
                assert_eq!(!inside, same, "row {r} col {c}");
            }
        }
    }

    #[test]
    fn frame_selection_modes() {
        let frames: Vec<Tensor> = (0..10).map(|i| Tensor::scalar(i as f64)).collect();
        let fs = FrameSet::new(frames).unwrap();
        let all = select_frame_indices(fs.len(), FrameMode::Infer, 0);
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let one = select_frame_indices(fs.len(), FrameMode::Train, 1234);
        assert_eq!(one.len(), 1);
        assert_eq!(one, select_frame_indices(fs.len(), FrameMode::Train, 1234));
        let single = FrameSet::new(vec![Tensor::scalar(7.0)]).unwrap();
        assert_eq!(select_frame_indices(single.len(), FrameMode::Train, 99), [0]);
    }

    #[test]
    fn train_frame_selection_is_uniform() {
        // chi-squared over 10⁴ seeds, 10 frames: reject only below p≈0.01
        // (critical value 21.67 at 9 dof).
        let mut counts = [0usize; 10];
        for seed in 0..10_000u64 {
            counts[select_frame_indices(10, FrameMode::Train, seed)[0]] += 1;
        }
        let expected = 1000.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 21.67, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn mismatched_frames_rejected() {
        let frames = vec![Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![3, 2])];
        assert!(FrameSet::new(frames).is_err());
        assert!(FrameSet::new(Vec::new()).is_err());
    }
}
