//! Log-mel spectrogram extraction: Hann window, radix-2 FFT, triangular mel
//! filterbank, natural log on floored power.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::tensor::Tensor;

/// Extraction parameters. `target_frames` fixes the output length: short
/// signals are zero-padded (in the waveform, so trailing frames are genuine
/// silence frames), long ones truncated.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop_len: usize,
    pub n_mels: usize,
    pub target_frames: usize,
    /// Added to power before the log so silence stays finite.
    pub log_floor: f64,
    pub f_min: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub f_max: Option<f64>,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            sample_rate: 16_000,
            window_len: 400,
            hop_len: 160,
            n_mels: 32,
            target_frames: 128,
            log_floor: 1e-10,
            f_min: 0.0,
            f_max: None,
        }
    }
}

/// Hz → mel, 2595·log10(1 + f/700).
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * fmath::log10(1.0 + f / 700.0)
}

/// mel → Hz, inverse of [`hz_to_mel`].
pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (fmath::powf(10.0, m / 2595.0) - 1.0)
}

/// Smallest power of two ≥ n.
pub fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p <<= 1;
    }
    p
}

/// In-place iterative radix-2 FFT over split re/im buffers.
/// Length must be a power of two.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) -> Result<()> {
    let n = re.len();
    if n != im.len() {
        return Err(CoreError::ShapeMismatch {
            op: "fft",
            lhs: vec![re.len()],
            rhs: vec![im.len()],
        });
    }
    if n == 0 || n & (n - 1) != 0 {
        return Err(CoreError::invalid(alloc::format!(
            "fft length {n} is not a power of two"
        )));
    }
    // bit-reversal permutation
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * core::f64::consts::PI / len as f64;
        let (wr, wi) = (fmath::cos(ang), fmath::sin(ang));
        let mut i = 0;
        while i < n {
            let (mut cur_r, mut cur_i) = (1.0, 0.0);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr0, vi0) = (re[i + k + len / 2], im[i + k + len / 2]);
                let vr = vr0 * cur_r - vi0 * cur_i;
                let vi = vr0 * cur_i + vi0 * cur_r;
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let next_r = cur_r * wr - cur_i * wi;
                cur_i = cur_r * wi + cur_i * wr;
                cur_r = next_r;
            }
            i += len;
        }
        len <<= 1;
    }
    Ok(())
}

/// Periodic Hann window of length n.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * fmath::cos(2.0 * core::f64::consts::PI * i as f64 / n as f64))
        .collect()
}

/// Triangular mel filterbank as a dense `[n_mels × (nfft/2 + 1)]` matrix.
/// Triangles are linear in Hz between edges taken equally spaced in mel.
pub fn mel_filterbank(cfg: &SpectrogramConfig, nfft: usize) -> Tensor {
    let n_bins = nfft / 2 + 1;
    let f_max = cfg.f_max.unwrap_or(cfg.sample_rate as f64 / 2.0);
    let edges = mel_edges(cfg.n_mels, cfg.f_min, f_max);
    let mut fb = Tensor::zeros(vec![cfg.n_mels, n_bins]);
    let bin_hz = cfg.sample_rate as f64 / nfft as f64;
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = triangle_weight(f, left, center, right);
            if w > 0.0 {
                fb.data_mut()[m * n_bins + k] = w;
            }
        }
    }
    fb
}

/// n_mels + 2 filter edge frequencies in Hz, equally spaced in mel.
pub fn mel_edges(n_mels: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangle response at frequency `f` for a filter with the given Hz edges.
pub fn triangle_weight(f: f64, left: f64, center: f64, right: f64) -> f64 {
    if f <= left || f >= right {
        0.0
    } else if f <= center {
        (f - left) / (center - left)
    } else {
        (right - f) / (right - center)
    }
}

/// Full pipeline: waveform → `[target_frames × n_mels]` log-mel matrix.
pub fn log_mel_spectrogram(waveform: &[f64], cfg: &SpectrogramConfig) -> Result<Tensor> {
    if waveform.is_empty() {
        return Err(CoreError::invalid("empty waveform"));
    }
    if waveform.len() < cfg.window_len {
        return Err(CoreError::invalid(alloc::format!(
            "waveform of {} samples shorter than one window ({})",
            waveform.len(),
            cfg.window_len
        )));
    }
    let nfft = next_pow2(cfg.window_len);
    let n_bins = nfft / 2 + 1;
    let window = hann_window(cfg.window_len);
    let fb = mel_filterbank(cfg, nfft);

    // Zero-pad the waveform so exactly target_frames frames exist; frames
    // past the signal end are then true silence rather than synthetic rows.
    let needed = cfg.window_len + (cfg.target_frames - 1) * cfg.hop_len;
    let mut padded;
    let samples: &[f64] = if waveform.len() < needed {
        padded = waveform.to_vec();
        padded.resize(needed, 0.0);
        &padded
    } else {
        waveform
    };

    let mut out = Tensor::zeros(vec![cfg.target_frames, cfg.n_mels]);
    let mut re = vec![0.0; nfft];
    let mut im = vec![0.0; nfft];
    for frame in 0..cfg.target_frames {
        let start = frame * cfg.hop_len;
        for i in 0..nfft {
            re[i] = if i < cfg.window_len {
                samples[start + i] * window[i]
            } else {
                0.0
            };
            im[i] = 0.0;
        }
        fft_in_place(&mut re, &mut im)?;
        for m in 0..cfg.n_mels {
            let weights = &fb.data()[m * n_bins..(m + 1) * n_bins];
            let mut power = 0.0;
            for k in 0..n_bins {
                let w = weights[k];
                if w > 0.0 {
                    power += w * (re[k] * re[k] + im[k] * im[k]);
                }
            }
            out.data_mut()[frame * cfg.n_mels + m] = fmath::ln(power + cfg.log_floor);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn next_pow2_values() {
        assert_eq!(next_pow2(1), 1);
        assert_eq!(next_pow2(400), 512);
        assert_eq!(next_pow2(512), 512);
        assert_eq!(next_pow2(513), 1024);
    }

    #[test]
    fn silence_gives_constant_log_floor() {
        let cfg = SpectrogramConfig {
            target_frames: 8,
            ..SpectrogramConfig::default()
        };
        let wave = alloc::vec![0.0; 2000];
        let out = log_mel_spectrogram(&wave, &cfg).unwrap();
        assert_eq!(out.shape(), &[8, 32]);
        let expected = fmath::ln(1e-10);
        for &v in out.data() {
            assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        }
    }

    #[test]
    fn too_short_waveform_errors() {
        let cfg = SpectrogramConfig::default();
        assert!(log_mel_spectrogram(&[0.0; 100], &cfg).is_err());
        assert!(log_mel_spectrogram(&[], &cfg).is_err());
    }

    #[test]
    fn output_shape_honors_pad_and_truncate() {
        let cfg = SpectrogramConfig {
            target_frames: 16,
            ..SpectrogramConfig::default()
        };
        // Short signal (pad) and long signal (truncate) both land on 16 rows.
        for len in [500usize, 100_000] {
            let wave: alloc::vec::Vec<f64> = (0..len).map(|i| (i % 7) as f64 * 0.01).collect();
            let out = log_mel_spectrogram(&wave, &cfg).unwrap();
            assert_eq!(out.shape(), &[16, 32]);
        }
    }

    #[test]
    fn amplitude_monotonicity_per_frame() {
        let cfg = SpectrogramConfig {
            target_frames: 6,
            ..SpectrogramConfig::default()
        };
        let mut rng = crate::rng::rng_from_seed(5);
        let wave: alloc::vec::Vec<f64> = (0..2000)
            .map(|_| crate::rng::standard_normal(&mut rng))
            .collect();
        let doubled: alloc::vec::Vec<f64> = wave.iter().map(|v| 2.0 * v).collect();
        let a = log_mel_spectrogram(&wave, &cfg).unwrap();
        let b = log_mel_spectrogram(&doubled, &cfg).unwrap();
        for frame in 0..6 {
            let pa: f64 = a.row(frame).iter().map(|&v| fmath::exp(v)).sum();
            let pb: f64 = b.row(frame).iter().map(|&v| fmath::exp(v)).sum();
            assert!(pb > pa, "frame {frame}: {pb} <= {pa}");
        }
    }
}
