//! Tokenizer oracles: FFT against a naive DFT, mel-bin localization of a pure
//! tone against a direct filterbank evaluation, and the full-scale shape.

use cavmae_core::spectrogram::{
    fft_in_place, log_mel_spectrogram, mel_edges, triangle_weight, SpectrogramConfig,
};
use cavmae_core::rng::{rng_from_seed, standard_normal};

#[test]
fn fft_matches_naive_dft() {
    let mut rng = rng_from_seed(21);
    for n in [2usize, 4, 8, 16, 64, 256, 512] {
        let re0: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let im0: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mut re = re0.clone();
        let mut im = im0.clone();
        fft_in_place(&mut re, &mut im).unwrap();
        for k in 0..n {
            // naive DFT with std trig, independent of the implementation
            let (mut sr, mut si) = (0.0, 0.0);
            for t in 0..n {
                let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                sr += re0[t] * ang.cos() - im0[t] * ang.sin();
                si += re0[t] * ang.sin() + im0[t] * ang.cos();
            }
            assert!(
                (re[k] - sr).abs() < 1e-9 && (im[k] - si).abs() < 1e-9,
                "n={n} k={k}: ({},{}) vs naive ({sr},{si})",
                re[k],
                im[k]
            );
        }
    }
}

#[test]
fn fft_rejects_non_power_of_two() {
    let mut re = vec![0.0; 12];
    let mut im = vec![0.0; 12];
    assert!(fft_in_place(&mut re, &mut im).is_err());
}

#[test]
fn pure_tone_lands_in_oracle_mel_bin() {
    let cfg = SpectrogramConfig {
        target_frames: 8,
        ..SpectrogramConfig::default()
    };
    let tone_hz = 1000.0;
    let wave: Vec<f64> = (0..4000)
        .map(|i| (2.0 * std::f64::consts::PI * tone_hz * i as f64 / 16_000.0).sin())
        .collect();
    let spec = log_mel_spectrogram(&wave, &cfg).unwrap();

    // Oracle: evaluate each filter's triangle directly at the tone frequency
    // and take the strongest filter. No FFT involved.
    let edges = mel_edges(cfg.n_mels, cfg.f_min, 8000.0);
    let oracle_bin = (0..cfg.n_mels)
        .max_by(|&a, &b| {
            let wa = triangle_weight(tone_hz, edges[a], edges[a + 1], edges[a + 2]);
            let wb = triangle_weight(tone_hz, edges[b], edges[b + 1], edges[b + 2]);
            wa.partial_cmp(&wb).unwrap()
        })
        .unwrap();

    for frame in 0..cfg.target_frames {
        let row = spec.row(frame);
        let argmax = (0..cfg.n_mels)
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
            .unwrap();
        assert_eq!(argmax, oracle_bin, "frame {frame}: {row:?}");
    }
}

#[test]
fn full_scale_shape() {
    // 10 s at 16 kHz with the full-sized extraction grid → 1024×128.
    let cfg = SpectrogramConfig {
        n_mels: 128,
        target_frames: 1024,
        ..SpectrogramConfig::default()
    };
    let wave: Vec<f64> = (0..160_000)
        .map(|i| (0.3 * i as f64).sin() * 0.1)
        .collect();
    let spec = log_mel_spectrogram(&wave, &cfg).unwrap();
    assert_eq!(spec.shape(), &[1024, 128]);
    assert!(spec.all_finite());
}
