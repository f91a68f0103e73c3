//! Synthetic paired audio-visual corpus with controllable class structure
//! and correspondence strength.
//!
//! Classes come in pairs. The pair index is easy to read from global
//! statistics — it picks the audio frequency band and the stripe color —
//! while the parity bit inside a pair is deliberately faint: it adds a weak
//! audio sideband, shifts the stripes' secondary color channels, and flips
//! the stripe orientation. Representations that preserve input detail keep
//! the parity cues; representations shaped only by easy discriminative
//! shortcuts tend to drop them.
//!
//! Each sample additionally owns a quadrant shared by the two modalities:
//! it selects an always-on audio carrier band, the period of the audio
//! rhythm, the image background brightness, and the image region holding
//! the stripes. The quadrant is the instance-level attribute paired
//! training can align beyond class identity.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{self, derangement, rng_from_seed};
use crate::tensor::Tensor;

/// Shapes available; caps the class count.
pub const MAX_CLASSES: usize = 8;

/// Amplitude of the audio band signal when the rhythm pulse is on.
const BAND_AMPLITUDE: f64 = 3.0;

/// Amplitude of the faint parity sideband next to the class band.
const SIDEBAND_AMPLITUDE: f64 = 1.0;

/// Amplitude of the always-on quadrant carrier band.
const CARRIER_AMPLITUDE: f64 = 3.0;

/// Amplitude of the broadband clicks scattered at random frames. Their
/// timing is per-sample randomness, so a masked-out frame's click state can
/// only be recovered from the same frame in another frequency region —
/// context that time masking removes but scattered masking keeps.
const CLICK_AMPLITUDE: f64 = 3.0;

/// Image background brightness step between quadrants.
const QUADRANT_BG_STEP: f64 = 0.3;

/// Secondary-channel level of the stripes for parity 0 and parity 1.
const PARITY_SECONDARY: [f64; 2] = [0.2, 0.55];

/// Corpus description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub target_frames: usize,
    pub n_mels: usize,
    /// Square image edge length.
    pub image_size: usize,
    pub channels: usize,
    /// Frames per clip.
    pub n_frames: usize,
    pub patch_size: usize,
    pub noise_std: f64,
    /// Probability that a sample's audio motif matches its visual class and
    /// quadrant; below 1 the audio side is drawn independently.
    pub correspondence_prob: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_classes: 8,
            samples_per_class: 64,
            target_frames: 128,
            n_mels: 32,
            image_size: 32,
            channels: 3,
            n_frames: 4,
            patch_size: 8,
            noise_std: 0.5,
            correspondence_prob: 1.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > MAX_CLASSES {
            return Err(CoreError::invalid(format!(
                "n_classes must be in 2..={MAX_CLASSES}, got {}",
                self.n_classes
            )));
        }
        if self.samples_per_class == 0 || self.n_frames == 0 {
            return Err(CoreError::invalid("samples_per_class and n_frames must be positive"));
        }
        for (name, v) in [
            ("target_frames", self.target_frames),
            ("n_mels", self.n_mels),
            ("image_size", self.image_size),
        ] {
            if self.patch_size == 0 || v % self.patch_size != 0 {
                return Err(CoreError::invalid(format!(
                    "{name} {v} not divisible by patch size {}",
                    self.patch_size
                )));
            }
        }
        if self.n_mels < 24 {
            return Err(CoreError::invalid("n_mels must be at least 24 for the band layout"));
        }
        if self.channels == 0 || self.channels > 3 {
            return Err(CoreError::invalid("channels must be 1..=3"));
        }
        if !(0.0..=1.0).contains(&self.correspondence_prob) {
            return Err(CoreError::invalid("correspondence_prob must lie in [0,1]"));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(CoreError::invalid("noise_std must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.n_classes * self.samples_per_class
    }

    /// Train size: floor of 80% of the total.
    pub fn train_size(&self) -> usize {
        self.total_samples() * 4 / 5
    }
}

/// One paired sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub label: u32,
    /// `[target_frames × n_mels]` spectrogram-like tensor.
    pub audio: Tensor,
    /// `n_frames` images, each `[image_size × image_size × channels]`.
    pub frames: Vec<Tensor>,
    /// Motif quadrant per frame (constant within a sample).
    pub quadrants: Vec<u8>,
}

/// Generated corpus, already split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<SampleRecord>,
    pub eval: Vec<SampleRecord>,
}

/// Band-start bin of a class pair; classes 2k and 2k+1 share the band.
/// The four pair bands sit in the lower region `0..n_mels-8`, the top eight
/// bins being reserved for the quadrant carriers.
pub fn pair_band(class: usize, n_mels: usize) -> usize {
    1 + (class / 2) * ((n_mels - 8) / 4)
}

/// Start bin of a quadrant's always-on carrier band, in the reserved top
/// region.
pub fn carrier_row(quadrant: u8, n_mels: usize) -> usize {
    n_mels - 8 + 2 * quadrant as usize
}

/// Rhythm period in frames for a quadrant.
pub fn quadrant_period(q: u8) -> usize {
    6 + 3 * q as usize
}

/// Whether the class band is on at `phase` into a period of `p` frames.
/// Even classes emit one solid block of `p/2` frames; odd classes split the
/// same on-time into two shorter blocks. Per-period duty is identical, so
/// the two members of a pair differ in temporal texture, not energy.
fn pulse_on(parity: usize, phase: usize, p: usize) -> bool {
    let h = p / 2;
    if parity == 0 {
        phase < h
    } else {
        let q = h / 2;
        phase < q || (h..2 * h - q).contains(&phase)
    }
}

/// Noise-free audio motif: the quadrant carrier always on, the class-pair
/// band pulsing with the quadrant's period in the parity's texture. Odd
/// classes additionally carry a faint sideband two bins above the band.
pub fn audio_motif(class: usize, quadrant: u8, target_frames: usize, n_mels: usize) -> Tensor {
    let band = pair_band(class, n_mels);
    let carrier = carrier_row(quadrant, n_mels);
    let period = quadrant_period(quadrant);
    let parity = class % 2;
    let mut t = Tensor::zeros(vec![target_frames, n_mels]);
    for frame in 0..target_frames {
        for w in 0..2 {
            t.data_mut()[frame * n_mels + carrier + w] = CARRIER_AMPLITUDE;
        }
        if pulse_on(parity, frame % period, period) {
            for w in 0..2 {
                t.data_mut()[frame * n_mels + band + w] = BAND_AMPLITUDE;
            }
            if parity == 1 {
                t.data_mut()[frame * n_mels + band + 2] = SIDEBAND_AMPLITUDE;
            }
        }
    }
    t
}

/// Stripe color of a class: the pair fixes which channels are primary
/// (full brightness); the parity sets the level of the remaining channels.
/// Truncated to the configured channel count.
fn class_color(class: usize) -> [f64; 3] {
    const PRIMARY: [[bool; 3]; 4] = [
        [true, false, false],
        [false, true, false],
        [false, false, true],
        [true, true, false],
    ];
    let primary = PRIMARY[class / 2];
    let secondary = PARITY_SECONDARY[class % 2];
    let mut c = [0.0; 3];
    for i in 0..3 {
        c[i] = if primary[i] { 1.0 } else { secondary };
    }
    c
}

/// Stripe geometry of a pair: (half-extent, spacing, thickness).
fn pair_stripes(pair: usize) -> (i64, i64, i64) {
    [(5, 4, 2), (5, 3, 1), (4, 2, 1), (4, 3, 2)][pair]
}

/// Whether the offset lies on the class's stripe pattern. Odd classes use
/// the exact transpose of their pair's pattern, so the two parities have
/// equal ink and differ only in stripe orientation.
fn shape_member(class: usize, dy: i64, dx: i64) -> bool {
    let (e, s, th) = pair_stripes(class / 2);
    let (u, v) = if class % 2 == 0 { (dy, dx) } else { (dx, dy) };
    u.abs() <= e && v.abs() <= e && u.rem_euclid(s) < th
}

/// Noise-free image frame: a quadrant-brightness background with the class
/// stripes centered in the quadrant at the given pixel jitter.
pub fn visual_motif(
    class: usize,
    quadrant: u8,
    jitter: (i64, i64),
    image_size: usize,
    channels: usize,
) -> Tensor {
    let mut t = Tensor::zeros(vec![image_size, image_size, channels]);
    let bg = QUADRANT_BG_STEP * quadrant as f64;
    for v in t.data_mut() {
        *v = bg;
    }
    let half = image_size as i64 / 2;
    let (qy, qx) = ((quadrant / 2) as i64 * half, (quadrant % 2) as i64 * half);
    let (cy, cx) = (qy + half / 2 + jitter.0, qx + half / 2 + jitter.1);
    let color = class_color(class);
    for y in qy..qy + half {
        for x in qx..qx + half {
            if shape_member(class, y - cy, x - cx) {
                for c in 0..channels {
                    let idx = (y as usize * image_size + x as usize) * channels + c;
                    t.data_mut()[idx] = color[c];
                }
            }
        }
    }
    t
}

fn add_noise(t: &mut Tensor, std: f64, r: &mut rand_chacha::ChaCha8Rng) {
    if std == 0.0 {
        return;
    }
    for v in t.data_mut() {
        *v += std * rng::standard_normal(r);
    }
}

/// Generates one sample by id; pure in (spec, sample_id).
pub fn generate_sample(spec: &CorpusSpec, sample_id: u64) -> SampleRecord {
    let class = (sample_id as usize) / spec.samples_per_class;
    let mut r = rng_from_seed(rng::derive_seed(&[spec.seed, rng::stream::DATA, sample_id]));
    let quadrant = r.random_range(0..4u8);
    let corresponds = spec.correspondence_prob >= 1.0 || {
        let roll: f64 = r.random();
        roll < spec.correspondence_prob
    };
    let (audio_class, audio_quadrant) = if corresponds {
        (class, quadrant)
    } else {
        (r.random_range(0..spec.n_classes), r.random_range(0..4u8))
    };
    let mut audio = audio_motif(audio_class, audio_quadrant, spec.target_frames, spec.n_mels);
    for _ in 0..spec.target_frames / 8 {
        let frame = r.random_range(0..spec.target_frames);
        for bin in 0..spec.n_mels {
            audio.data_mut()[frame * spec.n_mels + bin] += CLICK_AMPLITUDE;
        }
    }
    add_noise(&mut audio, spec.noise_std, &mut r);
    let mut frames = Vec::with_capacity(spec.n_frames);
    for _ in 0..spec.n_frames {
        let jitter = (r.random_range(-2..=2i64), r.random_range(-2..=2i64));
        let mut frame = visual_motif(class, quadrant, jitter, spec.image_size, spec.channels);
        add_noise(&mut frame, 0.1 * spec.noise_std, &mut r);
        frames.push(frame);
    }
    SampleRecord {
        sample_id,
        label: class as u32,
        audio,
        frames,
        quadrants: vec![quadrant; spec.n_frames],
    }
}

/// Generates the full corpus and splits it 80/20 (train floor), with the
/// eval split balanced across classes to within one sample.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let total = spec.total_samples();
    let eval_total = total - spec.train_size();
    let base = eval_total / spec.n_classes;
    let rem = eval_total % spec.n_classes;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for class in 0..spec.n_classes {
        let eval_k = base + usize::from(class < rem);
        let train_k = spec.samples_per_class - eval_k;
        for i in 0..spec.samples_per_class {
            let id = (class * spec.samples_per_class + i) as u64;
            let rec = generate_sample(spec, id);
            if i < train_k {
                train.push(rec);
            } else {
                eval.push(rec);
            }
        }
    }
    Ok(Corpus {
        spec: *spec,
        train,
        eval,
    })
}

/// Replaces every record's audio with another record's audio under a seeded
/// derangement (no sample keeps its own). Labels follow the visual side.
/// Also returns the derangement: entry `i` names the record whose audio
/// sample `i` received.
pub fn shuffle_pairs(records: &[SampleRecord], seed: u64) -> Result<(Vec<SampleRecord>, Vec<usize>)> {
    if records.len() < 2 {
        return Err(CoreError::invalid("shuffle_pairs needs at least 2 samples"));
    }
    let mut r = rng_from_seed(rng::derive_seed(&[seed, rng::stream::SHUFFLE]));
    let sigma = derangement(&mut r, records.len());
    let shuffled = records
        .iter()
        .enumerate()
        .map(|(i, rec)| SampleRecord {
            sample_id: rec.sample_id,
            label: rec.label,
            audio: records[sigma[i]].audio.clone(),
            frames: rec.frames.clone(),
            quadrants: rec.quadrants.clone(),
        })
        .collect();
    Ok((shuffled, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_classes: 4,
            samples_per_class: 8,
            n_frames: 2,
            seed: 9,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn default_split_sizes() {
        let spec = CorpusSpec::default();
        assert_eq!(spec.total_samples(), 512);
        assert_eq!(spec.train_size(), 409);
        let corpus = generate_corpus(&CorpusSpec {
            samples_per_class: 8,
            ..CorpusSpec::default()
        })
        .unwrap();
        // 64 samples → 51 train / 13 eval.
        assert_eq!(corpus.train.len(), 51);
        assert_eq!(corpus.eval.len(), 13);
        // Eval balanced within ±1 across classes.
        let mut counts = [0usize; 8];
        for r in &corpus.eval {
            counts[r.label as usize] += 1;
        }
        let (min, max) = (
            counts.iter().min().unwrap(),
            counts.iter().max().unwrap(),
        );
        assert!(max - min <= 1, "{counts:?}");
        // Disjoint and exhaustive by sample id.
        let mut ids: Vec<u64> = corpus
            .train
            .iter()
            .chain(&corpus.eval)
            .map(|r| r.sample_id)
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..64).collect::<Vec<u64>>());
    }

    #[test]
    fn audio_motif_is_a_pure_function_of_class_and_quadrant() {
        for class in 0..4 {
            for q in 0..4u8 {
                let a = audio_motif(class, q, 64, 24);
                let b = audio_motif(class, q, 64, 24);
                assert_eq!(a, b, "class {class} quadrant {q}");
                assert!(a.data().iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_reasonably_noisy() {
        let spec = small_spec();
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        for r in &a.train {
            assert!(r.audio.all_finite());
            assert!(r.frames.iter().all(Tensor::all_finite));
            assert_eq!(r.quadrants.len(), spec.n_frames);
            assert!(r.quadrants.iter().all(|&q| q < 4));
            assert!(r.quadrants.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn band_layout_is_disjoint() {
        for n_mels in [24usize, 32] {
            let mut used = vec![false; n_mels];
            let mut claim = |start: usize, what: &str| {
                for b in start..start + 2 {
                    assert!(b < n_mels, "{what} band {b} out of range at {n_mels} mels");
                    assert!(!used[b], "{what} band {b} reused at {n_mels} mels");
                    used[b] = true;
                }
            };
            for pair in 0..4 {
                claim(pair_band(2 * pair, n_mels), "pair");
                assert_eq!(pair_band(2 * pair, n_mels), pair_band(2 * pair + 1, n_mels));
            }
            for q in 0..4u8 {
                claim(carrier_row(q, n_mels), "carrier");
                assert!(carrier_row(q, n_mels) >= n_mels - 8);
            }
        }
    }

    /// Parity cues must stay faint: equal pulse duty per period, and both
    /// the audio-energy and image-mean shifts between a pair's two classes
    /// small next to the shifts between different pairs.
    #[test]
    fn parity_cues_are_faint() {
        for q in 0..4u8 {
            let p = quadrant_period(q);
            let even: usize = (0..p).filter(|&ph| pulse_on(0, ph, p)).count();
            let odd: usize = (0..p).filter(|&ph| pulse_on(1, ph, p)).count();
            assert_eq!(even, odd, "duty mismatch at period {p}");
        }
        let energy = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.data().len() as f64;
        for pair in 0..4 {
            let a0 = audio_motif(2 * pair, 0, 128, 32);
            let a1 = audio_motif(2 * pair + 1, 0, 128, 32);
            let rel = (energy(&a1) - energy(&a0)).abs() / energy(&a0);
            assert!(rel < 0.2, "audio parity cue too strong: {rel}");
            let v0 = visual_motif(2 * pair, 0, (0, 0), 32, 3);
            let v1 = visual_motif(2 * pair + 1, 0, (0, 0), 32, 3);
            assert!(
                (mean(&v1) - mean(&v0)).abs() < 0.05,
                "visual parity cue too strong for pair {pair}"
            );
            assert_ne!(v0, v1, "parities should still differ");
            if pair > 0 {
                let other = visual_motif(2 * (pair - 1), 0, (0, 0), 32, 3);
                let d = v0
                    .data()
                    .iter()
                    .zip(other.data())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>();
                assert!(d > 10.0, "pair cue unexpectedly weak");
            }
        }
    }

    /// Nearest-centroid (a linear classifier) on raw flattened spectrograms
    /// must beat chance: the separability precondition for every downstream
    /// probe comparison.
    #[test]
    fn raw_spectrogram_centroids_separate_classes() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let k = 4;
        let dim = 128 * 32;
        let mut centroids = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for r in &corpus.train {
            let c = r.label as usize;
            counts[c] += 1;
            for (acc, v) in centroids[c].iter_mut().zip(r.audio.data()) {
                *acc += v;
            }
        }
        for (c, count) in counts.iter().enumerate() {
            for v in &mut centroids[c] {
                *v /= *count as f64;
            }
        }
        let mut hits = 0;
        for r in &corpus.eval {
            let best = (0..k)
                .min_by(|&a, &b| {
                    let d = |c: usize| -> f64 {
                        centroids[c]
                            .iter()
                            .zip(r.audio.data())
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum()
                    };
                    d(a).partial_cmp(&d(b)).unwrap()
                })
                .unwrap();
            if best == r.label as usize {
                hits += 1;
            }
        }
        let acc = hits as f64 / corpus.eval.len() as f64;
        assert!(acc > 1.0 / k as f64 + 0.1, "accuracy {acc}");
    }

    #[test]
    fn shuffle_is_a_derangement_following_visual_labels() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let (shuffled, sigma) = shuffle_pairs(&corpus.train, 5).unwrap();
        assert_eq!(shuffled.len(), corpus.train.len());
        for (i, &s) in sigma.iter().enumerate() {
            assert_ne!(i, s, "sample {i} kept its own audio");
            assert_eq!(shuffled[i].audio, corpus.train[s].audio);
            assert_eq!(shuffled[i].label, corpus.train[i].label);
            assert_eq!(shuffled[i].frames, corpus.train[i].frames);
        }
        // Shuffling a shuffled set is still structurally valid (closure).
        let (twice, _) = shuffle_pairs(&shuffled, 6).unwrap();
        assert_eq!(twice.len(), shuffled.len());
    }

    #[test]
    fn shuffled_class_agreement_drops_to_chance() {
        let spec = CorpusSpec {
            n_classes: 8,
            samples_per_class: 32,
            n_frames: 1,
            seed: 4,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let (_, sigma) = shuffle_pairs(&corpus.train, 11).unwrap();
        let agree = sigma
            .iter()
            .enumerate()
            .filter(|&(i, &s)| corpus.train[i].label == corpus.train[s].label)
            .count() as f64
            / sigma.len() as f64;
        assert!((agree - 1.0 / 8.0).abs() < 0.08, "agreement {agree}");
    }

    #[test]
    fn spec_validation() {
        assert!(CorpusSpec::default().validate().is_ok());
        assert!(CorpusSpec {
            n_classes: 9,
            ..CorpusSpec::default()
        }
        .validate()
        .is_err());
        assert!(CorpusSpec {
            target_frames: 100,
            ..CorpusSpec::default()
        }
        .validate()
        .is_err());
        assert!(CorpusSpec {
            correspondence_prob: 1.5,
            ..CorpusSpec::default()
        }
        .validate()
        .is_err());
    }
}
