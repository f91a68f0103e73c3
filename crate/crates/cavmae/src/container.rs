//! Dataset container (`.cavd`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CAVD" | version u32 | record_count u32
//! dims block: target_frames u32 | n_mels u32 | image_size u32 | channels u32
//!           | n_frames u32 | n_classes u32 | patch_size u32 | train_count u32
//! then per record:
//!   sample_id u64 | label u32
//!   audio  f32 × (target_frames · n_mels)
//!   frames f32 × (image_size · image_size · channels), n_frames times
//!   quadrant u8 × n_frames
//! ```
//!
//! Tensors are stored as float32. Values are quantized to float32 at
//! generation time, so write → read → write is byte-identical and in-memory
//! data matches what any reader of the file sees.

use cavmae_core::synth::{Corpus, SampleRecord};
use cavmae_core::tensor::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"CAVD";
pub const VERSION: u32 = 1;

/// Fixed-size geometry header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetDims {
    pub target_frames: u32,
    pub n_mels: u32,
    pub image_size: u32,
    pub channels: u32,
    pub n_frames: u32,
    pub n_classes: u32,
    pub patch_size: u32,
    pub train_count: u32,
}

/// A loaded dataset: training records then held-out evaluation records.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dims: DatasetDims,
    pub train: Vec<SampleRecord>,
    pub eval: Vec<SampleRecord>,
}

/// Rounds every element through float32 so file storage is lossless.
pub fn quantize_tensor(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for v in out.data_mut() {
        *v = *v as f32 as f64;
    }
    out
}

pub fn quantize_record(rec: &SampleRecord) -> SampleRecord {
    SampleRecord {
        sample_id: rec.sample_id,
        label: rec.label,
        audio: quantize_tensor(&rec.audio),
        frames: rec.frames.iter().map(quantize_tensor).collect(),
        quadrants: rec.quadrants.clone(),
    }
}

impl Dataset {
    /// Converts a generated corpus, quantizing all tensors to float32
    /// precision.
    pub fn from_corpus(corpus: &Corpus) -> Dataset {
        let spec = &corpus.spec;
        Dataset {
            dims: DatasetDims {
                target_frames: spec.target_frames as u32,
                n_mels: spec.n_mels as u32,
                image_size: spec.image_size as u32,
                channels: spec.channels as u32,
                n_frames: spec.n_frames as u32,
                n_classes: spec.n_classes as u32,
                patch_size: spec.patch_size as u32,
                train_count: corpus.train.len() as u32,
            },
            train: corpus.train.iter().map(quantize_record).collect(),
            eval: corpus.eval.iter().map(quantize_record).collect(),
        }
    }

    pub fn record_count(&self) -> usize {
        self.train.len() + self.eval.len()
    }
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::runtime(format!("dataset container: {}", msg.into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

fn push_tensor_f32(out: &mut Vec<u8>, t: &Tensor, expect: usize, what: &str) -> Result<()> {
    if t.numel() != expect {
        return Err(corrupt(format!(
            "{what} has {} elements, dims block implies {expect}",
            t.numel()
        )));
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

/// Serializes a dataset to container bytes.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let d = &ds.dims;
    if ds.train.len() as u64 != d.train_count as u64 {
        return Err(corrupt(format!(
            "train_count {} does not match {} training records",
            d.train_count,
            ds.train.len()
        )));
    }
    let audio_len = (d.target_frames * d.n_mels) as usize;
    let frame_len = (d.image_size * d.image_size * d.channels) as usize;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.record_count() as u32).to_le_bytes());
    for v in [
        d.target_frames,
        d.n_mels,
        d.image_size,
        d.channels,
        d.n_frames,
        d.n_classes,
        d.patch_size,
        d.train_count,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for rec in ds.train.iter().chain(ds.eval.iter()) {
        out.extend_from_slice(&rec.sample_id.to_le_bytes());
        out.extend_from_slice(&rec.label.to_le_bytes());
        push_tensor_f32(&mut out, &rec.audio, audio_len, "audio tensor")?;
        if rec.frames.len() != d.n_frames as usize {
            return Err(corrupt(format!(
                "record {} has {} frames, dims block says {}",
                rec.sample_id,
                rec.frames.len(),
                d.n_frames
            )));
        }
        for f in &rec.frames {
            push_tensor_f32(&mut out, f, frame_len, "image tensor")?;
        }
        if rec.quadrants.len() != d.n_frames as usize {
            return Err(corrupt(format!(
                "record {} has {} quadrants, dims block says {}",
                rec.sample_id,
                rec.quadrants.len(),
                d.n_frames
            )));
        }
        out.extend_from_slice(&rec.quadrants);
    }
    Ok(out)
}

/// Parses container bytes; rejects bad magic, unknown versions, truncation,
/// and trailing garbage.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(corrupt(format!("bad magic {magic:02x?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let record_count = r.u32()? as usize;
    let dims = DatasetDims {
        target_frames: r.u32()?,
        n_mels: r.u32()?,
        image_size: r.u32()?,
        channels: r.u32()?,
        n_frames: r.u32()?,
        n_classes: r.u32()?,
        patch_size: r.u32()?,
        train_count: r.u32()?,
    };
    if dims.train_count as usize > record_count {
        return Err(corrupt(format!(
            "train_count {} exceeds record count {record_count}",
            dims.train_count
        )));
    }
    let audio_len = (dims.target_frames * dims.n_mels) as usize;
    let frame_len = (dims.image_size * dims.image_size * dims.channels) as usize;
    let mut records = Vec::with_capacity(record_count);
    for _ in 0..record_count {
        let sample_id = r.u64()?;
        let label = r.u32()?;
        let audio = Tensor::new(
            vec![dims.target_frames as usize, dims.n_mels as usize],
            r.f32_vec(audio_len)?,
        )
        .map_err(|e| corrupt(e.to_string()))?;
        let mut frames = Vec::with_capacity(dims.n_frames as usize);
        for _ in 0..dims.n_frames {
            frames.push(
                Tensor::new(
                    vec![
                        dims.image_size as usize,
                        dims.image_size as usize,
                        dims.channels as usize,
                    ],
                    r.f32_vec(frame_len)?,
                )
                .map_err(|e| corrupt(e.to_string()))?,
            );
        }
        let mut quadrants = Vec::with_capacity(dims.n_frames as usize);
        for _ in 0..dims.n_frames {
            quadrants.push(r.u8()?);
        }
        records.push(SampleRecord {
            sample_id,
            label,
            audio,
            frames,
            quadrants,
        });
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    let eval = records.split_off(dims.train_count as usize);
    Ok(Dataset {
        dims,
        train: records,
        eval,
    })
}

pub fn write_dataset(path: &std::path::Path, ds: &Dataset) -> Result<()> {
    crate::run::atomic_write(path, &encode_dataset(ds)?)
}

pub fn read_dataset(path: &std::path::Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::runtime(format!("cannot read dataset '{}': {e}", path.display())))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cavmae_core::synth::{generate_corpus, CorpusSpec};

    fn tiny_corpus() -> Corpus {
        let spec = CorpusSpec {
            n_classes: 2,
            samples_per_class: 3,
            target_frames: 32,
            n_mels: 24,
            image_size: 16,
            channels: 1,
            n_frames: 2,
            patch_size: 8,
            noise_std: 0.3,
            correspondence_prob: 1.0,
            seed: 11,
        };
        generate_corpus(&spec).unwrap()
    }

    #[test]
    fn round_trip_bytes_identical() {
        let ds = Dataset::from_corpus(&tiny_corpus());
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        let again = encode_dataset(&back).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn round_trip_preserves_quantized_values_exactly() {
        let ds = Dataset::from_corpus(&tiny_corpus());
        let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
        assert_eq!(back.train.len(), ds.train.len());
        assert_eq!(back.eval.len(), ds.eval.len());
        for (a, b) in ds.train.iter().zip(back.train.iter()) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.audio.data(), b.audio.data());
            assert_eq!(a.quadrants, b.quadrants);
            for (fa, fb) in a.frames.iter().zip(b.frames.iter()) {
                assert_eq!(fa.shape(), fb.shape());
                assert_eq!(fa.data(), fb.data());
            }
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let ds = Dataset::from_corpus(&tiny_corpus());
        let bytes = encode_dataset(&ds).unwrap();
        // bad magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_dataset(&bad).is_err());
        // truncation
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
        // trailing garbage
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_dataset(&long).is_err());
        // bad version
        let mut bad_ver = bytes.clone();
        bad_ver[4] = 9;
        assert!(decode_dataset(&bad_ver).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.cavd");
        let ds = Dataset::from_corpus(&tiny_corpus());
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(encode_dataset(&ds).unwrap(), encode_dataset(&back).unwrap());
    }

    #[test]
    fn split_counts_follow_dims_block() {
        let corpus = tiny_corpus();
        let ds = Dataset::from_corpus(&corpus);
        assert_eq!(ds.train.len(), corpus.train.len());
        assert_eq!(ds.eval.len(), corpus.eval.len());
        let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
        assert_eq!(back.dims, ds.dims);
    }
}
