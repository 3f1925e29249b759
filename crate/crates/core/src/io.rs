//! WAV reading and writing, the prior-spectra file format and the JSON
//! diagnostics report.
//!
//! Prior files are little-endian: the magic `CBFP`, then `version`, `F`,
//! `T`, `J` as `u32`, then `F * T * J` `f32` values ordered source-major,
//! then frame, then bin (index `(j * T + t) * F + f`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PipelineConfig, PriorSpectra};
use crate::optimizer::{Diagnostics, RunOutput};
use crate::stft::TimeSignal;

pub const PRIOR_MAGIC: [u8; 4] = *b"CBFP";
pub const PRIOR_VERSION: u32 = 1;
const PRIOR_HEADER_LEN: usize = 20;

/// Reads PCM 16/24-bit or IEEE float32 WAV into samples in `[-1, 1]`.
/// Integer samples are divided by `2^(bits - 1)`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<TimeSignal> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()?
        }
        (hound::SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = (1u32 << (bits - 1)) as f64;
            reader.into_samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<std::result::Result<_, _>>()?
        }
        (format, bits) => return Err(Error::UnsupportedWav(format!("{format:?} with {bits} bits"))),
    };
    if channels == 0 || interleaved.len() % channels != 0 {
        return Err(Error::UnsupportedWav("truncated sample frames".into()));
    }
    let frames = interleaved.len() / channels;
    let samples = Array2::from_shape_fn((channels, frames), |(c, n)| interleaved[n * channels + c]);
    TimeSignal::new(samples, spec.sample_rate)
}

/// Writes IEEE float32 WAV.
pub fn write_wav(path: impl AsRef<Path>, signal: &TimeSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: u16::try_from(signal.channels()).map_err(|_| Error::UnsupportedWav("too many channels".into()))?,
        sample_rate: signal.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    let samples = signal.samples();
    for n in 0..signal.len() {
        for c in 0..signal.channels() {
            writer.write_sample(samples[[c, n]] as f32)?;
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Serializes `prior` in the prior-file format.
pub fn encode_prior(prior: &PriorSpectra) -> Vec<u8> {
    let (bins, frames, sources) = prior.dim();
    let mut out = Vec::with_capacity(PRIOR_HEADER_LEN + 4 * bins * frames * sources);
    out.extend_from_slice(&PRIOR_MAGIC);
    for v in [PRIOR_VERSION, bins as u32, frames as u32, sources as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let gamma = prior.gamma();
    for j in 0..sources {
        for t in 0..frames {
            for f in 0..bins {
                out.extend_from_slice(&(gamma[[f, t, j]] as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Parses a prior file and checks its dimensions against `expected` `(F, T, J)`.
pub fn decode_prior(bytes: &[u8], expected: (usize, usize, usize)) -> Result<PriorSpectra> {
    if bytes.len() < PRIOR_HEADER_LEN || bytes[..4] != PRIOR_MAGIC {
        return Err(Error::PriorFormat("missing CBFP magic".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let version = word(0) as u32;
    if version != PRIOR_VERSION {
        return Err(Error::PriorFormat(format!("unsupported version {version}")));
    }
    let dims = (word(1), word(2), word(3));
    if dims != expected {
        return Err(Error::Shape(format!("prior dimensions {dims:?}, expected {expected:?}")));
    }
    let (bins, frames, sources) = dims;
    let count = bins * frames * sources;
    let payload = &bytes[PRIOR_HEADER_LEN..];
    if payload.len() != 4 * count {
        return Err(Error::PriorFormat(format!("payload of {} bytes, expected {}", payload.len(), 4 * count)));
    }
    let value = |f: usize, t: usize, j: usize| {
        let k = 4 * ((j * frames + t) * bins + f);
        f32::from_le_bytes(payload[k..k + 4].try_into().unwrap()) as f64
    };
    PriorSpectra::new(Array3::from_shape_fn(dims, |(f, t, j)| value(f, t, j)))
}

pub fn write_prior(path: impl AsRef<Path>, prior: &PriorSpectra) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_prior(prior))?;
    w.flush()?;
    Ok(())
}

pub fn read_prior(path: impl AsRef<Path>, expected: (usize, usize, usize)) -> Result<PriorSpectra> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_prior(&bytes, expected)
}

/// The JSON diagnostics report written by the command-line tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub likelihood: Vec<f64>,
    pub passes: usize,
    pub wall_ms: u64,
    pub config: PipelineConfig,
    pub wpe_passes: usize,
    pub worst_ascent_step: f64,
    pub counts: crate::model::OpCounts,
}

impl Report {
    pub fn new(output: &RunOutput, cfg: &PipelineConfig) -> Self {
        let d: &Diagnostics = &output.diagnostics;
        Self {
            likelihood: d.likelihood.clone(),
            passes: d.ive_passes,
            wall_ms: output.wall_ms as u64,
            config: cfg.clone(),
            wpe_passes: d.wpe_passes,
            worst_ascent_step: d.worst_ascent_step(),
            counts: d.counts,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_prior() -> PriorSpectra {
        PriorSpectra::new(Array3::from_shape_fn((3, 4, 2), |(f, t, j)| (f + 10 * t + 100 * j) as f64 * 0.5)).unwrap()
    }

    #[test]
    fn prior_layout_is_source_then_frame_then_bin() {
        let bytes = encode_prior(&sample_prior());
        assert_eq!(&bytes[..4], b"CBFP");
        assert_eq!(bytes.len(), 20 + 4 * 24);
        let at = |k: usize| f32::from_le_bytes(bytes[20 + 4 * k..24 + 4 * k].try_into().unwrap());
        // (j, t, f) = (1, 2, 1) -> index (1 * 4 + 2) * 3 + 1 = 19.
        assert_eq!(at(19), (1 + 20 + 100) as f32 * 0.5);
        assert_eq!(at(1), 0.5);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    }

    #[test]
    fn prior_round_trip_is_bit_identical() {
        let bytes = encode_prior(&sample_prior());
        let back = decode_prior(&bytes, (3, 4, 2)).unwrap();
        assert_eq!(encode_prior(&back), bytes);
        assert_eq!(back, sample_prior());
    }

    #[test]
    fn zero_prior_is_valid() {
        let zeros = PriorSpectra::new(Array3::zeros((2, 2, 1))).unwrap();
        let back = decode_prior(&encode_prior(&zeros), (2, 2, 1)).unwrap();
        assert!(back.gamma().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prior_errors() {
        let bytes = encode_prior(&sample_prior());
        assert!(matches!(decode_prior(&bytes, (3, 5, 2)), Err(Error::Shape(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_prior(&bad, (3, 4, 2)), Err(Error::PriorFormat(_))));
        let mut neg = bytes.clone();
        neg[20..24].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert!(matches!(decode_prior(&neg, (3, 4, 2)), Err(Error::NegativePrior(_))));
        assert!(matches!(decode_prior(&bytes[..bytes.len() - 1], (3, 4, 2)), Err(Error::PriorFormat(_))));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(decode_prior(&version, (3, 4, 2)), Err(Error::PriorFormat(_))));
    }

    #[test]
    fn float_wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples = Array2::from_shape_fn((8, 50), |(c, n)| ((c * 50 + n) as f32 / 400.0 - 0.5) as f64);
        let sig = TimeSignal::new(samples, 16000).unwrap();
        write_wav(&path, &sig).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back, sig);
        assert_eq!(back.channels(), 8);
        let again = dir.path().join("b.wav");
        write_wav(&again, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn pcm16_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for v in [32767i16, -32768, 0, 16384] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let sig = read_wav(&path).unwrap();
        assert_eq!(sig.samples()[[0, 0]], 32767.0 / 32768.0);
        assert_eq!(sig.samples()[[1, 0]], -1.0);
        assert_eq!(sig.samples()[[1, 1]], 0.5);
        assert_eq!(sig.sample_rate(), 8000);
    }

    #[test]
    fn pcm24_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p24.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 24, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(1 << 22).unwrap();
        w.finalize().unwrap();
        assert_eq!(read_wav(&path).unwrap().samples()[[0, 0]], 0.5);
    }

    #[test]
    fn unsupported_format_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p8.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 8, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(Error::UnsupportedWav(_))));
    }
}
