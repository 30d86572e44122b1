use std::io::{Read, Seek};
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::Unsupported => Error::UnsupportedFormat("WAV encoding not supported".into()),
        hound::Error::IoError(io) => Error::Parse(format!("truncated or unreadable WAV data: {io}")),
        other => Error::Parse(other.to_string()),
    }
}

/// Reads 16-bit signed little-endian mono PCM; samples are scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let file = std::fs::File::open(path)?;
    read_wav(std::io::BufReader::new(file))
}

pub fn read_wav<R: Read>(reader: R) -> Result<Waveform> {
    let reader = hound::WavReader::new(reader).map_err(map_hound)?;
    read_pcm16(reader)
}

fn read_pcm16<R: Read>(mut reader: hound::WavReader<R>) -> Result<Waveform> {
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "expected 16-bit PCM, got {:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "expected mono audio, got {} channels",
            spec.channels
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(map_hound)?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit mono PCM, clipping to the representable range.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let file = std::fs::File::create(path)?;
    encode_wav(std::io::BufWriter::new(file), w)
}

/// Encodes `w` as a 16-bit mono PCM WAV stream.
pub fn encode_wav<W: std::io::Write + Seek>(out: W, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::new(out, spec).map_err(map_hound)?;
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)
}
