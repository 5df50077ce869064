//! Waveform representation, 16-bit mono PCM WAV I/O, and basic amplitude
//! utilities (clamp, mix, signal-to-noise ratio) shared by every other module.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Mono audio signal: dimensionless amplitudes, nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("waveform must contain at least one sample")]
    Empty,
    #[error("sample rate must be positive")]
    ZeroRate,
    #[error("length mismatch: {a} vs {b} samples")]
    LengthMismatch { a: usize, b: usize },
    #[error("sample rate mismatch: {a} Hz vs {b} Hz")]
    RateMismatch { a: u32, b: u32 },
    #[error("snr is undefined for an all-zero clean signal")]
    ZeroCleanSignal,
    #[error("mix source is longer than the destination ({b} > {a} samples)")]
    SourceTooLong { a: usize, b: usize },
    #[error("clamp bounds must satisfy lo < hi (got {lo} >= {hi})")]
    BadClampBounds { lo: f64, hi: f64 },
}

/// Errors from WAV file parsing and writing, each failure mode distinct.
#[derive(Debug, Error)]
pub enum WavError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed WAV: {reason}")]
    Malformed { path: String, reason: String },
    #[error("{path}: unsupported format code {code} (only PCM is supported)")]
    NotPcm { path: String, code: u16 },
    #[error("{path}: expected mono audio, found {channels} channels")]
    NotMono { path: String, channels: u16 },
    #[error("{path}: expected 16-bit samples, found {bits}-bit")]
    NotSixteenBit { path: String, bits: u16 },
    #[error("sample {index} is out of range: {value} (missing clamp upstream?)")]
    SampleOutOfRange { index: usize, value: f64 },
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SignalError> {
        if samples.is_empty() {
            return Err(SignalError::Empty);
        }
        if sample_rate == 0 {
            return Err(SignalError::ZeroRate);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Signal-to-noise ratio in decibels, with a distinguished value for a
/// perturbation of exactly zero energy so reports never contain fabricated
/// large numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrDb {
    Finite(f64),
    Infinite,
}

impl SnrDb {
    pub fn finite(self) -> Option<f64> {
        match self {
            SnrDb::Finite(v) => Some(v),
            SnrDb::Infinite => None,
        }
    }
}

impl fmt::Display for SnrDb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnrDb::Finite(v) => write!(f, "{v}"),
            SnrDb::Infinite => write!(f, "inf"),
        }
    }
}

/// 10·log10(Σx² / Σ(x−x')²). Returns [`SnrDb::Infinite`] when the difference
/// energy is exactly zero.
pub fn snr_db(clean: &Waveform, perturbed: &Waveform) -> Result<SnrDb, SignalError> {
    if clean.len() != perturbed.len() {
        return Err(SignalError::LengthMismatch {
            a: clean.len(),
            b: perturbed.len(),
        });
    }
    if clean.sample_rate != perturbed.sample_rate {
        return Err(SignalError::RateMismatch {
            a: clean.sample_rate,
            b: perturbed.sample_rate,
        });
    }
    let signal: f64 = clean.samples.iter().map(|x| x * x).sum();
    if signal == 0.0 {
        return Err(SignalError::ZeroCleanSignal);
    }
    let noise: f64 = clean
        .samples
        .iter()
        .zip(&perturbed.samples)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    if noise == 0.0 {
        return Ok(SnrDb::Infinite);
    }
    Ok(SnrDb::Finite(10.0 * (signal / noise).log10()))
}

/// Limits every sample to [lo, hi]; length and rate unchanged.
pub fn clamp(w: &Waveform, lo: f64, hi: f64) -> Result<Waveform, SignalError> {
    if !(lo < hi) {
        return Err(SignalError::BadClampBounds { lo, hi });
    }
    let samples = w.samples.iter().map(|s| s.clamp(lo, hi)).collect();
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// Sample-wise `a + gain_b · b`, with `b` zero-padded to `a`'s length.
pub fn mix(a: &Waveform, b: &Waveform, gain_b: f64) -> Result<Waveform, SignalError> {
    if a.sample_rate != b.sample_rate {
        return Err(SignalError::RateMismatch {
            a: a.sample_rate,
            b: b.sample_rate,
        });
    }
    if b.len() > a.len() {
        return Err(SignalError::SourceTooLong {
            a: a.len(),
            b: b.len(),
        });
    }
    let mut samples = a.samples.clone();
    for (dst, src) in samples.iter_mut().zip(&b.samples) {
        *dst += gain_b * src;
    }
    Ok(Waveform {
        samples,
        sample_rate: a.sample_rate,
    })
}

/// Offset mix: adds `gain_b · b` starting at sample `offset` of `a`.
/// The portion of `b` that would extend past the end of `a` is dropped.
pub fn mix_at(a: &Waveform, b: &Waveform, gain_b: f64, offset: usize) -> Result<Waveform, SignalError> {
    if a.sample_rate != b.sample_rate {
        return Err(SignalError::RateMismatch {
            a: a.sample_rate,
            b: b.sample_rate,
        });
    }
    let mut samples = a.samples.clone();
    for (i, src) in b.samples.iter().enumerate() {
        if let Some(dst) = samples.get_mut(offset + i) {
            *dst += gain_b * src;
        }
    }
    Ok(Waveform {
        samples,
        sample_rate: a.sample_rate,
    })
}

const RIFF: &[u8; 4] = b"RIFF";
const WAVE: &[u8; 4] = b"WAVE";
const FMT: &[u8; 4] = b"fmt ";
const DATA: &[u8; 4] = b"data";

/// Reads a 16-bit mono PCM WAV file; samples are scaled to [-1, 1] by
/// dividing by 32768.
pub fn load_wav<P: AsRef<Path>>(path: P) -> Result<Waveform, WavError> {
    let path_str = path.as_ref().display().to_string();
    let io_err = |source| WavError::Io {
        path: path_str.clone(),
        source,
    };
    let malformed = |reason: &str| WavError::Malformed {
        path: path_str.clone(),
        reason: reason.to_string(),
    };

    let mut bytes = Vec::new();
    fs::File::open(&path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(|e| WavError::Io {
            path: path_str.clone(),
            source: e,
        })?;

    if bytes.len() < 12 || &bytes[0..4] != RIFF || &bytes[8..12] != WAVE {
        return Err(malformed("missing RIFF/WAVE header"));
    }

    // Walk the chunk list; unknown chunks are skipped.
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id: [u8; 4] = bytes[pos..pos + 4].try_into().unwrap();
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(malformed("chunk extends past end of file"));
        }
        let body = &bytes[body_start..body_start + size];
        match &id {
            id if id == FMT => {
                if size < 16 {
                    return Err(malformed("fmt chunk shorter than 16 bytes"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            id if id == DATA => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| malformed("missing fmt chunk"))?;
    if format != 1 {
        return Err(WavError::NotPcm {
            path: path_str,
            code: format,
        });
    }
    if channels != 1 {
        return Err(WavError::NotMono {
            path: path_str,
            channels,
        });
    }
    if bits != 16 {
        return Err(WavError::NotSixteenBit {
            path: path_str,
            bits,
        });
    }
    let data = data.ok_or_else(|| malformed("missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(malformed("data chunk has odd byte length"));
    }
    if data.is_empty() {
        return Err(malformed("data chunk holds no samples"));
    }

    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: rate,
    })
}

/// Writes a 16-bit mono PCM WAV file (little-endian). Samples must already
/// be in [-1, 1]; quantization is round(sample × 32768) clamped to the i16
/// range, which keeps the save/load round trip within one quantization step.
pub fn save_wav<P: AsRef<Path>>(w: &Waveform, path: P) -> Result<(), WavError> {
    for (index, &value) in w.samples.iter().enumerate() {
        if !(-1.0..=1.0).contains(&value) {
            return Err(WavError::SampleOutOfRange { index, value });
        }
    }
    let path_str = path.as_ref().display().to_string();

    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(RIFF);
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(WAVE);
    out.extend_from_slice(FMT);
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(DATA);
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }

    let mut file = fs::File::create(&path).map_err(|e| WavError::Io {
        path: path_str.clone(),
        source: e,
    })?;
    file.write_all(&out).map_err(|e| WavError::Io {
        path: path_str,
        source: e,
    })
}
