//! Differentiable log-mel spectrogram frontend. Gradients flow from mel
//! frames all the way back to individual audio samples, which is what makes
//! sample-domain perturbation attacks possible.

use thiserror::Error;

use crate::diffgraph::{GraphError, NodeId, StftSpec, Tape, Tensor};
use crate::signal::Waveform;

/// Energy floor applied before the log; prevents unbounded gradients on
/// silence.
pub const FLOOR_ENERGY: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("hop {hop} must divide window length {window_len}")]
    HopMismatch { hop: usize, window_len: usize },
    #[error("n_mels {n_mels} must be below window_len/2 + 1 = {bins}")]
    TooManyMels { n_mels: usize, bins: usize },
    #[error("waveform sample rate {got} Hz does not match frontend config {expected} Hz")]
    RateMismatch { got: u32, expected: u32 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Fixed frontend parameters; the defaults are the convention used by every
/// experiment in this crate.
#[derive(Debug, Clone)]
pub struct MelFrontendConfig {
    pub window_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
}

impl Default for MelFrontendConfig {
    fn default() -> Self {
        Self {
            window_len: 512,
            hop: 256,
            n_mels: 40,
            fmin: 0.0,
            fmax: 4000.0,
            sample_rate: 8000,
        }
    }
}

impl MelFrontendConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.hop == 0 || self.window_len % self.hop != 0 {
            return Err(FeatureError::HopMismatch {
                hop: self.hop,
                window_len: self.window_len,
            });
        }
        let bins = self.window_len / 2 + 1;
        if self.n_mels >= bins {
            return Err(FeatureError::TooManyMels {
                n_mels: self.n_mels,
                bins,
            });
        }
        Ok(())
    }

    /// Frames per second of the output grid.
    pub fn fps(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// T = ceil(n_samples / hop).
    pub fn frame_count(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.hop)
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn stft_spec(&self, n_samples: usize) -> StftSpec {
        StftSpec::new(self.window_len, self.hop, n_samples)
    }
}

/// m = 2595·log10(1 + f/700).
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `n_mels` triangular filters, equally
/// spaced on the mel scale between fmin and fmax.
pub fn mel_centers(cfg: &MelFrontendConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    (1..=cfg.n_mels)
        .map(|m| mel_to_hz(lo + (hi - lo) * m as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular filterbank as a (bins × n_mels) matrix so that
/// `power (T×bins) · filterbank` yields mel energies.
pub fn mel_filterbank(cfg: &MelFrontendConfig) -> Vec<f64> {
    let bins = cfg.bins();
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|m| mel_to_hz(lo + (hi - lo) * m as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; bins * cfg.n_mels];
    for k in 0..bins {
        let freq = k as f64 * cfg.sample_rate as f64 / cfg.window_len as f64;
        for m in 0..cfg.n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let rising = (freq - left) / (center - left);
            let falling = (right - freq) / (right - center);
            let w = rising.min(falling).max(0.0);
            fb[k * cfg.n_mels + m] = w;
        }
    }
    fb
}

/// Log-mel features of one clip: a T×F row-major matrix.
#[derive(Debug, Clone)]
pub struct LogMelSpectrogram {
    frames: Vec<f64>,
    t: usize,
    f: usize,
}

impl LogMelSpectrogram {
    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.t
    }

    pub fn num_mels(&self) -> usize {
        self.f
    }

    pub fn at(&self, t: usize, f: usize) -> f64 {
        self.frames[t * self.f + f]
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor::new(vec![self.t, self.f], self.frames).expect("consistent dims")
    }
}

/// Records the Hann/reflect-padded power spectrogram on the tape.
pub fn stft_power(
    tape: &mut Tape,
    samples: NodeId,
    cfg: &MelFrontendConfig,
) -> Result<NodeId, FeatureError> {
    cfg.validate()?;
    let n = tape.value(samples).len();
    Ok(tape.stft_power(samples, &cfg.stft_spec(n))?)
}

/// Mel projection and log with [`FLOOR_ENERGY`]; differentiable.
pub fn mel_project(
    tape: &mut Tape,
    power: NodeId,
    cfg: &MelFrontendConfig,
) -> Result<NodeId, FeatureError> {
    cfg.validate()?;
    let fb =
        Tensor::matrix(cfg.bins(), cfg.n_mels, mel_filterbank(cfg)).map_err(FeatureError::from)?;
    let fb_id = tape.leaf(&fb, false);
    let mel = tape.matmul(power, fb_id)?;
    Ok(tape.log_floor(mel, FLOOR_ENERGY))
}

/// Full frontend on the tape: samples node → (T × n_mels) log-mel node.
pub fn frontend(
    tape: &mut Tape,
    samples: NodeId,
    cfg: &MelFrontendConfig,
) -> Result<NodeId, FeatureError> {
    let power = stft_power(tape, samples, cfg)?;
    mel_project(tape, power, cfg)
}

/// Convenience evaluation without gradients.
pub fn frontend_eval(
    w: &Waveform,
    cfg: &MelFrontendConfig,
) -> Result<LogMelSpectrogram, FeatureError> {
    if w.sample_rate() != cfg.sample_rate {
        return Err(FeatureError::RateMismatch {
            got: w.sample_rate(),
            expected: cfg.sample_rate,
        });
    }
    let mut tape = Tape::new();
    let x = tape
        .leaf_from(vec![w.len()], w.samples().to_vec(), false)
        .map_err(FeatureError::from)?;
    let out = frontend(&mut tape, x, cfg)?;
    Ok(LogMelSpectrogram {
        frames: tape.value(out).to_vec(),
        t: cfg.frame_count(w.len()),
        f: cfg.n_mels,
    })
}

/// Direct-DFT power spectrogram, the definitional reference for the FFT
/// path. Used by tests; production code goes through [`stft_power`].
pub fn stft_power_direct(w: &Waveform, cfg: &MelFrontendConfig) -> Vec<f64> {
    crate::diffgraph::stft_power_direct(w.samples(), &cfg.stft_spec(w.len()))
}
