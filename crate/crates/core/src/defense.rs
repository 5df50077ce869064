//! Input-transformation defenses applied to audio before inference:
//! downsample/upsample, additive Gaussian noise, and mean/median smoothing,
//! plus the defended re-evaluation of stored attack results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::attack::ScenarioRecord;
use crate::features::{self, FeatureError, MelFrontendConfig};
use crate::metrics::{self, AggregateReport, MetricsError, MetricsReport};
use crate::model::{self, ModelError, ModelParams};
use crate::signal::{self, SignalError, Waveform};

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("down_rate {down} Hz must divide the sample rate {sr} Hz")]
    NonDivisibleRate { sr: u32, down: u32 },
    #[error("down_rate {down} Hz must be below the sample rate {sr} Hz")]
    RateTooHigh { sr: u32, down: u32 },
    #[error("smoothing window must be odd and >= 3, got {0}")]
    BadWindow(usize),
    #[error("noise sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenseKind {
    None,
    Downsample,
    Gaussian,
    MeanSmooth,
    MedianSmooth,
}

impl DefenseKind {
    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Downsample => "downsample",
            DefenseKind::Gaussian => "gaussian",
            DefenseKind::MeanSmooth => "mean",
            DefenseKind::MedianSmooth => "median",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "none" => Some(DefenseKind::None),
            "downsample" => Some(DefenseKind::Downsample),
            "gaussian" => Some(DefenseKind::Gaussian),
            "mean" => Some(DefenseKind::MeanSmooth),
            "median" => Some(DefenseKind::MedianSmooth),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub down_rate: u32,
    pub sigma: f64,
    pub window: usize,
    /// Optional low-pass before decimation; off by default to match the
    /// plain decimate-and-interpolate scheme.
    pub anti_alias: bool,
}

impl DefenseConfig {
    pub fn of_kind(kind: DefenseKind) -> Self {
        Self {
            kind,
            down_rate: 4000,
            sigma: 0.01,
            window: 3,
            anti_alias: false,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<(), DefenseError> {
        match self.kind {
            DefenseKind::Downsample => {
                if self.down_rate >= sample_rate {
                    return Err(DefenseError::RateTooHigh {
                        sr: sample_rate,
                        down: self.down_rate,
                    });
                }
                if sample_rate % self.down_rate != 0 {
                    return Err(DefenseError::NonDivisibleRate {
                        sr: sample_rate,
                        down: self.down_rate,
                    });
                }
            }
            DefenseKind::Gaussian => {
                if !(self.sigma > 0.0) {
                    return Err(DefenseError::BadSigma(self.sigma));
                }
            }
            DefenseKind::MeanSmooth | DefenseKind::MedianSmooth => {
                if self.window < 3 || self.window % 2 == 0 {
                    return Err(DefenseError::BadWindow(self.window));
                }
            }
            DefenseKind::None => {}
        }
        Ok(())
    }
}

/// Decimates to `down_rate`, then linearly interpolates back to the original
/// length and rate.
pub fn downsample_defense(w: &Waveform, cfg: &DefenseConfig) -> Result<Waveform, DefenseError> {
    cfg.validate(w.sample_rate())?;
    let factor = (w.sample_rate() / cfg.down_rate) as usize;
    let source = if cfg.anti_alias {
        lowpass(w.samples(), cfg.down_rate as f64 / 2.0, w.sample_rate() as f64)
    } else {
        w.samples().to_vec()
    };
    let decimated: Vec<f64> = source.iter().step_by(factor).copied().collect();
    let mut out = Vec::with_capacity(w.len());
    for j in 0..w.len() {
        let pos = j / factor;
        let frac = (j % factor) as f64 / factor as f64;
        let a = decimated[pos.min(decimated.len() - 1)];
        let b = decimated[(pos + 1).min(decimated.len() - 1)];
        out.push(a + (b - a) * frac);
    }
    Ok(Waveform::new(out, w.sample_rate())?)
}

/// Second-order low-pass biquad (audio EQ cookbook), used by the optional
/// anti-alias path.
fn lowpass(x: &[f64], cutoff: f64, sr: f64) -> Vec<f64> {
    let w0 = std::f64::consts::TAU * cutoff / sr;
    let q = std::f64::consts::FRAC_1_SQRT_2;
    let alpha = w0.sin() / (2.0 * q);
    let cosw = w0.cos();
    let b0 = (1.0 - cosw) / 2.0;
    let b1 = 1.0 - cosw;
    let b2 = (1.0 - cosw) / 2.0;
    let (a0, a1, a2) = (1.0 + alpha, -2.0 * cosw, 1.0 - alpha);
    let mut y = vec![0.0; x.len()];
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for (i, &xi) in x.iter().enumerate() {
        let yi = (b0 * xi + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2) / a0;
        y[i] = yi;
        x2 = x1;
        x1 = xi;
        y2 = y1;
        y1 = yi;
    }
    y
}

/// Adds zero-mean Gaussian noise with the configured sigma; deterministic
/// per seed; clamped to [-1, 1].
pub fn gaussian_defense(
    w: &Waveform,
    cfg: &DefenseConfig,
    seed: u64,
) -> Result<Waveform, DefenseError> {
    cfg.validate(w.sample_rate())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.sigma).map_err(|_| DefenseError::BadSigma(cfg.sigma))?;
    let samples = w
        .samples()
        .iter()
        .map(|&s| (s + normal.sample(&mut rng)).clamp(-1.0, 1.0))
        .collect();
    Ok(Waveform::new(samples, w.sample_rate())?)
}

/// Centered sliding window with edge replication; mean or median per kind.
pub fn smooth_defense(w: &Waveform, cfg: &DefenseConfig) -> Result<Waveform, DefenseError> {
    cfg.validate(w.sample_rate())?;
    let half = cfg.window / 2;
    let n = w.len();
    let x = w.samples();
    let mut out = Vec::with_capacity(n);
    let mut window = Vec::with_capacity(cfg.window);
    for i in 0..n {
        window.clear();
        for k in 0..cfg.window {
            let idx = (i + k).saturating_sub(half).min(n - 1);
            window.push(x[idx]);
        }
        let v = match cfg.kind {
            DefenseKind::MeanSmooth => window.iter().sum::<f64>() / window.len() as f64,
            DefenseKind::MedianSmooth => {
                window.sort_by(|a, b| a.total_cmp(b));
                window[half]
            }
            _ => unreachable!("smooth_defense called with non-smoothing kind"),
        };
        out.push(v);
    }
    Ok(Waveform::new(out, w.sample_rate())?)
}

/// Applies the configured defense; `seed` only matters for Gaussian noise.
pub fn apply(w: &Waveform, cfg: &DefenseConfig, seed: u64) -> Result<Waveform, DefenseError> {
    match cfg.kind {
        DefenseKind::None => Ok(w.clone()),
        DefenseKind::Downsample => downsample_defense(w, cfg),
        DefenseKind::Gaussian => gaussian_defense(w, cfg, seed),
        DefenseKind::MeanSmooth | DefenseKind::MedianSmooth => smooth_defense(w, cfg),
    }
}

/// The stored projection of an attack result that defended evaluation
/// needs: the waveform pair and the original target specification.
#[derive(Debug, Clone)]
pub struct DefenseCase {
    pub clean: Waveform,
    pub adversarial: Waveform,
    pub region: crate::attack::TargetRegion,
    pub labels: crate::attack::TargetLabels,
}

impl From<&ScenarioRecord> for DefenseCase {
    fn from(record: &ScenarioRecord) -> Self {
        Self {
            clean: record.result.clean.clone(),
            adversarial: record.result.adversarial.clone(),
            region: record.result.region.clone(),
            labels: record.result.labels.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DefendedEvaluation {
    pub per_run: Vec<MetricsReport>,
    pub aggregate: AggregateReport,
}

fn role_seed(seed: u64, run_index: usize, role: u64) -> u64 {
    seed ^ (run_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (role << 56)
}

/// Re-evaluates stored attack results with the defense applied to both the
/// clean and the adversarial audio. The clean side is recomputed so the
/// "unchanged" reference reflects the defense-adjusted baseline; metrics are
/// counted against the original target region and labels. Gaussian noise
/// draws independent realizations for the two roles, as a deployed defense
/// would. Reported SNR compares the original clean audio with the defended
/// adversarial audio (what actually reaches the model).
pub fn evaluate_under_defense(
    params: &ModelParams,
    cases: &[DefenseCase],
    cfg: &DefenseConfig,
    fcfg: &MelFrontendConfig,
    seed: u64,
) -> Result<DefendedEvaluation, DefenseError> {
    let per_run: Vec<MetricsReport> = cases
        .par_iter()
        .enumerate()
        .map(|(run_index, case)| -> Result<MetricsReport, DefenseError> {
            let defended_clean = apply(&case.clean, cfg, role_seed(seed, run_index, 0))?;
            let defended_adv = apply(&case.adversarial, cfg, role_seed(seed, run_index, 1))?;

            let clean_posteriors =
                model::forward(params, &features::frontend_eval(&defended_clean, fcfg)?)?;
            let adv_posteriors =
                model::forward(params, &features::frontend_eval(&defended_adv, fcfg)?)?;
            let clean_activity = model::binarize(&clean_posteriors);
            let adv_activity = model::binarize(&adv_posteriors);

            let counts = metrics::count_edits(
                &clean_activity,
                &adv_activity,
                &case.region,
                &case.labels,
            )?;
            let snr = signal::snr_db(&case.clean, &defended_adv)?;
            Ok(metrics::report_with_snr(counts, snr))
        })
        .collect::<Result<_, _>>()?;
    let aggregate = metrics::aggregate(&per_run)?;
    Ok(DefendedEvaluation { per_run, aggregate })
}
