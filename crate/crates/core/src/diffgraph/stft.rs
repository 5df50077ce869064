//! Hann-windowed power-spectrogram kernel used by the `StftPower` tape op.
//!
//! Frames are centered: frame t covers padded samples
//! [t·hop − window/2, t·hop + window/2), with reflection at the signal
//! edges, so the frame count depends only on length and hop. The transform
//! runs through an FFT; `power_direct` is the direct-DFT definition kept as
//! the compatibility oracle.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Fixed framing parameters for one `StftPower` node.
#[derive(Debug, Clone)]
pub struct StftSpec {
    pub window_len: usize,
    pub hop: usize,
    pub n_samples: usize,
    window: Vec<f64>,
}

impl StftSpec {
    pub fn new(window_len: usize, hop: usize, n_samples: usize) -> Self {
        // Periodic Hann window.
        let window = (0..window_len)
            .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / window_len as f64).cos())
            .collect();
        Self {
            window_len,
            hop,
            n_samples,
            window,
        }
    }

    /// T = ceil(n_samples / hop).
    pub fn frames(&self) -> usize {
        self.n_samples.div_ceil(self.hop)
    }

    /// One-sided bin count, window_len/2 + 1.
    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Maps a padded index onto the signal by reflecting at the edges
    /// (mirror without edge repetition).
    pub fn reflect(i: isize, n: usize) -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n as isize - 1);
        let mut m = i.rem_euclid(period);
        if m >= n as isize {
            m = period - m;
        }
        m as usize
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Returns (power matrix T×bins row-major, interleaved (re, im) spectra).
pub fn forward(samples: &[f64], spec: &StftSpec) -> (Vec<f64>, Vec<f64>) {
    let frames = spec.frames();
    let bins = spec.bins();
    let win = spec.window_len;
    let half = (win / 2) as isize;
    let fft = plan(win, false);

    let mut power = vec![0.0; frames * bins];
    let mut spectra = vec![0.0; frames * bins * 2];
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for t in 0..frames {
        let start = (t * spec.hop) as isize - half;
        for (n, b) in buf.iter_mut().enumerate() {
            let idx = StftSpec::reflect(start + n as isize, samples.len());
            *b = Complex::new(samples[idx] * spec.window[n], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            let c = buf[k];
            power[t * bins + k] = c.re * c.re + c.im * c.im;
            spectra[(t * bins + k) * 2] = c.re;
            spectra[(t * bins + k) * 2 + 1] = c.im;
        }
    }
    (power, spectra)
}

/// Accumulates d(loss)/d(samples) into `grad_samples` given the gradient on
/// the power matrix. The adjoint of the one-sided DFT is an (unnormalized)
/// inverse FFT of the gradient spectrum zero-padded to the full window.
pub fn backward(grad_power: &[f64], spectra: &[f64], spec: &StftSpec, grad_samples: &mut [f64]) {
    let frames = spec.frames();
    let bins = spec.bins();
    let win = spec.window_len;
    let half = (win / 2) as isize;
    let ifft = plan(win, true);

    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for t in 0..frames {
        for b in buf.iter_mut() {
            *b = Complex::new(0.0, 0.0);
        }
        for k in 0..bins {
            let gp = grad_power[t * bins + k];
            let re = spectra[(t * bins + k) * 2];
            let im = spectra[(t * bins + k) * 2 + 1];
            // d(power)/d(re, im) = (2re, 2im).
            buf[k] = Complex::new(2.0 * re * gp, 2.0 * im * gp);
        }
        ifft.process(&mut buf);
        let start = (t * spec.hop) as isize - half;
        for (n, b) in buf.iter().enumerate() {
            let idx = StftSpec::reflect(start + n as isize, grad_samples.len());
            grad_samples[idx] += spec.window[n] * b.re;
        }
    }
}

/// Direct real-DFT power spectrogram: the definitional route, quadratic in
/// the window length. Must agree with [`forward`] to within 1e-6.
pub fn power_direct(samples: &[f64], spec: &StftSpec) -> Vec<f64> {
    let frames = spec.frames();
    let bins = spec.bins();
    let win = spec.window_len;
    let half = (win / 2) as isize;
    let mut power = vec![0.0; frames * bins];
    let mut frame = vec![0.0; win];
    for t in 0..frames {
        let start = (t * spec.hop) as isize - half;
        for (n, v) in frame.iter_mut().enumerate() {
            let idx = StftSpec::reflect(start + n as isize, samples.len());
            *v = samples[idx] * spec.window[n];
        }
        for k in 0..bins {
            let mut re = 0.0;
            let mut im = 0.0;
            for (n, &w) in frame.iter().enumerate() {
                let theta = std::f64::consts::TAU * (k * n) as f64 / win as f64;
                re += w * theta.cos();
                im -= w * theta.sin();
            }
            power[t * bins + k] = re * re + im * im;
        }
    }
    power
}
