use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hann window.
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn coefficients(self, size: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..size)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / size as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; size],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StftParams {
    pub window: usize,
    pub hop: usize,
    pub kind: WindowKind,
}

impl StftParams {
    pub fn hann(window: usize, hop: usize) -> Self {
        Self {
            window,
            hop,
            kind: WindowKind::Hann,
        }
    }

    pub fn bins(&self) -> usize {
        self.window / 2 + 1
    }

    /// Frame count for a signal of `len` samples under the centered convention.
    pub fn frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || !self.window.is_power_of_two() {
            return Err(Error::invalid(format!(
                "STFT window must be a power of two >= 2, got {}",
                self.window
            )));
        }
        if self.hop == 0 || self.hop > self.window {
            return Err(Error::invalid(format!(
                "STFT hop must be in 1..={}, got {}",
                self.window, self.hop
            )));
        }
        Ok(())
    }
}

/// One-sided STFT with its analysis parameters and the original signal length.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub(crate) re: Vec<f64>,
    pub(crate) im: Vec<f64>,
    pub(crate) frames: usize,
    pub(crate) params: StftParams,
    pub(crate) signal_len: usize,
    pub(crate) sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn new(
        re: Vec<f64>,
        im: Vec<f64>,
        params: StftParams,
        signal_len: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        params.validate()?;
        let frames = params.frames(signal_len);
        let n = frames * params.bins();
        if re.len() != n || im.len() != n {
            return Err(Error::shape(format!(
                "spectrogram planes must hold {frames}x{} values",
                params.bins()
            )));
        }
        Ok(Self {
            re,
            im,
            frames,
            params,
            signal_len,
            sample_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn bins(&self) -> usize {
        self.params.bins()
    }
    pub fn params(&self) -> StftParams {
        self.params
    }
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }
    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
    pub fn re(&self) -> &[f64] {
        &self.re
    }
    pub fn im(&self) -> &[f64] {
        &self.im
    }
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(size: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        let mut p = p.borrow_mut();
        let (planner, cache) = &mut *p;
        cache
            .entry((size, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(size)
                } else {
                    planner.plan_fft_forward(size)
                }
            })
            .clone()
    })
}

/// Hann-windowed STFT with `window / 2` zeros of padding at both ends.
pub fn stft(w: &Waveform, window: usize, hop: usize) -> Result<ComplexSpectrogram> {
    stft_with(w, StftParams::hann(window, hop))
}

pub fn stft_with(w: &Waveform, params: StftParams) -> Result<ComplexSpectrogram> {
    params.validate()?;
    let x = w.samples();
    if x.is_empty() {
        return Err(Error::invalid("stft of an empty waveform"));
    }
    let n = params.window;
    let half = n / 2;
    let bins = params.bins();
    let frames = params.frames(x.len());
    let win = params.kind.coefficients(n);
    let fft = plan(n, false);

    let mut re = vec![0.0; frames * bins];
    let mut im = vec![0.0; frames * bins];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..frames {
        // frame t covers original samples [t*hop - half, t*hop + half)
        let start = (t * params.hop) as isize - half as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            let idx = start + i as isize;
            let v = if idx >= 0 && (idx as usize) < x.len() { x[idx as usize] } else { 0.0 };
            *b = Complex::new(v * win[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            re[t * bins + k] = buf[k].re;
            im[t * bins + k] = buf[k].im;
        }
    }
    Ok(ComplexSpectrogram {
        re,
        im,
        frames,
        params,
        signal_len: x.len(),
        sample_rate: w.sample_rate(),
    })
}

/// Least-squares overlap-add inverse: `x = Σ w·ifft(X_t) / Σ w²`.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    let p = spec.params;
    p.validate()?;
    let n = p.window;
    let half = n / 2;
    let bins = p.bins();
    let win = p.kind.coefficients(n);
    let ifft = plan(n, true);
    let len = spec.signal_len;

    let mut acc = vec![0.0; len];
    let mut wsum = vec![0.0; len];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let scale = 1.0 / n as f64;
    for t in 0..spec.frames {
        let row = t * bins;
        for k in 0..bins {
            buf[k] = Complex::new(spec.re[row + k], spec.im[row + k]);
        }
        // DC and Nyquist must be real for a real signal
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        for k in 1..n / 2 {
            buf[n - k] = buf[k].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = (t * p.hop) as isize - half as isize;
        for i in 0..n {
            let idx = start + i as isize;
            if idx < 0 || idx as usize >= len {
                continue;
            }
            let idx = idx as usize;
            acc[idx] += buf[i].re * scale * win[i];
            wsum[idx] += win[i] * win[i];
        }
    }
    let peak = wsum.iter().cloned().fold(0.0, f64::max);
    if let Some(pos) = wsum.iter().position(|&s| s <= 1e-10 * peak) {
        return Err(Error::invalid(format!(
            "window {} / hop {} violates the overlap-add condition (no window energy at sample {pos})",
            p.window, p.hop
        )));
    }
    let samples = acc.iter().zip(&wsum).map(|(a, s)| a / s).collect();
    Waveform::new(samples, spec.sample_rate)
}
