//! Short-time Fourier analysis, log-mel features and WAV I/O.

mod mel;
mod stft;
mod wav;

pub use mel::{log_mel, MelFilterbank, LOG_FLOOR};
pub use stft::{istft, stft, stft_with, ComplexSpectrogram, StftParams, WindowKind};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

/// Mono signal with its sample rate. Samples are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "waveform".into(),
                detail: format!("sample {i} is {}", samples[i]),
            });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
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

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    /// Samples `[start, start + len)`, zero-padded past the end.
    pub fn segment(&self, start: usize, len: usize) -> Waveform {
        let mut out = vec![0.0; len];
        if start < self.samples.len() {
            let end = (start + len).min(self.samples.len());
            out[..end - start].copy_from_slice(&self.samples[start..end]);
        }
        Waveform {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }
}

/// Real-valued time-frequency plane, `frames × bins`, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    data: Vec<f64>,
    frames: usize,
    bins: usize,
    params: StftParams,
    signal_len: usize,
    sample_rate: u32,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn bins(&self) -> usize {
        self.bins
    }
    pub fn data(&self) -> &[f64] {
        &self.data
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

    /// Same metadata as `self` with new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Spectrogram> {
        if data.len() != self.data.len() {
            return Err(Error::shape(format!(
                "spectrogram has {} values, got {}",
                self.data.len(),
                data.len()
            )));
        }
        Ok(Spectrogram { data, ..self.clone() })
    }
}

pub type Magnitude = Spectrogram;
pub type Phase = Spectrogram;

/// Splits into `|X|` and `∠X`; phase is 0 where the magnitude is 0 and lies in `(-π, π]`.
pub fn split_magnitude_phase(spec: &ComplexSpectrogram) -> (Magnitude, Phase) {
    let n = spec.re.len();
    let mut mag = Vec::with_capacity(n);
    let mut phase = Vec::with_capacity(n);
    for (&re, &im) in spec.re.iter().zip(&spec.im) {
        let m = re.hypot(im);
        mag.push(m);
        let p = if m == 0.0 { 0.0 } else { im.atan2(re) };
        phase.push(if p == -std::f64::consts::PI { std::f64::consts::PI } else { p });
    }
    let meta = |data| Spectrogram {
        data,
        frames: spec.frames,
        bins: spec.bins(),
        params: spec.params,
        signal_len: spec.signal_len,
        sample_rate: spec.sample_rate,
    };
    (meta(mag), meta(phase))
}

/// `|X| · e^{i∠X}` with the frame metadata of `phase`.
pub fn reconstruct_with_phase(mag: &Magnitude, phase: &Phase) -> Result<ComplexSpectrogram> {
    if mag.frames != phase.frames || mag.bins != phase.bins {
        return Err(Error::shape(format!(
            "magnitude is {}x{}, phase is {}x{}",
            mag.frames, mag.bins, phase.frames, phase.bins
        )));
    }
    if let Some(i) = mag.data.iter().position(|&m| !(m >= 0.0)) {
        return Err(Error::invalid(format!("magnitude {} at index {i} is not a non-negative number", mag.data[i])));
    }
    let re = mag.data.iter().zip(&phase.data).map(|(m, p)| m * p.cos()).collect();
    let im = mag.data.iter().zip(&phase.data).map(|(m, p)| m * p.sin()).collect();
    ComplexSpectrogram::new(re, im, phase.params, phase.signal_len, phase.sample_rate)
}
