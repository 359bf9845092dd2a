use super::{Magnitude, Waveform};
use super::stft::stft;
use super::split_magnitude_phase;
use crate::error::{Error, Result};

/// Lower bound applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the HTK mel scale between 0 Hz and Nyquist.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    weights: Vec<f64>,
    mel_bins: usize,
    fft_bins: usize,
}

impl MelFilterbank {
    pub fn new(mel_bins: usize, window: usize, sample_rate: u32) -> Result<Self> {
        let fft_bins = window / 2 + 1;
        if mel_bins == 0 || mel_bins >= fft_bins {
            return Err(Error::invalid(format!(
                "{mel_bins} mel bands cannot be built from {fft_bins} FFT bins"
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..mel_bins + 2)
            .map(|i| mel_to_hz(top * i as f64 / (mel_bins + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / window as f64;
        let mut weights = vec![0.0; mel_bins * fft_bins];
        for m in 0..mel_bins {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut any = false;
            for k in 0..fft_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * fft_bins + k] = w;
                any |= w > 0.0;
            }
            if !any {
                // too narrow to straddle a bin: fall back to the nearest bin
                let k = ((mid / bin_hz).round() as usize).min(fft_bins - 1);
                weights[m * fft_bins + k] = 1.0;
            }
        }
        Ok(Self {
            weights,
            mel_bins,
            fft_bins,
        })
    }

    pub fn mel_bins(&self) -> usize {
        self.mel_bins
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `frames × mel_bins` projection of a magnitude spectrogram.
    pub fn apply(&self, mag: &Magnitude) -> Result<Vec<f64>> {
        if mag.bins() != self.fft_bins {
            return Err(Error::shape(format!(
                "filterbank expects {} bins, spectrogram has {}",
                self.fft_bins,
                mag.bins()
            )));
        }
        let mut out = vec![0.0; mag.frames() * self.mel_bins];
        for t in 0..mag.frames() {
            let row = &mag.data()[t * self.fft_bins..(t + 1) * self.fft_bins];
            for m in 0..self.mel_bins {
                let w = &self.weights[m * self.fft_bins..(m + 1) * self.fft_bins];
                out[t * self.mel_bins + m] = crate::autodiff::dot(row, w);
            }
        }
        Ok(out)
    }
}

/// `log(max(mel · |X|, LOG_FLOOR))`, laid out `frames × mel_bins`.
pub fn log_mel(w: &Waveform, window: usize, hop: usize, fb: &MelFilterbank) -> Result<Vec<f64>> {
    let (mag, _) = split_magnitude_phase(&stft(w, window, hop)?);
    let mut v = fb.apply(&mag)?;
    for x in &mut v {
        *x = x.max(LOG_FLOOR).ln();
    }
    Ok(v)
}
