use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngExt, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg64;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// RMS every generated event is normalized to.
pub const EVENT_RMS: f64 = 0.1;
const FADE_SECS: f64 = 0.01;

/// Parametric signal families. Each occupies its own region of the 0–4 kHz band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    VibratoTone,
    UpChirp,
    DownChirp,
    SquareWave,
    AmTone,
    NoiseBurst,
    HarmonicStack,
    ClickTrain,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 8] = [
        GeneratorKind::VibratoTone,
        GeneratorKind::UpChirp,
        GeneratorKind::DownChirp,
        GeneratorKind::SquareWave,
        GeneratorKind::AmTone,
        GeneratorKind::NoiseBurst,
        GeneratorKind::HarmonicStack,
        GeneratorKind::ClickTrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::VibratoTone => "vibrato_tone",
            GeneratorKind::UpChirp => "up_chirp",
            GeneratorKind::DownChirp => "down_chirp",
            GeneratorKind::SquareWave => "square_wave",
            GeneratorKind::AmTone => "am_tone",
            GeneratorKind::NoiseBurst => "noise_burst",
            GeneratorKind::HarmonicStack => "harmonic_stack",
            GeneratorKind::ClickTrain => "click_train",
        }
    }

    /// Parameter names in the order [`SoundClassSpec::ranges`] lists them.
    pub fn parameters(self) -> &'static [&'static str] {
        match self {
            GeneratorKind::VibratoTone => &["f0_hz", "rate_hz", "depth"],
            GeneratorKind::UpChirp | GeneratorKind::DownChirp => &["start_hz", "end_hz"],
            GeneratorKind::SquareWave => &["f0_hz", "max_harmonic_hz"],
            GeneratorKind::AmTone => &["carrier_hz", "rate_hz", "depth"],
            GeneratorKind::NoiseBurst => &["center_hz", "width_hz"],
            GeneratorKind::HarmonicStack => &["f0_hz", "partials"],
            GeneratorKind::ClickTrain => &["rate_hz", "carrier_hz"],
        }
    }

    fn default_ranges(self) -> Vec<ParamRange> {
        let r = |lo, hi| ParamRange { lo, hi };
        match self {
            GeneratorKind::VibratoTone => vec![r(420.0, 500.0), r(4.0, 7.0), r(0.02, 0.04)],
            GeneratorKind::UpChirp => vec![r(580.0, 640.0), r(950.0, 1050.0)],
            GeneratorKind::DownChirp => vec![r(2650.0, 2750.0), r(2250.0, 2350.0)],
            GeneratorKind::SquareWave => vec![r(60.0, 80.0), r(400.0, 400.0)],
            GeneratorKind::AmTone => vec![r(1150.0, 1300.0), r(6.0, 10.0), r(0.7, 0.9)],
            GeneratorKind::NoiseBurst => vec![r(3550.0, 3700.0), r(150.0, 250.0)],
            GeneratorKind::HarmonicStack => vec![r(1450.0, 1550.0), r(2.0, 2.0)],
            GeneratorKind::ClickTrain => vec![r(8.0, 14.0), r(1800.0, 1950.0)],
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeneratorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown generator kind `{s}`")))
    }
}

/// Closed interval a parameter is drawn from uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoundClassSpec {
    pub class_id: usize,
    pub kind: GeneratorKind,
    pub ranges: Vec<ParamRange>,
}

impl SoundClassSpec {
    pub fn standard(class_id: usize, kind: GeneratorKind) -> Self {
        Self {
            class_id,
            kind,
            ranges: kind.default_ranges(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let names = self.kind.parameters();
        if self.ranges.len() != names.len() {
            return Err(Error::Config(format!(
                "class {} ({}) needs {} ranges ({}), got {}",
                self.class_id,
                self.kind,
                names.len(),
                names.join(", "),
                self.ranges.len()
            )));
        }
        for (r, name) in self.ranges.iter().zip(names) {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi) {
                return Err(Error::Config(format!(
                    "class {}: range for {name} is empty ({}..{})",
                    self.class_id, r.lo, r.hi
                )));
            }
        }
        Ok(())
    }
}

/// The first `k` standard classes, ids `0..k`.
pub fn standard_classes(k: usize) -> Result<Vec<SoundClassSpec>> {
    if k == 0 || k > GeneratorKind::ALL.len() {
        return Err(Error::Config(format!(
            "class count must be in 1..={}, got {k}",
            GeneratorKind::ALL.len()
        )));
    }
    Ok(GeneratorKind::ALL[..k]
        .iter()
        .enumerate()
        .map(|(i, &kind)| SoundClassSpec::standard(i, kind))
        .collect())
}

/// Deterministic event of `duration` seconds with 10 ms raised-cosine fades, RMS [`EVENT_RMS`].
pub fn generate_event(spec: &SoundClassSpec, duration: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    spec.validate()?;
    if !(duration > 0.0) {
        return Err(Error::invalid(format!("event duration must be positive, got {duration}")));
    }
    let n = (duration * sample_rate as f64).round() as usize;
    if n < 2 {
        return Err(Error::invalid("event is shorter than two samples"));
    }
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let mut rng = Pcg64::seed_from_u64(seed);
    let p: Vec<f64> = spec.ranges.iter().map(|r| r.sample(&mut rng)).collect();
    let phase0 = rng.random_range(0.0..2.0 * PI);
    let t = |i: usize| i as f64 / sr;

    let mut x: Vec<f64> = match spec.kind {
        GeneratorKind::VibratoTone => {
            let (f0, rate, depth) = (p[0], p[1], p[2]);
            // phase is the integral of f0 (1 + depth sin(2π rate t))
            (0..n)
                .map(|i| {
                    let tt = t(i);
                    let ph = 2.0 * PI * f0 * (tt - depth * ((2.0 * PI * rate * tt).cos() - 1.0) / (2.0 * PI * rate));
                    (ph + phase0).sin()
                })
                .collect()
        }
        GeneratorKind::UpChirp | GeneratorKind::DownChirp => {
            let (f_a, f_b) = (p[0], p[1]);
            let k = (f_b - f_a) / duration;
            (0..n)
                .map(|i| {
                    let tt = t(i);
                    (2.0 * PI * (f_a * tt + 0.5 * k * tt * tt) + phase0).sin()
                })
                .collect()
        }
        GeneratorKind::SquareWave => {
            let (f0, limit) = (p[0], p[1].min(nyquist));
            let harmonics: Vec<f64> = (1..).step_by(2).map(|h| h as f64).take_while(|h| h * f0 <= limit).collect();
            (0..n)
                .map(|i| {
                    harmonics
                        .iter()
                        .map(|h| (2.0 * PI * h * f0 * t(i) + h * phase0).sin() / h)
                        .sum()
                })
                .collect()
        }
        GeneratorKind::AmTone => {
            let (fc, rate, depth) = (p[0], p[1], p[2]);
            (0..n)
                .map(|i| {
                    let tt = t(i);
                    (1.0 + depth * (2.0 * PI * rate * tt).sin()) * (2.0 * PI * fc * tt + phase0).sin()
                })
                .collect()
        }
        GeneratorKind::NoiseBurst => band_noise(n, sr, p[0] - p[1] / 2.0, p[0] + p[1] / 2.0, &mut rng),
        GeneratorKind::HarmonicStack => {
            let (f0, partials) = (p[0], p[1].round().max(1.0) as usize);
            (1..=partials)
                .filter(|&h| h as f64 * f0 < nyquist)
                .fold(vec![0.0; n], |mut acc, h| {
                    let ph = rng.random_range(0.0..2.0 * PI);
                    for (i, a) in acc.iter_mut().enumerate() {
                        *a += (2.0 * PI * h as f64 * f0 * t(i) + ph).sin() / h as f64;
                    }
                    acc
                })
        }
        GeneratorKind::ClickTrain => {
            let (rate, fc) = (p[0], p[1]);
            let burst = ((0.005 * sr).round() as usize).max(2);
            let period = sr / rate;
            let mut out = vec![0.0; n];
            let mut start = rng.random_range(0.0..period);
            while (start as usize) < n {
                let s0 = start as usize;
                for j in 0..burst.min(n - s0) {
                    let w = 0.5 - 0.5 * (2.0 * PI * j as f64 / (burst - 1) as f64).cos();
                    out[s0 + j] += w * (2.0 * PI * fc * j as f64 / sr + phase0).sin();
                }
                start += period;
            }
            out
        }
    };

    let fade = ((FADE_SECS * sr).round() as usize).min(n / 2);
    for i in 0..fade {
        let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if !(rms > 0.0) {
        return Err(Error::NonFinite {
            what: format!("event of class {}", spec.class_id),
            detail: "generated signal has zero energy".into(),
        });
    }
    let g = EVENT_RMS / rms;
    x.iter_mut().for_each(|v| *v *= g);
    Waveform::new(x, sample_rate)
}

/// White Gaussian noise restricted to `[lo, hi]` Hz by zeroing FFT bins.
fn band_noise<R: Rng>(n: usize, sr: f64, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if f < lo || f > hi {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}
