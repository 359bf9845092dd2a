use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use wlss_core::dsp::{istft, stft, Waveform};

/// Parameter sets the round trip must hold for: desk separation/SED and full-scale 32 kHz separation/SED.
pub const PARAMS: [(usize, usize, u32); 4] = [(256, 64, 8000), (256, 80, 8000), (1024, 256, 32000), (1024, 320, 32000)];

pub fn white_noise(len: usize, sample_rate: u32, seed: u64) -> Waveform {
    let mut rng = Pcg64::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), sample_rate).unwrap()
}

/// Worst `‖istft(stft(w)) − w‖∞` over `signals` random signals of varying length.
pub fn round_trip_worst(window: usize, hop: usize, sample_rate: u32, signals: usize, seed: u64) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    (0..signals)
        .map(|i| {
            let len = rng.random_range(4 * window..8 * window);
            let w = white_noise(len, sample_rate, seed ^ i as u64);
            let back = istft(&stft(&w, window, hop).unwrap()).unwrap();
            assert_eq!(back.len(), w.len());
            w.samples().iter().zip(back.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}
