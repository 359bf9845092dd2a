mod common;

use common::stft::{round_trip_worst, white_noise, PARAMS};
use proptest::prelude::*;
use wlss_core::dsp::{
    istft, log_mel, reconstruct_with_phase, split_magnitude_phase, stft, MelFilterbank, WindowKind, Waveform, LOG_FLOOR,
};

#[test]
fn round_trip_at_desk_and_full_scale_parameters() {
    for (window, hop, sr) in PARAMS {
        let worst = round_trip_worst(window, hop, sr, 5, 1);
        assert!(worst <= 1e-8, "{window}/{hop}: {worst:.3e}");
    }
}

#[test]
fn full_scale_sed_parameters_give_100_frames_per_second() {
    let w = Waveform::zeros(32000 * 3, 32000).unwrap();
    let s = stft(&w, 1024, 320).unwrap();
    assert_eq!(s.frames(), 1 + 300);
    assert_eq!(s.bins(), 513);
}

#[test]
fn silence_round_trips_to_silence() {
    let w = Waveform::zeros(2048, 8000).unwrap();
    let s = stft(&w, 256, 64).unwrap();
    assert!(s.re().iter().chain(s.im()).all(|&v| v == 0.0));
    assert!(istft(&s).unwrap().samples().iter().all(|&v| v == 0.0));
}

#[test]
fn hop_violating_overlap_add_is_rejected() {
    let w = white_noise(2048, 8000, 3);
    assert!(stft(&w, 256, 0).is_err());
    assert!(stft(&w, 256, 512).is_err());
    assert!(stft(&w, 100, 25).is_err());
}

#[test]
fn identity_endpoint_reproduces_the_mixture() {
    let w = white_noise(4096, 8000, 4);
    let x = stft(&w, 256, 64).unwrap();
    let (mag, phase) = split_magnitude_phase(&x);
    let y = reconstruct_with_phase(&mag, &phase).unwrap();
    let back = istft(&y).unwrap();
    let err = w.samples().iter().zip(back.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn full_scale_filterbank_rows_carry_weight() {
    let fb = MelFilterbank::new(64, 1024, 32000).unwrap();
    assert_eq!(fb.mel_bins(), 64);
    for (i, row) in fb.weights().chunks(513).enumerate() {
        assert!(row.iter().sum::<f64>() > 0.0, "row {i} is empty");
    }
    assert!(MelFilterbank::new(129, 256, 8000).is_err());
}

#[test]
fn log_mel_of_silence_is_the_floor() {
    let fb = MelFilterbank::new(64, 256, 8000).unwrap();
    let f = log_mel(&Waveform::zeros(1600, 8000).unwrap(), 256, 80, &fb).unwrap();
    assert_eq!(f.len(), 21 * 64);
    assert!(f.iter().all(|&v| v == LOG_FLOOR.ln()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn round_trip_on_random_signals(
        samples in prop::collection::vec(-1.0f64..1.0, 1024..3000),
        hop in prop::sample::select(vec![16usize, 32, 64, 80, 128]),
    ) {
        let w = Waveform::new(samples, 8000).unwrap();
        let back = istft(&stft(&w, 256, hop).unwrap()).unwrap();
        let err = w.samples().iter().zip(back.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-8, "hop {hop}: {err}");
    }

    #[test]
    fn magnitudes_are_non_negative_and_split_inverts(samples in prop::collection::vec(-1.0f64..1.0, 512..1024)) {
        let w = Waveform::new(samples, 8000).unwrap();
        let x = stft(&w, 256, 64).unwrap();
        let (mag, phase) = split_magnitude_phase(&x);
        prop_assert!(mag.data().iter().all(|&m| m >= 0.0));
        let y = reconstruct_with_phase(&mag, &phase).unwrap();
        for (a, b) in x.re().iter().zip(y.re()).chain(x.im().iter().zip(y.im())) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        let (mag2, phase2) = split_magnitude_phase(&y);
        for (a, b) in mag.data().iter().zip(mag2.data()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        for ((p, q), m) in phase.data().iter().zip(phase2.data()).zip(mag.data()) {
            let d = (p - q).abs();
            let wrapped = d.min(2.0 * std::f64::consts::PI - d);
            prop_assert!(*m < 1e-9 || wrapped <= 1e-8);
        }
    }

    #[test]
    fn windowed_frame_energy_matches_spectral_energy(
        samples in prop::collection::vec(-1.0f64..1.0, 1024..2048),
        frame in 2usize..10,
    ) {
        // Σ (x·w)² = (|X0|² + 2Σ|Xk|² + |X_{N/2}|²) / N for each frame
        let w = Waveform::new(samples, 8000).unwrap();
        let x = stft(&w, 256, 64).unwrap();
        let win = WindowKind::Hann.coefficients(256);
        let start = frame * 64 - 128;
        let time: f64 = (0..256).map(|i| (w.samples()[start + i] * win[i]).powi(2)).sum();
        let bins = x.bins();
        let mut spec = 0.0;
        for k in 0..bins {
            let i = frame * bins + k;
            let p = x.re()[i].powi(2) + x.im()[i].powi(2);
            spec += if k == 0 || k == bins - 1 { p } else { 2.0 * p };
        }
        spec /= 256.0;
        prop_assert!((time - spec).abs() <= 1e-6 * time, "{time} vs {spec}");
    }
}
