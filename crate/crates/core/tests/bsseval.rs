mod common;

use common::bss::{oracle, oracle_worst};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use wlss_core::bsseval::{bss_eval, decompose, Metrics, FLOOR_DB};
use wlss_core::Error;

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Pcg64::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Gram-Schmidt: `count` mutually orthogonal vectors of equal energy `n`.
fn orthogonal(count: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for i in 0..count {
        let mut v = noise(n, seed + i as u64);
        for u in &out {
            let c = dot(&v, u) / dot(u, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
        }
        let s = (n as f64).sqrt() / norm(&v);
        out.push(v.into_iter().map(|x| x * s).collect());
    }
    out
}

const CAP: f64 = 120.0;

#[test]
fn matches_dense_least_squares_oracle() {
    let worst = oracle_worst(60, 1);
    assert!(worst <= 1e-6, "{worst:.3e}");
}

#[test]
fn random_256_samples_8_taps_match_oracle() {
    let refs = [noise(256, 2), noise(256, 3)];
    let est: Vec<f64> = refs[0].iter().zip(&refs[1]).zip(noise(256, 4)).map(|((a, b), c)| a + 0.5 * b + 0.2 * c).collect();
    let rs: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
    let d = decompose(&est, &rs, 0, 8).unwrap();
    for (mine, theirs) in [&d.s_target, &d.e_interf, &d.e_artif].into_iter().zip(oracle(&est, &rs, 0, 8)) {
        let err = mine.iter().zip(&theirs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-6, "{err:.3e}");
    }
}

#[test]
fn perfect_estimate_hits_the_cap() {
    let refs = [noise(400, 5), noise(400, 6)];
    let rs: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
    let d = decompose(&refs[0], &rs, 0, 16).unwrap();
    let t = norm(&d.s_target);
    assert!(norm(&d.e_interf) <= 1e-8 * t && norm(&d.e_artif) <= 1e-8 * t);
    let m = d.metrics();
    for v in [m.sdr, m.sir, m.sar] {
        assert!((v - CAP).abs() < 1e-6, "{m:?}");
    }
}

#[test]
fn interferer_as_estimate_has_no_target() {
    let refs = orthogonal(2, 300, 7);
    let rs: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
    let d = decompose(&refs[1], &rs, 0, 1).unwrap();
    assert!(norm(&d.s_target) <= 1e-8 * norm(&refs[1]));
}

#[test]
fn half_and_half_orthogonal_mixture_is_zero_db() {
    let refs = orthogonal(2, 512, 8);
    let rs: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
    let est: Vec<f64> = refs[0].iter().zip(&refs[1]).map(|(a, b)| 0.5 * (a + b)).collect();
    let m = bss_eval(&est, &rs, 0, 1).unwrap();
    assert!(m.sdr.abs() <= 0.01 && m.sir.abs() <= 0.01, "{m:?}");
}

#[test]
fn equal_energy_orthogonal_noise_gives_zero_sdr_and_sar() {
    let v = orthogonal(3, 512, 9);
    let rs: Vec<&[f64]> = v[..2].iter().map(Vec::as_slice).collect();
    let est: Vec<f64> = v[0].iter().zip(&v[2]).map(|(a, n)| a + n).collect();
    let m = bss_eval(&est, &rs, 0, 1).unwrap();
    assert!(m.sdr.abs() <= 0.01 && m.sar.abs() <= 0.01, "{m:?}");
    assert!(m.sir >= CAP - 1e-6, "{m:?}");
}

#[test]
fn zero_target_component_reports_floor() {
    let refs = orthogonal(2, 256, 10);
    let rs: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
    let m = bss_eval(&vec![0.0; 256], &rs, 0, 4).unwrap();
    assert_eq!(m, Metrics { sdr: FLOOR_DB, sir: FLOOR_DB, sar: FLOOR_DB });
}

#[test]
fn silent_references_are_rejected_with_diagnostic() {
    let z = vec![0.0; 128];
    let err = decompose(&noise(128, 11), &[&z, &z], 0, 4).unwrap_err();
    assert!(matches!(err, Error::Singular { .. }), "{err}");
    assert!(err.to_string().contains("condition"), "{err}");
}

#[test]
fn dependent_references_are_absorbed_by_regularization() {
    let r = noise(128, 11);
    let twice: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
    let est: Vec<f64> = r.iter().zip(noise(128, 12)).map(|(a, b)| a + 0.1 * b).collect();
    let d = decompose(&est, &[&r, &twice], 0, 1).unwrap();
    for t in 0..128 {
        assert!((d.s_target[t] + d.e_interf[t] + d.e_artif[t] - est[t]).abs() < 1e-9);
    }
    // the interferer adds nothing outside the target span
    assert!(norm(&d.e_interf) <= 1e-6 * norm(&d.s_target));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let r = noise(64, 12);
    assert!(decompose(&r[..32], &[&r], 0, 4).is_err());
    assert!(decompose(&r, &[&r], 1, 4).is_err());
    assert!(decompose(&r, &[&r], 0, 0).is_err());
}

fn case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, usize, usize)> {
    (64usize..400, 1usize..=16, 1usize..=3).prop_flat_map(|(n, taps, count)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, n), count),
            prop::collection::vec(-1.0f64..1.0, n),
            0..count,
            Just(taps),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn components_add_up_and_are_orthogonal((refs, noise, target, taps) in case()) {
        let est: Vec<f64> = (0..noise.len()).map(|t| refs.iter().map(|r| r[t]).sum::<f64>() * 0.7 + 0.4 * noise[t]).collect();
        let rs: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
        let d = decompose(&est, &rs, target, taps).unwrap();
        let scale = norm(&est);
        for t in 0..est.len() {
            let sum = d.s_target[t] + d.e_interf[t] + d.e_artif[t];
            prop_assert!((sum - est[t]).abs() <= 1e-9 * scale);
        }
        let (ns, ni, na) = (norm(&d.s_target), norm(&d.e_interf), norm(&d.e_artif));
        prop_assert!(dot(&d.s_target, &d.e_interf).abs() <= 1e-8 * (ns * ni).max(1e-300));
        let proj: Vec<f64> = d.s_target.iter().zip(&d.e_interf).map(|(a, b)| a + b).collect();
        prop_assert!(dot(&proj, &d.e_artif).abs() <= 1e-8 * (norm(&proj) * na).max(1e-300));
    }

    #[test]
    fn metrics_are_scale_invariant((refs, noise, target, taps) in case(), alpha in 0.01f64..100.0) {
        let est: Vec<f64> = (0..noise.len()).map(|t| refs[target][t] + 0.5 * noise[t]).collect();
        let scaled: Vec<f64> = est.iter().map(|v| alpha * v).collect();
        let rs: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
        let a = bss_eval(&est, &rs, target, taps).unwrap();
        let b = bss_eval(&scaled, &rs, target, taps).unwrap();
        prop_assert!((a.sdr - b.sdr).abs() <= 1e-9);
        prop_assert!((a.sir - b.sir).abs() <= 1e-9);
        prop_assert!((a.sar - b.sar).abs() <= 1e-9);
    }

    #[test]
    fn sdr_bounds_sir_and_sar((refs, noise, target, taps) in case()) {
        let est: Vec<f64> = (0..noise.len()).map(|t| refs.iter().map(|r| r[t]).sum::<f64>() + 0.3 * noise[t]).collect();
        let rs: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
        let m = bss_eval(&est, &rs, target, taps).unwrap();
        prop_assert!(m.sir >= m.sdr - 1e-9 && m.sar >= m.sdr - 1e-9, "{:?}", m);
    }
}
