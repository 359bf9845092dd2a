//! Dense least-squares oracle for the BSS decomposition.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use wlss_core::bsseval::decompose;

/// Columns are `references[i]` delayed by `0..taps`, zero-filled at the front and
/// truncated to the signal length.
fn delay_matrix(references: &[&[f64]], taps: usize) -> DMatrix<f64> {
    let n = references[0].len();
    DMatrix::from_fn(n, references.len() * taps, |t, col| {
        let (r, d) = (col / taps, col % taps);
        if t >= d { references[r][t - d] } else { 0.0 }
    })
}

fn project(a: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let y = DVector::from_column_slice(y);
    let coef = a.clone().svd(true, true).solve(&y, 1e-14).expect("svd solve");
    (a * coef).iter().copied().collect()
}

/// `(s_target, e_interf, e_artif)` by explicit assembly and SVD least squares.
pub fn oracle(estimate: &[f64], references: &[&[f64]], target: usize, taps: usize) -> [Vec<f64>; 3] {
    let s_target = project(&delay_matrix(&[references[target]], taps), estimate);
    let p_all = project(&delay_matrix(references, taps), estimate);
    let e_interf = p_all.iter().zip(&s_target).map(|(p, s)| p - s).collect();
    let e_artif = estimate.iter().zip(&p_all).map(|(e, p)| e - p).collect();
    [s_target, e_interf, e_artif]
}

/// Worst component-wise deviation, relative to the estimate's largest sample, over
/// `instances` random cases with length ≤ 512 and L ≤ 16.
pub fn oracle_worst(instances: usize, seed: u64) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(64..=512);
        let taps = rng.random_range(1..=16);
        let count = rng.random_range(1..=3);
        let refs: Vec<Vec<f64>> = (0..count).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let target = rng.random_range(0..count);
        let mix: f64 = rng.random_range(0.0..1.0);
        let est: Vec<f64> = (0..n)
            .map(|t| refs.iter().map(|r| r[t]).sum::<f64>() * mix + rng.random_range(-0.3..0.3))
            .collect();
        let rs: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
        let d = decompose(&est, &rs, target, taps).unwrap();
        let scale = est.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (mine, theirs) in [&d.s_target, &d.e_interf, &d.e_artif].into_iter().zip(oracle(&est, &rs, target, taps)) {
            for (a, b) in mine.iter().zip(&theirs) {
                worst = worst.max((a - b).abs() / scale);
            }
        }
    }
    worst
}
