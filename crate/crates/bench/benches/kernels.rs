use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use wlss_core::autodiff::{Padding, Tape, Tensor};
use wlss_core::bsseval::bss_eval;
use wlss_core::dsp::{istft, stft_with, StftParams, Waveform};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Pcg64::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn noise(len: usize, seed: u64) -> Vec<f64> {
    random(&[len], seed).into_data()
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for (ci, co, hw) in [(1, 8, 144), (8, 16, 72), (32, 64, 18)] {
        let x = random(&[8, ci, hw, hw], 1);
        let k = random(&[co, ci, 3, 3], 2);
        g.bench_function(BenchmarkId::from_parameter(format!("{ci}to{co}@{hw}")), |b| {
            b.iter(|| {
                let mut t = Tape::new();
                let (xv, kv) = (t.leaf(x.clone(), true), t.leaf(k.clone(), true));
                let y = t.conv2d(xv, kv, None, Padding::Same).unwrap();
                let s = t.sum(y);
                t.backward(s).unwrap();
            })
        });
    }
    g.finish();
}

fn stft(c: &mut Criterion) {
    let mut g = c.benchmark_group("stft_round_trip");
    for (window, hop, sr) in [(256, 64, 8000), (1024, 320, 32000)] {
        let params = StftParams::hann(window, hop);
        let w = Waveform::new(noise(sr as usize * 2, 3), sr).unwrap();
        g.bench_function(BenchmarkId::from_parameter(format!("{window}/{hop}")), |b| {
            b.iter(|| istft(&stft_with(&w, params).unwrap()).unwrap())
        });
    }
    g.finish();
}

fn bss(c: &mut Criterion) {
    let mut g = c.benchmark_group("bss_eval");
    g.sample_size(20);
    let n = 8192;
    let (r1, r2) = (noise(n, 4), noise(n, 5));
    let est: Vec<f64> = r1.iter().zip(&r2).map(|(a, b)| a + 0.3 * b).collect();
    for taps in [32, 512] {
        g.bench_function(BenchmarkId::from_parameter(taps), |b| {
            b.iter(|| bss_eval(&est, &[&r1, &r2], 0, taps).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, conv, stft, bss);
criterion_main!(benches);
