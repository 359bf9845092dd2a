//! Central finite-difference checks for every differentiable tape operation.

use rand::{Rng, RngExt, SeedableRng};
use rand_pcg::Pcg64;
use wlss_core::autodiff::{Mode, Padding, RunningStats, Tape, Tensor, Var};
use wlss_core::Result;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
pub const INSTANCES: usize = 20;

/// Entries whose true derivative is this small are compared absolutely.
const FLOOR: f64 = 1e-6;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Box<Build>,
}

pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn uniform(rng: &mut Pcg64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so kinks (ReLU, |.|) stay outside the FD stencil.
fn away_from_zero(rng: &mut Pcg64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar objective `Σ out ⊙ r` with a fixed random `r`, so every output entry matters.
fn objective(tape: &mut Tape, case: &Case, inputs: &[Tensor], weights_seed: u64, with_grad: bool) -> (f64, Vec<Var>) {
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), with_grad)).collect();
    let out = (case.build)(tape, &vars).expect("case builds");
    let shape = tape.shape(out).to_vec();
    let mut rng = Pcg64::seed_from_u64(weights_seed);
    let r = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.sum(prod);
    if with_grad {
        tape.backward(loss).unwrap();
    }
    (tape.value(loss).data()[0], vars)
}

/// Worst relative error between the tape gradient and central differences.
pub fn check(case: &Case, weights_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let (_, vars) = objective(&mut tape, case, &case.inputs, weights_seed, true);
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; case.inputs[i].numel()]);
        for j in 0..case.inputs[i].numel() {
            let eval = |delta: f64| {
                let mut inputs = case.inputs.clone();
                inputs[i].data_mut()[j] += delta;
                objective(&mut Tape::new(), case, &inputs, weights_seed, false).0
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

fn case(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        inputs,
        build: Box::new(build),
    }
}

fn dims(rng: &mut Pcg64, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Random conv instance: `[b, c_in, h, w]` and a `[c_out, c_in, k, k]` kernel.
fn conv_shapes(rng: &mut Pcg64) -> ([usize; 4], [usize; 4]) {
    let (b, ci, co) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
    let k = [1, 3][dims(rng, 0, 1)];
    let (h, w) = (dims(rng, k.max(2), 5), dims(rng, k.max(2), 5));
    ([b, ci, h, w], [co, ci, k, k])
}

/// One generator per differentiable operation; each yields a fresh random instance.
pub fn generators() -> Vec<(&'static str, fn(&mut Pcg64) -> Case)> {
    vec![
        ("add", |r| {
            let s = [dims(r, 1, 3), dims(r, 1, 4)];
            case(vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)], |t, v| t.add(v[0], v[1]))
        }),
        ("mul", |r| {
            let s = [dims(r, 1, 3), dims(r, 1, 4)];
            case(vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)], |t, v| t.mul(v[0], v[1]))
        }),
        ("scale", |r| {
            let s = r.random_range(-2.0..2.0);
            let n = dims(r, 1, 6);
            case(vec![uniform(r, &[n], -1.0, 1.0)], move |t, v| Ok(t.scale(v[0], s)))
        }),
        ("sum", |r| {
            let s = [dims(r, 1, 3), dims(r, 1, 3)];
            case(vec![uniform(r, &s, -1.0, 1.0)], |t, v| Ok(t.sum(v[0])))
        }),
        ("relu", |r| {
            let n = dims(r, 2, 8);
            case(vec![away_from_zero(r, &[n])], |t, v| Ok(t.relu(v[0])))
        }),
        ("sigmoid", |r| {
            let n = dims(r, 2, 8);
            case(vec![uniform(r, &[n], -4.0, 4.0)], |t, v| Ok(t.sigmoid(v[0])))
        }),
        ("reshape", |r| {
            let (a, b) = (dims(r, 1, 3), dims(r, 1, 4));
            case(vec![uniform(r, &[a, b], -1.0, 1.0)], move |t, v| t.reshape(v[0], vec![b, a]))
        }),
        ("linear", |r| {
            let (n, di, d) = (dims(r, 1, 4), dims(r, 1, 5), dims(r, 1, 4));
            let bias = r.random_bool(0.5);
            let mut inputs = vec![uniform(r, &[n, di], -1.0, 1.0), uniform(r, &[d, di], -1.0, 1.0)];
            if bias {
                inputs.push(uniform(r, &[d], -1.0, 1.0));
            }
            case(inputs, |t, v| t.linear(v[0], v[1], v.get(2).copied()))
        }),
        ("avg_pool2", |r| {
            let s = [dims(r, 1, 2), dims(r, 1, 2), dims(r, 2, 5), dims(r, 2, 5)];
            case(vec![uniform(r, &s, -1.0, 1.0)], |t, v| t.avg_pool2(v[0]))
        }),
        ("max_over_time", |r| {
            // distinct values spaced far beyond the FD step so the argmax never flips
            let (b, tt, k) = (dims(r, 1, 2), dims(r, 2, 5), dims(r, 1, 4));
            let n = b * tt * k;
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            for i in (1..n).rev() {
                vals.swap(i, r.random_range(0..=i));
            }
            case(vec![Tensor::new(vec![b, tt, k], vals).unwrap()], |t, v| t.max_over_time(v[0]))
        }),
        ("concat_channels", |r| {
            let (b, h, w) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3));
            let (c1, c2) = (dims(r, 1, 3), dims(r, 1, 3));
            case(
                vec![uniform(r, &[b, c1, h, w], -1.0, 1.0), uniform(r, &[b, c2, h, w], -1.0, 1.0)],
                |t, v| t.concat_channels(v[0], v[1]),
            )
        }),
        ("crop2d", |r| {
            let (h, w) = (dims(r, 2, 5), dims(r, 2, 5));
            let (ch, cw) = (dims(r, 1, h), dims(r, 1, w));
            let (top, left) = (r.random_range(0..=h - ch), r.random_range(0..=w - cw));
            let s = [dims(r, 1, 2), dims(r, 1, 2), h, w];
            case(vec![uniform(r, &s, -1.0, 1.0)], move |t, v| {
                t.crop2d(v[0], top, left, ch, cw)
            })
        }),
        ("add_channel_bias", |r| {
            let (b, c) = (dims(r, 1, 2), dims(r, 1, 3));
            let (h, w) = (dims(r, 1, 3), dims(r, 1, 3));
            case(
                vec![uniform(r, &[b, c, h, w], -1.0, 1.0), uniform(r, &[b, c], -1.0, 1.0)],
                |t, v| t.add_channel_bias(v[0], v[1]),
            )
        }),
        ("time_major", |r| {
            let s = [dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)];
            case(vec![uniform(r, &s, -1.0, 1.0)], |t, v| t.time_major(v[0]))
        }),
        ("bce_loss", |r| {
            let s = [dims(r, 1, 3), dims(r, 1, 4)];
            let n: usize = s.iter().product();
            let target = Tensor::new(s.to_vec(), (0..n).map(|_| r.random_range(0..2) as f64).collect()).unwrap();
            case(vec![uniform(r, &s, 0.05, 0.95)], move |t, v| t.bce_loss(v[0], &target))
        }),
        ("mae_loss", |r| {
            let s = [dims(r, 1, 3), dims(r, 1, 4)];
            let est = uniform(r, &s, -1.0, 1.0);
            let gap = away_from_zero(r, &s);
            let target: Vec<f64> = est.data().iter().zip(gap.data()).map(|(a, g)| a + g).collect();
            case(vec![est, Tensor::new(s.to_vec(), target).unwrap()], |t, v| t.mae_loss(v[0], v[1]))
        }),
        ("conv2d_same", |r| {
            let (xs, ks) = conv_shapes(r);
            let inputs = vec![uniform(r, &xs, -1.0, 1.0), uniform(r, &ks, -1.0, 1.0), uniform(r, &[ks[0]], -1.0, 1.0)];
            case(inputs, |t, v| t.conv2d(v[0], v[1], Some(v[2]), Padding::Same))
        }),
        ("conv2d_valid", |r| {
            let (xs, ks) = conv_shapes(r);
            case(vec![uniform(r, &xs, -1.0, 1.0), uniform(r, &ks, -1.0, 1.0)], |t, v| {
                t.conv2d(v[0], v[1], None, Padding::Valid)
            })
        }),
        ("conv2d_strided", |r| {
            let s = dims(r, 1, 2);
            let k = s * dims(r, 1, 2);
            let (ci, co) = (dims(r, 1, 3), dims(r, 1, 3));
            let xs = [dims(r, 1, 2), ci, s * dims(r, 1, 3), s * dims(r, 1, 3)];
            let inputs = vec![uniform(r, &xs, -1.0, 1.0), uniform(r, &[co, ci, k, k], -1.0, 1.0), uniform(r, &[co], -1.0, 1.0)];
            case(inputs, move |t, v| t.conv2d_strided(v[0], v[1], Some(v[2]), s))
        }),
        ("conv_transpose2d", |r| {
            let s = dims(r, 1, 2);
            let k = s * dims(r, 1, 2);
            let (ci, co) = (dims(r, 1, 3), dims(r, 1, 3));
            let xs = [dims(r, 1, 2), ci, dims(r, 1, 3), dims(r, 1, 3)];
            let inputs = vec![uniform(r, &xs, -1.0, 1.0), uniform(r, &[ci, co, k, k], -1.0, 1.0), uniform(r, &[co], -1.0, 1.0)];
            case(inputs, move |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), s))
        }),
        ("batch_norm_train", |r| {
            let c = dims(r, 1, 3);
            let s = [dims(r, 2, 3), c, dims(r, 1, 3), dims(r, 1, 3)];
            let inputs = vec![uniform(r, &s, -1.0, 1.0), uniform(r, &[c], 0.5, 1.5), uniform(r, &[c], -0.5, 0.5)];
            case(inputs, move |t, v| t.batch_norm(v[0], v[1], v[2], &mut RunningStats::new(c), Mode::Train))
        }),
        ("batch_norm_eval", |r| {
            let c = dims(r, 1, 3);
            let s = [dims(r, 1, 3), c, dims(r, 1, 3), dims(r, 1, 3)];
            let mut stats = RunningStats::new(c);
            stats.mean = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
            stats.var = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
            let inputs = vec![uniform(r, &s, -1.0, 1.0), uniform(r, &[c], 0.5, 1.5), uniform(r, &[c], -0.5, 0.5)];
            case(inputs, move |t, v| t.batch_norm(v[0], v[1], v[2], &mut stats.clone(), Mode::Eval))
        }),
    ]
}

/// Runs every operation over `INSTANCES` random instances.
pub fn run_suite(seed: u64) -> Vec<OpReport> {
    let mut rng = Pcg64::seed_from_u64(seed);
    generators()
        .into_iter()
        .map(|(op, generate)| {
            let worst = (0..INSTANCES)
                .map(|_| {
                    let c = generate(&mut rng);
                    check(&c, rng.next_u64())
                })
                .fold(0.0, f64::max);
            OpReport {
                op,
                instances: INSTANCES,
                worst,
            }
        })
        .collect()
}

/// Worst relative violation of `<conv(x), y> = <x, convT(y)>` over random shapes.
pub fn adjoint_worst(seed: u64, instances: usize) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let s = dims(&mut rng, 1, 3);
        let k = if s == 1 { dims(&mut rng, 1, 3) } else { s * dims(&mut rng, 1, 2) };
        let (small, large) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
        let (b, h, w) = (dims(&mut rng, 1, 2), dims(&mut rng, 1, 6), dims(&mut rng, 1, 6));
        let kernel = uniform(&mut rng, &[small, large, k, k], -1.0, 1.0);
        let x = uniform(&mut rng, &[b, large, h * s, w * s], -1.0, 1.0);
        let y = uniform(&mut rng, &[b, small, h, w], -1.0, 1.0);
        let mut t = Tape::new();
        let (xv, yv, kv) = (t.constant(x.clone()), t.constant(y.clone()), t.constant(kernel));
        let cx = t.conv2d_strided(xv, kv, None, s).unwrap();
        let ty = t.conv_transpose2d(yv, kv, None, s).unwrap();
        let lhs: f64 = t.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(t.value(ty).data()).map(|(a, b)| a * b).sum();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12));
    }
    worst
}
