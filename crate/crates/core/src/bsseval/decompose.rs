use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative diagonal loading applied to every Gram matrix.
pub const GRAM_REGULARIZATION: f64 = 1e-10;
/// Error energies are floored at this fraction of the target energy.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;
/// Metric value reported when the target component vanishes.
pub const FLOOR_DB: f64 = -120.0;
pub const DEFAULT_TAPS: usize = 32;

/// Split of an estimate into target, interference and artifact parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
    pub taps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

/// `Σ_{t ≥ max(d, e)} a[t - d] · b[t - e]`, the inner product of `a` delayed by `d` and
/// `b` delayed by `e` with both truncated to the signal length.
fn delayed_dot(full: &[f64], a: &[f64], d: usize, b: &[f64], e: usize) -> f64 {
    // `full[δ]` holds Σ_{s ≤ n-1-δ} x[s + δ] y[s] for the ordered pair with δ ≥ 0.
    let n = a.len();
    let (x, y, dx, dy) = if e >= d { (a, b, d, e) } else { (b, a, e, d) };
    let lag = dy - dx;
    let mut v = full[lag];
    for s in (n - dy)..(n - lag) {
        v -= x[s + lag] * y[s];
    }
    v
}

/// `Σ_{s ≤ n-1-δ} x[s + δ] y[s]` for `δ < taps`.
fn correlations(x: &[f64], y: &[f64], taps: usize) -> Vec<f64> {
    let n = x.len();
    (0..taps)
        .map(|lag| if lag >= n { 0.0 } else { crate::autodiff::dot(&x[lag..], &y[..n - lag]) })
        .collect()
}

/// Lower Cholesky factor of the row-major `n × n` matrix `g`, in place.
fn cholesky(g: &mut [f64], n: usize) -> Result<()> {
    let mut min_pivot = f64::INFINITY;
    let mut max_pivot: f64 = 0.0;
    for j in 0..n {
        let mut d = g[j * n + j];
        for k in 0..j {
            d -= g[j * n + k] * g[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Singular {
                rcond: if max_pivot > 0.0 { min_pivot.min(d.max(0.0)) / max_pivot } else { 0.0 },
                detail: format!("Gram matrix not positive definite at column {j} of {n}"),
            });
        }
        min_pivot = min_pivot.min(d);
        max_pivot = max_pivot.max(d);
        let l = d.sqrt();
        g[j * n + j] = l;
        for i in j + 1..n {
            let mut v = g[i * n + j];
            for k in 0..j {
                v -= g[i * n + k] * g[j * n + k];
            }
            g[i * n + j] = v / l;
        }
    }
    let rcond = min_pivot / max_pivot;
    if rcond < f64::EPSILON {
        return Err(Error::Singular {
            rcond,
            detail: "references are numerically dependent even after regularization".into(),
        });
    }
    Ok(())
}

fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * n + k] * b[k];
        }
        b[i] = v / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= l[k * n + i] * b[k];
        }
        b[i] = v / l[i * n + i];
    }
}

/// Least-squares projection of `estimate` onto the span of `taps` delayed copies of the
/// chosen references. Returns the filter coefficients, grouped by reference.
fn project(estimate: &[f64], refs: &[&[f64]], taps: usize, cross: &dyn Fn(usize, usize) -> Vec<f64>) -> Result<Vec<f64>> {
    let m = refs.len() * taps;
    let mut g = vec![0.0; m * m];
    for (i, ri) in refs.iter().enumerate() {
        for (j, rj) in refs.iter().enumerate().skip(i) {
            let fij = cross(i, j);
            let fji = cross(j, i);
            for d in 0..taps {
                for e in 0..taps {
                    let full = if e >= d { &fij } else { &fji };
                    let v = delayed_dot(full, ri, d, rj, e);
                    g[(i * taps + d) * m + j * taps + e] = v;
                    g[(j * taps + e) * m + i * taps + d] = v;
                }
            }
        }
    }
    let mean_diag = (0..m).map(|i| g[i * m + i]).sum::<f64>() / m as f64;
    if !(mean_diag > 0.0) {
        return Err(Error::Singular {
            rcond: 0.0,
            detail: "all references are silent".into(),
        });
    }
    for i in 0..m {
        g[i * m + i] += GRAM_REGULARIZATION * mean_diag;
    }
    let mut rhs: Vec<f64> = refs
        .iter()
        .flat_map(|r| correlations(estimate, r, taps))
        .collect();
    cholesky(&mut g, m)?;
    cholesky_solve(&g, m, &mut rhs);
    Ok(rhs)
}

fn synthesize(refs: &[&[f64]], coef: &[f64], taps: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (r, c) in refs.iter().zip(coef.chunks(taps)) {
        for (d, &a) in c.iter().enumerate() {
            for t in d..n {
                out[t] += a * r[t - d];
            }
        }
    }
    out
}

/// Decomposes `estimate` against `references`, treating `references[target]` as the
/// source being estimated.
pub fn decompose(estimate: &[f64], references: &[&[f64]], target: usize, taps: usize) -> Result<Decomposition> {
    let n = estimate.len();
    if taps == 0 {
        return Err(Error::invalid("filter length must be at least 1"));
    }
    if references.is_empty() || target >= references.len() {
        return Err(Error::invalid(format!(
            "target index {target} out of range for {} references",
            references.len()
        )));
    }
    if n == 0 || references.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("estimate and references need equal, non-zero length"));
    }
    if estimate.iter().chain(references.iter().flat_map(|r| r.iter())).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "bss decomposition input".into(),
            detail: "estimate or reference contains NaN or infinity".into(),
        });
    }
    let taps = taps.min(n);
    let corr: Vec<Vec<Vec<f64>>> = references
        .iter()
        .map(|a| references.iter().map(|b| correlations(a, b, taps)).collect())
        .collect();
    let tref = [references[target]];
    let target_cross = |_: usize, _: usize| corr[target][target].clone();
    let a = project(estimate, &tref, taps, &target_cross)?;
    let s_target = synthesize(&tref, &a, taps, n);

    let mut ordered: Vec<&[f64]> = vec![references[target]];
    let mut index = vec![target];
    for (i, r) in references.iter().enumerate() {
        if i != target {
            ordered.push(r);
            index.push(i);
        }
    }
    let all_cross = |i: usize, j: usize| corr[index[i]][index[j]].clone();
    let b = project(estimate, &ordered, taps, &all_cross)?;
    let p_all = synthesize(&ordered, &b, taps, n);
    let e_interf = p_all.iter().zip(&s_target).map(|(p, s)| p - s).collect();
    let e_artif = estimate.iter().zip(&p_all).map(|(e, p)| e - p).collect();
    Ok(Decomposition {
        s_target,
        e_interf,
        e_artif,
        taps,
    })
}

fn energy(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn ratio_db(num: f64, den: f64, floor: f64) -> f64 {
    10.0 * (num / den.max(floor)).log10()
}

impl Decomposition {
    pub fn metrics(&self) -> Metrics {
        let st = energy(&self.s_target);
        if !(st > 0.0) {
            return Metrics {
                sdr: FLOOR_DB,
                sir: FLOOR_DB,
                sar: FLOOR_DB,
            };
        }
        let floor = DENOMINATOR_FLOOR * st;
        let distortion: Vec<f64> = self.e_interf.iter().zip(&self.e_artif).map(|(a, b)| a + b).collect();
        let signal: Vec<f64> = self.s_target.iter().zip(&self.e_interf).map(|(a, b)| a + b).collect();
        Metrics {
            sdr: ratio_db(st, energy(&distortion), floor),
            sir: ratio_db(st, energy(&self.e_interf), floor),
            sar: ratio_db(energy(&signal), energy(&self.e_artif), floor),
        }
    }
}

/// SDR, SIR and SAR of `estimate` for `references[target]`.
pub fn bss_eval(estimate: &[f64], references: &[&[f64]], target: usize, taps: usize) -> Result<Metrics> {
    Ok(decompose(estimate, references, target, taps)?.metrics())
}
