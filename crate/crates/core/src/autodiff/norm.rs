use super::tape::{GradSink, Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(Error::shape(format!(
            "batch_norm expects [batch, ch, H, W], got {shape:?}"
        ))),
    }
}

impl Tape {
    /// Batch normalization over `(batch, H, W)` per channel.
    ///
    /// Train mode normalizes with the biased batch variance and folds the batch
    /// statistics into `stats` (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let (batch, ch, pix) = layout(self.shape(x))?;
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(p) != [ch] {
                return Err(Error::shape(format!(
                    "batch_norm {name} has shape {:?}, expected [{ch}]",
                    self.shape(p)
                )));
            }
        }
        if stats.mean.len() != ch || stats.var.len() != ch {
            return Err(Error::shape("batch_norm running stats do not match channel count"));
        }
        let count = batch * pix;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];

        match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::invalid(
                        "batch_norm in train mode needs at least two values per channel",
                    ));
                }
                let mut xhat = vec![0.0; xv.len()];
                let mut inv_std = vec![0.0; ch];
                for c in 0..ch {
                    let mut sum = 0.0;
                    for n in 0..batch {
                        let s = (n * ch + c) * pix;
                        sum += xv[s..s + pix].iter().sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0;
                    for n in 0..batch {
                        let s = (n * ch + c) * pix;
                        sq += xv[s..s + pix].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let var = sq / count as f64;
                    let inv = 1.0 / (var + BN_EPS).sqrt();
                    inv_std[c] = inv;
                    for n in 0..batch {
                        let s = (n * ch + c) * pix;
                        for i in s..s + pix {
                            let h = (xv[i] - mean) * inv;
                            xhat[i] = h;
                            out[i] = gv[c] * h + bv[c];
                        }
                    }
                    stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * mean;
                    let unbiased = sq / (count - 1) as f64;
                    stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * unbiased;
                }
                let t = Tensor::new(self.shape(x).to_vec(), out)?;
                Ok(self.push(
                    t,
                    Op::BatchNormTrain {
                        x,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                    },
                    &[x, gamma, beta],
                ))
            }
            Mode::Eval => {
                let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                for n in 0..batch {
                    for c in 0..ch {
                        let s = (n * ch + c) * pix;
                        for i in s..s + pix {
                            out[i] = gv[c] * (xv[i] - stats.mean[c]) * inv_std[c] + bv[c];
                        }
                    }
                }
                let t = Tensor::new(self.shape(x).to_vec(), out)?;
                Ok(self.push(
                    t,
                    Op::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        mean: stats.mean.clone(),
                        inv_std,
                    },
                    &[x, gamma, beta],
                ))
            }
        }
    }
}

pub(crate) fn train_backward(
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    inv_std: &[f64],
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let (batch, ch, pix) = layout(sink.value(x).shape()).expect("validated in forward");
    let count = (batch * pix) as f64;
    let mut sum_g = vec![0.0; ch];
    let mut sum_gx = vec![0.0; ch];
    for n in 0..batch {
        for c in 0..ch {
            let s = (n * ch + c) * pix;
            for i in s..s + pix {
                sum_g[c] += g[i];
                sum_gx[c] += g[i] * xhat[i];
            }
        }
    }
    if sink.wants(x) {
        let gam = sink.value(gamma).data().to_vec();
        let buf = sink.buf(x);
        for n in 0..batch {
            for c in 0..ch {
                let scale = gam[c] * inv_std[c] / count;
                let s = (n * ch + c) * pix;
                for i in s..s + pix {
                    buf[i] += scale * (count * g[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                }
            }
        }
    }
    if sink.wants(gamma) {
        sink.add(gamma, sum_gx);
    }
    if sink.wants(beta) {
        sink.add(beta, sum_g);
    }
}

pub(crate) fn eval_backward(
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[f64],
    inv_std: &[f64],
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let (batch, ch, pix) = layout(sink.value(x).shape()).expect("validated in forward");
    let gam = sink.value(gamma).data().to_vec();
    let mut sum_g = vec![0.0; ch];
    let mut sum_gx = vec![0.0; ch];
    {
        let xv = sink.value(x).data();
        for n in 0..batch {
            for c in 0..ch {
                let s = (n * ch + c) * pix;
                for i in s..s + pix {
                    sum_g[c] += g[i];
                    sum_gx[c] += g[i] * (xv[i] - mean[c]) * inv_std[c];
                }
            }
        }
    }
    if sink.wants(x) {
        let buf = sink.buf(x);
        for n in 0..batch {
            for c in 0..ch {
                let s = (n * ch + c) * pix;
                for i in s..s + pix {
                    buf[i] += g[i] * gam[c] * inv_std[c];
                }
            }
        }
    }
    if sink.wants(gamma) {
        sink.add(gamma, sum_gx);
    }
    if sink.wants(beta) {
        sink.add(beta, sum_g);
    }
}
