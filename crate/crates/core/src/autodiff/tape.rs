use super::conv::{self, ConvGeom};
use super::norm;
use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Recorded operation together with whatever its backward rule needs.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AvgPool2(Var),
    MaxOverTime {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatChannels(Var, Var),
    Crop2d {
        x: Var,
        top: usize,
        left: usize,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    TimeMajor(Var),
    Bce {
        pred: Var,
        target: Vec<f64>,
        batch: usize,
    },
    Mae {
        est: Var,
        target: Var,
    },
}

/// Reverse-mode differentiation tape.
///
/// Operations are appended in evaluation order, so node ids are a topological
/// order by construction. A tape supports exactly one [`Tape::backward`]; the
/// training loops build a fresh tape per step.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) values: Vec<Tensor>,
    pub(crate) grads: Vec<Option<Vec<f64>>>,
    pub(crate) requires: Vec<bool>,
    pub(crate) ops: Vec<Op>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Records an input. `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires_grad);
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires = inputs.iter().any(|v| self.requires[v.0]);
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Propagates d(loss)/d(node) to every `requires_grad` ancestor of `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.backward_done = true;
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        let Tape {
            values,
            grads,
            requires,
            ops,
            ..
        } = self;
        for i in (0..=loss.0).rev() {
            if !requires[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut sink = GradSink {
                values,
                grads,
                requires,
            };
            backprop_node(&ops[i], &values[i], &g, &mut sink);
            grads[i] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "gradient".into(),
                        detail: format!("node {i} with shape {:?}", values[i].shape()),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Mutable view of the gradient buffers for the inputs of the node being processed.
pub(crate) struct GradSink<'a> {
    pub values: &'a [Tensor],
    pub grads: &'a mut [Option<Vec<f64>>],
    pub requires: &'a [bool],
}

impl GradSink<'_> {
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn buf(&mut self, v: Var) -> &mut [f64] {
        let n = self.values[v.0].numel();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    pub fn add(&mut self, v: Var, contribution: impl IntoIterator<Item = f64>) {
        for (acc, c) in self.buf(v).iter_mut().zip(contribution) {
            *acc += c;
        }
    }
}

fn backprop_node(op: &Op, out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if sink.wants(v) {
                    sink.add(v, g.iter().copied());
                }
            }
        }
        Op::Mul(a, b) => {
            if sink.wants(*a) {
                let other = sink.value(*b).data().to_vec();
                sink.add(*a, g.iter().zip(&other).map(|(g, o)| g * o));
            }
            if sink.wants(*b) {
                let other = sink.value(*a).data().to_vec();
                sink.add(*b, g.iter().zip(&other).map(|(g, o)| g * o));
            }
        }
        Op::Scale(a, s) => {
            if sink.wants(*a) {
                sink.add(*a, g.iter().map(|g| g * s));
            }
        }
        Op::Sum(a) => {
            if sink.wants(*a) {
                let g0 = g[0];
                sink.add(*a, std::iter::repeat(g0));
            }
        }
        Op::Relu(a) => {
            if sink.wants(*a) {
                let grad: Vec<f64> = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(y, g)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                sink.add(*a, grad);
            }
        }
        Op::Sigmoid(a) => {
            if sink.wants(*a) {
                let grad: Vec<f64> = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(y, g)| g * y * (1.0 - y))
                    .collect();
                sink.add(*a, grad);
            }
        }
        Op::Reshape(a) => {
            if sink.wants(*a) {
                sink.add(*a, g.iter().copied());
            }
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            d_in,
            d_out,
        } => ops::linear_backward(*x, *w, *b, *rows, *d_in, *d_out, g, sink),
        Op::Conv { x, w, b, geom } => conv::conv_backward(*x, *w, *b, geom, g, sink),
        Op::ConvTranspose { x, w, b, geom } => {
            conv::conv_transpose_backward(*x, *w, *b, geom, g, sink)
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => norm::train_backward(*x, *gamma, *beta, xhat, inv_std, g, sink),
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => norm::eval_backward(*x, *gamma, *beta, mean, inv_std, g, sink),
        Op::AvgPool2(x) => ops::avg_pool2_backward(*x, out.shape(), g, sink),
        Op::MaxOverTime { x, argmax } => {
            if sink.wants(*x) {
                let buf = sink.buf(*x);
                for (gi, &idx) in g.iter().zip(argmax) {
                    buf[idx] += gi;
                }
            }
        }
        Op::ConcatChannels(a, b) => ops::concat_backward(*a, *b, g, sink),
        Op::Crop2d { x, top, left } => ops::crop_backward(*x, *top, *left, out.shape(), g, sink),
        Op::AddChannelBias { x, bias } => ops::channel_bias_backward(*x, *bias, g, sink),
        Op::TimeMajor(x) => ops::time_major_backward(*x, g, sink),
        Op::Bce {
            pred,
            target,
            batch,
        } => ops::bce_backward(*pred, target, *batch, g[0], sink),
        Op::Mae { est, target } => ops::mae_backward(*est, *target, g[0], sink),
    }
}
