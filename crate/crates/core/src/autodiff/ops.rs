use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::tape::{GradSink, Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Clamp applied to predictions before the logarithm in [`Tape::bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

fn rank4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(format!("{what} expects rank 4, got {shape:?}"))),
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Affine map over the last axis: `x[..., d_in] · wᵀ + b`, `w: [d_out, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d_in = *xs.last().expect("tensor rank >= 1");
        let (d_out, wd_in) = match *self.shape(w) {
            [o, i] => (o, i),
            _ => return Err(Error::shape(format!("linear weight must be [d_out, d_in], got {:?}", self.shape(w)))),
        };
        if wd_in != d_in {
            return Err(Error::shape(format!(
                "linear: input last axis {d_in} does not match weight {:?}",
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::shape(format!("linear bias {:?}, expected [{d_out}]", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / d_in;
        let mut out = vec![0.0; rows * d_out];
        gemm_nt(rows, d_in, d_out, self.value(x).data(), self.value(w).data(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                for (o, bb) in out[r * d_out..(r + 1) * d_out].iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = d_out;
        let t = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Linear { x, w, b, rows, d_in, d_out }, &inputs))
    }

    /// 2×2 average pooling with stride 2; a trailing odd row/column is dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = rank4(self.shape(x), "avg_pool2")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape(format!("avg_pool2: input {h}x{w} too small")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for i in 0..ho {
                let r0 = &src[2 * i * w..2 * i * w + w];
                let r1 = &src[(2 * i + 1) * w..(2 * i + 1) * w + w];
                for j in 0..wo {
                    dst[i * wo + j] = 0.25 * (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]);
                }
            }
        }
        let t = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.push(t, Op::AvgPool2(x), &[x]))
    }

    /// Per-class maximum over the time axis: `[..., T, K] -> [..., K]`.
    /// The backward pass routes gradient to the first maximal step.
    pub fn max_over_time(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("max_over_time needs [.., T, K], got {shape:?}")));
        }
        let k = shape[shape.len() - 1];
        let t = shape[shape.len() - 2];
        if t == 0 {
            return Err(Error::shape("max_over_time: empty time axis"));
        }
        let outer: usize = shape[..shape.len() - 2].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * k];
        let mut argmax = vec![0; outer * k];
        for o in 0..outer {
            for c in 0..k {
                let mut best = o * t * k + c;
                for s in 1..t {
                    let idx = (o * t + s) * k + c;
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                out[o * k + c] = xv[best];
                argmax[o * k + c] = best;
            }
        }
        let mut oshape = shape[..shape.len() - 2].to_vec();
        oshape.push(k);
        let tt = Tensor::new(oshape, out)?;
        Ok(self.push(tt, Op::MaxOverTime { x, argmax }, &[x]))
    }

    /// Concatenates `[B, C1, H, W]` and `[B, C2, H, W]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = rank4(self.shape(a), "concat_channels")?;
        let [bb, cb, hb, wb] = rank4(self.shape(b), "concat_channels")?;
        if ba != bb || ha != hb || wa != wb {
            return Err(Error::shape(format!(
                "concat_channels: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let plane = ha * wa;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for n in 0..ba {
            out.extend_from_slice(&av[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&bv[n * cb * plane..(n + 1) * cb * plane]);
        }
        let t = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        Ok(self.push(t, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Spatial crop of `[B, C, H, W]` to `[B, C, h, w]` starting at `(top, left)`.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let [b, c, hi, wi] = rank4(self.shape(x), "crop2d")?;
        if top + h > hi || left + w > wi || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "crop2d: window {h}x{w} at ({top},{left}) outside {hi}x{wi}"
            )));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * h * w);
        for p in 0..b * c {
            for r in 0..h {
                let s = p * hi * wi + (top + r) * wi + left;
                out.extend_from_slice(&xv[s..s + w]);
            }
        }
        let t = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(t, Op::Crop2d { x, top, left }, &[x]))
    }

    /// Adds a per-(item, channel) offset: `x[B, C, H, W] + bias[B, C]` broadcast over space.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [b, c, h, w] = rank4(self.shape(x), "add_channel_bias")?;
        if self.shape(bias) != [b, c] {
            return Err(Error::shape(format!(
                "add_channel_bias: bias {:?}, expected [{b}, {c}]",
                self.shape(bias)
            )));
        }
        let plane = h * w;
        let bv = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (p, &off) in bv.iter().enumerate() {
            for v in &mut out[p * plane..(p + 1) * plane] {
                *v += off;
            }
        }
        let t = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(t, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    /// `[B, C, T, F] -> [B, T, C * F]`: every time step becomes one feature row.
    pub fn time_major(&mut self, x: Var) -> Result<Var> {
        let [b, c, t, f] = rank4(self.shape(x), "time_major")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for n in 0..b {
            for ch in 0..c {
                for s in 0..t {
                    let src = ((n * c + ch) * t + s) * f;
                    let dst = (n * t + s) * c * f + ch * f;
                    out[dst..dst + f].copy_from_slice(&xv[src..src + f]);
                }
            }
        }
        let tt = Tensor::new(vec![b, t, c * f], out)?;
        Ok(self.push(tt, Op::TimeMajor(x), &[x]))
    }

    /// Binary cross-entropy `-Σ_k [y ln ŷ + (1-y) ln(1-ŷ)]` over the last axis,
    /// averaged over any leading axes. Predictions are clamped to `[ε, 1-ε]`.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(format!(
                "bce_loss: prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        if let Some(bad) = target.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid(format!("bce_loss target must be 0 or 1, found {bad}")));
        }
        let k = *target.shape().last().expect("rank >= 1");
        let batch = target.numel() / k;
        let mut loss = 0.0;
        for (&p, &y) in self.value(pred).data().iter().zip(target.data()) {
            let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        }
        let t = Tensor::scalar(loss / batch as f64);
        Ok(self.push(
            t,
            Op::Bce {
                pred,
                target: target.data().to_vec(),
                batch,
            },
            &[pred],
        ))
    }

    /// Mean absolute error. The subgradient at exact equality is 0.
    pub fn mae_loss(&mut self, est: Var, target: Var) -> Result<Var> {
        same_shape(self, est, target, "mae_loss")?;
        let n = self.value(est).numel() as f64;
        let s: f64 = self
            .value(est)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mae { est, target }, &[est, target]))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: Var,
    w: Var,
    b: Option<Var>,
    rows: usize,
    d_in: usize,
    d_out: usize,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    if sink.wants(x) {
        let mut dx = vec![0.0; rows * d_in];
        gemm_nn(rows, d_out, d_in, g, sink.value(w).data(), &mut dx);
        sink.add(x, dx);
    }
    if sink.wants(w) {
        let mut dw = vec![0.0; d_out * d_in];
        gemm_tn(d_out, rows, d_in, g, sink.value(x).data(), &mut dw);
        sink.add(w, dw);
    }
    if let Some(b) = b {
        if sink.wants(b) {
            let buf = sink.buf(b);
            for r in 0..rows {
                for (acc, gv) in buf.iter_mut().zip(&g[r * d_out..(r + 1) * d_out]) {
                    *acc += gv;
                }
            }
        }
    }
}

pub(crate) fn avg_pool2_backward(x: Var, out_shape: &[usize], g: &[f64], sink: &mut GradSink<'_>) {
    if !sink.wants(x) {
        return;
    }
    let [_, _, h, w] = rank4(sink.value(x).shape(), "avg_pool2").expect("validated");
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let planes = out_shape[0] * out_shape[1];
    let buf = sink.buf(x);
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                let gv = 0.25 * g[p * ho * wo + i * wo + j];
                let base = p * h * w;
                buf[base + 2 * i * w + 2 * j] += gv;
                buf[base + 2 * i * w + 2 * j + 1] += gv;
                buf[base + (2 * i + 1) * w + 2 * j] += gv;
                buf[base + (2 * i + 1) * w + 2 * j + 1] += gv;
            }
        }
    }
}

pub(crate) fn concat_backward(a: Var, b: Var, g: &[f64], sink: &mut GradSink<'_>) {
    let [batch, ca, h, w] = rank4(sink.value(a).shape(), "concat").expect("validated");
    let cb = sink.value(b).shape()[1];
    let plane = h * w;
    let total = (ca + cb) * plane;
    if sink.wants(a) {
        let buf = sink.buf(a);
        for n in 0..batch {
            for (acc, gv) in buf[n * ca * plane..(n + 1) * ca * plane]
                .iter_mut()
                .zip(&g[n * total..n * total + ca * plane])
            {
                *acc += gv;
            }
        }
    }
    if sink.wants(b) {
        let buf = sink.buf(b);
        for n in 0..batch {
            for (acc, gv) in buf[n * cb * plane..(n + 1) * cb * plane]
                .iter_mut()
                .zip(&g[n * total + ca * plane..(n + 1) * total])
            {
                *acc += gv;
            }
        }
    }
}

pub(crate) fn crop_backward(x: Var, top: usize, left: usize, out_shape: &[usize], g: &[f64], sink: &mut GradSink<'_>) {
    if !sink.wants(x) {
        return;
    }
    let [_, _, hi, wi] = rank4(sink.value(x).shape(), "crop").expect("validated");
    let (planes, h, w) = (out_shape[0] * out_shape[1], out_shape[2], out_shape[3]);
    let buf = sink.buf(x);
    for p in 0..planes {
        for r in 0..h {
            let d = p * hi * wi + (top + r) * wi + left;
            let s = (p * h + r) * w;
            for (acc, gv) in buf[d..d + w].iter_mut().zip(&g[s..s + w]) {
                *acc += gv;
            }
        }
    }
}

pub(crate) fn channel_bias_backward(x: Var, bias: Var, g: &[f64], sink: &mut GradSink<'_>) {
    if sink.wants(x) {
        sink.add(x, g.iter().copied());
    }
    if sink.wants(bias) {
        let n = sink.value(bias).numel();
        let plane = g.len() / n;
        let buf = sink.buf(bias);
        for (p, acc) in buf.iter_mut().enumerate() {
            *acc += g[p * plane..(p + 1) * plane].iter().sum::<f64>();
        }
    }
}

pub(crate) fn time_major_backward(x: Var, g: &[f64], sink: &mut GradSink<'_>) {
    if !sink.wants(x) {
        return;
    }
    let [b, c, t, f] = rank4(sink.value(x).shape(), "time_major").expect("validated");
    let buf = sink.buf(x);
    for n in 0..b {
        for ch in 0..c {
            for s in 0..t {
                let dst = ((n * c + ch) * t + s) * f;
                let src = (n * t + s) * c * f + ch * f;
                for (acc, gv) in buf[dst..dst + f].iter_mut().zip(&g[src..src + f]) {
                    *acc += gv;
                }
            }
        }
    }
}

pub(crate) fn bce_backward(pred: Var, target: &[f64], batch: usize, g0: f64, sink: &mut GradSink<'_>) {
    if !sink.wants(pred) {
        return;
    }
    let scale = g0 / batch as f64;
    let grads: Vec<f64> = sink
        .value(pred)
        .data()
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                0.0
            } else {
                scale * (p - y) / (p * (1.0 - p))
            }
        })
        .collect();
    sink.add(pred, grads);
}

pub(crate) fn mae_backward(est: Var, target: Var, g0: f64, sink: &mut GradSink<'_>) {
    let n = sink.value(est).numel() as f64;
    let signs: Vec<f64> = sink
        .value(est)
        .data()
        .iter()
        .zip(sink.value(target).data())
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                g0 / n
            } else if d < 0.0 {
                -g0 / n
            } else {
                0.0
            }
        })
        .collect();
    if sink.wants(target) {
        sink.add(target, signs.iter().map(|s| -s));
    }
    if sink.wants(est) {
        sink.add(est, signs);
    }
}
