use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Checkpoint, Mode, ParamId, ParamSet, Padding, RunningStats, Tape, Tensor, Var};
use crate::dsp::StftParams;
use crate::error::{Error, Result};
use crate::sed::{load_params, ConditionVector};

/// Shape of the conditional U-Net and the spectrogram segment it operates on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub num_classes: usize,
    pub encoder_widths: Vec<usize>,
    /// Output widths of the decoder blocks, deepest first.
    pub decoder_widths: Vec<usize>,
    pub embed_dim: usize,
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    /// Samples per separation segment; longer inputs are cut into windows of this size.
    pub segment_samples: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            encoder_widths: vec![8, 16, 32, 64],
            decoder_widths: vec![64, 32, 16, 8],
            embed_dim: 32,
            sample_rate: 8000,
            window: 256,
            hop: 64,
            segment_samples: 8192,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("separator needs at least two classes".into()));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.len() != self.decoder_widths.len() {
            return Err(Error::Config(format!(
                "encoder widths {:?} and decoder widths {:?} must be non-empty and of equal depth",
                self.encoder_widths, self.decoder_widths
            )));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) || self.embed_dim == 0 {
            return Err(Error::Config("separator widths and embedding size must be positive".into()));
        }
        if self.segment_samples < self.window {
            return Err(Error::Config("segment shorter than one STFT window".into()));
        }
        self.stft().validate()
    }

    pub fn depth(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn stft(&self) -> StftParams {
        StftParams::hann(self.window, self.hop)
    }

    pub fn frames(&self) -> usize {
        self.stft().frames(self.segment_samples)
    }

    pub fn bins(&self) -> usize {
        self.stft().bins()
    }

    /// Network extents after zero padding to a multiple of `2^depth`.
    pub fn padded(&self) -> (usize, usize) {
        let m = 1 << self.depth();
        (self.frames().div_ceil(m) * m, self.bins().div_ceil(m) * m)
    }

    /// Leading padding rows and columns; the remainder goes after.
    pub fn pad_offsets(&self) -> (usize, usize) {
        let (ph, pw) = self.padded();
        ((ph - self.frames()) / 2, (pw - self.bins()) / 2)
    }

    fn write(&self, ck: &mut Checkpoint) -> Result<()> {
        let list = |v: &[usize]| Tensor::from_vec(v.iter().map(|&x| x as f64).collect());
        ck.insert_scalar("config.num_classes", self.num_classes as f64)?;
        ck.insert("config.encoder_widths", list(&self.encoder_widths))?;
        ck.insert("config.decoder_widths", list(&self.decoder_widths))?;
        ck.insert_scalar("config.embed_dim", self.embed_dim as f64)?;
        ck.insert_scalar("config.sample_rate", self.sample_rate as f64)?;
        ck.insert_scalar("config.window", self.window as f64)?;
        ck.insert_scalar("config.hop", self.hop as f64)?;
        ck.insert_scalar("config.segment_samples", self.segment_samples as f64)?;
        Ok(())
    }

    fn read(ck: &Checkpoint) -> Result<Self> {
        let u = |n: &str| ck.scalar(n).map(|v| v as usize);
        let list = |n: &str| ck.require(n).map(|t| t.data().iter().map(|&v| v as usize).collect());
        Ok(Self {
            num_classes: u("config.num_classes")?,
            encoder_widths: list("config.encoder_widths")?,
            decoder_widths: list("config.decoder_widths")?,
            embed_dim: u("config.embed_dim")?,
            sample_rate: ck.scalar("config.sample_rate")? as u32,
            window: u("config.window")?,
            hop: u("config.hop")?,
            segment_samples: u("config.segment_samples")?,
        })
    }
}

/// Conv, batch norm, ReLU, then the condition bias.
#[derive(Clone, Debug)]
struct Layer {
    kernel: ParamId,
    gamma: ParamId,
    beta: ParamId,
    cond: ParamId,
    stats: usize,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    up: Layer,
    conv: Layer,
}

/// Conditional U-Net regressing a magnitude spectrogram. The encoder sees `ln(1 + |X|)`;
/// the output layer sees `|X|` itself. Each encoder block holds two
/// 3×3 conv layers and ends in 2×2 average pooling; each decoder block upsamples with a
/// stride-2 transposed conv, concatenates the matching encoder output and applies a
/// 3×3 conv. After every ReLU a learned projection of the condition embedding is added
/// per channel. A final 1×1 conv over the last decoder features and the input
/// magnitude, followed by ReLU, gives a non-negative output.
#[derive(Clone, Debug)]
pub struct SeparatorModel {
    pub config: UNetConfig,
    pub params: ParamSet,
    pub stats: Vec<RunningStats>,
    embed_w: ParamId,
    embed_b: ParamId,
    encoder: Vec<[Layer; 2]>,
    decoder: Vec<DecoderBlock>,
    out_w: ParamId,
    out_b: ParamId,
}

struct Builder<'a> {
    params: &'a mut ParamSet,
    stats: &'a mut Vec<RunningStats>,
    rng: &'a mut Pcg64,
    embed: usize,
}

impl Builder<'_> {
    fn layer(&mut self, name: &str, kernel_shape: [usize; 4], fan_in: usize, out: usize) -> Result<Layer> {
        let l = Layer {
            kernel: self.params.add_uniform(format!("{name}.weight"), &kernel_shape, fan_in, self.rng)?,
            gamma: self.params.add(format!("{name}.bn.gamma"), Tensor::full(&[out], 1.0))?,
            beta: self.params.add(format!("{name}.bn.beta"), Tensor::zeros(&[out]))?,
            cond: self.params.add_uniform(format!("{name}.cond"), &[out, self.embed], self.embed, self.rng)?,
            stats: self.stats.len(),
        };
        self.stats.push(RunningStats::new(out));
        Ok(l)
    }
}

impl SeparatorModel {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Pcg64::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut stats = Vec::new();
        let (k, e) = (config.num_classes, config.embed_dim);
        let embed_w = params.add_uniform("cond.embed.weight", &[e, k], k, &mut rng)?;
        let embed_b = params.add("cond.embed.bias", Tensor::zeros(&[e]))?;
        let mut b = Builder {
            params: &mut params,
            stats: &mut stats,
            rng: &mut rng,
            embed: e,
        };
        let mut encoder = Vec::new();
        let mut c = 1;
        for (i, &w) in config.encoder_widths.iter().enumerate() {
            let l0 = b.layer(&format!("enc{i}.conv0"), [w, c, 3, 3], c * 9, w)?;
            let l1 = b.layer(&format!("enc{i}.conv1"), [w, w, 3, 3], w * 9, w)?;
            encoder.push([l0, l1]);
            c = w;
        }
        let mut decoder = Vec::new();
        for (j, &w) in config.decoder_widths.iter().enumerate() {
            let skip = config.encoder_widths[config.depth() - 1 - j];
            let up = b.layer(&format!("dec{j}.up"), [c, skip, 2, 2], c, skip)?;
            let conv = b.layer(&format!("dec{j}.conv"), [w, 2 * skip, 3, 3], 2 * skip * 9, w)?;
            decoder.push(DecoderBlock { up, conv });
            c = w;
        }
        let out_w = params.add_uniform("out.weight", &[1, c + 1, 1, 1], c + 1, &mut rng)?;
        // the raw-magnitude channel starts as a pass-through so the output ReLU is live at init
        params.get_mut(out_w).value.data_mut()[c] = 1.0;
        let out_b = params.add("out.bias", Tensor::zeros(&[1]))?;
        Ok(Self {
            config,
            params,
            stats,
            embed_w,
            embed_b,
            encoder,
            decoder,
            out_w,
            out_b,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Parameter ids of every decoder conv kernel (transposed and regular).
    pub fn decoder_kernel_ids(&self) -> Vec<ParamId> {
        self.decoder.iter().flat_map(|d| [d.up.kernel, d.conv.kernel]).collect()
    }

    /// Records the network on `tape`. `input: [B, 1, frames, bins]`, `condition: [B, K]`;
    /// returns `[B, 1, frames, bins]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: Var,
        condition: Var,
        mode: Mode,
        stats: &mut [RunningStats],
    ) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(input).to_vec();
        let [batch, 1, frames, bins] = shape[..] else {
            return Err(Error::shape(format!("separator input must be [B, 1, frames, bins], got {shape:?}")));
        };
        if (frames, bins) != (cfg.frames(), cfg.bins()) {
            return Err(Error::shape(format!(
                "separator input is {frames}x{bins}, model expects {}x{}",
                cfg.frames(),
                cfg.bins()
            )));
        }
        if tape.shape(condition) != [batch, cfg.num_classes] {
            return Err(Error::shape(format!(
                "condition has shape {:?}, expected [{batch}, {}]",
                tape.shape(condition),
                cfg.num_classes
            )));
        }
        if stats.len() != 2 * (self.encoder.len() + self.decoder.len()) {
            return Err(Error::shape("running stats do not match the model"));
        }
        let (ph, pw) = cfg.padded();
        let (top, left) = cfg.pad_offsets();
        let x = pad(tape, input, ph, pw, top, left)?;
        let compressed = {
            let v = tape.value(x);
            let data = v.data().iter().map(|m| m.ln_1p()).collect();
            tape.constant(Tensor::new(v.shape().to_vec(), data)?)
        };
        let emb = tape.linear(condition, bound.var(self.embed_w), Some(bound.var(self.embed_b)))?;

        let mut apply = |tape: &mut Tape, l: &Layer, x: Var, transposed: bool| -> Result<Var> {
            let y = if transposed {
                tape.conv_transpose2d(x, bound.var(l.kernel), None, 2)?
            } else {
                tape.conv2d(x, bound.var(l.kernel), None, Padding::Same)?
            };
            let y = tape.batch_norm(y, bound.var(l.gamma), bound.var(l.beta), &mut stats[l.stats], mode)?;
            let y = tape.relu(y);
            let bias = tape.linear(emb, bound.var(l.cond), None)?;
            tape.add_channel_bias(y, bias)
        };

        let mut skips = Vec::new();
        let mut h = compressed;
        for [l0, l1] in &self.encoder {
            h = apply(tape, l0, h, false)?;
            h = apply(tape, l1, h, false)?;
            skips.push(h);
            h = tape.avg_pool2(h)?;
        }
        for d in &self.decoder {
            let up = apply(tape, &d.up, h, true)?;
            let skip = skips.pop().expect("one skip per decoder block");
            let cat = tape.concat_channels(up, skip)?;
            h = apply(tape, &d.conv, cat, false)?;
        }
        let h = tape.concat_channels(h, x)?;
        let y = tape.conv2d(h, bound.var(self.out_w), Some(bound.var(self.out_b)), Padding::Same)?;
        let y = tape.relu(y);
        tape.crop2d(y, top, left, frames, bins)
    }

    /// Eval-mode inference on `magnitudes` (each `frames × bins`) with one condition each.
    pub fn infer(&self, magnitudes: &[&[f64]], conditions: &[&ConditionVector]) -> Result<Vec<Vec<f64>>> {
        if magnitudes.len() != conditions.len() || magnitudes.is_empty() {
            return Err(Error::invalid("need one condition per input and at least one input"));
        }
        let (f, b, k) = (self.config.frames(), self.config.bins(), self.config.num_classes);
        for c in conditions {
            if c.len() != k {
                return Err(Error::invalid(format!("condition has {} entries, model has {k} classes", c.len())));
            }
        }
        let x = Tensor::new(vec![magnitudes.len(), 1, f, b], magnitudes.concat())?;
        let c = Tensor::new(
            vec![conditions.len(), k],
            conditions.iter().flat_map(|c| c.as_slice().iter().copied()).collect(),
        )?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let (xv, cv) = (tape.constant(x), tape.constant(c));
        let mut stats = self.stats.clone();
        let y = self.forward(&mut tape, &bound, xv, cv, Mode::Eval, &mut stats)?;
        Ok(tape.value(y).data().chunks(f * b).map(<[f64]>::to_vec).collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.config.write(&mut ck)?;
        for p in self.params.iter() {
            ck.insert(p.name.clone(), p.value.clone())?;
        }
        for (i, s) in self.stats.iter().enumerate() {
            ck.insert(format!("stats{i}.running_mean"), Tensor::from_vec(s.mean.clone()))?;
            ck.insert(format!("stats{i}.running_var"), Tensor::from_vec(s.var.clone()))?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(UNetConfig::read(ck)?, 0)?;
        load_params(&mut m.params, ck)?;
        for (i, s) in m.stats.iter_mut().enumerate() {
            s.mean = ck.require(&format!("stats{i}.running_mean"))?.data().to_vec();
            s.var = ck.require(&format!("stats{i}.running_var"))?.data().to_vec();
        }
        Ok(m)
    }
}

/// Zero-pads `[B, 1, h, w]` to `[B, 1, ph, pw]` with the original at `(top, left)`. The
/// input is never a trainable quantity, so the padded copy is a constant.
fn pad(tape: &mut Tape, x: Var, ph: usize, pw: usize, top: usize, left: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    if (h, w) == (ph, pw) {
        return Ok(x);
    }
    let xv = tape.value(x).data();
    let mut out = vec![0.0; b * ph * pw];
    for n in 0..b {
        for r in 0..h {
            let src = (n * h + r) * w;
            let dst = (n * ph + top + r) * pw + left;
            out[dst..dst + w].copy_from_slice(&xv[src..src + w]);
        }
    }
    Ok(tape.constant(Tensor::new(vec![b, 1, ph, pw], out)?))
}
