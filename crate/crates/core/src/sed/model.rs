use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Checkpoint, Mode, ParamId, ParamSet, Padding, RunningStats, Tape, Tensor, Var};
use crate::dsp::{log_mel, MelFilterbank, Waveform};
use crate::error::{Error, Result};

/// Shape of the detection network and its feature front end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SedArch {
    pub num_classes: usize,
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub mel_bins: usize,
    /// Output channels of each conv block; every block halves time and frequency.
    pub widths: Vec<usize>,
}

impl Default for SedArch {
    fn default() -> Self {
        Self {
            num_classes: 8,
            sample_rate: 8000,
            window: 256,
            hop: 80,
            mel_bins: 64,
            widths: vec![16, 32, 64, 64],
        }
    }
}

impl SedArch {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("SED needs at least one class".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid SED widths {:?}", self.widths)));
        }
        if self.mel_bins < self.min_extent() {
            return Err(Error::Config(format!(
                "{} mel bins cannot pass through {} pooling blocks",
                self.mel_bins,
                self.widths.len()
            )));
        }
        crate::dsp::StftParams::hann(self.window, self.hop).validate()?;
        MelFilterbank::new(self.mel_bins, self.window, self.sample_rate)?;
        Ok(())
    }

    /// Time/frequency reduction factor of the conv stack.
    pub fn pool_factor(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn min_extent(&self) -> usize {
        self.pool_factor()
    }

    /// Feature frames for a signal of `samples` samples.
    pub fn window_frames(&self, samples: usize) -> usize {
        crate::dsp::StftParams::hann(self.window, self.hop).frames(samples)
    }

    fn head_inputs(&self) -> usize {
        self.widths.last().copied().unwrap_or(1) * (self.mel_bins >> self.widths.len())
    }

    pub(crate) fn write(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.insert_scalar("arch.num_classes", self.num_classes as f64)?;
        ck.insert_scalar("arch.sample_rate", self.sample_rate as f64)?;
        ck.insert_scalar("arch.window", self.window as f64)?;
        ck.insert_scalar("arch.hop", self.hop as f64)?;
        ck.insert_scalar("arch.mel_bins", self.mel_bins as f64)?;
        ck.insert("arch.widths", Tensor::from_vec(self.widths.iter().map(|&w| w as f64).collect()))?;
        Ok(())
    }

    pub(crate) fn read(ck: &Checkpoint) -> Result<Self> {
        let u = |name: &str| ck.scalar(name).map(|v| v as usize);
        Ok(Self {
            num_classes: u("arch.num_classes")?,
            sample_rate: ck.scalar("arch.sample_rate")? as u32,
            window: u("arch.window")?,
            hop: u("arch.hop")?,
            mel_bins: u("arch.mel_bins")?,
            widths: ck.require("arch.widths")?.data().iter().map(|&w| w as usize).collect(),
        })
    }
}

/// Framewise and clipwise presence probabilities for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SedPrediction {
    /// `frames × K`, at feature-frame resolution.
    pub framewise: Vec<f64>,
    pub frames: usize,
    /// `K` values, the per-class maximum of `framewise`.
    pub clipwise: Vec<f64>,
}

impl SedPrediction {
    pub fn num_classes(&self) -> usize {
        self.clipwise.len()
    }

    pub fn class_track(&self, k: usize) -> Vec<f64> {
        let kk = self.num_classes();
        (0..self.frames).map(|t| self.framewise[t * kk + k]).collect()
    }
}

#[derive(Clone, Debug)]
struct Block {
    kernel: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Conv blocks (conv 3×3, batch norm, ReLU, 2×2 average pool) followed by a linear
/// layer applied at every pooled time step and a sigmoid.
#[derive(Clone, Debug)]
pub struct SedModel {
    pub arch: SedArch,
    pub params: ParamSet,
    pub stats: Vec<RunningStats>,
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
    filterbank: MelFilterbank,
}

impl SedModel {
    pub fn new(arch: SedArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = Pcg64::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut blocks = Vec::new();
        let mut stats = Vec::new();
        let mut c_in = 1;
        for (i, &w) in arch.widths.iter().enumerate() {
            blocks.push(Block {
                kernel: params.add_uniform(format!("block{i}.conv"), &[w, c_in, 3, 3], c_in * 9, &mut rng)?,
                gamma: params.add(format!("block{i}.bn.gamma"), Tensor::full(&[w], 1.0))?,
                beta: params.add(format!("block{i}.bn.beta"), Tensor::zeros(&[w]))?,
            });
            stats.push(RunningStats::new(w));
            c_in = w;
        }
        let d = arch.head_inputs();
        let head_w = params.add_uniform("head.weight", &[arch.num_classes, d], d, &mut rng)?;
        let head_b = params.add("head.bias", Tensor::zeros(&[arch.num_classes]))?;
        let filterbank = MelFilterbank::new(arch.mel_bins, arch.window, arch.sample_rate)?;
        Ok(Self {
            arch,
            params,
            stats,
            blocks,
            head_w,
            head_b,
            filterbank,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn head_weight_id(&self) -> ParamId {
        self.head_w
    }

    pub fn head_bias_id(&self) -> ParamId {
        self.head_b
    }

    /// Log-mel features `frames × mel_bins`.
    pub fn features(&self, w: &Waveform) -> Result<Vec<f64>> {
        if w.sample_rate() != self.arch.sample_rate {
            return Err(Error::invalid(format!(
                "SED expects {} Hz audio, got {} Hz",
                self.arch.sample_rate,
                w.sample_rate()
            )));
        }
        log_mel(w, self.arch.window, self.arch.hop, &self.filterbank)
    }

    /// Stacks equal-length feature matrices into `[batch, 1, frames, mel_bins]`.
    pub fn batch_features(&self, clips: &[&Waveform]) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut frames = None;
        for w in clips {
            let f = self.features(w)?;
            let t = f.len() / self.arch.mel_bins;
            if *frames.get_or_insert(t) != t {
                return Err(Error::shape("batch clips must have equal length"));
            }
            data.extend(f);
        }
        let t = frames.ok_or_else(|| Error::invalid("empty batch"))?;
        Tensor::new(vec![clips.len(), 1, t, self.arch.mel_bins], data)
    }

    /// Records the network on `tape`. Returns pooled framewise `[batch, T', K]` and
    /// clipwise `[batch, K]` outputs. In train mode `stats` receives the batch statistics.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: Var,
        mode: Mode,
        stats: &mut [RunningStats],
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(features).to_vec();
        let [_, _, frames, mel] = shape[..] else {
            return Err(Error::shape(format!("SED input must be rank 4, got {shape:?}")));
        };
        if mel != self.arch.mel_bins {
            return Err(Error::shape(format!(
                "SED input has {mel} mel bins, model expects {}",
                self.arch.mel_bins
            )));
        }
        if frames < self.arch.min_extent() {
            return Err(Error::invalid(format!(
                "input of {frames} frames is shorter than the network's minimum of {}",
                self.arch.min_extent()
            )));
        }
        let mut x = features;
        for (b, st) in self.blocks.iter().zip(stats.iter_mut()) {
            x = tape.conv2d(x, bound.var(b.kernel), None, Padding::Same)?;
            x = tape.batch_norm(x, bound.var(b.gamma), bound.var(b.beta), st, mode)?;
            x = tape.relu(x);
            x = tape.avg_pool2(x)?;
        }
        let seq = tape.time_major(x)?;
        let logits = tape.linear(seq, bound.var(self.head_w), Some(bound.var(self.head_b)))?;
        let framewise = tape.sigmoid(logits);
        let clipwise = tape.max_over_time(framewise)?;
        Ok((framewise, clipwise))
    }

    /// Inference in eval mode on equal-length waveforms.
    pub fn predict(&self, clips: &[&Waveform]) -> Result<Vec<SedPrediction>> {
        let feats = self.batch_features(clips)?;
        let frames = feats.shape()[2];
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(feats);
        let mut stats = self.stats.clone();
        let (fw, cw) = self.forward(&mut tape, &bound, x, Mode::Eval, &mut stats)?;
        let k = self.num_classes();
        let pooled = tape.shape(fw)[1];
        let factor = self.arch.pool_factor();
        let (fwv, cwv) = (tape.value(fw).data(), tape.value(cw).data());
        Ok((0..clips.len())
            .map(|n| {
                let steps = &fwv[n * pooled * k..(n + 1) * pooled * k];
                SedPrediction {
                    framewise: upsample(steps, pooled, k, factor, frames),
                    frames,
                    clipwise: cwv[n * k..(n + 1) * k].to_vec(),
                }
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.arch.write(&mut ck)?;
        for p in self.params.iter() {
            ck.insert(p.name.clone(), p.value.clone())?;
        }
        for (i, s) in self.stats.iter().enumerate() {
            ck.insert(format!("block{i}.bn.running_mean"), Tensor::from_vec(s.mean.clone()))?;
            ck.insert(format!("block{i}.bn.running_var"), Tensor::from_vec(s.var.clone()))?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch = SedArch::read(ck)?;
        let mut m = SedModel::new(arch, 0)?;
        load_params(&mut m.params, ck)?;
        for (i, s) in m.stats.iter_mut().enumerate() {
            s.mean = ck.require(&format!("block{i}.bn.running_mean"))?.data().to_vec();
            s.var = ck.require(&format!("block{i}.bn.running_var"))?.data().to_vec();
        }
        Ok(m)
    }
}

/// Overwrites every parameter from `ck`, checking shapes.
pub(crate) fn load_params(params: &mut ParamSet, ck: &Checkpoint) -> Result<()> {
    for p in params.iter_mut() {
        let t = ck.require(&p.name)?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?} in checkpoint, model expects {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(())
}

/// Nearest-neighbour repetition of `steps × k` pooled outputs to `frames` rows; step
/// `j` covers frames `[j·factor, (j+1)·factor)` and the last step fills any remainder.
pub fn upsample(steps: &[f64], pooled: usize, k: usize, factor: usize, frames: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * k);
    for t in 0..frames {
        let j = (t / factor).min(pooled - 1);
        out.extend_from_slice(&steps[j * k..(j + 1) * k]);
    }
    out
}
