use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use super::batch::{make_training_batch, AnchorPool, Objective, TrainingExample};
use super::model::{SeparatorModel, UNetConfig};
use crate::autodiff::{Adam, AdamConfig, Mode, Tape, Tensor};
use crate::error::{Error, Result};
use crate::runlog::RunLog;
use crate::sed::AnchorSegment;
use crate::synthdata::TrainingScope;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SepTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub log_every: u64,
    /// Writes `sep_step{n}.wlss` into the checkpoint directory every `n` steps when set.
    pub checkpoint_every: Option<u64>,
}

impl Default for SepTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            adam: AdamConfig::default(),
            log_every: 10,
            checkpoint_every: None,
        }
    }
}

impl SepTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "separator training needs at least one step and a batch of two or more".into(),
            ));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// Mean per-example loss of one objective over the first and last tenth of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTrend {
    pub start: f64,
    pub end: f64,
    pub examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SepTrainReport {
    pub steps: u64,
    pub objectives: BTreeMap<Objective, ObjectiveTrend>,
}

impl SepTrainReport {
    pub fn trend(&self, o: Objective) -> Option<&ObjectiveTrend> {
        self.objectives.get(&o)
    }
}

#[derive(Serialize)]
struct StepLog {
    loss: f64,
    mixture: Option<f64>,
    identity: Option<f64>,
    zero: Option<f64>,
}

/// Trains a fresh separator on mixtures of `anchors`.
pub fn train_separator(
    anchors: &[AnchorSegment],
    config: UNetConfig,
    cfg: &SepTrainConfig,
    seed: u64,
    log: &mut RunLog,
    checkpoint_dir: Option<&Path>,
) -> Result<(SeparatorModel, SepTrainReport)> {
    cfg.validate()?;
    let scope = TrainingScope::enter();
    let mut model = SeparatorModel::new(config, seed)?;
    let cfgm = model.config.clone();
    if let Some(a) = anchors.iter().find(|a| a.waveform.len() != cfgm.segment_samples) {
        return Err(Error::invalid(format!(
            "anchor from {} has {} samples, separator segments are {}",
            a.clip_id,
            a.waveform.len(),
            cfgm.segment_samples
        )));
    }
    if let Some(a) = anchors.iter().find(|a| a.condition.len() != cfgm.num_classes) {
        return Err(Error::invalid(format!(
            "anchor from {} has a {}-class condition, separator has {}",
            a.clip_id,
            a.condition.len(),
            cfgm.num_classes
        )));
    }
    let pool = AnchorPool::new(anchors);
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut rng = Pcg64::seed_from_u64(seed ^ 0x5e9a_0a70);
    let window = (cfg.steps / 10).max(1);
    let mut first: BTreeMap<Objective, (f64, usize)> = BTreeMap::new();
    let mut last: BTreeMap<Objective, (f64, usize)> = BTreeMap::new();

    for step in 0..cfg.steps {
        let batch = make_training_batch(&pool, cfg.batch_size, cfgm.stft(), &mut rng)?;
        let (x, c, t) = stack(&batch, cfgm.num_classes)?;
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, true);
        let (xv, cv, tv) = (tape.constant(x), tape.constant(c), tape.constant(t));
        let mut stats = std::mem::take(&mut model.stats);
        let fwd = model.forward(&mut tape, &bound, xv, cv, Mode::Train, &mut stats);
        model.stats = stats;
        let y = fwd?;
        let loss_var = tape.mae_loss(y, tv)?;
        let loss = tape.value(loss_var).data()[0];
        let per = per_example_mae(tape.value(y).data(), tape.value(tv).data(), batch.len());
        let result = if loss.is_finite() {
            tape.backward(loss_var)
        } else {
            Err(Error::NonFinite {
                what: "separator loss".into(),
                detail: format!("loss is {loss}"),
            })
        };
        if let Err(e) = result {
            if let Some(dir) = checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
                model.to_checkpoint()?.save(&dir.join("sep_nonfinite.wlss"))?;
            }
            return Err(Error::NonFinite {
                what: format!("separator training at step {step}"),
                detail: e.to_string(),
            });
        }
        model.params.collect_grads(&mut tape, &bound);
        adam.step(&mut model.params)?;

        let mut grouped: BTreeMap<Objective, (f64, usize)> = BTreeMap::new();
        for (ex, l) in batch.iter().zip(&per) {
            let g = grouped.entry(ex.objective).or_default();
            g.0 += l;
            g.1 += 1;
        }
        for (target, in_window) in [(&mut first, step < window), (&mut last, step >= cfg.steps - window)] {
            if in_window {
                for (o, (s, n)) in &grouped {
                    let e = target.entry(*o).or_default();
                    e.0 += s;
                    e.1 += n;
                }
            }
        }
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            let mean = |o| grouped.get(&o).map(|&(s, n)| s / n as f64);
            log.record(
                "train_separator",
                step,
                &StepLog {
                    loss,
                    mixture: mean(Objective::Mixture),
                    identity: mean(Objective::Identity),
                    zero: mean(Objective::Zero),
                },
            )?;
        }
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, checkpoint_dir) {
            if (step + 1) % every == 0 {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                model.to_checkpoint()?.save(&dir.join(format!("sep_step{}.wlss", step + 1)))?;
            }
        }
    }
    if scope.accesses_since_entry() != 0 {
        return Err(Error::invalid("hidden annotations were read during separator training"));
    }
    let objectives = Objective::ALL
        .iter()
        .filter_map(|o| {
            let (s0, n0) = *first.get(o)?;
            let (s1, n1) = *last.get(o)?;
            Some((
                *o,
                ObjectiveTrend {
                    start: s0 / n0 as f64,
                    end: s1 / n1 as f64,
                    examples: n0 + n1,
                },
            ))
        })
        .collect();
    Ok((
        model,
        SepTrainReport {
            steps: cfg.steps,
            objectives,
        },
    ))
}

/// Stacks examples into input `[B, 1, F, N]`, condition `[B, K]` and target tensors.
pub(crate) fn stack(batch: &[TrainingExample], k: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (f, n) = (first.input.frames(), first.input.bins());
    let mut x = Vec::with_capacity(batch.len() * f * n);
    let mut t = Vec::with_capacity(batch.len() * f * n);
    let mut c = Vec::with_capacity(batch.len() * k);
    for ex in batch {
        x.extend_from_slice(ex.input.data());
        t.extend_from_slice(ex.target.data());
        c.extend_from_slice(ex.condition.as_slice());
    }
    let b = batch.len();
    Ok((
        Tensor::new(vec![b, 1, f, n], x)?,
        Tensor::new(vec![b, k], c)?,
        Tensor::new(vec![b, 1, f, n], t)?,
    ))
}

fn per_example_mae(y: &[f64], t: &[f64], b: usize) -> Vec<f64> {
    let per = y.len() / b;
    y.chunks(per)
        .zip(t.chunks(per))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / per as f64)
        .collect()
}
