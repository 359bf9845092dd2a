use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use super::model::{SedArch, SedModel};
use crate::autodiff::{Adam, AdamConfig, Mode, Tape, Tensor};
use crate::error::{Error, Result};
use crate::runlog::RunLog;
use crate::synthdata::{TrainingClip, TrainingScope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SedTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops early after this many optimizer steps when set.
    pub max_steps: Option<u64>,
    pub adam: AdamConfig,
    pub log_every: u64,
}

impl Default for SedTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 16,
            max_steps: None,
            adam: AdamConfig::default(),
            log_every: 1,
        }
    }
}

impl SedTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "SED training needs at least one epoch and a batch of two or more".into(),
            ));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SedTrainReport {
    pub steps: u64,
    pub initial_loss: f64,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
}

#[derive(Serialize)]
struct StepLog {
    epoch: usize,
    loss: f64,
}

/// Trains on the training view only. Any annotation read during training is an error.
pub fn train_sed(
    clips: &[TrainingClip],
    arch: SedArch,
    cfg: &SedTrainConfig,
    seed: u64,
    log: &mut RunLog,
    dump_dir: Option<&Path>,
) -> Result<(SedModel, SedTrainReport)> {
    cfg.validate()?;
    let scope = TrainingScope::enter();
    if clips.len() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "{} training clips cannot fill a batch of {}",
            clips.len(),
            cfg.batch_size
        )));
    }
    let k = arch.num_classes;
    if let Some(c) = clips.iter().find(|c| c.tags.len() != k) {
        return Err(Error::Dataset {
            clip_id: c.clip_id.clone(),
            detail: format!("clip has {} tags, model has {k} classes", c.tags.len()),
        });
    }
    let mut model = SedModel::new(arch, seed)?;
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut rng = Pcg64::seed_from_u64(seed ^ 0x5ed0_5ed0);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut step = 0u64;
    let mut initial = None;
    let mut epoch_losses = Vec::new();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        epoch_losses.clear();
        for batch in order.chunks_exact(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let waves: Vec<_> = batch.iter().map(|&i| &clips[i].waveform).collect();
            let feats = model.batch_features(&waves)?;
            let target = Tensor::new(
                vec![batch.len(), k],
                batch.iter().flat_map(|&i| clips[i].tags.iter().map(|&t| t as f64)).collect(),
            )?;
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true);
            let x = tape.constant(feats);
            let mut stats = std::mem::take(&mut model.stats);
            let fwd = model.forward(&mut tape, &bound, x, Mode::Train, &mut stats);
            model.stats = stats;
            let (_, clipwise) = fwd?;
            let loss_var = tape.bce_loss(clipwise, &target)?;
            let loss = tape.value(loss_var).data()[0];
            let result = if loss.is_finite() {
                tape.backward(loss_var)
            } else {
                Err(Error::NonFinite {
                    what: "SED loss".into(),
                    detail: format!("loss is {loss}"),
                })
            };
            if let Err(e) = result {
                let ids: Vec<&str> = batch.iter().map(|&i| clips[i].clip_id.as_str()).collect();
                dump_state(dump_dir, &model, step, &ids)?;
                return Err(Error::NonFinite {
                    what: format!("SED training at step {step}"),
                    detail: e.to_string(),
                });
            }
            model.params.collect_grads(&mut tape, &bound);
            adam.step(&mut model.params)?;
            initial.get_or_insert(loss);
            epoch_losses.push(loss);
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                log.record("train_sed", step, &StepLog { epoch, loss })?;
            }
            step += 1;
        }
    }
    if scope.accesses_since_entry() != 0 {
        return Err(Error::invalid("hidden annotations were read during SED training"));
    }
    let final_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
    Ok((
        model,
        SedTrainReport {
            steps: step,
            initial_loss: initial.unwrap_or(f64::NAN),
            final_loss,
        },
    ))
}

fn dump_state(dir: Option<&Path>, model: &SedModel, step: u64, clip_ids: &[&str]) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.to_checkpoint()?.save(&dir.join("sed_nonfinite.wlss"))?;
    crate::synthdata::write_json(
        &dir.join("sed_nonfinite.json"),
        &serde_json::json!({ "step": step, "batch": clip_ids }),
    )
}
