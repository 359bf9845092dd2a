use std::collections::BTreeMap;

use super::model::SeparatorModel;
use crate::dsp::{istft, reconstruct_with_phase, split_magnitude_phase, stft_with, Waveform};
use crate::error::{Error, Result};
use crate::sed::{ConditionVector, SedModel};

/// Clipwise probability at or above which a class counts as present.
pub const PRESENCE_THRESHOLD: f64 = 0.5;

/// Separates class `k` using a one-hot condition.
pub fn separate(model: &SeparatorModel, mixture: &Waveform, k: usize) -> Result<Waveform> {
    let c = ConditionVector::one_hot(k, model.num_classes())?;
    separate_with(model, mixture, &c)
}

/// Runs the separator over consecutive non-overlapping segments of `mixture`, each
/// resynthesized with the mixture phase. The last segment is zero-padded and the output
/// trimmed, so the result has exactly the input length.
pub fn separate_with(model: &SeparatorModel, mixture: &Waveform, condition: &ConditionVector) -> Result<Waveform> {
    Ok(separate_many(model, mixture, &[condition])?.remove(0))
}

/// [`separate_with`] for several conditions on the same mixture, sharing the analysis.
pub fn separate_many(model: &SeparatorModel, mixture: &Waveform, conditions: &[&ConditionVector]) -> Result<Vec<Waveform>> {
    let cfg = &model.config;
    if mixture.sample_rate() != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "separator expects {} Hz audio, got {} Hz",
            cfg.sample_rate,
            mixture.sample_rate()
        )));
    }
    if mixture.len() < cfg.segment_samples {
        return Err(Error::invalid(format!(
            "input of {} samples is shorter than one {}-sample segment",
            mixture.len(),
            cfg.segment_samples
        )));
    }
    let seg = cfg.segment_samples;
    let mut segments = Vec::new();
    for start in (0..mixture.len()).step_by(seg) {
        segments.push(split_magnitude_phase(&stft_with(&mixture.segment(start, seg), cfg.stft())?));
    }
    let jobs: Vec<(usize, usize)> = (0..conditions.len())
        .flat_map(|c| (0..segments.len()).map(move |s| (c, s)))
        .collect();
    let mut outs = vec![Vec::with_capacity(segments.len() * seg); conditions.len()];
    for chunk in jobs.chunks(SEGMENT_BATCH) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|&(_, s)| segments[s].0.data()).collect();
        let conds: Vec<&ConditionVector> = chunk.iter().map(|&(c, _)| conditions[c]).collect();
        for (&(c, s), est) in chunk.iter().zip(model.infer(&inputs, &conds)?) {
            let (mag, phase) = &segments[s];
            let spec = reconstruct_with_phase(&mag.with_data(est)?, phase)?;
            outs[c].extend(istft(&spec)?.into_samples());
        }
    }
    outs.into_iter()
        .map(|mut o| {
            o.truncate(mixture.len());
            Waveform::new(o, mixture.sample_rate())
        })
        .collect()
}

const SEGMENT_BATCH: usize = 8;

/// Separates every class the SED model tags at or above `threshold`.
pub fn predict_present_then_separate(
    model: &SeparatorModel,
    sed: &SedModel,
    clip: &Waveform,
    threshold: f64,
) -> Result<BTreeMap<usize, Waveform>> {
    if sed.num_classes() != model.num_classes() {
        return Err(Error::invalid(format!(
            "SED has {} classes, separator has {}",
            sed.num_classes(),
            model.num_classes()
        )));
    }
    let present = present_classes(sed, clip, threshold)?;
    present.into_iter().map(|k| Ok((k, separate(model, clip, k)?))).collect()
}

/// Classes whose clipwise probability reaches `threshold`.
pub fn present_classes(sed: &SedModel, clip: &Waveform, threshold: f64) -> Result<Vec<usize>> {
    let pred = sed.predict(&[clip])?.remove(0);
    Ok((0..pred.clipwise.len()).filter(|&k| pred.clipwise[k] >= threshold).collect())
}
