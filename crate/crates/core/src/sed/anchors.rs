use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::SedModel;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::synthdata::TrainingClip;

/// Presence probabilities used to condition the separator, one per class in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ConditionVector(Vec<f64>);

impl ConditionVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("condition vector is empty"));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("condition entry {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn one_hot(k: usize, num_classes: usize) -> Result<Self> {
        if k >= num_classes {
            return Err(Error::invalid(format!("class {k} out of range for {num_classes} classes")));
        }
        let mut v = vec![0.0; num_classes];
        v[k] = 1.0;
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// First index of the largest entry.
    pub fn argmax(&self) -> usize {
        first_argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ConditionVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ConditionVector> for Vec<f64> {
    fn from(c: ConditionVector) -> Self {
        c.0
    }
}

pub(crate) fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSegment {
    pub clip_id: String,
    pub class_id: usize,
    pub tau_s: f64,
    pub start: usize,
    pub waveform: Waveform,
    pub condition: ConditionVector,
}

/// Placement of an anchor window inside a clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorWindow {
    pub tau_frame: usize,
    pub tau_s: f64,
    pub start: usize,
}

/// Centers a window of `anchor_len` samples on the first maximum of `track`, shifting it
/// inward when it would cross a clip edge.
pub fn anchor_window(track: &[f64], hop: usize, sample_rate: u32, clip_len: usize, anchor_len: usize) -> Result<AnchorWindow> {
    if track.is_empty() {
        return Err(Error::invalid("empty presence track"));
    }
    if anchor_len == 0 || anchor_len > clip_len {
        return Err(Error::invalid(format!(
            "anchor of {anchor_len} samples does not fit a clip of {clip_len}"
        )));
    }
    let t = first_argmax(track);
    let center = (t * hop).min(clip_len);
    let start = center.saturating_sub(anchor_len / 2).min(clip_len - anchor_len);
    Ok(AnchorWindow {
        tau_frame: t,
        tau_s: (t * hop) as f64 / sample_rate as f64,
        start,
    })
}

/// Clipwise prediction of the SED model on `segment` alone.
pub fn tag_segment(model: &SedModel, segment: &Waveform) -> Result<ConditionVector> {
    Ok(tag_segments(model, &[segment])?.remove(0))
}

/// Batched [`tag_segment`] for equal-length segments.
pub fn tag_segments(model: &SedModel, segments: &[&Waveform]) -> Result<Vec<ConditionVector>> {
    let mut out = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(TAG_BATCH) {
        for p in model.predict(chunk)? {
            out.push(ConditionVector::new(p.clipwise)?);
        }
    }
    Ok(out)
}

const TAG_BATCH: usize = 32;
const MINE_BATCH: usize = 16;

/// Anchor for tagged class `k` of `clip`.
pub fn select_anchor(model: &SedModel, clip: &TrainingClip, k: usize, anchor_len: usize) -> Result<AnchorSegment> {
    Ok(mine_anchors_for(model, std::slice::from_ref(clip), anchor_len, Some(k))?.remove(0))
}

/// One anchor per (clip, tagged class), in clip order then class order.
pub fn mine_anchors(model: &SedModel, clips: &[TrainingClip], anchor_len: usize) -> Result<Vec<AnchorSegment>> {
    mine_anchors_for(model, clips, anchor_len, None)
}

fn mine_anchors_for(
    model: &SedModel,
    clips: &[TrainingClip],
    anchor_len: usize,
    only: Option<usize>,
) -> Result<Vec<AnchorSegment>> {
    let k_all = model.num_classes();
    let mut pending = Vec::new();
    for chunk in clips.chunks(MINE_BATCH) {
        let waves: Vec<&Waveform> = chunk.iter().map(|c| &c.waveform).collect();
        let preds = predict_grouped(model, &waves)?;
        for (clip, pred) in chunk.iter().zip(preds) {
            let classes: Vec<usize> = match only {
                Some(k) => {
                    if k >= k_all {
                        return Err(Error::invalid(format!("class {k} out of range for {k_all} classes")));
                    }
                    if !clip.has_tag(k) {
                        return Err(Error::invalid(format!(
                            "clip {} is not tagged with class {k}",
                            clip.clip_id
                        )));
                    }
                    vec![k]
                }
                None => clip.tagged_classes().collect(),
            };
            for k in classes {
                let w = anchor_window(
                    &pred.class_track(k),
                    model.arch.hop,
                    model.arch.sample_rate,
                    clip.waveform.len(),
                    anchor_len,
                )?;
                pending.push((clip.clip_id.clone(), k, w, clip.waveform.segment(w.start, anchor_len)));
            }
        }
    }
    let segs: Vec<&Waveform> = pending.iter().map(|p| &p.3).collect();
    let conds = tag_segments(model, &segs)?;
    Ok(pending
        .into_iter()
        .zip(conds)
        .map(|((clip_id, class_id, w, waveform), condition)| AnchorSegment {
            clip_id,
            class_id,
            tau_s: w.tau_s,
            start: w.start,
            waveform,
            condition,
        })
        .collect())
}

/// Predicts equal-length runs of waveforms together.
pub(crate) fn predict_grouped(model: &SedModel, waves: &[&Waveform]) -> Result<Vec<super::SedPrediction>> {
    let mut out = Vec::with_capacity(waves.len());
    let mut i = 0;
    while i < waves.len() {
        let mut j = i + 1;
        while j < waves.len() && waves[j].len() == waves[i].len() {
            j += 1;
        }
        out.extend(model.predict(&waves[i..j])?);
        i = j;
    }
    Ok(out)
}

/// Serialized anchor without its audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorRecord {
    pub clip_id: String,
    pub class_id: usize,
    pub tau_s: f64,
    pub start_sample: usize,
    pub length: usize,
    pub condition: ConditionVector,
}

impl AnchorRecord {
    pub fn from_segment(a: &AnchorSegment) -> Self {
        Self {
            clip_id: a.clip_id.clone(),
            class_id: a.class_id,
            tau_s: a.tau_s,
            start_sample: a.start,
            length: a.waveform.len(),
            condition: a.condition.clone(),
        }
    }
}

pub fn save_anchors(path: &Path, anchors: &[AnchorSegment]) -> Result<()> {
    let recs: Vec<AnchorRecord> = anchors.iter().map(AnchorRecord::from_segment).collect();
    crate::synthdata::write_json(path, &recs)
}

/// Reloads anchors, re-slicing audio from `clips`.
pub fn load_anchors(path: &Path, clips: &[TrainingClip]) -> Result<Vec<AnchorSegment>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let recs: Vec<AnchorRecord> = serde_json::from_str(&text)?;
    let by_id: HashMap<&str, &TrainingClip> = clips.iter().map(|c| (c.clip_id.as_str(), c)).collect();
    recs.into_iter()
        .map(|r| {
            let clip = by_id.get(r.clip_id.as_str()).ok_or_else(|| Error::Dataset {
                clip_id: r.clip_id.clone(),
                detail: "anchor refers to a clip not in the dataset".into(),
            })?;
            if r.start_sample + r.length > clip.waveform.len() {
                return Err(Error::Dataset {
                    clip_id: r.clip_id.clone(),
                    detail: "anchor extends past the clip".into(),
                });
            }
            Ok(AnchorSegment {
                waveform: clip.waveform.segment(r.start_sample, r.length),
                clip_id: r.clip_id,
                class_id: r.class_id,
                tau_s: r.tau_s,
                start: r.start_sample,
                condition: r.condition,
            })
        })
        .collect()
}
