use serde::{Deserialize, Serialize};

use super::anchors::{anchor_window, predict_grouped};
use super::model::SedModel;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::synthdata::{EvalAccess, WeakClip};

/// Average precision of `scores` against binary `labels`, summing precision at each
/// distinct score threshold weighted by the recall gained there. Tied scores form one
/// threshold. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let mut gained = 0;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            gained += labels[idx[j]] as usize;
            j += 1;
        }
        tp += gained;
        seen += j - i;
        ap += (gained as f64 / positives as f64) * (tp as f64 / seen as f64);
        i = j;
    }
    Some(ap)
}

/// Mean over classes with at least one positive, and the per-class values.
/// `scores` and `tags` are row-major `clips × K`.
pub fn mean_average_precision(scores: &[Vec<f64>], tags: &[Vec<u8>]) -> (f64, Vec<Option<f64>>) {
    let k = scores.first().map_or(0, Vec::len);
    let per: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<bool> = tags.iter().map(|r| r[c] != 0).collect();
            average_precision(&s, &l)
        })
        .collect();
    let valid: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if valid.is_empty() {
        f64::NAN
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    (mean, per)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SedEvalReport {
    pub clips: usize,
    pub mean_ap: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub single_event_clips: usize,
    /// Anchors covering at least half their length with the hidden event.
    pub anchors_overlapping: usize,
    pub anchor_overlap_rate: f64,
}

/// Scores clipwise tagging and anchor placement against the hidden annotations.
pub fn evaluate_sed(model: &SedModel, clips: &[WeakClip], anchor_len: usize, access: &EvalAccess) -> Result<SedEvalReport> {
    if clips.is_empty() {
        return Err(Error::invalid("no clips to evaluate"));
    }
    let sr = model.arch.sample_rate as f64;
    let mut scores = Vec::with_capacity(clips.len());
    let mut tags = Vec::with_capacity(clips.len());
    let (mut single, mut hits) = (0usize, 0usize);
    for chunk in clips.chunks(16) {
        let waves: Vec<&Waveform> = chunk.iter().map(|c| &c.view().waveform).collect();
        for (clip, pred) in chunk.iter().zip(predict_grouped(model, &waves)?) {
            let view = clip.view();
            if let [ev] = clip.hidden_events(access) {
                let w = anchor_window(
                    &pred.class_track(ev.class_id),
                    model.arch.hop,
                    model.arch.sample_rate,
                    view.waveform.len(),
                    anchor_len,
                )?;
                let a0 = w.start as f64 / sr;
                let a1 = (w.start + anchor_len) as f64 / sr;
                let overlap = (a1.min(ev.offset_s) - a0.max(ev.onset_s)).max(0.0);
                single += 1;
                hits += (overlap >= 0.5 * (a1 - a0)) as usize;
            }
            scores.push(pred.clipwise);
            tags.push(view.tags.clone());
        }
    }
    let (mean_ap, per_class_ap) = mean_average_precision(&scores, &tags);
    Ok(SedEvalReport {
        clips: clips.len(),
        mean_ap,
        per_class_ap,
        single_event_clips: single,
        anchors_overlapping: hits,
        anchor_overlap_rate: if single == 0 { f64::NAN } else { hits as f64 / single as f64 },
    })
}
