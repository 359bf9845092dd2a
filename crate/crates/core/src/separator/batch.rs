use std::collections::BTreeMap;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::dsp::{split_magnitude_phase, stft_with, Magnitude, StftParams, Waveform};
use crate::error::{Error, Result};
use crate::sed::{AnchorSegment, ConditionVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Mixture in, conditioned source out.
    Mixture,
    /// Source in, the same source out.
    Identity,
    /// Source in with the other source's condition, silence out.
    Zero,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Mixture, Objective::Identity, Objective::Zero];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Mixture => "mixture",
            Objective::Identity => "identity",
            Objective::Zero => "zero",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub input: Magnitude,
    pub condition: ConditionVector,
    pub target: Magnitude,
    pub objective: Objective,
}

/// Anchors grouped by class id.
#[derive(Clone, Debug, Default)]
pub struct AnchorPool<'a> {
    by_class: BTreeMap<usize, Vec<&'a AnchorSegment>>,
}

impl<'a> AnchorPool<'a> {
    pub fn new(anchors: &'a [AnchorSegment]) -> Self {
        let mut by_class: BTreeMap<usize, Vec<&AnchorSegment>> = BTreeMap::new();
        for a in anchors {
            by_class.entry(a.class_id).or_default().push(a);
        }
        Self { by_class }
    }

    pub fn classes(&self) -> Vec<usize> {
        self.by_class.keys().copied().collect()
    }

    pub fn class(&self, k: usize) -> &[&'a AnchorSegment] {
        self.by_class.get(&k).map_or(&[], Vec::as_slice)
    }

    /// Two anchors of distinct, uniformly chosen classes, each uniform within its class.
    pub fn sample_pair<R: Rng>(&self, rng: &mut R) -> Result<(&'a AnchorSegment, &'a AnchorSegment)> {
        let classes = self.classes();
        if classes.len() < 2 {
            return Err(Error::invalid(format!(
                "pair sampling needs anchors of two classes, found {}",
                classes.len()
            )));
        }
        let i = rng.random_range(0..classes.len());
        let mut j = rng.random_range(0..classes.len() - 1);
        if j >= i {
            j += 1;
        }
        let pick = |k: usize, rng: &mut R| {
            let v = &self.by_class[&k];
            v[rng.random_range(0..v.len())]
        };
        let a = pick(classes[i], rng);
        let b = pick(classes[j], rng);
        Ok((a, b))
    }
}

/// Scales `s2` to the energy of `s1`. Returns the scaled copy and the mixture.
pub fn mix_at_0db(s1: &Waveform, s2: &Waveform) -> Result<(Waveform, Waveform)> {
    if s1.len() != s2.len() || s1.sample_rate() != s2.sample_rate() {
        return Err(Error::invalid("mixed signals must share length and sample rate"));
    }
    let (e1, e2) = (s1.energy(), s2.energy());
    if e2 <= 0.0 {
        return Err(Error::invalid("cannot scale a silent signal to 0 dB"));
    }
    let g = (e1 / e2).sqrt();
    let scaled: Vec<f64> = s2.samples().iter().map(|v| v * g).collect();
    let mix: Vec<f64> = s1.samples().iter().zip(&scaled).map(|(a, b)| a + b).collect();
    Ok((
        Waveform::new(scaled, s2.sample_rate())?,
        Waveform::new(mix, s1.sample_rate())?,
    ))
}

pub(crate) fn magnitude(w: &Waveform, params: StftParams) -> Result<Magnitude> {
    Ok(split_magnitude_phase(&stft_with(w, params)?).0)
}

/// Draws `size` examples. Each slot samples a class pair, mixes it at 0 dB, picks one
/// of the two sources and one objective uniformly.
pub fn make_training_batch<R: Rng>(
    pool: &AnchorPool<'_>,
    size: usize,
    params: StftParams,
    rng: &mut R,
) -> Result<Vec<TrainingExample>> {
    // objectives cycle through the batch from a random start, so each gets size/3 slots
    let offset = rng.random_range(0..3usize);
    (0..size)
        .map(|i| {
            let (a, b) = pool.sample_pair(rng)?;
            let j = rng.random_range(0..2usize);
            let objective = Objective::ALL[(offset + i) % 3];
            let (b_scaled, mix) = mix_at_0db(&a.waveform, &b.waveform)?;
            let (own, own_wave, other) = if j == 0 {
                (a, &a.waveform, b)
            } else {
                (b, &b_scaled, a)
            };
            let src = magnitude(own_wave, params)?;
            Ok(match objective {
                Objective::Mixture => TrainingExample {
                    input: magnitude(&mix, params)?,
                    condition: own.condition.clone(),
                    target: src,
                    objective,
                },
                Objective::Identity => TrainingExample {
                    input: src.clone(),
                    condition: own.condition.clone(),
                    target: src,
                    objective,
                },
                Objective::Zero => TrainingExample {
                    target: src.with_data(vec![0.0; src.data().len()])?,
                    input: src,
                    condition: other.condition.clone(),
                    objective,
                },
            })
        })
        .collect()
}
