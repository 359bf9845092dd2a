use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use super::decompose::{bss_eval, DEFAULT_TAPS};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::sed::{mine_anchors, tag_segment, AnchorSegment, ConditionVector, SedModel};
use crate::separator::{mix_at_0db, separate_many, AnchorPool, SeparatorModel};
use crate::synthdata::TrainingClip;
use crate::util::{par_map, quantile, sorted};

pub const CSV_HEADER: &str = "pair_id,class_id,sdr_db,sir_db,sar_db,baseline_sdr_db";
/// An absent-class output passes when its energy is at most this fraction of the mixture's.
pub const ZERO_ENERGY_RATIO: f64 = 0.1;
/// A self-conditioned output passes at this SDR against the mixture.
pub const IDENTITY_SDR_DB: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pairs: usize,
    pub taps: usize,
    /// Restricts evaluation anchors to clips carrying a single tag.
    pub single_tag_clips: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pairs: 200,
            taps: DEFAULT_TAPS,
            single_tag_clips: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 || self.taps == 0 {
            return Err(Error::Config("evaluation needs at least one pair and one tap".into()));
        }
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub pair_id: usize,
    pub class_id: usize,
    pub sdr_db: f64,
    pub sir_db: f64,
    pub sar_db: f64,
    /// SDR of the unprocessed mixture for the same source.
    pub baseline_sdr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub trials: usize,
    pub passed: usize,
    pub rate: f64,
}

impl TrialStats {
    fn from_flags(flags: impl Iterator<Item = bool>) -> Self {
        let (mut trials, mut passed) = (0, 0);
        for f in flags {
            trials += 1;
            passed += f as usize;
        }
        Self {
            trials,
            passed,
            rate: if trials == 0 { f64::NAN } else { passed as f64 / trials as f64 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_id: usize,
    pub count: usize,
    pub median_sdr_db: f64,
    pub median_sir_db: f64,
    pub median_sar_db: f64,
    pub median_baseline_sdr_db: f64,
    pub median_improvement_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub pairs: usize,
    pub taps: usize,
    pub seed: u64,
    pub mean_sdr_db: f64,
    pub mean_sir_db: f64,
    pub mean_sar_db: f64,
    pub mean_baseline_sdr_db: f64,
    /// Sorted by median SDR, highest first.
    pub classes: Vec<ClassSummary>,
    pub zero_mapping: TrialStats,
    pub identity_mapping: TrialStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTrials {
    pub pair_id: usize,
    pub absent_class: Option<usize>,
    pub absent_energy_ratio: Option<f64>,
    pub identity_sdr_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEvaluation {
    pub records: Vec<MetricsRecord>,
    pub trials: Vec<PairTrials>,
    pub summary: CorpusSummary,
}

/// Mines evaluation anchors from the eval split with the SED model.
pub fn eval_anchors(sed: &SedModel, clips: &[TrainingClip], anchor_len: usize, single_tag_clips: bool) -> Result<Vec<AnchorSegment>> {
    let chosen: Vec<TrainingClip> = clips
        .iter()
        .filter(|c| !single_tag_clips || c.tagged_classes().count() == 1)
        .cloned()
        .collect();
    mine_anchors(sed, &chosen, anchor_len)
}

struct Pair<'a> {
    id: usize,
    a: &'a AnchorSegment,
    b: &'a AnchorSegment,
    absent: Option<usize>,
}

/// Mixes random cross-class anchor pairs at 0 dB, separates both sources and scores
/// them against the two anchors. Also runs an absent-class trial and a self-conditioned
/// trial per pair.
pub fn evaluate_corpus(sep: &SeparatorModel, sed: &SedModel, anchors: &[AnchorSegment], cfg: &EvalConfig, seed: u64) -> Result<CorpusEvaluation> {
    cfg.validate()?;
    let k = sep.num_classes();
    let pool = AnchorPool::new(anchors);
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(cfg.pairs);
    for id in 0..cfg.pairs {
        let (a, b) = pool.sample_pair(&mut rng)?;
        let others: Vec<usize> = (0..k).filter(|&c| c != a.class_id && c != b.class_id).collect();
        let absent = (!others.is_empty()).then(|| others[rng.random_range(0..others.len())]);
        pairs.push(Pair { id, a, b, absent });
    }
    let results = par_map(&pairs, |p| evaluate_pair(sep, sed, p, cfg.taps));
    let mut records = Vec::with_capacity(2 * pairs.len());
    let mut trials = Vec::with_capacity(pairs.len());
    for r in results {
        let (rec, t) = r?;
        records.extend(rec);
        trials.push(t);
    }
    let summary = summarize(&records, &trials, cfg, seed)?;
    Ok(CorpusEvaluation {
        records,
        trials,
        summary,
    })
}

fn evaluate_pair(sep: &SeparatorModel, sed: &SedModel, p: &Pair<'_>, taps: usize) -> Result<([MetricsRecord; 2], PairTrials)> {
    let k = sep.num_classes();
    let (b_scaled, mix) = mix_at_0db(&p.a.waveform, &p.b.waveform)?;
    let refs = [p.a.waveform.samples(), b_scaled.samples()];
    let own = tag_segment(sed, &mix)?;
    let ca = ConditionVector::one_hot(p.a.class_id, k)?;
    let cb = ConditionVector::one_hot(p.b.class_id, k)?;
    let cz = p.absent.map(|z| ConditionVector::one_hot(z, k)).transpose()?;
    let mut conds = vec![&ca, &cb, &own];
    if let Some(c) = &cz {
        conds.push(c);
    }
    let outs = separate_many(sep, &mix, &conds)?;
    let row = |target: usize, class_id: usize, est: &Waveform| -> Result<MetricsRecord> {
        let m = bss_eval(est.samples(), &refs, target, taps)?;
        let base = bss_eval(mix.samples(), &refs, target, taps)?;
        Ok(MetricsRecord {
            pair_id: p.id,
            class_id,
            sdr_db: m.sdr,
            sir_db: m.sir,
            sar_db: m.sar,
            baseline_sdr_db: base.sdr,
        })
    };
    let records = [row(0, p.a.class_id, &outs[0])?, row(1, p.b.class_id, &outs[1])?];
    let identity = bss_eval(outs[2].samples(), &[mix.samples()], 0, taps)?.sdr;
    let ratio = outs.get(3).map(|o| o.energy() / mix.energy());
    Ok((
        records,
        PairTrials {
            pair_id: p.id,
            absent_class: p.absent,
            absent_energy_ratio: ratio,
            identity_sdr_db: identity,
        },
    ))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    s / n as f64
}

/// Per-class medians sorted by median SDR (ties by class id) plus overall means.
pub fn class_summaries(records: &[MetricsRecord]) -> Vec<ClassSummary> {
    let mut by_class: BTreeMap<usize, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.class_id).or_default().push(r);
    }
    let mut out: Vec<ClassSummary> = by_class
        .into_iter()
        .map(|(class_id, rs)| {
            let med = |f: fn(&MetricsRecord) -> f64| quantile(&sorted(&rs.iter().map(|r| f(r)).collect::<Vec<_>>()), 0.5);
            ClassSummary {
                class_id,
                count: rs.len(),
                median_sdr_db: med(|r| r.sdr_db),
                median_sir_db: med(|r| r.sir_db),
                median_sar_db: med(|r| r.sar_db),
                median_baseline_sdr_db: med(|r| r.baseline_sdr_db),
                median_improvement_db: med(|r| r.sdr_db - r.baseline_sdr_db),
            }
        })
        .collect();
    out.sort_by(|a, b| b.median_sdr_db.total_cmp(&a.median_sdr_db).then(a.class_id.cmp(&b.class_id)));
    out
}

fn summarize(records: &[MetricsRecord], trials: &[PairTrials], cfg: &EvalConfig, seed: u64) -> Result<CorpusSummary> {
    if records.is_empty() {
        return Err(Error::invalid("no metrics to summarize"));
    }
    Ok(CorpusSummary {
        pairs: trials.len(),
        taps: cfg.taps,
        seed,
        mean_sdr_db: mean(records.iter().map(|r| r.sdr_db)),
        mean_sir_db: mean(records.iter().map(|r| r.sir_db)),
        mean_sar_db: mean(records.iter().map(|r| r.sar_db)),
        mean_baseline_sdr_db: mean(records.iter().map(|r| r.baseline_sdr_db)),
        classes: class_summaries(records),
        zero_mapping: TrialStats::from_flags(
            trials.iter().filter_map(|t| t.absent_energy_ratio).map(|r| r <= ZERO_ENERGY_RATIO),
        ),
        identity_mapping: TrialStats::from_flags(trials.iter().map(|t| t.identity_sdr_db >= IDENTITY_SDR_DB)),
    })
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.pair_id, r.class_id, r.sdr_db, r.sir_db, r.sar_db, r.baseline_sdr_db
        );
    }
    s
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::write(path, metrics_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::invalid(format!("metrics CSV must start with `{CSV_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = || Error::invalid(format!("malformed metrics CSV row {}: `{l}`", i + 2));
            let f: Vec<&str> = l.trim().split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(MetricsRecord {
                pair_id: f[0].parse().map_err(|_| bad())?,
                class_id: f[1].parse().map_err(|_| bad())?,
                sdr_db: num(f[2])?,
                sir_db: num(f[3])?,
                sar_db: num(f[4])?,
                baseline_sdr_db: num(f[5])?,
            })
        })
        .collect()
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    parse_metrics_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let recs = vec![MetricsRecord {
            pair_id: 3,
            class_id: 1,
            sdr_db: 1.0 / 3.0,
            sir_db: -120.0,
            sar_db: 7.25e-5,
            baseline_sdr_db: -0.0123456789012345,
        }];
        let text = metrics_csv(&recs);
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(parse_metrics_csv(&text).unwrap(), recs);
        assert!(parse_metrics_csv("a,b\n").is_err());
    }

    #[test]
    fn classes_sorted_by_median_descending() {
        let mk = |class_id, sdr_db| MetricsRecord {
            pair_id: 0,
            class_id,
            sdr_db,
            sir_db: 0.0,
            sar_db: 0.0,
            baseline_sdr_db: 0.0,
        };
        let s = class_summaries(&[mk(0, 1.0), mk(1, 5.0), mk(0, 2.0), mk(2, 3.0)]);
        let order: Vec<usize> = s.iter().map(|c| c.class_id).collect();
        assert_eq!(order, [1, 2, 0]);
        assert_eq!(s[2].median_sdr_db, 1.5);
    }
}
