use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::report::{report, REPORT_CSV, SUMMARY_TXT};
use crate::autodiff::Checkpoint;
use crate::bsseval::{eval_anchors, evaluate_corpus, write_metrics_csv};
use crate::error::{Error, Result};
use crate::runlog::RunLog;
use crate::sed::{evaluate_sed, mine_anchors, save_anchors, train_sed, SedModel};
use crate::separator::{train_separator, SeparatorModel};
use crate::synthdata::{generate_dataset, write_json, Dataset, EvalAccess, Split};
use crate::util::fnv1a64;

pub const STAGE_FILE: &str = "stage.json";
pub const CONFIG_ECHO: &str = "config.json";
pub const STAGES: [&str; 5] = ["data", "sed", "separator", "eval", "report"];

pub const SED_CKPT: &str = "sed.wlss";
pub const SEP_CKPT: &str = "separator.wlss";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const TRAIN_ANCHORS: &str = "anchors.json";
pub const SED_EVAL: &str = "sed_eval.json";
pub const EVAL_ANCHORS: &str = "eval_anchors.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const EVAL_SUMMARY: &str = "summary.json";
pub const EVAL_TRIALS: &str = "trials.json";

/// Completion record written last into each stage directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: String,
    pub config_hash: String,
    /// Upstream files consumed, `<stage>/<file>` → FNV-1a hex.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl StageRecord {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join(STAGE_FILE);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Re-run stages whose recorded config or inputs no longer match instead of failing.
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSummary {
    pub out: PathBuf,
    pub stages: Vec<(String, StageOutcome)>,
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

fn parse_hex(s: &str) -> u64 {
    u64::from_str_radix(s, 16).unwrap_or(0)
}

fn file_hash(path: &Path) -> Result<u64> {
    Ok(fnv1a64(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Config hash of each stage. A stage's hash covers its own section and its upstream
/// stage's hash, so editing one section invalidates that stage and everything after it.
pub fn stage_hashes(cfg: &RunConfig) -> BTreeMap<&'static str, u64> {
    let mut out = BTreeMap::new();
    let mut upstream = String::new();
    for stage in STAGES {
        let section = match stage {
            "data" => serde_json::to_value(&cfg.data),
            "sed" => serde_json::to_value(&cfg.sed),
            "separator" => serde_json::to_value(&cfg.separator),
            "eval" => serde_json::to_value(&cfg.eval),
            _ => Ok(serde_json::Value::Null),
        }
        .expect("config serializes");
        let doc = serde_json::json!({
            "stage": stage,
            "upstream": upstream,
            "seed": cfg.stage_seed(stage),
            "section": section,
        });
        let h = fnv1a64(doc.to_string().as_bytes());
        out.insert(stage, h);
        upstream = hex(h);
    }
    out
}

struct Stage<'a> {
    name: &'static str,
    inputs: &'a [(&'static str, &'static str)],
    outputs: &'a [&'static str],
}

struct Runner<'a> {
    out: &'a Path,
    cfg: &'a RunConfig,
    hashes: BTreeMap<&'static str, u64>,
    opts: RunOptions,
    log: RunLog,
    step: u64,
}

impl Runner<'_> {
    fn dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    /// Checks each consumed file against its producer's record and returns the hashes.
    fn verify_inputs(&self, st: &Stage<'_>) -> Result<BTreeMap<String, String>> {
        let mut hashes = BTreeMap::new();
        for &(up, file) in st.inputs {
            let rec = StageRecord::load(&self.dir(up))?.ok_or_else(|| Error::Stage {
                stage: st.name.into(),
                source: Box::new(Error::invalid(format!("upstream stage `{up}` has not completed"))),
            })?;
            let path = self.dir(up).join(file);
            let found = file_hash(&path)?;
            let recorded = rec.outputs.get(file).map_or(0, |h| parse_hex(h));
            if found != recorded {
                return Err(Error::StateVerification {
                    stage: st.name.into(),
                    path,
                    recorded,
                    found,
                });
            }
            hashes.insert(format!("{up}/{file}"), hex(found));
        }
        Ok(hashes)
    }

    fn run(&mut self, st: Stage<'_>, body: impl FnOnce(&Path) -> Result<()>) -> Result<StageOutcome> {
        let inputs = self.verify_inputs(&st)?;
        let dir = self.dir(st.name);
        let current = self.hashes[st.name];
        if let Some(rec) = StageRecord::load(&dir)? {
            let recorded = parse_hex(&rec.config_hash);
            let complete = st.outputs.iter().all(|f| dir.join(f).exists());
            if recorded != current && !self.opts.force {
                return Err(Error::StaleConfig {
                    stage: st.name.into(),
                    recorded,
                    current,
                });
            }
            if recorded == current && rec.inputs != inputs && !self.opts.force {
                let (key, found) = inputs
                    .iter()
                    .find(|(k, v)| rec.inputs.get(*k) != Some(*v))
                    .expect("maps differ");
                return Err(Error::StateVerification {
                    stage: st.name.into(),
                    path: self.out.join(key),
                    recorded: rec.inputs.get(key).map_or(0, |h| parse_hex(h)),
                    found: parse_hex(found),
                });
            }
            if recorded == current && rec.inputs == inputs && complete {
                self.note(st.name, StageOutcome::Skipped)?;
                return Ok(StageOutcome::Skipped);
            }
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let marker = dir.join(STAGE_FILE);
        if marker.exists() {
            std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        }
        let echo = dir.join(CONFIG_ECHO);
        std::fs::write(&echo, self.cfg.to_json()).map_err(|e| Error::io(&echo, e))?;
        body(&dir).map_err(|e| Error::Stage {
            stage: st.name.into(),
            source: Box::new(e),
        })?;
        let mut outputs = BTreeMap::new();
        for f in st.outputs {
            outputs.insert((*f).to_string(), hex(file_hash(&dir.join(f))?));
        }
        write_json(
            &marker,
            &StageRecord {
                stage: st.name.into(),
                config_hash: hex(current),
                inputs,
                outputs,
            },
        )?;
        self.note(st.name, StageOutcome::Ran)?;
        Ok(StageOutcome::Ran)
    }

    fn note(&mut self, stage: &str, outcome: StageOutcome) -> Result<()> {
        log::info!("stage {stage}: {outcome:?}");
        self.log.record("pipeline", self.step, &serde_json::json!({ "stage": stage, "outcome": outcome }))?;
        self.step += 1;
        Ok(())
    }
}

fn stage_log(dir: &Path) -> Result<RunLog> {
    let p = dir.join("train_log.jsonl");
    if p.exists() {
        std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(RunLog::append(&p)?.with_echo(true))
}

pub fn load_sed(path: &Path) -> Result<SedModel> {
    SedModel::from_checkpoint(&Checkpoint::load(path)?)
}

pub fn load_separator(path: &Path) -> Result<SeparatorModel> {
    SeparatorModel::from_checkpoint(&Checkpoint::load(path)?)
}

/// Runs every stage in order under `out`, skipping stages already completed with the
/// same config and inputs.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, opts: RunOptions) -> Result<PipelineSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut r = Runner {
        out,
        cfg,
        hashes: stage_hashes(cfg),
        opts,
        log: RunLog::append(&out.join("run_log.jsonl"))?,
        step: 0,
    };
    let data_dir = r.dir("data");
    let sed_ckpt = r.dir("sed").join(SED_CKPT);
    let sep_ckpt = r.dir("separator").join(SEP_CKPT);
    let metrics = r.dir("eval").join(METRICS_CSV);
    let mut stages = Vec::new();

    let o = r.run(
        Stage {
            name: "data",
            inputs: &[],
            outputs: &["manifest.json", "annotations.json"],
        },
        |dir| generate_dataset(&cfg.data, cfg.stage_seed("data"), dir).map(|_| ()),
    )?;
    stages.push(("data".to_string(), o));

    let o = r.run(
        Stage {
            name: "sed",
            inputs: &[("data", "manifest.json")],
            outputs: &[SED_CKPT, TRAIN_REPORT],
        },
        |dir| {
            let train = Dataset::open(&data_dir)?.load_split(Split::Train)?;
            let mut log = stage_log(dir)?;
            let (model, rep) = train_sed(
                &train,
                cfg.sed.arch.clone(),
                &cfg.sed.train,
                cfg.stage_seed("sed"),
                &mut log,
                Some(dir),
            )?;
            model.to_checkpoint()?.save(&dir.join(SED_CKPT))?;
            write_json(&dir.join(TRAIN_REPORT), &rep)
        },
    )?;
    stages.push(("sed".to_string(), o));

    let o = r.run(
        Stage {
            name: "separator",
            inputs: &[("data", "manifest.json"), ("sed", SED_CKPT)],
            outputs: &[TRAIN_ANCHORS, SEP_CKPT, TRAIN_REPORT],
        },
        |dir| {
            let train = Dataset::open(&data_dir)?.load_split(Split::Train)?;
            let sed = load_sed(&sed_ckpt)?;
            let anchors = mine_anchors(&sed, &train, cfg.anchor_samples())?;
            save_anchors(&dir.join(TRAIN_ANCHORS), &anchors)?;
            let mut log = stage_log(dir)?;
            let (model, rep) = train_separator(
                &anchors,
                cfg.separator.unet.clone(),
                &cfg.separator.train,
                cfg.stage_seed("separator"),
                &mut log,
                Some(dir),
            )?;
            model.to_checkpoint()?.save(&dir.join(SEP_CKPT))?;
            write_json(&dir.join(TRAIN_REPORT), &rep)
        },
    )?;
    stages.push(("separator".to_string(), o));

    let o = r.run(
        Stage {
            name: "eval",
            inputs: &[
                ("data", "manifest.json"),
                ("data", "annotations.json"),
                ("sed", SED_CKPT),
                ("separator", SEP_CKPT),
            ],
            outputs: &[SED_EVAL, EVAL_ANCHORS, METRICS_CSV, EVAL_SUMMARY, EVAL_TRIALS],
        },
        |dir| {
            let ds = Dataset::open(&data_dir)?;
            let sed = load_sed(&sed_ckpt)?;
            let sep = load_separator(&sep_ckpt)?;
            let access = EvalAccess::acquire("desk evaluation")?;
            let annotated = ds.load_annotated(Split::Eval, &access)?;
            write_json(&dir.join(SED_EVAL), &evaluate_sed(&sed, &annotated, cfg.anchor_samples(), &access)?)?;
            let view: Vec<_> = annotated.into_iter().map(|c| c.into_view()).collect();
            let anchors = eval_anchors(&sed, &view, cfg.anchor_samples(), cfg.eval.single_tag_clips)?;
            save_anchors(&dir.join(EVAL_ANCHORS), &anchors)?;
            let ev = evaluate_corpus(&sep, &sed, &anchors, &cfg.eval, cfg.stage_seed("eval"))?;
            write_metrics_csv(&dir.join(METRICS_CSV), &ev.records)?;
            write_json(&dir.join(EVAL_SUMMARY), &ev.summary)?;
            write_json(&dir.join(EVAL_TRIALS), &ev.trials)
        },
    )?;
    stages.push(("eval".to_string(), o));

    let o = r.run(
        Stage {
            name: "report",
            inputs: &[("eval", METRICS_CSV)],
            outputs: &[REPORT_CSV, SUMMARY_TXT],
        },
        |dir| report(&metrics, dir).map(|_| ()),
    )?;
    stages.push(("report".to_string(), o));

    Ok(PipelineSummary {
        out: out.to_path_buf(),
        stages,
    })
}
