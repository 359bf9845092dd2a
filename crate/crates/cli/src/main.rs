use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use wlss_core::bsseval::{eval_anchors, evaluate_corpus, write_metrics_csv};
use wlss_core::dsp::{read_wav, write_wav};
use wlss_core::pipeline::{
    load_sed, load_separator, report, run_pipeline, RunConfig, RunOptions, EVAL_ANCHORS, EVAL_SUMMARY, EVAL_TRIALS,
    METRICS_CSV, SED_EVAL,
};
use wlss_core::runlog::RunLog;
use wlss_core::sed::{evaluate_sed, load_anchors, mine_anchors, save_anchors, train_sed};
use wlss_core::separator::{predict_present_then_separate, separate, train_separator, PRESENCE_THRESHOLD};
use wlss_core::synthdata::{generate_dataset, write_json, Dataset, EvalAccess, Split};

#[derive(Parser)]
#[command(name = "wlss", version, about = "Sound separation trained from weakly labelled clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic weakly labelled corpus.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detection network on the training split's tags.
    TrainSed {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest or its directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one anchor per (clip, tagged class) as a JSON array.
    MineAnchors {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sed_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional separator on mixtures of mined anchors.
    TrainSeparator {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sed_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Reuse anchors written by `mine-anchors` instead of mining again.
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Separate one class from a WAV file, or every detected class when `--class` is omitted.
    Separate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sed_ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = PRESENCE_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the separator on random 0 dB eval pairs.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sep_ckpt: PathBuf,
        #[arg(long)]
        sed_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the per-class report from a metrics CSV.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage, skipping those already complete.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Recompute stages whose config or inputs changed instead of failing.
        #[arg(long)]
        force: bool,
    },
}

fn split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "eval" => Ok(Split::Eval),
        other => bail!("unknown split `{other}` (expected train or eval)"),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateData { common, out } => {
            let cfg = common.load()?;
            let m = generate_dataset(&cfg.data, cfg.stage_seed("data"), &out)?;
            println!("wrote {} clips to {}", m.clips.len(), out.display());
        }
        Command::TrainSed { common, data, out } => {
            let cfg = common.load()?;
            let train = Dataset::open(&data)?.load_split(Split::Train)?;
            let mut log = RunLog::append(&with_suffix(&out, ".log.jsonl"))?.with_echo(true);
            let dump = out.parent().map(Path::to_path_buf);
            let (model, rep) = train_sed(
                &train,
                cfg.sed.arch.clone(),
                &cfg.sed.train,
                cfg.stage_seed("sed"),
                &mut log,
                dump.as_deref(),
            )?;
            model.to_checkpoint()?.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
        }
        Command::MineAnchors {
            common,
            sed_ckpt,
            data,
            split: s,
            out,
        } => {
            let cfg = common.load()?;
            let clips = Dataset::open(&data)?.load_split(split(&s)?)?;
            let anchors = mine_anchors(&load_sed(&sed_ckpt)?, &clips, cfg.anchor_samples())?;
            save_anchors(&out, &anchors)?;
            println!("wrote {} anchors to {}", anchors.len(), out.display());
        }
        Command::TrainSeparator {
            common,
            sed_ckpt,
            data,
            anchors,
            out,
        } => {
            let cfg = common.load()?;
            let train = Dataset::open(&data)?.load_split(Split::Train)?;
            let anchors = match anchors {
                Some(p) => load_anchors(&p, &train)?,
                None => mine_anchors(&load_sed(&sed_ckpt)?, &train, cfg.anchor_samples())?,
            };
            let mut log = RunLog::append(&with_suffix(&out, ".log.jsonl"))?.with_echo(true);
            let (model, rep) = train_separator(
                &anchors,
                cfg.separator.unet.clone(),
                &cfg.separator.train,
                cfg.stage_seed("separator"),
                &mut log,
                out.parent(),
            )?;
            model.to_checkpoint()?.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
        }
        Command::Separate {
            ckpt,
            sed_ckpt,
            input,
            class,
            threshold,
            out,
        } => {
            let sep = load_separator(&ckpt)?;
            let mix = read_wav(&input)?;
            match class {
                Some(k) => {
                    write_wav(&out, &separate(&sep, &mix, k)?)?;
                    println!("wrote {}", out.display());
                }
                None => {
                    let sed = load_sed(&sed_ckpt)?;
                    let found = predict_present_then_separate(&sep, &sed, &mix, threshold)?;
                    if found.is_empty() {
                        println!("no class reached the presence threshold {threshold}");
                    }
                    for (k, w) in found {
                        let p = with_suffix(&out, &format!(".class{k}.wav"));
                        write_wav(&p, &w)?;
                        println!("class {k}: wrote {}", p.display());
                    }
                }
            }
        }
        Command::Evaluate {
            common,
            sep_ckpt,
            sed_ckpt,
            data,
            pairs,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(n) = pairs {
                cfg.eval.pairs = n;
            }
            std::fs::create_dir_all(&out)?;
            let ds = Dataset::open(&data)?;
            let sed = load_sed(&sed_ckpt)?;
            let sep = load_separator(&sep_ckpt)?;
            let access = EvalAccess::acquire("evaluate command")?;
            let annotated = ds.load_annotated(Split::Eval, &access)?;
            write_json(&out.join(SED_EVAL), &evaluate_sed(&sed, &annotated, cfg.anchor_samples(), &access)?)?;
            let view: Vec<_> = annotated.into_iter().map(|c| c.into_view()).collect();
            let anchors = eval_anchors(&sed, &view, cfg.anchor_samples(), cfg.eval.single_tag_clips)?;
            save_anchors(&out.join(EVAL_ANCHORS), &anchors)?;
            let ev = evaluate_corpus(&sep, &sed, &anchors, &cfg.eval, cfg.stage_seed("eval"))?;
            write_metrics_csv(&out.join(METRICS_CSV), &ev.records)?;
            write_json(&out.join(EVAL_SUMMARY), &ev.summary)?;
            write_json(&out.join(EVAL_TRIALS), &ev.trials)?;
            println!("{}", serde_json::to_string_pretty(&ev.summary)?);
        }
        Command::Report { metrics, out } => {
            let stats = report(&metrics, &out)?;
            println!("{} classes reported to {}", stats.len(), out.display());
        }
        Command::Run { common, out, force } => {
            let cfg = common.load()?;
            let summary = run_pipeline(&cfg, &out, RunOptions { force })?;
            for (stage, outcome) in &summary.stages {
                println!("{stage:<10} {outcome:?}");
            }
        }
    }
    Ok(())
}
