//! Staged end-to-end runs with config hashing, and the per-class report.

mod config;
mod report;
mod stages;

pub use config::{RunConfig, SedSection, SeparatorSection};
pub use report::{
    class_box_stats, report, report_csv, summary_text, ClassBoxStats, QUARTILE_METHOD, REPORT_CSV, REPORT_CSV_HEADER,
    SUMMARY_TXT,
};
pub use stages::{
    load_sed, load_separator, run_pipeline, stage_hashes, PipelineSummary, RunOptions, StageOutcome, StageRecord,
    CONFIG_ECHO, EVAL_ANCHORS, EVAL_SUMMARY, EVAL_TRIALS, METRICS_CSV, SED_CKPT, SED_EVAL, SEP_CKPT, STAGES,
    STAGE_FILE, TRAIN_ANCHORS, TRAIN_REPORT,
};
