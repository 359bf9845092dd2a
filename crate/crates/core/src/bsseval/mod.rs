//! Source-to-distortion, interference and artifact ratios by least-squares projection
//! onto delayed copies of the references.

mod corpus;
mod decompose;

pub use corpus::{
    class_summaries, eval_anchors, evaluate_corpus, metrics_csv, parse_metrics_csv, read_metrics_csv,
    write_metrics_csv, ClassSummary, CorpusEvaluation, CorpusSummary, EvalConfig, MetricsRecord, PairTrials,
    TrialStats, CSV_HEADER, IDENTITY_SDR_DB, ZERO_ENERGY_RATIO,
};
pub use decompose::{
    bss_eval, decompose, Decomposition, Metrics, DEFAULT_TAPS, DENOMINATOR_FLOOR, FLOOR_DB, GRAM_REGULARIZATION,
};
