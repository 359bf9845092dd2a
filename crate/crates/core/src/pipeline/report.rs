use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsseval::{read_metrics_csv, MetricsRecord};
use crate::error::{Error, Result};
use crate::util::{quantile, sorted};

pub const QUARTILE_METHOD: &str = "linear interpolation between order statistics at position q*(n-1)";
pub const REPORT_CSV_HEADER: &str = "rank,class_id,count,sdr_min_db,sdr_q1_db,sdr_median_db,sdr_q3_db,sdr_max_db,\
sir_median_db,sar_median_db,baseline_sdr_median_db,improvement_median_db";

/// Box-plot statistics of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBoxStats {
    pub class_id: usize,
    pub count: usize,
    pub sdr_min: f64,
    pub sdr_q1: f64,
    pub sdr_median: f64,
    pub sdr_q3: f64,
    pub sdr_max: f64,
    pub sir_median: f64,
    pub sar_median: f64,
    pub baseline_sdr_median: f64,
    pub improvement_median: f64,
}

/// Per-class statistics sorted by median SDR, highest first; ties keep class order.
pub fn class_box_stats(records: &[MetricsRecord]) -> Vec<ClassBoxStats> {
    let mut classes: Vec<usize> = records.iter().map(|r| r.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out: Vec<ClassBoxStats> = classes
        .into_iter()
        .map(|k| {
            let rs: Vec<&MetricsRecord> = records.iter().filter(|r| r.class_id == k).collect();
            let col = |f: &dyn Fn(&MetricsRecord) -> f64| sorted(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let sdr = col(&|r| r.sdr_db);
            ClassBoxStats {
                class_id: k,
                count: rs.len(),
                sdr_min: sdr[0],
                sdr_q1: quantile(&sdr, 0.25),
                sdr_median: quantile(&sdr, 0.5),
                sdr_q3: quantile(&sdr, 0.75),
                sdr_max: sdr[sdr.len() - 1],
                sir_median: quantile(&col(&|r| r.sir_db), 0.5),
                sar_median: quantile(&col(&|r| r.sar_db), 0.5),
                baseline_sdr_median: quantile(&col(&|r| r.baseline_sdr_db), 0.5),
                improvement_median: quantile(&col(&|r| r.sdr_db - r.baseline_sdr_db), 0.5),
            }
        })
        .collect();
    out.sort_by(|a, b| b.sdr_median.total_cmp(&a.sdr_median));
    out
}

fn mean(records: &[MetricsRecord], f: fn(&MetricsRecord) -> f64) -> f64 {
    records.iter().map(f).sum::<f64>() / records.len() as f64
}

pub fn report_csv(stats: &[ClassBoxStats]) -> String {
    let mut s = format!("{REPORT_CSV_HEADER}\n");
    for (i, c) in stats.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            i + 1,
            c.class_id,
            c.count,
            c.sdr_min,
            c.sdr_q1,
            c.sdr_median,
            c.sdr_q3,
            c.sdr_max,
            c.sir_median,
            c.sar_median,
            c.baseline_sdr_median,
            c.improvement_median
        );
    }
    s
}

pub fn summary_text(records: &[MetricsRecord], stats: &[ClassBoxStats]) -> String {
    let pairs = {
        let mut ids: Vec<usize> = records.iter().map(|r| r.pair_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    let (sdr, sir, sar) = (
        mean(records, |r| r.sdr_db),
        mean(records, |r| r.sir_db),
        mean(records, |r| r.sar_db),
    );
    let base = mean(records, |r| r.baseline_sdr_db);
    let mut s = String::new();
    let _ = writeln!(s, "Separation report");
    let _ = writeln!(s, "Quartiles: {QUARTILE_METHOD}");
    let _ = writeln!(s, "Records: {} from {pairs} pairs, {} classes", records.len(), stats.len());
    let _ = writeln!(s);
    let _ = writeln!(s, "Mean SDR {sdr:8.3} dB   mixture baseline {base:8.3} dB   improvement {:8.3} dB", sdr - base);
    let _ = writeln!(s, "Mean SIR {sir:8.3} dB");
    let _ = writeln!(s, "Mean SAR {sar:8.3} dB");
    let _ = writeln!(s);
    let _ = writeln!(s, "Per-class SDR (dB), sorted by median, highest first:");
    let _ = writeln!(
        s,
        "{:>4} {:>5} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>8}",
        "rank", "class", "n", "min", "q1", "median", "q3", "max", "baseline", "delta"
    );
    for (i, c) in stats.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:>4} {:>5} {:>5} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>9.3} {:>8.3}",
            i + 1,
            c.class_id,
            c.count,
            c.sdr_min,
            c.sdr_q1,
            c.sdr_median,
            c.sdr_q3,
            c.sdr_max,
            c.baseline_sdr_median,
            c.improvement_median
        );
    }
    s
}

/// Writes `report.csv` and `summary.txt` for the metrics in `metrics_csv`.
pub fn report(metrics_csv: &Path, out: &Path) -> Result<Vec<ClassBoxStats>> {
    let records = read_metrics_csv(metrics_csv)?;
    if records.is_empty() {
        return Err(Error::invalid(format!("{} holds no metrics", metrics_csv.display())));
    }
    let stats = class_box_stats(&records);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv = out.join(REPORT_CSV);
    std::fs::write(&csv, report_csv(&stats)).map_err(|e| Error::io(&csv, e))?;
    let txt = out.join(SUMMARY_TXT);
    std::fs::write(&txt, summary_text(&records, &stats)).map_err(|e| Error::io(&txt, e))?;
    Ok(stats)
}

pub const REPORT_CSV: &str = "report.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(class_id: usize, sdr_db: f64) -> MetricsRecord {
        MetricsRecord {
            pair_id: 0,
            class_id,
            sdr_db,
            sir_db: sdr_db + 1.0,
            sar_db: sdr_db + 2.0,
            baseline_sdr_db: 0.0,
        }
    }

    #[test]
    fn three_values_give_documented_quartiles() {
        let s = class_box_stats(&[rec(0, 1.0), rec(0, 3.0), rec(0, 2.0)]);
        assert_eq!((s[0].sdr_q1, s[0].sdr_median, s[0].sdr_q3), (1.5, 2.0, 2.5));
        assert_eq!((s[0].sdr_min, s[0].sdr_max), (1.0, 3.0));
    }

    #[test]
    fn summary_states_quartile_method() {
        let r = [rec(0, 1.0), rec(1, 4.0)];
        let text = summary_text(&r, &class_box_stats(&r));
        assert!(text.contains(QUARTILE_METHOD));
        assert!(text.lines().any(|l| l.trim_start().starts_with("1     1")));
    }
}
