//! Serialized outputs of a comparison: prediction rows, the nested report
//! grid, per-city tables and plot-ready TSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evaluation::qq_residual_data;
use crate::forecaster::PredictionRecord;

use super::EvalReport;

pub const PREDICTIONS_HEADER: [&str; 16] = [
    "city_id", "strategy", "issue_week", "target_week", "gamma", "threshold", "pred_dir", "lo95", "hi95",
    "p_low", "p_med", "p_high", "true_dir", "true_level", "gate_verdict", "gate_corr",
];

pub const CITY_HEADER: [&str; 5] = ["city_id", "auc_framework", "auc_baseline", "auc_diff", "gate_use_fraction"];

/// Reports keyed by gamma, then threshold, both as decimal strings.
pub type ReportGrid = BTreeMap<String, BTreeMap<String, EvalReport>>;

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_predictions_csv(records: &[PredictionRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PREDICTIONS_HEADER)?;
    for r in records {
        let p = &r.prediction;
        let corr = r.gate.map(|g| g.correlation).filter(|c| !c.is_nan());
        w.write_record([
            r.city_id.clone(),
            r.strategy.as_str().to_string(),
            r.issue_week.to_string(),
            r.target_week.to_string(),
            r.gamma.to_string(),
            opt(r.threshold),
            p.mean_dir.to_string(),
            p.interval95_dir.0.to_string(),
            p.interval95_dir.1.to_string(),
            r.level_probs[0].to_string(),
            r.level_probs[1].to_string(),
            r.level_probs[2].to_string(),
            opt(r.true_dir),
            opt(r.true_level),
            opt(r.gate.map(|g| g.verdict.as_str())),
            opt(corr),
        ])?;
    }
    w.flush().map_err(|e| Error::io("predictions", e))?;
    Ok(())
}

pub fn write_city_csv(report: &EvalReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CITY_HEADER)?;
    for (city, diff) in &report.auc_differences {
        w.write_record([
            city.clone(),
            report.per_city_auc[city].to_string(),
            report.per_city_auc_baseline[city].to_string(),
            diff.to_string(),
            opt(report.gate_use_fraction.get(city)),
        ])?;
    }
    w.flush().map_err(|e| Error::io("city table", e))?;
    Ok(())
}

pub fn report_json(reports: &[EvalReport]) -> Result<String> {
    let mut grid = ReportGrid::new();
    for r in reports {
        grid.entry(r.gamma.to_string())
            .or_default()
            .insert(r.threshold.to_string(), r.clone());
    }
    let mut s = serde_json::to_string_pretty(&grid)?;
    s.push('\n');
    Ok(s)
}

/// Parses a report grid and flattens it in numeric (gamma, threshold) order.
pub fn parse_report_json(text: &str) -> Result<Vec<EvalReport>> {
    let grid: ReportGrid = serde_json::from_str(text)?;
    let mut reports: Vec<EvalReport> = grid.into_values().flat_map(BTreeMap::into_values).collect();
    reports.sort_by(|a, b| a.gamma.cmp(&b.gamma).then(a.threshold.total_cmp(&b.threshold)));
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Mean AUC difference with its 95% interval per cell.
    DiffBars,
    /// Empirical CDF of the framework's per-city AUC.
    AucCdf,
    /// Normal quantile pairs of the framework's standardized residuals.
    Qq,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diff_bars" => Ok(Self::DiffBars),
            "auc_cdf" => Ok(Self::AucCdf),
            "qq" => Ok(Self::Qq),
            other => Err(Error::Config(format!(
                "unknown plot kind `{other}` (expected diff_bars, auc_cdf or qq)"
            ))),
        }
    }
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".into(), |v| v.to_string())
}

/// Tab-separated plot data with a header line. `cell` picks the (gamma,
/// threshold) report for the single-cell kinds; by default gamma 6 at
/// threshold 0.5, or the first cell when the grid lacks it.
pub fn plot_data(reports: &[EvalReport], kind: PlotKind, cell: Option<(u32, f64)>) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::domain("report has no cells"));
    }
    let mut out = String::new();
    if kind == PlotKind::DiffBars {
        out.push_str("gamma\tthreshold\tmean_diff\tci_lo\tci_hi\n");
        for r in reports {
            let (lo, hi) = r.ci95.unzip();
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.gamma, r.threshold, num(r.mean_difference), num(lo), num(hi));
        }
        return Ok(out);
    }
    let find = |(g, t): (u32, f64)| reports.iter().find(|r| r.gamma == g && r.threshold == t);
    let report = match cell {
        Some(c) => find(c).ok_or_else(|| Error::domain(format!("no cell gamma {} threshold {}", c.0, c.1)))?,
        None => find((6, 0.5)).unwrap_or(&reports[0]),
    };
    match kind {
        PlotKind::AucCdf => {
            out.push_str("auc\tcumulative_fraction\n");
            let mut aucs: Vec<f64> = report.per_city_auc.values().copied().collect();
            aucs.sort_by(f64::total_cmp);
            let n = aucs.len() as f64;
            for (i, a) in aucs.iter().enumerate() {
                if aucs.get(i + 1) != Some(a) {
                    let _ = writeln!(out, "{a}\t{}", (i + 1) as f64 / n);
                }
            }
        }
        PlotKind::Qq => {
            out.push_str("theoretical\tobserved\n");
            for (t, o) in qq_residual_data(&report.residuals)? {
                let _ = writeln!(out, "{t}\t{o}");
            }
        }
        PlotKind::DiffBars => unreachable!(),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(gamma: u32, threshold: f64, aucs: &[f64]) -> EvalReport {
        let per: BTreeMap<String, f64> = aucs.iter().enumerate().map(|(i, a)| (format!("c{i}"), *a)).collect();
        EvalReport {
            gamma,
            threshold,
            per_city_auc_baseline: per.clone(),
            auc_differences: per.keys().map(|k| (k.clone(), 0.0)).collect(),
            gate_use_fraction: per.keys().map(|k| (k.clone(), 0.5)).collect(),
            per_city_auc: per,
            mean_auc: Some(0.8),
            mean_auc_baseline: Some(0.8),
            mean_difference: Some(0.0),
            ci95: Some((0.0, 0.0)),
            wilcoxon_p: 1.0,
            wilcoxon_statistic: 0.0,
            wilcoxon_n_nonzero: 0,
            wilcoxon_degenerate: true,
            bonferroni_alpha: 0.0125,
            significant: false,
            excluded: BTreeMap::new(),
            residuals: vec![0.3, -1.0, 0.2, 0.9, -0.4],
        }
    }

    #[test]
    fn json_round_trip_in_numeric_order() {
        let reports = vec![report(2, 0.3, &[0.7]), report(2, 0.5, &[0.8]), report(10, 0.3, &[0.9])];
        let text = report_json(&reports).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["10"]["0.3"].is_object());
        assert_eq!(parse_report_json(&text).unwrap(), reports);
    }

    #[test]
    fn cdf_of_perfect_aucs_is_one_step() {
        let out = plot_data(&[report(6, 0.5, &[1.0, 1.0, 1.0])], PlotKind::AucCdf, None).unwrap();
        assert_eq!(out, "auc\tcumulative_fraction\n1\t1\n");
    }

    #[test]
    fn diff_bars_one_row_per_cell() {
        let reports: Vec<EvalReport> = [2, 4]
            .iter()
            .flat_map(|&g| [0.3, 0.5, 0.6].map(|t| report(g, t, &[0.5])))
            .collect();
        let out = plot_data(&reports, PlotKind::DiffBars, None).unwrap();
        assert_eq!(out.lines().count(), 1 + 6);
    }

    #[test]
    fn qq_sorted_in_first_column() {
        let out = plot_data(&[report(6, 0.5, &[0.5])], PlotKind::Qq, None).unwrap();
        let col: Vec<f64> = out.lines().skip(1).map(|l| l.split('\t').next().unwrap().parse().unwrap()).collect();
        assert_eq!(col.len(), 5);
        assert!(col.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn unknown_kind_and_cell() {
        assert!("bars".parse::<PlotKind>().is_err());
        assert!(plot_data(&[report(6, 0.5, &[0.5])], PlotKind::Qq, Some((2, 0.5))).is_err());
    }

    #[test]
    fn city_csv_header() {
        let mut buf = Vec::new();
        write_city_csv(&report(2, 0.5, &[0.75]), &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "city_id,auc_framework,auc_baseline,auc_diff,gate_use_fraction\nc0,0.75,0.75,0,0.5\n");
    }
}
