//! Text tables and CSV for evaluation results. Metrics are printed x100.

use std::fmt::Write;

use super::coco::EvalReport;
use super::protocol::{KPoint, SigmaPoint, SweepSummary};

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

/// Overall metrics followed by the per-class table.
pub fn format_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let comp = report.composition.as_deref().unwrap_or("-");
    let seed = report.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
    writeln!(out, "{:<12} {:>6} {:>8} {:>8} {:>8}", "Composition", "Seed", "AP", "AP50", "AP75").unwrap();
    writeln!(out, "{:<12} {:>6} {:>8} {:>8} {:>8}", comp, seed, pct(report.ap), pct(report.ap50), pct(report.ap75)).unwrap();
    writeln!(out).unwrap();
    let width = report.per_class.keys().map(|c| c.len()).max().unwrap_or(5).max(5);
    writeln!(out, "{:<width$} {:>8} {:>8} {:>8} {:>6} {:>6}", "Class", "AP", "AP50", "AP75", "GT", "Dets").unwrap();
    for (class, m) in &report.per_class {
        writeln!(
            out,
            "{:<width$} {:>8} {:>8} {:>8} {:>6} {:>6}",
            class,
            pct(m.ap),
            pct(m.ap50),
            pct(m.ap75),
            m.num_gt,
            m.num_detections
        )
        .unwrap();
    }
    let d = &report.diagnostics;
    if d.unknown_class_detections > 0 || d.unknown_image_detections > 0 {
        writeln!(
            out,
            "\nignored detections: {} of unknown classes, {} on unknown images",
            d.unknown_class_detections, d.unknown_image_detections
        )
        .unwrap();
    }
    out
}

/// One row per composition with mean ± std over seeds.
pub fn format_sweep(summary: &SweepSummary) -> String {
    let mut out = String::new();
    writeln!(out, "{:<12} {:>6} {:>13} {:>13} {:>13}", "Composition", "Seeds", "AP", "AP50", "AP75").unwrap();
    for row in &summary.rows {
        let cell = |m: &super::protocol::MeanStd| format!("{} ± {}", pct(m.mean), pct(m.std));
        writeln!(
            out,
            "{:<12} {:>6} {:>13} {:>13} {:>13}",
            row.composition,
            row.runs.len(),
            cell(&row.ap),
            cell(&row.ap50),
            cell(&row.ap75)
        )
        .unwrap();
    }
    if let Some(e) = &summary.error {
        writeln!(out, "\nsweep stopped early: {e}").unwrap();
    }
    out
}

pub fn k_sweep_csv(points: &[KPoint]) -> String {
    let mut out = String::from("k,ap,ap50,ap75\n");
    for p in points {
        writeln!(out, "{},{},{},{}", p.k, p.ap, p.ap50, p.ap75).unwrap();
    }
    out
}

pub fn sigma_sweep_csv(points: &[SigmaPoint]) -> String {
    let mut out = String::from("sigma,detections,count_non_increasing,ap,ap50,ap75\n");
    for p in points {
        writeln!(out, "{},{},{},{},{},{}", p.sigma, p.detections, p.count_non_increasing, p.ap, p.ap50, p.ap75).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::protocol::{MeanStd, SweepRow};

    #[test]
    fn sweep_table_layout() {
        let m = MeanStd { mean: 0.5, std: 0.0 };
        let summary = SweepSummary {
            rows: vec![SweepRow {
                composition: "100/0".into(),
                in_house_fraction: 1.0,
                seeds: vec![0],
                ap: m,
                ap50: m,
                ap75: m,
                runs: vec![],
            }],
            error: None,
        };
        let text = format_sweep(&summary);
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("Composition"));
        assert!(lines[1].starts_with("100/0"));
        assert!(lines[1].contains("50.0 ± 0.0"));
    }

    #[test]
    fn csv_headers() {
        assert!(k_sweep_csv(&[KPoint { k: 1, ap: 0.5, ap50: 1.0, ap75: 0.0 }]).starts_with("k,ap,ap50,ap75\n1,0.5,1,0\n"));
        assert!(sigma_sweep_csv(&[]).starts_with("sigma,detections,count_non_increasing"));
    }
}
