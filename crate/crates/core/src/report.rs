//! Text, CSV and SVG renderings of evaluation records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::{RiskCoverageCurve, TIE_RULE};
use crate::pipeline::EvalRecord;

/// One `key=value` line per record, in input order.
pub fn render_records(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let m = &r.report;
        let _ = writeln!(
            out,
            "model={} id={} mixture={} score={} aurc={:.6} aurc_cov={:.6} fpr95={:.6} auroc={:.6} auc_cov={:.6} auc_sem={:.6} f_auc={:.6} accuracy={:.6} n={} n_accept={} ties=\"{}\" config={}",
            r.model,
            &r.model_id[..12.min(r.model_id.len())],
            r.mixture_spec(),
            m.score,
            m.aurc,
            m.aurc_cov,
            m.fpr95,
            m.auroc,
            m.auc_cov,
            m.auc_sem,
            m.f_auc,
            m.accuracy,
            m.n,
            m.n_accept,
            TIE_RULE,
            &r.config_hash[..12.min(r.config_hash.len())],
        );
    }
    out
}

/// Fails unless every record was produced from the same data config.
pub fn check_config_hashes(records: &[EvalRecord]) -> Result<()> {
    let mut hashes: Vec<&str> = records.iter().map(|r| r.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    if hashes.len() > 1 {
        return Err(Error::data(format!(
            "records come from {} different data configs ({}); pass --force to aggregate anyway",
            hashes.len(),
            hashes.join(", ")
        )));
    }
    Ok(())
}

const METRICS: [&str; 8] = [
    "aurc", "aurc_cov", "fpr95", "auroc", "auc_cov", "auc_sem", "f_auc", "accuracy",
];

fn metric(r: &EvalRecord, name: &str) -> f64 {
    let m = &r.report;
    match name {
        "aurc" => m.aurc,
        "aurc_cov" => m.aurc_cov,
        "fpr95" => m.fpr95,
        "auroc" => m.auroc,
        "auc_cov" => m.auc_cov,
        "auc_sem" => m.auc_sem,
        "f_auc" => m.f_auc,
        "accuracy" => m.accuracy,
        _ => unreachable!("unknown metric {name}"),
    }
}

/// `model,family,severity,<metrics...>` rows, in input order.
pub fn severity_table(records: &[EvalRecord]) -> String {
    let mut out = format!("model,family,severity,{}\n", METRICS.join(","));
    for r in records {
        let _ = write!(out, "{},{},{}", r.model, r.family, r.severity);
        for name in METRICS {
            let _ = write!(out, ",{:.6}", metric(r, name));
        }
        out.push('\n');
    }
    out
}

/// Merge coefficient against every metric, averaged over the shifted sets.
pub fn alpha_table(records: &[EvalRecord]) -> String {
    let mut by_alpha: BTreeMap<u64, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.model.starts_with("merge@")) {
        if let Some(a) = r.alpha {
            by_alpha.entry(a.to_bits()).or_default().push(r);
        }
    }
    let mut rows: Vec<(f64, Vec<&EvalRecord>)> = by_alpha.into_iter().map(|(k, v)| (f64::from_bits(k), v)).collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = format!("alpha,{}\n", METRICS.join(","));
    for (alpha, group) in rows {
        let _ = write!(out, "{alpha}");
        for name in METRICS {
            let mean = group.iter().map(|r| metric(r, name)).sum::<f64>() / group.len() as f64;
            let _ = write!(out, ",{mean:.6}");
        }
        out.push('\n');
    }
    out
}

/// Mean of one metric over the records whose model is `model`.
pub fn mean_metric(records: &[EvalRecord], model: &str, name: &str) -> Option<f64> {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.model == model)
        .map(|r| metric(r, name))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Static risk-coverage plot, one polyline per named curve.
pub fn risk_coverage_svg(title: &str, curves: &[(String, RiskCoverageCurve)]) -> String {
    let (w, h, pad) = (480.0, 360.0, 48.0);
    let max_risk = curves
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(|p| p.1))
        .fold(0.0f64, f64::max)
        .max(1e-3);
    let x = |c: f64| pad + c * (w - 2.0 * pad);
    let y = |r: f64| h - pad - r / max_risk * (h - 2.0 * pad);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>",
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        "<path d=\"M{} {} L{} {} L{} {}\" stroke=\"black\" fill=\"none\"/>",
        x(0.0),
        y(max_risk),
        x(0.0),
        y(0.0),
        x(1.0),
        y(0.0)
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">coverage</text>",
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 {})\">risk (max {:.3})</text>",
        h / 2.0,
        h / 2.0,
        max_risk
    );
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = String::new();
        for &(c, r) in &curve.points {
            let _ = write!(pts, "{:.2},{:.2} ", x(c), y(r));
        }
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" stroke=\"{color}\" fill=\"none\" stroke-width=\"1.5\"/>",
            pts.trim_end()
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            w - pad - 90.0,
            pad + 14.0 * i as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
