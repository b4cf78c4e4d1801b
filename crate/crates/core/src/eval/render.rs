//! CSV, Markdown and SVG emission for benchmark reports and epoch traces.

use std::fmt::Write as _;
use std::path::Path;

use crate::dml::MeanSd;
use crate::error::{Error, Result};
use crate::eval::benchmark::BenchmarkReport;
use crate::eval::trace::EpochTrace;

pub const TRACE_HEADER: &str = "epoch,theta_hat,ci_low,ci_high,r2_y_rel,r2_d_rel";
pub const REPORT_HEADER: &str =
    "model,learner,modalities,repeats,r2_y_rel_mean,r2_y_rel_sd,r2_d_rel_mean,r2_d_rel_sd,theta_mean,theta_sd";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_pair(v: Option<MeanSd>) -> String {
    match v {
        Some(m) => format!("{},{}", m.mean, m.sd),
        None => ",".into(),
    }
}

pub fn trace_csv(trace: &EpochTrace) -> Result<String> {
    if trace.is_empty() {
        return Err(Error::Config("cannot render an empty trace".into()));
    }
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for p in &trace.points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.epoch,
            p.theta_hat,
            p.ci_low,
            p.ci_high,
            opt(p.r2_y_rel),
            opt(p.r2_d_rel)
        );
    }
    Ok(out)
}

/// Line chart of theta per epoch over a shaded confidence band, with optional
/// labeled horizontal reference lines.
pub fn trace_svg(trace: &EpochTrace, references: &[(&str, f64)]) -> Result<String> {
    if trace.is_empty() {
        return Err(Error::Config("cannot render an empty trace".into()));
    }
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 20.0, 40.0);
    let e0 = trace.points[0].epoch as f64;
    let e1 = trace.points.last().map(|p| p.epoch as f64).unwrap_or(e0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in &trace.points {
        lo = lo.min(p.ci_low);
        hi = hi.max(p.ci_high);
    }
    for &(_, v) in references {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |e: f64| {
        if e1 > e0 {
            left + (e - e0) / (e1 - e0) * (w - left - right)
        } else {
            left + 0.5 * (w - left - right)
        }
    };
    let y = |v: f64| top + (hi - v) / (hi - lo) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let band: Vec<String> = trace
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", x(p.epoch as f64), y(p.ci_high)))
        .chain(
            trace
                .points
                .iter()
                .rev()
                .map(|p| format!("{:.2},{:.2}", x(p.epoch as f64), y(p.ci_low))),
        )
        .collect();
    let _ = writeln!(
        s,
        r##"<polygon class="ci-band" points="{}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##,
        band.join(" ")
    );
    for &(label, v) in references {
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{:.2}" y1="{yy:.2}" y2="{yy:.2}" stroke="#636363" stroke-dasharray="4 3"/><text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{label}</text>"##,
            w - right,
            w - right - 4.0,
            y(v) - 4.0,
            yy = y(v)
        );
    }
    let line: Vec<String> = trace
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", x(p.epoch as f64), y(p.theta_hat)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline class="theta" points="{}" fill="none" stroke="#08519c" stroke-width="2"/>"##,
        line.join(" ")
    );
    let _ = writeln!(
        s,
        r##"<line x1="{left}" x2="{left}" y1="{top}" y2="{:.2}" stroke="black"/><line x1="{left}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="black"/>"##,
        h - bottom,
        w - right,
        h - bottom,
        h - bottom
    );
    for v in [lo + pad, 0.5 * (lo + hi), hi - pad] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{v:.3}</text>"#,
            left - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">epoch {e0} to {e1}</text>"#,
        0.5 * (left + w - right),
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-size="12" transform="rotate(-90 14 {:.2})" text-anchor="middle">theta_hat</text>"#,
        0.5 * h,
        0.5 * h
    );
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn report_csv(report: &BenchmarkReport) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.name,
            r.learner_tag,
            r.modalities.join(";"),
            r.repeats.len(),
            opt_pair(r.r2_y_rel),
            opt_pair(r.r2_d_rel),
            r.theta.mean,
            r.theta.sd
        );
    }
    out
}

/// Models as columns; rows `r2(Y, l)`, `r2(D, m)` and `theta`, each
/// `mean ± sd` over repeats, followed by the bounds.
pub fn report_markdown(report: &BenchmarkReport) -> String {
    let cell = |v: Option<MeanSd>| v.map(|m| m.to_string()).unwrap_or_else(|| "n/a".into());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| | {} |",
        report.rows.iter().map(|r| format!("**{}**", r.name)).collect::<Vec<_>>().join(" | ")
    );
    let _ = writeln!(out, "|---|{}", "---|".repeat(report.rows.len()));
    let _ = writeln!(
        out,
        "| r²(Y, l̂) | {} |",
        report.rows.iter().map(|r| cell(r.r2_y_rel)).collect::<Vec<_>>().join(" | ")
    );
    let _ = writeln!(
        out,
        "| r²(D, m̂) | {} |",
        report.rows.iter().map(|r| cell(r.r2_d_rel)).collect::<Vec<_>>().join(" | ")
    );
    let _ = writeln!(
        out,
        "| θ̂ | {} |",
        report.rows.iter().map(|r| cell(Some(r.theta))).collect::<Vec<_>>().join(" | ")
    );
    out.push('\n');
    let b = &report.bounds;
    let _ = write!(out, "Bounds: θ₀ = {}, OLS θ̂ = {:.4}", b.theta0, b.ols_theta);
    if let Some(p) = b.attenuated_plim {
        let _ = write!(out, ", attenuated limit = {p:.4}");
    }
    if let (Some(y), Some(d)) = (b.oracle_r2_y, b.oracle_r2_d) {
        let _ = write!(out, ", oracle R²(Y) = {y:.4}, oracle R²(D) = {d:.4}");
    }
    out.push('\n');
    if report.rows.iter().any(|r| r.r2_rel_above_one) {
        out.push_str("\nSome repeats have a relative r² above 1 (finite-sample noise; values are not clamped).\n");
    }
    let _ = writeln!(out, "\nSplits: {}. Config digest: `{}`.", report.split_descriptor, report.config_digest);
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.csv`, `report.md` and `report.json` into `dir`.
pub fn write_report(dir: &Path, report: &BenchmarkReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("report.csv"), &report_csv(report))?;
    write_text(&dir.join("report.md"), &report_markdown(report))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Numerical(e.to_string()))?;
    write_text(&dir.join("report.json"), &json)
}

/// Writes `trace.csv` and `trace.svg` into `dir`.
pub fn write_trace(dir: &Path, trace: &EpochTrace, references: &[(&str, f64)]) -> Result<()> {
    let csv = trace_csv(trace)?;
    let svg = trace_svg(trace, references)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("trace.csv"), &csv)?;
    write_text(&dir.join("trace.svg"), &svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::trace::TracePoint;

    fn trace() -> EpochTrace {
        EpochTrace {
            points: (1..=3)
                .map(|e| TracePoint {
                    epoch: e,
                    theta_hat: 0.1 * e as f64,
                    ci_low: 0.1 * e as f64 - 0.05,
                    ci_high: 0.1 * e as f64 + 0.05,
                    r2_y_rel: Some(0.9),
                    r2_d_rel: None,
                })
                .collect(),
        }
    }

    #[test]
    fn trace_outputs() {
        let csv = trace_csv(&trace()).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(TRACE_HEADER));
        assert_eq!(lines.next(), Some("1,0.1,0.05,0.15000000000000002,0.9,"));
        assert_eq!(csv.lines().count(), 4);
        let svg = trace_svg(&trace(), &[("target", 0.25)]).unwrap();
        assert!(svg.contains("<polygon class=\"ci-band\""));
        assert!(svg.contains(">target</text>"));
        assert!(trace_csv(&EpochTrace::default()).is_err());
        assert!(trace_svg(&EpochTrace::default(), &[]).is_err());
    }
}
