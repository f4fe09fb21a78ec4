//! Convergence detection, the per-round cost models and run reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trailing moving average followed by a patience test against the running
/// maximum of the smoothed series. `epsilon` is in accuracy percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRule {
    pub window: usize,
    pub epsilon: f64,
    pub patience: usize,
}

impl Default for ConvergenceRule {
    fn default() -> Self {
        Self { window: 12, epsilon: 0.1, patience: 10 }
    }
}

impl ConvergenceRule {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.patience == 0 || !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid convergence rule {self:?}")));
        }
        Ok(())
    }
}

/// Trailing mean of width `window`; the first points average what is available.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, &v) in series.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= series[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// First round at which the smoothed accuracy has failed to exceed its
/// previous maximum by at least `epsilon` for `patience` consecutive rounds.
pub fn detect_convergence(accuracies: &[f64], rule: &ConvergenceRule) -> Option<usize> {
    let smoothed = moving_average(accuracies, rule.window);
    let mut best = *smoothed.first()?;
    let mut stalled = 0;
    for (t, &s) in smoothed.iter().enumerate().skip(1) {
        if s - best < rule.epsilon {
            stalled += 1;
            if stalled >= rule.patience {
                return Some(t);
            }
        } else {
            stalled = 0;
        }
        best = best.max(s);
    }
    None
}

/// Cost of `n` rounds that all pay the encryption overhead.
pub fn cost_fedavg_he(n: f64, cost_fedavg: f64, cost_he: f64) -> f64 {
    n * (cost_fedavg + cost_he)
}

/// Cost of `n_hat` interleaved rounds of which only `1 - rho` pay for encryption.
pub fn cost_heintfl(n_hat: f64, rho: f64, cost_fedavg: f64, cost_he_hat: f64) -> f64 {
    n_hat * cost_fedavg + (1.0 - rho) * n_hat * cost_he_hat
}

/// Headline numbers of one training run, per client, up to convergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub rho: f64,
    pub eta: f64,
    pub baseline: bool,
    pub converged: bool,
    pub rounds_to_convergence: usize,
    pub accuracy_pct: f64,
    pub ciphertext_mb: f64,
    pub total_comm_mb: f64,
    pub comp_time_s: f64,
}

pub const REPORT_FIELDS: [&str; 5] = ["rounds_to_convergence", "ciphertext_mb", "total_comm_mb", "comp_time_s", "accuracy_pct"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub rho: f64,
    pub eta: f64,
    pub baseline: bool,
    pub repetitions: usize,
    pub averaged: usize,
    /// Averages in [`REPORT_FIELDS`] order.
    pub values: [f64; 5],
    /// `100 * (x - baseline) / baseline`, `None` where the baseline is zero.
    pub deltas_pct: [Option<f64>; 5],
}

impl ReportRow {
    pub fn value(&self, field: &str) -> Option<f64> {
        REPORT_FIELDS.iter().position(|f| *f == field).map(|i| self.values[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

fn summary_values(s: &RunSummary) -> [f64; 5] {
    [s.rounds_to_convergence as f64, s.ciphertext_mb, s.total_comm_mb, s.comp_time_s, s.accuracy_pct]
}

/// Groups runs by label (first-appearance order), drops the best and worst
/// run of each group by accuracy and averages the remainder.
pub fn build_report(runs: &[RunSummary]) -> Result<ExperimentReport> {
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let mut rows = Vec::with_capacity(labels.len());
    for label in labels {
        let mut group: Vec<&RunSummary> = runs.iter().filter(|r| r.label == label).collect();
        if group.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "configuration '{label}' has {} repetitions, at least 3 are needed",
                group.len()
            )));
        }
        let first = group[0];
        if group.iter().any(|r| r.rho != first.rho || r.eta != first.eta || r.baseline != first.baseline) {
            return Err(Error::InvalidArgument(format!("runs labelled '{label}' disagree on rho, eta or baseline flag")));
        }
        group.sort_by(|a, b| a.accuracy_pct.total_cmp(&b.accuracy_pct));
        let kept = &group[1..group.len() - 1];
        let mut values = [0.0; 5];
        for r in kept {
            for (acc, v) in values.iter_mut().zip(summary_values(r)) {
                *acc += v;
            }
        }
        for v in &mut values {
            *v /= kept.len() as f64;
        }
        rows.push(ReportRow {
            label: label.to_string(),
            rho: first.rho,
            eta: first.eta,
            baseline: first.baseline,
            repetitions: group.len(),
            averaged: kept.len(),
            values,
            deltas_pct: [None; 5],
        });
    }
    let baselines: Vec<usize> = rows.iter().enumerate().filter(|(_, r)| r.baseline).map(|(i, _)| i).collect();
    let [b] = baselines[..] else {
        return Err(Error::InvalidArgument(format!("expected exactly one baseline configuration, found {}", baselines.len())));
    };
    let base = rows[b].values;
    for row in &mut rows {
        for i in 0..5 {
            row.deltas_pct[i] = (base[i] != 0.0).then(|| 100.0 * (row.values[i] - base[i]) / base[i]);
        }
    }
    Ok(ExperimentReport { rows })
}

impl ExperimentReport {
    /// Fixed-width table with deltas against the baseline in brackets.
    pub fn to_text_table(&self) -> String {
        let headers = ["config", "rho", "eta", "Convergence [#rounds]", "Ciphertext [MB]", "Client tot. comm. cost [MB]", "Client tot. comp. time [s]", "Accuracy [%]"];
        let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|h| h.to_string()).collect()];
        for r in &self.rows {
            let mut line = vec![
                if r.baseline { format!("{} (baseline)", r.label) } else { r.label.clone() },
                format!("{:.2}", r.rho),
                format!("{:.2}", r.eta),
            ];
            for i in 0..5 {
                let v = match i {
                    0 => format!("{:.1}", r.values[i]),
                    1 | 2 => format!("{:.4}", r.values[i]),
                    _ => format!("{:.2}", r.values[i]),
                };
                line.push(match r.deltas_pct[i] {
                    Some(d) if !r.baseline => format!("{v} ({d:+.1}%)"),
                    _ => v,
                });
            }
            cells.push(line);
        }
        let widths: Vec<usize> = (0..headers.len()).map(|c| cells.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, line) in cells.iter().enumerate() {
            let padded: Vec<String> = line.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            writeln!(out, "{}", padded.join(" | ").trim_end()).expect("writing to a String");
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                writeln!(out, "{}", rule.join("-+-")).expect("writing to a String");
            }
        }
        out
    }
}

/// A labelled accuracy curve for [`accuracy_chart_svg`].
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<f64>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Standalone SVG line chart of accuracy (percent) against round.
pub fn accuracy_chart_svg(curves: &[Curve]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 56.0, 150.0, 20.0, 44.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let rounds = curves.iter().map(|c| c.points.len()).max().unwrap_or(0).max(2);
    let x = |t: usize| left + pw * t as f64 / (rounds - 1) as f64;
    let y = |a: f64| top + ph * (1.0 - a.clamp(0.0, 100.0) / 100.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for tick in (0..=100).step_by(20) {
        let ty = y(tick as f64);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{ty:.1}" x2="{:.1}" y2="{ty:.1}" stroke="#ddd"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{tick}</text>"#, left - 6.0, ty + 4.0);
    }
    let step = (rounds / 8).max(1);
    for t in (0..rounds).step_by(step) {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#, x(t), top + ph + 16.0);
    }
    let _ = writeln!(s, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">round</text>"#, left + pw / 2.0, h - 8.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">accuracy [%]</text>"#, top + ph / 2.0, top + ph / 2.0);
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c.points.iter().enumerate().map(|(t, &a)| format!("{:.1},{:.1}", x(t), y(a))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = top + 14.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, left + pw + 10.0, left + pw + 28.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, left + pw + 32.0, ly + 4.0, escape(&c.label));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
