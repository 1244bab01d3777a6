//! Sweep reporting: the multiplier-ablation table, its CSV export, and the
//! small self-contained SVG line plots embedded in run reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::pipeline::ImageSource;

use super::EvalError;

/// One finished run's headline numbers, as consumed by the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRunSummary {
    pub run_id: String,
    pub seed: u64,
    pub multiplier: f64,
    pub image_source: ImageSource,
    pub real_count: usize,
    pub synthetic_count: usize,
    /// Content hash of the shared labeled corpus; every run in a sweep must
    /// agree on it or the comparison is meaningless.
    pub corpus_hash: String,
    /// Test accuracy of the run's student.
    pub accuracy: f64,
    /// Additional named metrics carried into the table (numeric accuracy,
    /// counterexample gap, …).
    pub extra_metrics: BTreeMap<String, f64>,
}

/// One (multiplier, image source) group aggregated across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub multiplier: f64,
    pub image_source: ImageSource,
    pub real_count: usize,
    pub synthetic_count: usize,
    pub seeds: Vec<u64>,
    /// Per-seed accuracies, aligned with `seeds`.
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    pub median_accuracy: f64,
    pub max_accuracy: f64,
    /// Mean accuracy gain over the multiplier-1 baseline, in percent.
    /// Reported as 0.0 if the baseline mean is 0 (nothing to compare to).
    pub gain_pct: f64,
    /// Group means of any extra metrics (averaged over the runs carrying
    /// each key).
    pub extra_means: BTreeMap<String, f64>,
}

/// The sweep ablation: accuracy (and friends) against the augmentation
/// multiplier, seed-aggregated, relative to the no-augmentation baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// Rows sorted by multiplier, then image source.
    pub rows: Vec<AblationRow>,
    /// Mean accuracy over every multiplier-1 run.
    pub baseline_accuracy: f64,
}

impl AblationTable {
    /// Fixed-width text rendering for terminals and logs.
    pub fn to_text(&self) -> String {
        let extras: BTreeSet<&str> =
            self.rows.iter().flat_map(|r| r.extra_means.keys().map(String::as_str)).collect();
        let mut out = String::new();
        let _ = write!(
            out,
            "{:<11} {:<20} {:>6} {:>10} {:>6} {:>9} {:>9} {:>9} {:>9} {:>8}",
            "multiplier", "source", "real", "synthetic", "seeds", "mean-acc", "min-acc", "med-acc",
            "max-acc", "gain%"
        );
        for name in &extras {
            let _ = write!(out, " {name:>14}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(
                out,
                "{:<11.2} {:<20} {:>6} {:>10} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>+8.2}",
                row.multiplier,
                row.image_source.label(),
                row.real_count,
                row.synthetic_count,
                row.seeds.len(),
                row.mean_accuracy,
                row.min_accuracy,
                row.median_accuracy,
                row.max_accuracy,
                row.gain_pct,
            );
            for name in &extras {
                match row.extra_means.get(*name) {
                    Some(v) => {
                        let _ = write!(out, " {v:>14.4}");
                    }
                    None => {
                        let _ = write!(out, " {:>14}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Serializes one row per run — the raw material behind the table — with a
/// header line. Extra metric columns are the union of all runs' keys;
/// absent values are empty cells.
pub fn sweep_csv(runs: &[SweepRunSummary]) -> String {
    let extras: BTreeSet<&str> =
        runs.iter().flat_map(|r| r.extra_metrics.keys().map(String::as_str)).collect();
    let mut out = String::from("run_id,seed,multiplier,image_source,real_count,synthetic_count,accuracy");
    for name in &extras {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for run in runs {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            run.run_id,
            run.seed,
            run.multiplier,
            run.image_source.label(),
            run.real_count,
            run.synthetic_count,
            run.accuracy,
        );
        for name in &extras {
            match run.extra_metrics.get(*name) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Aggregates per-run summaries into the multiplier ablation.
///
/// Requires at least two runs over the same labeled corpus, including at
/// least one multiplier-1 baseline run.
pub fn ablation_sweep_report(runs: &[SweepRunSummary]) -> Result<AblationTable, EvalError> {
    if runs.len() < 2 {
        return Err(EvalError::NotASweep(runs.len()));
    }
    let first_hash = &runs[0].corpus_hash;
    if let Some(other) = runs.iter().find(|r| &r.corpus_hash != first_hash) {
        return Err(EvalError::MismatchedCorpus {
            a: first_hash.clone(),
            b: other.corpus_hash.clone(),
        });
    }

    // Positive floats order the same as their bit patterns, which makes the
    // multiplier usable as a BTreeMap key.
    let mut groups: BTreeMap<(u64, &str), Vec<&SweepRunSummary>> = BTreeMap::new();
    for run in runs {
        groups
            .entry((run.multiplier.to_bits(), run.image_source.label()))
            .or_default()
            .push(run);
    }

    let baseline_runs: Vec<&&SweepRunSummary> =
        groups.values().flatten().filter(|r| r.multiplier == 1.0).collect();
    if baseline_runs.is_empty() {
        return Err(EvalError::MissingBaseline);
    }
    let baseline_accuracy =
        baseline_runs.iter().map(|r| r.accuracy).sum::<f64>() / baseline_runs.len() as f64;

    let rows = groups
        .into_values()
        .map(|group| {
            let seeds: Vec<u64> = group.iter().map(|r| r.seed).collect();
            let accuracies: Vec<f64> = group.iter().map(|r| r.accuracy).collect();
            let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
            let min_accuracy = accuracies.iter().cloned().fold(f64::INFINITY, f64::min);
            let max_accuracy = accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let median_accuracy = median(&accuracies);
            let gain_pct = if baseline_accuracy > 0.0 {
                (mean_accuracy - baseline_accuracy) / baseline_accuracy * 100.0
            } else {
                0.0
            };
            let keys: BTreeSet<&String> =
                group.iter().flat_map(|r| r.extra_metrics.keys()).collect();
            let extra_means = keys
                .into_iter()
                .map(|key| {
                    let values: Vec<f64> =
                        group.iter().filter_map(|r| r.extra_metrics.get(key)).copied().collect();
                    (key.clone(), values.iter().sum::<f64>() / values.len() as f64)
                })
                .collect();
            AblationRow {
                multiplier: group[0].multiplier,
                image_source: group[0].image_source,
                real_count: group[0].real_count,
                synthetic_count: group[0].synthetic_count,
                seeds,
                accuracies,
                mean_accuracy,
                min_accuracy,
                median_accuracy,
                max_accuracy,
                gain_pct,
                extra_means,
            }
        })
        .collect();

    Ok(AblationTable { rows, baseline_accuracy })
}

/// Median of a non-empty slice; even lengths average the middle pair.
fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("accuracies are finite"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    }
}

// ---------------------------------------------------------------------------
// SVG line plots
// ---------------------------------------------------------------------------

/// One named line in a plot.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 44.0;
const MARGIN_B: f64 = 52.0;
const PALETTE: [&str; 5] = ["#4a78b5", "#c0504d", "#6aa84f", "#8064a2", "#e69138"];

/// Renders a minimal, self-contained SVG line plot. Pure text generation —
/// deterministic, no external assets — so report files stay diff-friendly.
pub fn line_plot_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[PlotSeries],
) -> String {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (x_min, x_max) = pad_range(
        all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y_min, y_max) = pad_range(
        all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let sx = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * (PLOT_W - MARGIN_L - MARGIN_R);
    let sy = |y: f64| PLOT_H - MARGIN_B - (y - y_min) / (y_max - y_min) * (PLOT_H - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {PLOT_W} {PLOT_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(
        svg,
        r#"<rect width="{PLOT_W}" height="{PLOT_H}" fill="white"/><text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        PLOT_W / 2.0,
        escape(title)
    );
    // Axes.
    let _ = write!(
        svg,
        r##"<line x1="{l:.2}" y1="{b:.2}" x2="{r:.2}" y2="{b:.2}" stroke="#333"/><line x1="{l:.2}" y1="{t:.2}" x2="{l:.2}" y2="{b:.2}" stroke="#333"/>"##,
        l = MARGIN_L,
        r = PLOT_W - MARGIN_R,
        t = MARGIN_T,
        b = PLOT_H - MARGIN_B,
    );
    let _ = write!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text><text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        (MARGIN_L + PLOT_W - MARGIN_R) / 2.0,
        PLOT_H - 12.0,
        escape(x_label),
        PLOT_H / 2.0,
        PLOT_H / 2.0,
        escape(y_label),
    );
    // Ticks.
    for i in 0..=4 {
        let fx = x_min + (x_max - x_min) * i as f64 / 4.0;
        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        let _ = write!(
            svg,
            r##"<line x1="{x:.2}" y1="{b:.2}" x2="{x:.2}" y2="{b2:.2}" stroke="#333"/><text x="{x:.2}" y="{ty:.2}" text-anchor="middle">{fx:.3}</text>"##,
            x = sx(fx),
            b = PLOT_H - MARGIN_B,
            b2 = PLOT_H - MARGIN_B + 5.0,
            ty = PLOT_H - MARGIN_B + 18.0,
        );
        let _ = write!(
            svg,
            r##"<line x1="{l2:.2}" y1="{y:.2}" x2="{l:.2}" y2="{y:.2}" stroke="#333"/><text x="{tx:.2}" y="{y2:.2}" text-anchor="end">{fy:.3}</text>"##,
            l = MARGIN_L,
            l2 = MARGIN_L - 5.0,
            y = sy(fy),
            tx = MARGIN_L - 8.0,
            y2 = sy(fy) + 4.0,
        );
    }
    // Series.
    for (idx, s) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let path: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = write!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = write!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        let _ = write!(
            svg,
            r#"<rect x="{rx:.2}" y="{ry:.2}" width="10" height="10" fill="{color}"/><text x="{tx:.2}" y="{ty:.2}">{}</text>"#,
            escape(&s.name),
            rx = PLOT_W - MARGIN_R - 150.0,
            ry = MARGIN_T + 16.0 * idx as f64,
            tx = PLOT_W - MARGIN_R - 135.0,
            ty = MARGIN_T + 16.0 * idx as f64 + 9.0,
        );
    }
    svg.push_str("</svg>");
    svg
}

/// Pads a data range by 5% and rescues empty or degenerate ranges so the
/// coordinate transforms never divide by zero.
fn pad_range(min: f64, max: f64) -> (f64, f64) {
    if !min.is_finite() || !max.is_finite() {
        return (0.0, 1.0);
    }
    if min == max {
        return (min - 0.5, max + 0.5);
    }
    let pad = (max - min) * 0.05;
    (min - pad, max + pad)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(
        id: &str,
        seed: u64,
        multiplier: f64,
        accuracy: f64,
        extras: &[(&str, f64)],
    ) -> SweepRunSummary {
        SweepRunSummary {
            run_id: id.to_string(),
            seed,
            multiplier,
            image_source: ImageSource::Mixed,
            real_count: 2000,
            synthetic_count: ((multiplier - 1.0) * 2000.0).round() as usize,
            corpus_hash: "abc123".to_string(),
            accuracy,
            extra_metrics: extras.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn the_table_groups_by_multiplier_and_computes_gains() {
        let runs = vec![
            run("m1-s0", 0, 1.0, 0.50, &[]),
            run("m1-s1", 1, 1.0, 0.50, &[]),
            run("m3-s0", 0, 3.0, 0.60, &[("numeric", 0.2)]),
            run("m3-s1", 1, 3.0, 0.70, &[("numeric", 0.4)]),
        ];
        let table = ablation_sweep_report(&runs).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.baseline_accuracy, 0.5);
        assert_eq!(table.rows[0].multiplier, 1.0);
        assert_eq!(table.rows[0].gain_pct, 0.0);
        assert_eq!(table.rows[1].multiplier, 3.0);
        assert_eq!(table.rows[1].seeds, vec![0, 1]);
        assert!((table.rows[1].mean_accuracy - 0.65).abs() < 1e-12);
        assert!((table.rows[1].gain_pct - 30.0).abs() < 1e-9);
        assert_eq!(table.rows[1].min_accuracy, 0.6);
        assert!((table.rows[1].median_accuracy - 0.65).abs() < 1e-12);
        assert_eq!(table.rows[1].max_accuracy, 0.7);
        assert!((table.rows[1].extra_means["numeric"] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn odd_sized_groups_take_the_middle_accuracy_as_median() {
        let runs = vec![
            run("m1-s0", 0, 1.0, 0.50, &[]),
            run("m3-s0", 0, 3.0, 0.90, &[]),
            run("m3-s1", 1, 3.0, 0.10, &[]),
            run("m3-s2", 2, 3.0, 0.60, &[]),
        ];
        let table = ablation_sweep_report(&runs).unwrap();
        assert_eq!(table.rows[1].median_accuracy, 0.6);
        assert_eq!(table.rows[1].min_accuracy, 0.1);
        assert_eq!(table.rows[1].max_accuracy, 0.9);
    }

    #[test]
    fn sweeps_need_two_runs_a_shared_corpus_and_a_baseline() {
        let single = vec![run("m1-s0", 0, 1.0, 0.5, &[])];
        assert!(matches!(
            ablation_sweep_report(&single).unwrap_err(),
            EvalError::NotASweep(1)
        ));

        let mut mismatched = vec![
            run("m1-s0", 0, 1.0, 0.5, &[]),
            run("m3-s0", 0, 3.0, 0.6, &[]),
        ];
        mismatched[1].corpus_hash = "zzz999".to_string();
        assert!(matches!(
            ablation_sweep_report(&mismatched).unwrap_err(),
            EvalError::MismatchedCorpus { .. }
        ));

        let no_baseline = vec![
            run("m2-s0", 0, 2.0, 0.5, &[]),
            run("m3-s0", 0, 3.0, 0.6, &[]),
        ];
        assert!(matches!(
            ablation_sweep_report(&no_baseline).unwrap_err(),
            EvalError::MissingBaseline
        ));
    }

    #[test]
    fn the_text_table_lists_each_group_once() {
        let runs = vec![
            run("m1-s0", 0, 1.0, 0.50, &[]),
            run("m3-s0", 0, 3.0, 0.62, &[("gap", 0.1)]),
        ];
        let text = ablation_sweep_report(&runs).unwrap().to_text();
        assert_eq!(text.lines().count(), 3, "header plus two rows:\n{text}");
        assert!(text.contains("multiplier"));
        assert!(text.contains("gain%"));
        assert!(text.contains("mixed"));
        assert!(text.contains("gap"));
        assert!(text.contains("+24.00"), "gain percent is signed:\n{text}");
    }

    #[test]
    fn the_csv_keeps_one_row_per_run() {
        let runs = vec![
            run("m1-s0", 0, 1.0, 0.50, &[("gap", 0.05)]),
            run("m1-s1", 1, 1.0, 0.52, &[]),
            run("m3-s0", 0, 3.0, 0.62, &[("gap", 0.1)]),
        ];
        let csv = sweep_csv(&runs);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "run_id,seed,multiplier,image_source,real_count,synthetic_count,accuracy,gap"
        );
        assert!(lines[1].starts_with("m1-s0,0,1,mixed,2000,0,0.5,"));
        assert!(lines[2].ends_with(','), "missing metric is an empty cell");
    }

    #[test]
    fn plots_render_one_polyline_per_series_without_nans() {
        let series = vec![
            PlotSeries {
                name: "student".to_string(),
                points: vec![(1.0, 0.5), (2.0, 0.55), (3.0, 0.6)],
            },
            PlotSeries { name: "baseline".to_string(), points: vec![(1.0, 0.5), (3.0, 0.5)] },
        ];
        let svg = line_plot_svg("accuracy vs multiplier", "multiplier", "accuracy", &series);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(!svg.contains("NaN"));
        assert!(svg.contains("accuracy vs multiplier"));
        assert_eq!(
            svg,
            line_plot_svg("accuracy vs multiplier", "multiplier", "accuracy", &series),
            "plot generation is deterministic"
        );
    }

    #[test]
    fn degenerate_plot_ranges_still_render() {
        let one_point =
            vec![PlotSeries { name: "p".to_string(), points: vec![(0.9, 0.25)] }];
        let svg = line_plot_svg("t", "x", "y", &one_point);
        assert!(!svg.contains("NaN"));
        assert!(svg.contains("<circle"));

        let empty: Vec<PlotSeries> = Vec::new();
        let svg = line_plot_svg("t", "x", "y", &empty);
        assert!(!svg.contains("NaN"));
        assert!(svg.starts_with("<svg"));
    }
}
