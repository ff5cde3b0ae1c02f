//! Comparison tables, ablation tables and plots from an evaluated run.

use std::fmt::Write as _;
use std::fs;

use serde::de::DeserializeOwned;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::experiment::{read_results, AblationCell, Layout, Metrics, Timing};
use crate::plots;

pub const TABLE_HEADER: &str = "method,success_rate,mean_time_s,mean_cost";

pub const PLOT_FILES: [&str; 3] = ["success_rate.svg", "cost_histogram.svg", "learning_curves.svg"];

fn read_json<T: DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let raw = fs::read(path).map_err(|_| HarnessError::missing(path, "run eval first"))?;
    Ok(serde_json::from_slice(&raw)?)
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(String::new, |v| format!("{v:.digits$}"))
}

pub fn comparison_csv(metrics: &Metrics, timing: &Timing) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for m in &metrics.methods {
        let t = timing.methods.iter().find(|t| t.method == m.method).map(|t| t.mean_time_s);
        let _ = writeln!(out, "{},{:.4},{},{}", m.method, m.success_rate, opt(t, 4), opt(m.mean_cost, 4));
    }
    out
}

pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from("setting,method,success_rate\n");
    for c in cells {
        let _ = writeln!(out, "{},{},{}", c.label, c.method, opt(c.success_rate, 4));
    }
    out
}

fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("{}\n", parts.join("  ").trim_end())
    };
    let mut out = line(header.to_vec());
    out.push_str(&line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(|s| s.as_str()).collect()));
    for r in rows {
        out.push_str(&line(r.iter().map(|s| s.as_str()).collect()));
    }
    out
}

pub fn human_report(metrics: &Metrics, timing: &Timing) -> String {
    let mut out = format!("seed {}  test scenes {}  timing runs per instance {}\n\n", metrics.seed, metrics.test_scenes, timing.timing_repeats);
    let rows: Vec<Vec<String>> = metrics
        .methods
        .iter()
        .map(|m| {
            let t = timing.methods.iter().find(|t| t.method == m.method);
            vec![
                m.method.clone(),
                format!("{:.1}%", 100.0 * m.success_rate),
                opt(t.map(|t| t.mean_time_s), 3),
                opt(t.map(|t| t.median_time_s), 3),
                opt(m.mean_cost, 3),
                m.repairs_triggered.to_string(),
            ]
        })
        .collect();
    out.push_str(&text_table(&["method", "success", "mean_s", "median_s", "mean_cost", "repairs"], &rows));
    for (title, cells) in [
        ("Refinement and guidance", &metrics.ablations.refinement_guidance),
        ("Refinement variants", &metrics.ablations.refinement_variants),
    ] {
        let _ = writeln!(out, "\n{title}");
        let rows: Vec<Vec<String>> = cells
            .iter()
            .map(|c| vec![c.label.clone(), c.method.clone(), c.success_rate.map_or("n/a".into(), |v| format!("{:.1}%", 100.0 * v))])
            .collect();
        out.push_str(&text_table(&["setting", "method", "success"], &rows));
    }
    if !metrics.curves.is_empty() {
        out.push_str("\nSuccess by training steps\n");
        let rows: Vec<Vec<String>> = metrics.curves.iter().map(|c| vec![c.steps.to_string(), opt(c.cascade, 3), opt(c.flat, 3)]).collect();
        out.push_str(&text_table(&["steps", "cascade", "flat"], &rows));
    }
    if let Some(c) = &metrics.classifier {
        let _ = writeln!(
            out,
            "\nCollision classifier: F1 {:.4}, precision {:.4}, recall {:.4} on {} held-out samples",
            c.f1, c.precision, c.recall, c.test_samples
        );
    }
    out
}

/// Writes `table.csv`, `table.txt`, the ablation CSVs and the SVG plots.
pub fn report_stage(_cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let metrics: Metrics = read_json(&layout.metrics())?;
    let timing: Timing = read_json(&layout.timing())?;
    let root = &layout.root;
    fs::write(root.join("table.csv"), comparison_csv(&metrics, &timing))?;
    fs::write(root.join("table.txt"), human_report(&metrics, &timing))?;
    fs::write(root.join("ablation_refinement_guidance.csv"), ablation_csv(&metrics.ablations.refinement_guidance))?;
    fs::write(root.join("ablation_refinement_variants.csv"), ablation_csv(&metrics.ablations.refinement_variants))?;

    let dir = layout.plots();
    fs::create_dir_all(&dir)?;
    let labels: Vec<String> = metrics.methods.iter().map(|m| m.method.clone()).collect();
    let rates: Vec<f64> = metrics.methods.iter().map(|m| m.success_rate).collect();
    fs::write(dir.join(PLOT_FILES[0]), plots::bar_chart("Success rate by method", "success rate", &labels, &rates, 1.0))?;

    let mut costs = Vec::new();
    for m in &metrics.methods {
        let res = read_results(&layout.results(&m.method))?;
        costs.push((m.method.clone(), res.iter().filter(|r| r.success).map(|r| r.cost).collect::<Vec<f64>>()));
    }
    fs::write(dir.join(PLOT_FILES[1]), plots::histograms("Cost of successful plans", "path length", &costs, 20))?;

    let curve = |f: fn(&crate::experiment::CurvePoint) -> Option<f64>| -> Vec<(f64, f64)> {
        metrics.curves.iter().filter_map(|c| f(c).map(|v| (c.steps as f64, v))).collect()
    };
    let series = vec![("cascade".to_string(), curve(|c| c.cascade)), ("flat".to_string(), curve(|c| c.flat))];
    fs::write(
        dir.join(PLOT_FILES[2]),
        plots::line_chart("Success rate by training steps", "training steps", "success rate", &series, (0.0, 1.0)),
    )?;
    Ok(())
}
