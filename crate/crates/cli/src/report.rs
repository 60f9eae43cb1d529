//! `report`: summary tables, significance tests and plots from a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, Context};
use relcon::stats::{mean_std, two_proportion_z, ProportionSample};
use relcon::store::write_atomic;
use serde::Deserialize;

use crate::run::EVAL_SUMMARY_CSV;

#[derive(Debug, Deserialize)]
struct SummaryRow {
    seed: u64,
    method: String,
    aggregation: String,
    n_test: usize,
    correct: Option<u64>,
    causal_successes: Option<u64>,
    accuracy: f64,
    causality: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct SweepCsvRow {
    axis: String,
    value: f64,
    method: String,
    accuracy_mean: f64,
    accuracy_std: f64,
    causality_mean: Option<f64>,
    causality_std: Option<f64>,
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Returns the names of the files written.
pub fn report(runs: &Path, out: &Path, deterministic: bool) -> anyhow::Result<Vec<String>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();

    let summary_path = runs.join(EVAL_SUMMARY_CSV);
    if summary_path.is_file() {
        let rows: Vec<SummaryRow> = read_csv(&summary_path)?;
        written.extend(eval_tables(&rows, out)?);
    }

    let mut sweeps: Vec<_> = std::fs::read_dir(runs)
        .with_context(|| format!("reading {}", runs.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("sweep-") && n.ends_with(".csv"))
        })
        .collect();
    sweeps.sort();
    for path in sweeps {
        let rows: Vec<SweepCsvRow> = read_csv(&path)?;
        let Some(axis) = rows.first().map(|r| r.axis.clone()) else {
            continue;
        };
        for metric in ["accuracy", "causality"] {
            let series = sweep_series(&rows, metric);
            if series.is_empty() {
                continue;
            }
            let svg = line_plot(
                &format!("{metric} vs {axis}"),
                &axis,
                metric,
                &series,
                deterministic,
            );
            let name = format!("sweep-{axis}-{metric}.svg");
            write_atomic(&out.join(&name), svg.as_bytes())?;
            written.push(name);
        }
    }
    if written.is_empty() {
        return Err(anyhow!(
            "{} holds neither {EVAL_SUMMARY_CSV} nor sweep-*.csv files",
            runs.display()
        ));
    }
    Ok(written)
}

fn eval_tables(rows: &[SummaryRow], out: &Path) -> anyhow::Result<Vec<String>> {
    // (method, aggregation) -> per-seed values
    let mut groups: BTreeMap<(&str, &str), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((&r.method, &r.aggregation)).or_default();
        g.0.push(r.accuracy);
        if let Some(c) = r.causality {
            g.1.push(c);
        }
    }
    let mut table = Vec::new();
    for ((method, agg), (acc, caus)) in &groups {
        let a = mean_std(acc)?;
        let c = if caus.is_empty() {
            None
        } else {
            Some(mean_std(caus)?)
        };
        table.push(vec![
            method.to_string(),
            agg.to_string(),
            acc.len().to_string(),
            a.mean.to_string(),
            a.std.to_string(),
            fmt_opt(c.map(|c| c.mean)),
            fmt_opt(c.map(|c| c.std)),
        ]);
    }
    write_csv(
        &out.join("summary.csv"),
        &[
            "method",
            "aggregation",
            "n_seeds",
            "accuracy_mean",
            "accuracy_std",
            "causality_mean",
            "causality_std",
        ],
        table,
    )?;
    let mut names = vec!["summary.csv".to_string()];

    // LRC against each baseline on raw pooled counts, per seed
    let pooled: BTreeMap<(u64, &str), &SummaryRow> = rows
        .iter()
        .filter(|r| r.aggregation == "pooled")
        .map(|r| ((r.seed, r.method.as_str()), r))
        .collect();
    let mut tests = Vec::new();
    for (&(seed, method), a) in &pooled {
        if method != "lrc" {
            continue;
        }
        for (&(s2, other), b) in &pooled {
            if s2 != seed || other == "lrc" {
                continue;
            }
            let metrics = [
                ("accuracy", a.correct, b.correct),
                ("causality", a.causal_successes, b.causal_successes),
            ];
            for (metric, sa, sb) in metrics {
                let (Some(sa), Some(sb)) = (sa, sb) else {
                    continue;
                };
                let pa = ProportionSample::new(sa, a.n_test as u64)?;
                let pb = ProportionSample::new(sb, b.n_test as u64)?;
                let z = two_proportion_z(pa, pb)?;
                tests.push(vec![
                    seed.to_string(),
                    metric.to_string(),
                    "lrc".to_string(),
                    other.to_string(),
                    sa.to_string(),
                    a.n_test.to_string(),
                    sb.to_string(),
                    b.n_test.to_string(),
                    z.z.to_string(),
                    z.p_two_sided.to_string(),
                ]);
            }
        }
    }
    if !tests.is_empty() {
        write_csv(
            &out.join("ztest.csv"),
            &[
                "seed",
                "metric",
                "a",
                "b",
                "a_successes",
                "a_trials",
                "b_successes",
                "b_trials",
                "z",
                "p_two_sided",
            ],
            tests,
        )?;
        names.push("ztest.csv".into());
    }
    Ok(names)
}

pub struct Series {
    pub name: String,
    /// (x, mean, std)
    pub points: Vec<(f64, f64, f64)>,
}

fn sweep_series(rows: &[SweepCsvRow], metric: &str) -> Vec<Series> {
    let mut by_method: BTreeMap<&str, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for r in rows {
        let p = match metric {
            "accuracy" => Some((r.value, r.accuracy_mean, r.accuracy_std)),
            _ => r
                .causality_mean
                .map(|m| (r.value, m, r.causality_std.unwrap_or(0.0))),
        };
        if let Some(p) = p {
            by_method.entry(&r.method).or_default().push(p);
        }
    }
    by_method
        .into_iter()
        .map(|(name, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                name: name.to_string(),
                points,
            }
        })
        .collect()
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Metric (y, fixed to [0, 1]) against the swept value, one line per
/// series with a shaded band of one standard deviation.
pub fn line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    deterministic: bool,
) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 == x0 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    if !deterministic {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let _ = writeln!(
            svg,
            "<!-- generated by relcon {} at unix time {secs} -->",
            env!("CARGO_PKG_VERSION")
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="28" text-anchor="middle" font-size="16">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    // axes and grid
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        TOP + ph
    );
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let py = sy(y);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{py}" x2="{}" y2="{py}" stroke="#dddddd"/><text x="{}" y="{}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 8.0,
            py + 4.0,
            tick_label(y)
        );
        let x = x0 + (x1 - x0) * i as f64 / 5.0;
        let px = sx(x);
        let _ = writeln!(
            svg,
            r#"<line x1="{px}" y1="{}" x2="{px}" y2="{}" stroke="black"/><text x="{px}" y="{}" text-anchor="middle">{}</text>"#,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 20.0,
            tick_label(x)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 20.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let upper = s
            .points
            .iter()
            .map(|&(x, m, sd)| format!("{},{}", sx(x), sy(m + sd)));
        let lower = s
            .points
            .iter()
            .rev()
            .map(|&(x, m, sd)| format!("{},{}", sx(x), sy(m - sd)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = s
            .points
            .iter()
            .map(|&(x, m, _)| format!("{},{}", sx(x), sy(m)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        for &(x, m, _) in &s.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{}" cy="{}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(m)
            );
        }
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = LEFT + pw + 20.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_shape() {
        let s = Series {
            name: "lrc".into(),
            points: vec![(1.0, 0.5, 0.1), (2.0, 0.7, 0.0)],
        };
        let svg = line_plot("t", "rank", "accuracy", &[s], true);
        assert!(svg.starts_with("<svg") && svg.contains(r#"viewBox="0 0 800 500""#));
        assert!(svg.contains("<polygon") && svg.contains("<polyline"));
        assert!(svg.contains(">rank<") && svg.contains(">accuracy<"));
        assert!(!svg.contains("generated"));
        assert!(line_plot("t", "x", "y", &[], false).contains("generated"));
    }
}
