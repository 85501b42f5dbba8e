//! results.csv, failures.csv, the aggregated summary and the SVG curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bma_core::checkpoint::write_atomic;
use bma_core::ensembles::{EnsembleType, Method};
use bma_core::metrics::{aggregate_runs, MetricsCurve, Scores, Summary};
use bma_core::{BmaError, Result};
use serde::{Deserialize, Serialize};

pub const RESULTS_FILE: &str = "results.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub arch: String,
    pub ensemble_type: EnsembleType,
    pub method: Method,
    pub n_models: usize,
    pub run: usize,
    pub brier: f64,
    pub accuracy: f64,
    pub ece: f64,
    pub wall_seconds: f64,
}

impl ResultRow {
    pub fn scores(&self) -> Scores {
        Scores {
            brier: self.brier,
            accuracy: self.accuracy,
            ece: self.ece,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=2.0).contains(&self.brier)
            && (0.0..=1.0).contains(&self.accuracy)
            && (0.0..=1.0).contains(&self.ece)
            && self.wall_seconds >= 0.0
            && self.n_models >= 1;
        if ok {
            Ok(())
        } else {
            Err(BmaError::Validation(format!("result row out of range: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub arch: String,
    pub ensemble_type: EnsembleType,
    pub method: Method,
    pub run: usize,
    pub error_kind: String,
    pub message: String,
}

fn csv_err(e: csv::Error) -> BmaError {
    BmaError::Format(e.to_string())
}

fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| BmaError::Format(e.to_string()))
}

pub const RESULTS_HEADER: [&str; 9] = [
    "arch",
    "ensemble_type",
    "method",
    "n_models",
    "run",
    "brier",
    "accuracy",
    "ece",
    "wall_seconds",
];

pub fn write_results(dir: &Path, rows: &[ResultRow]) -> Result<PathBuf> {
    let path = dir.join(RESULTS_FILE);
    write_atomic(&path, &to_csv(rows, &RESULTS_HEADER)?)?;
    Ok(path)
}

/// Writes `failures.csv`, or removes a stale one when nothing failed.
pub fn write_failures(dir: &Path, rows: &[FailureRow]) -> Result<()> {
    let path = dir.join(FAILURES_FILE);
    if rows.is_empty() {
        if path.exists() {
            std::fs::remove_file(&path)?;
        }
        return Ok(());
    }
    let header = ["arch", "ensemble_type", "method", "run", "error_kind", "message"];
    write_atomic(&path, &to_csv(rows, &header)?)
}

pub fn read_results(dir: &Path) -> Result<Vec<ResultRow>> {
    let path = dir.join(RESULTS_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(|e| BmaError::Format(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if header != RESULTS_HEADER {
        return Err(BmaError::Format(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.deserialize()
        .map(|row| {
            let row: ResultRow = row.map_err(csv_err)?;
            row.validate()?;
            Ok(row)
        })
        .collect()
}

/// Curves keyed by (arch, ensemble type, method).
pub type Curves = BTreeMap<(String, EnsembleType, Method), MetricsCurve>;

/// Groups rows into per-run score sequences ordered by ensemble size and
/// aggregates them across runs.
pub fn aggregate(rows: &[ResultRow]) -> Result<Curves> {
    if rows.is_empty() {
        return Err(BmaError::Validation("no results to report".into()));
    }
    // run -> ensemble size -> scores, per curve.
    type Runs = BTreeMap<usize, BTreeMap<usize, Scores>>;
    let mut groups: BTreeMap<(String, EnsembleType, Method), Runs> = BTreeMap::new();
    for r in rows {
        let runs = groups
            .entry((r.arch.clone(), r.ensemble_type, r.method))
            .or_default();
        if runs.entry(r.run).or_default().insert(r.n_models, r.scores()).is_some() {
            return Err(BmaError::Validation(format!(
                "duplicate row for {}/{}/{} run {} size {}",
                r.arch, r.ensemble_type, r.method, r.run, r.n_models
            )));
        }
    }
    groups
        .into_iter()
        .map(|(key, runs)| {
            let per_run: Vec<Vec<Scores>> = runs
                .into_values()
                .map(|sizes| {
                    let n = sizes.len();
                    if sizes.keys().copied().eq(1..=n) {
                        Ok(sizes.into_values().collect())
                    } else {
                        Err(BmaError::Validation(format!(
                            "{}/{}/{}: ensemble sizes are not 1..{n}",
                            key.0, key.1, key.2
                        )))
                    }
                })
                .collect::<Result<_>>()?;
            let curve = aggregate_runs(key.2.as_str(), &per_run)?;
            Ok((key, curve))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Brier,
    Accuracy,
    Ece,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Brier, Metric::Accuracy, Metric::Ece];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Brier => "brier",
            Metric::Accuracy => "accuracy",
            Metric::Ece => "ece",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::Brier => "Brier score",
            Metric::Accuracy => "Accuracy",
            Metric::Ece => "ECE",
        }
    }

    pub fn of(self, p: &bma_core::metrics::CurvePoint) -> Summary {
        match self {
            Metric::Brier => p.brier,
            Metric::Accuracy => p.accuracy,
            Metric::Ece => p.ece,
        }
    }
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// One SVG line chart: x = ensemble size, one polyline per curve with a
/// shaded band of one standard deviation.
pub fn render_svg(title: &str, metric: Metric, curves: &[(String, &MetricsCurve)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 150.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 50.0;

    let x_max = curves
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(|p| p.n_models))
        .max()
        .unwrap_or(1)
        .max(2) as f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, c) in curves {
        for p in &c.points {
            let s = metric.of(p);
            lo = lo.min(s.mean - s.std);
            hi = hi.max(s.mean + s.std);
        }
    }
    if !(lo < hi) {
        lo -= 0.01;
        hi += 0.01;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let sx = |x: f64| LEFT + (x - 1.0) / (x_max - 1.0) * (W - LEFT - RIGHT);
    let sy = |y: f64| TOP + (hi - y) / (hi - lo) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, xml_escape(title));
    // Axes and ticks.
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 1..=x_max as usize {
        let x = sx(k as f64);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{y1}" x2="{x:.2}" y2="{}" stroke="black"/>"#, y1 + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{k}</text>"#, y1 + 18.0);
    }
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.4}</text>"#, x0 - 7.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">Number of models</text>"#, (x0 + x1) / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        (y0 + y1) / 2.0,
        metric.label()
    );

    for (i, (name, c)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let upper: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.n_models as f64), sy(metric.of(p).mean + metric.of(p).std)))
            .collect();
        let lower: Vec<String> = c
            .points
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", sx(p.n_models as f64), sy(metric.of(p).mean - metric.of(p).std)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.n_models as f64), sy(metric.of(p).mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, x1 + 15.0, x1 + 40.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x1 + 45.0, ly + 4.0, xml_escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    arch: &'a str,
    ensemble_type: EnsembleType,
    method: Method,
    n_models: usize,
    runs: usize,
    brier_mean: f64,
    brier_std: f64,
    accuracy_mean: f64,
    accuracy_std: f64,
    ece_mean: f64,
    ece_std: f64,
}

/// Reads `results.csv` and writes `summary.csv` plus one SVG per metric and
/// ensemble type. Returns the files written.
pub fn emit_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_results(dir)?;
    let curves = aggregate(&rows)?;
    let mut written = Vec::new();

    let mut summary = Vec::new();
    for ((arch, t, m), c) in &curves {
        for p in &c.points {
            summary.push(SummaryRow {
                arch,
                ensemble_type: *t,
                method: *m,
                n_models: p.n_models,
                runs: c.runs,
                brier_mean: p.brier.mean,
                brier_std: p.brier.std,
                accuracy_mean: p.accuracy.mean,
                accuracy_std: p.accuracy.std,
                ece_mean: p.ece.mean,
                ece_std: p.ece.std,
            });
        }
    }
    let header = [
        "arch",
        "ensemble_type",
        "method",
        "n_models",
        "runs",
        "brier_mean",
        "brier_std",
        "accuracy_mean",
        "accuracy_std",
        "ece_mean",
        "ece_std",
    ];
    let path = dir.join(SUMMARY_FILE);
    write_atomic(&path, &to_csv(&summary, &header)?)?;
    written.push(path);

    let arches: std::collections::BTreeSet<&str> = curves.keys().map(|k| k.0.as_str()).collect();
    let types: std::collections::BTreeSet<EnsembleType> = curves.keys().map(|k| k.1).collect();
    for t in types {
        let selected: Vec<(String, &MetricsCurve)> = curves
            .iter()
            .filter(|(k, _)| k.1 == t)
            .map(|((arch, _, m), c)| {
                let name = if arches.len() > 1 {
                    format!("{arch} {m}")
                } else {
                    m.to_string()
                };
                (name, c)
            })
            .collect();
        for metric in Metric::ALL {
            let title = format!("{} ensembles: {} against number of models", t, metric.label());
            let path = dir.join(format!("{}_{}.svg", metric.as_str(), t));
            write_atomic(&path, render_svg(&title, metric, &selected).as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}
