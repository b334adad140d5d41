//! CSV readers for the report command and hand-written SVG renderers.
//! Output depends only on the input values, so reports are byte-stable.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use drgrade::training::{EpochRecord, HISTORY_HEADER};
use drgrade::{Error, Grade, NUM_GRADES};

use crate::commands::CliError;

/// One CSV data row with its 1-based line number.
pub struct Row {
    origin: String,
    line: u64,
    fields: Vec<String>,
}

impl Row {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn field(&self, i: usize) -> &str {
        &self.fields[i]
    }

    pub fn parse<T: FromStr>(&self, i: usize) -> Result<T, CliError> {
        let raw = self.fields.get(i).map(String::as_str).unwrap_or("");
        raw.trim().parse().map_err(|_| self.error(format!("column {}: cannot parse {raw:?}", i + 1)))
    }

    pub fn error(&self, message: String) -> CliError {
        CliError::Core(Error::Manifest {
            path: self.origin.clone(),
            line: self.line,
            message,
        })
    }
}

/// Read a CSV whose header starts with `required`; when `exact` is given the
/// header must equal it or its first `required.len()` columns.
pub fn read_rows(path: &Path, required: &[&str], exact: Option<&str>) -> Result<Vec<Row>, CliError> {
    let origin = path.display().to_string();
    let header_err = |message: String| {
        CliError::Core(Error::Manifest {
            path: origin.clone(),
            line: 1,
            message,
        })
    };
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| header_err(e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| header_err(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let ok = match exact {
        Some(full) => {
            let joined = header.join(",");
            joined == full || joined == required.join(",")
        }
        None => header.len() >= required.len() && header.iter().zip(required).all(|(a, b)| a == b),
    };
    if !ok {
        return Err(header_err(format!(
            "unexpected header {:?}, expected {:?}",
            header.join(","),
            exact.unwrap_or(&required.join(","))
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::Core(Error::Manifest {
                path: origin.clone(),
                line,
                message: e.to_string(),
            })
        })?;
        let row = Row {
            origin: origin.clone(),
            line: rec.position().map_or(0, |p| p.line()),
            fields: rec.iter().map(str::to_string).collect(),
        };
        if row.len() != header.len() {
            return Err(row.error(format!("expected {} fields, found {}", header.len(), row.len())));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>, CliError> {
    let cols: Vec<&str> = HISTORY_HEADER.split(',').collect();
    let rows = read_rows(path, &cols, Some(HISTORY_HEADER))?;
    let mut out = Vec::new();
    for r in &rows {
        let rec = EpochRecord {
            epoch: r.parse(0)?,
            train_loss: r.parse(1)?,
            train_acc: r.parse(2)?,
            val_loss: r.parse(3)?,
            val_acc: r.parse(4)?,
        };
        if ![rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc].iter().all(|v| v.is_finite()) {
            return Err(r.error("non-finite value".into()));
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(CliError::usage(format!("{}: no epochs", path.display())));
    }
    Ok(out)
}

pub fn read_confusion(path: &Path) -> Result<[[u64; NUM_GRADES]; NUM_GRADES], CliError> {
    let cols = ["true_grade", "pred_0", "pred_1", "pred_2", "pred_3", "pred_4"];
    let rows = read_rows(path, &cols, Some(&cols.join(",")))?;
    let mut m = [[0u64; NUM_GRADES]; NUM_GRADES];
    let mut seen = [false; NUM_GRADES];
    for r in &rows {
        let g: usize = r.parse(0)?;
        if g >= NUM_GRADES || seen[g] {
            return Err(r.error(format!("bad or repeated grade {g}")));
        }
        seen[g] = true;
        for (k, cell) in m[g].iter_mut().enumerate() {
            *cell = r.parse(1 + k)?;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(CliError::usage(format!("{}: expected one row per grade", path.display())));
    }
    Ok(m)
}

pub type RocSeries = Vec<(Grade, Vec<(f64, f64)>)>;

pub fn read_roc(path: &Path) -> Result<RocSeries, CliError> {
    let rows = read_rows(path, &["grade", "fpr", "tpr"], Some("grade,fpr,tpr"))?;
    let mut out: RocSeries = Vec::new();
    for r in &rows {
        let g = Grade::new(r.parse::<u8>(0)?).map_err(|e| r.error(e.to_string()))?;
        let (x, y): (f64, f64) = (r.parse(1)?, r.parse(2)?);
        if !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
            return Err(r.error(format!("rates must lie in [0, 1], got ({x}, {y})")));
        }
        match out.last_mut() {
            Some((last, pts)) if *last == g => pts.push((x, y)),
            _ => out.push((g, vec![(x, y)])),
        }
    }
    Ok(out)
}

const COLORS: [&str; NUM_GRADES] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e"];
const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn header(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Axes box at `(x0, y0)` with the given size, plus a title.
fn axes(out: &mut String, x0: f64, y0: f64, w: f64, h: f64, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(out, r#"<rect x="{x0:.2}" y="{y0:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="black"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{}</text>"#,
        x0 + w / 2.0,
        y0 - 10.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        x0 + w / 2.0,
        y0 + h + 30.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        x0 - 34.0,
        y0 + h / 2.0,
        x0 - 34.0,
        y0 + h / 2.0,
        escape(ylabel)
    );
}

fn polyline(out: &mut String, pts: &[(f64, f64)], color: &str, dashed: bool) {
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = if dashed { r#" stroke-dasharray="5,3""# } else { "" };
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
        coords.join(" ")
    );
}

fn tick_labels(out: &mut String, x0: f64, y0: f64, w: f64, h: f64, xr: (f64, f64), yr: (f64, f64)) {
    for (v, anchor) in [(xr.0, "start"), (xr.1, "end")] {
        let x = if v == xr.0 { x0 } else { x0 + w };
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{:.2}" text-anchor="{anchor}">{}</text>"#, y0 + h + 14.0, fmt_tick(v));
    }
    for v in [yr.0, yr.1] {
        let y = if v == yr.0 { y0 + h } else { y0 + 10.0 };
        let _ = writeln!(out, r#"<text x="{:.2}" y="{y:.2}" text-anchor="end">{}</text>"#, x0 - 4.0, fmt_tick(v));
    }
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(out: &mut String, x: f64, y: f64, entries: &[(&str, &str, bool)]) {
    for (i, (label, color, dashed)) in entries.iter().enumerate() {
        let yy = y + 14.0 * i as f64;
        let dash = if *dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="{color}" stroke-width="1.5"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
            x + 18.0,
            x + 22.0,
            yy + 4.0,
            escape(label)
        );
    }
}

/// Loss and accuracy panels side by side.
pub fn curves_svg(history: &[EpochRecord]) -> String {
    let mut s = String::new();
    header(&mut s, 2.0 * W, H);
    let (w, h) = (W - 2.0 * PAD, H - 2.0 * PAD);
    let first = history.first().map_or(1, |r| r.epoch) as f64;
    let last = history.last().map_or(1, |r| r.epoch) as f64;
    let xspan = (last - first).max(1.0);
    let panels: [(&str, &str, fn(&EpochRecord) -> (f64, f64)); 2] = [
        ("Loss", "loss", |r| (r.train_loss, r.val_loss)),
        ("Accuracy", "accuracy", |r| (r.train_acc, r.val_acc)),
    ];
    for (p, (title, ylabel, get)) in panels.iter().enumerate() {
        let x0 = p as f64 * W + PAD;
        let vals: Vec<(f64, f64)> = history.iter().map(get).collect();
        let (mut lo, mut hi) = if p == 1 {
            (0.0, 1.0)
        } else {
            let all = vals.iter().flat_map(|&(a, b)| [a, b]);
            (all.clone().fold(f64::INFINITY, f64::min).min(0.0), all.fold(f64::NEG_INFINITY, f64::max))
        };
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        if p == 1 {
            lo = 0.0;
        }
        axes(&mut s, x0, PAD, w, h, title, "epoch", ylabel);
        tick_labels(&mut s, x0, PAD, w, h, (first, last), (lo, hi));
        let map = |e: usize, v: f64| (x0 + (e as f64 - first) / xspan * w, PAD + h - (v - lo) / (hi - lo) * h);
        let train: Vec<_> = history.iter().zip(&vals).map(|(r, v)| map(r.epoch, v.0)).collect();
        let val: Vec<_> = history.iter().zip(&vals).map(|(r, v)| map(r.epoch, v.1)).collect();
        polyline(&mut s, &train, COLORS[0], false);
        polyline(&mut s, &val, COLORS[1], true);
        legend(&mut s, x0 + w - 70.0, PAD + 12.0, &[("train", COLORS[0], false), ("val", COLORS[1], true)]);
    }
    s.push_str("</svg>\n");
    s
}

/// Row-normalised heatmap with raw counts in each cell.
pub fn confusion_svg(m: &[[u64; NUM_GRADES]; NUM_GRADES]) -> String {
    let mut s = String::new();
    header(&mut s, W, W);
    let cell = (W - 2.0 * PAD - 20.0) / NUM_GRADES as f64;
    let (x0, y0) = (PAD + 20.0, PAD);
    axes(&mut s, x0, y0, cell * 5.0, cell * 5.0, "Confusion matrix", "predicted grade", "true grade");
    for (t, row) in m.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (p, &n) in row.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { n as f64 / total as f64 };
            let shade = (255.0 - 200.0 * frac).round() as u8;
            let (x, y) = (x0 + p as f64 * cell, y0 + t as f64 * cell);
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({shade},{shade},255)" stroke="gray"/>"#
            );
            let color = if frac > 0.6 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" fill="{color}">{n}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{t}</text>"#,
            x0 - 4.0,
            y0 + t as f64 * cell + cell / 2.0 + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#,
            x0 + t as f64 * cell + cell / 2.0,
            y0 + 5.0 * cell + 14.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One-vs-rest ROC curves with the chance diagonal.
pub fn roc_svg(series: &RocSeries) -> String {
    let mut s = String::new();
    header(&mut s, W, W);
    let side = W - 2.0 * PAD;
    axes(&mut s, PAD, PAD, side, side, "ROC (one-vs-rest)", "false positive rate", "true positive rate");
    tick_labels(&mut s, PAD, PAD, side, side, (0.0, 1.0), (0.0, 1.0));
    let map = |(x, y): (f64, f64)| (PAD + x * side, PAD + side - y * side);
    polyline(&mut s, &[map((0.0, 0.0)), map((1.0, 1.0))], "#bbbbbb", true);
    let mut entries = Vec::new();
    let labels: Vec<String> = series.iter().map(|(g, _)| format!("{} {}", g.index(), g.name())).collect();
    for ((g, pts), label) in series.iter().zip(&labels) {
        let mapped: Vec<_> = pts.iter().copied().map(map).collect();
        polyline(&mut s, &mapped, COLORS[g.index()], false);
        entries.push((label.as_str(), COLORS[g.index()], false));
    }
    legend(&mut s, PAD + side * 0.45, PAD + side * 0.65, &entries);
    s.push_str("</svg>\n");
    s
}
