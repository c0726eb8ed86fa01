//! CSV, JSON and SVG emitters.
//!
//! CSV files are written line by line through a buffered sink so a run that
//! stops early leaves only complete rows behind.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use inrank_core::inrank::RankEvent;
use inrank_core::spectrum::SpectrumSnapshot;
use inrank_core::train::MetricRow;

use crate::error::CliError;

pub struct CsvSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvSink {
    pub fn create(path: &Path, header: &str) -> Result<Self, CliError> {
        let file = File::create(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut sink = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        sink.line(header)?;
        Ok(sink)
    }

    pub fn line(&mut self, line: &str) -> Result<(), CliError> {
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(|e| CliError::Io(format!("{}: {e}", self.path.display())))
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        self.out
            .flush()
            .map_err(|e| CliError::Io(format!("{}: {e}", self.path.display())))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn metrics_header(with_accuracy: bool, layers: usize) -> String {
    let mut h = String::from("iter,loss");
    if with_accuracy {
        h.push_str(",accuracy");
    }
    for l in 0..layers {
        let _ = write!(h, ",layer{l}_rank");
    }
    h
}

pub fn metrics_line(row: &MetricRow, with_accuracy: bool) -> String {
    let mut s = format!("{},{}", row.iteration, row.loss);
    if with_accuracy {
        match row.accuracy {
            Some(a) => {
                let _ = write!(s, ",{a}");
            }
            None => s.push(','),
        }
    }
    for r in &row.ranks {
        let _ = write!(s, ",{r}");
    }
    s
}

pub const SPECTRUM_HEADER: &str = "iter,layer,index,sigma,sigma_normalized";

/// One line per singular value; values are also normalized by their sum.
pub fn spectrum_lines(snap: &SpectrumSnapshot) -> Vec<String> {
    let total: f64 = snap.values.iter().sum();
    snap.values
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let norm = if total > 0.0 { s / total } else { 0.0 };
            format!("{},{},{},{},{}", snap.iteration, snap.layer, i, s, norm)
        })
        .collect()
}

pub const SCHEDULE_HEADER: &str = "iter,layer,rank";

pub fn schedule_line(ev: &RankEvent) -> String {
    format!("{},{},{}", ev.iteration, ev.layer, ev.rank)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Spectrum evolution of one layer: one polyline per singular-value index,
/// each snapshot normalized by its total strength.
pub fn spectrum_svg(snapshots: &[&SpectrumSnapshot], title: &str) -> Result<String, CliError> {
    if snapshots.is_empty() {
        return Err(CliError::Config("cannot plot an empty spectrum history".into()));
    }
    let (w, h) = (800.0, 480.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let first = snapshots[0].iteration as f64;
    let last = snapshots[snapshots.len() - 1].iteration as f64;
    let span = if last > first { last - first } else { 1.0 };
    let modes = snapshots.iter().map(|s| s.values.len()).max().unwrap_or(0);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<g stroke="black" stroke-width="1"><line x1="{left}" y1="{}" x2="{}" y2="{}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}"/></g>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">iteration ({} to {})</text>"#,
        left + pw / 2.0,
        h - 15.0,
        snapshots[0].iteration,
        snapshots[snapshots.len() - 1].iteration
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 15 {})">normalized singular value</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for i in 0..modes {
        let mut pts = String::new();
        for snap in snapshots {
            let total: f64 = snap.values.iter().sum();
            let v = snap.values.get(i).copied().unwrap_or(0.0);
            let y = if total > 0.0 { v / total } else { 0.0 };
            let px = left + pw * (snap.iteration as f64 - first) / span;
            let py = top + ph * (1.0 - y);
            if !pts.is_empty() {
                pts.push(' ');
            }
            let _ = write!(pts, "{px:.2},{py:.2}");
        }
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{pts}"><title>sigma_{i}</title></polyline>"#,
            PALETTE[i % PALETTE.len()]
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
