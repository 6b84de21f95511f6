//! Report emission: pretty JSON, plain CSV, and small static SVG plots.
//! Floats are written in shortest round-trip form, so rerunning on the
//! same inputs reproduces every byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use vcd_core::tensor::Tensor;

use crate::CliError;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Rows of already-formatted cells under one header line.
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Line chart of one or more series over a shared 1-based x axis.
pub fn svg_curves(
    path: &Path,
    title: &str,
    series: &[(String, Vec<f64>)],
) -> Result<(), CliError> {
    let (w, h, ml, mr, mt, mb) = (720.0, 440.0, 60.0, 20.0, 40.0, 40.0);
    let y_max = series
        .iter()
        .flat_map(|(_, ys)| ys)
        .copied()
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let x_max = series.iter().map(|(_, ys)| ys.len()).max().unwrap_or(1) as f64;
    let px = |i: usize| ml + (i as f64 + 1.0) / x_max * (w - ml - mr);
    let py = |v: f64| h - mb - v / y_max * (h - mt - mb);

    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )?;
    writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#)?;
    writeln!(out, r#"<text x="{ml}" y="24" font-size="14">{title}</text>"#)?;
    writeln!(
        out,
        r#"<line x1="{ml}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        h - mb,
        w - mr
    )?;
    writeln!(out, r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#, h - mb)?;
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{y_max:.4}</text>"#, ml - 4.0, mt + 4.0)?;
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">0</text>"#, ml - 4.0, h - mb)?;
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{x_max}</text>"#, w - mr, h - mb + 16.0)?;
    for (k, (label, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", px(i), py(v)))
            .collect();
        writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        )?;
        let y = mt + 16.0 * k as f64;
        writeln!(out, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, w - mr - 150.0, y)?;
        writeln!(out, r#"<text x="{}" y="{}">{label}</text>"#, w - mr - 136.0, y + 9.0)?;
    }
    writeln!(out, "</svg>")?;
    out.flush()?;
    Ok(())
}

/// Grey-scale cell grid of a [rows, cols] matrix, darker for larger
/// magnitude, normalised by the matrix maximum.
pub fn svg_heat(path: &Path, title: &str, matrix: &Tensor) -> Result<(), CliError> {
    let (rows, cols) = (matrix.shape()[0], matrix.shape()[1]);
    let cell = 28.0;
    let (ml, mt) = (40.0, 48.0);
    let w = ml + cols as f64 * cell + 20.0;
    let h = mt + rows as f64 * cell + 20.0;
    let max = matrix.data().iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-12);

    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )?;
    writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#)?;
    writeln!(out, r#"<text x="{ml}" y="20" font-size="14">{title}</text>"#)?;
    for i in 0..rows {
        writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{i}</text>"#,
            ml - 6.0,
            mt + (i as f64 + 0.7) * cell
        )?;
        for j in 0..cols {
            let v = matrix.at(&[i, j]).abs() / max;
            let level = (255.0 - v * 255.0).round() as u8;
            writeln!(
                out,
                r##"<rect x="{:.1}" y="{:.1}" width="{cell}" height="{cell}" fill="#{level:02x}{level:02x}{level:02x}" stroke="#ddd"/>"##,
                ml + j as f64 * cell,
                mt + i as f64 * cell
            )?;
        }
    }
    for j in 0..cols {
        writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{j}</text>"#,
            ml + (j as f64 + 0.5) * cell,
            mt - 6.0
        )?;
    }
    writeln!(out, "</svg>")?;
    out.flush()?;
    Ok(())
}
