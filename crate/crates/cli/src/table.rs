//! Small CSV helpers. Floats are written in Rust's shortest round-trip form,
//! so equal values always produce equal bytes.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dds_core::Tensor;

pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Header and rows of a CSV file.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_owned).collect());
    }
    Ok((header, rows))
}

/// Column `name` of a table parsed as numbers.
pub fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Result<Vec<f64>> {
    let Some(i) = header.iter().position(|h| h == name) else {
        bail!("missing column {name:?}");
    };
    rows.iter()
        .map(|r| r[i].parse::<f64>().with_context(|| format!("bad number {:?} in column {name:?}", r[i])))
        .collect()
}

/// Matrix with one labelled row per source: `label,0,1,...`.
pub fn write_labelled_matrix(path: &Path, label: &str, labels: &[String], m: &Tensor) -> Result<()> {
    let cols: Vec<String> = (0..m.cols()).map(|c| c.to_string()).collect();
    let mut header = vec![label];
    header.extend(cols.iter().map(String::as_str));
    write_csv(
        path,
        &header,
        (0..m.rows()).map(|r| {
            let mut row = vec![labels[r].clone()];
            row.extend(m.row(r).iter().map(|&v| num(v)));
            row
        }),
    )
}

/// Inverse of [`write_labelled_matrix`].
pub fn read_labelled_matrix(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let (header, rows) = read_csv(path)?;
    let cols = header.len().saturating_sub(1);
    let mut labels = Vec::with_capacity(rows.len());
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in &rows {
        if r.len() != cols + 1 {
            bail!("{}: ragged row", path.display());
        }
        labels.push(r[0].clone());
        for v in &r[1..] {
            data.push(v.parse::<f64>().with_context(|| format!("{}: bad number {v:?}", path.display()))?);
        }
    }
    Ok((labels, Tensor::matrix(rows.len(), cols, data)))
}
