//! Grid result rows and their CSV round trip.
//!
//! Columns are fixed; floats print at 6 decimal places; optional metrics
//! print as empty fields. Quoting follows RFC 4180: a field containing a
//! comma, quote, or line break is wrapped in double quotes with inner quotes
//! doubled.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const CSV_COLUMNS: [&str; 13] = [
    "dataset",
    "clusters",
    "density",
    "recall_similar",
    "recall_dissimilar",
    "restart",
    "seed",
    "nmi_train",
    "acc_train",
    "nmi_test",
    "acc_test",
    "epochs",
    "wall_seconds",
];

/// One grid cell restart. A failed cell yields a single row whose metric
/// fields are all `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub clusters: usize,
    pub density: f64,
    pub recall_similar: f64,
    pub recall_dissimilar: f64,
    pub restart: usize,
    pub seed: u64,
    pub nmi_train: Option<f64>,
    pub acc_train: Option<f64>,
    pub nmi_test: Option<f64>,
    pub acc_test: Option<f64>,
    pub epochs: usize,
    pub wall_seconds: f64,
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_csv_header<W: Write>(mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", CSV_COLUMNS.join(","))
}

pub fn write_csv_row<W: Write>(mut w: W, row: &ResultRow) -> std::io::Result<()> {
    writeln!(
        w,
        "{},{},{:.6},{:.6},{:.6},{},{},{},{},{},{},{},{:.6}",
        quote(&row.dataset),
        row.clusters,
        row.density,
        row.recall_similar,
        row.recall_dissimilar,
        row.restart,
        row.seed,
        opt(row.nmi_train),
        opt(row.acc_train),
        opt(row.nmi_test),
        opt(row.acc_test),
        row.epochs,
        row.wall_seconds,
    )
}

pub fn emit_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&name, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(&name, e);
    write_csv_header(&mut out).map_err(io_err)?;
    for row in rows {
        write_csv_row(&mut out, row).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Split one CSV record into fields, honoring RFC 4180 quoting.
fn split_record(line: &str) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        if quoted {
            if c == '"' {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    cur.push('"');
                } else {
                    quoted = false;
                }
            } else {
                cur.push(c);
            }
        } else {
            match c {
                '"' if cur.is_empty() => quoted = true,
                ',' => fields.push(std::mem::take(&mut cur)),
                _ => cur.push(c),
            }
        }
    }
    if quoted {
        return Err(Error::InvalidConfig(format!("unterminated quote in CSV record: {line}")));
    }
    fields.push(cur);
    Ok(fields)
}

fn parse_opt(field: &str, what: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|e| Error::InvalidConfig(format!("bad {what} {field:?}: {e}")))
}

fn parse_num<T: std::str::FromStr>(field: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field
        .parse::<T>()
        .map_err(|e| Error::InvalidConfig(format!("bad {what} {field:?}: {e}")))
}

pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidConfig("empty CSV".into()))?;
    if split_record(header)? != CSV_COLUMNS {
        return Err(Error::InvalidConfig(format!("unexpected CSV header {header:?}")));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f = split_record(line)?;
        if f.len() != CSV_COLUMNS.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} fields, found {} in {line:?}",
                CSV_COLUMNS.len(),
                f.len()
            )));
        }
        rows.push(ResultRow {
            dataset: f[0].clone(),
            clusters: parse_num(&f[1], "clusters")?,
            density: parse_num(&f[2], "density")?,
            recall_similar: parse_num(&f[3], "recall_similar")?,
            recall_dissimilar: parse_num(&f[4], "recall_dissimilar")?,
            restart: parse_num(&f[5], "restart")?,
            seed: parse_num(&f[6], "seed")?,
            nmi_train: parse_opt(&f[7], "nmi_train")?,
            acc_train: parse_opt(&f[8], "acc_train")?,
            nmi_test: parse_opt(&f[9], "nmi_test")?,
            acc_test: parse_opt(&f[10], "acc_test")?,
            epochs: parse_num(&f[11], "epochs")?,
            wall_seconds: parse_num(&f[12], "wall_seconds")?,
        });
    }
    Ok(rows)
}
