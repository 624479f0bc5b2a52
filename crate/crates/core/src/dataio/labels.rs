use std::path::Path;

use ndarray::Array2;

use super::LabelMatrix;
use crate::error::{Error, Result};

pub fn parse_labels(text: &str) -> Result<LabelMatrix> {
    let mut data = Vec::new();
    let mut classes = None;
    let mut rows = 0usize;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for (col, field) in line.split(',').enumerate() {
            let v = match field.trim() {
                "0" => 0u8,
                "1" => 1u8,
                other => {
                    return Err(Error::format(
                        "labels",
                        format!("non-binary entry {other:?} at row {rows}, column {col}"),
                    ))
                }
            };
            data.push(v);
        }
        let n = data.len() - before;
        match classes {
            None => classes = Some(n),
            Some(c) if c != n => {
                return Err(Error::format(
                    "labels",
                    format!("ragged rows: row {rows} has {n} entries, expected {c}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let classes = classes.ok_or_else(|| Error::format("labels", "no rows"))?;
    LabelMatrix::new(Array2::from_shape_vec((rows, classes), data).expect("rectangular"))
}

pub fn render_labels(labels: &LabelMatrix) -> String {
    let mut out = String::with_capacity(labels.rows() * (labels.classes() * 2 + 1));
    for row in labels.values().outer_iter() {
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            out.push(if *v == 1 { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMatrix> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMatrix) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_labels(labels)).map_err(|e| Error::io(path, e))
}
