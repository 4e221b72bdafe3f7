//! JSON-lines dataset files.
//!
//! One object per line with fields in the fixed order
//! `{"id": int, "long": str, "short": str, "image": [[float, ...], ...]}`;
//! floats are written with 9 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::synth::Sample;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: u64,
    pub long: String,
    pub short: String,
    /// One row per grid cell.
    pub image: Matrix<f32>,
}

impl From<&Sample> for Record {
    fn from(s: &Sample) -> Self {
        Record {
            id: s.scene.scene_id,
            long: s.captions.long_text.clone(),
            short: s.captions.short_text.clone(),
            image: s.image.clone(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: u64,
    long: String,
    short: String,
    image: Vec<Vec<f64>>,
}

/// `x` with 9 significant digits, JSON-compatible.
pub fn format_float(x: f32) -> String {
    if x == 0.0 {
        return "0.0".to_string();
    }
    format!("{:.8e}", x)
}

pub fn encode_record(r: &Record) -> String {
    let mut line = String::with_capacity(64 + r.image.len() * 16);
    let _ = write!(
        line,
        "{{\"id\":{},\"long\":{},\"short\":{},\"image\":[",
        r.id,
        serde_json::to_string(&r.long).expect("strings serialize"),
        serde_json::to_string(&r.short).expect("strings serialize"),
    );
    for row in 0..r.image.rows() {
        if row > 0 {
            line.push(',');
        }
        line.push('[');
        for (i, &x) in r.image.row(row).iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&format_float(x));
        }
        line.push(']');
    }
    line.push_str("]}");
    line
}

pub fn decode_record(line: &str, line_no: usize) -> Result<Record> {
    let parse_err = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let rows: Vec<Vec<f32>> = raw
        .image
        .iter()
        .map(|r| r.iter().map(|&x| x as f32).collect())
        .collect();
    let image = Matrix::from_rows(&rows).map_err(|e| parse_err(e.to_string()))?;
    if !image.is_finite() {
        return Err(parse_err("image contains non-finite values".into()));
    }
    Ok(Record {
        id: raw.id,
        long: raw.long,
        short: raw.short,
        image,
    })
}

pub fn write_dataset(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&encode_record(r));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| decode_record(l, i + 1))
        .collect()
}
