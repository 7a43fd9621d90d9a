//! On-disk matrix formats.
//!
//! * CSV: one matrix row per line, comma separated decimals, no header.
//!   Values are written with 17 significant digits.
//! * Binary: an 8-byte little-endian header (`u32` rows, `u32` cols)
//!   followed by `rows * cols` little-endian `f64` values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use super::DenseMatrix;
use crate::error::{Error, Result};

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(file, path)
}

/// Parses CSV matrix text; `path` is used only for error messages.
pub fn read_csv_from(reader: impl std::io::Read, path: &Path) -> Result<DenseMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_error(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(parse_error(
                    path,
                    line,
                    format!("expected {c} fields, found {}", record.len()),
                ))
            }
            _ => {}
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                parse_error(path, line, format!("field {}: cannot parse {field:?}", j + 1))
            })?;
            if !v.is_finite() {
                return Err(parse_error(path, line, format!("field {}: non-finite value", j + 1)));
            }
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    DenseMatrix::new(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn format_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|x| format_value(*x)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// 17 significant digits: enough for an exact `f64` round trip.
pub fn format_value(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_csv(m)).map_err(|e| Error::io(path, e))
}

pub fn encode_binary(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.nrows())
        .map_err(|_| Error::InvalidArgument("row count exceeds u32".into()))?;
    let cols = u32::try_from(m.ncols())
        .map_err(|_| Error::InvalidArgument("column count exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(8 + 8 * m.len());
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for row in m.row_iter() {
        for x in row.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_binary(bytes: &[u8], path: &Path) -> Result<DenseMatrix> {
    if bytes.len() < 8 {
        return Err(parse_error(path, 0, "truncated header (need 8 bytes)"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + 8 * rows * cols;
    if bytes.len() != expected {
        return Err(parse_error(
            path,
            0,
            format!("{rows}x{cols} matrix needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
        return Err(parse_error(
            path,
            0,
            format!("non-finite value at byte offset {}", 8 + 8 * pos),
        ));
    }
    DenseMatrix::new(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn read_binary(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_binary(&bytes, path)
}

pub fn write_binary(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_binary(m)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads either format, chosen by extension (`.csv` or anything else as binary).
pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => read_csv(path),
        _ => read_binary(path),
    }
}
