//! Reader and writer for the NPY 1.0 subset used for matrices: little-endian
//! `<f4`/`<f8`, C order, two dimensions.

use std::io::{Read, Write};

use crate::dataio::Dtype;
use crate::error::{Error, Result};
use crate::Matrix;

const MAGIC: &[u8] = b"\x93NUMPY";

pub fn write<W: Write>(mut out: W, data: &Matrix, dtype: Dtype) -> std::io::Result<()> {
    let descr = match dtype {
        Dtype::F4 => "<f4",
        Dtype::F8 => "<f8",
    };
    let mut header = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': ({}, {}), }}",
        data.nrows(),
        data.ncols()
    );
    // Pad so the data section starts on a 64-byte boundary.
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    header.extend(std::iter::repeat_n(' ', (64 - unpadded % 64) % 64));
    header.push('\n');

    out.write_all(MAGIC)?;
    out.write_all(&[1, 0])?;
    out.write_all(&(header.len() as u16).to_le_bytes())?;
    out.write_all(header.as_bytes())?;

    let mut buf = Vec::with_capacity(data.len() * dtype.width());
    for row in data.row_iter() {
        for v in row.iter() {
            match dtype {
                Dtype::F4 => buf.extend_from_slice(&(*v as f32).to_le_bytes()),
                Dtype::F8 => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out.write_all(&buf)
}

pub fn read<R: Read>(mut input: R) -> Result<(Matrix, Dtype)> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("npy read failed: {e}")))?;
    parse(&bytes)
}

pub fn parse(bytes: &[u8]) -> Result<(Matrix, Dtype)> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing NPY magic".into()));
    }
    let (major, _minor) = (bytes[6], bytes[7]);
    let (header_len, data_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            12,
        ),
        _ => return Err(Error::Format(format!("unsupported NPY version {major}"))),
    };
    let header_end = data_start + header_len;
    if bytes.len() < header_end {
        return Err(Error::Format("truncated NPY header".into()));
    }
    let header = std::str::from_utf8(&bytes[data_start..header_end])
        .map_err(|_| Error::Format("NPY header is not UTF-8".into()))?;

    let descr = dict_value(header, "descr")
        .ok_or_else(|| Error::Format("NPY header lacks 'descr'".into()))?;
    let dtype = match descr.trim_matches(|c| c == '\'' || c == '"') {
        "<f4" => Dtype::F4,
        "<f8" => Dtype::F8,
        other => return Err(Error::Format(format!("unsupported dtype {other}"))),
    };
    match dict_value(header, "fortran_order").map(str::trim) {
        Some("False") => {}
        Some("True") => return Err(Error::Format("Fortran-order arrays are not supported".into())),
        _ => return Err(Error::Format("NPY header lacks 'fortran_order'".into())),
    }
    let shape = dict_value(header, "shape")
        .ok_or_else(|| Error::Format("NPY header lacks 'shape'".into()))?;
    let dims: Vec<usize> = shape
        .trim_matches(|c| c == '(' || c == ')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format(format!("bad shape {shape}")))?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Format(format!("expected a 2-D array, got shape {shape}")));
    };

    let payload = &bytes[header_end..];
    let width = dtype.width();
    if payload.len() != rows * cols * width {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape ({rows}, {cols}) needs {}",
            payload.len(),
            rows * cols * width
        )));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for chunk in payload.chunks_exact(width) {
        let v = match dtype {
            Dtype::F4 => f64::from(f32::from_le_bytes(chunk.try_into().unwrap())),
            Dtype::F8 => f64::from_le_bytes(chunk.try_into().unwrap()),
        };
        values.push(v);
    }
    Ok((Matrix::from_row_slice(rows, cols, &values), dtype))
}

/// Extracts the raw text of `key`'s value from a Python dict literal.
fn dict_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let quoted = [format!("'{key}'"), format!("\"{key}\"")];
    let start = quoted.iter().find_map(|k| header.find(k.as_str()).map(|p| p + k.len()))?;
    let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')')? + 1
    } else {
        rest.find(',').or_else(|| rest.find('}'))?
    };
    Some(&rest[..end])
}
