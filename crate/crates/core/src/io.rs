//! File formats: CSV matrices, the "ZSLM" binary matrix format, label lists
//! and key=value manifests.
//!
//! ZSLM layout (all little-endian):
//!
//! ```text
//! 0..4    magic "ZSLM"
//! 4..8    u32 version (= 1)
//! 8..12   u32 rows
//! 12..16  u32 cols
//! 16..    rows*cols f64 values, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Result, ZslError};
use crate::matrix::{self, Matrix};

pub const ZSLM_MAGIC: &[u8; 4] = b"ZSLM";
pub const ZSLM_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

fn parse_err(path: &Path, message: impl Into<String>) -> ZslError {
    ZslError::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| ZslError::io(path, e))
}

/// Loads a comma-separated matrix. Blank trailing lines are ignored.
pub fn load_matrix_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Matrix> {
    let path = path.as_ref();
    let text = read_text(path)?;
    parse_matrix_csv(&text, has_header).map_err(|msg| parse_err(path, msg))
}

pub fn parse_matrix_csv(text: &str, has_header: bool) -> std::result::Result<Matrix, String> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if has_header && idx == 0 {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match cols {
            None => cols = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(format!("ragged row at line {lineno}"));
            }
            _ => {}
        }
        for (j, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| {
                format!("non-numeric field {:?} at line {lineno}, column {}", f, j + 1)
            })?;
            if !v.is_finite() {
                return Err(format!("non-finite field at line {lineno}, column {}", j + 1));
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| "no data rows".to_string())?;
    matrix::from_row_major(rows, cols, &values).map_err(|e| e.to_string())
}

/// Writes a matrix as CSV with an optional header line. Values use the
/// shortest representation that round-trips.
pub fn save_matrix_csv(m: &Matrix, path: impl AsRef<Path>, header: Option<&[String]>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for row in m.row_iter() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| ZslError::io(path, e))
}

pub fn encode_zslm(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.nrows()).map_err(|_| ZslError::DimensionOverflow {
        rows: m.nrows() as u64,
        cols: m.ncols() as u64,
    })?;
    let cols = u32::try_from(m.ncols()).map_err(|_| ZslError::DimensionOverflow {
        rows: m.nrows() as u64,
        cols: m.ncols() as u64,
    })?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    buf.extend_from_slice(ZSLM_MAGIC);
    buf.write_u32::<LittleEndian>(ZSLM_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(rows).unwrap();
    buf.write_u32::<LittleEndian>(cols).unwrap();
    for r in m.row_iter() {
        for &v in r.iter() {
            buf.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    Ok(buf)
}

pub fn decode_zslm(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 4 {
        return Err(ZslError::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[0..4] != ZSLM_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[0..4]);
        return Err(ZslError::BadMagic { found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(ZslError::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != ZSLM_VERSION {
        return Err(ZslError::UnsupportedVersion(version));
    }
    let rows = LittleEndian::read_u32(&bytes[8..12]) as u64;
    let cols = LittleEndian::read_u32(&bytes[12..16]) as u64;
    let count = rows
        .checked_mul(cols)
        .filter(|c| c.checked_mul(8).is_some_and(|b| b <= isize::MAX as u64))
        .ok_or(ZslError::DimensionOverflow { rows, cols })? as usize;
    let payload = &bytes[HEADER_LEN..];
    let found = payload.len() / 8;
    if payload.len() != count * 8 {
        if payload.len() < count * 8 {
            return Err(ZslError::TruncatedPayload {
                expected: count,
                found,
            });
        }
        return Err(ZslError::InvalidMatrix(format!(
            "trailing bytes: header claims {count} values, payload holds {} bytes",
            payload.len()
        )));
    }
    let mut values = vec![0.0; count];
    LittleEndian::read_f64_into(payload, &mut values);
    matrix::from_row_major(rows as usize, cols as usize, &values)
}

pub fn save_matrix_binary(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_zslm(m)?;
    let file = fs::File::create(path).map_err(|e| ZslError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| ZslError::io(path, e))
}

pub fn load_matrix_binary(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ZslError::io(path, e))?;
    decode_zslm(&bytes)
}

/// One non-negative integer per line.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: usize = line
            .parse()
            .map_err(|_| parse_err(path, format!("bad class index {line:?} at line {}", idx + 1)))?;
        out.push(v);
    }
    Ok(out)
}

pub fn save_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(labels.len() * 4);
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| ZslError::io(path, e))
}

/// Ordered key=value manifest. Keys are kept sorted so output is byte-stable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| ZslError::InvalidParam(format!("manifest is missing key {key:?}")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| ZslError::InvalidParam(format!("manifest key {key:?}: bad value {raw:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut m = Manifest::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", idx + 1))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| ZslError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_text(path)?;
        Manifest::parse(&text).map_err(|m| parse_err(path, m))
    }
}
