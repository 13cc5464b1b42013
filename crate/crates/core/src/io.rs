//! FVB embedding files, label files, CSV ingest and atomic file output.
//!
//! FVB layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FVB1"
//! 4       4     u32 format version (1)
//! 8       4     u32 dim
//! 12      8     u64 count
//! 20      1     u8 normalized flag
//! 21      ...   count * dim f32, row-major
//! ```
//!
//! Labels live in a sibling UTF-8 text file, one label per line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, FormatIssue, Result};
use crate::vector::{EmbeddingSet, UNIT_NORM_TOLERANCE};

pub const FVB_MAGIC: &[u8; 4] = b"FVB1";
pub const FVB_VERSION: u32 = 1;
pub const FVB_HEADER_LEN: usize = 21;
const COUNT_OFFSET: u64 = 12;

/// Conventional labels path for an FVB file: same stem, `.labels` extension.
pub fn default_labels_path(fvb: &Path) -> PathBuf {
    fvb.with_extension("labels")
}

pub fn encode_fvb(set: &EmbeddingSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(FVB_HEADER_LEN + set.data().len() * 4);
    out.extend_from_slice(FVB_MAGIC);
    out.extend_from_slice(&FVB_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    out.push(set.is_normalized() as u8);
    for v in set.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Header fields of an FVB file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FvbHeader {
    pub dim: usize,
    pub count: usize,
    pub normalized: bool,
}

/// Parses an FVB payload and pairs it with `labels`.
pub fn decode_fvb(bytes: &[u8], labels: Vec<String>) -> Result<EmbeddingSet> {
    let (header, data) = decode_fvb_payload(bytes)?;
    if labels.len() != header.count {
        return Err(Error::format(
            COUNT_OFFSET,
            FormatIssue::LabelCountMismatch {
                header: header.count as u64,
                labels: labels.len() as u64,
            },
        ));
    }
    EmbeddingSet::new(header.dim, data, labels, header.normalized)
}

/// Parses an FVB payload without labels.
pub fn decode_fvb_payload(bytes: &[u8]) -> Result<(FvbHeader, Vec<f32>)> {
    let trunc = || Error::format(bytes.len() as u64, FormatIssue::Truncated);
    if bytes.len() < 4 {
        return Err(trunc());
    }
    if &bytes[..4] != FVB_MAGIC {
        return Err(Error::format(0, FormatIssue::BadMagic));
    }
    if bytes.len() < FVB_HEADER_LEN {
        return Err(trunc());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FVB_VERSION {
        return Err(Error::format(4, FormatIssue::UnsupportedVersion(version)));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let normalized = match bytes[20] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::format(
                20,
                FormatIssue::Inconsistent(format!("normalized flag {other}")),
            ))
        }
    };
    if dim == 0 {
        return Err(Error::format(
            8,
            FormatIssue::Inconsistent("dim is zero".into()),
        ));
    }
    let payload = &bytes[FVB_HEADER_LEN..];
    let expected = (count as u128) * (dim as u128) * 4;
    if (payload.len() as u128) < expected {
        return Err(trunc());
    }
    if (payload.len() as u128) > expected {
        return Err(Error::format(
            (FVB_HEADER_LEN as u128 + expected) as u64,
            FormatIssue::TrailingBytes,
        ));
    }
    let count = count as usize;
    let mut data = Vec::with_capacity(count * dim);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                (FVB_HEADER_LEN + i * 4) as u64,
                FormatIssue::NonFinite,
            ));
        }
        data.push(v);
    }
    if normalized {
        for (row, v) in data.chunks_exact(dim).enumerate() {
            let sq: f64 = v.iter().map(|&x| x as f64 * x as f64).sum();
            if (sq - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::format(
                    (FVB_HEADER_LEN + row * dim * 4) as u64,
                    FormatIssue::NotNormalized,
                ));
            }
        }
    }
    Ok((
        FvbHeader {
            dim,
            count,
            normalized,
        },
        data,
    ))
}

/// One label per line; a final trailing newline is optional.
pub fn parse_labels(text: &str) -> Result<Vec<String>> {
    let mut labels = Vec::new();
    let mut offset = 0u64;
    if text.is_empty() {
        return Ok(labels);
    }
    let body = text.strip_suffix('\n').unwrap_or(text);
    for line in body.split('\n') {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            return Err(Error::format(
                offset,
                FormatIssue::Inconsistent(format!("empty label on line {}", labels.len() + 1)),
            ));
        }
        offset += line.len() as u64 + 1;
        labels.push(line.to_string());
    }
    Ok(labels)
}

pub fn encode_labels(labels: &[String]) -> Result<String> {
    let mut out = String::new();
    for (i, l) in labels.iter().enumerate() {
        if l.is_empty() || l.contains(['\n', '\r']) {
            return Err(Error::invalid(format!(
                "label {i} is empty or contains a line break"
            )));
        }
        out.push_str(l);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| {
        Error::format(
            e.utf8_error().valid_up_to() as u64,
            FormatIssue::InvalidUtf8,
        )
    })?;
    parse_labels(&text)
}

/// Reads an FVB file and its labels file.
pub fn read_embeddings(fvb: &Path, labels: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(fvb)?;
    decode_fvb(&bytes, read_labels(labels)?)
}

/// Writes an FVB file and its labels file, each atomically.
pub fn write_embeddings(set: &EmbeddingSet, fvb: &Path, labels: &Path) -> Result<()> {
    let text = encode_labels(set.labels())?;
    write_atomic(fvb, &encode_fvb(set))?;
    write_atomic(labels, text.as_bytes())
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    // Temp files are created owner-only; match an existing target or a regular file.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let perms = match std::fs::metadata(path) {
            Ok(m) => m.permissions(),
            Err(_) => std::fs::Permissions::from_mode(0o644),
        };
        tmp.as_file().set_permissions(perms)?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Parses comma-separated numeric rows. Blank lines are skipped; every other
/// row must have the same number of finite values. Row numbers in errors are
/// 1-based line numbers.
pub fn parse_csv(text: &str) -> Result<(usize, Vec<f32>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut dim = None;
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        for cell in &record {
            let v: f32 = cell.parse().map_err(|_| Error::Parse {
                row,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            data.push(v);
        }
        let n = record.len();
        match dim {
            None => dim = Some(n),
            Some(d) if d != n => {
                return Err(Error::Parse {
                    row,
                    message: format!("expected {d} values, found {n}"),
                })
            }
            _ => {}
        }
    }
    let dim = dim.ok_or(Error::Empty("CSV input has no rows"))?;
    Ok((dim, data))
}

pub fn format_csv(set: &EmbeddingSet) -> String {
    let mut out = String::new();
    for row in set.rows().iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
