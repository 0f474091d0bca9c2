//! On-disk formats: matrix CSV, label lists, JSON lines, manifests, atomic writes.
//!
//! Matrix files start with a header line `# rows=<K> cols=<d> unit_rows=<0|1>` followed
//! by one comma-separated row per matrix row, each value printed with 17 significant
//! digits so that every `f64` survives a save/load cycle unchanged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::EmbeddingMatrix;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes to a sibling temp file, then renames over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp.{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serializes a matrix in the header + CSV format.
pub fn matrix_to_string(m: &EmbeddingMatrix) -> String {
    let mut out = String::with_capacity(m.rows() * m.cols() * 24 + 64);
    let _ = writeln!(out, "# rows={} cols={} unit_rows={}", m.rows(), m.cols(), u8::from(m.unit_rows()));
    for row in m.row_iter() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn save_matrix(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    write_atomic(path, matrix_to_string(m).as_bytes())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

pub fn parse_matrix(path: &Path, text: &str) -> Result<EmbeddingMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty matrix file"))?;
    let header = header
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| parse_err(path, 1, "missing '# rows=.. cols=.. unit_rows=..' header"))?;
    let mut fields = BTreeMap::new();
    for kv in header.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| parse_err(path, 1, format!("bad header field {kv:?}")))?;
        let v: usize = v.parse().map_err(|_| parse_err(path, 1, format!("bad header value {kv:?}")))?;
        fields.insert(k.to_owned(), v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| parse_err(path, 1, format!("header lacks {k}")));
    let (rows, cols) = (get("rows")?, get("cols")?);
    let unit = fields.get("unit_rows").copied().unwrap_or(0) == 1;

    let mut data = Vec::with_capacity(rows * cols);
    let mut seen_rows = 0;
    for (lineno, line) in lines {
        let row = seen_rows;
        seen_rows += 1;
        if seen_rows > rows {
            return Err(parse_err(path, lineno + 1, format!("more than {rows} data rows")));
        }
        let before = data.len();
        for (col, tok) in line.split(',').enumerate() {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, format!("column {col}: cannot parse {tok:?}")))?;
            if !v.is_finite() {
                return Err(Error::NonFiniteInput { path: path.to_path_buf(), row, col });
            }
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(parse_err(path, lineno + 1, format!("expected {cols} columns, got {}", data.len() - before)));
        }
    }
    if seen_rows != rows {
        return Err(parse_err(path, 1, format!("header says {rows} rows, found {seen_rows}")));
    }
    let mut m = EmbeddingMatrix::new(rows, cols, data)?;
    if unit {
        m.mark_unit_rows()?;
    }
    Ok(m)
}

pub fn load_matrix(path: &Path) -> Result<EmbeddingMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(path, &text)
}

pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        let _ = writeln!(s, "{l}");
    }
    write_atomic(path, s.as_bytes())
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse().map_err(|_| parse_err(path, i + 1, format!("bad label {l:?}"))))
        .collect()
}

/// One JSON object per line.
pub fn jsonl_string<T: Serialize>(records: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, jsonl_string(records)?.as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Content hash in the style of a git blob id, but over SHA-256:
/// `sha256("blob <len>\0" ++ bytes)`, lowercase hex.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// input path → content hash
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
}

impl ExperimentManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_owned(),
            config,
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            tool_version: TOOL_VERSION.to_owned(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes the manifest atomically; call only after all outputs exist.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Paths whose current content hash differs from the recorded one.
    pub fn stale_inputs(&self) -> Result<Vec<PathBuf>> {
        let mut stale = Vec::new();
        for (p, h) in &self.inputs {
            let path = PathBuf::from(p);
            if hash_file(&path)? != *h {
                stale.push(path);
            }
        }
        Ok(stale)
    }
}
