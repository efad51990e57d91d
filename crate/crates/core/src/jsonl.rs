//! JSON-lines file helpers with atomic writes.
//!
//! Every artifact the pipeline persists goes through [`atomic_write`]:
//! content is written to a sibling temp file and renamed into place, so a
//! failed run never leaves a half-written file behind.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Writes `bytes` to `path` via temp-file-then-rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = dir.join(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Serializes `items` as one JSON object per line.
pub fn to_jsonl_bytes<T: Serialize>(items: &[T]) -> serde_json::Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Writes `items` to `path` as JSON lines, atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let bytes = to_jsonl_bytes(items).map_err(std::io::Error::other)?;
    atomic_write(path, &bytes)
}

/// Reads a JSON-lines file into a vector, skipping blank lines.
///
/// The error message carries the 1-based line number of the first bad line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> std::io::Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::other(format!("{}:{}: {e}", path.display(), idx + 1))
        })?;
        items.push(item);
    }
    Ok(items)
}
