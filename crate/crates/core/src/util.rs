//! Small shared helpers: stable seeds and line-delimited record IO.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Derive a deterministic `u64` seed from string parts.
///
/// Stable across runs and platforms (unlike `DefaultHasher`), so it is safe
/// to use anywhere a reproducible per-item RNG seed is needed.
pub fn stable_seed(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0x1f]);
    }
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Hex SHA-256 of a byte string, used for content-addressed records.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Append one record as a JSON line and flush.
pub fn append_jsonl<T: Serialize>(writer: &mut impl Write, record: &T) -> std::io::Result<()> {
    let line = serde_json::to_string(record).map_err(std::io::Error::other)?;
    writer.write_all(line.as_bytes())?;
    writer.write_all(b"\n")?;
    writer.flush()
}

/// Read every line of a JSONL file, handing `(line_number, parse_result)` to
/// the callback. Line numbers are 1-based; blank lines are skipped.
pub fn read_jsonl<T, F>(path: &Path, mut on_line: F) -> std::io::Result<()>
where
    T: DeserializeOwned,
    F: FnMut(usize, Result<T, serde_json::Error>) -> std::io::Result<()>,
{
    let file = File::open(path)?;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        on_line(idx + 1, serde_json::from_str(&line))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_seed_is_order_sensitive() {
        assert_ne!(stable_seed(&["a", "b"]), stable_seed(&["b", "a"]));
        assert_ne!(stable_seed(&["ab", ""]), stable_seed(&["a", "b"]));
        assert_eq!(stable_seed(&["a", "b"]), stable_seed(&["a", "b"]));
    }
}
