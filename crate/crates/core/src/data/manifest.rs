//! Plain-text dataset manifest: one row per sample file with its split
//! assignment. Comma-separated with a fixed header; float fields use Rust's
//! shortest round-trip formatting so rewriting a parsed manifest is
//! byte-identical.

use std::fs;
use std::path::Path;

use crate::error::CoreError;
use crate::Result;

use super::split::{Subset, UncertaintyCategory};

pub const MANIFEST_FILE: &str = "manifest.csv";
const HEADER: &str = "file,case_id,re,alpha_deg,replicate,subset,category";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub case_id: u32,
    pub re: f64,
    pub alpha_deg: f64,
    pub replicate: u32,
    pub subset: Subset,
    pub category: UncertaintyCategory,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::with_capacity(64 * (entries.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.file, e.case_id, e.re, e.alpha_deg, e.replicate, e.subset, e.category
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let origin = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| CoreError::parse(&origin, e.to_string()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => {
            return Err(CoreError::parse(
                &origin,
                format!("bad header {:?}, want {HEADER:?}", other.unwrap_or("")),
            ))
        }
    }
    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(CoreError::parse(
                &origin,
                format!("line {}: want 7 fields, got {}", lineno + 2, fields.len()),
            ));
        }
        let parse = |what: &str, v: std::result::Result<ManifestEntry, String>| {
            v.map_err(|e| CoreError::parse(&origin, format!("line {}: {what}: {e}", lineno + 2)))
        };
        let entry = (|| -> std::result::Result<ManifestEntry, String> {
            Ok(ManifestEntry {
                file: fields[0].to_string(),
                case_id: fields[1].parse().map_err(|e| format!("case_id: {e}"))?,
                re: fields[2].parse().map_err(|e| format!("re: {e}"))?,
                alpha_deg: fields[3].parse().map_err(|e| format!("alpha_deg: {e}"))?,
                replicate: fields[4].parse().map_err(|e| format!("replicate: {e}"))?,
                subset: fields[5].parse()?,
                category: fields[6].parse()?,
            })
        })();
        entries.push(parse("row", entry)?);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let entries = vec![
            ManifestEntry {
                file: "case_000/rep_000.fsmp".into(),
                case_id: 0,
                re: 0.5e6,
                alpha_deg: 20.0,
                replicate: 0,
                subset: Subset::Test,
                category: UncertaintyCategory::Low,
            },
            ManifestEntry {
                file: "case_001/rep_003.fsmp".into(),
                case_id: 1,
                re: 1.5e6,
                alpha_deg: 12.25,
                replicate: 3,
                subset: Subset::Training,
                category: UncertaintyCategory::High,
            },
        ];
        write_manifest(&p, &entries).unwrap();
        let bytes1 = std::fs::read(&p).unwrap();
        let loaded = read_manifest(&p).unwrap();
        assert_eq!(loaded, entries);
        write_manifest(&p, &loaded).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes1);
    }

    #[test]
    fn malformed_rows_are_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        std::fs::write(&p, format!("{HEADER}\nx.fsmp,notanumber,1,2,0,Test,Low\n")).unwrap();
        let err = read_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        std::fs::write(&p, "wrong,header\n").unwrap();
        assert!(read_manifest(&p).is_err());
    }
}
