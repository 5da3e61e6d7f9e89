//! Importer for the upstream archive's unpacked layout into the neutral
//! sample format.
//!
//! Expected input tree:
//!
//! ```text
//! <root>/cases.csv                  header: case_id,re,alpha_deg,subset,category
//! <root>/case_<id>/rep_<k>.npy      one array per replicate, [6, H, W] or
//!                                   [H, W, 6], f32 or f64 little-endian,
//!                                   channels (mask, Re cos/re_max,
//!                                   Re sin/re_max, p, u_x, u_y)
//! ```
//!
//! Output: `<out>/case_<id>/rep_<k>.fsmp` plus `<out>/manifest.csv`. Import is
//! deterministic (sorted case/replicate order, fixed f32 quantization), so
//! re-running produces identical bytes.

use std::fs;
use std::path::Path;

use crate::error::CoreError;
use crate::nn::Tensor;
use crate::Result;

use super::manifest::{write_manifest, ManifestEntry, MANIFEST_FILE};
use super::split::{Subset, UncertaintyCategory};
use super::{write_sample, CaseMeta, ConditionTensor, FieldSample, SAMPLE_EXTENSION};

/// Outcome of an archive import.
#[derive(Debug, Clone, Default)]
pub struct ImportReport {
    pub cases: usize,
    pub samples: usize,
}

struct CaseRow {
    case_id: u32,
    re: f64,
    alpha_deg: f64,
    subset: Subset,
    category: UncertaintyCategory,
}

const CASES_FILE: &str = "cases.csv";
const CASES_HEADER: &str = "case_id,re,alpha_deg,subset,category";

fn read_cases(path: &Path) -> Result<Vec<CaseRow>> {
    let origin = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| CoreError::parse(&origin, e.to_string()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CASES_HEADER => {}
        other => {
            return Err(CoreError::parse(
                &origin,
                format!("bad header {:?}, want {CASES_HEADER:?}", other.unwrap_or("")),
            ))
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(CoreError::parse(&origin, format!("line {}: want 5 fields", n + 2)));
        }
        let row = (|| -> std::result::Result<CaseRow, String> {
            Ok(CaseRow {
                case_id: f[0].parse().map_err(|e| format!("case_id: {e}"))?,
                re: f[1].parse().map_err(|e| format!("re: {e}"))?,
                alpha_deg: f[2].parse().map_err(|e| format!("alpha_deg: {e}"))?,
                subset: f[3].parse()?,
                category: f[4].parse()?,
            })
        })()
        .map_err(|e| CoreError::parse(&origin, format!("line {}: {e}", n + 2)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Convert an unpacked archive into the neutral format. On malformed input the
/// error lists which cases were salvageable so a partial archive can be
/// triaged.
pub fn import_archive(src: &Path, out: &Path) -> Result<ImportReport> {
    let cases_path = src.join(CASES_FILE);
    if !cases_path.exists() {
        // empty archive: write an empty manifest and report zero cases
        fs::create_dir_all(out)?;
        write_manifest(&out.join(MANIFEST_FILE), &[])?;
        return Ok(ImportReport::default());
    }
    let mut rows = read_cases(&cases_path)?;
    rows.sort_by_key(|r| r.case_id);

    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut pending: Vec<(std::path::PathBuf, FieldSample)> = Vec::new();
    let mut salvageable: Vec<u32> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    for row in &rows {
        let case_dir = src.join(format!("case_{:03}", row.case_id));
        let result = import_case(row, &case_dir, out);
        match result {
            Ok((case_entries, case_samples)) => {
                salvageable.push(row.case_id);
                entries.extend(case_entries);
                pending.extend(case_samples);
            }
            Err(e) => failures.push(format!("case {}: {e}", row.case_id)),
        }
    }
    if !failures.is_empty() {
        return Err(CoreError::parse(
            src.display().to_string(),
            format!(
                "{} of {} cases failed ({}); salvageable cases: {:?}",
                failures.len(),
                rows.len(),
                failures.join("; "),
                salvageable
            ),
        ));
    }
    fs::create_dir_all(out)?;
    for (path, sample) in &pending {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_sample(path, sample)?;
    }
    write_manifest(&out.join(MANIFEST_FILE), &entries)?;
    Ok(ImportReport {
        cases: rows.len(),
        samples: entries.len(),
    })
}

type CaseImport = (Vec<ManifestEntry>, Vec<(std::path::PathBuf, FieldSample)>);

fn import_case(row: &CaseRow, case_dir: &Path, out: &Path) -> Result<CaseImport> {
    let origin = case_dir.display().to_string();
    let mut reps: Vec<(u32, std::path::PathBuf)> = Vec::new();
    let entries = fs::read_dir(case_dir).map_err(|e| CoreError::parse(&origin, e.to_string()))?;
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(num) = name
            .strip_prefix("rep_")
            .and_then(|s| s.strip_suffix(".npy"))
        {
            let k: u32 = num
                .parse()
                .map_err(|e| CoreError::parse(path.display().to_string(), format!("replicate index: {e}")))?;
            reps.push((k, path));
        }
    }
    if reps.is_empty() {
        return Err(CoreError::parse(&origin, "no replicate arrays"));
    }
    reps.sort_by_key(|(k, _)| *k);
    let mut manifest = Vec::new();
    let mut samples = Vec::new();
    for (k, path) in reps {
        let array = read_npy(&path)?;
        let channels = as_channel_major(array, &path)?;
        let sample = sample_from_channels(channels, row, k, &path)?;
        let rel = format!("case_{:03}/rep_{:03}.{SAMPLE_EXTENSION}", row.case_id, k);
        manifest.push(ManifestEntry {
            file: rel.clone(),
            case_id: row.case_id,
            re: row.re,
            alpha_deg: row.alpha_deg,
            replicate: k,
            subset: row.subset,
            category: row.category,
        });
        samples.push((out.join(rel), sample));
    }
    Ok((manifest, samples))
}

fn sample_from_channels(channels: Tensor, row: &CaseRow, rep: u32, path: &Path) -> Result<FieldSample> {
    let origin = path.display().to_string();
    let s = channels.shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let data = channels.data();
    // binarize the stored mask, then force masked target cells to zero
    let mask: Vec<f64> = data[..plane]
        .iter()
        .map(|v| if *v >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    let cond = ConditionTensor::from_channels(Tensor::from_vec(&[3, h, w], {
        let mut c = Vec::with_capacity(3 * plane);
        c.extend_from_slice(&mask);
        c.extend_from_slice(&data[plane..3 * plane]);
        c
    }))
    .map_err(|e| CoreError::validation(&origin, e.to_string()))?;
    let mut target = Vec::with_capacity(3 * plane);
    for c in 3..6 {
        for (m, v) in mask.iter().zip(&data[c * plane..(c + 1) * plane]) {
            target.push(if *m == 1.0 { 0.0 } else { *v });
        }
    }
    let sample = FieldSample {
        condition: cond,
        target: Tensor::from_vec(&[3, h, w], target),
        meta: CaseMeta {
            case_id: row.case_id,
            re: row.re,
            alpha_deg: row.alpha_deg,
            replicate: rep,
        },
    };
    sample.validate(&origin)?;
    Ok(sample)
}

fn as_channel_major(t: Tensor, path: &Path) -> Result<Tensor> {
    let s = t.shape().to_vec();
    if s.len() != 3 {
        return Err(CoreError::parse(
            path.display().to_string(),
            format!("want a 3-d array, got {s:?}"),
        ));
    }
    if s[0] == 6 {
        return Ok(t);
    }
    if s[2] == 6 {
        // [H, W, 6] -> [6, H, W]
        let (h, w) = (s[0], s[1]);
        let mut out = vec![0.0; 6 * h * w];
        for i in 0..h {
            for j in 0..w {
                for c in 0..6 {
                    out[c * h * w + i * w + j] = t.data()[(i * w + j) * 6 + c];
                }
            }
        }
        return Ok(Tensor::from_vec(&[6, h, w], out));
    }
    Err(CoreError::parse(
        path.display().to_string(),
        format!("no 6-channel axis in {s:?}"),
    ))
}

/// Minimal NumPy `.npy` reader: versions 1.0/2.0, C-order, little-endian
/// f32/f64.
pub fn read_npy(path: &Path) -> Result<Tensor> {
    let origin = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| CoreError::parse(&origin, e.to_string()))?;
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(CoreError::parse(&origin, "not an npy file"));
    }
    let major = bytes[6];
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10usize),
        2 => (
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            12usize,
        ),
        v => {
            return Err(CoreError::parse(&origin, format!("unsupported npy version {v}")));
        }
    };
    let header_end = header_start + header_len;
    if bytes.len() < header_end {
        return Err(CoreError::parse(&origin, "truncated npy header"));
    }
    let header = std::str::from_utf8(&bytes[header_start..header_end])
        .map_err(|_| CoreError::parse(&origin, "non-utf8 npy header"))?;

    let descr = dict_value(header, "descr")
        .ok_or_else(|| CoreError::parse(&origin, "npy header missing descr"))?;
    let width = match descr.trim_matches(|c| c == '\'' || c == '"') {
        "<f4" => 4usize,
        "<f8" => 8usize,
        other => {
            return Err(CoreError::parse(
                &origin,
                format!("unsupported dtype {other:?} (want <f4 or <f8)"),
            ))
        }
    };
    let fortran = dict_value(header, "fortran_order")
        .ok_or_else(|| CoreError::parse(&origin, "npy header missing fortran_order"))?;
    if fortran.trim() != "False" {
        return Err(CoreError::parse(&origin, "fortran-order arrays not supported"));
    }
    let shape_str = dict_value(header, "shape")
        .ok_or_else(|| CoreError::parse(&origin, "npy header missing shape"))?;
    let shape: Vec<usize> = shape_str
        .trim()
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CoreError::parse(&origin, format!("bad shape: {e}")))?;
    let numel: usize = shape.iter().product();
    let data_bytes = &bytes[header_end..];
    if data_bytes.len() != numel * width {
        return Err(CoreError::parse(
            &origin,
            format!(
                "payload {} bytes, want {} for shape {shape:?}",
                data_bytes.len(),
                numel * width
            ),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    match width {
        4 => {
            for chunk in data_bytes.chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
            }
        }
        _ => {
            for chunk in data_bytes.chunks_exact(8) {
                data.push(f64::from_le_bytes([
                    chunk[0], chunk[1], chunk[2], chunk[3], chunk[4], chunk[5], chunk[6], chunk[7],
                ]));
            }
        }
    }
    Ok(Tensor::from_vec(&shape, data))
}

/// Pull the value substring for `key` out of a Python dict literal header.
fn dict_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let kq = format!("'{key}'");
    let at = header.find(&kq)?;
    let rest = &header[at + kq.len()..];
    let colon = rest.find(':')?;
    let rest = &rest[colon + 1..];
    // value ends at the next top-level comma or closing brace
    let mut depth = 0usize;
    for (i, ch) in rest.char_indices() {
        match ch {
            '(' | '[' => depth += 1,
            ')' | ']' => depth = depth.saturating_sub(1),
            ',' | '}' if depth == 0 => return Some(rest[..i].trim()),
            _ => {}
        }
    }
    None
}

/// Write a little npy file (used by tests and fixture builders).
pub fn write_npy_f32(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let dict = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({},), }}",
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    // pad header so that data starts at a multiple of 64
    let mut header = dict.into_bytes();
    let base = 10 + header.len() + 1;
    let pad = (64 - base % 64) % 64;
    header.extend(std::iter::repeat(b' ').take(pad));
    header.push(b'\n');
    let mut out = Vec::new();
    out.extend_from_slice(b"\x93NUMPY");
    out.push(1);
    out.push(0);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(&header);
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;

    fn write_fixture_archive(root: &Path, cases: usize, reps: usize) {
        let (h, w) = (8usize, 8usize);
        let mut rows = vec![CASES_HEADER.to_string()];
        for case in 0..cases {
            let re = 0.5e6 + case as f64 * 1.0e6;
            let subset = if case % 2 == 0 { "Test" } else { "Training" };
            let cat = if case < cases / 2 { "Low" } else { "High" };
            rows.push(format!("{case},{re},10.0,{subset},{cat}"));
            let dir = root.join(format!("case_{case:03}"));
            fs::create_dir_all(&dir).unwrap();
            for rep in 0..reps {
                let mut data = vec![0.0f64; 6 * h * w];
                // small square mask in the corner
                for i in 0..2 {
                    for j in 0..2 {
                        data[i * w + j] = 1.0;
                    }
                }
                for v in &mut data[h * w..2 * h * w] {
                    *v = 0.4;
                }
                for v in &mut data[2 * h * w..3 * h * w] {
                    *v = 0.1;
                }
                for (i, v) in data[3 * h * w..].iter_mut().enumerate() {
                    *v = ((i + rep) as f64 * 0.01).sin();
                }
                // masked targets zero
                for c in 3..6 {
                    for i in 0..2 {
                        for j in 0..2 {
                            data[c * h * w + i * w + j] = 0.0;
                        }
                    }
                }
                write_npy_f32(&dir.join(format!("rep_{rep:03}.npy")), &[6, h, w], &data).unwrap();
            }
        }
        fs::write(root.join(CASES_FILE), rows.join("\n") + "\n").unwrap();
    }

    #[test]
    fn npy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.npy");
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.5).collect();
        write_npy_f32(&p, &[2, 3, 4], &data).unwrap();
        let t = read_npy(&p).unwrap();
        assert_eq!(t.shape(), &[2, 3, 4]);
        assert_eq!(t.data(), &data[..]);
    }

    #[test]
    fn fixture_archive_imports_and_loads() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("raw");
        let out = dir.path().join("neutral");
        fs::create_dir_all(&src).unwrap();
        write_fixture_archive(&src, 4, 3);
        let report = import_archive(&src, &out).unwrap();
        assert_eq!(report.cases, 4);
        assert_eq!(report.samples, 12);
        let ds = load_dataset(&out).unwrap();
        assert_eq!(ds.samples.len(), 12);
        assert_eq!(ds.split.len(), 4);
    }

    #[test]
    fn import_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("raw");
        fs::create_dir_all(&src).unwrap();
        write_fixture_archive(&src, 2, 2);
        let out1 = dir.path().join("o1");
        let out2 = dir.path().join("o2");
        import_archive(&src, &out1).unwrap();
        import_archive(&src, &out2).unwrap();
        // compare all bytes
        let walk = |root: &Path| {
            let mut files = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(d) = stack.pop() {
                for e in fs::read_dir(&d).unwrap() {
                    let p = e.unwrap().path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        files.push(p);
                    }
                }
            }
            files.sort();
            files
        };
        let f1 = walk(&out1);
        let f2 = walk(&out2);
        assert_eq!(f1.len(), f2.len());
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(
                a.strip_prefix(&out1).unwrap(),
                b.strip_prefix(&out2).unwrap()
            );
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{a:?}");
        }
    }

    #[test]
    fn empty_archive_yields_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("raw");
        let out = dir.path().join("neutral");
        fs::create_dir_all(&src).unwrap();
        let report = import_archive(&src, &out).unwrap();
        assert_eq!(report.samples, 0);
        assert!(out.join(MANIFEST_FILE).exists());
    }

    #[test]
    fn partial_archive_error_lists_salvageable() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("raw");
        fs::create_dir_all(&src).unwrap();
        write_fixture_archive(&src, 3, 2);
        // corrupt one replicate of case 1
        fs::write(src.join("case_001/rep_000.npy"), b"junk").unwrap();
        let out = dir.path().join("neutral");
        let err = import_archive(&src, &out).unwrap_err().to_string();
        assert!(err.contains("salvageable"), "{err}");
        assert!(err.contains('0') && err.contains('2'), "{err}");
    }
}
