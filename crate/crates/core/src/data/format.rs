//! Binary sample-file format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "FLOWSMP\0"
//! 8       4     u32 version (currently 1)
//! 12      4     u32 reserved (zero)
//! 16      4     u32 case id
//! 20      4     u32 replicate index
//! 24      4     u32 grid height H
//! 28      4     u32 grid width W
//! 32      8     f64 Reynolds number
//! 40      8     f64 angle of attack (degrees)
//! 48      -     6 planes of H*W f32 values, row-major, channel order
//!               (mask, Re cos / re_max, Re sin / re_max, p, u_x, u_y)
//! ```
//!
//! Values are stored as f32; writing quantizes, so a write/read/write cycle
//! is byte-identical.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::CoreError;
use crate::nn::Tensor;
use crate::Result;

use super::{CaseMeta, ConditionTensor, FieldSample};

pub const SAMPLE_EXTENSION: &str = "fsmp";
const MAGIC: &[u8; 8] = b"FLOWSMP\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 48;

pub fn write_sample(path: &Path, sample: &FieldSample) -> Result<()> {
    let (h, w) = sample.spatial_dims();
    let plane = h * w;
    let mut buf = Vec::with_capacity(HEADER_LEN + 6 * plane * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf.extend_from_slice(&sample.meta.case_id.to_le_bytes());
    buf.extend_from_slice(&sample.meta.replicate.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&sample.meta.re.to_le_bytes());
    buf.extend_from_slice(&sample.meta.alpha_deg.to_le_bytes());
    for v in sample.condition.channels().data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for v in sample.target.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<FieldSample> {
    let origin = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| CoreError::parse(&origin, e.to_string()))?;
    parse_sample(&bytes, &origin)
}

fn parse_sample(bytes: &[u8], origin: &str) -> Result<FieldSample> {
    if bytes.len() < HEADER_LEN {
        return Err(CoreError::parse(origin, "truncated header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(CoreError::parse(origin, "bad magic"));
    }
    let version = u32_at(bytes, 8);
    if version != VERSION {
        return Err(CoreError::parse(
            origin,
            format!("unsupported version {version}"),
        ));
    }
    let case_id = u32_at(bytes, 16);
    let replicate = u32_at(bytes, 20);
    let h = u32_at(bytes, 24) as usize;
    let w = u32_at(bytes, 28) as usize;
    let re = f64_at(bytes, 32);
    let alpha_deg = f64_at(bytes, 40);
    if h == 0 || w == 0 {
        return Err(CoreError::parse(origin, "zero grid dimension"));
    }
    let plane = h * w;
    let want = HEADER_LEN + 6 * plane * 4;
    if bytes.len() != want {
        return Err(CoreError::parse(
            origin,
            format!("expected {want} bytes for 6 {h}x{w} planes, got {}", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(6 * plane);
    for i in 0..6 * plane {
        let off = HEADER_LEN + i * 4;
        let v = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        if !v.is_finite() {
            return Err(CoreError::parse(origin, format!("non-finite value at element {i}")));
        }
        values.push(v as f64);
    }
    let condition = ConditionTensor::from_channels(Tensor::from_vec(
        &[3, h, w],
        values[..3 * plane].to_vec(),
    ))
    .map_err(|e| CoreError::validation(origin, e.to_string()))?;
    let target = Tensor::from_vec(&[3, h, w], values[3 * plane..].to_vec());
    let sample = FieldSample {
        condition,
        target,
        meta: CaseMeta {
            case_id,
            re,
            alpha_deg,
            replicate,
        },
    };
    sample.validate(origin)?;
    Ok(sample)
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn f64_at(b: &[u8], off: usize) -> f64 {
    f64::from_le_bytes([
        b[off],
        b[off + 1],
        b[off + 2],
        b[off + 3],
        b[off + 4],
        b[off + 5],
        b[off + 6],
        b[off + 7],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::encode_condition;

    fn sample_fixture() -> FieldSample {
        let mask = Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let condition = encode_condition(&mask, 3.3e6, 12.5, 1.05e7).unwrap();
        let mut target = Tensor::from_vec(
            &[3, 2, 3],
            (0..18).map(|i| (i as f64 * 0.37).sin()).collect(),
        );
        // zero out masked cells (positions 1 and 5 in each plane)
        for c in 0..3 {
            target.data_mut()[c * 6 + 1] = 0.0;
            target.data_mut()[c * 6 + 5] = 0.0;
        }
        FieldSample::new(
            condition,
            target,
            CaseMeta {
                case_id: 7,
                re: 3.3e6,
                alpha_deg: 12.5,
                replicate: 4,
            },
        )
        .unwrap()
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.fsmp");
        let p2 = dir.path().join("b.fsmp");
        let s = sample_fixture();
        write_sample(&p1, &s).unwrap();
        let loaded = read_sample(&p1).unwrap();
        assert_eq!(loaded.meta, s.meta);
        write_sample(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_header_fails_closed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.fsmp");
        let s = sample_fixture();
        write_sample(&p, &s).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_sample(&p).is_err());
        // truncation also fails
        let s2 = &bytes[..bytes.len() - 5];
        std::fs::write(&p, s2).unwrap();
        assert!(read_sample(&p).is_err());
    }

    #[test]
    fn parse_error_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("weird.fsmp");
        std::fs::write(&p, b"garbage").unwrap();
        let err = read_sample(&p).unwrap_err();
        assert!(err.to_string().contains("weird.fsmp"));
    }
}
