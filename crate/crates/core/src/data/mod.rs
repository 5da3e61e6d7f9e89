//! Dataset types and operations: condition encoding, target normalization,
//! reference statistics, case splits, sample files and the synthetic
//! generator.
//!
//! A sample couples a three-channel condition (geometry mask plus the two
//! spatially constant flow-regime channels) with a three-channel target
//! (dimensionless pressure and the two normalized velocity components) on the
//! same grid. Cells inside the geometry mask carry target value 0.

mod format;
mod import;
mod manifest;
mod split;
mod synthetic;

pub use format::{read_sample, write_sample, SAMPLE_EXTENSION};
pub use import::{import_archive, read_npy, write_npy_f32, ImportReport};
pub use manifest::{read_manifest, write_manifest, ManifestEntry, MANIFEST_FILE};
pub use split::{CaseInfo, CaseSplit, Region, Subset, UncertaintyCategory};
pub use synthetic::{
    generate_synthetic_case, generate_synthetic_dataset, synthetic_mask, toy_case_declarations,
    SyntheticCaseDecl, SyntheticCaseSpec, NOISE_FULL_RADIUS, NOISE_ZERO_RADIUS,
};

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::CoreError;
use crate::nn::Tensor;
use crate::Result;

/// Number of condition channels (mask + two flow-regime channels).
pub const CONDITION_CHANNELS: usize = 3;
/// Number of target channels (pressure, u_x, u_y).
pub const TARGET_CHANNELS: usize = 3;

/// Geometry + flow-regime condition: mask in {0,1} and the two normalized,
/// spatially constant parametric channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTensor {
    channels: Tensor, // [3, H, W]
    re_cos_norm: f64,
    re_sin_norm: f64,
}

impl ConditionTensor {
    /// Build from a mask plane and the two normalized parametric values.
    pub fn new(mask: Tensor, re_cos_norm: f64, re_sin_norm: f64) -> Result<Self> {
        if mask.shape().len() != 2 {
            return Err(CoreError::data(format!(
                "mask must be 2-d, got {:?}",
                mask.shape()
            )));
        }
        for v in [re_cos_norm, re_sin_norm] {
            if !(v.is_finite() && (-1.0..=1.0).contains(&v)) {
                return Err(CoreError::data(format!(
                    "parametric channel value {v} outside [-1, 1]"
                )));
            }
        }
        if mask.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(CoreError::data("mask channel must be binary"));
        }
        let (h, w) = (mask.shape()[0], mask.shape()[1]);
        let mut data = Vec::with_capacity(3 * h * w);
        data.extend_from_slice(mask.data());
        data.extend(std::iter::repeat(re_cos_norm).take(h * w));
        data.extend(std::iter::repeat(re_sin_norm).take(h * w));
        Ok(Self {
            channels: Tensor::from_vec(&[3, h, w], data),
            re_cos_norm,
            re_sin_norm,
        })
    }

    /// Rebuild from a stored [3, H, W] tensor, validating the invariants
    /// (binary mask, constant parametric channels within [-1, 1]).
    pub fn from_channels(channels: Tensor) -> Result<Self> {
        let s = channels.shape();
        if s.len() != 3 || s[0] != CONDITION_CHANNELS {
            return Err(CoreError::data(format!(
                "condition tensor must be [3, H, W], got {s:?}"
            )));
        }
        let (h, w) = (s[1], s[2]);
        let plane = h * w;
        let data = channels.data();
        if data[..plane].iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(CoreError::data("mask channel must be binary"));
        }
        let re_cos_norm = data[plane];
        let re_sin_norm = data[2 * plane];
        for (c, want) in [(1usize, re_cos_norm), (2, re_sin_norm)] {
            if data[c * plane..(c + 1) * plane].iter().any(|v| *v != want) {
                return Err(CoreError::data(format!(
                    "parametric channel {c} is not spatially constant"
                )));
            }
        }
        for v in [re_cos_norm, re_sin_norm] {
            if !(v.is_finite() && (-1.0..=1.0).contains(&v)) {
                return Err(CoreError::data(format!(
                    "parametric channel value {v} outside [-1, 1]"
                )));
            }
        }
        Ok(Self {
            channels,
            re_cos_norm,
            re_sin_norm,
        })
    }

    pub fn channels(&self) -> &Tensor {
        &self.channels
    }

    pub fn mask(&self) -> &[f64] {
        let plane = self.plane();
        &self.channels.data()[..plane]
    }

    pub fn re_cos_norm(&self) -> f64 {
        self.re_cos_norm
    }

    pub fn re_sin_norm(&self) -> f64 {
        self.re_sin_norm
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        (self.channels.shape()[1], self.channels.shape()[2])
    }

    fn plane(&self) -> usize {
        self.channels.shape()[1] * self.channels.shape()[2]
    }
}

/// Encode (geometry, Reynolds number, angle of attack) into the condition
/// channels. The raw mask is thresholded at 0.5; the parametric channels are
/// `Re cos(alpha) / re_max` and `Re sin(alpha) / re_max` (alpha in degrees).
pub fn encode_condition(mask_raw: &Tensor, re: f64, alpha_deg: f64, re_max: f64) -> Result<ConditionTensor> {
    if !(re.is_finite() && re > 0.0) {
        return Err(CoreError::data(format!("Reynolds number must be > 0, got {re}")));
    }
    if !(re_max.is_finite() && re_max >= re) {
        return Err(CoreError::data(format!(
            "re_max ({re_max}) must be >= Re ({re})"
        )));
    }
    let mask = mask_raw.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let alpha = alpha_deg.to_radians();
    ConditionTensor::new(mask, re * alpha.cos() / re_max, re * alpha.sin() / re_max)
}

/// Per-sample metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseMeta {
    pub case_id: u32,
    pub re: f64,
    pub alpha_deg: f64,
    pub replicate: u32,
}

/// One dataset sample: condition channels, target channels, metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub condition: ConditionTensor,
    pub target: Tensor, // [3, H, W]
    pub meta: CaseMeta,
}

impl FieldSample {
    pub fn new(condition: ConditionTensor, target: Tensor, meta: CaseMeta) -> Result<Self> {
        let s = Self {
            condition,
            target,
            meta,
        };
        s.validate("<in-memory>")?;
        Ok(s)
    }

    /// Check the domain invariants, tagging failures with `origin`.
    pub fn validate(&self, origin: &str) -> Result<()> {
        let ts = self.target.shape();
        if ts.len() != 3 || ts[0] != TARGET_CHANNELS {
            return Err(CoreError::validation(
                origin,
                format!("target must be [3, H, W], got {ts:?}"),
            ));
        }
        let (h, w) = self.condition.spatial_dims();
        if (ts[1], ts[2]) != (h, w) {
            return Err(CoreError::validation(
                origin,
                format!("target {}x{} vs condition {h}x{w}", ts[1], ts[2]),
            ));
        }
        if !self.target.is_finite() {
            return Err(CoreError::validation(origin, "non-finite target values"));
        }
        let plane = h * w;
        let mask = self.condition.mask();
        for c in 0..TARGET_CHANNELS {
            let ch = &self.target.data()[c * plane..(c + 1) * plane];
            for (i, (m, v)) in mask.iter().zip(ch).enumerate() {
                if *m == 1.0 && *v != 0.0 {
                    return Err(CoreError::validation(
                        origin,
                        format!("masked cell {i} in channel {c} carries {v}, want 0"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        self.condition.spatial_dims()
    }
}

/// Apply the dimensionless-pressure and velocity normalizations and zero out
/// masked cells: `p -> (p - p_inf) / |u_f|^2`, `u -> u / |u_f|`.
pub fn normalize_raw_case(
    pressure: &Tensor,
    velocity_x: &Tensor,
    velocity_y: &Tensor,
    freestream_speed: f64,
    freestream_pressure: f64,
    mask: &[f64],
) -> Result<Tensor> {
    if !(freestream_speed.is_finite() && freestream_speed > 0.0) {
        return Err(CoreError::data(format!(
            "freestream speed must be > 0 to normalize, got {freestream_speed}"
        )));
    }
    let shape = pressure.shape();
    if velocity_x.shape() != shape || velocity_y.shape() != shape {
        return Err(CoreError::shape("pressure/velocity planes differ".to_string()));
    }
    let plane: usize = shape.iter().product();
    if mask.len() != plane {
        return Err(CoreError::shape("mask size differs from planes".to_string()));
    }
    let usq = freestream_speed * freestream_speed;
    let mut data = Vec::with_capacity(3 * plane);
    for (p, m) in pressure.data().iter().zip(mask) {
        data.push(if *m == 1.0 { 0.0 } else { (p - freestream_pressure) / usq });
    }
    for (u, m) in velocity_x.data().iter().zip(mask) {
        data.push(if *m == 1.0 { 0.0 } else { u / freestream_speed });
    }
    for (v, m) in velocity_y.data().iter().zip(mask) {
        data.push(if *m == 1.0 { 0.0 } else { v / freestream_speed });
    }
    let mut s = vec![3usize];
    s.extend_from_slice(shape);
    Ok(Tensor::from_vec(&s, data))
}

/// Invert [`normalize_raw_case`] on unmasked cells (masked cells stay 0).
pub fn denormalize_case(
    target: &Tensor,
    freestream_speed: f64,
    freestream_pressure: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = target.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CoreError::shape(format!("target must be [3,H,W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let usq = freestream_speed * freestream_speed;
    let p = target.data()[..plane]
        .iter()
        .map(|v| v * usq + freestream_pressure)
        .collect();
    let ux = target.data()[plane..2 * plane]
        .iter()
        .map(|v| v * freestream_speed)
        .collect();
    let uy = target.data()[2 * plane..]
        .iter()
        .map(|v| v * freestream_speed)
        .collect();
    let ps = &s[1..];
    Ok((
        Tensor::from_vec(ps, p),
        Tensor::from_vec(ps, ux),
        Tensor::from_vec(ps, uy),
    ))
}

/// Pointwise reference statistics over a case's replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseStatistics {
    pub mean: Tensor,
    pub std: Tensor,
    pub replicate_count: usize,
}

/// Pointwise mean and population standard deviation over replicates.
/// Permutation-invariant by construction.
pub fn compute_case_statistics(replicates: &[&Tensor]) -> Result<CaseStatistics> {
    if replicates.len() < 2 {
        return Err(CoreError::data(format!(
            "need >= 2 replicates for statistics, got {}",
            replicates.len()
        )));
    }
    let shape = replicates[0].shape().to_vec();
    for r in replicates {
        if r.shape() != shape {
            return Err(CoreError::shape("replicate shapes differ".to_string()));
        }
    }
    let n = replicates.len() as f64;
    let numel = replicates[0].numel();
    let mut mean = vec![0.0; numel];
    for r in replicates {
        for (m, v) in mean.iter_mut().zip(r.data()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; numel];
    for r in replicates {
        for ((s, v), m) in var.iter_mut().zip(r.data()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt()).collect();
    Ok(CaseStatistics {
        mean: Tensor::from_vec(&shape, mean),
        std: Tensor::from_vec(&shape, std),
        replicate_count: replicates.len(),
    })
}

/// An in-memory dataset: validated samples plus the case split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<FieldSample>,
    pub split: CaseSplit,
}

impl Dataset {
    pub fn empty() -> Self {
        Self {
            samples: Vec::new(),
            split: CaseSplit::default(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples grouped by case id (ordered).
    pub fn by_case(&self) -> BTreeMap<u32, Vec<&FieldSample>> {
        let mut map: BTreeMap<u32, Vec<&FieldSample>> = BTreeMap::new();
        for s in &self.samples {
            map.entry(s.meta.case_id).or_default().push(s);
        }
        map
    }

    /// Reference statistics per case, from the stored replicates.
    pub fn case_statistics(&self) -> Result<BTreeMap<u32, CaseStatistics>> {
        let mut out = BTreeMap::new();
        for (case, samples) in self.by_case() {
            let targets: Vec<&Tensor> = samples.iter().map(|s| &s.target).collect();
            out.insert(case, compute_case_statistics(&targets)?);
        }
        Ok(out)
    }

    /// Indices of samples belonging to cases in the given subset.
    pub fn indices_in(&self, subset: Subset) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                self.split
                    .get(s.meta.case_id)
                    .map(|info| info.subset == subset)
                    .unwrap_or(false)
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// Load every sample listed in the directory's manifest, validating each one
/// eagerly. A directory without a manifest loads as an empty dataset (the
/// caller decides how loudly to warn).
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Ok(Dataset::empty());
    }
    let entries = read_manifest(&manifest_path)?;
    let mut samples = Vec::with_capacity(entries.len());
    let mut assignments = Vec::new();
    for e in &entries {
        let path = root.join(&e.file);
        let sample = read_sample(&path)?;
        let origin = path.display().to_string();
        if sample.meta.case_id != e.case_id
            || sample.meta.replicate != e.replicate
            || sample.meta.re != e.re
            || sample.meta.alpha_deg != e.alpha_deg
        {
            return Err(CoreError::validation(
                origin,
                format!(
                    "metadata disagrees with manifest (case {} rep {} Re {} alpha {})",
                    e.case_id, e.replicate, e.re, e.alpha_deg
                ),
            ));
        }
        sample.validate(&origin)?;
        assignments.push((e.case_id, e.re, e.subset, e.category));
        samples.push(sample);
    }
    let split = CaseSplit::from_assignments(&assignments)?;
    Ok(Dataset { samples, split })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_mask(h: usize, w: usize) -> Tensor {
        Tensor::zeros(&[h, w])
    }

    #[test]
    fn condition_encoding_zero_angle() {
        let c = encode_condition(&flat_mask(4, 4), 2.0e6, 0.0, 4.0e6).unwrap();
        assert!((c.re_cos_norm() - 0.5).abs() < 1e-12);
        assert_eq!(c.re_sin_norm(), 0.0);
    }

    #[test]
    fn condition_encoding_reference_case() {
        // Re 6.5e6 at 20 degrees with re_max 10.5e6
        let c = encode_condition(&flat_mask(4, 4), 6.5e6, 20.0, 10.5e6).unwrap();
        assert!((c.re_cos_norm() - 0.5817).abs() < 5e-4, "{}", c.re_cos_norm());
        assert!((c.re_sin_norm() - 0.2117).abs() < 5e-4, "{}", c.re_sin_norm());
    }

    #[test]
    fn condition_mask_binarized() {
        let raw = Tensor::from_vec(&[2, 2], vec![0.2, 0.5, 0.7, 1.0]);
        let c = encode_condition(&raw, 1.0, 0.0, 2.0).unwrap();
        assert_eq!(c.mask(), &[0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn condition_rejects_bad_reynolds() {
        assert!(encode_condition(&flat_mask(2, 2), 0.0, 0.0, 1.0).is_err());
        assert!(encode_condition(&flat_mask(2, 2), -1.0, 0.0, 1.0).is_err());
        assert!(encode_condition(&flat_mask(2, 2), 2.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn normalization_zero_cases() {
        let p = Tensor::filled(&[3, 3], 7.5);
        let ux = Tensor::filled(&[3, 3], 2.0);
        let uy = Tensor::zeros(&[3, 3]);
        let mask = vec![0.0; 9];
        let t = normalize_raw_case(&p, &ux, &uy, 2.0, 7.5, &mask).unwrap();
        // p == p_inf everywhere -> zero pressure channel
        assert!(t.data()[..9].iter().all(|v| *v == 0.0));
        // u == (|u_f|, 0) -> velocity channels (1, 0)
        assert!(t.data()[9..18].iter().all(|v| (*v - 1.0).abs() < 1e-12));
        assert!(t.data()[18..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn normalization_rejects_zero_freestream() {
        let p = Tensor::zeros(&[2, 2]);
        assert!(normalize_raw_case(&p, &p, &p, 0.0, 0.0, &[0.0; 4]).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let h = 4;
        let p = Tensor::from_vec(&[h, h], (0..16).map(|i| 100.0 + i as f64).collect());
        let ux = Tensor::from_vec(&[h, h], (0..16).map(|i| (i as f64 * 0.3).sin() * 3.0).collect());
        let uy = Tensor::from_vec(&[h, h], (0..16).map(|i| (i as f64 * 0.7).cos() * 3.0).collect());
        let mask = vec![0.0; 16];
        let t = normalize_raw_case(&p, &ux, &uy, 3.5, 100.0, &mask).unwrap();
        let (p2, ux2, uy2) = denormalize_case(&t, 3.5, 100.0).unwrap();
        for (a, b) in p.data().iter().zip(p2.data()) {
            assert!((a - b).abs() < 1e-6 * a.abs().max(1.0));
        }
        for (a, b) in ux.data().iter().zip(ux2.data()) {
            assert!((a - b).abs() < 1e-6 * a.abs().max(1.0));
        }
        for (a, b) in uy.data().iter().zip(uy2.data()) {
            assert!((a - b).abs() < 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn statistics_identical_replicates() {
        let a = Tensor::filled(&[3, 2, 2], 1.5);
        let b = a.clone();
        let s = compute_case_statistics(&[&a, &b]).unwrap();
        assert!(s.std.data().iter().all(|v| *v == 0.0));
        assert!(s.mean.data().iter().all(|v| *v == 1.5));
    }

    #[test]
    fn statistics_symmetric_pair() {
        let a = Tensor::from_vec(&[1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]);
        let neg = a.map(|v| -v);
        let s = compute_case_statistics(&[&a, &neg]).unwrap();
        assert!(s.mean.data().iter().all(|v| *v == 0.0));
        for (sd, av) in s.std.data().iter().zip(a.data()) {
            assert!((sd - av.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn statistics_require_two_replicates() {
        let a = Tensor::zeros(&[1, 2, 2]);
        assert!(compute_case_statistics(&[&a]).is_err());
    }

    #[test]
    fn statistics_perturbation_scale() {
        // Monte-Carlo oracle: N(0, 0.1^2) perturbations around a base field
        // give a mean std near 0.1.
        use crate::rng::{standard_normal_vec, RngFactory, StreamDomain};
        let base = Tensor::filled(&[3, 8, 8], 0.7);
        let f = RngFactory::new(9);
        let reps: Vec<Tensor> = (0..20)
            .map(|i| {
                let noise = standard_normal_vec(&mut f.stream(StreamDomain::Synthetic, i), base.numel());
                let data = base
                    .data()
                    .iter()
                    .zip(&noise)
                    .map(|(b, n)| b + 0.1 * n)
                    .collect();
                Tensor::from_vec(base.shape(), data)
            })
            .collect();
        let refs: Vec<&Tensor> = reps.iter().collect();
        let s = compute_case_statistics(&refs).unwrap();
        let mean_std = s.std.data().iter().sum::<f64>() / s.std.numel() as f64;
        assert!(
            (mean_std - 0.1).abs() / 0.1 < 0.15,
            "mean std {mean_std} not within 15% of 0.1"
        );
    }

    #[test]
    fn statistics_permutation_invariant() {
        let a = Tensor::from_vec(&[1, 2, 1], vec![1.0, 2.0]);
        let b = Tensor::from_vec(&[1, 2, 1], vec![3.0, 5.0]);
        let c = Tensor::from_vec(&[1, 2, 1], vec![-1.0, 0.0]);
        let s1 = compute_case_statistics(&[&a, &b, &c]).unwrap();
        let s2 = compute_case_statistics(&[&c, &a, &b]).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn masked_cells_must_be_zero() {
        let mask = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let cond = ConditionTensor::new(mask, 0.5, 0.0).unwrap();
        let mut target = Tensor::zeros(&[3, 2, 2]);
        target.data_mut()[0] = 0.3; // masked cell carries a value
        let meta = CaseMeta {
            case_id: 0,
            re: 1.0,
            alpha_deg: 0.0,
            replicate: 0,
        };
        assert!(FieldSample::new(cond, target, meta).is_err());
    }

    #[test]
    fn empty_root_loads_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert!(ds.is_empty());
    }
}
