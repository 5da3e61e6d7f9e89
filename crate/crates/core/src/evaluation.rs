//! Ensemble inference and error reporting.
//!
//! For each evaluated case an ensemble of reverse trajectories (fresh initial
//! noise per member) yields a pointwise mean prediction and a pointwise
//! spread; both are scored against the reference statistics over unmasked
//! cells, then aggregated by dataset region and uncertainty category.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::data::{CaseStatistics, ConditionTensor, Dataset, Region, Subset, UncertaintyCategory};
use crate::error::CoreError;
use crate::nn::Tensor;
use crate::rng::{RngFactory, StreamDomain};
use crate::samplers::{generate, NoisePredictor, SamplerPlan};
use crate::schedules::NoiseSchedule;
use crate::Result;

/// An ensemble of generated fields with its pointwise statistics.
#[derive(Debug, Clone)]
pub struct EnsemblePrediction {
    pub members: Vec<Tensor>,
    pub mean: Tensor,
    /// Population spread; absent for a single-member ensemble.
    pub std: Option<Tensor>,
    pub model_evaluations: usize,
    pub wall_seconds: f64,
    /// All members bit-identical (deterministic plan with shared noise).
    pub degenerate: bool,
}

/// Run `ensemble_size` independent trajectories. Each member draws its own
/// initial noise from a distinct stream (`member_stream_base + i`) unless
/// `share_initial_noise` is set, which reuses one stream and flags the
/// resulting ensemble as degenerate under deterministic plans.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_predict(
    model: &dyn NoisePredictor,
    condition: &ConditionTensor,
    plan: &SamplerPlan,
    schedule: &NoiseSchedule,
    ensemble_size: usize,
    factory: &RngFactory,
    member_stream_base: u64,
    share_initial_noise: bool,
) -> Result<EnsemblePrediction> {
    if ensemble_size < 1 {
        return Err(CoreError::evaluation("ensemble size must be >= 1"));
    }
    let started = Instant::now();
    let mut members = Vec::with_capacity(ensemble_size);
    for i in 0..ensemble_size {
        let stream_id = if share_initial_noise {
            member_stream_base
        } else {
            member_stream_base + i as u64
        };
        let mut rng = factory.stream(StreamDomain::Ensemble, stream_id);
        members.push(generate(model, condition, plan, schedule, &mut rng)?);
    }
    let wall_seconds = started.elapsed().as_secs_f64();
    let numel = members[0].numel();
    let n = members.len() as f64;
    let mut mean = vec![0.0; numel];
    for m in &members {
        for (acc, v) in mean.iter_mut().zip(m.data()) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= n;
    }
    let mean = Tensor::from_vec(members[0].shape(), mean);
    let std = if members.len() >= 2 {
        let mut var = vec![0.0; numel];
        for m in &members {
            for ((acc, v), mu) in var.iter_mut().zip(m.data()).zip(mean.data()) {
                *acc += (v - mu) * (v - mu);
            }
        }
        Some(Tensor::from_vec(
            members[0].shape(),
            var.iter().map(|v| (v / n).sqrt()).collect(),
        ))
    } else {
        None
    };
    let degenerate = members.len() >= 2 && members[1..].iter().all(|m| m == &members[0]);
    Ok(EnsemblePrediction {
        model_evaluations: ensemble_size * plan.num_evaluations(),
        wall_seconds,
        degenerate,
        members,
        mean,
        std,
    })
}

/// Mean squared difference over the cells where `mask` is 0 (all cells when
/// no mask is given). The mask is one spatial plane applied to every channel.
pub fn mse_fields(predicted: &Tensor, reference: &Tensor, mask: Option<&[f64]>) -> Result<f64> {
    if predicted.shape() != reference.shape() {
        return Err(CoreError::shape(format!(
            "mse over {:?} vs {:?}",
            predicted.shape(),
            reference.shape()
        )));
    }
    match mask {
        None => {
            let n = predicted.numel() as f64;
            Ok(predicted
                .data()
                .iter()
                .zip(reference.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n)
        }
        Some(mask) => {
            let numel = predicted.numel();
            if numel % mask.len() != 0 {
                return Err(CoreError::shape(format!(
                    "mask of {} cells against {numel} elements",
                    mask.len()
                )));
            }
            let mut sum = 0.0;
            let mut count = 0usize;
            for (i, (a, b)) in predicted.data().iter().zip(reference.data()).enumerate() {
                if mask[i % mask.len()] == 0.0 {
                    sum += (a - b) * (a - b);
                    count += 1;
                }
            }
            if count == 0 {
                return Err(CoreError::evaluation("mask excludes every cell"));
            }
            Ok(sum / count as f64)
        }
    }
}

/// Per-case evaluation result.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub case_id: u32,
    pub re: f64,
    pub region: Region,
    pub category: UncertaintyCategory,
    pub mse_mu: f64,
    pub mse_sigma: f64,
    pub model_evaluations: usize,
    pub wall_seconds: f64,
}

/// One aggregate row: unweighted mean over member cases with the standard
/// error across cases.
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub region: Region,
    /// `None` labels the "All cases" row of a region.
    pub category: Option<UncertaintyCategory>,
    pub case_count: usize,
    pub mse_mu_mean: f64,
    pub mse_mu_se: f64,
    pub mse_sigma_mean: f64,
    pub mse_sigma_se: f64,
}

/// Full evaluation report.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub cases: Vec<CaseResult>,
    pub aggregates: Vec<AggregateRow>,
    pub ensemble_size: usize,
    pub evaluations_per_case: usize,
    pub total_wall_seconds: f64,
}

/// Evaluate every test-subset case against its reference statistics.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &dyn NoisePredictor,
    dataset: &Dataset,
    stats: &BTreeMap<u32, CaseStatistics>,
    plan: &SamplerPlan,
    schedule: &NoiseSchedule,
    ensemble_size: usize,
    factory: &RngFactory,
) -> Result<EvalReport> {
    if ensemble_size < 2 {
        return Err(CoreError::evaluation(
            "ensemble size must be >= 2 so the spread field exists",
        ));
    }
    let by_case = dataset.by_case();
    let mut cases = Vec::new();
    let mut total_wall = 0.0;
    for (case_id, info) in dataset.split.iter() {
        if info.subset != Subset::Test {
            continue;
        }
        let reps = by_case
            .get(case_id)
            .ok_or_else(|| CoreError::evaluation(format!("case {case_id} has no samples")))?;
        let reference = stats
            .get(case_id)
            .ok_or_else(|| CoreError::evaluation(format!("case {case_id} has no reference statistics")))?;
        let condition = &reps[0].condition;
        let pred = ensemble_predict(
            model,
            condition,
            plan,
            schedule,
            ensemble_size,
            factory,
            (*case_id as u64) << 32,
            false,
        )?;
        let mask = condition.mask();
        let mse_mu = mse_fields(&pred.mean, &reference.mean, Some(mask))?;
        let sigma = pred.std.as_ref().expect("ensemble_size >= 2");
        let mse_sigma = mse_fields(sigma, &reference.std, Some(mask))?;
        total_wall += pred.wall_seconds;
        cases.push(CaseResult {
            case_id: *case_id,
            re: info.re,
            region: info.region,
            category: info.category,
            mse_mu,
            mse_sigma,
            model_evaluations: pred.model_evaluations,
            wall_seconds: pred.wall_seconds,
        });
    }
    if cases.is_empty() {
        return Err(CoreError::evaluation("no test cases to evaluate"));
    }
    let aggregates = aggregate(&cases);
    Ok(EvalReport {
        evaluations_per_case: ensemble_size * plan.num_evaluations(),
        ensemble_size,
        total_wall_seconds: total_wall,
        cases,
        aggregates,
    })
}

fn aggregate(cases: &[CaseResult]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for region in [Region::Interpolation, Region::Extrapolation] {
        for category in [
            Some(UncertaintyCategory::Low),
            Some(UncertaintyCategory::High),
            None,
        ] {
            let member: Vec<&CaseResult> = cases
                .iter()
                .filter(|c| c.region == region && category.map_or(true, |cat| c.category == cat))
                .collect();
            if member.is_empty() {
                continue;
            }
            let n = member.len() as f64;
            let mu: Vec<f64> = member.iter().map(|c| c.mse_mu).collect();
            let sg: Vec<f64> = member.iter().map(|c| c.mse_sigma).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
            let se = |v: &[f64]| {
                if v.len() < 2 {
                    0.0
                } else {
                    let m = mean(v);
                    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
                    (var / n).sqrt()
                }
            };
            rows.push(AggregateRow {
                region,
                category,
                case_count: member.len(),
                mse_mu_mean: mean(&mu),
                mse_mu_se: se(&mu),
                mse_sigma_mean: mean(&sg),
                mse_sigma_se: se(&sg),
            });
        }
    }
    rows
}

/// CSV rendering: one row per case followed by the aggregate rows.
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "row,case_id,re,region,category,mse_mu,mse_mu_se,mse_sigma,mse_sigma_se,model_evaluations,wall_seconds\n",
    );
    for c in &report.cases {
        out.push_str(&format!(
            "case,{},{},{},{},{},,{},,{},{}\n",
            c.case_id, c.re, c.region, c.category, c.mse_mu, c.mse_sigma, c.model_evaluations, c.wall_seconds
        ));
    }
    for a in &report.aggregates {
        let cat = a
            .category
            .map(|c| c.to_string())
            .unwrap_or_else(|| "All".to_string());
        out.push_str(&format!(
            "aggregate,,,{},{},{},{},{},{},,\n",
            a.region, cat, a.mse_mu_mean, a.mse_mu_se, a.mse_sigma_mean, a.mse_sigma_se
        ));
    }
    out
}

/// Human-readable table with per-region rows for each uncertainty category.
pub fn format_report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:<12} {:>14} {:>14}\n",
        "Dataset Region", "Category", "MSE_mu", "MSE_sigma"
    ));
    for a in &report.aggregates {
        let cat = match a.category {
            Some(UncertaintyCategory::Low) => "low",
            Some(UncertaintyCategory::High) => "high",
            None => "All cases",
        };
        out.push_str(&format!(
            "{:<22} {:<12} {:>7.4e}±{:.1e} {:>7.4e}±{:.1e}\n",
            a.region.to_string(),
            cat,
            a.mse_mu_mean,
            a.mse_mu_se,
            a.mse_sigma_mean,
            a.mse_sigma_se
        ));
    }
    out.push_str(&format!(
        "ensemble {} members, {} model evaluations per case, {:.3} s total\n",
        report.ensemble_size, report.evaluations_per_case, report.total_wall_seconds
    ));
    out
}

/// Overall unweighted means over every evaluated case.
pub fn overall_means(report: &EvalReport) -> (f64, f64) {
    let n = report.cases.len() as f64;
    (
        report.cases.iter().map(|c| c.mse_mu).sum::<f64>() / n,
        report.cases.iter().map(|c| c.mse_sigma).sum::<f64>() / n,
    )
}

/// One ablation-table row.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub mse_mu: f64,
    pub mse_sigma: f64,
    pub inference_seconds: f64,
    pub model_evaluations_per_sample: usize,
    /// Percent changes vs. the first (baseline) row; `None` on the baseline.
    pub rel_mu: Option<f64>,
    pub rel_sigma: Option<f64>,
    pub rel_time: Option<f64>,
}

/// Build the ablation rows from (name, report) pairs; the first entry is the
/// baseline the relative changes refer to.
pub fn ablation_rows(entries: &[(String, EvalReport)]) -> Vec<AblationRow> {
    let mut rows = Vec::with_capacity(entries.len());
    let mut base: Option<(f64, f64, f64)> = None;
    for (name, report) in entries {
        let (mu, sigma) = overall_means(report);
        let time = report.total_wall_seconds / report.cases.len() as f64;
        let rel = |x: f64, b: f64| 100.0 * (x - b) / b;
        let (rel_mu, rel_sigma, rel_time) = match base {
            None => {
                base = Some((mu, sigma, time));
                (None, None, None)
            }
            Some((bm, bs, bt)) => (Some(rel(mu, bm)), Some(rel(sigma, bs)), Some(rel(time, bt))),
        };
        rows.push(AblationRow {
            variant: name.clone(),
            mse_mu: mu,
            mse_sigma: sigma,
            inference_seconds: time,
            model_evaluations_per_sample: report.evaluations_per_case / report.ensemble_size,
            rel_mu,
            rel_sigma,
            rel_time,
        });
    }
    rows
}

/// Table with columns (MSE_mu, Rel. Change, MSE_sigma, Rel. Change,
/// inference time, Rel. Change).
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<38} {:>11} {:>9} {:>11} {:>9} {:>10} {:>9} {:>7}\n",
        "Model Variant", "MSE_mu", "Rel", "MSE_sigma", "Rel", "Time (s)", "Rel", "Evals"
    ));
    for r in rows {
        let fmt_rel = |v: Option<f64>| match v {
            None => "--".to_string(),
            Some(p) => format!("{p:+.1}%"),
        };
        out.push_str(&format!(
            "{:<38} {:>11.4e} {:>9} {:>11.4e} {:>9} {:>10.4} {:>9} {:>7}\n",
            r.variant,
            r.mse_mu,
            fmt_rel(r.rel_mu),
            r.mse_sigma,
            fmt_rel(r.rel_sigma),
            r.inference_seconds,
            fmt_rel(r.rel_time),
            r.model_evaluations_per_sample
        ));
    }
    out
}

/// Ablation table CSV.
pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "variant,mse_mu,rel_mu_pct,mse_sigma,rel_sigma_pct,inference_seconds,rel_time_pct,model_evaluations_per_sample\n",
    );
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.mse_mu,
            opt(r.rel_mu),
            r.mse_sigma,
            opt(r.rel_sigma),
            r.inference_seconds,
            opt(r.rel_time),
            r.model_evaluations_per_sample
        ));
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).expect("non-finite rank input"));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}
