use std::path::Path;
use std::process::ExitCode;

use flowdiff_core::backbone::load_checkpoint;
use flowdiff_core::data::{
    encode_condition, read_sample, synthetic_mask, write_sample, CaseMeta, FieldSample,
};
use flowdiff_core::evaluation::ensemble_predict;
use flowdiff_core::nn::Tensor;
use flowdiff_core::rng::RngFactory;

use crate::{CliError, RunConfig};

/// Cases minted by this command carry a sentinel id.
const SAMPLE_CASE_ID: u32 = 9000;

pub fn run(
    config: &RunConfig,
    checkpoint: &Path,
    re: f64,
    alpha_deg: f64,
    mask_from: Option<&Path>,
    count: Option<usize>,
) -> Result<ExitCode, CliError> {
    let model = load_checkpoint(checkpoint)?;
    let size = model.config().input_size;
    let mask = match mask_from {
        Some(path) => {
            let donor = read_sample(path)?;
            let (h, w) = donor.spatial_dims();
            if h != size || w != size {
                return Err(CliError::data(format!(
                    "mask donor grid {h}x{w} does not match model input size {size}"
                )));
            }
            Tensor::from_vec(&[h, w], donor.condition.mask().to_vec())
        }
        None => synthetic_mask(size, size, config.synth.obstacle_scale),
    };
    let condition = encode_condition(&mask, re, alpha_deg, config.data.re_max)?;
    let schedule = config.schedule.build()?;
    let plan = config.sampler.build(schedule.num_steps())?;
    let ensemble = count.unwrap_or(config.evaluation.ensemble_size);
    let factory = RngFactory::new(config.seed);

    let run_dir = config.make_run_dir("sample")?;
    let pred = ensemble_predict(&model, &condition, &plan, &schedule, ensemble, &factory, 0, false)?;

    let masked = |field: &Tensor| -> Tensor {
        let plane = size * size;
        let mut data = field.data().to_vec();
        for c in 0..3 {
            for (i, m) in condition.mask().iter().enumerate() {
                if *m == 1.0 {
                    data[c * plane + i] = 0.0;
                }
            }
        }
        Tensor::from_vec(field.shape(), data)
    };
    let meta = |replicate: u32| CaseMeta {
        case_id: SAMPLE_CASE_ID,
        re,
        alpha_deg,
        replicate,
    };
    for (i, member) in pred.members.iter().enumerate() {
        let sample = FieldSample::new(condition.clone(), masked(member), meta(i as u32))?;
        write_sample(&run_dir.join(format!("member_{i:03}.fsmp")), &sample)?;
    }
    let mean = FieldSample::new(condition.clone(), masked(&pred.mean), meta(pred.members.len() as u32))?;
    write_sample(&run_dir.join("mean.fsmp"), &mean)?;
    if let Some(std) = &pred.std {
        let spread = FieldSample::new(
            condition.clone(),
            masked(std),
            meta(pred.members.len() as u32 + 1),
        )?;
        write_sample(&run_dir.join("spread.fsmp"), &spread)?;
    }
    println!(
        "sampled {} members for Re {re:.3e}, alpha {alpha_deg} deg ({} model evaluations, {:.3} s) -> {}",
        pred.members.len(),
        pred.model_evaluations,
        pred.wall_seconds,
        run_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}
