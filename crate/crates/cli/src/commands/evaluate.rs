use std::path::Path;
use std::process::ExitCode;

use flowdiff_core::backbone::load_checkpoint;
use flowdiff_core::data::{load_dataset, write_sample, CaseMeta, FieldSample, Subset};
use flowdiff_core::evaluation::{
    ensemble_predict, evaluate, format_report_table, report_to_csv,
};
use flowdiff_core::rng::RngFactory;
use flowdiff_core::nn::Tensor;

use crate::{CliError, RunConfig};

pub fn run(config: &RunConfig, checkpoint: &Path, dump_fields: bool) -> Result<ExitCode, CliError> {
    let root = config.data.resolve_root()?;
    let dataset = load_dataset(&root)?;
    if dataset.is_empty() {
        return Err(CliError::data(format!("dataset at {} is empty", root.display())));
    }
    let model = load_checkpoint(checkpoint)?;
    let schedule = config.schedule.build()?;
    let plan = config.sampler.build(schedule.num_steps())?;
    let stats = dataset.case_statistics()?;
    let factory = RngFactory::new(config.seed);
    let report = evaluate(
        &model,
        &dataset,
        &stats,
        &plan,
        &schedule,
        config.evaluation.ensemble_size,
        &factory,
    )?;

    let run_dir = config.make_run_dir("evaluate")?;
    std::fs::write(run_dir.join("report.csv"), report_to_csv(&report))
        .map_err(|e| CliError::data(e.to_string()))?;
    let table = format_report_table(&report);
    std::fs::write(run_dir.join("report.txt"), &table)
        .map_err(|e| CliError::data(e.to_string()))?;
    print!("{table}");

    if dump_fields || config.evaluation.dump_fields {
        let by_case = dataset.by_case();
        for (case_id, info) in dataset.split.iter() {
            if info.subset != Subset::Test {
                continue;
            }
            let cond = &by_case[case_id][0].condition;
            let pred = ensemble_predict(
                &model,
                cond,
                &plan,
                &schedule,
                config.evaluation.ensemble_size,
                &factory,
                (*case_id as u64) << 32,
                false,
            )?;
            let masked = |field: &Tensor| {
                let plane: usize = cond.mask().len();
                let mut data = field.data().to_vec();
                for c in 0..3 {
                    for (i, m) in cond.mask().iter().enumerate() {
                        if *m == 1.0 {
                            data[c * plane + i] = 0.0;
                        }
                    }
                }
                Tensor::from_vec(field.shape(), data)
            };
            let meta = |rep: u32| CaseMeta {
                case_id: *case_id,
                re: info.re,
                alpha_deg: by_case[case_id][0].meta.alpha_deg,
                replicate: rep,
            };
            let mean = FieldSample::new(cond.clone(), masked(&pred.mean), meta(0))?;
            write_sample(&run_dir.join(format!("case_{case_id:03}_mean.fsmp")), &mean)?;
            if let Some(std) = &pred.std {
                let spread = FieldSample::new(cond.clone(), masked(std), meta(1))?;
                write_sample(&run_dir.join(format!("case_{case_id:03}_spread.fsmp")), &spread)?;
            }
        }
    }
    println!("report written to {}", run_dir.display());
    Ok(ExitCode::SUCCESS)
}
