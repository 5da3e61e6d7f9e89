use std::process::ExitCode;

use flowdiff_core::backbone::LatentKind;
use flowdiff_core::data::load_dataset;
use flowdiff_core::evaluation::{
    ablation_rows, ablation_to_csv, evaluate, format_ablation_table, EvalReport,
};
use flowdiff_core::rng::RngFactory;
use flowdiff_core::samplers::SamplerPlan;
use flowdiff_core::training::train_with_dataset;

use crate::{CliError, RunConfig};

/// Train and evaluate the ablation matrix under one shared config:
/// the full model (strided deterministic sampling), the conv mid-block
/// variant, the skipless variant, and the full model driven by the full-step
/// ancestral sampler. Relative changes are against the first row.
pub fn run(config: &RunConfig) -> Result<ExitCode, CliError> {
    let root = config.data.resolve_root()?;
    let dataset = load_dataset(&root)?;
    if dataset.is_empty() {
        return Err(CliError::data(format!("dataset at {} is empty", root.display())));
    }
    let schedule = config.schedule.build()?;
    let plan = config.sampler.build(schedule.num_steps())?;
    let stats = dataset.case_statistics()?;
    let factory = RngFactory::new(config.seed);
    let run_dir = config.make_run_dir("ablate")?;

    let evaluate_kind = |kind: LatentKind,
                             plan: &SamplerPlan,
                             tag: &str|
     -> Result<EvalReport, CliError> {
        let mut train_config = config.to_train_config();
        train_config.backbone.latent_kind = kind;
        let variant_dir = run_dir.join(tag);
        std::fs::create_dir_all(&variant_dir).map_err(|e| CliError::data(e.to_string()))?;
        let outcome = train_with_dataset(&train_config, &dataset, Some(&variant_dir))?;
        let report = evaluate(
            &outcome.model,
            &dataset,
            &stats,
            plan,
            &schedule,
            config.evaluation.ensemble_size,
            &factory,
        )?;
        Ok(report)
    };

    println!("training + evaluating 4 variants under one config ...");
    let full = evaluate_kind(LatentKind::Dit, &plan, "full")?;
    let unet_mid = evaluate_kind(LatentKind::UnetMid, &plan, "unet_mid")?;
    let skipless = evaluate_kind(LatentKind::SkiplessDit, &plan, "skipless_dit")?;
    // same trained weights as the full row, full-step ancestral sampling
    let ddpm_plan = SamplerPlan::ddpm_full(schedule.num_steps())?;
    let full_model = flowdiff_core::backbone::load_checkpoint(&run_dir.join("full/model_final.ckpt"))?;
    let ddpm_report = evaluate(
        &full_model,
        &dataset,
        &stats,
        &ddpm_plan,
        &schedule,
        config.evaluation.ensemble_size,
        &factory,
    )?;

    let rows = ablation_rows(&[
        ("full (latent transformer + skips)".to_string(), full),
        ("no transformer (conv mid-block)".to_string(), unet_mid),
        ("no encoder-decoder skips".to_string(), skipless),
        ("full-step ancestral sampling".to_string(), ddpm_report),
    ]);
    let table = format_ablation_table(&rows);
    std::fs::write(run_dir.join("ablation.csv"), ablation_to_csv(&rows))
        .map_err(|e| CliError::data(e.to_string()))?;
    std::fs::write(run_dir.join("ablation.txt"), &table)
        .map_err(|e| CliError::data(e.to_string()))?;
    print!("{table}");
    println!("ablation artifacts in {}", run_dir.display());
    Ok(ExitCode::SUCCESS)
}
