use std::process::ExitCode;

use flowdiff_core::data::load_dataset;
use flowdiff_core::training::train_with_dataset;

use crate::{CliError, RunConfig};

pub fn run(config: &RunConfig) -> Result<ExitCode, CliError> {
    let root = config.data.resolve_root()?;
    let dataset = load_dataset(&root)?;
    if dataset.is_empty() {
        return Err(CliError::data(format!(
            "dataset at {} is empty (run `flowdiff synth` or `flowdiff import` first)",
            root.display()
        )));
    }
    let mut train_config = config.to_train_config();
    train_config.dataset_root = Some(root);
    let run_dir = config.make_run_dir("train")?;
    println!("training into {}", run_dir.display());
    let outcome = train_with_dataset(&train_config, &dataset, Some(&run_dir))?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "finished {} iterations; final loss {last:.6}; checkpoint {}",
        outcome.losses.len(),
        outcome
            .final_checkpoint
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    );
    Ok(ExitCode::SUCCESS)
}
