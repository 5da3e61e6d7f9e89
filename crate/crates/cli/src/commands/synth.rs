use std::process::ExitCode;

use flowdiff_core::data::{
    generate_synthetic_dataset, toy_case_declarations, write_manifest, write_sample,
    ManifestEntry, MANIFEST_FILE, SAMPLE_EXTENSION,
};
use flowdiff_core::rng::RngFactory;

use crate::{CliError, RunConfig};

/// Write the synthetic dataset (samples + manifest) into data.root.
pub fn run(config: &RunConfig) -> Result<ExitCode, CliError> {
    let root = config.data.resolve_root()?;
    std::fs::create_dir_all(&root).map_err(|e| CliError::data(format!("{}: {e}", root.display())))?;
    let s = &config.synth;
    let dataset = generate_synthetic_dataset(
        s.height,
        s.width,
        s.replicates,
        s.noise_scale,
        s.obstacle_scale,
        config.data.re_max,
        &toy_case_declarations(),
        &RngFactory::new(config.seed),
    )?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for sample in &dataset.samples {
        let rel = format!(
            "case_{:03}/rep_{:03}.{SAMPLE_EXTENSION}",
            sample.meta.case_id, sample.meta.replicate
        );
        let path = root.join(&rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::data(format!("{}: {e}", parent.display())))?;
        }
        write_sample(&path, sample)?;
        let info = dataset
            .split
            .get(sample.meta.case_id)
            .expect("split covers every generated case");
        entries.push(ManifestEntry {
            file: rel,
            case_id: sample.meta.case_id,
            re: sample.meta.re,
            alpha_deg: sample.meta.alpha_deg,
            replicate: sample.meta.replicate,
            subset: info.subset,
            category: info.category,
        });
    }
    write_manifest(&root.join(MANIFEST_FILE), &entries)?;
    std::fs::write(root.join("resolved.toml"), config.to_toml())
        .map_err(|e| CliError::data(format!("{}: {e}", root.display())))?;
    println!(
        "wrote {} samples ({} cases, {}x{}) to {}",
        dataset.samples.len(),
        dataset.split.len(),
        s.height,
        s.width,
        root.display()
    );
    Ok(ExitCode::SUCCESS)
}
