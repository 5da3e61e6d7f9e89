use std::path::Path;
use std::process::ExitCode;

use flowdiff_core::data::import_archive;

use crate::CliError;

pub fn run(archive: &Path, out: &Path) -> Result<ExitCode, CliError> {
    if !archive.exists() {
        return Err(CliError::data(format!(
            "archive {} is not readable",
            archive.display()
        )));
    }
    let report = import_archive(archive, out)?;
    if report.samples == 0 {
        eprintln!(
            "warning: archive {} contained no cases; wrote an empty manifest to {}",
            archive.display(),
            out.display()
        );
        return Ok(ExitCode::from(3));
    }
    println!(
        "imported {} samples across {} cases into {}",
        report.samples,
        report.cases,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}
