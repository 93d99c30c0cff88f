//! Runs the random quadratic suite and writes its report.

use blaq_core::theory::{self, SuiteReport};

use crate::config::ExperimentConfig;
use crate::error::RunError;
use crate::output::{self, Check, OutputError};

pub const INSTANCE_HEADER: [&str; 11] = [
    "index",
    "dim",
    "L1",
    "mu",
    "eta",
    "a",
    "skipped",
    "loss_blaq",
    "loss_laq",
    "bound_violations",
    "bound_checked",
];

pub fn run_theory_check(cfg: &ExperimentConfig) -> Result<(SuiteReport, Vec<Check>), RunError> {
    output::ensure_dir(&cfg.output_dir)?;
    output::write_json(&cfg.output_dir.join("config.json"), cfg)?;
    let report = theory::run_suite(&cfg.theory)?;
    write_instances(&cfg.output_dir.join("instances.csv"), &report)?;
    let checks = vec![
        Check::new(
            "blaq final loss is not worse than laq on enough instances",
            report.ordering_holds(),
            format!(
                "{} of {} evaluated instances, {} required",
                report.blaq_not_worse, report.evaluated, report.required
            ),
        ),
        Check::new(
            "convergence bound holds wherever it is positive",
            report.bound_holds(),
            format!("{} violations", report.total_bound_violations),
        ),
    ];
    output::write_json(
        &cfg.output_dir.join("summary.json"),
        &serde_json::json!({ "experiment": "theory-check", "report": report, "checks": checks }),
    )?;
    Ok((report, checks))
}

fn write_instances(path: &std::path::Path, report: &SuiteReport) -> Result<(), OutputError> {
    let err = |source| OutputError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(INSTANCE_HEADER).map_err(err)?;
    for r in &report.instances {
        w.write_record([
            r.index.to_string(),
            r.dim.to_string(),
            r.l1.to_string(),
            r.mu.to_string(),
            r.eta.to_string(),
            r.a.to_string(),
            r.skipped.to_string(),
            opt(r.loss_blaq),
            opt(r.loss_laq),
            r.bound_violations.to_string(),
            r.bound_checked.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })
}
