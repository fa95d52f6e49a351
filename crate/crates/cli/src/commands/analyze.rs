use std::collections::BTreeSet;

use p3d_core::analysis::{rank_rating, task_correlation_matrix};
use p3d_core::datastore::read_report_csv;
use p3d_core::{MetricReport, TaskKey};

use super::out_dir;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{fmt_opt, notice, write_csv};
use crate::{AnalyzeArgs, Common};

fn tasks(args: &AnalyzeArgs, cfg: &RunConfig, report: &MetricReport) -> CliResult<Vec<TaskKey>> {
    let explicit: Vec<&String> = args.tasks.iter().chain(&cfg.analyze.tasks).collect();
    if explicit.is_empty() {
        let keys: BTreeSet<String> = report
            .rows()
            .iter()
            .map(|r| TaskKey::new(&r.task_id, &r.domain_id, &r.metric, r.bin_id.as_deref()).to_string())
            .collect();
        return keys
            .iter()
            .map(|k| k.parse::<TaskKey>().map_err(CliError::from))
            .collect();
    }
    explicit
        .into_iter()
        .map(|t| {
            t.parse::<TaskKey>()
                .map_err(|e| CliError::config(format!("--task {t}: {e}")))
        })
        .collect()
}

pub fn run(args: &AnalyzeArgs, common: &Common, cfg: &RunConfig) -> CliResult {
    let out = out_dir(common, cfg)?;
    let inputs: Vec<_> = args.inputs.iter().chain(&cfg.analyze.inputs).collect();
    if inputs.is_empty() {
        return Err(CliError::config("no metric reports given (--input)"));
    }
    let mut report = MetricReport::new();
    for path in inputs {
        report.extend(read_report_csv(path)?)?;
    }
    let tasks = tasks(args, cfg, &report)?;

    let corr = task_correlation_matrix(&report, &tasks)?;
    for m in &corr.excluded {
        notice(format!("model `{m}` lacks some selected task and is excluded"));
    }
    let labels: Vec<String> = tasks.iter().map(ToString::to_string).collect();
    let mut header = vec!["task"];
    header.extend(labels.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = labels
        .iter()
        .zip(&corr.matrix)
        .map(|(l, r)| {
            std::iter::once(l.clone())
                .chain(r.iter().map(|v| fmt_opt(*v)))
                .collect()
        })
        .collect();
    write_csv(&out.join("correlation.csv"), &header, &rows)?;

    let ratings = rank_rating(&report, &tasks)?;
    let rows: Vec<Vec<String>> = ratings
        .ratings
        .iter()
        .map(|r| {
            println!("{}\t{:.4}", r.model_id, r.rating);
            vec![r.model_id.clone(), r.rating.to_string()]
        })
        .collect();
    write_csv(&out.join("ratings.csv"), &["model_id", "rating"], &rows)?;
    println!("{} models, {} tasks", corr.models.len(), tasks.len());
    Ok(())
}
