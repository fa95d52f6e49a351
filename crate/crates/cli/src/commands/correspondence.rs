use std::collections::BTreeMap;

use p3d_core::datastore::write_report_csv;
use p3d_core::matching::{
    bin_pairs, bin_recalls, pair_recall, CorrespondenceOptions, RecallMode, RecallOutcome, RecallThreshold,
    ViewpointBins, DEFAULT_TOP_K,
};
use p3d_core::{CameraFrame, MetricReport, MetricRow};
use rayon::prelude::*;

use super::{blocks_or_all, out_dir, Data};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{fmt_opt, notice, write_csv};
use crate::{Common, CorrEvalArgs, ThresholdKind};

fn threshold(args: &CorrEvalArgs, cfg: &RunConfig, mode: RecallMode) -> CliResult<RecallThreshold> {
    let default_kind = match mode {
        RecallMode::Proj2d => ThresholdKind::Pixels640,
        RecallMode::Metric3d => ThresholdKind::BboxFraction,
    };
    Ok(match (args.threshold, args.threshold_kind) {
        (Some(v), kind) => match kind.unwrap_or(default_kind) {
            ThresholdKind::Absolute => RecallThreshold::Absolute(v),
            ThresholdKind::Pixels640 => RecallThreshold::Pixels640(v),
            ThresholdKind::BboxFraction => RecallThreshold::BboxFraction(v),
        },
        (None, Some(_)) => return Err(CliError::config("--threshold-kind needs --threshold")),
        (None, None) => cfg.correspondence.threshold.unwrap_or(match mode {
            RecallMode::Proj2d => RecallThreshold::DEFAULT_PROJ2D,
            RecallMode::Metric3d => RecallThreshold::DEFAULT_METRIC3D,
        }),
    })
}

pub fn run(args: &CorrEvalArgs, common: &Common, cfg: &RunConfig) -> CliResult {
    let out = out_dir(common, cfg)?;
    let data = Data::load(&args.data, cfg)?;
    let section = &cfg.correspondence;
    let mode = args.mode.map(Into::into).or(section.mode).unwrap_or(RecallMode::Proj2d);
    let options = CorrespondenceOptions {
        mode,
        threshold: threshold(args, cfg, mode)?,
        top_k: args.top_k.or(section.top_k).unwrap_or(DEFAULT_TOP_K),
    };
    let bins = match args.bins.as_ref().or(section.bins.as_ref()) {
        Some(spec) => spec.resolve()?,
        None => match mode {
            RecallMode::Proj2d => ViewpointBins::scannet(),
            RecallMode::Metric3d => ViewpointBins::navi(),
        },
    };

    let pairs = &data.manifest.pairs;
    if pairs.is_empty() {
        return Err(CliError::data("manifest lists no image pairs"));
    }
    let angles = pairs
        .iter()
        .map(|p| {
            p.angle_deg
                .ok_or_else(|| CliError::data(format!("pair {} / {} has no viewpoint angle and no poses", p.a, p.b)))
        })
        .collect::<CliResult<Vec<f64>>>()?;
    let binning = bin_pairs(&angles, &bins);
    if binning.excluded > 0 {
        notice(format!("{} pairs fall outside every viewpoint bin", binning.excluded));
    }

    let ids = pairs.iter().flat_map(|p| [p.a.as_str(), p.b.as_str()]);
    let features = data.feature_files(ids.clone())?;
    let mut frames: BTreeMap<&str, CameraFrame> = BTreeMap::new();
    for id in ids {
        if !frames.contains_key(id) {
            frames.insert(id, data.manifest.frame(data.manifest.require(id)?)?);
        }
    }
    let first = &features[&pairs[0].a];
    let model = data.model_id(first);
    let blocks = blocks_or_all(args.blocks.clone().or_else(|| section.blocks.clone()), first);

    let mut recall_rows = vec![];
    let mut pair_rows = vec![];
    let mut report = MetricReport::new();
    for &block in &blocks {
        let outcomes = pairs
            .par_iter()
            .map(|p| -> CliResult<RecallOutcome> {
                let (ia, ib) = (data.manifest.require(&p.a)?, data.manifest.require(&p.b)?);
                let ga = features[&p.a].grid(block, ia.image_size)?;
                let gb = features[&p.b].grid(block, ib.image_size)?;
                Ok(pair_recall(
                    &ga,
                    &gb,
                    &frames[p.a.as_str()],
                    &frames[p.b.as_str()],
                    &options,
                )?)
            })
            .collect::<CliResult<Vec<_>>>()?;
        for (i, (p, o)) in pairs.iter().zip(&outcomes).enumerate() {
            pair_rows.push(vec![
                model.clone(),
                block.to_string(),
                p.a.clone(),
                p.b.clone(),
                angles[i].to_string(),
                binning.assignments[i].map(|b| bins.label(b)).unwrap_or_default(),
                fmt_opt(o.recall),
                o.correct.to_string(),
                o.evaluable.to_string(),
            ]);
        }
        let per_pair: Vec<Option<f64>> = outcomes.iter().map(|o| o.recall).collect();
        for b in bin_recalls(&per_pair, &binning)? {
            println!("block {block}\t{}\t{}", b.bin, fmt_opt(b.recall));
            recall_rows.push(vec![
                model.clone(),
                block.to_string(),
                b.bin.clone(),
                fmt_opt(b.recall),
                b.n_pairs.to_string(),
                b.n_excluded.to_string(),
            ]);
            if let Some(r) = b.recall {
                report.push(MetricRow {
                    model_id: model.clone(),
                    task_id: "correspondence".into(),
                    domain_id: data.domain.clone(),
                    block_id: Some(block),
                    bin_id: Some(b.bin),
                    metric: "recall".into(),
                    value: r,
                    higher_is_better: true,
                })?;
            }
        }
    }
    write_csv(
        &out.join("corr_recall.csv"),
        &["model_id", "block_id", "bin", "recall", "n_pairs", "n_excluded"],
        &recall_rows,
    )?;
    write_csv(
        &out.join("corr_pairs.csv"),
        &[
            "model_id",
            "block_id",
            "a",
            "b",
            "angle_deg",
            "bin",
            "recall",
            "correct",
            "evaluable",
        ],
        &pair_rows,
    )?;
    write_report_csv(&out.join("report.csv"), &report)?;
    Ok(())
}
