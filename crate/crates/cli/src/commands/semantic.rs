use std::collections::BTreeMap;

use p3d_core::datastore::write_report_csv;
use p3d_core::matching::{pck, transfer_keypoints, KeypointConfusion, PckOutcome, DEFAULT_PCK_ALPHA};
use p3d_core::{MetricReport, MetricRow};
use rayon::prelude::*;

use super::{blocks_or_all, out_dir, Data};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{fmt_opt, notice, write_csv};
use crate::{Common, SemanticEvalArgs};

/// Viewpoint-variation levels, then the pooled column.
const LEVELS: [&str; 4] = ["d0", "d1", "d2", "all"];

struct PairResult {
    class: String,
    level: Option<u8>,
    pck: PckOutcome,
    confusion: KeypointConfusion,
}

/// Pooled PCK and confusion per class and level.
#[derive(Default)]
struct ClassStats {
    pck: [PckOutcome; 4],
    confusion: [KeypointConfusion; 4],
}

fn levels_of(level: Option<u8>) -> Vec<usize> {
    match level {
        Some(l) if (l as usize) < 3 => vec![l as usize, 3],
        _ => vec![3],
    }
}

fn aggregate(results: &[PairResult]) -> BTreeMap<String, ClassStats> {
    let mut out: BTreeMap<String, ClassStats> = BTreeMap::new();
    for r in results {
        let s = out.entry(r.class.clone()).or_default();
        for l in levels_of(r.level) {
            s.pck[l].merge(r.pck);
            s.confusion[l].merge(&r.confusion);
        }
    }
    out
}

/// Per-level mean over classes of the class PCK, in percent.
fn class_means(stats: &BTreeMap<String, ClassStats>) -> [Option<f64>; 4] {
    std::array::from_fn(|l| {
        let v: Vec<f64> = stats.values().filter_map(|s| s.pck[l].value()).collect();
        (!v.is_empty()).then(|| 100.0 * v.iter().sum::<f64>() / v.len() as f64)
    })
}

pub fn run(args: &SemanticEvalArgs, common: &Common, cfg: &RunConfig) -> CliResult {
    let out = out_dir(common, cfg)?;
    let data = Data::load(&args.data, cfg)?;
    let alpha = args.alpha.or(cfg.semantic.alpha).unwrap_or(DEFAULT_PCK_ALPHA);
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(CliError::config(format!("alpha must be positive, got {alpha}")));
    }
    let manifest = &data.manifest;
    let pairs = &manifest.pairs;
    if pairs.is_empty() {
        return Err(CliError::data("manifest lists no image pairs"));
    }
    let features = data.feature_files(pairs.iter().flat_map(|p| [p.a.as_str(), p.b.as_str()]))?;
    let first = &features[&pairs[0].a];
    let model = data.model_id(first);
    let blocks = blocks_or_all(args.blocks.clone().or_else(|| cfg.semantic.blocks.clone()), first);

    let mut pck_rows = vec![];
    let mut report = MetricReport::new();
    let mut best: Option<(u8, f64, BTreeMap<String, ClassStats>)> = None;
    let mut skipped = 0;
    for &block in &blocks {
        let results = pairs
            .par_iter()
            .map(|p| -> CliResult<(PairResult, usize)> {
                let (ia, ib) = (manifest.require(&p.a)?, manifest.require(&p.b)?);
                let (ka, kb) = (manifest.keypoints(ia)?, manifest.keypoints(ib)?);
                let ga = features[&p.a].grid(block, ia.image_size)?;
                let gb = features[&p.b].grid(block, ib.image_size)?;
                let t = transfer_keypoints(&ga, &gb, ka)?;
                let mut confusion = KeypointConfusion::new();
                confusion.add(&t.predictions, kb);
                let result = PairResult {
                    class: p.class.clone().unwrap_or_else(|| ka.class.clone()),
                    level: p.viewpoint_variation,
                    pck: pck(&t.predictions, kb, alpha),
                    confusion,
                };
                Ok((result, t.skipped.len()))
            })
            .collect::<CliResult<Vec<_>>>()?;
        skipped += results.iter().map(|(_, s)| s).sum::<usize>();
        let results: Vec<PairResult> = results.into_iter().map(|(r, _)| r).collect();
        let stats = aggregate(&results);
        for (class, s) in &stats {
            let mut row = vec![model.clone(), block.to_string(), class.clone()];
            row.extend(s.pck.iter().map(|o| fmt_opt(o.value().map(|v| 100.0 * v))));
            pck_rows.push(row);
        }
        let means = class_means(&stats);
        let mut row = vec![model.clone(), block.to_string(), "mean".into()];
        row.extend(means.iter().map(|m| fmt_opt(*m)));
        println!("block {block}\t{}", row[3..].join("\t"));
        pck_rows.push(row);
        for (level, mean) in LEVELS.iter().zip(means) {
            if let Some(value) = mean {
                report.push(MetricRow {
                    model_id: model.clone(),
                    task_id: "semantic".into(),
                    domain_id: data.domain.clone(),
                    block_id: Some(block),
                    bin_id: Some(level.to_string()),
                    metric: "pck".into(),
                    value,
                    higher_is_better: true,
                })?;
            }
        }
        let score = means[3].unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((block, score, stats));
        }
    }
    if skipped > 0 {
        notice(format!(
            "{skipped} keypoint transfers skipped (outside the source image)"
        ));
    }

    write_csv(
        &out.join("pck.csv"),
        &["model_id", "block_id", "class", "d0", "d1", "d2", "all"],
        &pck_rows,
    )?;
    write_report_csv(&out.join("report.csv"), &report)?;
    if let Some((block, _, stats)) = best {
        println!("confusion matrices from block {block}");
        for (class, s) in &stats {
            for (level, c) in LEVELS.iter().zip(&s.confusion) {
                if c.is_empty() {
                    continue;
                }
                let (names, matrix) = c.matrix();
                let mut header = vec!["keypoint"];
                header.extend(names.iter().map(String::as_str));
                let rows: Vec<Vec<String>> = names
                    .iter()
                    .zip(&matrix)
                    .map(|(n, r)| {
                        std::iter::once(n.clone())
                            .chain(r.iter().map(|v| v.to_string()))
                            .collect()
                    })
                    .collect();
                write_csv(&out.join(format!("confusion_{class}_{level}.csv")), &header, &rows)?;
            }
        }
    }
    Ok(())
}
