use std::path::Path;

use p3d_core::datastore::{checkpoint_probe, load_probe, write_report_csv, write_report_json, ManifestDataset};
use p3d_core::objectives::{evaluate_probe, train_probe};
use p3d_core::probes::used_blocks;
use p3d_core::{
    DepthRange, ManifestItem, MetricReport, MetricRow, ModelFamily, ProbeConfig, ProbeMetrics, ProbeTask, TrainConfig,
};

use super::{out_dir, seed, Data};
use crate::config::{required, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{notice, write_jsonl};
use crate::{Common, ProbeEvalArgs, ProbeTrainArgs};

const CHECKPOINT_FILE: &str = "probe.p3dc";

fn split<'a>(data: &'a Data, name: &str) -> CliResult<Vec<&'a ManifestItem>> {
    let items = data.manifest.split(name);
    if items.is_empty() {
        return Err(CliError::data(format!("manifest has no items in split `{name}`")));
    }
    Ok(items)
}

fn eval_items(data: &Data, explicit: Option<String>) -> CliResult<Vec<&ManifestItem>> {
    match explicit {
        Some(name) => split(data, &name),
        None => {
            let test = data.manifest.split("test");
            if test.is_empty() {
                notice("no `test` split, evaluating on `train`");
                split(data, "train")
            } else {
                Ok(test)
            }
        }
    }
}

fn depth_range(cfg: &RunConfig, normalize: bool) -> DepthRange {
    cfg.probe.depth_range.unwrap_or(if normalize {
        DepthRange::NORMALIZED
    } else {
        DepthRange::METRIC_INDOOR
    })
}

fn metric_rows(model: &str, domain: &str, task: ProbeTask, m: &ProbeMetrics) -> Vec<MetricRow> {
    let values: Vec<(&str, f64, bool)> = match m {
        ProbeMetrics::Depth(d) => vec![
            ("delta1", d.delta1, true),
            ("delta2", d.delta2, true),
            ("delta3", d.delta3, true),
            ("rmse", d.rmse, false),
        ],
        ProbeMetrics::Normals(n) => vec![
            ("recall_11_25", n.recall_11_25, true),
            ("recall_22_5", n.recall_22_5, true),
            ("recall_30", n.recall_30, true),
            ("rmse", n.rmse, false),
        ],
    };
    values
        .into_iter()
        .map(|(metric, value, higher_is_better)| MetricRow {
            model_id: model.to_string(),
            task_id: task.name().to_string(),
            domain_id: domain.to_string(),
            block_id: None,
            bin_id: None,
            metric: metric.to_string(),
            value,
            higher_is_better,
        })
        .collect()
}

fn write_metrics(out: &Path, rows: Vec<MetricRow>) -> CliResult {
    for r in &rows {
        println!("{}\t{}", r.metric, r.value);
    }
    let report = MetricReport::from_rows(rows)?;
    write_report_csv(&out.join("metrics.csv"), &report)?;
    write_report_json(&out.join("metrics.json"), &report)?;
    Ok(())
}

pub fn train(args: &ProbeTrainArgs, common: &Common, cfg: &RunConfig) -> CliResult {
    let out = out_dir(common, cfg)?;
    let data = Data::load(&args.data, cfg)?;
    let task = args.task.map(Into::into).or(cfg.probe.task).unwrap_or(ProbeTask::Depth);
    let family = args
        .family
        .map(Into::into)
        .or(cfg.probe.family)
        .unwrap_or(ModelFamily::Encoder);
    let hidden = args
        .hidden
        .or(cfg.probe.hidden_width)
        .unwrap_or(ProbeConfig::DEFAULT_HIDDEN);
    let normalize = args.normalize_depth || cfg.probe.normalize_depth.unwrap_or(false);
    let train_split = args.train_split.clone().or_else(|| cfg.probe.train_split.clone());
    let eval_split = args.eval_split.clone().or_else(|| cfg.probe.eval_split.clone());

    let train_items = split(&data, train_split.as_deref().unwrap_or("train"))?;
    let blocks = used_blocks(family);
    let first = data.features_of(&train_items[0].id)?;
    let mut channels = [0; 3];
    for (c, b) in channels.iter_mut().zip(blocks) {
        *c = first
            .block(b)
            .ok_or_else(|| CliError::data(format!("features of `{}` lack block {b}", train_items[0].id)))?
            .channels;
    }
    let model = data.model_id(&first);

    let mut optim = cfg.optim;
    if let Some(e) = args.epochs {
        optim.total_epochs = e;
    }
    let range = depth_range(cfg, normalize);
    let train_cfg = TrainConfig {
        loss: cfg.loss,
        optim,
        depth_range: range,
        seed: seed(common, cfg),
    };
    let dataset = ManifestDataset::new(&data.manifest, &data.features, train_items, task, &blocks)?
        .with_normalized_depth(normalize);
    let outcome = train_probe(&dataset, ProbeConfig::new(task, channels, hidden, family), &train_cfg)?;
    checkpoint_probe(&out.join(CHECKPOINT_FILE), &outcome.probe)?;
    write_jsonl(&out.join("train_log.jsonl"), &outcome.log.epochs)?;
    for e in &outcome.log.epochs {
        eprintln!("epoch {} loss {:.6}", e.epoch, e.mean_loss);
    }

    let items = eval_items(&data, eval_split)?;
    let eval =
        ManifestDataset::new(&data.manifest, &data.features, items, task, &blocks)?.with_normalized_depth(normalize);
    let metrics = evaluate_probe(&outcome.probe, &eval, range)?;
    write_metrics(&out, metric_rows(&model, &data.domain, task, &metrics))
}

pub fn eval(args: &ProbeEvalArgs, common: &Common, cfg: &RunConfig) -> CliResult {
    let out = out_dir(common, cfg)?;
    let data = Data::load(&args.data, cfg)?;
    let path = required(
        args.checkpoint.clone().or_else(|| cfg.probe.checkpoint.clone()),
        "--checkpoint",
    )?;
    let probe = load_probe(&path)?;
    let pc = probe.config().clone();
    let normalize = args.normalize_depth || cfg.probe.normalize_depth.unwrap_or(false);
    let blocks = pc.used_stages.clone();
    let items = eval_items(&data, args.eval_split.clone().or_else(|| cfg.probe.eval_split.clone()))?;
    let model = data.model_id(&data.features_of(&items[0].id)?);
    let task = pc.task();
    let eval =
        ManifestDataset::new(&data.manifest, &data.features, items, task, &blocks)?.with_normalized_depth(normalize);
    let metrics = evaluate_probe(&probe, &eval, depth_range(cfg, normalize))?;
    write_metrics(&out, metric_rows(&model, &data.domain, task, &metrics))
}
