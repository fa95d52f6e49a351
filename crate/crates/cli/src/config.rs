//! Run configuration: an optional TOML file merged under command-line
//! flags. Relative paths in the file resolve against the file's directory.

use std::path::{Path, PathBuf};

use p3d_core::matching::{RecallMode, RecallThreshold, ViewpointBins};
use p3d_core::{DepthRange, LossConfig, ModelFamily, OptimConfig, ProbeTask};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub model: Option<String>,
    pub domain: Option<String>,
    pub probe: ProbeSection,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub correspondence: CorrespondenceSection,
    pub semantic: SemanticSection,
    pub analyze: AnalyzeSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub task: Option<ProbeTask>,
    pub family: Option<ModelFamily>,
    pub hidden_width: Option<usize>,
    pub depth_range: Option<DepthRange>,
    pub normalize_depth: Option<bool>,
    pub train_split: Option<String>,
    pub eval_split: Option<String>,
    pub checkpoint: Option<PathBuf>,
}

/// `"scannet"`, `"navi"` or explicit edges in degrees.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum BinSpec {
    Named(String),
    Edges(Vec<f64>),
}

impl BinSpec {
    pub fn parse_flag(s: &str) -> Result<Self, String> {
        if s.contains(',') {
            s.split(',')
                .map(|e| e.trim().parse::<f64>().map_err(|e| format!("bad bin edge: {e}")))
                .collect::<Result<_, _>>()
                .map(BinSpec::Edges)
        } else {
            Ok(BinSpec::Named(s.to_string()))
        }
    }

    pub fn resolve(&self) -> CliResult<ViewpointBins> {
        match self {
            BinSpec::Named(n) if n == "scannet" => Ok(ViewpointBins::scannet()),
            BinSpec::Named(n) if n == "navi" => Ok(ViewpointBins::navi()),
            BinSpec::Named(n) => Err(CliError::config(format!(
                "unknown bin set `{n}` (scannet, navi or edges)"
            ))),
            BinSpec::Edges(e) => ViewpointBins::new(e.clone()).map_err(|e| CliError::config(e.to_string())),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrespondenceSection {
    pub mode: Option<RecallMode>,
    pub threshold: Option<RecallThreshold>,
    pub top_k: Option<usize>,
    pub bins: Option<BinSpec>,
    pub blocks: Option<Vec<u8>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticSection {
    pub alpha: Option<f64>,
    pub blocks: Option<Vec<u8>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub inputs: Vec<PathBuf>,
    pub tasks: Vec<String>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut().filter(|x| x.is_relative()) {
                *x = base.join(&*x);
            }
        };
        rebase(&mut cfg.manifest);
        rebase(&mut cfg.features);
        rebase(&mut cfg.out);
        rebase(&mut cfg.probe.checkpoint);
        for p in &mut cfg.analyze.inputs {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

pub fn required<T>(value: Option<T>, what: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::config(format!("missing {what} (flag or config file)")))
}
