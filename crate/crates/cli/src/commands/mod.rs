pub mod analyze;
pub mod correspondence;
pub mod fixture;
pub mod probe;
pub mod selftest;
pub mod semantic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use p3d_core::datastore::{load_features, load_manifest};
use p3d_core::{FeatureFile, Manifest};

use crate::config::{required, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::create_dir;
use crate::{Common, DataArgs};

pub fn out_dir(common: &Common, cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = required(common.out.clone().or_else(|| cfg.out.clone()), "--out")?;
    create_dir(&out)?;
    Ok(out)
}

pub fn seed(common: &Common, cfg: &RunConfig) -> u64 {
    common.seed.or(cfg.seed).unwrap_or(0)
}

/// A loaded manifest plus the labels written to reports.
pub struct Data {
    pub manifest: Manifest,
    pub features: PathBuf,
    model: Option<String>,
    pub domain: String,
}

impl Data {
    pub fn load(args: &DataArgs, cfg: &RunConfig) -> CliResult<Self> {
        let path = required(args.manifest.clone().or_else(|| cfg.manifest.clone()), "--manifest")?;
        let manifest = load_manifest(&path)?;
        let features = args
            .features
            .clone()
            .or_else(|| cfg.features.clone())
            .unwrap_or_else(|| manifest.base_dir().join("features"));
        if !features.is_dir() {
            return Err(CliError::data(format!(
                "feature directory not found: {}",
                features.display()
            )));
        }
        let domain = args
            .domain
            .clone()
            .or_else(|| cfg.domain.clone())
            .unwrap_or_else(|| dir_name(&path));
        Ok(Self {
            manifest,
            features,
            model: args.model.clone().or_else(|| cfg.model.clone()),
            domain,
        })
    }

    pub fn features_of(&self, id: &str) -> CliResult<FeatureFile> {
        Ok(load_features(&self.features, id)?)
    }

    /// Report model id: the flag, else the id stored in `first`'s features.
    pub fn model_id(&self, first: &FeatureFile) -> String {
        self.model.clone().unwrap_or_else(|| first.model_id.clone())
    }

    /// Feature files of every item referenced by `ids`, loaded once each.
    pub fn feature_files<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a str>,
    ) -> CliResult<BTreeMap<String, FeatureFile>> {
        let mut out = BTreeMap::new();
        for id in ids {
            if !out.contains_key(id) {
                out.insert(id.to_string(), self.features_of(id)?);
            }
        }
        Ok(out)
    }
}

fn dir_name(manifest: &Path) -> String {
    manifest
        .canonicalize()
        .ok()
        .and_then(|p| {
            p.parent()
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
        })
        .unwrap_or_else(|| "default".into())
}

/// Explicit blocks, else every block of `first` in file order.
pub fn blocks_or_all(explicit: Option<Vec<u8>>, first: &FeatureFile) -> Vec<u8> {
    explicit.unwrap_or_else(|| first.blocks.iter().map(|b| b.block_id).collect())
}
