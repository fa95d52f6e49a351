use std::borrow::Cow;
use std::path::{Path, PathBuf};

use super::manifest::{feature_path, load_features, Manifest, ManifestItem};
use crate::error::{Error, Result};
use crate::metrics::normalize_object_depth;
use crate::objectives::{DenseTarget, ProbeDataset, ProbeSample};
use crate::probes::ProbeTask;

/// Probe samples read from disk on demand: features from
/// `<features_dir>/<id>.p3df`, targets from the manifest's dense maps.
#[derive(Clone, Debug)]
pub struct ManifestDataset<'a> {
    manifest: &'a Manifest,
    features_dir: PathBuf,
    items: Vec<&'a ManifestItem>,
    task: ProbeTask,
    blocks: Vec<u8>,
    normalize_depth: bool,
}

impl<'a> ManifestDataset<'a> {
    /// Fails up front if any selected item lacks a feature file or the
    /// target map for `task`.
    pub fn new(
        manifest: &'a Manifest,
        features_dir: &Path,
        items: Vec<&'a ManifestItem>,
        task: ProbeTask,
        blocks: &[u8],
    ) -> Result<Self> {
        if !features_dir.is_dir() {
            return Err(Error::io(
                features_dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "feature directory not found"),
            ));
        }
        for item in &items {
            let p = feature_path(features_dir, &item.id);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "feature file not found"),
                ));
            }
            let has_target = match task {
                ProbeTask::Depth => item.depth.is_some(),
                ProbeTask::Normals => item.normals.is_some(),
            };
            if !has_target {
                return Err(Error::Manifest {
                    item: item.id.clone(),
                    msg: format!("no {} target", task.name()),
                });
            }
        }
        Ok(Self {
            manifest,
            features_dir: features_dir.to_path_buf(),
            items,
            task,
            blocks: blocks.to_vec(),
            normalize_depth: false,
        })
    }

    /// Rescales each depth target to [0, 1] over its valid pixels.
    pub fn with_normalized_depth(mut self, on: bool) -> Self {
        self.normalize_depth = on;
        self
    }

    pub fn item(&self, index: usize) -> &ManifestItem {
        self.items[index]
    }

    pub fn load(&self, item: &ManifestItem) -> Result<ProbeSample> {
        let file = load_features(&self.features_dir, &item.id)?;
        let stages = self
            .blocks
            .iter()
            .map(|&b| file.grid(b, item.image_size))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Manifest {
                item: item.id.clone(),
                msg: e.to_string(),
            })?;
        let (w, h) = item.image_size;
        let mask = self.manifest.valid_mask(item)?;
        let target = match self.task {
            ProbeTask::Depth => {
                let mut depth = self.manifest.depth(item)?;
                let valid: Vec<bool> = mask.iter().zip(&depth).map(|(m, d)| *m && *d > 0.0).collect();
                if self.normalize_depth {
                    depth = normalize_object_depth(&depth, &valid)?;
                }
                DenseTarget::depth(h, w, depth, Some(valid))?
            }
            ProbeTask::Normals => DenseTarget::normals(h, w, self.manifest.normals(item)?, Some(mask))?,
        };
        Ok(ProbeSample { stages, target })
    }
}

impl ProbeDataset for ManifestDataset<'_> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn get(&self, index: usize) -> Result<Cow<'_, ProbeSample>> {
        let item = self
            .items
            .get(index)
            .ok_or_else(|| Error::invalid(format!("sample {index} out of range")))?;
        self.load(item).map(Cow::Owned)
    }
}
