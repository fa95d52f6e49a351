//! Writes the synthetic scenes to disk as manifests, feature files and
//! dense maps, ready for the command-line pipeline.

use std::path::{Path, PathBuf};

use crate::datastore::{
    feature_path, sample_pairs_per_class, write_dense_map, write_feature_file, DenseMap, FeatureFile, Manifest,
    ManifestItem, MapKind, PairEntry, PoseRecord,
};
use crate::error::Result;
use crate::geometry::CameraFrame;
use crate::matching::FeatureGrid;
use crate::synthetic::{
    mirror_pairs, probe_scene, semantic_scene, MirrorSceneConfig, ProbeSceneConfig, SemanticSceneConfig,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_DIR: &str = "features";
const MAPS_DIR: &str = "maps";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeFixtureConfig {
    pub scene: ProbeSceneConfig,
    pub train: usize,
    pub test: usize,
}

impl Default for ProbeFixtureConfig {
    fn default() -> Self {
        Self {
            scene: ProbeSceneConfig::default(),
            train: 64,
            test: 16,
        }
    }
}

fn write_features(dir: &Path, id: &str, grids: &[FeatureGrid]) -> Result<()> {
    write_feature_file(
        &feature_path(&dir.join(FEATURES_DIR), id),
        &FeatureFile::from_grids(grids)?,
    )
}

fn write_map(dir: &Path, name: String, map: DenseMap) -> Result<PathBuf> {
    let rel = Path::new(MAPS_DIR).join(name);
    write_dense_map(&dir.join(&rel), &map)?;
    Ok(rel)
}

fn finish(dir: &Path, manifest: Manifest) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(path)
}

/// Depth and normal probe data with `train` and `test` splits.
pub fn write_probe_fixture(dir: &Path, config: &ProbeFixtureConfig) -> Result<PathBuf> {
    let s = config.scene.image_size;
    let mut items = vec![];
    for (split, first, count) in [("train", 0, config.train), ("test", config.train, config.test)] {
        for img in probe_scene(&config.scene, first, count)? {
            write_features(dir, &img.id, &img.features)?;
            let mut item = ManifestItem::new(&img.id, (s, s));
            item.depth = Some(write_map(
                dir,
                format!("{}_depth.p3dm", img.id),
                DenseMap::new(MapKind::Depth, s, s, img.depth)?,
            )?);
            item.normals = Some(write_map(
                dir,
                format!("{}_normals.p3dm", img.id),
                DenseMap::new(MapKind::Normal3, s, s, img.normals)?,
            )?);
            item.intrinsics = Some(img.intrinsics);
            item.split = Some(split.into());
            items.push(item);
        }
    }
    finish(dir, Manifest::new(items, vec![]))
}

fn view_item(dir: &Path, id: &str, frame: &CameraFrame) -> Result<ManifestItem> {
    let (w, h) = (frame.depth.width, frame.depth.height);
    let mut item = ManifestItem::new(id, (w, h));
    item.depth = Some(write_map(
        dir,
        format!("{id}_depth.p3dm"),
        DenseMap::new(MapKind::Depth, h, w, frame.depth.data.clone())?,
    )?);
    if let Some(mask) = &frame.mask {
        item.mask = Some(write_map(
            dir,
            format!("{id}_mask.p3dm"),
            DenseMap::from_mask(h, w, mask)?,
        )?);
    }
    item.intrinsics = Some(frame.intrinsics);
    item.pose = Some(PoseRecord::from(&frame.pose));
    Ok(item)
}

/// Posed view pairs with per-pair relative angles.
pub fn write_correspondence_fixture(dir: &Path, config: &MirrorSceneConfig) -> Result<PathBuf> {
    let mut items = vec![];
    let mut pairs = vec![];
    for pair in mirror_pairs(config)? {
        for view in [&pair.a, &pair.b] {
            write_features(dir, &view.id, &view.features)?;
            items.push(view_item(dir, &view.id, &view.frame)?);
        }
        let mut entry = PairEntry::new(&pair.a.id, &pair.b.id);
        entry.angle_deg = Some(pair.angle_deg);
        pairs.push(entry);
    }
    finish(dir, Manifest::new(items, pairs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticFixtureConfig {
    pub scene: SemanticSceneConfig,
    pub pairs_per_class: usize,
}

impl Default for SemanticFixtureConfig {
    fn default() -> Self {
        Self {
            scene: SemanticSceneConfig::default(),
            pairs_per_class: crate::datastore::DEFAULT_PAIRS_PER_CLASS,
        }
    }
}

/// Keypoint-annotated instances; every ordered same-class pair is listed
/// (then sampled per class), with viewpoint levels cycling 0, 1, 2.
pub fn write_semantic_fixture(dir: &Path, config: &SemanticFixtureConfig) -> Result<PathBuf> {
    let images = semantic_scene(&config.scene)?;
    let mut items = vec![];
    for img in &images {
        write_features(dir, &img.id, &img.features)?;
        let mut item = ManifestItem::new(&img.id, img.image_size);
        item.keypoints = Some(img.keypoints.clone());
        items.push(item);
    }
    let mut pairs = vec![];
    for a in &images {
        for b in &images {
            if a.id != b.id && a.keypoints.class == b.keypoints.class {
                let mut p = PairEntry::new(&a.id, &b.id);
                p.class = Some(a.keypoints.class.clone());
                p.viewpoint_variation = Some((pairs.len() % 3) as u8);
                pairs.push(p);
            }
        }
    }
    let pairs = sample_pairs_per_class(&pairs, config.pairs_per_class, config.scene.seed);
    finish(dir, Manifest::new(items, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{load_features, load_manifest};

    #[test]
    fn correspondence_fixture_reloads_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = MirrorSceneConfig {
            angles: vec![20.0, 100.0],
            ..Default::default()
        };
        let m = load_manifest(&write_correspondence_fixture(dir.path(), &cfg).unwrap()).unwrap();
        let pairs = mirror_pairs(&cfg).unwrap();
        assert_eq!(m.pairs.len(), 2);
        for (entry, pair) in m.pairs.iter().zip(&pairs) {
            assert_eq!(entry.angle_deg, Some(pair.angle_deg));
            let frame = m.frame(m.require(&entry.a).unwrap()).unwrap();
            assert_eq!(frame, pair.a.frame);
            let f = load_features(&dir.path().join(FEATURES_DIR), &entry.b).unwrap();
            assert_eq!(f.grid(2, (64, 48)).unwrap(), pair.b.features[2]);
        }
    }

    #[test]
    fn semantic_fixture_respects_pair_budget() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SemanticFixtureConfig {
            pairs_per_class: 7,
            ..Default::default()
        };
        let m = load_manifest(&write_semantic_fixture(dir.path(), &cfg).unwrap()).unwrap();
        for class in ["bird", "chair"] {
            assert_eq!(m.pairs.iter().filter(|p| p.class.as_deref() == Some(class)).count(), 7);
        }
        let full =
            load_manifest(&write_semantic_fixture(dir.path(), &SemanticFixtureConfig::default()).unwrap()).unwrap();
        assert_eq!(full.pairs.len(), 2 * 6 * 5);
    }

    #[test]
    fn probe_fixture_splits() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ProbeFixtureConfig {
            train: 3,
            test: 2,
            ..Default::default()
        };
        let m = load_manifest(&write_probe_fixture(dir.path(), &cfg).unwrap()).unwrap();
        assert_eq!((m.split("train").len(), m.split("test").len()), (3, 2));
        let img = &probe_scene(&cfg.scene, 3, 1).unwrap()[0];
        assert_eq!(m.depth(m.require(&img.id).unwrap()).unwrap(), img.depth);
    }
}
