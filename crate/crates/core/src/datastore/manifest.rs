use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::binary::{read_file, write_file};
use super::densemap::{read_dense_map, DenseMap, MapKind};
use super::features::{read_feature_file, FeatureFile};
use crate::error::{Error, Result};
use crate::geometry::{relative_angle, CameraFrame, DepthMap, Intrinsics, Pose};
use crate::matching::KeypointSet;

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_PAIRS_PER_CLASS: usize = 200;

/// Camera-to-world pose as stored in a manifest: `X_w = R·X_c + t`, with
/// `rotation` given row by row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<Pose> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        Pose::new(r, Vector3::from(self.translation))
    }
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        Self {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| p.rotation[(i, j)])),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

/// One dataset image. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    /// (width, height)
    pub image_size: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normals: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<Intrinsics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<KeypointSet>,
    /// evaluation window `[x0, y0, x1, y1)`; pixels outside are ignored
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<[usize; 4]>,
}

impl ManifestItem {
    pub fn new(id: impl Into<String>, image_size: (usize, usize)) -> Self {
        Self {
            id: id.into(),
            image: None,
            image_size,
            depth: None,
            normals: None,
            mask: None,
            intrinsics: None,
            pose: None,
            split: None,
            keypoints: None,
            crop: None,
        }
    }

    fn error(&self, msg: impl Into<String>) -> Error {
        Error::Manifest {
            item: self.id.clone(),
            msg: msg.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub a: String,
    pub b: String,
    /// relative viewpoint angle in degrees
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_deg: Option<f64>,
    /// discrete viewpoint-variation level (0, 1, 2)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viewpoint_variation: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

impl PairEntry {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        Self {
            a: a.into(),
            b: b.into(),
            angle_deg: None,
            viewpoint_variation: None,
            class: None,
        }
    }
}

fn default_version() -> u32 {
    MANIFEST_VERSION
}

/// A validated dataset description: items in file order and a
/// deduplicated pair list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_version")]
    pub version: u32,
    pub items: Vec<ManifestItem>,
    #[serde(default)]
    pub pairs: Vec<PairEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
    #[serde(skip)]
    duplicate_pairs: usize,
}

impl Manifest {
    pub fn new(items: Vec<ManifestItem>, pairs: Vec<PairEntry>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            items,
            pairs,
            base_dir: PathBuf::new(),
            duplicate_pairs: 0,
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Exact duplicate pairs removed during loading.
    pub fn duplicate_pairs(&self) -> usize {
        self.duplicate_pairs
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn item(&self, id: &str) -> Option<&ManifestItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn require(&self, id: &str) -> Result<&ManifestItem> {
        self.item(id).ok_or_else(|| Error::Manifest {
            item: id.into(),
            msg: "not in manifest".into(),
        })
    }

    /// Items whose split tag equals `split`, in manifest order.
    pub fn split(&self, split: &str) -> Vec<&ManifestItem> {
        self.items
            .iter()
            .filter(|i| i.split.as_deref() == Some(split))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))?;
        text.push('\n');
        write_file(path, text.as_bytes())
    }

    /// Checks every invariant relative to `base_dir`, deduplicates pairs
    /// and fills missing pair angles from poses.
    pub fn validated(mut self, base_dir: &Path) -> Result<Self> {
        self.base_dir = base_dir.to_path_buf();
        if self.version != MANIFEST_VERSION {
            return Err(Error::Parse {
                path: base_dir.to_path_buf(),
                msg: format!("unsupported manifest version {}", self.version),
            });
        }
        let mut ids = HashSet::new();
        for item in &self.items {
            if item.id.is_empty() || item.id.contains(['/', '\\']) {
                return Err(item.error("ids must be nonempty and contain no path separators"));
            }
            if !ids.insert(item.id.as_str()) {
                return Err(item.error("duplicate item id"));
            }
            self.validate_item(item)?;
        }
        let mut seen: Vec<PairEntry> = Vec::with_capacity(self.pairs.len());
        let mut index = HashSet::new();
        let mut duplicates = 0;
        for mut pair in std::mem::take(&mut self.pairs) {
            let pair_error = |msg: String| Error::Manifest {
                item: format!("{}~{}", pair.a, pair.b),
                msg,
            };
            for id in [&pair.a, &pair.b] {
                if !ids.contains(id.as_str()) {
                    return Err(pair_error(format!("pair references unknown item `{id}`")));
                }
            }
            if pair.a == pair.b {
                return Err(pair_error("pair of an item with itself".into()));
            }
            if let Some(angle) = pair.angle_deg {
                if !(0.0..=180.0).contains(&angle) {
                    return Err(pair_error(format!("angle {angle} outside [0, 180]")));
                }
            } else if let (Some(pa), Some(pb)) = (&self.require(&pair.a)?.pose, &self.require(&pair.b)?.pose) {
                pair.angle_deg = Some(relative_angle(&pa.to_pose()?, &pb.to_pose()?));
            }
            if !index.insert((pair.a.clone(), pair.b.clone())) {
                let prev = seen.iter().find(|p| p.a == pair.a && p.b == pair.b).expect("indexed");
                if *prev != pair {
                    return Err(pair_error("listed twice with different attributes".into()));
                }
                duplicates += 1;
                continue;
            }
            seen.push(pair);
        }
        self.pairs = seen;
        self.duplicate_pairs = duplicates;
        Ok(self)
    }

    fn validate_item(&self, item: &ManifestItem) -> Result<()> {
        let (w, h) = item.image_size;
        if w == 0 || h == 0 {
            return Err(item.error("image size must be nonzero"));
        }
        if let Some(k) = &item.intrinsics {
            k.validate().map_err(|e| item.error(format!("intrinsics: {e}")))?;
            if (k.width, k.height) != item.image_size {
                return Err(item.error(format!("intrinsics are for {}x{}, image is {w}x{h}", k.width, k.height)));
            }
        }
        if let Some(p) = &item.pose {
            p.to_pose().map_err(|e| item.error(format!("pose: {e}")))?;
        }
        if let Some(kp) = &item.keypoints {
            kp.validate(item.image_size)
                .map_err(|e| item.error(format!("keypoints: {e}")))?;
        }
        if let Some([x0, y0, x1, y1]) = item.crop {
            if !(x0 < x1 && y0 < y1 && x1 <= w && y1 <= h) {
                return Err(item.error(format!("crop {:?} outside {w}x{h}", item.crop.unwrap())));
            }
        }
        for rel in [&item.image, &item.depth, &item.normals, &item.mask]
            .into_iter()
            .flatten()
        {
            let p = self.resolve(rel);
            if !p.is_file() {
                return Err(item.error(format!("missing file {}", p.display())));
            }
        }
        Ok(())
    }

    fn map(&self, item: &ManifestItem, rel: &Option<PathBuf>, kind: MapKind, what: &str) -> Result<DenseMap> {
        let rel = rel.as_ref().ok_or_else(|| item.error(format!("no {what} map")))?;
        let m = read_dense_map(&self.resolve(rel))?;
        if m.kind != kind || (m.width, m.height) != item.image_size {
            return Err(item.error(format!(
                "{what} map is {:?} {}x{}, expected {kind:?} {}x{}",
                m.kind, m.width, m.height, item.image_size.0, item.image_size.1
            )));
        }
        Ok(m)
    }

    /// Validity mask from the mask file (all valid if absent) and the crop.
    pub fn valid_mask(&self, item: &ManifestItem) -> Result<Vec<bool>> {
        let (w, h) = item.image_size;
        let mut mask = match &item.mask {
            Some(_) => self.map(item, &item.mask, MapKind::Mask, "mask")?.to_mask(),
            None => vec![true; w * h],
        };
        if let Some([x0, y0, x1, y1]) = item.crop {
            for (i, m) in mask.iter_mut().enumerate() {
                let (x, y) = (i % w, i / w);
                *m &= (x0..x1).contains(&x) && (y0..y1).contains(&y);
            }
        }
        Ok(mask)
    }

    pub fn depth(&self, item: &ManifestItem) -> Result<Vec<f32>> {
        Ok(self.map(item, &item.depth, MapKind::Depth, "depth")?.data)
    }

    pub fn normals(&self, item: &ManifestItem) -> Result<Vec<f32>> {
        Ok(self.map(item, &item.normals, MapKind::Normal3, "normal")?.data)
    }

    pub fn pose(&self, item: &ManifestItem) -> Result<Pose> {
        item.pose.as_ref().ok_or_else(|| item.error("no pose"))?.to_pose()
    }

    /// Calibrated, posed depth frame for correspondence evaluation.
    pub fn frame(&self, item: &ManifestItem) -> Result<CameraFrame> {
        let k = item.intrinsics.ok_or_else(|| item.error("no intrinsics"))?;
        let (w, h) = item.image_size;
        let depth = DepthMap::new(w, h, self.depth(item)?)?;
        let mask = item.mask.as_ref().map(|_| self.valid_mask(item)).transpose()?;
        CameraFrame::new(k, self.pose(item)?, depth, mask)
    }

    pub fn keypoints<'a>(&self, item: &'a ManifestItem) -> Result<&'a KeypointSet> {
        item.keypoints.as_ref().ok_or_else(|| item.error("no keypoints"))
    }
}

pub fn feature_path(features_dir: &Path, item_id: &str) -> PathBuf {
    features_dir.join(format!("{item_id}.p3df"))
}

pub fn load_features(features_dir: &Path, item_id: &str) -> Result<FeatureFile> {
    read_feature_file(&feature_path(features_dir, item_id))
}

/// Reads and validates a manifest; relative paths resolve against its
/// directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read_file(path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    manifest.validated(base)
}

/// Keeps at most `per_class` pairs of each class, chosen uniformly with a
/// seeded generator; survivors keep their original order.
pub fn sample_pairs_per_class(pairs: &[PairEntry], per_class: usize, seed: u64) -> Vec<PairEntry> {
    let mut by_class: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        by_class.entry(p.class.as_deref()).or_default().push(i);
    }
    let mut keep = vec![false; pairs.len()];
    for (ci, members) in by_class.values().enumerate() {
        if members.len() <= per_class {
            members.iter().for_each(|&i| keep[i] = true);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ci as u64);
        for j in index::sample(&mut rng, members.len(), per_class) {
            keep[members[j]] = true;
        }
    }
    pairs
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| p.clone())
        .collect()
}
