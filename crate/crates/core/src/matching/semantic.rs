use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use super::correspondence::cosine_distance;
use super::grid::FeatureGrid;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    #[serde(default = "yes")]
    pub visible: bool,
}

fn yes() -> bool {
    true
}

/// Axis-aligned box `[x0, y0, x1, y1]` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox(pub [f64; 4]);

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.0[2] - self.0[0]
    }

    pub fn height(&self) -> f64 {
        self.0[3] - self.0[1]
    }

    pub fn max_side(&self) -> f64 {
        self.width().max(self.height())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub class: String,
    pub bbox: BoundingBox,
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn validate(&self, image_size: (usize, usize)) -> Result<()> {
        if !(self.bbox.width() > 0.0 && self.bbox.height() > 0.0) {
            return Err(Error::invalid(format!("empty bounding box {:?}", self.bbox.0)));
        }
        for p in self.points.iter().filter(|p| p.visible) {
            if !inside(p.x, p.y, image_size) {
                return Err(Error::invalid(format!(
                    "visible keypoint `{}` at ({}, {}) outside {}x{} image",
                    p.name, p.x, p.y, image_size.0, image_size.1
                )));
            }
        }
        Ok(())
    }

    pub fn visible(&self, name: &str) -> Option<&Keypoint> {
        self.points.iter().find(|p| p.visible && p.name == name)
    }
}

fn inside(x: f64, y: f64, (w, h): (usize, usize)) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w as f64 - 1.0) && y <= (h as f64 - 1.0)
}

/// Bilinear sample of the grid at a continuous cell position, clamped to
/// the grid extent.
pub fn sample_bilinear(grid: &FeatureGrid, gx: f64, gy: f64) -> Vec<f32> {
    let gx = gx.clamp(0.0, (grid.width() - 1) as f64);
    let gy = gy.clamp(0.0, (grid.height() - 1) as f64);
    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(grid.width() - 1), (y0 + 1).min(grid.height() - 1));
    let (tx, ty) = (gx - x0 as f64, gy - y0 as f64);
    let w = [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty];
    let taps = [
        grid.vector(x0, y0),
        grid.vector(x1, y0),
        grid.vector(x0, y1),
        grid.vector(x1, y1),
    ];
    (0..grid.channels())
        .map(|k| taps.iter().zip(w).map(|(t, w)| t[k] as f64 * w).sum::<f64>() as f32)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transfer {
    /// predicted pixel in image B for each transferred keypoint
    pub predictions: Vec<(String, Point2<f64>)>,
    /// names of keypoints skipped because they lie outside image A
    pub skipped: Vec<String>,
}

/// Transfers each visible keypoint of A to B by nearest-neighbor search
/// over B's cells; the prediction is the chosen cell's center pixel.
pub fn transfer_keypoints(a: &FeatureGrid, b: &FeatureGrid, keypoints_a: &KeypointSet) -> Result<Transfer> {
    if a.channels() != b.channels() {
        return Err(Error::shape("transfer_keypoints", &[a.channels()], &[b.channels()]));
    }
    let mut out = Transfer {
        predictions: vec![],
        skipped: vec![],
    };
    for kp in keypoints_a.points.iter().filter(|p| p.visible) {
        if !inside(kp.x, kp.y, a.image_size()) {
            out.skipped.push(kp.name.clone());
            continue;
        }
        let (gx, gy) = a.grid_position(kp.x, kp.y);
        let query = sample_bilinear(a, gx, gy);
        let mut best = (f64::INFINITY, 0usize);
        for cell in 0..b.cells() {
            let d = cosine_distance(&query, b.vector_at(cell));
            if d < best.0 {
                best = (d, cell);
            }
        }
        let (x, y) = (best.1 % b.width(), best.1 / b.width());
        let (u, v) = b.cell_center(x as f64, y as f64);
        out.predictions.push((kp.name.clone(), Point2::new(u, v)));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PckOutcome {
    pub correct: usize,
    pub scored: usize,
}

impl PckOutcome {
    /// Fraction correct, `None` when nothing was scoreable.
    pub fn value(&self) -> Option<f64> {
        (self.scored > 0).then(|| self.correct as f64 / self.scored as f64)
    }

    pub fn merge(&mut self, other: PckOutcome) {
        self.correct += other.correct;
        self.scored += other.scored;
    }
}

pub const DEFAULT_PCK_ALPHA: f64 = 0.1;

/// Keypoints with a visible ground-truth match in B are scored; a
/// prediction is correct iff it lies within `alpha · max(bbox w, h)`
/// (inclusive).
pub fn pck(predictions: &[(String, Point2<f64>)], gt_b: &KeypointSet, alpha: f64) -> PckOutcome {
    let tol = alpha * gt_b.bbox.max_side();
    let mut out = PckOutcome { correct: 0, scored: 0 };
    for (name, pred) in predictions {
        if let Some(gt) = gt_b.visible(name) {
            out.scored += 1;
            if (pred - Point2::new(gt.x, gt.y)).norm() <= tol {
                out.correct += 1;
            }
        }
    }
    out
}

/// Row-normalized keypoint confusion: row = queried keypoint, column = the
/// ground-truth keypoint in B nearest to the prediction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeypointConfusion {
    counts: BTreeMap<(String, String), f64>,
    names: BTreeSet<String>,
}

impl KeypointConfusion {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one image pair. Only predictions with a visible true match in
    /// B contribute; ties in nearest ground truth go to the earlier
    /// keypoint in B's list.
    pub fn add(&mut self, predictions: &[(String, Point2<f64>)], gt_b: &KeypointSet) {
        let visible: Vec<&Keypoint> = gt_b.points.iter().filter(|p| p.visible).collect();
        for p in &visible {
            self.names.insert(p.name.clone());
        }
        for (name, pred) in predictions {
            if gt_b.visible(name).is_none() {
                continue;
            }
            let mut best: Option<(&Keypoint, f64)> = None;
            for &gt in &visible {
                let d = (pred - Point2::new(gt.x, gt.y)).norm();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((gt, d));
                }
            }
            if let Some((gt, _)) = best {
                *self.counts.entry((name.clone(), gt.name.clone())).or_default() += 1.0;
            }
        }
    }

    pub fn merge(&mut self, other: &KeypointConfusion) {
        for (k, v) in &other.counts {
            *self.counts.entry(k.clone()).or_default() += v;
        }
        self.names.extend(other.names.iter().cloned());
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Sorted keypoint names and the row-normalized matrix over them. Rows
    /// without any scored instance are all zero.
    pub fn matrix(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let names: Vec<String> = self.names.iter().cloned().collect();
        let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut m = vec![vec![0.0; names.len()]; names.len()];
        for ((row, col), v) in &self.counts {
            m[index[row.as_str()]][index[col.as_str()]] += v;
        }
        for row in &mut m {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        (names, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, scale: usize) -> FeatureGrid {
        let data = (0..h * w * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureGrid::new("m", 0, (h, w, c), data, (w * scale, h * scale)).unwrap()
    }

    fn kp(name: &str, x: f64, y: f64) -> Keypoint {
        Keypoint {
            name: name.into(),
            x,
            y,
            visible: true,
        }
    }

    fn set(points: Vec<Keypoint>) -> KeypointSet {
        KeypointSet {
            class: "cat".into(),
            bbox: BoundingBox([0.0, 0.0, 20.0, 10.0]),
            points,
        }
    }

    #[test]
    fn identity_transfer_maps_to_own_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = grid(&mut rng, 6, 6, 8, 4);
        let mut points = vec![];
        for (i, (x, y)) in [(0, 0), (3, 2), (5, 5), (1, 4)].into_iter().enumerate() {
            let (u, v) = g.cell_center(x as f64, y as f64);
            points.push(kp(&format!("k{i}"), u, v));
        }
        let kps = set(points.clone());
        let t = transfer_keypoints(&g, &g, &kps).unwrap();
        for ((_, pred), gt) in t.predictions.iter().zip(&points) {
            assert!((pred.x - gt.x).abs() < 1e-12 && (pred.y - gt.y).abs() < 1e-12);
        }
        let score = pck(&t.predictions, &kps, 0.1);
        assert_eq!(score.value(), Some(1.0));
        let mut conf = KeypointConfusion::new();
        conf.add(&t.predictions, &kps);
        let (names, m) = conf.matrix();
        assert_eq!(names.len(), 4);
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn transfer_agrees_with_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = grid(&mut rng, 5, 7, 6, 8);
        let b = grid(&mut rng, 6, 4, 6, 8);
        let points: Vec<Keypoint> = (0..10)
            .map(|i| {
                kp(
                    &format!("k{i}"),
                    rng.random_range(0.0..55.0),
                    rng.random_range(0.0..39.0),
                )
            })
            .collect();
        let t = transfer_keypoints(&a, &b, &set(points.clone())).unwrap();
        for ((_, pred), p) in t.predictions.iter().zip(&points) {
            let (gx, gy) = a.grid_position(p.x, p.y);
            let q = sample_bilinear(&a, gx, gy);
            let mut best = (f64::INFINITY, 0, 0);
            for y in 0..b.height() {
                for x in 0..b.width() {
                    let v = b.vector(x, y);
                    let dot: f64 = q.iter().zip(v).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                    let n: f64 = q.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt()
                        * v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                    let d = 1.0 - dot / n;
                    if d < best.0 {
                        best = (d, x, y);
                    }
                }
            }
            let (u, v) = b.cell_center(best.1 as f64, best.2 as f64);
            assert_eq!((pred.x, pred.y), (u, v));
        }
    }

    #[test]
    fn bilinear_blend_between_cells() {
        let data = vec![0.0, 10.0, 2.0, 20.0, 4.0, 30.0, 6.0, 40.0];
        let g = FeatureGrid::new("m", 0, (2, 2, 2), data, (8, 8)).unwrap();
        let v = sample_bilinear(&g, 0.25, 0.5);
        // channel 0: top 0..2 at 0.25 -> 0.5; bottom 4..6 -> 4.5; mid -> 2.5
        assert!((v[0] - 2.5).abs() < 1e-6);
        // channel 1: top 10..20 -> 12.5; bottom 30..40 -> 32.5; mid -> 22.5
        assert!((v[1] - 22.5).abs() < 1e-6);
    }

    #[test]
    fn out_of_image_keypoints_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid(&mut rng, 4, 4, 4, 4);
        let kps = set(vec![kp("in", 3.0, 3.0), kp("out", 40.0, 3.0)]);
        let t = transfer_keypoints(&g, &g, &kps).unwrap();
        assert_eq!(t.skipped, vec!["out".to_string()]);
        assert_eq!(t.predictions.len(), 1);
        assert!(kps.validate((16, 16)).is_err());
    }

    #[test]
    fn pck_rules() {
        let gt = set(vec![kp("a", 10.0, 5.0), kp("b", 0.0, 0.0)]);
        // tolerance = 0.1 * 20 = 2
        let preds = vec![
            ("a".to_string(), Point2::new(12.0, 5.0)),
            ("b".to_string(), Point2::new(2.0, 0.1)),
            ("zzz".to_string(), Point2::new(0.0, 0.0)),
        ];
        let r = pck(&preds, &gt, 0.1);
        assert_eq!(r, PckOutcome { correct: 1, scored: 2 });

        let far = set(vec![kp("a", 19.0, 9.0)]);
        let r = pck(&[("a".to_string(), Point2::new(0.0, 0.0))], &far, 0.1);
        assert_eq!(r.value(), Some(0.0));
        assert_eq!(pck(&[], &far, 0.1).value(), None);
    }

    #[test]
    fn confusion_mass_on_single_column() {
        let gt = set(vec![kp("a", 0.0, 0.0), kp("b", 10.0, 0.0), kp("x", 5.0, 8.0)]);
        let preds: Vec<(String, Point2<f64>)> = ["a", "b", "x"]
            .iter()
            .map(|n| (n.to_string(), Point2::new(5.0, 7.5)))
            .collect();
        let mut c = KeypointConfusion::new();
        c.add(&preds, &gt);
        let (names, m) = c.matrix();
        let xi = names.iter().position(|n| n == "x").unwrap();
        for row in &m {
            assert_eq!(row[xi], 1.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn confusion_matches_nearest_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let names = ["a", "b", "c", "d", "e"];
        let mut conf = KeypointConfusion::new();
        let mut oracle: BTreeMap<(String, String), f64> = BTreeMap::new();
        for _ in 0..20 {
            let gt = set(names
                .iter()
                .map(|n| kp(n, rng.random_range(0.0..20.0), rng.random_range(0.0..10.0)))
                .collect());
            let preds: Vec<(String, Point2<f64>)> = names
                .iter()
                .map(|n| {
                    (
                        n.to_string(),
                        Point2::new(rng.random_range(0.0..20.0), rng.random_range(0.0..10.0)),
                    )
                })
                .collect();
            conf.add(&preds, &gt);
            for (n, p) in &preds {
                let nearest = gt
                    .points
                    .iter()
                    .min_by(|a, b| {
                        let da = (a.x - p.x).hypot(a.y - p.y);
                        let db = (b.x - p.x).hypot(b.y - p.y);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                *oracle.entry((n.clone(), nearest.name.clone())).or_default() += 1.0;
            }
        }
        let (labels, m) = conf.matrix();
        for (i, r) in labels.iter().enumerate() {
            let total: f64 = oracle.iter().filter(|((a, _), _)| a == r).map(|(_, v)| v).sum();
            for (j, c) in labels.iter().enumerate() {
                let want = oracle.get(&(r.clone(), c.clone())).copied().unwrap_or(0.0) / total;
                assert!((m[i][j] - want).abs() < 1e-12);
            }
            assert!((m[i].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
