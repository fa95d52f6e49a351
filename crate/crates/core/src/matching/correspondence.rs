use nalgebra::Point2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::FeatureGrid;
use crate::error::{Error, Result};
use crate::geometry::{self, CameraFrame, Reprojection};

/// Feature-grid cell, `x` = column, `y` = row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn from_index(index: usize, width: usize) -> Self {
        Self {
            x: index % width,
            y: index / width,
        }
    }

    pub fn index(self, width: usize) -> usize {
        self.y * width + self.x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub src: Cell,
    /// nearest neighbor q₀ in B
    pub dst_first: Cell,
    /// second nearest neighbor q₁ in B
    pub dst_second: Cell,
    pub dist_first: f64,
    pub dist_second: f64,
    /// `1 - D(p, q₀) / D(p, q₁)`
    pub ratio: f64,
}

/// `1 - a·b / (|a| |b|)`, clamped into `[0, 2]`. A zero-norm vector is at
/// distance 1 from everything.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0)
}

/// Lowe ratio score from first and second nearest distances. Zero when
/// both distances are zero (the match is not unique).
pub fn ratio_score(first: f64, second: f64) -> f64 {
    if second > 0.0 {
        (1.0 - first / second).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

fn check_mask(mask: Option<&[bool]>, grid: &FeatureGrid, which: &str) -> Result<()> {
    match mask {
        Some(m) if m.len() != grid.cells() => Err(Error::invalid(format!(
            "mask {which} has {} entries for a {}x{} grid",
            m.len(),
            grid.height(),
            grid.width()
        ))),
        _ => Ok(()),
    }
}

/// For every unmasked cell of `a`, the nearest and second-nearest unmasked
/// cells of `b` under cosine distance. Ties resolve to the earlier cell in
/// row-major order. Output is in row-major order of the source cells.
pub fn dense_nn_matches(
    a: &FeatureGrid,
    b: &FeatureGrid,
    mask_a: Option<&[bool]>,
    mask_b: Option<&[bool]>,
) -> Result<Vec<Match>> {
    if a.channels() != b.channels() {
        return Err(Error::shape("dense_nn_matches", &[a.channels()], &[b.channels()]));
    }
    check_mask(mask_a, a, "A")?;
    check_mask(mask_b, b, "B")?;
    let candidates: Vec<usize> = (0..b.cells()).filter(|&i| mask_b.is_none_or(|m| m[i])).collect();
    if candidates.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 candidate cells in B, have {}",
            candidates.len()
        )));
    }
    let sources: Vec<usize> = (0..a.cells()).filter(|&i| mask_a.is_none_or(|m| m[i])).collect();
    Ok(sources
        .par_iter()
        .map(|&src| {
            let va = a.vector_at(src);
            let (mut best, mut second) = ((f64::INFINITY, 0usize), (f64::INFINITY, 0usize));
            for &c in &candidates {
                let d = cosine_distance(va, b.vector_at(c));
                if d < best.0 {
                    second = best;
                    best = (d, c);
                } else if d < second.0 {
                    second = (d, c);
                }
            }
            Match {
                src: Cell::from_index(src, a.width()),
                dst_first: Cell::from_index(best.1, b.width()),
                dst_second: Cell::from_index(second.1, b.width()),
                dist_first: best.0,
                dist_second: second.0,
                ratio: ratio_score(best.0, second.0),
            }
        })
        .collect())
}

pub const DEFAULT_TOP_K: usize = 1000;

/// Matches sorted by ratio descending (ties: row-major source), truncated
/// to `k`.
pub fn top_k(mut matches: Vec<Match>, k: usize) -> Result<Vec<Match>> {
    if k == 0 {
        return Err(Error::invalid("top_k needs k >= 1"));
    }
    matches.sort_by(|m, n| {
        n.ratio
            .total_cmp(&m.ratio)
            .then((m.src.y, m.src.x).cmp(&(n.src.y, n.src.x)))
    });
    matches.truncate(k);
    Ok(matches)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    /// 2D reprojection error in pixels (scenes)
    Proj2d,
    /// 3D metric error in meters (objects)
    Metric3d,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MatchOutcome {
    Error(f64),
    BehindCamera,
    /// source (or, in 3D mode, destination) depth invalid
    Dropped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallOutcome {
    /// `None` when no match was evaluable
    pub recall: Option<f64>,
    pub correct: usize,
    pub evaluable: usize,
    pub per_match: Vec<MatchOutcome>,
}

/// Fraction of evaluable matches whose error is strictly below `threshold`.
/// Grid cells map to the image pixel at their center.
pub fn geometric_recall(
    matches: &[Match],
    grid_a: &FeatureGrid,
    grid_b: &FeatureGrid,
    frame_a: &CameraFrame,
    frame_b: &CameraFrame,
    mode: RecallMode,
    threshold: f64,
) -> Result<RecallOutcome> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!(
            "recall threshold must be positive, got {threshold}"
        )));
    }
    let mut out = RecallOutcome {
        recall: None,
        correct: 0,
        evaluable: 0,
        per_match: Vec::with_capacity(matches.len()),
    };
    for m in matches {
        let (pu, pv) = grid_a.cell_center(m.src.x as f64, m.src.y as f64);
        let (qu, qv) = grid_b.cell_center(m.dst_first.x as f64, m.dst_first.y as f64);
        let (p, q) = (Point2::new(pu, pv), Point2::new(qu, qv));
        let outcome = match mode {
            RecallMode::Proj2d => match geometry::reprojection_error_2d(p, q, frame_a, frame_b) {
                Ok(Reprojection::Pixels(e)) => MatchOutcome::Error(e),
                Ok(Reprojection::BehindCamera) => MatchOutcome::BehindCamera,
                Err(Error::InvalidDepth { .. }) => MatchOutcome::Dropped,
                Err(e) => return Err(e),
            },
            RecallMode::Metric3d => match geometry::metric_error_3d(p, q, frame_a, frame_b) {
                Ok(e) => MatchOutcome::Error(e),
                Err(Error::InvalidDepth { .. }) => MatchOutcome::Dropped,
                Err(e) => return Err(e),
            },
        };
        match outcome {
            MatchOutcome::Error(e) => {
                out.evaluable += 1;
                if e < threshold {
                    out.correct += 1;
                }
            }
            MatchOutcome::BehindCamera => out.evaluable += 1,
            MatchOutcome::Dropped => {}
        }
        out.per_match.push(outcome);
    }
    if out.evaluable > 0 {
        out.recall = Some(out.correct as f64 / out.evaluable as f64);
    }
    Ok(out)
}

/// Recall threshold, resolved per image pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum RecallThreshold {
    /// absolute pixels or meters
    Absolute(f64),
    /// pixels measured at 640-pixel image width
    Pixels640(f64),
    /// fraction of the object's 3D bounding-box diagonal (frame A)
    BboxFraction(f64),
}

impl RecallThreshold {
    pub const DEFAULT_PROJ2D: RecallThreshold = RecallThreshold::Pixels640(10.0);
    pub const DEFAULT_METRIC3D: RecallThreshold = RecallThreshold::BboxFraction(0.05);

    pub fn resolve(&self, frame_a: &CameraFrame) -> Result<f64> {
        match *self {
            RecallThreshold::Absolute(t) => Ok(t),
            RecallThreshold::Pixels640(px) => Ok(px * frame_a.intrinsics.width as f64 / 640.0),
            RecallThreshold::BboxFraction(f) => {
                let (mut lo, mut hi) = (
                    nalgebra::Vector3::repeat(f64::INFINITY),
                    nalgebra::Vector3::repeat(f64::NEG_INFINITY),
                );
                let w = frame_a.depth.width;
                for (i, &d) in frame_a.depth.data.iter().enumerate() {
                    let on_object = frame_a.mask.as_ref().is_none_or(|m| m[i]);
                    if d > 0.0 && on_object {
                        let px = Point2::new((i % w) as f64, (i / w) as f64);
                        let p = frame_a.lift(px)?;
                        lo = lo.inf(&p);
                        hi = hi.sup(&p);
                    }
                }
                if !lo.x.is_finite() {
                    return Err(Error::Degenerate("no valid object depth to size the threshold".into()));
                }
                Ok(f * (hi - lo).norm())
            }
        }
    }
}

pub const SCANNET_BIN_EDGES: [f64; 5] = [0.0, 15.0, 30.0, 60.0, 180.0];
pub const NAVI_BIN_EDGES: [f64; 5] = [0.0, 30.0, 60.0, 90.0, 120.0];

/// Viewpoint bins `[e_i, e_{i+1})`; the last bin also includes its upper
/// edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewpointBins {
    edges: Vec<f64>,
}

impl ViewpointBins {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::invalid("viewpoint bins need at least 2 edges"));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::invalid(format!(
                "bin edges must be strictly increasing: {edges:?}"
            )));
        }
        Ok(Self { edges })
    }

    pub fn scannet() -> Self {
        Self::new(SCANNET_BIN_EDGES.to_vec()).expect("valid edges")
    }

    pub fn navi() -> Self {
        Self::new(NAVI_BIN_EDGES.to_vec()).expect("valid edges")
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bin_of(&self, angle: f64) -> Option<usize> {
        let last = self.len() - 1;
        (0..self.len()).find(|&i| {
            let (lo, hi) = (self.edges[i], self.edges[i + 1]);
            angle >= lo && (angle < hi || (i == last && angle == hi))
        })
    }

    /// Label like `15-30`.
    pub fn label(&self, bin: usize) -> String {
        format!("{}-{}", self.edges[bin], self.edges[bin + 1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewpointBinning {
    pub bins: ViewpointBins,
    /// bin of each pair, `None` if outside every bin
    pub assignments: Vec<Option<usize>>,
    pub excluded: usize,
}

impl ViewpointBinning {
    pub fn members(&self, bin: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, b)| **b == Some(bin))
            .map(|(i, _)| i)
    }
}

/// Assigns each pair's relative viewpoint angle (degrees) to a bin.
pub fn bin_pairs(angles: &[f64], bins: &ViewpointBins) -> ViewpointBinning {
    let assignments: Vec<Option<usize>> = angles.iter().map(|&a| bins.bin_of(a)).collect();
    let excluded = assignments.iter().filter(|a| a.is_none()).count();
    ViewpointBinning {
        bins: bins.clone(),
        assignments,
        excluded,
    }
}

/// Feature-grid mask from a pixel mask, sampled at cell centers.
pub fn grid_mask(grid: &FeatureGrid, frame: &CameraFrame) -> Vec<bool> {
    (0..grid.cells())
        .map(|i| {
            let c = Cell::from_index(i, grid.width());
            let (u, v) = grid.cell_center(c.x as f64, c.y as f64);
            frame.in_mask(Point2::new(u, v))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceOptions {
    pub mode: RecallMode,
    pub threshold: RecallThreshold,
    pub top_k: usize,
}

impl CorrespondenceOptions {
    pub fn proj2d() -> Self {
        Self {
            mode: RecallMode::Proj2d,
            threshold: RecallThreshold::DEFAULT_PROJ2D,
            top_k: DEFAULT_TOP_K,
        }
    }

    pub fn metric3d() -> Self {
        Self {
            mode: RecallMode::Metric3d,
            threshold: RecallThreshold::DEFAULT_METRIC3D,
            top_k: DEFAULT_TOP_K,
        }
    }
}

/// Matches restricted to each frame's mask, keeps the `top_k` most
/// distinctive, and scores them.
pub fn pair_recall(
    grid_a: &FeatureGrid,
    grid_b: &FeatureGrid,
    frame_a: &CameraFrame,
    frame_b: &CameraFrame,
    options: &CorrespondenceOptions,
) -> Result<RecallOutcome> {
    let mask_a = grid_mask(grid_a, frame_a);
    let mask_b = grid_mask(grid_b, frame_b);
    let matches = dense_nn_matches(grid_a, grid_b, Some(&mask_a), Some(&mask_b))?;
    let kept = top_k(matches, options.top_k)?;
    let threshold = options.threshold.resolve(frame_a)?;
    geometric_recall(&kept, grid_a, grid_b, frame_a, frame_b, options.mode, threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRecall {
    pub bin: String,
    /// mean per-pair recall, `None` if no pair in the bin was evaluable
    pub recall: Option<f64>,
    /// pairs contributing to `recall`
    pub n_pairs: usize,
    /// pairs in the bin without any evaluable match
    pub n_excluded: usize,
}

/// Averages per-pair recalls within each viewpoint bin.
pub fn bin_recalls(per_pair: &[Option<f64>], binning: &ViewpointBinning) -> Result<Vec<BinRecall>> {
    if per_pair.len() != binning.assignments.len() {
        return Err(Error::shape(
            "bin_recalls",
            &[per_pair.len()],
            &[binning.assignments.len()],
        ));
    }
    Ok((0..binning.bins.len())
        .map(|bin| {
            let (mut sum, mut n, mut excluded) = (0.0, 0, 0);
            for i in binning.members(bin) {
                match per_pair[i] {
                    Some(r) => {
                        sum += r;
                        n += 1;
                    }
                    None => excluded += 1,
                }
            }
            BinRecall {
                bin: binning.bins.label(bin),
                recall: (n > 0).then(|| sum / n as f64),
                n_pairs: n,
                n_excluded: excluded,
            }
        })
        .collect())
}
