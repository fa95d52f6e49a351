//! Built-in verification: finite-difference gradient checks of every tape
//! op and of the probe+loss composites, plus brute-force and closed-form
//! oracles for metrics, matching and geometry.

use std::time::Instant;

use nalgebra::{Matrix3, Point2, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{metric_error_3d, project, relative_angle, unproject, CameraFrame, DepthMap, Intrinsics, Pose};
use crate::matching::{dense_nn_matches, top_k, FeatureGrid};
use crate::metrics::{depth_metrics, normal_metrics};
use crate::objectives::{
    angular_nll_loss, gradmatch_loss, probe_loss, silog_loss, DenseTarget, ProbeSample, TrainConfig,
};
use crate::probes::{init_probe, normal_from_raw_graph, ModelFamily, ProbeConfig, ProbeTask, ProbeVars};
use crate::tensorcore::{compare_with_finite_differences, value_and_grad, Graph, ScalarFn, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
const FD_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SelftestOptions {
    /// corrupts the analytic conv2d gradient (negative control)
    pub inject_fault: bool,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values in ±[0.1, 1], away from the relu kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn grad_error(f: &impl ScalarFn, point: &[Tensor<f64>], stride: Option<usize>, corrupt: bool) -> Result<f64> {
    let (_, mut analytic) = value_and_grad(f, point)?;
    if corrupt {
        for t in &mut analytic {
            t.data_mut().iter_mut().for_each(|g| *g *= 0.5);
        }
    }
    Ok(compare_with_finite_differences(f, &analytic, point, FD_EPS, stride)?.max_rel_error)
}

/// `sum(y ⊙ w)` with `w` the last input: a loss that is not linear in `y`'s
/// upstream ops and exercises every output entry.
fn weighted(g: &mut Graph<f64>, y: Var, w: Var) -> Result<Var> {
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

type OpCase = (
    &'static str,
    Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
    Vec<Tensor<f64>>,
);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let x = |rng: &mut ChaCha8Rng, c: usize| random(rng, &[1, c, 8, 8], -1.0, 1.0);
    let mut cases: Vec<OpCase> = vec![];
    for (stride, name) in [(1, "conv2d"), (2, "conv2d_stride2")] {
        let out = 8 / stride;
        cases.push((
            name,
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, 1)?;
                weighted(g, y, v[3])
            }),
            vec![
                x(rng, 3),
                random(rng, &[4, 3, 3, 3], -1.0, 1.0),
                random(rng, &[4], -1.0, 1.0),
                random(rng, &[1, 4, out, out], -1.0, 1.0),
            ],
        ));
    }
    cases.push((
        "bilinear_upsample",
        Box::new(|g, v| {
            let y = g.bilinear_upsample(v[0], 2)?;
            weighted(g, y, v[1])
        }),
        vec![x(rng, 2), random(rng, &[1, 2, 16, 16], -1.0, 1.0)],
    ));
    cases.push((
        "relu",
        Box::new(|g, v| {
            let y = g.relu(v[0]);
            weighted(g, y, v[1])
        }),
        vec![off_kink(rng, &[1, 2, 8, 8]), x(rng, 2)],
    ));
    cases.push((
        "softplus",
        Box::new(|g, v| {
            let y = g.softplus(v[0]);
            weighted(g, y, v[1])
        }),
        vec![random(rng, &[1, 2, 8, 8], -3.0, 3.0), x(rng, 2)],
    ));
    cases.push((
        "add",
        Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            let s = g.add(y, v[2])?;
            let sq = g.mul(s, s)?;
            Ok(g.sum(sq))
        }),
        vec![x(rng, 2), x(rng, 2), random(rng, &[], -1.0, 1.0)],
    ));
    cases.push((
        "mul",
        Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            let s = g.mul(y, v[2])?;
            Ok(g.sum(s))
        }),
        vec![x(rng, 2), x(rng, 2), random(rng, &[], -1.0, 1.0)],
    ));
    cases.push((
        "scale",
        Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            weighted(g, y, v[1])
        }),
        vec![x(rng, 2), x(rng, 2)],
    ));
    cases.push((
        "softmax_channels",
        Box::new(|g, v| {
            let y = g.softmax_channels(v[0])?;
            weighted(g, y, v[1])
        }),
        vec![random(rng, &[1, 5, 8, 8], -2.0, 2.0), x(rng, 5)],
    ));
    cases.push((
        "sum",
        Box::new(|g, v| {
            let s = g.sum(v[0]);
            g.mul(s, s)
        }),
        vec![x(rng, 2)],
    ));
    cases.push((
        "mean",
        Box::new(|g, v| {
            let m = g.mean(v[0]);
            g.mul(m, m)
        }),
        vec![x(rng, 2)],
    ));
    cases.push((
        "l2_normalize_channels",
        Box::new(|g, v| {
            let y = g.l2_normalize_channels(v[0], 1e-8)?;
            weighted(g, y, v[1])
        }),
        vec![x(rng, 3), x(rng, 3)],
    ));
    cases.push((
        "slice_channels",
        Box::new(|g, v| {
            let y = g.slice_channels(v[0], 1, 2)?;
            weighted(g, y, v[1])
        }),
        vec![x(rng, 4), x(rng, 2)],
    ));

    let gt: Vec<f32> = (0..64).map(|_| rng.random_range(0.5f32..5.0)).collect();
    let mask: Vec<bool> = (0..64).map(|i| i % 9 != 4).collect();
    let (gt2, mask2) = (gt.clone(), mask.clone());
    cases.push((
        "silog_loss",
        Box::new(move |g, v| {
            let l = silog_loss(g.value(v[0]).data(), &gt, &mask, 0.5)?;
            g.functional(l.value, vec![(v[0], Tensor::new(vec![1, 1, 8, 8], l.grad)?)])
        }),
        vec![random(rng, &[1, 1, 8, 8], 0.5, 5.0)],
    ));
    cases.push((
        "gradmatch_loss",
        Box::new(move |g, v| {
            let l = gradmatch_loss(g.value(v[0]).data(), &gt2, &mask2, (8, 8), 4)?;
            g.functional(l.value, vec![(v[0], Tensor::new(vec![1, 1, 8, 8], l.grad)?)])
        }),
        vec![random(rng, &[1, 1, 8, 8], 0.5, 5.0)],
    ));
    let normals: Vec<f32> = (0..64)
        .flat_map(|_| {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.2..1.0),
            )
            .normalize();
            [v.x as f32, v.y as f32, v.z as f32]
        })
        .collect();
    let nmask = vec![true; 64];
    cases.push((
        "angular_nll_loss",
        Box::new(move |g, v| {
            let (n, k) = normal_from_raw_graph(g, v[0])?;
            let l = angular_nll_loss(g.value(n).data(), g.value(k).data(), &normals, &nmask)?;
            let gn = Tensor::new(g.value(n).shape().to_vec(), l.grad_normal)?;
            let gk = Tensor::new(g.value(k).shape().to_vec(), l.grad_kappa)?;
            g.functional(l.value, vec![(n, gn), (k, gk)])
        }),
        vec![random(rng, &[1, 4, 8, 8], -1.0, 1.0)],
    ));
    cases
}

fn composite_sample(rng: &mut ChaCha8Rng, task: ProbeTask, channels: [usize; 3]) -> Result<ProbeSample> {
    let stages = channels
        .iter()
        .enumerate()
        .map(|(b, &c)| {
            let data = (0..64 * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            FeatureGrid::new("selftest", b as u8 + 1, (8, 8, c), data, (32, 32))
        })
        .collect::<Result<_>>()?;
    let target = match task {
        ProbeTask::Depth => {
            let d = (0..1024).map(|_| rng.random_range(0.5f32..9.0)).collect();
            let mask = (0..1024).map(|i| i % 11 != 5).collect();
            DenseTarget::depth(32, 32, d, Some(mask))?
        }
        ProbeTask::Normals => {
            let n = (0..1024)
                .flat_map(|_| {
                    let v = Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(0.2..1.0),
                    )
                    .normalize();
                    [v.x as f32, v.y as f32, v.z as f32]
                })
                .collect();
            DenseTarget::normals(32, 32, n, None)?
        }
    };
    Ok(ProbeSample { stages, target })
}

fn composite_error(task: ProbeTask, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = [3, 2, 4];
    let probe = init_probe::<f64>(ProbeConfig::new(task, channels, 4, ModelFamily::Encoder), seed)?;
    let sample = composite_sample(&mut rng, task, channels)?;
    let config = TrainConfig::default();
    let point: Vec<Tensor<f64>> = probe.params().into_iter().cloned().collect();
    let f = |g: &mut Graph<f64>, vars: &[Var]| probe_loss(g, &probe, &ProbeVars(vars.to_vec()), &sample, &config);
    grad_error(&f, &point, Some(7), false)
}

/// Per-op checks (64-bit, random 8×8 inputs) and the two composites.
pub fn gradient_checks(options: SelftestOptions) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let mut out = vec![];
    for (name, f, point) in op_cases(&mut rng) {
        let corrupt = options.inject_fault && name == "conv2d";
        let r = grad_error(&f, &point, None, corrupt)
            .map(|e| (e < OP_TOLERANCE, format!("max rel error {e:.2e} (< {OP_TOLERANCE:e})")));
        out.push(CheckResult::from_result(&format!("grad/{name}"), r));
    }
    for (task, name) in [
        (ProbeTask::Depth, "grad/depth_probe_composite"),
        (ProbeTask::Normals, "grad/normal_probe_composite"),
    ] {
        let r = composite_error(task, 17).map(|e| {
            (
                e < COMPOSITE_TOLERANCE,
                format!("max rel error {e:.2e} (< {COMPOSITE_TOLERANCE:e})"),
            )
        });
        out.push(CheckResult::from_result(name, r));
    }
    out
}

/// δ thresholds, normal recalls and silog on inputs with known answers.
pub fn metric_closed_forms() -> Vec<CheckResult> {
    let mut out = vec![];
    let gt: Vec<f64> = (0..64).map(|i| 0.5 + i as f64 * 0.1).collect();
    let mask = vec![true; 64];
    let pred: Vec<f64> = gt.iter().map(|d| 1.3 * d).collect();
    let r = depth_metrics(&pred, &gt, &mask).map(|m| {
        (
            m.delta1 == 0.0 && m.delta2 == 100.0 && m.delta3 == 100.0,
            format!("delta = ({}, {}, {})", m.delta1, m.delta2, m.delta3),
        )
    });
    out.push(CheckResult::from_result("metric/depth_scaled_1.3", r));

    let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(0.3, -0.5, 0.8)), 20f64.to_radians());
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    // vectors perpendicular to the axis move by exactly 20°
    let axis = rot.axis().expect("nonzero angle").into_inner();
    let mut gt_n = vec![];
    let mut pred_n = vec![];
    for _ in 0..64 {
        let r = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let v = (r - axis * axis.dot(&r)).normalize();
        let w = rot * v;
        gt_n.extend([v.x, v.y, v.z]);
        pred_n.extend([w.x, w.y, w.z]);
    }
    let r = normal_metrics(&pred_n, &gt_n, &mask).map(|m| {
        (
            m.recall_11_25 == 0.0 && m.recall_22_5 == 100.0 && m.recall_30 == 100.0 && (m.rmse - 20.0).abs() < 1e-6,
            format!(
                "recalls ({}, {}, {}), rmse {:.9}",
                m.recall_11_25, m.recall_22_5, m.recall_30, m.rmse
            ),
        )
    });
    out.push(CheckResult::from_result("metric/normals_rotated_20deg", r));

    let gt32: Vec<f32> = gt.iter().map(|&d| d as f32).collect();
    let pred2: Vec<f64> = gt32.iter().map(|&d| 2.0 * d as f64).collect();
    let want = 0.5 * std::f64::consts::LN_2.powi(2);
    let r = silog_loss(&pred2, &gt32, &mask, 0.5).map(|l| {
        let err = (l.value - want).abs();
        (
            err <= 1e-9,
            format!("silog {:.12} vs {want:.12} (|Δ| {err:.1e})", l.value),
        )
    });
    out.push(CheckResult::from_result("metric/silog_doubled", r));
    out
}

/// Nearest and second-nearest by sorting every candidate distance; the
/// cosine distance is written out independently.
fn reference_matches(a: &FeatureGrid, b: &FeatureGrid) -> Vec<(usize, usize, usize, f64)> {
    let dist = |p: &[f32], q: &[f32]| {
        let dot: f64 = p.iter().zip(q).map(|(x, y)| *x as f64 * *y as f64).sum();
        let np = p.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nq = q.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        (1.0 - dot / (np * nq)).clamp(0.0, 2.0)
    };
    let mut rows = vec![];
    for i in 0..a.cells() {
        let mut d: Vec<(f64, usize)> = (0..b.cells())
            .map(|j| (dist(a.vector_at(i), b.vector_at(j)), j))
            .collect();
        d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let r = if d[1].0 > 0.0 {
            (1.0 - d[0].0 / d[1].0).clamp(0.0, 1.0)
        } else {
            0.0
        };
        rows.push((i, d[0].1, d[1].1, r));
    }
    rows.sort_by(|x, y| y.3.total_cmp(&x.3).then(x.0.cmp(&y.0)));
    rows
}

/// `dense_nn_matches` + `top_k` against exhaustive search on `pairs`
/// random 8×8×4 grid pairs.
pub fn matching_oracle(pairs: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    for p in 0..pairs {
        let mut grid = |b| {
            let data = (0..256).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            FeatureGrid::new("oracle", b, (8, 8, 4), data, (64, 64))
        };
        let (a, b) = match (grid(0), grid(1)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return CheckResult::new("oracle/matching", false, format!("error: {e}")),
        };
        let k = if p % 2 == 0 { 64 } else { 10 };
        let got = match dense_nn_matches(&a, &b, None, None).and_then(|m| top_k(m, k)) {
            Ok(m) => m,
            Err(e) => return CheckResult::new("oracle/matching", false, format!("error: {e}")),
        };
        let want = reference_matches(&a, &b);
        if got.len() != k {
            mismatches += 1;
        }
        for (m, (src, q0, q1, r)) in got.iter().zip(&want) {
            if m.src.index(8) != *src || m.dst_first.index(8) != *q0 || m.dst_second.index(8) != *q1 {
                mismatches += 1;
            }
            worst = worst.max((m.ratio - r).abs());
        }
    }
    CheckResult::new(
        "oracle/matching",
        mismatches == 0 && worst <= 1e-12,
        format!("{pairs} pairs, {mismatches} mismatched matches, max |Δr| {worst:.1e}"),
    )
}

fn rot(axis: Vector3<f64>, deg: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Unit::new_normalize(axis), deg.to_radians()).matrix()
}

fn gauge_frames(rng: &mut ChaCha8Rng, k: Intrinsics, ta: Pose, tb: Pose) -> Result<(CameraFrame, CameraFrame)> {
    let depth = |rng: &mut ChaCha8Rng| {
        DepthMap::new(
            k.width,
            k.height,
            (0..k.width * k.height).map(|_| rng.random_range(1.0f32..6.0)).collect(),
        )
    };
    Ok((
        CameraFrame::new(k, ta, depth(rng)?, None)?,
        CameraFrame::new(k, tb, depth(rng)?, None)?,
    ))
}

/// Round trips, rigid-transform invariance and a composed rotation angle.
pub fn geometry_gauge() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(120);
    let mut out = vec![];
    let k = Intrinsics::new(525.0, 520.0, 319.5, 239.5, 640, 480).expect("valid intrinsics");
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let d = rng.random_range(0.1..50.0);
        match unproject(p, d, &k).ok().and_then(|x| project(&x, &k)) {
            Some(q) => worst = worst.max((q - p).norm()),
            None => worst = f64::INFINITY,
        }
    }
    out.push(CheckResult::new(
        "geometry/project_unproject",
        worst < 1e-6,
        format!("max round-trip error {worst:.1e} px"),
    ));

    let r = (|| -> Result<(bool, String)> {
        let pa = Pose::new(rot(Vector3::new(0.1, 1.0, 0.2), 25.0), Vector3::new(0.3, -0.2, 1.0))?;
        let pb = Pose::new(rot(Vector3::new(-0.4, 0.6, 1.0), -40.0), Vector3::new(-1.0, 0.5, 0.2))?;
        let g = Pose::new(rot(Vector3::new(1.0, -2.0, 0.5), 73.0), Vector3::new(4.0, -7.0, 2.5))?;
        let small = Intrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24)?;
        let (fa, fb) = gauge_frames(&mut rng, small, pa, pb)?;
        let moved = |f: &CameraFrame| CameraFrame::new(f.intrinsics, g.compose(&f.pose), f.depth.clone(), None);
        let (ga, gb) = (moved(&fa)?, moved(&fb)?);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let p = Point2::new(rng.random_range(0.0..31.0), rng.random_range(0.0..23.0));
            let q = Point2::new(rng.random_range(0.0..31.0), rng.random_range(0.0..23.0));
            worst = worst.max((metric_error_3d(p, q, &fa, &fb)? - metric_error_3d(p, q, &ga, &gb)?).abs());
        }
        Ok((worst < 1e-6, format!("max change {worst:.1e} m")))
    })();
    out.push(CheckResult::from_result("geometry/metric_error_rigid_invariance", r));

    let r = (|| -> Result<(bool, String)> {
        let a = Pose::new(rot(Vector3::new(0.2, 0.9, -0.3), 37.0), Vector3::new(1.0, 2.0, 3.0))?;
        let delta = Pose::new(rot(Vector3::new(-0.5, 0.1, 0.7), 120.0), Vector3::new(0.5, 0.0, -1.0))?;
        let b = a.compose(&delta);
        let angle = relative_angle(&a, &b);
        Ok(((angle - 120.0).abs() <= 1e-9, format!("relative angle {angle:.12}°")))
    })();
    out.push(CheckResult::from_result("geometry/composed_rotation_120deg", r));
    out
}

/// Every check; the suite passes when all entries pass.
pub fn run_selftest(options: SelftestOptions) -> Vec<CheckResult> {
    let start = Instant::now();
    let mut out = gradient_checks(options);
    out.extend(metric_closed_forms());
    out.push(matching_oracle(50));
    out.extend(geometry_gauge());
    let elapsed = start.elapsed().as_secs_f64();
    out.push(CheckResult::new(
        "runtime",
        elapsed < 60.0,
        format!("{elapsed:.1} s (< 60 s)"),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let results = run_selftest(SelftestOptions::default());
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
        assert!(results.iter().any(|r| r.name == "grad/angular_nll_loss"));
    }

    #[test]
    fn injected_fault_is_caught_and_named() {
        let results = gradient_checks(SelftestOptions { inject_fault: true });
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert_eq!(failed, ["grad/conv2d"]);
    }
}
