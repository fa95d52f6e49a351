use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{angular_nll_loss, gradmatch_loss, silog_loss, LossConfig};
use super::optim::{adamw_step, lr_at, OptimConfig, OptimState};
use crate::error::{Error, Result};
use crate::matching::FeatureGrid;
use crate::metrics::{
    depth_metrics, mean_depth_metrics, mean_normal_metrics, normal_metrics, DepthMetrics, NormalMetrics,
};
use crate::probes::{
    depth_from_bins_graph, init_probe, normal_from_raw_graph, DenseProbe, DepthRange, ProbeConfig, ProbeTask, ProbeVars,
};
use crate::tensorcore::{Graph, Real, Tensor, Var};

/// Ground truth for one image: interleaved H×W×C values plus a validity
/// mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTarget {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub mask: Vec<bool>,
}

impl DenseTarget {
    /// Depth target; pixels with depth <= 0 are invalid regardless of `mask`.
    pub fn depth(height: usize, width: usize, data: Vec<f32>, mask: Option<Vec<bool>>) -> Result<Self> {
        let mask = Self::check(height, width, 1, &data, mask)?;
        let mask = mask.iter().zip(&data).map(|(m, d)| *m && *d > 0.0).collect();
        Ok(Self {
            height,
            width,
            channels: 1,
            data,
            mask,
        })
    }

    /// Normal target; pixels whose normal is not unit length (within 1e-3)
    /// are invalid.
    pub fn normals(height: usize, width: usize, data: Vec<f32>, mask: Option<Vec<bool>>) -> Result<Self> {
        let mask = Self::check(height, width, 3, &data, mask)?;
        let mask = mask
            .iter()
            .zip(data.chunks_exact(3))
            .map(|(m, n)| {
                let len = (n[0] as f64).hypot(n[1] as f64).hypot(n[2] as f64);
                *m && (len - 1.0).abs() < 1e-3
            })
            .collect();
        Ok(Self {
            height,
            width,
            channels: 3,
            data,
            mask,
        })
    }

    fn check(height: usize, width: usize, channels: usize, data: &[f32], mask: Option<Vec<bool>>) -> Result<Vec<bool>> {
        if data.len() != height * width * channels {
            return Err(Error::shape("dense target", &[data.len()], &[height, width, channels]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense target values".into()));
        }
        let mask = mask.unwrap_or_else(|| vec![true; height * width]);
        if mask.len() != height * width {
            return Err(Error::shape("dense target mask", &[mask.len()], &[height, width]));
        }
        Ok(mask)
    }
}

#[derive(Clone, Debug)]
pub struct ProbeSample {
    /// feature grids in the probe's `used_stages` order
    pub stages: Vec<FeatureGrid>,
    pub target: DenseTarget,
}

pub trait ProbeDataset: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, index: usize) -> Result<Cow<'_, ProbeSample>>;
}

impl ProbeDataset for [ProbeSample] {
    fn len(&self) -> usize {
        <[ProbeSample]>::len(self)
    }

    fn get(&self, index: usize) -> Result<Cow<'_, ProbeSample>> {
        self.get(index)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::invalid(format!("sample {index} out of range")))
    }
}

impl ProbeDataset for Vec<ProbeSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<Cow<'_, ProbeSample>> {
        ProbeDataset::get(self.as_slice(), index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub depth_range: DepthRange,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            depth_range: DepthRange::METRIC_INDOOR,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Head outputs at target resolution.
#[derive(Clone, Copy, Debug)]
pub enum HeadVars {
    Depth(Var),
    Normals { normal: Var, kappa: Var },
}

/// Runs the probe and its task head, upsampling to `target_hw`. Depth is
/// decoded from bins before upsampling; normals are upsampled raw and then
/// normalized.
pub fn head_graph<T: Real>(
    g: &mut Graph<T>,
    probe: &DenseProbe<T>,
    vars: &ProbeVars,
    stages: &[FeatureGrid],
    range: DepthRange,
    target_hw: (usize, usize),
) -> Result<HeadVars> {
    let refs: Vec<&FeatureGrid> = stages.iter().collect();
    let out_hw = probe.output_size(&refs)?;
    let factor = target_hw.0 / out_hw.0.max(1);
    if factor == 0 || out_hw.0 * factor != target_hw.0 || out_hw.1 * factor != target_hw.1 {
        return Err(Error::shape(
            "probe target size",
            &[out_hw.0, out_hw.1],
            &[target_hw.0, target_hw.1],
        ));
    }
    let inputs: Vec<Var> = stages.iter().map(|s| g.constant(s.to_tensor())).collect();
    let raw = probe.forward(g, vars, &inputs, out_hw)?;
    match probe.config().task() {
        ProbeTask::Depth => {
            let (_, depth) = depth_from_bins_graph(g, raw, range)?;
            Ok(HeadVars::Depth(g.bilinear_upsample(depth, factor)?))
        }
        ProbeTask::Normals => {
            let up = g.bilinear_upsample(raw, factor)?;
            let (normal, kappa) = normal_from_raw_graph(g, up)?;
            Ok(HeadVars::Normals { normal, kappa })
        }
    }
}

/// Records the training loss for one sample and returns its node.
pub fn probe_loss<T: Real>(
    g: &mut Graph<T>,
    probe: &DenseProbe<T>,
    vars: &ProbeVars,
    sample: &ProbeSample,
    config: &TrainConfig,
) -> Result<Var> {
    let t = &sample.target;
    match head_graph(g, probe, vars, &sample.stages, config.depth_range, (t.height, t.width))? {
        HeadVars::Depth(depth) => {
            expect_channels(t, 1)?;
            let pred = g.value(depth).data().to_vec();
            let si = silog_loss(&pred, &t.data, &t.mask, config.loss.silog_lambda)?;
            let gm = gradmatch_loss(&pred, &t.data, &t.mask, (t.height, t.width), config.loss.grad_scales)?;
            let w = config.loss.grad_weight;
            let value = si.value + w * gm.value;
            let grad = si
                .grad
                .iter()
                .zip(&gm.grad)
                .map(|(a, b)| *a + T::cast(w) * *b)
                .collect();
            let grad = Tensor::new(g.value(depth).shape().to_vec(), grad)?;
            g.functional(T::cast(value), vec![(depth, grad)])
        }
        HeadVars::Normals { normal, kappa } => {
            expect_channels(t, 3)?;
            let l = angular_nll_loss(g.value(normal).data(), g.value(kappa).data(), &t.data, &t.mask)?;
            let gn = Tensor::new(g.value(normal).shape().to_vec(), l.grad_normal)?;
            let gk = Tensor::new(g.value(kappa).shape().to_vec(), l.grad_kappa)?;
            g.functional(T::cast(l.value), vec![(normal, gn), (kappa, gk)])
        }
    }
}

fn expect_channels(t: &DenseTarget, c: usize) -> Result<()> {
    if t.channels != c {
        return Err(Error::shape("target channels", &[t.channels], &[c]));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub probe: DenseProbe<f32>,
    pub log: TrainLog,
}

/// Trains a freshly initialized probe for `optim.total_epochs` epochs, one
/// image per step, visiting samples in a seed-determined order.
pub fn train_probe<D: ProbeDataset + ?Sized>(
    dataset: &D,
    probe_config: ProbeConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.loss.validate()?;
    config.optim.validate()?;
    let n = dataset.len();
    if n == 0 {
        return Err(Error::invalid("empty training dataset"));
    }
    let mut probe = init_probe::<f32>(probe_config, config.seed)?;
    let mut state = OptimState::new(config.optim, &probe.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..config.optim.total_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let sample = dataset.get(i)?;
            let mut g = Graph::new();
            let vars = probe.bind(&mut g, true);
            let loss = probe_loss(&mut g, &probe, &vars, &sample, config)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {value} at epoch {epoch}, step {step} (sample {i})"
                )));
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = vars.0.iter().map(|&v| grads.take(v)).collect();
            let lr = lr_at(step, n, &config.optim);
            adamw_step(&mut probe.params_mut(), &grads, &mut state, lr)?;
            log.steps.push(StepRecord {
                epoch,
                step,
                lr,
                loss: value,
            });
            total += value;
            step += 1;
        }
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: total / n as f64,
        });
    }
    if probe.params().iter().any(|p| !p.all_finite()) {
        return Err(Error::NonFinite("probe parameters after training".into()));
    }
    Ok(TrainOutcome { probe, log })
}

/// Dense prediction for one sample at target resolution.
#[derive(Clone, Debug, PartialEq)]
pub enum DensePrediction {
    /// H×W depth
    Depth(Vec<f32>),
    /// interleaved H×W×3 unit normals and H×W concentrations
    Normals { normal: Vec<f32>, kappa: Vec<f32> },
}

pub fn predict_dense(
    probe: &DenseProbe<f32>,
    stages: &[FeatureGrid],
    range: DepthRange,
    target_hw: (usize, usize),
) -> Result<DensePrediction> {
    let mut g = Graph::new();
    let vars = probe.bind(&mut g, false);
    Ok(match head_graph(&mut g, probe, &vars, stages, range, target_hw)? {
        HeadVars::Depth(d) => DensePrediction::Depth(g.value(d).data().to_vec()),
        HeadVars::Normals { normal, kappa } => {
            let planar = g.value(normal).data();
            let hw = target_hw.0 * target_hw.1;
            let normal = (0..hw)
                .flat_map(|i| [planar[i], planar[hw + i], planar[2 * hw + i]])
                .collect();
            DensePrediction::Normals {
                normal,
                kappa: g.value(kappa).data().to_vec(),
            }
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum ProbeMetrics {
    Depth(DepthMetrics),
    Normals(NormalMetrics),
}

/// Mean of per-image metrics over the dataset.
pub fn evaluate_probe<D: ProbeDataset + ?Sized>(
    probe: &DenseProbe<f32>,
    dataset: &D,
    range: DepthRange,
) -> Result<ProbeMetrics> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty evaluation dataset"));
    }
    let mut depth = vec![];
    let mut normals = vec![];
    for i in 0..dataset.len() {
        let s = dataset.get(i)?;
        let t = &s.target;
        match predict_dense(probe, &s.stages, range, (t.height, t.width))? {
            DensePrediction::Depth(p) => {
                expect_channels(t, 1)?;
                depth.push(depth_metrics(&p, &t.data, &t.mask)?)
            }
            DensePrediction::Normals { normal, .. } => {
                expect_channels(t, 3)?;
                normals.push(normal_metrics(&normal, &t.data, &t.mask)?)
            }
        }
    }
    Ok(match probe.config().task() {
        ProbeTask::Depth => ProbeMetrics::Depth(mean_depth_metrics(&depth).expect("nonempty")),
        ProbeTask::Normals => ProbeMetrics::Normals(mean_normal_metrics(&normals).expect("nonempty")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::ModelFamily;
    use crate::tensorcore::grad_check_strided;
    use rand::Rng;

    fn random_sample(rng: &mut ChaCha8Rng, task: ProbeTask, channels: [usize; 3]) -> ProbeSample {
        let stages = channels
            .iter()
            .enumerate()
            .map(|(b, &c)| {
                let data = (0..4 * 4 * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                FeatureGrid::new("m", b as u8 + 1, (4, 4, c), data, (16, 16)).unwrap()
            })
            .collect();
        let target = match task {
            ProbeTask::Depth => {
                let d = (0..256).map(|_| rng.random_range(0.5f32..9.0)).collect();
                let mask = (0..256).map(|i| i % 7 != 3).collect();
                DenseTarget::depth(16, 16, d, Some(mask)).unwrap()
            }
            ProbeTask::Normals => {
                let n = (0..256)
                    .flat_map(|_| {
                        let v = [
                            rng.random_range(-1.0f64..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(0.2..1.0),
                        ];
                        let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                        v.map(|x| (x / l) as f32)
                    })
                    .collect();
                DenseTarget::normals(16, 16, n, None).unwrap()
            }
        };
        ProbeSample { stages, target }
    }

    fn composite_check(task: ProbeTask) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ProbeConfig::new(task, [3, 2, 4], 4, ModelFamily::Encoder);
        let probe = init_probe::<f64>(cfg, 5).unwrap();
        let sample = random_sample(&mut rng, task, [3, 2, 4]);
        let config = TrainConfig::default();
        let point: Vec<Tensor<f64>> = probe.params().into_iter().cloned().collect();
        let f = |g: &mut Graph<f64>, vars: &[Var]| probe_loss(g, &probe, &ProbeVars(vars.to_vec()), &sample, &config);
        grad_check_strided(f, &point, 1e-6, 7).unwrap().max_rel_error
    }

    #[test]
    fn depth_composite_gradients() {
        let e = composite_check(ProbeTask::Depth);
        assert!(e < 1e-3, "{e}");
    }

    #[test]
    fn normal_composite_gradients() {
        let e = composite_check(ProbeTask::Normals);
        assert!(e < 1e-3, "{e}");
    }

    #[test]
    fn target_masks() {
        let t = DenseTarget::depth(1, 3, vec![1.0, 0.0, 2.0], Some(vec![true, true, false])).unwrap();
        assert_eq!(t.mask, vec![true, false, false]);
        let n = DenseTarget::normals(1, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0], None).unwrap();
        assert_eq!(n.mask, vec![true, false]);
        assert!(DenseTarget::depth(2, 2, vec![1.0; 3], None).is_err());
        assert!(DenseTarget::depth(1, 1, vec![f32::NAN], None).is_err());
    }

    #[test]
    fn lr_trace_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<ProbeSample> = (0..4)
            .map(|_| random_sample(&mut rng, ProbeTask::Depth, [3, 2, 4]))
            .collect();
        let cfg = ProbeConfig::new(ProbeTask::Depth, [3, 2, 4], 4, ModelFamily::Encoder);
        let tc = TrainConfig {
            optim: OptimConfig {
                total_epochs: 3,
                ..Default::default()
            },
            seed: 9,
            ..Default::default()
        };
        let a = train_probe(&data, cfg.clone(), &tc).unwrap();
        let b = train_probe(&data, cfg.clone(), &tc).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.probe.params(), b.probe.params());
        assert_eq!(a.log.steps.len(), 12);
        for r in &a.log.steps {
            assert_eq!(r.lr, lr_at(r.step, 4, &tc.optim));
        }
        let other = train_probe(&data, cfg, &TrainConfig { seed: 10, ..tc }).unwrap();
        assert_ne!(other.log, a.log);
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = ProbeConfig::new(ProbeTask::Depth, [3, 2, 4], 4, ModelFamily::Encoder);
        let empty: Vec<ProbeSample> = vec![];
        assert!(train_probe(&empty, cfg, &TrainConfig::default()).is_err());
    }

    #[test]
    fn nan_features_abort_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = random_sample(&mut rng, ProbeTask::Depth, [3, 2, 4]);
        let huge = vec![3e38f32; 4 * 4 * 3];
        s.stages[0] = FeatureGrid::new("m", 1, (4, 4, 3), huge, (16, 16)).unwrap();
        let cfg = ProbeConfig::new(ProbeTask::Depth, [3, 2, 4], 4, ModelFamily::Encoder);
        let r = train_probe(&vec![s], cfg, &TrainConfig::default());
        assert!(matches!(r, Err(Error::NonFinite(_))), "{r:?}");
    }
}
