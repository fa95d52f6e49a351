//! Multiscale dense probe with binned-depth and uncertainty-normal heads.
//!
//! Architecture, per used stage: 1×1 projection to `hidden_width`, then a
//! 3×3 conv + relu refinement. Stages are fused coarsest to finest: the
//! running sum is bilinearly upsampled to the next stage's resolution, added
//! to that stage, and passed through a 3×3 conv + relu. A final 3×3 conv
//! produces `out_channels` maps, upsampled to 1/`output_stride` of the image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::FeatureGrid;
use crate::tensorcore::{Graph, Real, Tensor, Var};

pub const DEPTH_BINS: usize = 256;
pub const NORMAL_CHANNELS: usize = 4;
pub const NORMAL_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Encoder,
    DiffusionDecoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    Depth,
    Normals,
}

impl ProbeTask {
    pub fn out_channels(self) -> usize {
        match self {
            ProbeTask::Depth => DEPTH_BINS,
            ProbeTask::Normals => NORMAL_CHANNELS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::Depth => "depth",
            ProbeTask::Normals => "normals",
        }
    }
}

/// Splits `total_blocks` layers into 4 groups (remainder to the last) and
/// returns the 1-based layer indices ending the groups the probe reads: the
/// latter three for encoders, the earlier three for diffusion decoders.
pub fn select_stages(total_blocks: usize, family: ModelFamily) -> Result<[usize; 3]> {
    if total_blocks < 4 {
        return Err(Error::invalid(format!("need at least 4 blocks, got {total_blocks}")));
    }
    let group = total_blocks / 4;
    let ends = [group, 2 * group, 3 * group, total_blocks];
    Ok(match family {
        ModelFamily::Encoder => [ends[1], ends[2], ends[3]],
        ModelFamily::DiffusionDecoder => [ends[0], ends[1], ends[2]],
    })
}

/// Block ids (0-based, of a 4-block feature file) read by the probe.
pub fn used_blocks(family: ModelFamily) -> [u8; 3] {
    let s = select_stages(4, family).expect("4 blocks is valid");
    [s[0] as u8 - 1, s[1] as u8 - 1, s[2] as u8 - 1]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// input channels of each used stage, in `used_stages` order
    pub stage_channels: Vec<usize>,
    pub hidden_width: usize,
    pub out_channels: usize,
    pub output_stride: usize,
    pub used_stages: Vec<u8>,
}

impl ProbeConfig {
    pub const DEFAULT_HIDDEN: usize = 128;
    pub const DESK_HIDDEN: usize = 32;

    pub fn new(task: ProbeTask, stage_channels: [usize; 3], hidden_width: usize, family: ModelFamily) -> Self {
        Self {
            stage_channels: stage_channels.to_vec(),
            hidden_width,
            out_channels: task.out_channels(),
            output_stride: 4,
            used_stages: used_blocks(family).to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 3 || self.used_stages.len() != 3 {
            return Err(Error::invalid("probe reads exactly 3 stages"));
        }
        if self.stage_channels.contains(&0) || self.hidden_width == 0 {
            return Err(Error::invalid("probe widths must be nonzero"));
        }
        if self.out_channels != DEPTH_BINS && self.out_channels != NORMAL_CHANNELS {
            return Err(Error::invalid(format!(
                "out_channels must be {DEPTH_BINS} or {NORMAL_CHANNELS}, got {}",
                self.out_channels
            )));
        }
        if self.output_stride == 0 {
            return Err(Error::invalid("output_stride must be >= 1"));
        }
        Ok(())
    }

    pub fn task(&self) -> ProbeTask {
        if self.out_channels == DEPTH_BINS {
            ProbeTask::Depth
        } else {
            ProbeTask::Normals
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv<T> {
    fn zeros(out_c: usize, in_c: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![out_c, in_c, k, k]),
            bias: Tensor::zeros(vec![out_c]),
        }
    }

    fn padding(&self) -> usize {
        self.weight.shape()[2] / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseProbe<T> {
    config: ProbeConfig,
    pub project: Vec<Conv<T>>,
    pub refine: Vec<Conv<T>>,
    pub fuse: Vec<Conv<T>>,
    pub head: Conv<T>,
}

/// Graph handles for a probe's parameters, in [`DenseProbe::params`] order.
#[derive(Clone, Debug)]
pub struct ProbeVars(pub Vec<Var>);

impl<T: Real> DenseProbe<T> {
    /// All-zero probe with the layout implied by `config`.
    pub fn zeros(config: ProbeConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_width;
        Ok(Self {
            project: config.stage_channels.iter().map(|&c| Conv::zeros(h, c, 1)).collect(),
            refine: (0..3).map(|_| Conv::zeros(h, h, 3)).collect(),
            fuse: (0..2).map(|_| Conv::zeros(h, h, 3)).collect(),
            head: Conv::zeros(config.out_channels, h, 3),
            config,
        })
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    fn convs(&self) -> impl Iterator<Item = &Conv<T>> {
        self.project
            .iter()
            .chain(&self.refine)
            .chain(&self.fuse)
            .chain(std::iter::once(&self.head))
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv<T>> {
        self.project
            .iter_mut()
            .chain(&mut self.refine)
            .chain(&mut self.fuse)
            .chain(std::iter::once(&mut self.head))
    }

    /// Parameters in a fixed order: each conv's weight then bias, walking
    /// projections, refinements, fusions, head.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.convs().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.convs_mut().flat_map(|c| [&mut c.weight, &mut c.bias]).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Replaces all parameters; shapes must match.
    pub fn set_params(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.iter_mut().zip(&values) {
            if slot.shape() != v.shape() {
                return Err(Error::shape("probe parameter", slot.shape(), v.shape()));
            }
        }
        for (slot, v) in slots.into_iter().zip(values) {
            *slot = v;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> DenseProbe<U> {
        let c = |conv: &Conv<T>| Conv {
            weight: conv.weight.cast(),
            bias: conv.bias.cast(),
        };
        DenseProbe {
            config: self.config.clone(),
            project: self.project.iter().map(c).collect(),
            refine: self.refine.iter().map(c).collect(),
            fuse: self.fuse.iter().map(c).collect(),
            head: c(&self.head),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ProbeVars {
        ProbeVars(
            self.params()
                .into_iter()
                .map(|p| g.leaf(p.clone(), trainable))
                .collect(),
        )
    }

    /// Records the probe on `g`. `stages` are 1×C×H×W inputs in
    /// `used_stages` order; `out_hw` is the output resolution.
    pub fn forward(&self, g: &mut Graph<T>, vars: &ProbeVars, stages: &[Var], out_hw: (usize, usize)) -> Result<Var> {
        if stages.len() != 3 {
            return Err(Error::invalid(format!("probe expects 3 stages, got {}", stages.len())));
        }
        let conv = |g: &mut Graph<T>, x: Var, idx: usize, padding: usize| -> Result<Var> {
            g.conv2d(x, vars.0[2 * idx], vars.0[2 * idx + 1], 1, padding)
        };
        let mut refined = Vec::with_capacity(3);
        for (s, &x) in stages.iter().enumerate() {
            let [_, c, h, w] = g.value(x).dims4("probe stage")?;
            if c != self.config.stage_channels[s] {
                return Err(Error::shape(
                    "probe stage channels",
                    &[c],
                    &[self.config.stage_channels[s]],
                ));
            }
            let p = conv(g, x, s, 0)?;
            let r = conv(g, p, 3 + s, self.refine[s].padding())?;
            refined.push((h, w, s, g.relu(r)));
        }
        // coarsest first; among equal resolutions the deeper stage first
        refined.sort_by(|a, b| (a.0 * a.1).cmp(&(b.0 * b.1)).then(b.2.cmp(&a.2)));

        let (mut cur_h, mut cur_w, _, mut running) = refined[0];
        for (i, &(h, w, _, feat)) in refined.iter().enumerate().skip(1) {
            let factor = integer_factor((cur_h, cur_w), (h, w))?;
            let up = g.bilinear_upsample(running, factor)?;
            let sum = g.add(up, feat)?;
            let fused = conv(g, sum, 6 + (i - 1), self.fuse[i - 1].padding())?;
            running = g.relu(fused);
            (cur_h, cur_w) = (h, w);
        }
        let out = conv(g, running, 8, self.head.padding())?;
        let factor = integer_factor((cur_h, cur_w), out_hw)?;
        g.bilinear_upsample(out, factor)
    }

    /// Raw output for feature grids of one image, in `used_stages` order.
    pub fn predict(&self, stages: &[&FeatureGrid]) -> Result<Tensor<T>> {
        let out_hw = self.output_size(stages)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let inputs: Vec<Var> = stages.iter().map(|s| g.constant(s.to_tensor())).collect();
        let out = self.forward(&mut g, &vars, &inputs, out_hw)?;
        Ok(g.value(out).clone())
    }

    /// Output resolution (H, W) for a set of grids: image size / output_stride.
    pub fn output_size(&self, stages: &[&FeatureGrid]) -> Result<(usize, usize)> {
        let first = stages
            .first()
            .ok_or_else(|| Error::invalid("no feature stages given"))?;
        let (iw, ih) = first.image_size();
        if stages.iter().any(|s| s.image_size() != (iw, ih)) {
            return Err(Error::invalid("feature stages come from different image sizes"));
        }
        let stride = self.config.output_stride;
        if iw % stride != 0 || ih % stride != 0 {
            return Err(Error::invalid(format!(
                "image size {iw}x{ih} not divisible by output stride {stride}"
            )));
        }
        Ok((ih / stride, iw / stride))
    }
}

fn integer_factor(from: (usize, usize), to: (usize, usize)) -> Result<usize> {
    let f = to.0 / from.0.max(1);
    if f == 0 || from.0 * f != to.0 || from.1 * f != to.1 {
        return Err(Error::shape("probe resolution", &[from.0, from.1], &[to.0, to.1]));
    }
    Ok(f)
}

/// Kaiming-uniform (fan-in) weights in `±sqrt(6 / fan_in)`, zero biases.
pub fn init_probe<T: Real>(config: ProbeConfig, seed: u64) -> Result<DenseProbe<T>> {
    let mut probe = DenseProbe::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for conv in probe.convs_mut() {
        let s = conv.weight.shape();
        let fan_in = (s[1] * s[2] * s[3]) as f64;
        let bound = (6.0 / fan_in).sqrt();
        for w in conv.weight.data_mut() {
            *w = T::cast(rng.random_range(-bound..bound));
        }
    }
    Ok(probe)
}

/// Closed form of [`DenseProbe::num_parameters`].
pub fn parameter_count(config: &ProbeConfig) -> usize {
    let h = config.hidden_width;
    let conv3 = 9 * h * h + h;
    config.stage_channels.iter().map(|c| c * h + h).sum::<usize>()
        + 5 * conv3
        + 9 * h * config.out_channels
        + config.out_channels
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl DepthRange {
    pub const METRIC_INDOOR: DepthRange = DepthRange { min: 0.0, max: 10.0 };
    pub const NORMALIZED: DepthRange = DepthRange { min: 0.0, max: 1.0 };

    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min < max) || !min.is_finite() || !max.is_finite() {
            return Err(Error::invalid(format!(
                "depth range ({min}, {max}) must satisfy min < max"
            )));
        }
        Ok(Self { min, max })
    }

    /// `c_k = min + (k + 0.5) (max - min) / bins`
    pub fn bin_centers(&self, bins: usize) -> Vec<f64> {
        let width = (self.max - self.min) / bins as f64;
        (0..bins).map(|k| self.min + (k as f64 + 0.5) * width).collect()
    }
}

#[derive(Clone, Debug)]
pub struct DepthPrediction<T> {
    /// 1×256×H×W, each pixel a probability simplex
    pub bin_probs: Tensor<T>,
    /// 1×1×H×W
    pub depth: Tensor<T>,
    pub range: DepthRange,
}

#[derive(Clone, Debug)]
pub struct NormalPrediction<T> {
    /// 1×3×H×W unit vectors
    pub normal: Tensor<T>,
    /// 1×1×H×W, nonnegative
    pub kappa: Tensor<T>,
}

/// Records softmax over bins and the probability-weighted bin-center sum.
/// Returns `(probs, depth)`.
pub fn depth_from_bins_graph<T: Real>(g: &mut Graph<T>, logits: Var, range: DepthRange) -> Result<(Var, Var)> {
    let [_, c, _, _] = g.value(logits).dims4("depth_from_bins")?;
    if c != DEPTH_BINS {
        return Err(Error::shape("depth_from_bins", &[c], &[DEPTH_BINS]));
    }
    let probs = g.softmax_channels(logits)?;
    let centers: Vec<T> = range.bin_centers(DEPTH_BINS).into_iter().map(T::cast).collect();
    let w = g.constant(Tensor::new(vec![1, DEPTH_BINS, 1, 1], centers)?);
    let b = g.constant(Tensor::zeros(vec![1]));
    let depth = g.conv2d(probs, w, b, 1, 0)?;
    Ok((probs, depth))
}

pub fn depth_from_bins<T: Real>(logits: &Tensor<T>, range: DepthRange) -> Result<DepthPrediction<T>> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let (p, d) = depth_from_bins_graph(&mut g, l, range)?;
    Ok(DepthPrediction {
        bin_probs: g.value(p).clone(),
        depth: g.value(d).clone(),
        range,
    })
}

/// Records the normal head: first three channels L2-normalized (guarded by
/// [`NORMAL_EPS`]), κ = softplus(fourth channel). Returns `(normal, kappa)`.
pub fn normal_from_raw_graph<T: Real>(g: &mut Graph<T>, raw: Var) -> Result<(Var, Var)> {
    let [_, c, _, _] = g.value(raw).dims4("normal_from_raw")?;
    if c != NORMAL_CHANNELS {
        return Err(Error::shape("normal_from_raw", &[c], &[NORMAL_CHANNELS]));
    }
    let dir = g.slice_channels(raw, 0, 3)?;
    let normal = g.l2_normalize_channels(dir, T::cast(NORMAL_EPS))?;
    let k = g.slice_channels(raw, 3, 1)?;
    let kappa = g.softplus(k);
    Ok((normal, kappa))
}

pub fn normal_from_raw<T: Real>(raw: &Tensor<T>) -> Result<NormalPrediction<T>> {
    let mut g = Graph::new();
    let r = g.constant(raw.clone());
    let (n, k) = normal_from_raw_graph(&mut g, r)?;
    Ok(NormalPrediction {
        normal: g.value(n).clone(),
        kappa: g.value(k).clone(),
    })
}
