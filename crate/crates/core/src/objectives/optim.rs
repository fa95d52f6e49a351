use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: f64,
    pub total_epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 1.5,
            total_epochs: 10,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr >= 0.0
            && self.base_lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.warmup_epochs >= 0.0
            && self.total_epochs >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer config {self:?}")))
        }
    }

    pub fn warmup_steps(&self, steps_per_epoch: usize) -> usize {
        (self.warmup_epochs * steps_per_epoch as f64).round() as usize
    }

    pub fn total_steps(&self, steps_per_epoch: usize) -> usize {
        self.total_epochs * steps_per_epoch
    }
}

/// Learning rate at `step`: linear warmup from 0, then cosine decay that
/// reaches exactly 0 at the final step `total − 1`.
pub fn lr_at(step: usize, steps_per_epoch: usize, config: &OptimConfig) -> f64 {
    let base = config.base_lr;
    let warmup = config.warmup_steps(steps_per_epoch);
    let last = config.total_steps(steps_per_epoch).saturating_sub(1);
    if step >= last {
        return 0.0;
    }
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if last <= warmup {
        return base;
    }
    let t = ((step - warmup) as f64 / (last - warmup) as f64).clamp(0.0, 1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(config: OptimConfig, params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update: decoupled decay `p −= lr·wd·p`, then the
/// bias-corrected Adam step.
pub fn adamw_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adamw_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
    }
    if !(lr >= 0.0) {
        return Err(Error::invalid(format!("negative learning rate {lr}")));
    }
    let c = state.config;
    state.step += 1;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i].as_f64();
            let mi = c.beta1 * m.data()[i].as_f64() + (1.0 - c.beta1) * gi;
            let vi = c.beta2 * v.data()[i].as_f64() + (1.0 - c.beta2) * gi * gi;
            m.data_mut()[i] = T::cast(mi);
            v.data_mut()[i] = T::cast(vi);
            let mut x = pd[i].as_f64();
            x -= lr * c.weight_decay * x;
            x -= lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            pd[i] = T::cast(x);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_landmarks() {
        let c = OptimConfig::default();
        let spe = 64;
        assert_eq!(lr_at(0, spe, &c), 0.0);
        assert_eq!(lr_at(96, spe, &c), 1e-3);
        assert!((lr_at(48, spe, &c) - 5e-4).abs() < 1e-18);
        assert_eq!(lr_at(639, spe, &c), 0.0);
        assert_eq!(lr_at(5000, spe, &c), 0.0);
        // midpoint of the decay
        let mid = 96 + (639 - 96) / 2;
        let t = (mid - 96) as f64 / (639 - 96) as f64;
        let want = 1e-3 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        assert_eq!(lr_at(mid, spe, &c), want);
    }

    #[test]
    fn schedule_shape() {
        let c = OptimConfig::default();
        let spe = 10;
        let trace: Vec<f64> = (0..100).map(|s| lr_at(s, spe, &c)).collect();
        let warm = c.warmup_steps(spe);
        assert_eq!(warm, 15);
        assert!(trace[..=warm].windows(2).all(|w| w[1] > w[0]));
        assert!(trace[warm..].windows(2).all(|w| w[1] < w[0]));
        assert!(trace.iter().all(|&lr| (0.0..=1e-3).contains(&lr)));
    }

    #[test]
    fn adamw_closed_forms() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = Tensor::new(vec![1], vec![0.5f64]).unwrap();
        let mut st = OptimState::new(cfg, &[&p]);
        adamw_step(
            &mut [&mut p],
            &[Tensor::new(vec![1], vec![1.0]).unwrap()],
            &mut st,
            1e-3,
        )
        .unwrap();
        let want = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);

        let mut q = Tensor::new(vec![2], vec![1.0f64, -2.0]).unwrap();
        let before = q.clone();
        let mut st = OptimState::new(cfg, &[&q]);
        adamw_step(&mut [&mut q], &[Tensor::zeros(vec![2])], &mut st, 1e-3).unwrap();
        assert_eq!(q, before);

        let decay = OptimConfig::default();
        let mut st = OptimState::new(decay, &[&q]);
        adamw_step(&mut [&mut q], &[Tensor::zeros(vec![2])], &mut st, 0.1).unwrap();
        let f = 1.0 - 0.1 * 0.01;
        assert!((q.data()[0] - f).abs() < 1e-15 && (q.data()[1] + 2.0 * f).abs() < 1e-15);
    }

    #[test]
    fn adamw_matches_reference_loop() {
        // independent scalar implementation over several steps
        let cfg = OptimConfig::default();
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
        let mut p = Tensor::new(vec![1], vec![0.8f64]).unwrap();
        let mut st = OptimState::new(cfg, &[&p]);
        let (mut x, mut m, mut v) = (0.8f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let lr = 0.01 * (t + 1) as f64;
            adamw_step(&mut [&mut p], &[Tensor::new(vec![1], vec![*g]).unwrap()], &mut st, lr).unwrap();
            x *= 1.0 - lr * 0.01;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.data()[0] - x).abs() < 1e-14);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn adamw_shape_errors() {
        let mut p = Tensor::<f64>::zeros(vec![2]);
        let mut st = OptimState::new(OptimConfig::default(), &[&p]);
        assert!(adamw_step(&mut [&mut p], &[Tensor::zeros(vec![3])], &mut st, 1e-3).is_err());
        assert!(adamw_step(&mut [&mut p], &[], &mut st, 1e-3).is_err());
        assert!(adamw_step(&mut [&mut p], &[Tensor::zeros(vec![2])], &mut st, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_bounded(spe in 1usize..50, epochs in 1usize..12, warm in 0.0f64..3.0, step in 0usize..700) {
            let c = OptimConfig { warmup_epochs: warm, total_epochs: epochs, ..Default::default() };
            let lr = lr_at(step, spe, &c);
            prop_assert!((0.0..=c.base_lr).contains(&lr));
            prop_assert_eq!(lr_at(c.total_steps(spe) - 1, spe, &c), 0.0);
        }
    }
}
