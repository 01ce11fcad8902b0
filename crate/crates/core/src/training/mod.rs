//! Optimizer, learning-rate schedule, losses and the training loops.

pub mod dora;
pub mod pipeline;

use ndarray::{Array2, NdFloat, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tape::cast;
use dora::DoraConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Base language model on the target side (copy task).
    Lm,
    /// Fallback encoder only; LM frozen.
    Pretrain,
    /// Fallback encoder plus DoRA adapters; LM base frozen.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub dora: DoraConfig,
    pub align_loss: bool,
    pub align_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            peak_lr: 3e-4,
            min_lr: 3e-5,
            warmup_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 16,
            total_steps: 1000,
            dora: DoraConfig::default(),
            align_loss: false,
            align_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::Config("need 0 < min_lr <= peak_lr".into()));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::Config("need 0 < warmup_ratio < 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        lr_at(step, self.total_steps, self.peak_lr, self.min_lr, self.warmup_ratio)
    }
}

/// Linear warmup from 0 to `peak` over `warmup_ratio·total` steps, then
/// cosine decay to `min` at `total`.
pub fn lr_at(step: usize, total: usize, peak: f64, min: f64, warmup_ratio: f64) -> Result<f64> {
    if step > total {
        return Err(Error::InvalidStep { step, total });
    }
    let warm = warmup_ratio * total as f64;
    let s = step as f64;
    if s < warm {
        return Ok(peak * s / warm);
    }
    let span = total as f64 - warm;
    if span <= 0.0 {
        return Ok(min);
    }
    let progress = (s - warm) / span;
    Ok(min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// AdamW with decoupled weight decay. State is kept per parameter of one
/// store, in store order.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: NdFloat> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: &TrainConfig) -> Self {
        let zeros: Vec<Array2<T>> = store.iter().map(|(_, p)| Array2::zeros(p.raw_dim())).collect();
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads[i]` is the gradient of parameter `i` (None = zero).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Array2<T>>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1: T = cast(1.0 - b1.powi(self.t as i32));
        let c2: T = cast(1.0 - b2.powi(self.t as i32));
        let (b1, b2): (T, T) = (cast(b1), cast(b2));
        let one = T::one();
        let (lr, eps, wd): (T, T, T) = (cast(lr), cast(self.eps), cast(self.weight_decay));
        for (i, g) in grads.iter().enumerate() {
            let p = store.value_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match g {
                Some(g) => {
                    Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| b1 * x);
                    v.mapv_inplace(|x| b2 * x);
                }
            }
            Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / c1;
                let vhat = v / c2;
                *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
            });
        }
    }
}

/// `(1/n)·Σ‖h_k − e_k‖²` over rows.
pub fn align_loss<T: NdFloat>(h: &Array2<T>, e: &Array2<T>) -> Result<T> {
    if h.dim() != e.dim() {
        return Err(Error::ShapeError(format!("{:?} vs {:?}", h.dim(), e.dim())));
    }
    if h.nrows() == 0 {
        return Err(Error::EmptyAlignment);
    }
    let d = h - e;
    Ok(d.mapv(|x| x * x).sum() / cast(h.nrows() as f64))
}

pub fn total_loss(ce: f64, align: f64, config: &TrainConfig) -> f64 {
    if config.align_loss {
        ce + config.align_weight * align
    } else {
        ce
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let c = TrainConfig {
            total_steps: 1000,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0).unwrap(), 0.0);
        assert!((c.lr_at(100).unwrap() - 3e-4).abs() < 1e-12);
        assert!((c.lr_at(1000).unwrap() - 3e-5).abs() < 1e-12);
        assert!(matches!(c.lr_at(1001), Err(Error::InvalidStep { step: 1001, total: 1000 })));
        // continuity at the boundary and monotone decay after it
        assert!((c.lr_at(99).unwrap() - 3e-4 * 0.99).abs() < 1e-12);
        assert!((c.lr_at(101).unwrap() - 3e-4).abs() < 1e-8);
        for s in 100..1000 {
            assert!(c.lr_at(s + 1).unwrap() <= c.lr_at(s).unwrap());
        }
    }

    #[test]
    fn adamw_hand_trace() {
        let cfg = TrainConfig::default();
        let mut store = ParamStore::<f64>::new();
        store.insert("x", ndarray::arr2(&[[1.0]]));
        let mut opt = AdamW::new(&store, &cfg);
        // m = 0.1·2 = 0.2, v = 0.001·4 = 0.004; m̂ = 2, v̂ = 4
        // x ← 1 − 0.1·2/(2 + 1e-8)
        opt.step(&mut store, &[Some(ndarray::arr2(&[[2.0]]))], 0.1);
        let want = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((store.expect("x")[[0, 0]] - want).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_gradient_is_fixed_point() {
        let cfg = TrainConfig::default();
        let mut store = ParamStore::<f32>::new();
        store.insert("w", ndarray::arr2(&[[0.5, -1.5]]));
        let before = store.clone();
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, &[Some(Array2::zeros((1, 2)))], 0.01);
        opt.step(&mut store, &[None], 0.01);
        assert_eq!(store, before);
    }

    #[test]
    fn align_and_total() {
        let h = ndarray::arr2(&[[1.0, 2.0]]);
        let z = ndarray::arr2(&[[0.0, 0.0]]);
        assert_eq!(align_loss(&h, &z).unwrap(), 5.0);
        assert_eq!(align_loss(&h, &h).unwrap(), 0.0);
        let h2 = ndarray::arr2(&[[1.0, 2.0], [1.0, 1.0]]);
        let e2 = ndarray::arr2(&[[0.0, 0.0], [0.0, -0.414213562373095]]);
        // 5 and 1 + (1.41421356…)² = 3
        assert!((align_loss(&h2, &e2).unwrap() - 4.0_f64).abs() < 1e-12);
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(align_loss(&empty, &empty), Err(Error::EmptyAlignment)));
        let mut c = TrainConfig {
            align_loss: true,
            ..Default::default()
        };
        assert_eq!(total_loss(2.0, 0.5, &c), 2.5);
        assert_eq!(total_loss(2.0, 0.0, &c), 2.0);
        c.align_loss = false;
        assert_eq!(total_loss(2.0, 0.5, &c), 2.0);
    }

    #[test]
    fn align_loss_gradcheck() {
        use crate::nn::gradcheck::check_gradients;
        let mut rng = crate::rng::SplitMix64::new(3);
        for _ in 0..5 {
            let h = crate::nn::params::normal_init::<f64>(&mut rng, 4, 3, 1.0);
            let e = crate::nn::params::normal_init::<f64>(&mut rng, 4, 3, 1.0);
            let err = check_gradients(&[h.clone(), e.clone()], |t, v| t.sq_dist_mean(v[0], v[1]));
            assert!(err < 1e-4);
            let mut tape = crate::nn::Tape::new();
            let (a, b) = (tape.constant(h.clone()), tape.constant(e.clone()));
            let l = tape.sq_dist_mean(a, b);
            assert!((tape.scalar(l) - align_loss(&h, &e).unwrap()).abs() < 1e-12);
        }
    }
}
