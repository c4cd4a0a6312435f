use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{for_each_prefix_run, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    /// Weight decay is decoupled (AdamW style).
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::Sgd {
            lr,
            momentum,
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => lr > 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · (1 + cos(π · step / total)) / 2`
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = (step as f64 / total.max(1) as f64).min(1.0);
                0.5 * base * (1.0 + (PI * t).cos())
            }
        }
    }
}

/// Moment buffers mirroring every trainable tensor at full size. An update
/// touches only the leading block that received gradient since the last
/// `zero_grad`, so weights and moments outside the widths trained this step
/// stay exactly as they were.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T = f32> {
    cfg: OptimizerConfig,
    t: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore<T>) -> Self {
        let zeros = |with: bool| -> Vec<Option<Vec<T>>> {
            store
                .iter()
                .map(|(_, _, t)| (with && t.requires_grad()).then(|| vec![T::zero(); t.len()]))
                .collect()
        };
        let adam = matches!(cfg, OptimizerConfig::Adam { .. });
        Optimizer {
            m: zeros(true),
            v: zeros(adam),
            cfg,
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(extents) = store.touched(id).map(<[usize]>::to_vec) else { continue };
            let Some(m) = self.m[id.index()].as_mut() else { continue };
            let shape = store.get(id).shape().to_vec();
            let grad = store.get(id).grad().expect("trainable").to_vec();
            let w = store.get_mut(id).data_mut();
            match self.cfg {
                OptimizerConfig::Sgd {
                    momentum,
                    weight_decay,
                    ..
                } => {
                    let (mu, wd, lr) = (T::of(momentum), T::of(weight_decay), T::of(lr));
                    for_each_prefix_run(&shape, &extents, |s, n| {
                        for i in s..s + n {
                            let g = grad[i] + wd * w[i];
                            m[i] = mu * m[i] + g;
                            w[i] -= lr * m[i];
                        }
                    });
                }
                OptimizerConfig::Adam {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    ..
                } => {
                    let v = self.v[id.index()].as_mut().expect("adam second moment");
                    let (b1, b2) = (T::of(beta1), T::of(beta2));
                    let c1 = T::of(1.0 - beta1.powi(self.t as i32));
                    let c2 = T::of(1.0 - beta2.powi(self.t as i32));
                    let (eps, wd, lr) = (T::of(eps), T::of(weight_decay), T::of(lr));
                    let one = T::one();
                    for_each_prefix_run(&shape, &extents, |s, n| {
                        for i in s..s + n {
                            let g = grad[i];
                            m[i] = b1 * m[i] + (one - b1) * g;
                            v[i] = b2 * v[i] + (one - b2) * g * g;
                            let mhat = m[i] / c1;
                            let vhat = v[i] / c2;
                            w[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * w[i]);
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

impl Optimizer<f32> {
    /// Adds `optim/t`, `optim/m/<name>` and `optim/v/<name>` entries.
    pub fn save(&self, c: &mut Container, store: &ParamStore<f32>) {
        c.put_u64("optim/t", self.t);
        for (id, name, t) in store.iter() {
            for (key, bufs) in [("m", &self.m), ("v", &self.v)] {
                if let Some(b) = &bufs[id.index()] {
                    c.put(
                        &format!("optim/{key}/{name}"),
                        Tensor::new(t.shape(), b.clone()).expect("buffer mirrors tensor"),
                    );
                }
            }
        }
    }

    pub fn load(cfg: OptimizerConfig, c: &Container, store: &ParamStore<f32>) -> Result<Self> {
        let mut opt = Optimizer::new(cfg, store);
        opt.t = c
            .get_u64("optim/t")?
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        for (id, name, t) in store.iter() {
            for (key, bufs) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                if let Some(b) = bufs[id.index()].as_mut() {
                    let entry = c.require(&format!("optim/{key}/{name}"))?;
                    if entry.shape() != t.shape() {
                        return Err(Error::Format(format!(
                            "optimizer buffer for '{name}' has shape {:?}, expected {:?}",
                            entry.shape(),
                            t.shape()
                        )));
                    }
                    b.copy_from_slice(entry.data());
                }
            }
        }
        Ok(opt)
    }
}
