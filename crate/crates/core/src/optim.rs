//! Optimizers, the cosine schedule, gradient clipping and the option A–D
//! trainable-set selector.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{ParamKind, Parameter};

/// Which of convolution weights and BN affine weights are learnable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainOption {
    A,
    B,
    C,
    D,
}

impl TrainOption {
    pub const ALL: [TrainOption; 4] = [TrainOption::A, TrainOption::B, TrainOption::C, TrainOption::D];

    pub fn train_conv(self) -> bool {
        matches!(self, TrainOption::A | TrainOption::B)
    }

    pub fn train_bn_affine(self) -> bool {
        matches!(self, TrainOption::A | TrainOption::C)
    }

    /// Whether a weight of `kind` is learnable under this option.
    pub fn trains(self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::ConvWeight => self.train_conv(),
            ParamKind::BnGamma | ParamKind::BnBeta => self.train_bn_affine(),
            ParamKind::Classifier | ParamKind::SkipLambda | ParamKind::ArchAlpha => true,
        }
    }

    pub fn label(self) -> char {
        match self {
            TrainOption::A => 'A',
            TrainOption::B => 'B',
            TrainOption::C => 'C',
            TrainOption::D => 'D',
        }
    }
}

impl fmt::Display for TrainOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

impl FromStr for TrainOption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(TrainOption::A),
            "B" | "b" => Ok(TrainOption::B),
            "C" | "c" => Ok(TrainOption::C),
            "D" | "d" => Ok(TrainOption::D),
            other => Err(Error::config(
                "option",
                format!("expected one of A, B, C, D, got `{other}`"),
            )),
        }
    }
}

/// Parameter names split by role.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub weights_to_train: Vec<String>,
    pub weights_frozen: Vec<String>,
    pub arch_params: Vec<String>,
}

/// Marks every parameter frozen or trainable according to `option` and
/// reports the resulting partition.
pub fn select_trainable<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, option: TrainOption) -> Partition {
    let mut part = Partition::default();
    for p in params {
        if p.kind == ParamKind::ArchAlpha {
            p.frozen = false;
            part.arch_params.push(p.name.clone());
        } else if option.trains(p.kind) {
            p.frozen = false;
            part.weights_to_train.push(p.name.clone());
        } else {
            p.frozen = true;
            part.weights_frozen.push(p.name.clone());
        }
    }
    part
}

/// Cosine annealing from `lr0` at epoch 0 down to 0 at `total`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = epoch.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Rescales the gradients of the non-frozen `params` so their joint L2 norm
/// is at most `max_norm`; returns the factor applied.
pub fn clip_grad_norm(params: &mut [&mut Parameter], max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter(|p| !p.frozen)
        .filter_map(|p| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if !(norm > max_norm) {
        return 1.0;
    }
    let factor = max_norm / norm;
    for p in params.iter_mut().filter(|p| !p.frozen) {
        if let Some(g) = p.tensor.grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
    factor
}

fn decays(p: &Parameter, decay_bn_affine: bool) -> bool {
    decay_bn_affine || !matches!(p.kind, ParamKind::BnGamma | ParamKind::BnBeta)
}

/// SGD with heavy-ball momentum and coupled L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_bn_affine: bool,
    buffers: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            decay_bn_affine: true,
            buffers: HashMap::new(),
        }
    }

    /// `v ← μv + (g + wd·w)`, `w ← w − lr·v` for every non-frozen parameter.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        for p in params.iter_mut().filter(|p| !p.frozen) {
            let grad = p
                .tensor
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            let wd = if decays(p, self.decay_bn_affine) {
                self.weight_decay
            } else {
                0.0
            };
            let buf = self
                .buffers
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let (mu, lr) = (self.momentum, self.lr);
            let grad = grad.clone();
            for ((w, v), g) in p.tensor.data_mut().iter_mut().zip(buf.iter_mut()).zip(grad) {
                *v = mu * *v + (g + wd * *w);
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction and coupled L2 weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub steps: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(3e-4, (0.5, 0.999), 1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Adam {
            lr,
            betas,
            weight_decay,
            eps: 1e-8,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        self.steps += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        for p in params.iter_mut().filter(|p| !p.frozen) {
            let grad = p
                .tensor
                .grad
                .clone()
                .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i] + self.weight_decay * *w;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
