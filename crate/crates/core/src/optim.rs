//! SGD with momentum, Adam, AdamW and the polynomial learning-rate decay.
//!
//! Weight decay is an L2 term folded into the gradient for SGD and Adam and
//! a decoupled shrink of the weights for AdamW.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::{Archive, IntTensor};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
    AdamW,
}

impl OptimKind {
    fn code(self) -> i32 {
        match self {
            OptimKind::Sgd => 1,
            OptimKind::Adam => 2,
            OptimKind::AdamW => 3,
        }
    }

    fn has_second_moment(self) -> bool {
        self != OptimKind::Sgd
    }
}

impl fmt::Display for OptimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimKind::Sgd => "sgd",
            OptimKind::Adam => "adam",
            OptimKind::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimKind::Sgd),
            "adam" => Ok(OptimKind::Adam),
            "adamw" => Ok(OptimKind::AdamW),
            _ => Err(Error::config(format!("unknown optimizer {s:?} (expected sgd, adam or adamw)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub total_iters: usize,
    pub power: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    /// The toy recipe: AdamW at 1e-3 with decay 0.05.
    fn default() -> Self {
        OptimConfig {
            kind: OptimKind::AdamW,
            lr: 1e-3,
            weight_decay: 0.05,
            total_iters: 2000,
            power: 0.9,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn new(kind: OptimKind, lr: f64, weight_decay: f64, total_iters: usize) -> Result<Self> {
        let cfg = OptimConfig {
            kind,
            lr,
            weight_decay,
            total_iters,
            ..OptimConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.power >= 0.0) {
            return Err(Error::config(format!("poly power must be nonnegative, got {}", self.power)));
        }
        if self.total_iters == 0 {
            return Err(Error::config("total_iters must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::config("momentum and betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        Ok(())
    }

    /// Learning rate at iteration `t` of the polynomial schedule.
    pub fn lr_at(&self, t: usize) -> Result<f64> {
        poly_lr(self.lr, t, self.total_iters, self.power)
    }
}

/// `base · (1 − t/total)^power` for `0 ≤ t ≤ total`.
pub fn poly_lr(base: f64, t: usize, total: usize, power: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::Invalid(format!("schedule step {t} outside 0..={total}")));
    }
    Ok(base * (1.0 - t as f64 / total as f64).powf(power))
}

/// Per-parameter moment buffers plus the step counter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimConfig,
    names: Vec<String>,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u64,
}

impl Optimizer {
    /// Zeroed state for every parameter of `store`.
    pub fn new(cfg: OptimConfig, store: &ParamStore<f32>) -> Result<Self> {
        cfg.validate()?;
        let names = store.ids().map(|id| store.name(id).to_string()).collect();
        let zeros = || store.ids().map(|id| vec![0.0; store.value(id).numel()]).collect();
        let second = if cfg.kind.has_second_moment() { zeros() } else { Vec::new() };
        Ok(Optimizer {
            first: zeros(),
            second,
            names,
            steps: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradient buffers of `store` at rate `lr`.
    ///
    /// Every parameter must have a gradient buffer matching the state this
    /// optimizer was built with; otherwise nothing is modified.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        if store.len() != self.names.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.names.len(),
                store.len()
            )));
        }
        for (i, id) in store.ids().enumerate() {
            if store.name(id) != self.names[i] || store.grad(id).numel() != self.first[i].len() {
                return Err(Error::Invalid(format!("missing gradient for parameter {}", self.names[i])));
            }
        }
        self.steps += 1;
        let c = &self.cfg;
        let (lr, wd) = (lr as f32, c.weight_decay as f32);
        let t = self.steps as i32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
        let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (i, id) in store.ids().enumerate() {
            let g = store.grad(id).data().to_vec();
            let p = store.value_mut(id).data_mut();
            let m = &mut self.first[i];
            match c.kind {
                OptimKind::Sgd => {
                    let mu = c.momentum as f32;
                    for ((p, &g), m) in p.iter_mut().zip(&g).zip(m.iter_mut()) {
                        *m = mu * *m + g + wd * *p;
                        *p -= lr * *m;
                    }
                }
                OptimKind::Adam | OptimKind::AdamW => {
                    let decoupled = c.kind == OptimKind::AdamW;
                    let v = &mut self.second[i];
                    for (((p, &g), m), v) in p.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = if decoupled { g } else { g + wd * *p };
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let mut update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                        if decoupled {
                            update += wd * *p;
                        }
                        *p -= lr * update;
                    }
                }
            }
        }
        Ok(())
    }

    /// Stores the state under `optim.*` names.
    pub fn save(&self, archive: &mut Archive) -> Result<()> {
        let steps = [self.steps as u32 as i32, (self.steps >> 32) as u32 as i32];
        archive.push_i32("optim.kind", IntTensor::new(vec![1], vec![self.cfg.kind.code()])?)?;
        archive.push_i32("optim.steps", IntTensor::new(vec![2], steps.to_vec())?)?;
        for (i, name) in self.names.iter().enumerate() {
            if self.first[i].is_empty() {
                continue;
            }
            let n = self.first[i].len();
            archive.push_f32(format!("optim.m.{name}"), Tensor::new(vec![n], self.first[i].clone())?)?;
            if self.cfg.kind.has_second_moment() {
                archive.push_f32(format!("optim.v.{name}"), Tensor::new(vec![n], self.second[i].clone())?)?;
            }
        }
        Ok(())
    }

    /// Restores state written by [`Optimizer::save`] for the same kind and
    /// parameter set.
    pub fn load(&mut self, archive: &Archive) -> Result<()> {
        let kind = archive.i32("optim.kind")?;
        if kind.data != [self.cfg.kind.code()] {
            return Err(Error::Invalid(format!("checkpoint optimizer state is not {}", self.cfg.kind)));
        }
        let steps = &archive.i32("optim.steps")?.data;
        if steps.len() != 2 {
            return Err(Error::Format("optim.steps must hold two words".into()));
        }
        let mut first = self.first.clone();
        let mut second = self.second.clone();
        let fill = |dst: &mut Vec<f32>, key: String| -> Result<()> {
                let t = archive.f32(&key)?;
                if t.numel() != dst.len() {
                    return Err(Error::shape("optimizer state", &[dst.len()], t.shape()));
                }
                dst.copy_from_slice(t.data());
                Ok(())
        };
        for (i, name) in self.names.iter().enumerate() {
            if first[i].is_empty() {
                continue;
            }
            fill(&mut first[i], format!("optim.m.{name}"))?;
            if self.cfg.kind.has_second_moment() {
                fill(&mut second[i], format!("optim.v.{name}"))?;
            }
        }
        self.first = first;
        self.second = second;
        self.steps = steps[0] as u32 as u64 | ((steps[1] as u32 as u64) << 32);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(values: &[f32]) -> (ParamStore<f32>, crate::tensor::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        (s, id)
    }

    fn cfg(kind: OptimKind, lr: f64, wd: f64) -> OptimConfig {
        OptimConfig::new(kind, lr, wd, 100).unwrap()
    }

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0.1, 0, 10, 0.9).unwrap(), 0.1);
        assert_eq!(poly_lr(0.1, 10, 10, 0.9).unwrap(), 0.0);
        assert!((poly_lr(0.1, 5, 10, 1.0).unwrap() - 0.05).abs() < 1e-15);
        assert!(poly_lr(0.1, 11, 10, 0.9).is_err());
        let c = OptimConfig::default();
        let lrs: Vec<f64> = (0..=c.total_iters).map(|t| c.lr_at(t).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(OptimConfig::new(OptimKind::Sgd, 0.0, 0.0, 10).is_err());
        assert!(OptimConfig::new(OptimKind::Sgd, 0.1, 0.0, 0).is_err());
        assert!(OptimConfig { power: -1.0, ..OptimConfig::default() }.validate().is_err());
        assert!("rmsprop".parse::<OptimKind>().is_err());
        assert_eq!("adamw".parse::<OptimKind>().unwrap(), OptimKind::AdamW);
    }

    #[test]
    fn plain_sgd_is_gradient_descent() {
        let (mut s, id) = single(&[1.0, -2.0]);
        s.grad_mut(id).data_mut().copy_from_slice(&[0.5, -1.0]);
        let mut c = cfg(OptimKind::Sgd, 0.1, 0.0);
        c.momentum = 0.0;
        let mut opt = Optimizer::new(c, &s).unwrap();
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id).data(), &[1.0 - 0.1 * 0.5, -2.0 + 0.1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut s, id) = single(&[0.0, 0.0, 0.0]);
        s.grad_mut(id).data_mut().copy_from_slice(&[3.0, -0.01, 250.0]);
        let mut opt = Optimizer::new(cfg(OptimKind::Adam, 1e-3, 0.0), &s).unwrap();
        opt.step(&mut s, 1e-3).unwrap();
        for (&p, sign) in s.value(id).data().iter().zip([-1.0f32, 1.0, -1.0]) {
            assert!((p - sign * 1e-3).abs() < 1e-7, "{p}");
        }
    }

    #[test]
    fn adamw_decays_zero_grad_params() {
        let (mut s, id) = single(&[2.0, -4.0]);
        let mut opt = Optimizer::new(cfg(OptimKind::AdamW, 0.01, 0.5), &s).unwrap();
        opt.step(&mut s, 0.01).unwrap();
        assert_eq!(s.value(id).data(), &[2.0 * (1.0 - 0.005), -4.0 * (1.0 - 0.005)]);
    }

    #[test]
    fn mismatched_store_rejected() {
        let (s, _) = single(&[1.0]);
        let mut opt = Optimizer::new(OptimConfig::default(), &s).unwrap();
        let (mut other, _) = single(&[1.0, 2.0]);
        let before = other.value(other.id("x").unwrap()).clone();
        assert!(opt.step(&mut other, 0.1).is_err());
        assert_eq!(other.value(other.id("x").unwrap()), &before);
        assert_eq!(opt.steps(), 0);
        let mut empty = ParamStore::new();
        assert!(opt.step(&mut empty, 0.1).is_err());
    }

    #[test]
    fn state_round_trips_through_archive() {
        for kind in [OptimKind::Sgd, OptimKind::Adam, OptimKind::AdamW] {
            let (mut s, id) = single(&[1.0, 2.0, 3.0]);
            let mut opt = Optimizer::new(cfg(kind, 0.1, 0.01), &s).unwrap();
            for k in 0..3 {
                s.grad_mut(id).data_mut().copy_from_slice(&[k as f32, 1.0, -2.0]);
                opt.step(&mut s, 0.1).unwrap();
            }
            let mut a = Archive::new();
            opt.save(&mut a).unwrap();
            let a = Archive::decode(&a.encode().unwrap()).unwrap();
            let mut restored = Optimizer::new(cfg(kind, 0.1, 0.01), &s).unwrap();
            restored.load(&a).unwrap();
            let mut s2 = s.clone();
            opt.step(&mut s, 0.05).unwrap();
            restored.step(&mut s2, 0.05).unwrap();
            assert_eq!(s.value(id), s2.value(id));
            assert_eq!(restored.steps(), 4);
            let other = if kind == OptimKind::Sgd { OptimKind::Adam } else { OptimKind::Sgd };
            assert!(Optimizer::new(cfg(other, 0.1, 0.0), &s).unwrap().load(&a).is_err());
        }
    }
}
