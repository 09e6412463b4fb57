//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParamHost;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_max: 3e-4,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
            total_steps: 1000,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(mut self, lr_max: f64) -> Self {
        self.lr_max = lr_max;
        self
    }

    pub fn with_steps(mut self, total_steps: usize) -> Self {
        self.total_steps = total_steps;
        self
    }

    /// Range checks; returns every violation found.
    pub fn problems(&self, path: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr_max > 0.0) {
            out.push(format!("{path}.lr_max must be > 0"));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            out.push(format!("{path}.lr_min must lie in [0, lr_max]"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                out.push(format!("{path}.{name} must lie in (0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            out.push(format!("{path}.eps must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!("{path}.weight_decay must be >= 0"));
        }
        if self.total_steps == 0 {
            out.push(format!("{path}.total_steps must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                out.push(format!("{path}.clip_norm must be > 0 when set"));
            }
        }
        out
    }

    /// lr(t) = lr_min + ½(lr_max − lr_min)(1 + cos(π·t/T)), no warmup.
    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * frac).cos())
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Per-parameter moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamWState<T> {
    moments: BTreeMap<String, Moments<T>>,
    /// Completed optimizer steps.
    pub t: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new() -> Self {
        Self {
            moments: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.moments.get(name).map(|m| m.m.as_slice())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [(String, Tensor<T>)], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One AdamW update for every `(name, grad)` pair, applied to the
/// parameters `host` resolves by name. Returns the learning rate used.
pub fn adamw_step<T: Real>(
    grads: &[(String, Tensor<T>)],
    host: &mut (impl ParamHost<T> + ?Sized),
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
    step: usize,
) -> Result<f64> {
    if step >= cfg.total_steps {
        return Err(Error::Contract(format!(
            "optimizer step {step} outside schedule of {} steps",
            cfg.total_steps
        )));
    }
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Numeric {
                param: name.clone(),
                detail: "non-finite gradient".into(),
            });
        }
    }
    let lr = cfg.lr_at(step);
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let decay = T::from_f64(1.0 - lr * cfg.weight_decay);
    let step_size = T::from_f64(lr / bc1);
    let inv_bc2_sqrt = T::from_f64(1.0 / bc2.sqrt());
    let eps = T::from_f64(cfg.eps);
    for (name, g) in grads {
        let p = host.param_mut(name).ok_or_else(|| Error::Config(vec![format!("unknown parameter `{name}`")]))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![T::zero(); g.len()],
            v: vec![T::zero(); g.len()],
        });
        for (((pv, gv), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mom.m.iter_mut())
            .zip(mom.v.iter_mut())
        {
            *m = b1 * *m + one_b1 * *gv;
            *v = b2 * *v + one_b2 * *gv * *gv;
            let update = step_size * *m / ((*v).sqrt() * inv_bc2_sqrt + eps);
            *pv = *pv * decay - update;
        }
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;

    fn store<T: Real>(t: Tensor<T>) -> ParamStore<T> {
        let mut s = ParamStore::new();
        s.insert("w", t);
        s
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = AdamWConfig {
            lr_min: 1e-5,
            total_steps: 100,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 3e-4);
        assert_eq!(cfg.lr_at(100), 1e-5);
        assert!((cfg.lr_at(50) - (3e-4 + 1e-5) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_non_increasing() {
        let cfg = AdamWConfig::default().with_steps(977);
        for t in 0..977 {
            assert!(cfg.lr_at(t + 1) <= cfg.lr_at(t));
        }
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            total_steps: 10,
            ..Default::default()
        };
        let before = Tensor::<f32>::from_fn(&[5], |i| i as f32 - 2.2);
        let mut p = store(before.clone());
        let grads = vec![("w".to_string(), Tensor::zeros(&[5]))];
        let mut st = AdamWState::new();
        let lr = adamw_step(&grads, &mut p, &mut st, &cfg, 3).unwrap();
        let f = (1.0 - lr * 0.1) as f32;
        for (a, b) in p.get("w").unwrap().data().iter().zip(before.data()) {
            assert_eq!(*a, *b * f);
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let cfg = AdamWConfig::default().with_steps(10);
        let before = Tensor::<f32>::from_fn(&[7], |i| (i as f32).sin());
        let mut p = store(before.clone());
        let grads = vec![("w".to_string(), Tensor::zeros(&[7]))];
        let mut st = AdamWState::new();
        for s in 0..10 {
            adamw_step(&grads, &mut p, &mut st, &cfg, s).unwrap();
        }
        assert_eq!(p.get("w").unwrap(), &before);
        assert_eq!(st.t, 10);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let cfg = AdamWConfig::default();
        let mut p = store(Tensor::<f32>::zeros(&[2]));
        let grads = vec![(
            "layers.0.wq".to_string(),
            Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap(),
        )];
        let err = adamw_step(&grads, &mut p, &mut AdamWState::new(), &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Numeric { ref param, .. } if param == "layers.0.wq"));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // after one step, m̂/sqrt(v̂) = sign(g), so |Δp| ≈ lr
        let cfg = AdamWConfig::default().with_steps(5);
        let mut p = store(Tensor::<f64>::zeros(&[3]));
        let grads = vec![("w".to_string(), Tensor::new(vec![3], vec![0.5, -2.0, 1e-3]).unwrap())];
        adamw_step(&grads, &mut p, &mut AdamWState::new(), &cfg, 0).unwrap();
        for (v, s) in p.get("w").unwrap().data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - s * 3e-4).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![("a".to_string(), Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap())];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-15);
    }
}
