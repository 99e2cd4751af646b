use std::collections::BTreeMap;

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::numkernel::{Gradients, Tensor};
use crate::params::{Binding, GroupSet, ParamStore};

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at
/// `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let p = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam moments with decoupled weight decay on matrices, keyed by
/// parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub t: u64,
    pub state: BTreeMap<String, Moments>,
}

pub struct StepStats {
    pub grad_norm: f64,
    pub lr: f64,
}

impl AdamW {
    /// Accumulators for exactly the tensors of the trainable groups.
    pub fn new(cfg: &OptimConfig, store: &ParamStore, trainable: &GroupSet) -> Self {
        let state = store
            .iter()
            .filter(|(id, _, _)| trainable.contains(&store.group(*id)))
            .map(|(_, name, t)| {
(name.to_string(), Moments::zeros(t.numel()))
            })
            .collect();
        AdamW {
            cfg: cfg.clone(),
            t: 0,
            state,
        }
    }

    /// One update from tape gradients. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, b: &Binding, grads: &Gradients, lr: f64) -> Result<StepStats> {
        let ids: Vec<_> = store.ids().filter(|&id| self.state.contains_key(store.name(id))).collect();
        let mut sq = 0.0;
        for &id in &ids {
            if let Some(g) = grads.get(b.var(id)) {
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        for &id in &ids {
            let name = store.name(id).to_string();
            let st = self.state.get_mut(&name).expect("state exists for trainable tensors");
            let p: &mut Tensor = store.get_mut(id);
            let decay = if p.shape().len() == 2 { self.cfg.weight_decay } else { 0.0 };
            let zeros;
            let g = match grads.get(b.var(id)) {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; p.numel()];
                    &zeros
                }
            };
            adam_update(p.data_mut(), g, clip, st, self.t, &self.cfg, lr, decay);
        }
        Ok(StepStats { grad_norm: norm, lr })
    }
}

/// In-place Adam step on one tensor with gradient `g * scale` at update
/// count `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adam_update(w: &mut [f64], g: &[f64], scale: f64, st: &mut Moments, t: u64, cfg: &OptimConfig, lr: f64, decay: f64) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (i, w) in w.iter_mut().enumerate() {
        let gi = g[i] * scale;
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
        let mh = st.m[i] / c1;
        let vh = st.v[i] / c2;
        *w -= lr * (mh / (vh.sqrt() + cfg.eps) + decay * *w);
    }
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_at(0, 100, 10, 1e-3), 0.0);
        assert!((lr_at(5, 100, 10, 1e-3) - 5e-4).abs() < 1e-18);
        assert_eq!(lr_at(10, 100, 10, 1e-3), 1e-3);
        assert!(lr_at(100, 100, 10, 1e-3).abs() < 1e-18);
        assert!(lr_at(55, 100, 10, 1e-3) < 1e-3);
        assert_eq!(lr_at(0, 100, 0, 2e-4), 2e-4);
        let mut last = f64::INFINITY;
        for s in 10..=100 {
            let v = lr_at(s, 100, 10, 1e-3);
            assert!(v <= last);
            last = v;
        }
    }
}
