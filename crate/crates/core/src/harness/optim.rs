//! SGD with momentum, decoupled per-group learning-rate multipliers and
//! group freezing.

use super::config::OptimConfig;
use crate::autodiff::Gradients;
use crate::encoders::{Bound, ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sgd {
    pub cfg: OptimConfig,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(cfg: OptimConfig) -> Self {
        Self { cfg, velocity: Vec::new() }
    }

    /// Apply one update. Parameters bound as constants (frozen groups) have
    /// no gradient and are left untouched. Returns the global gradient norm
    /// before clipping.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &mut Gradients, step: usize) -> Result<f64> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let mut collected: Vec<(usize, Tensor)> = Vec::new();
        for (id, _) in store.iter() {
            if let Some(g) = grads.take(bound.var(id)) {
                collected.push((id.0, g));
            }
        }
        // groups with a zero multiplier do not move, so they do not count
        // towards the clipping norm either
        let norm = collected
            .iter()
            .filter(|(i, _)| self.cfg.multiplier(store.param(ParamId(*i)).group) != 0.0)
            .flat_map(|(_, g)| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence { step, detail: format!("gradient norm is {norm}") });
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };
        let base_lr = self.cfg.lr_at(step);
        for (idx, g) in collected {
            let id = ParamId(idx);
            let param = store.param(id);
            let group = param.group;
            // no decay on the temperature
            let wd = if group == ParamGroup::Temperature { 0.0 } else { self.cfg.weight_decay };
            let theta = param.value.data().to_vec();
            let v = self.velocity[idx].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vi, &gi), &ti) in v.data_mut().iter_mut().zip(g.data()).zip(&theta) {
                *vi = self.cfg.momentum * *vi + clip * gi + wd * ti;
            }
            let lr = base_lr * self.cfg.multiplier(group);
            let v = self.velocity[idx].as_ref().expect("just set");
            for (t, &vi) in store.get_mut(id).data_mut().iter_mut().zip(v.data()) {
                *t -= lr * vi;
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn quadratic_step(store: &mut ParamStore, opt: &mut Sgd, step: usize, trainable: impl Fn(ParamGroup) -> bool) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, trainable);
        let vars: Vec<_> = bound.vars().to_vec();
        let mut total = None;
        for v in vars {
            let sq = tape.mul(v, v).unwrap();
            let s = tape.sum(sq);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s).unwrap(),
            });
        }
        let loss = total.unwrap();
        let mut grads = tape.backward(loss).unwrap();
        opt.step(store, &bound, &mut grads, step).unwrap();
    }

    #[test]
    fn momentum_matches_hand_rollout() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0), ParamGroup::Head);
        let cfg = OptimConfig { lr: 0.1, momentum: 0.5, weight_decay: 0.0, warmup_steps: 0, clip_norm: 0.0, ..OptimConfig::default() };
        let mut opt = Sgd::new(cfg);
        let (mut x, mut v) = (1.0_f64, 0.0_f64);
        for s in 0..5 {
            quadratic_step(&mut store, &mut opt, s, |_| true);
            v = 0.5 * v + 2.0 * x;
            x -= 0.1 * v;
            assert!((store.get(id).item() - x).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_multiplier_matches_freezing() {
        let mut a = ParamStore::new();
        a.add("bb", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(), ParamGroup::Backbone);
        a.add("tx", Tensor::new(vec![2], vec![0.3, 0.1]).unwrap(), ParamGroup::Text);
        let mut b = a.clone();
        let mut zero = Sgd::new(OptimConfig { lr_backbone: 0.0, ..OptimConfig::default() });
        let mut frozen = Sgd::new(OptimConfig::default());
        for s in 0..4 {
            quadratic_step(&mut a, &mut zero, s, |_| true);
            quadratic_step(&mut b, &mut frozen, s, |g| g != ParamGroup::Backbone);
        }
        assert_eq!(a, b);
    }
}
