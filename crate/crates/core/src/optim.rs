//! AdamW with decoupled weight decay.

use std::collections::{BTreeMap, BTreeSet};

use crate::params::{Mat, ModelParams};
use crate::tensor::Gradients;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Biases, norm parameters and embedding-type vectors are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Mat, Mat)>,
    frozen: BTreeSet<String>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// Parameters listed here are never touched by `step`.
    pub fn freeze(&mut self, names: impl IntoIterator<Item = String>) {
        self.frozen.extend(names);
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads.iter() {
            if self.frozen.contains(name) {
                continue;
            }
            let Some(p) = params.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Mat::zeros(g.raw_dim()), Mat::zeros(g.raw_dim())));
            let wd = if decays(name) { c.weight_decay } else { 0.0 };
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    *p -= c.lr * (update + wd * *p);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn quadratic_grads(p: &ModelParams) -> Gradients {
        let mut tape = Tape::with_params(p);
        let x = tape.param("x.weight").unwrap();
        let sq = tape.matmul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap()
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = ModelParams::new();
        p.insert("x.weight", Mat::from_elem((1, 1), 3.0));
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::new(0.0, 0.01));
        let g = quadratic_grads(&p);
        opt.step(&mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(g) (plus decay)
        let mut p = ModelParams::new();
        p.insert("x.weight", Mat::from_elem((1, 1), 3.0));
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0));
        let g = quadratic_grads(&p);
        opt.step(&mut p, &g);
        assert!((p.get("x.weight").unwrap()[[0, 0]] - 2.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_and_skips_bias() {
        let mut p = ModelParams::new();
        p.insert("a.weight", Mat::from_elem((1, 1), 2.0));
        p.insert("a.bias", Mat::from_elem((1, 1), 2.0));
        let mut g = Gradients::default();
        let mut zero = ModelParams::new();
        zero.insert("a.weight", Mat::zeros((1, 1)));
        zero.insert("a.bias", Mat::zeros((1, 1)));
        let mut tape = Tape::with_params(&zero);
        let w = tape.param("a.weight").unwrap();
        let b = tape.param("a.bias").unwrap();
        let s = tape.add(w, b).unwrap();
        let s = tape.scale(s, 0.0);
        let l = tape.sum(s);
        g.accumulate(&tape.backward(l).unwrap(), 1.0);
        let mut opt = AdamW::new(AdamWConfig::new(0.5, 0.1));
        opt.step(&mut p, &g);
        assert!((p.get("a.weight").unwrap()[[0, 0]] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
        assert_eq!(p.get("a.bias").unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut p = ModelParams::new();
        p.insert("x.weight", Mat::from_elem((1, 1), 3.0));
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0));
        opt.freeze(["x.weight".to_string()]);
        let g = quadratic_grads(&p);
        opt.step(&mut p, &g);
        assert_eq!(p.get("x.weight").unwrap()[[0, 0]], 3.0);
    }
}
