use std::collections::BTreeMap;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::training::{OptimizerKind, TrainConfig};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state: per-parameter moment buffers and the step counter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    momentum: f64,
    t: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            weight_decay: cfg.weight_decay,
            momentum: cfg.momentum,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every trainable parameter that holds a gradient, then clears
    /// all gradients. With `strict`, a gradient on a frozen parameter is a
    /// freeze violation and nothing is updated.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, strict: bool) -> Result<()> {
        if strict {
            if let Some((name, _)) = store.iter().find(|(_, p)| p.frozen && p.grad.is_some()) {
                return Err(Error::Freeze(format!("frozen parameter `{name}` carries a gradient")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        for (name, p) in store.iter_mut() {
            let Some(grad) = p.grad.take() else { continue };
            if p.frozen {
                continue;
            }
            let w = p.value.data_mut();
            let g = grad.data();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let buf = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    for ((w, &g), b) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
                        let g = g + self.weight_decay * *w;
                        *b = self.momentum * *b + g;
                        *w -= lr * *b;
                    }
                }
                OptimizerKind::AdamW => {
                    let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
                    for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *w -= lr * self.weight_decay * *w;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        store.zero_grad();
        Ok(())
    }
}
