use std::collections::BTreeMap;
use std::f64::consts::PI;

use kgpl_tensor::{Array, Gradients, ParamStore};

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    (0.5 * base_lr * (1.0 + (PI * progress).cos())).max(0.0)
}

/// Adam with decoupled weight decay. Moments are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub moments: BTreeMap<String, (Array, Array)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: BTreeMap::new() }
    }

    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let mut ids: Vec<_> = grads.param_ids().collect();
        ids.sort();
        for id in ids {
            let g = grads.param(id).expect("listed id");
            let name = store.name(id).to_string();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Array::zeros(g.shape()), Array::zeros(g.shape())));
            let p = store.get_mut(id);
            let decay = 1.0 - lr * self.weight_decay;
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] = pd[i] * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use kgpl_tensor::Graph;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 100, 10, 1e-4), 0.0);
        assert_eq!(lr_at(10, 100, 10, 1e-4), 1e-4);
        assert!(lr_at(100, 100, 10, 1e-4).abs() < 1e-12);
        // continuous across the boundary
        assert!((lr_at(9, 100, 10, 1e-4) - lr_at(10, 100, 10, 1e-4)).abs() <= 1e-5 + 1e-12);
        assert_eq!(lr_at(0, 10, 0, 1e-3), 1e-3);
        for s in 0..=100 {
            assert!(lr_at(s, 100, 10, 1e-4) >= 0.0);
        }
    }

    #[test]
    fn single_step_by_hand() {
        // Two parameters, loss = 0.5 * (3 w0 + w1)^2 at w = (1, -2): gradient (3, 1).
        let mut store = ParamStore::new();
        let id = store.add("w", Array::from_vec(&[2], vec![1.0, -2.0]));
        let g = Graph::new();
        let w = g.param(&store, id);
        let c = g.constant(Array::from_vec(&[2], vec![3.0, 1.0]));
        let s = w.mul(c).sum();
        let loss = s.mul(s).scale(0.5);
        let grads = g.backward(loss);
        assert_eq!(grads.param(id).unwrap().data(), &[3.0, 1.0]);
        let mut opt = AdamW::new(0.01);
        opt.update(&mut store, &grads, 0.1);
        // m = 0.1 g, v = 0.001 g^2; mhat = g, vhat = g^2; step = lr * g / (|g| + eps)
        // w0: 1 * (1 - 0.001) - 0.1 * 3 / (3 + 1e-8)
        // w1: -2 * (1 - 0.001) - 0.1 * 1 / (1 + 1e-8)
        let w0 = 0.999 - 0.1 * 3.0 / (3.0 + 1e-8);
        let w1 = -1.998 - 0.1 / (1.0 + 1e-8);
        let got = store.get(id).data();
        assert!((got[0] - w0).abs() < 1e-15, "{} vs {}", got[0], w0);
        assert!((got[1] - w1).abs() < 1e-15, "{} vs {}", got[1], w1);
        let (m, v) = &opt.moments["w"];
        assert!((m.data()[0] - 0.3).abs() < 1e-15 && (v.data()[1] - 0.001).abs() < 1e-15);
    }
}
