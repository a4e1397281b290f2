//! Soft Dice loss, the focal term, and their sum, on `(B, K, spatial...)` class
//! probabilities against flat integer targets of length `B · spatial`.
//!
//! [`loss_from_logits`] fuses softmax and the loss into one graph node with an
//! analytic gradient with respect to the logits.

use std::rc::Rc;

use kgpl_tensor::ops::softmax_array;
use kgpl_tensor::{Array, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid loss config: {0}")]
    BadConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub smooth: f64,
    pub include_background: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 100.0, gamma: 0.2, smooth: 1e-5, include_background: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("smooth", self.smooth)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::BadConfig(format!("{} = {} must be finite and non-negative", name, v)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dice,
    DiceFocal,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Dice => "dice",
            LossKind::DiceFocal => "dice+focal",
        })
    }
}

struct Layout {
    b: usize,
    k: usize,
    s: usize,
}

fn layout(probs: &Array, target: &[usize]) -> Result<Layout, LossError> {
    let shape = probs.shape();
    if shape.len() < 3 {
        return Err(LossError::ShapeMismatch(format!("probabilities {:?} need (B, K, spatial...)", shape)));
    }
    let (b, k) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    if target.len() != b * s {
        return Err(LossError::ShapeMismatch(format!("{} targets for {} voxels", target.len(), b * s)));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= k) {
        return Err(LossError::ShapeMismatch(format!("target class {} with only {} channels", bad, k)));
    }
    Ok(Layout { b, k, s })
}

fn first_class(cfg: &LossConfig, k: usize) -> usize {
    usize::from(!cfg.include_background && k > 1)
}

/// Dice value plus, optionally, its gradient with respect to the probabilities.
fn dice_parts(probs: &Array, target: &[usize], cfg: &LossConfig, want_grad: bool) -> (f64, Option<Array>) {
    let Layout { b, k, s } = layout(probs, target).expect("checked by caller");
    let p = probs.data();
    let c0 = first_class(cfg, k);
    let terms = (b * (k - c0)) as f64;
    let mut loss = 0.0;
    let mut grad = want_grad.then(|| Array::zeros(probs.shape()));
    for bi in 0..b {
        let labels = &target[bi * s..(bi + 1) * s];
        for c in c0..k {
            let row = &p[(bi * k + c) * s..(bi * k + c + 1) * s];
            let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
            for (v, &l) in row.iter().zip(labels) {
                psum += v;
                if l == c {
                    inter += v;
                    gsum += 1.0;
                }
            }
            let num = 2.0 * inter + cfg.smooth;
            let den = psum + gsum + cfg.smooth;
            if den == 0.0 {
                // Class absent from both prediction and target: perfect agreement.
                continue;
            }
            loss += 1.0 - num / den;
            if let Some(g) = grad.as_mut() {
                let out = &mut g.data_mut()[(bi * k + c) * s..(bi * k + c + 1) * s];
                for (o, &l) in out.iter_mut().zip(labels) {
                    let gv = if l == c { 1.0 } else { 0.0 };
                    *o = -(2.0 * gv * den - num) / (den * den) / terms;
                }
            }
        }
    }
    (loss / terms, grad)
}

fn focal_parts(probs: &Array, target: &[usize], cfg: &LossConfig, want_grad: bool) -> (f64, Option<Array>) {
    let Layout { b, k, s } = layout(probs, target).expect("checked by caller");
    let p = probs.data();
    let count = (b * s) as f64;
    let mut loss = 0.0;
    let mut grad = want_grad.then(|| Array::zeros(probs.shape()));
    if cfg.alpha == 0.0 {
        return (0.0, grad);
    }
    for bi in 0..b {
        for si in 0..s {
            let t = target[bi * s + si];
            let idx = (bi * k + t) * s + si;
            let raw = p[idx];
            let pt = raw.clamp(PROB_FLOOR, 1.0);
            let q = 1.0 - pt;
            let nll = -pt.ln();
            loss += cfg.alpha * q.powf(cfg.gamma) * nll;
            if let Some(g) = grad.as_mut() {
                let d = if raw <= PROB_FLOOR || q <= 0.0 {
                    0.0
                } else {
                    let lead = if cfg.gamma == 0.0 { 0.0 } else { -cfg.gamma * q.powf(cfg.gamma - 1.0) * nll };
                    cfg.alpha * (lead - q.powf(cfg.gamma) / pt)
                };
                g.data_mut()[idx] = d / count;
            }
        }
    }
    (loss / count, grad)
}

/// Soft Dice loss averaged over classes and batch.
pub fn dice_loss(probs: &Array, target: &[usize], cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    layout(probs, target)?;
    Ok(dice_parts(probs, target, cfg, false).0)
}

/// Mean over voxels of `alpha · (1 - p_t)^gamma · (-ln p_t)`, with `p_t` clamped to `[1e-7, 1]`.
pub fn focal_term(probs: &Array, target: &[usize], cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    layout(probs, target)?;
    Ok(focal_parts(probs, target, cfg, false).0)
}

pub fn combined_loss(probs: &Array, target: &[usize], cfg: &LossConfig) -> Result<f64, LossError> {
    Ok(dice_loss(probs, target, cfg)? + focal_term(probs, target, cfg)?)
}

pub fn loss_value(kind: LossKind, probs: &Array, target: &[usize], cfg: &LossConfig) -> Result<f64, LossError> {
    match kind {
        LossKind::Dice => dice_loss(probs, target, cfg),
        LossKind::DiceFocal => combined_loss(probs, target, cfg),
    }
}

/// Softmax over the class axis followed by the chosen loss, as one differentiable node.
pub fn loss_from_logits<'g>(
    logits: Var<'g>,
    target: &[usize],
    kind: LossKind,
    cfg: &LossConfig,
) -> Result<Var<'g>, LossError> {
    cfg.validate()?;
    let z = logits.value();
    let probs = softmax_array(&z, 1);
    let Layout { b, k, s } = layout(&probs, target)?;
    let (mut value, dp) = dice_parts(&probs, target, cfg, true);
    let mut dp = dp.expect("gradient requested");
    if kind == LossKind::DiceFocal {
        let (f, fg) = focal_parts(&probs, target, cfg, true);
        value += f;
        dp.add_assign(&fg.expect("gradient requested"));
    }
    // Softmax Jacobian: dz = p * (dp - sum_k p dp).
    let mut dz = Array::zeros(probs.shape());
    {
        let (p, g, out) = (probs.data(), dp.data(), dz.data_mut());
        for bi in 0..b {
            for si in 0..s {
                let dot: f64 = (0..k).map(|c| p[(bi * k + c) * s + si] * g[(bi * k + c) * s + si]).sum();
                for c in 0..k {
                    let i = (bi * k + c) * s + si;
                    out[i] = p[i] * (g[i] - dot);
                }
            }
        }
    }
    let dz = Rc::new(dz);
    Ok(logits.graph().op(&[logits], Array::scalar(value), move |up, _| vec![Some(dz.scale(up.item()))]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use kgpl_tensor::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hard(k: usize, labels: &[usize]) -> Array {
        let s = labels.len();
        let mut a = Array::zeros(&[1, k, s]);
        for (i, &l) in labels.iter().enumerate() {
            a.data_mut()[l * s + i] = 1.0;
        }
        a
    }

    fn exact() -> LossConfig {
        LossConfig { smooth: 0.0, ..LossConfig::default() }
    }

    #[test]
    fn dice_perfect_is_zero() {
        let t = [0, 1, 2, 2, 1, 0];
        assert_eq!(dice_loss(&hard(3, &t), &t, &exact()).unwrap(), 0.0);
    }

    #[test]
    fn dice_disjoint_is_one() {
        let t = [0, 0, 1, 1];
        let p = hard(2, &[1, 1, 0, 0]);
        assert_eq!(dice_loss(&p, &t, &exact()).unwrap(), 1.0);
    }

    #[test]
    fn dice_half_overlap() {
        let t = [0, 0, 1, 1, 1, 1, 0, 0];
        let p = hard(2, &[1, 1, 1, 1, 0, 0, 0, 0]);
        let fg_only = LossConfig { include_background: false, ..exact() };
        assert!((dice_loss(&p, &t, &fg_only).unwrap() - 0.5).abs() < 1e-12);
        assert!((dice_loss(&p, &t, &exact()).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn focal_examples() {
        let t = [1, 0, 2];
        assert_eq!(focal_term(&hard(3, &t), &t, &exact()).unwrap(), 0.0);

        let p = Array::from_vec(&[1, 2, 1], vec![0.5, 0.5]);
        let v = focal_term(&p, &[0], &exact()).unwrap();
        // 100 * 0.5^0.2 * ln 2, evaluated independently.
        assert!((v - 60.341_966_848_358_06).abs() < 1e-9, "{}", v);

        let zero_alpha = LossConfig { alpha: 0.0, ..exact() };
        let p = Array::from_vec(&[1, 2, 2], vec![0.1, 0.7, 0.9, 0.3]);
        assert_eq!(focal_term(&p, &[0, 1], &zero_alpha).unwrap(), 0.0);
        assert_eq!(
            combined_loss(&p, &[0, 1], &zero_alpha).unwrap(),
            dice_loss(&p, &[0, 1], &zero_alpha).unwrap()
        );
    }

    #[test]
    fn focal_clamps_zero_probability() {
        let p = Array::from_vec(&[1, 2, 1], vec![0.0, 1.0]);
        let v = focal_term(&p, &[0], &exact()).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn combined_is_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Array::from_vec(&[2, 3, 5], (0..30).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let p = softmax_array(&z, 1);
        let t: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let cfg = LossConfig::default();
        let sum = dice_loss(&p, &t, &cfg).unwrap() + focal_term(&p, &t, &cfg).unwrap();
        assert!((combined_loss(&p, &t, &cfg).unwrap() - sum).abs() < 1e-12);
        assert_eq!(combined_loss(&hard(3, &[0, 1, 2]), &[0, 1, 2], &exact()).unwrap(), 0.0);
    }

    #[test]
    fn shape_and_config_errors() {
        let p = hard(2, &[0, 1]);
        assert!(matches!(dice_loss(&p, &[0], &exact()), Err(LossError::ShapeMismatch(_))));
        assert!(matches!(dice_loss(&p, &[0, 2], &exact()), Err(LossError::ShapeMismatch(_))));
        let bad = LossConfig { gamma: -1.0, ..exact() };
        assert!(matches!(focal_term(&p, &[0, 1], &bad), Err(LossError::BadConfig(_))));
    }

    #[test]
    fn fused_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 3 * 64;
        let z0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let t: Vec<usize> = (0..64).map(|_| rng.gen_range(0..3)).collect();
        let cfg = LossConfig::default();
        for kind in [LossKind::Dice, LossKind::DiceFocal] {
            let g = Graph::new();
            let x = g.input(Array::from_vec(&[1, 3, 4, 4, 4], z0.clone()));
            let l = loss_from_logits(x, &t, kind, &cfg).unwrap();
            let grads = g.backward(l);
            let analytic = grads.wrt(x).unwrap();
            let f = |z: &[f64]| {
                let p = softmax_array(&Array::from_vec(&[1, 3, 4, 4, 4], z.to_vec()), 1);
                loss_value(kind, &p, &t, &cfg).unwrap()
            };
            let h = 1e-3;
            for i in 0..n {
                let mut zp = z0.clone();
                let mut zm = z0.clone();
                zp[i] += h;
                zm[i] -= h;
                let fd = (f(&zp) - f(&zm)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - fd).abs() / fd.abs().max(a.abs()).max(1e-8);
                assert!(rel < 1e-4 || (a - fd).abs() < 1e-9, "{:?} coord {}: {} vs {}", kind, i, a, fd);
            }
        }
    }

    #[test]
    fn dice_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Array::from_vec(&[1, 3, 6], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let p = softmax_array(&z, 1);
        let t = [0, 1, 2, 2, 0, 1];
        let perm = [2, 0, 1];
        let mut q = Array::zeros(&[1, 3, 6]);
        for c in 0..3 {
            for s in 0..6 {
                q.data_mut()[perm[c] * 6 + s] = p.data()[c * 6 + s];
            }
        }
        let tp: Vec<usize> = t.iter().map(|&c| perm[c]).collect();
        let cfg = LossConfig::default();
        let (a, b) = (dice_loss(&p, &t, &cfg).unwrap(), dice_loss(&q, &tp, &cfg).unwrap());
        assert!((a - b).abs() < 1e-12);
    }
}
