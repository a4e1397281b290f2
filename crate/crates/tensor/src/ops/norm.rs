//! Normalization primitives.

use crate::array::{numel, Array};
use crate::graph::Var;

impl<'g> Var<'g> {
    /// Zero-mean, unit-variance standardization of every contiguous block of
    /// `block` elements (biased variance, `eps` inside the square root).
    pub fn standardize(self, block: usize, eps: f64) -> Var<'g> {
        let x = self.value();
        assert!(block > 0 && x.len() % block == 0, "standardize block {} vs len {}", block, x.len());
        let shape = x.shape().to_vec();
        let n = block as f64;
        let mut y = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / block);
        for (xs, ys) in x.data().chunks(block).zip(y.chunks_mut(block)) {
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for (yv, xv) in ys.iter_mut().zip(xs) {
                *yv = (xv - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Array::from_vec(&shape, y);
        let yc = value.clone();
        self.graph().op(&[self], value, move |g, _| {
            let mut gx = vec![0.0; yc.len()];
            for (((gs, ys), out), &is) in g
                .data()
                .chunks(block)
                .zip(yc.data().chunks(block))
                .zip(gx.chunks_mut(block))
                .zip(&inv_std)
            {
                let mg = gs.iter().sum::<f64>() / n;
                let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n;
                for ((o, gv), yv) in out.iter_mut().zip(gs).zip(ys) {
                    *o = is * (gv - mg - yv * mgy);
                }
            }
            vec![Some(Array::from_vec(&shape, gx))]
        })
    }

    /// Per-channel `x · gamma + beta` on a channel-second `(B, C, ...)` array.
    pub fn channel_affine(self, gamma: Var<'g>, beta: Var<'g>) -> Var<'g> {
        let (x, ga, be) = (self.value(), gamma.value(), beta.value());
        let shape = x.shape().to_vec();
        let (b, c) = (shape[0], shape[1]);
        assert_eq!(ga.shape(), &[c], "channel_affine gamma shape");
        assert_eq!(be.shape(), &[c], "channel_affine beta shape");
        let inner = numel(&shape[2..]);
        let mut y = x.data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let (s, t) = (ga.data()[ci], be.data()[ci]);
                for v in &mut y[(bi * c + ci) * inner..(bi * c + ci + 1) * inner] {
                    *v = *v * s + t;
                }
            }
        }
        let value = Array::from_vec(&shape, y);
        self.graph().op(&[self, gamma, beta], value, move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut gx = gd.to_vec();
                for bi in 0..b {
                    for ci in 0..c {
                        let s = ga.data()[ci];
                        for v in &mut gx[(bi * c + ci) * inner..(bi * c + ci + 1) * inner] {
                            *v *= s;
                        }
                    }
                }
                Array::from_vec(&shape, gx)
            });
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            if need[1] || need[2] {
                for bi in 0..b {
                    for ci in 0..c {
                        let r = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
                        gg[ci] += gd[r.clone()].iter().zip(&x.data()[r.clone()]).map(|(a, b)| a * b).sum::<f64>();
                        gb[ci] += gd[r].iter().sum::<f64>();
                    }
                }
            }
            vec![
                gx,
                need[1].then(|| Array::from_vec(&[c], gg)),
                need[2].then(|| Array::from_vec(&[c], gb)),
            ]
        })
    }
}
