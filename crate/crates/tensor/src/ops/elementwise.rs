//! Elementwise arithmetic with NumPy-style broadcasting, and activations.

use crate::array::{numel, Array};
use crate::graph::Var;

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {:?} and {:?} do not broadcast", a, b),
        };
    }
    out
}

/// Strides of `shape` laid out against `out`, with 0 on broadcast axes.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let own = crate::array::strides(shape);
    (0..out.len())
        .map(|i| if i < off || shape[i - off] == 1 { 0 } else { own[i - off] })
        .collect()
}

/// Visits every output position with the matching offsets into `a` and `b`.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let nd = out.len();
    let last = out[nd - 1];
    let (la, lb) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..last {
            f(o + j, oa + j * la, ob + j * lb);
        }
        o += last;
        // carry into the leading axes
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `g` (shaped `out`) down to `target` under broadcasting.
fn reduce_to(g: &Array, target: &[usize]) -> Array {
    if g.shape() == target {
        return g.clone();
    }
    let out = g.shape().to_vec();
    let st = bcast_strides(target, &out);
    let zero = vec![0; out.len()];
    let mut acc = Array::zeros(target);
    let gd = g.data();
    let ad = acc.data_mut();
    for_each_bcast(&out, &st, &zero, |o, t, _| ad[t] += gd[o]);
    acc
}

fn binary(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shapes(a.shape(), b.shape());
    let sa = bcast_strides(a.shape(), &out);
    let sb = bcast_strides(b.shape(), &out);
    let mut r = Array::zeros(&out);
    let (ad, bd) = (a.data(), b.data());
    let rd = r.data_mut();
    for_each_bcast(&out, &sa, &sb, |o, i, j| rd[o] = f(ad[i], bd[j]));
    r
}

impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let value = binary(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph().op(&[self, other], value, move |g, need| {
            vec![
                need[0].then(|| reduce_to(g, &sa)),
                need[1].then(|| reduce_to(g, &sb)),
            ]
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let value = binary(&a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph().op(&[self, other], value, move |g, need| {
            vec![
                need[0].then(|| reduce_to(g, &sa)),
                need[1].then(|| reduce_to(&g.scale(-1.0), &sb)),
            ]
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let value = binary(&a, &b, |x, y| x * y);
        self.graph().op(&[self, other], value, move |g, need| {
            vec![
                need[0].then(|| reduce_to(&binary(g, &b, |x, y| x * y), a.shape())),
                need[1].then(|| reduce_to(&binary(g, &a, |x, y| x * y), b.shape())),
            ]
        })
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let value = self.value().scale(s);
        self.graph().op(&[self], value, move |g, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let value = self.value().map(|v| v + s);
        self.graph().op(&[self], value, |g, _| vec![Some(g.clone())])
    }

    pub fn relu(self) -> Var<'g> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        let x = self.value();
        let value = x.map(|v| if v > 0.0 { v } else { slope * v });
        self.graph().op(&[self], value, move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { slope * gv }))]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let x = self.value();
        let value = x.map(|v| 0.5 * v * (1.0 + (C * (v + 0.044715 * v * v * v)).tanh()));
        self.graph().op(&[self], value, move |g, _| {
            vec![Some(g.zip_map(&x, |gv, v| {
                let u = C * (v + 0.044715 * v * v * v);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * v * v);
                gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
            }))]
        })
    }

    pub fn tanh(self) -> Var<'g> {
        let y = self.value().map(f64::tanh);
        let yc = y.clone();
        self.graph().op(&[self], y, move |g, _| vec![Some(g.zip_map(&yc, |gv, t| gv * (1.0 - t * t)))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[2, 3, 4], &[4]), vec![2, 3, 4]);
        assert_eq!(broadcast_shapes(&[2, 1, 4], &[1, 3, 1]), vec![2, 3, 4]);
        assert_eq!(broadcast_shapes(&[], &[3]), vec![3]);
    }

    #[test]
    #[should_panic]
    fn incompatible_broadcast_panics() {
        broadcast_shapes(&[2, 3], &[4]);
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let g = Graph::new();
        let a = g.input(Array::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let b = g.input(Array::from_vec(&[3], vec![10., 20., 30.]));
        let c = a.add(b);
        assert_eq!(c.value().data(), &[11., 22., 33., 14., 25., 36.]);
        let s = c.mul(c).sum();
        let grads = g.backward(s);
        // d/db sum (a+b)^2 = sum over rows of 2(a+b)
        assert_eq!(grads.wrt(b).unwrap().data(), &[2. * (11. + 14.), 2. * (22. + 25.), 2. * (33. + 36.)]);
    }

    #[test]
    fn middle_axis_broadcast() {
        let g = Graph::new();
        let a = g.constant(Array::from_vec(&[2, 1, 2], vec![1., 2., 3., 4.]));
        let b = g.constant(Array::from_vec(&[1, 3, 1], vec![10., 20., 30.]));
        let c = a.mul(b).value();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.data(), &[10., 20., 20., 40., 30., 60., 30., 40., 60., 80., 90., 120.]);
    }
}
