//! Reshapes, permutations, concatenation, slicing, and reductions.

use crate::array::{numel, strides, Array};
use crate::graph::Var;

/// `(outer, axis, inner)` sizes of a contiguous array around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub(crate) fn permute_array(x: &Array, axes: &[usize]) -> Array {
    let nd = x.ndim();
    assert_eq!(axes.len(), nd, "permute rank mismatch");
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Array::zeros(&out_shape);
    let total = out.len();
    if total == 0 {
        return out;
    }
    if nd == 0 {
        out.data_mut()[0] = x.data()[0];
        return out;
    }
    let xd = x.data();
    let od = out.data_mut();
    let last = out_shape[nd - 1];
    let ls = src_strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    let mut o = 0usize;
    while o < total {
        for j in 0..last {
            od[o + j] = xd[src + j * ls];
        }
        o += last;
        let mut ax = nd - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl<'g> Var<'g> {
    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let value = (*x).clone().reshape(shape);
        self.graph().op(&[self], value, move |g, _| vec![Some(g.clone().reshape(&old))])
    }

    pub fn permute(self, axes: &[usize]) -> Var<'g> {
        let value = permute_array(&self.value(), axes);
        let inv = inverse_permutation(axes);
        self.graph().op(&[self], value, move |g, _| vec![Some(permute_array(g, &inv))])
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Var<'g> {
        let mut axes: Vec<usize> = (0..self.shape().len()).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Contiguous slice `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow {}..{} out of axis size {}", start, start + len, shape[axis]);
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let value = Array::from_vec(&out_shape, out);
        self.graph().op(&[self], value, move |g, _| {
            let mut gx = Array::zeros(&shape);
            let gd = g.data();
            let xd = gx.data_mut();
            for o in 0..outer {
                let base = (o * n + start) * inner;
                xd[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Circular shift by `shift` positions along `axis` (positive moves toward higher indices).
    pub fn roll(self, axis: usize, shift: isize) -> Var<'g> {
        let n = self.shape()[axis] as isize;
        let s = shift.rem_euclid(n) as usize;
        if s == 0 {
            return self;
        }
        let n = n as usize;
        let tail = self.narrow(axis, n - s, s);
        let head = self.narrow(axis, 0, n - s);
        Var::concat(&[tail, head], axis)
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        for v in &values {
            assert_eq!(v.ndim(), first.len(), "concat rank mismatch");
            for (i, (&a, &b)) in v.shape().iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch {:?} vs {:?}", v.shape(), first);
            }
        }
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in values.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let value = Array::from_vec(&out_shape, out);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        parts[0].graph().op(parts, value, move |g, need| {
            let gd = g.data();
            let mut offset = 0;
            let mut res = Vec::with_capacity(sizes.len());
            for (k, &s) in sizes.iter().enumerate() {
                if need[k] {
                    let mut buf = Vec::with_capacity(outer * s * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        buf.extend_from_slice(&gd[base..base + s * inner]);
                    }
                    res.push(Some(Array::from_vec(&shapes[k], buf)));
                } else {
                    res.push(None);
                }
                offset += s;
            }
            res
        })
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = Array::scalar(x.sum());
        self.graph().op(&[self], value, move |g, _| vec![Some(Array::full(&shape, g.item()))])
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`; the axis is kept with size 1.
    pub fn sum_axis(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut out = vec![0.0; outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for k in 0..n {
                let row = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let value = Array::from_vec(&out_shape, out);
        self.graph().op(&[self], value, move |g, _| {
            let mut gx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    gx.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Array::from_vec(&shape, gx))]
        })
    }

    /// Mean over `axis`; the axis is kept with size 1.
    pub fn mean_axis(self, axis: usize) -> Var<'g> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let y = softmax_array(&x, axis);
        let yc = y.clone();
        let shape = x.shape().to_vec();
        self.graph().op(&[self], y, move |g, _| {
            let (outer, n, inner) = split_at_axis(&shape, axis);
            let (yd, gd) = (yc.data(), g.data());
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| yd[at(k)] * gd[at(k)]).sum();
                    for k in 0..n {
                        gx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(Array::from_vec(&shape, gx))]
        })
    }
}

/// Softmax of a plain array along `axis`.
pub fn softmax_array(x: &Array, axis: usize) -> Array {
    let shape = x.shape();
    let (outer, n, inner) = split_at_axis(shape, axis);
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..n {
                let e = (xd[at(k)] - m).exp();
                y[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                y[at(k)] /= z;
            }
        }
    }
    Array::from_vec(shape, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn arange(shape: &[usize]) -> Array {
        Array::from_vec(shape, (0..numel(shape)).map(|v| v as f64).collect())
    }

    #[test]
    fn permute_matches_index_definition() {
        let x = arange(&[2, 3, 4]);
        let y = permute_array(&x, &[2, 0, 1]);
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.at(&[c, a, b]), x.at(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let g = Graph::new();
        let x = g.input(arange(&[2, 5, 3]));
        let a = x.narrow(1, 0, 2);
        let b = x.narrow(1, 2, 3);
        let y = Var::concat(&[a, b], 1);
        assert!(y.value().bit_eq(&x.value()));
    }

    #[test]
    fn roll_is_circular() {
        let g = Graph::new();
        let x = g.constant(arange(&[5]));
        assert_eq!(x.roll(0, 2).value().data(), &[3., 4., 0., 1., 2.]);
        assert_eq!(x.roll(0, -1).value().data(), &[1., 2., 3., 4., 0.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = arange(&[2, 3, 2]);
        let y = softmax_array(&x, 1);
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|k| y.at(&[o, k, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_axis_keeps_dim() {
        let g = Graph::new();
        let x = g.constant(arange(&[2, 4]));
        let m = x.mean_axis(1).value();
        assert_eq!(m.shape(), &[2, 1]);
        assert_eq!(m.data(), &[1.5, 5.5]);
    }
}
