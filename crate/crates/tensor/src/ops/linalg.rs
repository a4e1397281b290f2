//! Matrix products.

use crate::array::{numel, Array};
use crate::graph::Var;

/// `C = alpha * A·B + beta * C` with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs + 1;
    if k > 0 {
        assert!(a.len() >= span(m, k, rsa, csa), "gemm: A too small");
        assert!(b.len() >= span(k, n, rsb, csb), "gemm: B too small");
    }
    assert!(c.len() >= span(m, n, rsc, csc), "gemm: C too small");
    // SAFETY: extents checked above; slices do not alias (`c` is a unique borrow).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl<'g> Var<'g> {
    /// Batched matrix product `(..., M, K) x (..., K, N)`. A rank-2 right operand
    /// is shared across the batch.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", sa, sb);
        let batch = numel(&sa[..sa.len() - 2]);
        let shared = sb.len() == 2;
        if !shared {
            assert_eq!(&sa[..sa.len() - 2], &sb[..sb.len() - 2], "matmul batch dims");
        }
        let bstride = if shared { 0 } else { k * n };
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut c = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                1.0,
                &a.data()[i * m * k..],
                (k, 1),
                &b.data()[i * bstride..],
                (n, 1),
                0.0,
                &mut c[i * m * n..],
                (n, 1),
            );
        }
        let value = Array::from_vec(&out_shape, c);
        self.graph().op(&[self, other], value, move |g, need| {
            let gd = g.data();
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; batch * m * k];
                for i in 0..batch {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, 1.0, &gd[i * m * n..], (n, 1), &b.data()[i * bstride..], (1, n), 0.0, &mut ga[i * m * k..], (k, 1));
                }
                Array::from_vec(&sa, ga)
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; if shared { k * n } else { batch * k * n }];
                for i in 0..batch {
                    // dB = Aᵀ · dC
                    let beta = if shared && i > 0 { 1.0 } else { 0.0 };
                    gemm(k, m, n, 1.0, &a.data()[i * m * k..], (1, k), &gd[i * m * n..], (n, 1), beta, &mut gb[i * bstride..], (n, 1));
                }
                Array::from_vec(&sb, gb)
            });
            vec![ga, gb]
        })
    }

    /// Affine map on the last axis: `x · Wᵀ + b` with `W` shaped `(out, in)`.
    pub fn linear(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Var<'g> {
        let (x, w) = (self.value(), weight.value());
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be rank 2");
        let (out_f, in_f) = (ws[0], ws[1]);
        assert_eq!(*xs.last().expect("linear on scalar"), in_f, "linear: input features {:?} vs weight {:?}", xs, ws);
        let rows = x.len() / in_f;
        let mut y = vec![0.0; rows * out_f];
        gemm(rows, in_f, out_f, 1.0, x.data(), (in_f, 1), w.data(), (1, in_f), 0.0, &mut y, (out_f, 1));
        let bval = bias.map(|b| b.value());
        if let Some(b) = &bval {
            assert_eq!(b.shape(), &[out_f], "linear bias shape");
            for row in y.chunks_mut(out_f) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = out_f;
        let value = Array::from_vec(&out_shape, y);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph().op(&parents, value, move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut gx = vec![0.0; rows * in_f];
                gemm(rows, out_f, in_f, 1.0, gd, (out_f, 1), w.data(), (in_f, 1), 0.0, &mut gx, (in_f, 1));
                Array::from_vec(&xs, gx)
            });
            let gw = need[1].then(|| {
                let mut gw = vec![0.0; out_f * in_f];
                gemm(out_f, rows, in_f, 1.0, gd, (1, out_f), x.data(), (in_f, 1), 0.0, &mut gw, (in_f, 1));
                Array::from_vec(&ws, gw)
            });
            let mut res = vec![gx, gw];
            if need.len() == 3 {
                res.push(need[2].then(|| {
                    let mut gb = vec![0.0; out_f];
                    for row in gd.chunks(out_f) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Array::from_vec(&[out_f], gb)
                }));
            }
            res
        })
    }
}
