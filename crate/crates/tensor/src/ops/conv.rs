//! 3D convolutions over `(B, C, D, H, W)` arrays.

use crate::array::Array;
use crate::graph::Var;
use crate::ops::linalg::gemm;

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    dims: [usize; 3],
    k: usize,
    pad: usize,
    out: [usize; 3],
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.out.iter().product()
    }

    fn in_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Output-plane slabs sized so one column buffer stays cache resident.
    fn slabs(&self) -> Vec<(usize, usize)> {
        const TARGET: usize = 1 << 18;
        let plane = self.out[1] * self.out[2];
        let per = (TARGET / (self.rows() * plane).max(1)).max(1);
        (0..self.out[0]).step_by(per).map(|z| (z, (z + per).min(self.out[0]))).collect()
    }
}

/// Output positions `lo..hi` (of `out` total) whose input index `x + shift` lies in `0..len`.
fn valid_range(out: usize, len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).clamp(0, out as isize) as usize;
    let hi = (len as isize - shift).clamp(lo as isize, out as isize) as usize;
    (lo, hi)
}

/// Unfolds output planes `z0..z1` of one batch element into `(C·k³, voxels)` columns.
fn im2col(x: &[f64], geo: &Geometry, (z0, z1): (usize, usize), cols: &mut [f64]) {
    let [d, h, w] = geo.dims;
    let [_, oh, ow] = geo.out;
    let (k, p) = (geo.k as isize, geo.pad as isize);
    let so = (z1 - z0) * oh * ow;
    let mut row = 0;
    for c in 0..geo.c_in {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut cols[row * so..(row + 1) * so];
                    row += 1;
                    for z in 0..z1 - z0 {
                        let iz = (z + z0) as isize + kd - p;
                        for y in 0..oh {
                            let iy = y as isize + kh - p;
                            let line = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                line.fill(0.0);
                                continue;
                            }
                            let src = &xc[(iz as usize * h + iy as usize) * w..][..w];
                            let (lo, hi) = valid_range(ow, w, kw - p);
                            line[..lo].fill(0.0);
                            line[hi..].fill(0.0);
                            if lo < hi {
                                let s0 = (lo as isize + kw - p) as usize;
                                line[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the input grid (accumulating).
fn col2im(cols: &[f64], geo: &Geometry, (z0, z1): (usize, usize), x: &mut [f64]) {
    let [d, h, w] = geo.dims;
    let [_, oh, ow] = geo.out;
    let (k, p) = (geo.k as isize, geo.pad as isize);
    let so = (z1 - z0) * oh * ow;
    let mut row = 0;
    for c in 0..geo.c_in {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &cols[row * so..(row + 1) * so];
                    row += 1;
                    for z in 0..z1 - z0 {
                        let iz = (z + z0) as isize + kd - p;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = y as isize + kh - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let line = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            let dst = &mut xc[(iz as usize * h + iy as usize) * w..][..w];
                            let (lo, hi) = valid_range(ow, w, kw - p);
                            if lo < hi {
                                let s0 = (lo as isize + kw - p) as usize;
                                for (d, v) in dst[s0..s0 + hi - lo].iter_mut().zip(&line[lo..hi]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    /// Stride-1 3D convolution with zero padding. `weight` is `(C_out, C_in, k, k, k)`,
    /// `bias` is `(C_out)`.
    pub fn conv3d(self, weight: Var<'g>, bias: Option<Var<'g>>, padding: usize) -> Var<'g> {
        let (x, w) = (self.value(), weight.value());
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        assert_eq!(xs.len(), 5, "conv3d input must be (B, C, D, H, W), got {:?}", xs);
        assert_eq!(ws.len(), 5, "conv3d weight must be rank 5");
        assert_eq!(ws[1], xs[1], "conv3d channel mismatch {:?} vs {:?}", xs, ws);
        let k = ws[2];
        assert!(ws[3] == k && ws[4] == k, "conv3d kernel must be cubic");
        let (batch, c_out) = (xs[0], ws[0]);
        let dims = [xs[2], xs[3], xs[4]];
        let out = dims.map(|n| {
            assert!(n + 2 * padding >= k, "conv3d kernel larger than padded input");
            n + 2 * padding - k + 1
        });
        let geo = Geometry { c_in: xs[1], dims, k, pad: padding, out };
        let (rows, so, si) = (geo.rows(), geo.out_len(), geo.in_len());
        let bval = bias.map(|b| b.value());
        let mut y = vec![0.0; batch * c_out * so];
        let slabs = geo.slabs();
        let plane = out[1] * out[2];
        let mut cols = vec![0.0; rows * (slabs[0].1 - slabs[0].0) * plane];
        for b in 0..batch {
            let xb = &x.data()[b * geo.c_in * si..(b + 1) * geo.c_in * si];
            let yb = &mut y[b * c_out * so..(b + 1) * c_out * so];
            for &(z0, z1) in &slabs {
                let n = (z1 - z0) * plane;
                im2col(xb, &geo, (z0, z1), &mut cols[..rows * n]);
                gemm(c_out, rows, n, 1.0, w.data(), (rows, 1), &cols, (n, 1), 0.0, &mut yb[z0 * plane..], (so, 1));
            }
            if let Some(bv) = &bval {
                for (co, chunk) in yb.chunks_mut(so).enumerate() {
                    let v = bv.data()[co];
                    chunk.iter_mut().for_each(|e| *e += v);
                }
            }
        }
        let value = Array::from_vec(&[batch, c_out, out[0], out[1], out[2]], y);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph().op(&parents, value, move |g, need| {
            let gd = g.data();
            let mut gx = need[0].then(|| vec![0.0; x.len()]);
            let mut gw = need[1].then(|| vec![0.0; w.len()]);
            let mut cols = vec![0.0; rows * (slabs[0].1 - slabs[0].0) * plane];
            for b in 0..batch {
                let gb = &gd[b * c_out * so..(b + 1) * c_out * so];
                let xb = &x.data()[b * geo.c_in * si..(b + 1) * geo.c_in * si];
                for &(z0, z1) in &slabs {
                    let n = (z1 - z0) * plane;
                    let gslab = &gb[z0 * plane..];
                    if let Some(gw) = gw.as_mut() {
                        im2col(xb, &geo, (z0, z1), &mut cols[..rows * n]);
                        // dW += dY · colsᵀ
                        gemm(c_out, n, rows, 1.0, gslab, (so, 1), &cols, (1, n), 1.0, gw, (rows, 1));
                    }
                    if let Some(gx) = gx.as_mut() {
                        // dcols = Wᵀ · dY
                        gemm(rows, c_out, n, 1.0, w.data(), (1, rows), gslab, (so, 1), 0.0, &mut cols[..rows * n], (n, 1));
                        col2im(&cols[..rows * n], &geo, (z0, z1), &mut gx[b * geo.c_in * si..(b + 1) * geo.c_in * si]);
                    }
                }
            }
            let mut res = vec![gx.map(|v| Array::from_vec(&xs, v)), gw.map(|v| Array::from_vec(&ws, v))];
            if need.len() == 3 {
                res.push(need[2].then(|| {
                    let mut gbias = vec![0.0; c_out];
                    for b in 0..batch {
                        for (co, acc) in gbias.iter_mut().enumerate() {
                            *acc += gd[(b * c_out + co) * so..(b * c_out + co + 1) * so].iter().sum::<f64>();
                        }
                    }
                    Array::from_vec(&[c_out], gbias)
                }));
            }
            res
        })
    }

    /// Non-overlapping patch convolution (kernel = stride = `p`) expressed as a
    /// linear map over flattened patches. `weight` is `(C_out, C_in·p³)`.
    pub fn patch_conv3d(self, weight: Var<'g>, bias: Option<Var<'g>>, p: usize) -> Var<'g> {
        let s = self.shape();
        assert_eq!(s.len(), 5, "patch_conv3d input must be rank 5");
        let (b, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        assert!(d % p == 0 && h % p == 0 && w % p == 0, "patch size {} does not divide {:?}", p, &s[2..]);
        let (gd, gh, gw) = (d / p, h / p, w / p);
        let c_out = weight.shape()[0];
        self.reshape(&[b, c, gd, p, gh, p, gw, p])
            .permute(&[0, 2, 4, 6, 1, 3, 5, 7])
            .reshape(&[b, gd * gh * gw, c * p * p * p])
            .linear(weight, bias)
            .permute(&[0, 2, 1])
            .reshape(&[b, c_out, gd, gh, gw])
    }

    /// Transposed patch convolution (kernel = stride = `p`): every input voxel is
    /// expanded into a `p³` output block. `weight` is `(C_out·p³, C_in)`,
    /// `bias` is `(C_out)`.
    pub fn patch_conv_transpose3d(self, weight: Var<'g>, bias: Option<Var<'g>>, p: usize) -> Var<'g> {
        let s = self.shape();
        assert_eq!(s.len(), 5, "patch_conv_transpose3d input must be rank 5");
        let (b, _c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let rows = weight.shape()[0];
        assert_eq!(rows % (p * p * p), 0, "transposed weight rows must be C_out·p³");
        let c_out = rows / (p * p * p);
        let y = self
            .permute(&[0, 2, 3, 4, 1])
            .linear(weight, None)
            .reshape(&[b, d, h, w, c_out, p, p, p])
            .permute(&[0, 4, 1, 5, 2, 6, 3, 7])
            .reshape(&[b, c_out, d * p, h * p, w * p]);
        match bias {
            Some(bias) => y.add(bias.reshape(&[c_out, 1, 1, 1])),
            None => y,
        }
    }
}
