//! Channel-first volumetric operations on `[C, H, W, D]` tensors.

use std::ops::Range;

use crate::{Scalar, Tensor, Var};

const K: usize = 3;
const TAPS: usize = K * K * K;
/// Target element count of one im2col slab.
const TILE_ELEMS: usize = 1 << 16;

/// Output spatial extent of a 3×3×3 convolution with padding 1.
pub fn conv_out_dim(n: usize, stride: usize) -> usize {
    (n + 2 - K) / stride + 1
}

fn dims4(shape: &[usize]) -> (usize, [usize; 3]) {
    assert_eq!(shape.len(), 4, "expected [C, H, W, D], got {shape:?}");
    (shape[0], [shape[1], shape[2], shape[3]])
}

/// Output rows `ys` of the patch matrix: `[C·27, |ys|·W'·D']`.
fn im2col<T: Scalar>(x: &[T], c: usize, dims: [usize; 3], stride: usize, out: [usize; 3], ys: Range<usize>) -> Vec<T> {
    let [h, w, d] = dims;
    let [_, ow, od] = out;
    let tile = ys.len() * ow * od;
    let mut cols = vec![T::zero(); c * TAPS * tile];
    for ci in 0..c {
        let plane = &x[ci * h * w * d..(ci + 1) * h * w * d];
        for kh in 0..K {
            for kw in 0..K {
                for kd in 0..K {
                    let row = (ci * TAPS + kh * 9 + kw * 3 + kd) * tile;
                    let dst = &mut cols[row..row + tile];
                    for (ty, y) in ys.clone().enumerate() {
                        let iy = (y * stride + kh) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for xx in 0..ow {
                            let ix = (xx * stride + kw) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = &plane[(iy as usize * w + ix as usize) * d..][..d];
                            let drow = &mut dst[(ty * ow + xx) * od..][..od];
                            if stride == 1 {
                                // z + kd - 1 in range <=> z in [1 - kd, d + 1 - kd)
                                let lo = 1usize.saturating_sub(kd);
                                let hi = (d + 1 - kd).min(od);
                                drow[lo..hi].copy_from_slice(&src[lo + kd - 1..hi + kd - 1]);
                            } else {
                                for (z, o) in drow.iter_mut().enumerate() {
                                    let iz = (z * stride + kd) as isize - 1;
                                    if iz >= 0 && iz < d as isize {
                                        *o = src[iz as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch columns for rows `ys` into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    x: &mut [T],
    c: usize,
    dims: [usize; 3],
    stride: usize,
    out: [usize; 3],
    ys: Range<usize>,
) {
    let [h, w, d] = dims;
    let [_, ow, od] = out;
    let tile = ys.len() * ow * od;
    for ci in 0..c {
        let plane = &mut x[ci * h * w * d..(ci + 1) * h * w * d];
        for kh in 0..K {
            for kw in 0..K {
                for kd in 0..K {
                    let row = (ci * TAPS + kh * 9 + kw * 3 + kd) * tile;
                    let src = &cols[row..row + tile];
                    for (ty, y) in ys.clone().enumerate() {
                        let iy = (y * stride + kh) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for xx in 0..ow {
                            let ix = (xx * stride + kw) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = &mut plane[(iy as usize * w + ix as usize) * d..][..d];
                            let srow = &src[(ty * ow + xx) * od..][..od];
                            for (z, &v) in srow.iter().enumerate() {
                                let iz = (z * stride + kd) as isize - 1;
                                if iz >= 0 && iz < d as isize {
                                    dst[iz as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Splits output rows into slabs whose patch matrix stays cache-sized.
fn slabs(cin: usize, out: [usize; 3]) -> impl Iterator<Item = Range<usize>> {
    let per_row = cin * TAPS * out[1] * out[2];
    let rows = (TILE_ELEMS / per_row.max(1)).clamp(1, out[0]);
    (0..out[0]).step_by(rows).map(move |y0| y0..(y0 + rows).min(out[0]))
}

impl<'g, T: Scalar> Var<'g, T> {
    /// 3×3×3 convolution, zero padding 1. `weight: [Cout, Cin·27]`, `bias: [Cout]`.
    pub fn conv3d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize) -> Var<'g, T> {
        let x = self.value();
        let wv = weight.value();
        let (cin, dims) = dims4(x.shape());
        let cout = wv.rows();
        let kdim = cin * TAPS;
        assert_eq!(wv.cols(), kdim, "conv3d weight {:?} for {cin} input channels", wv.shape());
        let out = [conv_out_dim(dims[0], stride), conv_out_dim(dims[1], stride), conv_out_dim(dims[2], stride)];
        let vout: usize = out.iter().product();
        let plane = out[1] * out[2];
        let mut y = vec![T::zero(); cout * vout];
        for ys in slabs(cin, out) {
            let cols = im2col(x.data(), cin, dims, stride, out, ys.clone());
            let tile = ys.len() * plane;
            T::gemm_strided(
                cout, tile, kdim, T::one(),
                (wv.data(), kdim, 1),
                (&cols, tile, 1),
                T::zero(),
                (&mut y[ys.start * plane..], vout, 1),
            );
        }
        let bshape = bias.map(|b| {
            let bv = b.value();
            assert_eq!(bv.len(), cout, "conv3d bias length");
            for (co, chunk) in y.chunks_mut(vout).enumerate() {
                let bc = bv.data()[co];
                for v in chunk {
                    *v += bc;
                }
            }
            bv.shape().to_vec()
        });
        let value = Tensor::new(&[cout, out[0], out[1], out[2]], y);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.graph().record(&parents, value, move |g| {
            let gd = g.data();
            let mut gw = vec![T::zero(); cout * kdim];
            let mut gx = vec![T::zero(); x.len()];
            for ys in slabs(cin, out) {
                let mut cols = im2col(x.data(), cin, dims, stride, out, ys.clone());
                let tile = ys.len() * plane;
                let gslab = &gd[ys.start * plane..];
                T::gemm_strided(
                    cout, kdim, tile, T::one(),
                    (gslab, vout, 1),
                    (&cols, 1, tile),
                    T::one(),
                    (&mut gw, kdim, 1),
                );
                T::gemm_strided(
                    kdim, tile, cout, T::one(),
                    (wv.data(), 1, kdim),
                    (gslab, vout, 1),
                    T::zero(),
                    (&mut cols, tile, 1),
                );
                col2im_add(&cols, &mut gx, cin, dims, stride, out, ys);
            }
            let mut grads = vec![
                Some(Tensor::new(x.shape(), gx)),
                Some(Tensor::new(&[cout, kdim], gw)),
            ];
            if let Some(bs) = &bshape {
                let gb: Vec<T> = gd.chunks(vout).map(|c| c.iter().copied().sum()).collect();
                grads.push(Some(Tensor::new(bs, gb)));
            }
            grads
        })
    }

    /// Per-channel normalisation over all spatial positions of `[C, ...]`,
    /// followed by a per-channel affine map.
    pub fn instance_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Var<'g, T> {
        let shape = self.shape();
        let c = shape[0];
        let v: usize = shape[1..].iter().product();
        self.reshape(&[c, v])
            .norm_rows_affine_per_row(gamma, beta, eps)
            .reshape(&shape)
    }

    fn norm_rows_affine_per_row(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Var<'g, T> {
        // Row-wise layer norm on [C, V] normalises each channel over V; the
        // affine parameters are per channel, not per column.
        let a = self.value();
        let (c, v) = (a.rows(), a.cols());
        let (gm, bt) = (gamma.value(), beta.value());
        assert_eq!(gm.len(), c, "instance_norm gamma length");
        let gshape = gm.shape().to_vec();
        let vf = T::from_usize(v).unwrap();
        let mut xhat = vec![T::zero(); c * v];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let row = a.row(ch);
            let mean = row.iter().copied().sum::<T>() / vf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / vf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for (o, &x) in xhat[ch * v..(ch + 1) * v].iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
        }
        let out = Tensor::from_fn(&[c, v], |i| xhat[i] * gm.data()[i / v] + bt.data()[i / v]);
        self.graph().record(&[self, gamma, beta], out, move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); c * v];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for ch in 0..c {
                let r = ch * v..(ch + 1) * v;
                let (gr, xr) = (&gd[r.clone()], &xhat[r.clone()]);
                let sg: T = gr.iter().copied().sum();
                let sgx: T = gr.iter().zip(xr).map(|(&g, &x)| g * x).sum();
                gg[ch] = sgx;
                gb[ch] = sg;
                let gamma_c = gm.data()[ch];
                let k = gamma_c * inv_std[ch];
                for ((o, &g), &x) in gx[r].iter_mut().zip(gr).zip(xr) {
                    *o = k * (g - sg / vf - x * sgx / vf);
                }
            }
            vec![
                Some(Tensor::new(&[c, v], gx)),
                Some(Tensor::new(&gshape, gg)),
                Some(Tensor::new(&gshape, gb)),
            ]
        })
    }

    /// Nearest-neighbour ×2 upsampling of `[C, H, W, D]`.
    pub fn upsample2(self) -> Var<'g, T> {
        let x = self.value();
        let (c, [h, w, d]) = dims4(x.shape());
        let (h2, w2, d2) = (2 * h, 2 * w, 2 * d);
        let mut out = vec![T::zero(); c * h2 * w2 * d2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let src = &x.data()[((ch * h + y / 2) * w + xx / 2) * d..][..d];
                    let dst = &mut out[((ch * h2 + y) * w2 + xx) * d2..][..d2];
                    for (z, o) in dst.iter_mut().enumerate() {
                        *o = src[z / 2];
                    }
                }
            }
        }
        self.graph().record(&[self], Tensor::new(&[c, h2, w2, d2], out), move |g| {
            let mut gx = vec![T::zero(); c * h * w * d];
            for ch in 0..c {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let src = &g.data()[((ch * h2 + y) * w2 + xx) * d2..][..d2];
                        let dst = &mut gx[((ch * h + y / 2) * w + xx / 2) * d..][..d];
                        for (z, &v) in src.iter().enumerate() {
                            dst[z / 2] += v;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&[c, h, w, d], gx))]
        })
    }
}
