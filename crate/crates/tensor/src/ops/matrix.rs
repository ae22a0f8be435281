use std::rc::Rc;

use crate::{Scalar, Tensor, Var};

fn gemm_new<T: Scalar>(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[T], b: &[T]) -> Tensor<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(ta, tb, m, n, k, T::one(), a, b, T::zero(), &mut out);
    Tensor::new(&[m, n], out)
}

impl<'g, T: Scalar> Var<'g, T> {
    /// `[m, k] · [k, n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        assert_eq!(k, b.rows(), "matmul {:?} x {:?}", a.shape(), b.shape());
        let out = gemm_new(false, false, m, n, k, a.data(), b.data());
        self.graph().record(&[self, other], out, move |g| {
            let ga = gemm_new(false, true, m, k, n, g.data(), b.data());
            let gb = gemm_new(true, false, k, n, m, a.data(), g.data());
            vec![Some(ga), Some(gb)]
        })
    }

    /// `[m, k] · [n, k]ᵀ`.
    pub fn matmul_nt(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        assert_eq!(k, b.cols(), "matmul_nt {:?} x {:?}ᵀ", a.shape(), b.shape());
        let out = gemm_new(false, true, m, n, k, a.data(), b.data());
        self.graph().record(&[self, other], out, move |g| {
            let ga = gemm_new(false, false, m, k, n, g.data(), b.data());
            let gb = gemm_new(true, false, n, k, m, g.data(), a.data());
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn transpose(self) -> Var<'g, T> {
        let out = self.value().transpose();
        self.graph().record(&[self], out, |g| vec![Some(g.transpose())])
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let old = self.shape();
        let out = (*self.value()).clone().reshape(shape);
        self.graph().record(&[self], out, move |g| vec![Some(g.clone().reshape(&old))])
    }

    /// Adds a `[n]` vector to every row of a `[m, n]` matrix.
    pub fn add_row(self, bias: Var<'g, T>) -> Var<'g, T> {
        let a = self.value();
        let b = bias.value();
        let n = a.cols();
        assert_eq!(b.len(), n, "add_row bias {:?} vs {:?}", b.shape(), a.shape());
        let bshape = b.shape().to_vec();
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.graph().record(&[self, bias], out, move |g| {
            let mut gb = vec![T::zero(); n];
            for row in g.data().chunks(n) {
                for (s, &x) in gb.iter_mut().zip(row) {
                    *s += x;
                }
            }
            vec![Some(g.clone()), Some(Tensor::new(&bshape, gb))]
        })
    }

    /// `x · w + b` with `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Var<'g, T> {
        let y = self.matmul(w);
        match b {
            Some(b) => y.add_row(b),
            None => y,
        }
    }

    /// Row-wise softmax. Masked entries get probability zero; a row with every
    /// column masked yields all zeros. The mask is either one flag per column,
    /// shared by all rows, or one flag per element.
    pub fn softmax_rows_masked(self, mask: Option<&[bool]>) -> Var<'g, T> {
        let a = self.value();
        let (m, n) = (a.rows(), a.cols());
        if let Some(mask) = mask {
            assert!(mask.len() == n || mask.len() == m * n, "softmax mask length");
        }
        let keep = |i: usize, j: usize| {
            mask.is_none_or(|mk| if mk.len() == n { mk[j] } else { mk[i * n + j] })
        };
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = a.row(i);
            let mut mx = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if keep(i, j) && x > mx {
                    mx = x;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut z = T::zero();
            for (j, &x) in row.iter().enumerate() {
                if keep(i, j) {
                    let e = (x - mx).exp();
                    out[i * n + j] = e;
                    z += e;
                }
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= z;
            }
        }
        let y = Rc::new(Tensor::new(&[m, n], out));
        let yc = y.clone();
        self.graph().record(&[self], (*y).clone(), move |g| {
            let mut gx = vec![T::zero(); m * n];
            for i in 0..m {
                let yr = yc.row(i);
                let gr = g.row(i);
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for j in 0..n {
                    gx[i * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(Tensor::new(&[m, n], gx))]
        })
    }

    pub fn softmax_rows(self) -> Var<'g, T> {
        self.softmax_rows_masked(None)
    }

    /// Per-row normalisation with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm_rows(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Var<'g, T> {
        let a = self.value();
        let (m, n) = (a.rows(), a.cols());
        let (gm, bt) = (gamma.value(), beta.value());
        assert_eq!(gm.len(), n, "layer_norm gamma length");
        let gshape = gm.shape().to_vec();
        let nf = T::from_usize(n).unwrap();
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        for i in 0..m {
            let row = a.row(i);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean) * is;
            }
        }
        let out = Tensor::from_fn(&[m, n], |idx| xhat[idx] * gm.data()[idx % n] + bt.data()[idx % n]);
        self.graph().record(&[self, gamma, beta], out, move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); m * n];
            let mut gg = vec![T::zero(); n];
            let mut gb = vec![T::zero(); n];
            for (i, &inv) in inv_std.iter().enumerate() {
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for j in 0..n {
                    let idx = i * n + j;
                    gg[j] += gd[idx] * xhat[idx];
                    gb[j] += gd[idx];
                    let gh = gd[idx] * gm.data()[j];
                    s1 += gh;
                    s2 += gh * xhat[idx];
                }
                for j in 0..n {
                    let idx = i * n + j;
                    let gh = gd[idx] * gm.data()[j];
                    gx[idx] = inv * (gh - s1 / nf - xhat[idx] * s2 / nf);
                }
            }
            vec![
                Some(Tensor::new(&[m, n], gx)),
                Some(Tensor::new(&gshape, gg)),
                Some(Tensor::new(&gshape, gb)),
            ]
        })
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let m = values[0].rows();
        let widths: Vec<usize> = values.iter().map(|v| {
            assert_eq!(v.rows(), m, "concat_cols row mismatch");
            v.cols()
        }).collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for v in &values {
                out.extend_from_slice(v.row(i));
            }
        }
        parts[0].graph().record(parts, Tensor::new(&[m, n], out), move |g| {
            let mut grads: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(m * w)).collect();
            for i in 0..m {
                let row = g.row(i);
                let mut off = 0;
                for (gv, &w) in grads.iter_mut().zip(&widths) {
                    gv.extend_from_slice(&row[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().zip(&widths).map(|(gv, &w)| Some(Tensor::new(&[m, w], gv))).collect()
        })
    }

    /// Vertical concatenation along the leading axis; trailing dims must agree.
    pub fn concat_rows(parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape()[1..].to_vec();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| {
            assert_eq!(&v.shape()[1..], &tail[..], "concat_rows trailing shape mismatch");
            v.shape().to_vec()
        }).collect();
        let lead: usize = shapes.iter().map(|s| s[0]).sum();
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let mut out = Vec::with_capacity(shape.iter().product());
        for v in &values {
            out.extend_from_slice(v.data());
        }
        parts[0].graph().record(parts, Tensor::new(&shape, out), move |g| {
            let mut off = 0;
            shapes.iter().map(|s| {
                let len: usize = s.iter().product();
                let t = Tensor::new(s, g.data()[off..off + len].to_vec());
                off += len;
                Some(t)
            }).collect()
        })
    }

    /// Gathers rows of a 2-D tensor (indices may repeat).
    pub fn select_rows(self, idx: &[usize]) -> Var<'g, T> {
        let a = self.value();
        let (m, n) = (a.rows(), a.cols());
        let idx = idx.to_vec();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            assert!(i < m, "select_rows index {i} out of {m}");
            out.extend_from_slice(a.row(i));
        }
        let rows = idx.len();
        self.graph().record(&[self], Tensor::new(&[rows, n], out), move |g| {
            let mut gx = vec![T::zero(); m * n];
            for (r, &i) in idx.iter().enumerate() {
                for (d, &s) in gx[i * n..(i + 1) * n].iter_mut().zip(g.row(r)) {
                    *d += s;
                }
            }
            vec![Some(Tensor::new(&[m, n], gx))]
        })
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g, T> {
        let a = self.value();
        let (m, n) = (a.rows(), a.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&a.row(i)[start..start + len]);
        }
        self.graph().record(&[self], Tensor::new(&[m, len], out), move |g| {
            let mut gx = vec![T::zero(); m * n];
            for i in 0..m {
                gx[i * n + start..i * n + start + len].copy_from_slice(g.row(i));
            }
            vec![Some(Tensor::new(&[m, n], gx))]
        })
    }
}
