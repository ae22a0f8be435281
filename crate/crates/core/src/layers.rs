//! Attention and MLP building blocks shared by the decoder and the fusion module.

use malenia_tensor::{Binder, InitRng, Linear, Norm, NormKind, ParamStore, Scalar, Var};
use serde::{Deserialize, Serialize};

/// Multi-head scaled dot-product attention without biases, so a fully masked
/// query row contributes exactly zero.
#[derive(Clone, Debug)]
pub struct Attention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut InitRng, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dimension {dim} not divisible by {heads} heads");
        Attention {
            wq: Linear::new(store, rng, &format!("{name}.q"), dim, dim, false),
            wk: Linear::new(store, rng, &format!("{name}.k"), dim, dim, false),
            wv: Linear::new(store, rng, &format!("{name}.v"), dim, dim, false),
            wo: Linear::new(store, rng, &format!("{name}.o"), dim, dim, false),
            heads,
            dim,
        }
    }

    pub fn value_weight(&self) -> &Linear {
        &self.wv
    }

    /// `query: [n, C]`, `key`/`value: [m, C]`; `mask` holds `n·m` or `m` flags
    /// (true = attend).
    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Binder<'g, T>,
        query: Var<'g, T>,
        key: Var<'g, T>,
        value: Var<'g, T>,
        mask: Option<&[bool]>,
    ) -> Var<'g, T> {
        let q = self.wq.forward(p, query);
        let k = self.wk.forward(p, key);
        let v = self.wv.forward(p, value);
        let dh = self.dim / self.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let head = |h: usize| {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (q.slice_cols(h * dh, dh), k.slice_cols(h * dh, dh), v.slice_cols(h * dh, dh))
            };
            qh.matmul_nt(kh).scale(scale).softmax_rows_masked(mask).matmul(vh)
        };
        let out = if self.heads == 1 {
            head(0)
        } else {
            let parts: Vec<_> = (0..self.heads).map(head).collect();
            Var::concat_cols(&parts)
        };
        self.wo.forward(p, out)
    }
}

/// `LN(x + Attn(x, key, value))`.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub attn: Attention,
    pub norm: Norm,
}

impl AttentionLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut InitRng, name: &str, dim: usize, heads: usize) -> Self {
        AttentionLayer {
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm: Norm::new(store, &format!("{name}.norm"), dim, NormKind::Layer),
        }
    }

    /// The residual sum before normalisation.
    pub fn residual<'g, T: Scalar>(
        &self,
        p: &Binder<'g, T>,
        x: Var<'g, T>,
        key: Var<'g, T>,
        value: Var<'g, T>,
        mask: Option<&[bool]>,
    ) -> Var<'g, T> {
        x.add(self.attn.forward(p, x, key, value, mask))
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Binder<'g, T>,
        x: Var<'g, T>,
        key: Var<'g, T>,
        value: Var<'g, T>,
        mask: Option<&[bool]>,
    ) -> Var<'g, T> {
        self.norm.forward(p, self.residual(p, x, key, value, mask))
    }

    pub fn self_attend<'g, T: Scalar>(&self, p: &Binder<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.forward(p, x, x, x, None)
    }
}

/// Two linear layers with a leaky ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut InitRng,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Mlp {
            first: Linear::new(store, rng, &format!("{name}.0"), input, hidden, true),
            second: Linear::new(store, rng, &format!("{name}.1"), hidden, output, true),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Binder<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.second.forward(p, self.first.forward(p, x).leaky_relu(T::lit(0.01)))
    }
}

/// Optional position-wise feed-forward sublayer, `LN(x + MLP(x))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub mlp: Mlp,
    pub norm: Norm,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut InitRng, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, hidden, dim),
            norm: Norm::new(store, &format!("{name}.norm"), dim, NormKind::Layer),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Binder<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.norm.forward(p, x.add(self.mlp.forward(p, x)))
    }
}

/// Attention head layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Hidden width of the feed-forward sublayer; 0 disables it.
    pub ffn_hidden: usize,
}
