//! Cross-modal knowledge injection: fuse mask tokens with aggregated attribute
//! embeddings, predict a mask per branch against the full-resolution features
//! and ensemble the two.

use malenia_tensor::{Binder, InitRng, Linear, Norm, NormKind, ParamId, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::alignment::{PairSets, DICE_SMOOTH};
use crate::attributes::{Aspect, BACKGROUND_ID};
use crate::error::{Error, Result};
use crate::layers::{Attention, AttentionLayer, Mlp};
use crate::maskdecoder::Assignment;

const ASPECTS: usize = Aspect::ALL.len();

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub beta_m: f64,
    pub beta_t: f64,
}

impl Default for EnsembleWeights {
    fn default() -> Self {
        EnsembleWeights { beta_m: 0.5, beta_t: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of binary cross-entropy in the segmentation loss.
    pub alpha_bce: f64,
    /// Weight of dice in the segmentation loss.
    pub alpha_dice: f64,
    pub lambda_deep: f64,
    pub lambda_sim: f64,
    pub lambda_seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha_bce: 2.0, alpha_dice: 2.0, lambda_deep: 1.0, lambda_sim: 1.0, lambda_seg: 1.0 }
    }
}

/// One branch of the fusion: cross-attention to the other modality with a
/// residual, then normalised self-attention across tokens.
#[derive(Clone, Debug)]
pub struct FusionBranch {
    pub cross: Attention,
    pub norm: Norm,
    pub selfattn: AttentionLayer,
}

impl FusionBranch {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut InitRng, name: &str, dim: usize, heads: usize) -> Self {
        FusionBranch {
            cross: Attention::new(store, rng, &format!("{name}.cross"), dim, heads),
            norm: Norm::new(store, &format!("{name}.norm"), dim, NormKind::Layer),
            selfattn: AttentionLayer::new(store, rng, &format!("{name}.self"), dim, heads),
        }
    }

    /// Returns `(x + CrossAttn(x, other), SelfAttn(LN(...)))`.
    fn forward<'g, T: Scalar>(&self, p: &Binder<'g, T>, x: Var<'g, T>, other: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let residual = x.add(self.cross.forward(p, x, other, other, None));
        (residual, self.selfattn.self_attend(p, self.norm.forward(p, residual)))
    }
}

/// Enhanced tokens and text embeddings, with the residual sums preceding
/// self-attention.
#[derive(Clone, Copy, Debug)]
pub struct FusedPair<'g, T: Scalar> {
    pub m_hat: Var<'g, T>,
    pub t_hat: Var<'g, T>,
    pub residual_m: Var<'g, T>,
    pub residual_t: Var<'g, T>,
}

/// Branch logits and their ensemble, all `[V, N]`.
#[derive(Clone, Copy, Debug)]
pub struct MaskPrediction<'g, T: Scalar> {
    pub mask_m: Var<'g, T>,
    pub mask_t: Var<'g, T>,
    /// `β_m·mask_m + β_t·mask_t`, before the channel-mixing head.
    pub pre_head: Var<'g, T>,
    pub mask: Var<'g, T>,
}

/// Per-voxel channel mixing `N → 2N → N`, initialised to the identity.
#[derive(Clone, Debug)]
pub struct EnsembleHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl EnsembleHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, n: usize) -> Self {
        // relu(x) - relu(-x) = x
        let w1 = Tensor::from_fn(&[n, 2 * n], |k| {
            let (r, c) = (k / (2 * n), k % (2 * n));
            if c == r {
                T::one()
            } else if c == r + n {
                -T::one()
            } else {
                T::zero()
            }
        });
        let w2 = Tensor::from_fn(&[2 * n, n], |k| {
            let (r, c) = (k / n, k % n);
            if r == c {
                T::one()
            } else if r == c + n {
                -T::one()
            } else {
                T::zero()
            }
        });
        EnsembleHead {
            w1: store.add(format!("{name}.w1"), w1),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[2 * n])),
            w2: store.add(format!("{name}.w2"), w2),
            b2: store.add(format!("{name}.b2"), Tensor::zeros(&[n])),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Binder<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = x.linear(p.param(self.w1), Some(p.param(self.b1))).relu();
        h.linear(p.param(self.w2), Some(p.param(self.b2)))
    }
}

#[derive(Clone, Debug)]
pub struct Cmki {
    pub aggregator: Mlp,
    pub vision: FusionBranch,
    pub text: FusionBranch,
    pub phi_m: Linear,
    pub phi_t: Linear,
    pub phi_k: Linear,
    pub head: EnsembleHead,
    pub dim: usize,
}

impl Cmki {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut InitRng, dim: usize, tokens: usize, heads: usize) -> Self {
        Cmki {
            aggregator: Mlp::new(store, rng, "cmki.aggregate", ASPECTS * dim, dim, dim),
            vision: FusionBranch::new(store, rng, "cmki.vision", dim, heads),
            text: FusionBranch::new(store, rng, "cmki.text", dim, heads),
            phi_m: Linear::identity(store, "cmki.phi_m", dim, true),
            phi_t: Linear::identity(store, "cmki.phi_t", dim, true),
            phi_k: Linear::identity(store, "cmki.phi_k", dim, true),
            head: EnsembleHead::new(store, "cmki.head", tokens),
            dim,
        }
    }

    /// One text vector per token from the concatenation of its eight
    /// attribute embeddings in aspect order; `t_0` is tiled for background.
    pub fn aggregate<'g, T: Scalar>(&self, p: &Binder<'g, T>, text: Var<'g, T>, ids: &[Vec<usize>]) -> Result<Var<'g, T>> {
        let shape = text.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Shape(format!("text embeddings {shape:?}, expected [_, {}]", self.dim)));
        }
        let mut flat = Vec::with_capacity(ids.len() * ASPECTS);
        for row in ids {
            if row.len() != ASPECTS || row.iter().any(|&k| k >= shape[0]) {
                return Err(Error::Shape(format!("token needs {ASPECTS} embedding ids, got {row:?}")));
            }
            flat.extend_from_slice(row);
        }
        let cat = text.select_rows(&flat).reshape(&[ids.len(), ASPECTS * self.dim]);
        Ok(self.aggregator.forward(p, cat))
    }

    pub fn fuse<'g, T: Scalar>(&self, p: &Binder<'g, T>, tokens: Var<'g, T>, text: Var<'g, T>) -> Result<FusedPair<'g, T>> {
        if tokens.shape() != text.shape() || tokens.shape().get(1) != Some(&self.dim) {
            return Err(Error::Shape(format!("tokens {:?} against text {:?}", tokens.shape(), text.shape())));
        }
        let (residual_m, m_hat) = self.vision.forward(p, tokens, text);
        let (residual_t, t_hat) = self.text.forward(p, text, tokens);
        Ok(FusedPair { m_hat, t_hat, residual_m, residual_t })
    }

    /// `(Q_m, Q_t, K)` from the fused pair and `F4: [V, C]`.
    pub fn project<'g, T: Scalar>(
        &self,
        p: &Binder<'g, T>,
        fused: &FusedPair<'g, T>,
        features: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>)> {
        if features.shape().get(1) != Some(&self.dim) {
            return Err(Error::Shape(format!("features {:?}, expected [V, {}]", features.shape(), self.dim)));
        }
        Ok((self.phi_m.forward(p, fused.m_hat), self.phi_t.forward(p, fused.t_hat), self.phi_k.forward(p, features)))
    }

    pub fn ensemble<'g, T: Scalar>(
        &self,
        p: &Binder<'g, T>,
        mask_m: Var<'g, T>,
        mask_t: Var<'g, T>,
        weights: EnsembleWeights,
    ) -> Result<MaskPrediction<'g, T>> {
        if mask_m.shape() != mask_t.shape() {
            return Err(Error::Shape(format!("branch masks {:?} and {:?}", mask_m.shape(), mask_t.shape())));
        }
        if weights.beta_m < 0.0 || weights.beta_t < 0.0 {
            return Err(Error::Config("ensemble weights must be nonnegative".into()));
        }
        let pre_head = mask_m.scale(T::lit(weights.beta_m)).add(mask_t.scale(T::lit(weights.beta_t)));
        let mask = self.head.forward(p, pre_head);
        Ok(MaskPrediction { mask_m, mask_t, pre_head, mask })
    }
}

/// `mask[v, j] = ⟨Q[j], K[v]⟩ / √C` for both branches.
pub fn predict_masks<'g, T: Scalar>(
    q_m: Var<'g, T>,
    q_t: Var<'g, T>,
    k: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let c = k.shape()[1];
    if q_m.shape()[1] != c || q_t.shape()[1] != c {
        return Err(Error::Shape(format!("queries {:?}/{:?} against keys {:?}", q_m.shape(), q_t.shape(), k.shape())));
    }
    let s = T::one() / T::lit(c as f64).sqrt();
    Ok((k.matmul_nt(q_m).scale(s), k.matmul_nt(q_t).scale(s)))
}

/// Channel argmax per voxel of `[V, N]` logits.
pub fn argmax_labels<T: Scalar>(mask: &Tensor<T>) -> Vec<usize> {
    (0..mask.rows())
        .map(|v| {
            let row = mask.row(v);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Embedding ids to aggregate per token: its positives for foreground, eight
/// copies of `t_0` for background.
pub fn aggregation_ids(pairs: &PairSets) -> Vec<Vec<usize>> {
    (0..pairs.len())
        .map(|j| if pairs.is_foreground(j) { pairs.positives[j].clone() } else { vec![BACKGROUND_ID; ASPECTS] })
        .collect()
}

/// The unmatched token whose similarity to `t_0` is largest.
pub fn background_channel(t0_similarity: &[f64], assignment: &Assignment) -> Result<usize> {
    assignment
        .background_tokens()
        .into_iter()
        .max_by(|&a, &b| t0_similarity[a].total_cmp(&t0_similarity[b]).then(b.cmp(&a)))
        .ok_or(Error::Size { lesions: assignment.num_lesions(), tokens: assignment.num_tokens })
}

/// Per-voxel target channel: the matched token inside each lesion, the
/// background channel elsewhere.
pub fn voxel_targets(gt: &[&[u8]], assignment: &Assignment, background: usize, voxels: usize) -> Result<Vec<usize>> {
    let mut t = vec![background; voxels];
    for (s, m) in gt.iter().enumerate() {
        if m.len() != voxels {
            return Err(Error::Shape(format!("mask of {} voxels, expected {voxels}", m.len())));
        }
        let j = assignment.token_of(s);
        for (o, &x) in t.iter_mut().zip(m.iter()) {
            if x != 0 {
                *o = j;
            }
        }
    }
    Ok(t)
}

/// `α_bce·BCE + α_dice·dice` on `[V, N]` logits against one-hot per-voxel
/// targets. BCE averages over every entry; dice averages over the channels
/// that own at least one voxel.
pub fn seg_loss<'g, T: Scalar>(mask: Var<'g, T>, targets: &[usize], weights: LossWeights) -> Result<Var<'g, T>> {
    let x = mask.value();
    let (v, n) = (x.rows(), x.cols());
    if targets.len() != v || targets.iter().any(|&t| t >= n) {
        return Err(Error::Shape(format!("{} targets for logits [{v}, {n}]", targets.len())));
    }
    let (a_bce, a_dice) = (T::lit(weights.alpha_bce), T::lit(weights.alpha_dice));
    let eps = T::lit(DICE_SMOOTH);
    let two = T::lit(2.0);
    let sig = malenia_tensor::ops::sigmoid::<T>;
    let mut counts = vec![0usize; n];
    for &t in targets {
        counts[t] += 1;
    }
    let active: Vec<usize> = (0..n).filter(|&j| counts[j] > 0).collect();
    let mut inter = vec![T::zero(); n];
    let mut psum = vec![T::zero(); n];
    let mut bce = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        for j in 0..n {
            let z = x.data()[i * n + j];
            let p = sig(z);
            psum[j] += p;
            let y = if j == t { T::one() } else { T::zero() };
            if j == t {
                inter[j] += p;
            }
            bce += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
        }
    }
    let total = T::lit((v * n) as f64);
    let wd = T::one() / T::lit(active.len().max(1) as f64);
    let mut dice = T::zero();
    // Per channel: dL/dp_v = -(2 g_v den - num) / den²
    let mut dnum = vec![T::zero(); n];
    let mut dden = vec![T::zero(); n];
    for &j in &active {
        let num = two * inter[j] + eps;
        let den = psum[j] + T::lit(counts[j] as f64) + eps;
        dice += wd * (T::one() - num / den);
        dnum[j] = -two * wd / den;
        dden[j] = wd * num / (den * den);
    }
    let loss = a_bce * bce / total + a_dice * dice;
    let mut grad = vec![T::zero(); v * n];
    for (i, &t) in targets.iter().enumerate() {
        for j in 0..n {
            let z = x.data()[i * n + j];
            let p = sig(z);
            let y = if j == t { T::one() } else { T::zero() };
            let mut g = a_bce * (p - y) / total;
            if counts[j] > 0 {
                g += a_dice * (dnum[j] * y + dden[j]) * p * (T::one() - p);
            }
            grad[i * n + j] = g;
        }
    }
    Ok(mask.graph().custom(&[mask], Tensor::scalar(loss), move |up| {
        let u = up.item();
        vec![Some(Tensor::new(&[v, n], grad.iter().map(|&g| g * u).collect()))]
    }))
}

/// `λ_deep·L_deep + λ_sim·L_sim + λ_seg·L_seg`. Terms with a zero weight are
/// left out of the graph, as is an absent deep term (no lesions to supervise).
pub fn total_loss<'g, T: Scalar>(
    deep: Option<Var<'g, T>>,
    sim: Var<'g, T>,
    seg: Var<'g, T>,
    weights: LossWeights,
) -> Var<'g, T> {
    let mut terms: Vec<(T, Var<'g, T>)> = [(weights.lambda_deep, deep), (weights.lambda_sim, Some(sim)), (weights.lambda_seg, Some(seg))]
        .into_iter()
        .filter_map(|(w, v)| v.filter(|_| w != 0.0).map(|v| (T::lit(w), v)))
        .collect();
    if terms.is_empty() {
        terms.push((T::zero(), seg));
    }
    Var::weighted_sum(&terms)
}
