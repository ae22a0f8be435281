//! Three-block transformer decoder refining learnable mask tokens against the
//! coarse pyramid levels, plus per-scale mask proposals.

mod matching;

pub use matching::{
    assign, bipartite_match, brute_force_assignment, hungarian, matching_cost, total_cost, upsample_logits, Assignment,
    MatchWeights,
};

use malenia_tensor::{Binder, InitRng, Linear, ParamId, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{FeaturePyramid, Level};
use crate::error::{Error, Result};
use crate::layers::{AttentionConfig, AttentionLayer, FeedForward};

pub const NUM_BLOCKS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_tokens: usize,
    pub attention: AttentionConfig,
    /// Restrict cross-attention to voxels the token currently claims.
    pub masked_attention: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { num_tokens: 16, attention: AttentionConfig { heads: 1, ffn_hidden: 0 }, masked_attention: false }
    }
}

/// Cross-attention from tokens to voxels, then self-attention among tokens.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub cross: AttentionLayer,
    pub selfattn: AttentionLayer,
    pub ffn: Option<FeedForward>,
    /// Maps normalised voxel coordinates to a positional code.
    pub position: Linear,
}

impl DecoderBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut InitRng,
        name: &str,
        dim: usize,
        attention: AttentionConfig,
    ) -> Self {
        DecoderBlock {
            cross: AttentionLayer::new(store, rng, &format!("{name}.cross"), dim, attention.heads),
            selfattn: AttentionLayer::new(store, rng, &format!("{name}.self"), dim, attention.heads),
            ffn: (attention.ffn_hidden > 0)
                .then(|| FeedForward::new(store, rng, &format!("{name}.ffn"), dim, attention.ffn_hidden)),
            position: Linear::new(store, rng, &format!("{name}.pos"), 3, dim, false),
        }
    }

    /// `tokens: [N, C]`, `level.features: [V, C]`; `mask` has `N·V` flags.
    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Binder<'g, T>,
        tokens: Var<'g, T>,
        level: &Level<'g, T>,
        mask: Option<&[bool]>,
    ) -> Result<Var<'g, T>> {
        let (ts, fs) = (tokens.shape(), level.features.shape());
        if ts.len() != 2 || fs.len() != 2 || ts[1] != fs[1] {
            return Err(Error::Shape(format!("tokens {ts:?} against features {fs:?}")));
        }
        let coords = p.graph().constant(grid_coordinates(level.grid));
        // Position steers where a token attends; the values carry image content only.
        let keys = level.features.add(self.position.forward(p, coords));
        let x = self.cross.forward(p, tokens, keys, level.features, mask);
        let x = self.selfattn.self_attend(p, x);
        Ok(match &self.ffn {
            Some(f) => f.forward(p, x),
            None => x,
        })
    }
}

/// Voxel centres in `[-1, 1]^3`, one row per voxel in `(h, w, d)` order.
pub fn grid_coordinates<T: Scalar>(grid: [usize; 3]) -> Tensor<T> {
    let [h, w, d] = grid;
    let c = |i: usize, n: usize| T::lit((i as f64 + 0.5) / n as f64 * 2.0 - 1.0);
    Tensor::from_fn(&[h * w * d, 3], |k| {
        let (v, axis) = (k / 3, k % 3);
        match axis {
            0 => c(v / (w * d), h),
            1 => c(v / d % w, w),
            _ => c(v % d, d),
        }
    })
}

/// Proposal logits `[V, N]`, entry `(v, j) = ⟨F[v], m_j⟩`.
pub fn proposal_logits<'g, T: Scalar>(tokens: Var<'g, T>, features: Var<'g, T>) -> Result<Var<'g, T>> {
    let (ts, fs) = (tokens.shape(), features.shape());
    if ts.len() != 2 || fs.len() != 2 || ts[1] != fs[1] {
        return Err(Error::Shape(format!("tokens {ts:?} against features {fs:?}")));
    }
    Ok(features.matmul_nt(tokens))
}

/// Mask proposals in `[0, 1]`, laid out `[V, N]` so that a reshape gives
/// `(H, W, D, N)`.
pub fn mask_proposals<'g, T: Scalar>(tokens: Var<'g, T>, features: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(proposal_logits(tokens, features)?.sigmoid())
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub config: DecoderConfig,
    pub tokens: ParamId,
    pub blocks: Vec<DecoderBlock>,
}

/// Tokens and proposal logits after each block.
#[derive(Clone, Debug)]
pub struct DecoderOutput<'g, T: Scalar> {
    pub tokens: Vec<Var<'g, T>>,
    pub logits: Vec<Var<'g, T>>,
    pub grids: Vec<[usize; 3]>,
}

impl<'g, T: Scalar> DecoderOutput<'g, T> {
    pub fn final_tokens(&self) -> Var<'g, T> {
        *self.tokens.last().expect("decoder has blocks")
    }
}

impl MaskDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut InitRng, config: &DecoderConfig, dim: usize) -> Self {
        let tokens = store.add("decoder.tokens", rng.normal(&[config.num_tokens, dim], 1.0));
        let blocks = (0..NUM_BLOCKS)
            .map(|i| DecoderBlock::new(store, rng, &format!("decoder.block{}", i + 1), dim, config.attention))
            .collect();
        MaskDecoder { config: config.clone(), tokens, blocks }
    }

    /// Block `i` attends to pyramid level `i`, coarse to fine, once each.
    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Binder<'g, T>,
        pyramid: &FeaturePyramid<'g, T>,
    ) -> Result<DecoderOutput<'g, T>> {
        let mut x = p.param(self.tokens);
        let mut out = DecoderOutput { tokens: Vec::new(), logits: Vec::new(), grids: Vec::new() };
        for (block, level) in self.blocks.iter().zip(&pyramid.levels) {
            let mask = if self.config.masked_attention {
                Some(attention_mask(&proposal_logits(x, level.features)?.value()))
            } else {
                None
            };
            x = block.forward(p, x, level, mask.as_deref())?;
            out.logits.push(proposal_logits(x, level.features)?);
            out.tokens.push(x);
            out.grids.push(level.grid);
        }
        Ok(out)
    }
}

/// `[N·V]` flags from `[V, N]` logits: attend where the proposal exceeds one
/// half; a token claiming nothing attends everywhere.
fn attention_mask<T: Scalar>(logits: &Tensor<T>) -> Vec<bool> {
    let (v, n) = (logits.rows(), logits.cols());
    let mut mask = vec![false; n * v];
    for j in 0..n {
        let row = &mut mask[j * v..(j + 1) * v];
        for (i, m) in row.iter_mut().enumerate() {
            *m = logits.data()[i * n + j] > T::zero();
        }
        if !row.iter().any(|&m| m) {
            row.fill(true);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use malenia_tensor::Graph;

    #[test]
    fn block_output_shape_on_single_voxel_level() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = InitRng::new(3);
        let block = DecoderBlock::new(&mut store, &mut rng, "b", 32, AttentionConfig { heads: 1, ffn_hidden: 0 });
        let g = Graph::inference();
        let p = Binder::new(&g, &store);
        let tokens = g.constant(rng.normal(&[16, 32], 1.0));
        let level = Level { features: g.constant(rng.normal(&[1, 32], 1.0)), grid: [1, 1, 1] };
        assert_eq!(block.forward(&p, tokens, &level, None).unwrap().shape(), vec![16, 32]);
        let bad = g.constant(rng.normal(&[16, 8], 1.0));
        assert!(matches!(block.forward(&p, bad, &level, None), Err(Error::Shape(_))));
    }

    #[test]
    fn proposals_match_direct_sigmoid() {
        let g = Graph::<f64>::inference();
        let mut rng = InitRng::new(5);
        let t: Tensor<f64> = rng.normal(&[2, 3], 1.0);
        let f: Tensor<f64> = rng.normal(&[8, 3], 1.0);
        let probs = mask_proposals(g.constant(t.clone()), g.constant(f.clone())).unwrap().value();
        for v in 0..8 {
            for j in 0..2 {
                let dot: f64 = (0..3).map(|c| f.row(v)[c] * t.row(j)[c]).sum();
                let expect = 1.0 / (1.0 + (-dot).exp());
                assert!((probs.data()[v * 2 + j] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn orthogonal_token_gives_one_half() {
        let g = Graph::<f64>::inference();
        let t = g.constant(Tensor::new(&[1, 2], vec![0.0, 1.0]));
        let f = g.constant(Tensor::new(&[3, 2], vec![1.0, 0.0, -2.0, 0.0, 5.0, 0.0]));
        assert!(mask_proposals(t, f).unwrap().value().data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn coordinates_are_centred() {
        let c: Tensor<f64> = grid_coordinates([2, 1, 4]);
        assert_eq!(c.row(0), &[-0.5, 0.0, -0.75]);
        assert_eq!(c.row(7), &[0.5, 0.0, 0.75]);
    }

    #[test]
    fn empty_claims_attend_everywhere() {
        let logits = Tensor::new(&[2, 2], vec![1.0, -1.0, -1.0, -2.0]);
        assert_eq!(attention_mask::<f64>(&logits), vec![true, false, true, true]);
    }
}
