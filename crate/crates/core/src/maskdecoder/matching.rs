use malenia_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-to-one pairing of mask tokens with ground-truth lesions; tokens not
/// listed are background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(token, lesion)` pairs sorted by lesion.
    pub pairs: Vec<(usize, usize)>,
    pub num_tokens: usize,
}

impl Assignment {
    pub fn new(mut pairs: Vec<(usize, usize)>, num_tokens: usize) -> Result<Self> {
        pairs.sort_by_key(|&(_, s)| s);
        let mut seen = vec![false; num_tokens];
        for (i, &(j, s)) in pairs.iter().enumerate() {
            if j >= num_tokens || s != i || std::mem::replace(&mut seen[j], true) {
                return Err(Error::Config(format!("invalid assignment {pairs:?} over {num_tokens} tokens")));
            }
        }
        Ok(Assignment { pairs, num_tokens })
    }

    pub fn num_lesions(&self) -> usize {
        self.pairs.len()
    }

    pub fn token_of(&self, lesion: usize) -> usize {
        self.pairs[lesion].0
    }

    pub fn lesion_of(&self, token: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(j, _)| j == token).map(|&(_, s)| s)
    }

    pub fn background_tokens(&self) -> Vec<usize> {
        (0..self.num_tokens).filter(|&j| self.lesion_of(j).is_none()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchWeights {
    pub dice: f64,
    pub bce: f64,
    /// Weight of the attribute-alignment cost, the counterpart of a class
    /// cost; 0 matches on masks alone.
    pub attribute: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights { dice: 1.0, bce: 1.0, attribute: 0.0 }
    }
}

const DICE_SMOOTH: f64 = 1e-5;

/// `[S, N]` costs of pairing lesion `s` with token `j`, from `[V, N]` logits at
/// ground-truth resolution.
pub fn matching_cost<T: Scalar>(logits: &Tensor<T>, gt: &[&[u8]], weights: MatchWeights) -> Result<Vec<f64>> {
    let (v, n) = (logits.rows(), logits.cols());
    if let Some(g) = gt.iter().find(|g| g.len() != v) {
        return Err(Error::Shape(format!("mask of {} voxels against {v} proposals", g.len())));
    }
    let mut cost = vec![0.0; gt.len() * n];
    for j in 0..n {
        let x: Vec<f64> = (0..v).map(|i| logits.data()[i * n + j].to_f64().unwrap_or(f64::NAN)).collect();
        let prob: Vec<f64> = x.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let psum: f64 = prob.iter().sum();
        // BCE(x, 0) summed over all voxels, corrected per lesion below.
        let bce0: f64 = x.iter().map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p()).sum();
        for (s, g) in gt.iter().enumerate() {
            let (mut inter, mut gsum, mut xin) = (0.0, 0.0, 0.0);
            for i in 0..v {
                if g[i] != 0 {
                    inter += prob[i];
                    gsum += 1.0;
                    xin += x[i];
                }
            }
            let dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (psum + gsum + DICE_SMOOTH);
            let bce = (bce0 - xin) / v as f64;
            cost[s * n + j] = weights.dice * dice + weights.bce * bce;
        }
    }
    Ok(cost)
}

/// Minimum-cost assignment of each of `rows` rows to a distinct column of a
/// row-major `rows × cols` matrix, `rows ≤ cols`. Returns the column per row.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(rows <= cols && cost.len() == rows * cols, "hungarian needs rows <= cols");
    // Shortest augmenting paths with potentials; index 0 is a sentinel.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = cost[(i0 - 1) * cols + j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Exhaustive minimum over all injective row→column maps; a test oracle.
pub fn brute_force_assignment(cost: &[f64], rows: usize, cols: usize) -> (Vec<usize>, f64) {
    fn rec(cost: &[f64], cols: usize, row: usize, used: &mut [bool], cur: &mut Vec<usize>, best: &mut (Vec<usize>, f64)) {
        if row * cols == cost.len() {
            let total = total_cost(cost, cols, cur);
            if total < best.1 {
                *best = (cur.clone(), total);
            }
            return;
        }
        for j in 0..cols {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(cost, cols, row + 1, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    assert!(rows <= cols && cost.len() == rows * cols);
    let mut best = (Vec::new(), f64::INFINITY);
    rec(cost, cols, 0, &mut vec![false; cols], &mut Vec::new(), &mut best);
    if rows == 0 {
        best.1 = 0.0;
    }
    best
}

/// Sum of `cost[row][cols_of[row]]` in row order.
pub fn total_cost(cost: &[f64], cols: usize, cols_of: &[usize]) -> f64 {
    cols_of.iter().enumerate().map(|(r, &c)| cost[r * cols + c]).sum()
}

/// Matches ground-truth lesions to tokens from full-resolution proposal logits.
pub fn bipartite_match<T: Scalar>(logits: &Tensor<T>, gt: &[&[u8]], weights: MatchWeights) -> Result<Assignment> {
    let n = logits.cols();
    if gt.len() > n {
        return Err(Error::Size { lesions: gt.len(), tokens: n });
    }
    assign(&matching_cost(logits, gt, weights)?, gt.len(), n)
}

/// Optimal assignment for a row-major `[S, N]` cost matrix.
pub fn assign(cost: &[f64], lesions: usize, tokens: usize) -> Result<Assignment> {
    if lesions > tokens {
        return Err(Error::Size { lesions, tokens });
    }
    if cost.len() != lesions * tokens {
        return Err(Error::Shape(format!("{} costs for {lesions} lesions and {tokens} tokens", cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("non-finite matching cost".into()));
    }
    let cols_of = hungarian(cost, lesions, tokens);
    Assignment::new(cols_of.into_iter().enumerate().map(|(s, j)| (j, s)).collect(), tokens)
}

/// Trilinear upsampling of `[V, N]` logits from grid `from` to grid `to`,
/// sampling at voxel centres.
pub fn upsample_logits<T: Scalar>(logits: &Tensor<T>, from: [usize; 3], to: [usize; 3]) -> Tensor<T> {
    let n = logits.cols();
    assert_eq!(logits.rows(), from.iter().product::<usize>(), "logit grid mismatch");
    let taps = |axis: usize| -> Vec<(usize, usize, T)> {
        let (a, b) = (from[axis], to[axis]);
        (0..b)
            .map(|o| {
                let src = ((o as f64 + 0.5) * a as f64 / b as f64 - 0.5).clamp(0.0, (a - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(a - 1);
                (lo, hi, T::lit(src - lo as f64))
            })
            .collect()
    };
    let (tx, ty, tz) = (taps(0), taps(1), taps(2));
    let [_, fw, fd] = from;
    let at = |x: usize, y: usize, z: usize| &logits.data()[((x * fw + y) * fd + z) * n..][..n];
    let mut out = vec![T::zero(); to.iter().product::<usize>() * n];
    let mut k = 0;
    for &(x0, x1, wx) in &tx {
        for &(y0, y1, wy) in &ty {
            for &(z0, z1, wz) in &tz {
                let dst = &mut out[k * n..(k + 1) * n];
                for (xi, fx) in [(x0, T::one() - wx), (x1, wx)] {
                    for (yi, fy) in [(y0, T::one() - wy), (y1, wy)] {
                        for (zi, fz) in [(z0, T::one() - wz), (z1, wz)] {
                            let f = fx * fy * fz;
                            if f != T::zero() {
                                for (o, &s) in dst.iter_mut().zip(at(xi, yi, zi)) {
                                    *o += f * s;
                                }
                            }
                        }
                    }
                }
                k += 1;
            }
        }
    }
    Tensor::new(&[to.iter().product(), n], out)
}
