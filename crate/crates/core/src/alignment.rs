//! Multi-positive contrastive alignment between mask tokens and attribute
//! embeddings, and deep-supervised dice on the per-block proposals.

use std::collections::BTreeSet;

use malenia_tensor::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeSchema, StructuredReport, BACKGROUND_ID};
use crate::error::{Error, Result};
use crate::maskdecoder::Assignment;

/// Smoothing constant in the numerator and denominator of soft dice.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Positive and negative embedding ids per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSets {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
    /// Number of embeddings, `R + 1`.
    pub num_ids: usize,
}

impl PairSets {
    pub fn new(positives: Vec<Vec<usize>>, negatives: Vec<Vec<usize>>, num_ids: usize) -> Result<Self> {
        if positives.len() != negatives.len() {
            return Err(Error::Shape("positive and negative sets differ in length".into()));
        }
        for (p, n) in positives.iter().zip(&negatives) {
            let ps: BTreeSet<_> = p.iter().collect();
            if p.is_empty() || ps.len() != p.len() || n.iter().any(|k| ps.contains(k)) {
                return Err(Error::Config("positive sets must be nonempty, unique and disjoint from negatives".into()));
            }
            if p.iter().chain(n).any(|&k| k >= num_ids) {
                return Err(Error::Shape(format!("embedding id out of range {num_ids}")));
            }
        }
        Ok(PairSets { positives, negatives, num_ids })
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn is_foreground(&self, token: usize) -> bool {
        self.positives[token] != [BACKGROUND_ID]
    }
}

/// Matched tokens take their lesion's eight value ids as positives; the rest
/// pair with `t_0`. Everything else is negative.
pub fn build_pairs(assignment: &Assignment, reports: &[StructuredReport], schema: &AttributeSchema) -> Result<PairSets> {
    if reports.len() != assignment.num_lesions() {
        return Err(Error::Shape(format!("{} reports for {} lesions", reports.len(), assignment.num_lesions())));
    }
    let num_ids = schema.num_values() + 1;
    let mut positives = vec![vec![BACKGROUND_ID]; assignment.num_tokens];
    for (s, report) in reports.iter().enumerate() {
        report.validate(schema)?;
        positives[assignment.token_of(s)] = report.ids(schema)?;
    }
    let negatives = positives
        .iter()
        .map(|p| (0..num_ids).filter(|k| !p.contains(k)).collect())
        .collect();
    PairSets::new(positives, negatives, num_ids)
}

/// `S = tokens · textᵀ / τ`, shape `[N, R + 1]`.
pub fn similarity<'g, T: Scalar>(tokens: Var<'g, T>, text: Var<'g, T>, tau: Var<'g, T>) -> Result<Var<'g, T>> {
    let (a, b) = (tokens.shape(), text.shape());
    if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
        return Err(Error::Shape(format!("tokens {a:?} against text {b:?}")));
    }
    Ok(tokens.matmul_nt(text).div_scalar(tau))
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows<'g, T: Scalar>(x: Var<'g, T>) -> Var<'g, T> {
    let a = x.value();
    let (m, n) = (a.rows(), a.cols());
    let inv: Vec<T> = (0..m)
        .map(|i| T::one() / a.row(i).iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(1e-12)))
        .collect();
    let y = Tensor::from_fn(&[m, n], |k| a.data()[k] * inv[k / n]);
    let yc = y.clone();
    x.graph().custom(&[x], y, move |g| {
        // d(x/|x|) = (g - y⟨g, y⟩) / |x|
        let mut gx = vec![T::zero(); m * n];
        for i in 0..m {
            let (yr, gr) = (yc.row(i), g.row(i));
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for j in 0..n {
                gx[i * n + j] = (gr[j] - yr[j] * dot) * inv[i];
            }
        }
        vec![Some(Tensor::new(&[m, n], gx))]
    })
}

/// Attribute-alignment matching cost, row-major `[S, N]`: for lesion `s` and
/// token `j`, minus the mean over the lesion's value ids `p` of
/// `exp(s_jp) / (exp(s_jp) + Σ_{n ∉ P_s} exp(s_jn))`.
pub fn attribute_match_cost<T: Scalar>(
    sim: &Tensor<T>,
    reports: &[StructuredReport],
    schema: &AttributeSchema,
) -> Result<Vec<f64>> {
    let num_ids = schema.num_values() + 1;
    if sim.shape().len() != 2 || sim.cols() != num_ids {
        return Err(Error::Shape(format!("similarity {:?} against {num_ids} ids", sim.shape())));
    }
    let n = sim.rows();
    let mut cost = Vec::with_capacity(reports.len() * n);
    for report in reports {
        let pos = report.ids(schema)?;
        let neg: Vec<usize> = (0..num_ids).filter(|k| !pos.contains(k)).collect();
        for j in 0..n {
            let row: Vec<f64> = sim.row(j).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let neg_max = neg.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
            let mean = pos
                .iter()
                .map(|&p| {
                    let shift = row[p].max(neg_max);
                    let ep = (row[p] - shift).exp();
                    ep / (ep + neg.iter().map(|&i| (row[i] - shift).exp()).sum::<f64>())
                })
                .sum::<f64>()
                / pos.len() as f64;
            cost.push(-mean);
        }
    }
    Ok(cost)
}

/// Multi-positive NCE: each positive is contrasted against the token's
/// negatives only, averaged over positives and then over tokens.
pub fn mp_nce<'g, T: Scalar>(sim: Var<'g, T>, pairs: &PairSets) -> Result<Var<'g, T>> {
    let s = sim.value();
    if s.shape() != [pairs.len(), pairs.num_ids] {
        return Err(Error::Shape(format!("similarity {:?} against {} tokens × {} ids", s.shape(), pairs.len(), pairs.num_ids)));
    }
    if pairs.is_empty() {
        return Err(Error::Shape("no tokens".into()));
    }
    let (n, k) = (pairs.len(), pairs.num_ids);
    let nf = T::lit(n as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); n * k];
    for j in 0..n {
        let row = s.row(j);
        let (pos, neg) = (&pairs.positives[j], &pairs.negatives[j]);
        // Each positive gets its own shift so that its denominator is at least one.
        let neg_max = neg.iter().map(|&i| row[i]).fold(T::neg_infinity(), T::max);
        let w = T::one() / (nf * T::lit(pos.len() as f64));
        let g = &mut grad[j * k..(j + 1) * k];
        for &p in pos {
            let shift = row[p].max(neg_max);
            let ep = (row[p] - shift).exp();
            let eneg: Vec<T> = neg.iter().map(|&i| (row[i] - shift).exp()).collect();
            let denom = ep + eneg.iter().copied().sum::<T>();
            loss += w * (denom.ln() - (row[p] - shift));
            g[p] += w * (ep / denom - T::one());
            for (&i, &e) in neg.iter().zip(&eneg) {
                g[i] += w * e / denom;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numerical("mp_nce overflow".into()));
    }
    let shape = [n, k];
    Ok(sim.graph().custom(&[sim], Tensor::scalar(loss), move |up| {
        let u = up.item();
        vec![Some(Tensor::new(&shape, grad.iter().map(|&x| x * u).collect()))]
    }))
}

/// Mean of per-block MP-NCE losses.
pub fn multiscale_sim_loss<'g, T: Scalar>(sims: &[Var<'g, T>], pairs: &PairSets) -> Result<Var<'g, T>> {
    if sims.is_empty() {
        return Err(Error::Shape("no blocks".into()));
    }
    let losses = sims.iter().map(|&s| mp_nce(s, pairs)).collect::<Result<Vec<_>>>()?;
    let w = T::one() / T::lit(losses.len() as f64);
    Ok(Var::weighted_sum(&losses.into_iter().map(|l| (w, l)).collect::<Vec<_>>()))
}

/// How a full-resolution mask is reduced to a coarser grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GtDownsample {
    /// A coarse voxel is set if any covered voxel is set.
    #[default]
    Occupancy,
    /// A coarse voxel is set if more than half of the covered voxels are.
    Majority,
}

pub fn downsample_mask(mask: &[u8], from: [usize; 3], to: [usize; 3], mode: GtDownsample) -> Result<Vec<u8>> {
    if mask.len() != from.iter().product::<usize>() || (0..3).any(|a| to[a] == 0 || !from[a].is_multiple_of(to[a])) {
        return Err(Error::Shape(format!("cannot downsample {from:?} to {to:?}")));
    }
    let f = [from[0] / to[0], from[1] / to[1], from[2] / to[2]];
    let mut counts = vec![0usize; to.iter().product()];
    for x in 0..from[0] {
        for y in 0..from[1] {
            for z in 0..from[2] {
                if mask[(x * from[1] + y) * from[2] + z] != 0 {
                    counts[((x / f[0]) * to[1] + y / f[1]) * to[2] + z / f[2]] += 1;
                }
            }
        }
    }
    let cell = f[0] * f[1] * f[2];
    Ok(counts
        .into_iter()
        .map(|c| match mode {
            GtDownsample::Occupancy => (c > 0) as u8,
            GtDownsample::Majority => (2 * c > cell) as u8,
        })
        .collect())
}

/// Soft dice loss of sigmoid(logits) on selected channels, averaged over the
/// selection. `targets` pairs a channel with a binary mask over the rows.
pub fn soft_dice_loss<'g, T: Scalar>(logits: Var<'g, T>, targets: &[(usize, Vec<u8>)]) -> Result<Var<'g, T>> {
    let x = logits.value();
    let (v, n) = (x.rows(), x.cols());
    if targets.is_empty() {
        return Err(Error::Shape("soft dice over no channels".into()));
    }
    if targets.iter().any(|(j, m)| *j >= n || m.len() != v) {
        return Err(Error::Shape(format!("dice target does not fit logits [{v}, {n}]")));
    }
    let eps = T::lit(DICE_SMOOTH);
    let two = T::lit(2.0);
    let w = T::one() / T::lit(targets.len() as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); v * n];
    for (j, m) in targets {
        let p: Vec<T> = (0..v).map(|i| malenia_tensor::ops::sigmoid(x.data()[i * n + j])).collect();
        let (mut inter, mut psum, mut gsum) = (T::zero(), T::zero(), T::zero());
        for (i, &pi) in p.iter().enumerate() {
            psum += pi;
            if m[i] != 0 {
                inter += pi;
                gsum += T::one();
            }
        }
        let num = two * inter + eps;
        let den = psum + gsum + eps;
        loss += w * (T::one() - num / den);
        for (i, &pi) in p.iter().enumerate() {
            let g = if m[i] != 0 { T::one() } else { T::zero() };
            let dp = -(two * g * den - num) / (den * den);
            grad[i * n + j] += w * dp * pi * (T::one() - pi);
        }
    }
    Ok(logits.graph().custom(&[logits], Tensor::scalar(loss), move |up| {
        let u = up.item();
        vec![Some(Tensor::new(&[v, n], grad.iter().map(|&g| g * u).collect()))]
    }))
}

/// Dice on matched tokens at every decoder scale with the final-block
/// assignment; lesions that vanish at a scale are skipped there. `None` when
/// there is nothing to supervise.
pub fn deep_dice_loss<'g, T: Scalar>(
    logits: &[Var<'g, T>],
    grids: &[[usize; 3]],
    assignment: &Assignment,
    gt: &[&[u8]],
    full: [usize; 3],
    mode: GtDownsample,
) -> Result<Option<Var<'g, T>>> {
    if logits.len() != grids.len() || gt.len() != assignment.num_lesions() {
        return Err(Error::Shape("deep supervision inputs disagree in length".into()));
    }
    for (s, m) in gt.iter().enumerate() {
        if m.iter().all(|&x| x == 0) {
            return Err(Error::EmptyMask(s));
        }
    }
    let mut terms = Vec::new();
    for (&l, &grid) in logits.iter().zip(grids) {
        let mut targets = Vec::new();
        for (s, m) in gt.iter().enumerate() {
            let down = downsample_mask(m, full, grid, mode)?;
            if down.iter().any(|&x| x != 0) {
                targets.push((assignment.token_of(s), down));
            }
        }
        if !targets.is_empty() {
            terms.push(soft_dice_loss(l, &targets)?);
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let w = T::one() / T::lit(terms.len() as f64);
    Ok(Some(Var::weighted_sum(&terms.into_iter().map(|t| (w, t)).collect::<Vec<_>>())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::Aspect;
    use crate::testutil::{check_gradients, naive_mp_nce};
    use malenia_tensor::{Graph, InitRng};

    fn report(shape: &str) -> StructuredReport {
        let s = AttributeSchema::default_schema();
        let mut r = StructuredReport::from_pairs(s.aspects().map(|a| (a, s.vocab(a)[0].clone())));
        r.set(Aspect::Shape, shape);
        r
    }

    #[test]
    fn one_lesion_gives_one_foreground_token() {
        let s = AttributeSchema::default_schema();
        let a = Assignment::new(vec![(4, 0)], 16).unwrap();
        let p = build_pairs(&a, &[report("Cystic")], &s).unwrap();
        assert_eq!(p.positives[4].len(), 8);
        assert_eq!((0..16).filter(|&j| p.positives[j] == [BACKGROUND_ID]).count(), 15);
        assert!(p.negatives[4].contains(&BACKGROUND_ID));
    }

    #[test]
    fn shared_value_is_positive_for_both_tokens() {
        let s = AttributeSchema::default_schema();
        let a = Assignment::new(vec![(1, 0), (3, 1)], 4).unwrap();
        let mut r2 = report("Cystic");
        r2.set(Aspect::Location, "Kidney");
        let p = build_pairs(&a, &[report("Cystic"), r2], &s).unwrap();
        let id = s.id_of(Aspect::Shape, "Cystic").unwrap();
        for j in [1, 3] {
            assert!(p.positives[j].contains(&id) && !p.negatives[j].contains(&id));
        }
    }

    #[test]
    fn missing_aspect_is_unknown_value() {
        let s = AttributeSchema::default_schema();
        let a = Assignment::new(vec![(0, 0)], 2).unwrap();
        let mut r = report("Cystic");
        r.0.remove(&Aspect::Density);
        assert!(matches!(build_pairs(&a, &[r], &s), Err(Error::UnknownValue { .. })));
    }

    #[test]
    fn symmetric_logits_give_ln2() {
        let g = Graph::<f64>::inference();
        let sim = g.constant(Tensor::zeros(&[1, 2]));
        let pairs = PairSets::new(vec![vec![0]], vec![vec![1]], 2).unwrap();
        assert!((mp_nce(sim, &pairs).unwrap().item() - 2f64.ln()).abs() < 1e-15);
        let sim = g.constant(Tensor::zeros(&[1, 3]));
        let pairs = PairSets::new(vec![vec![0, 1]], vec![vec![2]], 3).unwrap();
        assert!((mp_nce(sim, &pairs).unwrap().item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn matches_direct_formula_and_survives_large_scores() {
        let g = Graph::<f64>::inference();
        let mut rng = InitRng::new(9);
        let s: Tensor<f64> = rng.uniform(&[3, 5], 3.0);
        let pairs = PairSets::new(
            vec![vec![0, 2], vec![1], vec![3, 4, 0]],
            vec![vec![1, 3, 4], vec![0, 2, 3, 4], vec![1]],
            5,
        )
        .unwrap();
        let got = mp_nce(g.constant(s.clone()), &pairs).unwrap().item();
        assert!((got - naive_mp_nce(&s, &pairs)).abs() < 1e-12);
        let big = g.constant(s.map(|x| x * 1e4 / 3.0));
        assert!(mp_nce(big, &pairs).unwrap().item().is_finite());
    }

    #[test]
    fn attribute_cost_prefers_the_token_aligned_with_the_report() {
        let s = AttributeSchema::default_schema();
        let r = report("Cystic");
        let ids = r.ids(&s).unwrap();
        let k = s.num_values() + 1;
        let sim = Tensor::from_fn(&[3, k], |i| {
            let (j, id) = (i / k, i % k);
            if j == 1 && ids.contains(&id) { 5.0 } else { 0.0 }
        });
        let cost = attribute_match_cost(&sim, &[r], &s).unwrap();
        assert_eq!(cost.len(), 3);
        assert!(cost[1] < cost[0] - 0.5 && cost[0] == cost[2]);
        // Flat scores: each positive competes with k - 8 equal negatives.
        assert!((cost[0] + 1.0 / (1.0 + (k - 8) as f64)).abs() < 1e-12);
        assert!(attribute_match_cost(&Tensor::<f64>::zeros(&[3, 4]), &[report("Cystic")], &s).is_err());
    }

    #[test]
    fn similarity_is_scaled_dot_product() {
        let g = Graph::<f64>::inference();
        let t = g.constant(Tensor::new(&[1, 2], vec![0.6, 0.8]));
        let one = similarity(t, t, g.constant(Tensor::scalar(1.0))).unwrap().item();
        assert!((one - 1.0).abs() < 1e-15);
        let half = similarity(t, t, g.constant(Tensor::scalar(0.5))).unwrap().item();
        assert_eq!(half, 2.0 * one);
    }

    #[test]
    fn dice_limits() {
        let g = Graph::<f64>::inference();
        let m = vec![1u8, 1, 0, 0];
        let perfect = g.constant(Tensor::new(&[4, 1], vec![60.0, 60.0, -60.0, -60.0]));
        assert!(soft_dice_loss(perfect, &[(0, m.clone())]).unwrap().item() < 1e-9);
        let disjoint = g.constant(Tensor::new(&[4, 1], vec![-60.0, -60.0, 60.0, 60.0]));
        assert!((soft_dice_loss(disjoint, &[(0, m)]).unwrap().item() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn downsampling_modes() {
        let mut m = vec![0u8; 64];
        m[0] = 1;
        assert_eq!(downsample_mask(&m, [4; 3], [2; 3], GtDownsample::Occupancy).unwrap()[0], 1);
        assert_eq!(downsample_mask(&m, [4; 3], [2; 3], GtDownsample::Majority).unwrap()[0], 0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = InitRng::new(4);
        let s0: Tensor<f64> = rng.uniform(&[3, 4], 2.0);
        let pairs = PairSets::new(vec![vec![0], vec![1, 2], vec![3]], vec![vec![1, 2, 3], vec![0, 3], vec![0, 1, 2]], 4)
            .unwrap();
        check_gradients(std::slice::from_ref(&s0), |v| mp_nce(v[0], &pairs).unwrap(), 1e-5);
        check_gradients(&[s0.clone(), s0.map(|x| -x)], |v| multiscale_sim_loss(v, &pairs).unwrap(), 1e-5);
        let l0: Tensor<f64> = rng.uniform(&[8, 3], 2.0);
        let targets = vec![(0, vec![1u8, 1, 0, 0, 1, 0, 0, 0]), (2, vec![0u8, 0, 0, 1, 1, 1, 0, 0])];
        check_gradients(&[l0], |v| soft_dice_loss(v[0], &targets).unwrap(), 1e-5);
        let x: Tensor<f64> = rng.normal(&[3, 4], 1.0);
        let w: Tensor<f64> = rng.normal(&[3, 4], 1.0);
        check_gradients(&[x], |v| normalize_rows(v[0]).mul(v[0].graph().constant(w.clone())).sum(), 1e-5);
    }
}
