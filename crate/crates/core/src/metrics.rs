//! Overlap, surface and lesion-attribute matching metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attributes::{Aspect, StructuredReport};
use crate::error::{Error, Result};

/// Minimum overlap for a predicted lesion to be paired with a ground-truth one.
pub const PAIRING_DSC: f64 = 0.1;

fn same_len(a: &[u8], b: &[u8]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("masks of {} and {} voxels", a.len(), b.len())));
    }
    Ok(())
}

/// Dice similarity coefficient; 1 when both masks are empty.
pub fn dsc(pred: &[u8], gt: &[u8]) -> Result<f64> {
    same_len(pred, gt)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        a += (p != 0) as usize;
        b += (g != 0) as usize;
        both += (p != 0 && g != 0) as usize;
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

/// Foreground voxels with a face neighbour outside the mask (or the volume).
pub fn boundary(mask: &[u8], shape: [usize; 3]) -> Vec<usize> {
    let [h, w, d] = shape;
    let at = |x: usize, y: usize, z: usize| mask[(x * w + y) * d + z] != 0;
    let mut out = Vec::new();
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                if !at(x, y, z) {
                    continue;
                }
                let edge = x == 0 || y == 0 || z == 0 || x + 1 == h || y + 1 == w || z + 1 == d;
                if edge
                    || !at(x - 1, y, z)
                    || !at(x + 1, y, z)
                    || !at(x, y - 1, z)
                    || !at(x, y + 1, z)
                    || !at(x, y, z - 1)
                    || !at(x, y, z + 1)
                {
                    out.push((x * w + y) * d + z);
                }
            }
        }
    }
    out
}

/// Squared Euclidean distance from every voxel to the nearest seed, with
/// per-axis spacing, by separable lower envelopes of parabolas.
pub fn squared_distance_transform(seeds: &[usize], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let mut f = vec![f64::INFINITY; n];
    for &s in seeds {
        f[s] = 0.0;
    }
    let strides = [shape[1] * shape[2], shape[2], 1];
    for axis in 0..3 {
        let len = shape[axis];
        let s2 = spacing[axis] * spacing[axis];
        let (mut line, mut out) = (vec![0.0; len], vec![0.0; len]);
        for start in 0..n {
            // Visit each line once, from its first voxel along `axis`.
            if !(start / strides[axis]).is_multiple_of(len) {
                continue;
            }
            for i in 0..len {
                line[i] = f[start + i * strides[axis]];
            }
            envelope(&line, s2, &mut out);
            for i in 0..len {
                f[start + i * strides[axis]] = out[i];
            }
        }
    }
    f
}

/// 1-D transform `out[q] = min_p f[p] + s2·(q − p)²`.
fn envelope(f: &[f64], s2: f64, out: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut v = vec![0usize; finite.len()];
    let mut z = vec![0.0; finite.len() + 1];
    let mut k = 0;
    v[0] = finite[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let cross = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] / s2 + qf * qf) - (f[p] / s2 + pf * pf)) / (2.0 * (qf - pf))
    };
    for &q in &finite[1..] {
        let mut s = cross(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = cross(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = s2 * d * d + f[v[k]];
    }
}

/// Normalised surface distance: the fraction of both boundaries lying within
/// `tolerance` (physical units) of the other boundary.
pub fn nsd(pred: &[u8], gt: &[u8], shape: [usize; 3], spacing: [f64; 3], tolerance: f64) -> Result<f64> {
    same_len(pred, gt)?;
    if pred.len() != shape.iter().product::<usize>() {
        return Err(Error::Shape(format!("masks of {} voxels for grid {shape:?}", pred.len())));
    }
    if !(tolerance > 0.0) {
        return Err(Error::Config("surface tolerance must be positive".into()));
    }
    let (ba, bb) = (boundary(pred, shape), boundary(gt, shape));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let t2 = tolerance * tolerance;
    let (da, db) = (squared_distance_transform(&ba, shape, spacing), squared_distance_transform(&bb, shape, spacing));
    let near_b = ba.iter().filter(|&&v| db[v] <= t2).count();
    let near_a = bb.iter().filter(|&&v| da[v] <= t2).count();
    Ok((near_a + near_b) as f64 / (ba.len() + bb.len()) as f64)
}

/// A lesion with its mask and the attribute values assigned to it.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionRecord<'a> {
    pub mask: &'a [u8],
    pub report: &'a StructuredReport,
}

/// Greedy pairing by descending overlap, keeping pairs with DSC above
/// [`PAIRING_DSC`]. Returns `(predicted, ground truth)` index pairs.
pub fn pair_lesions(pred: &[LesionRecord], gt: &[LesionRecord]) -> Result<Vec<(usize, usize)>> {
    let mut scored = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (k, g) in gt.iter().enumerate() {
            let d = dsc(p.mask, g.mask)?;
            if d > PAIRING_DSC {
                scored.push((d, i, k));
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_g) = (vec![false; pred.len()], vec![false; gt.len()]);
    let mut pairs = Vec::new();
    for (_, i, k) in scored {
        if !used_p[i] && !used_g[k] {
            used_p[i] = true;
            used_g[k] = true;
            pairs.push((i, k));
        }
    }
    pairs.sort();
    Ok(pairs)
}

/// Running counts for one aspect.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectCounts {
    pub correct: usize,
    pub predicted: usize,
    pub ground_truth: usize,
}

impl AspectCounts {
    /// `None` when nothing was predicted.
    pub fn precision(&self) -> Option<f64> {
        (self.predicted > 0).then(|| self.correct as f64 / self.predicted as f64)
    }

    /// `None` when there is no ground truth.
    pub fn recall(&self) -> Option<f64> {
        (self.ground_truth > 0).then(|| self.correct as f64 / self.ground_truth as f64)
    }
}

/// Adds one sample's lesion-level matching outcome to `counts`.
pub fn attribute_matching_metrics(
    pred: &[LesionRecord],
    gt: &[LesionRecord],
    counts: &mut BTreeMap<Aspect, AspectCounts>,
) -> Result<()> {
    let pairs = pair_lesions(pred, gt)?;
    for aspect in Aspect::ALL {
        let c = counts.entry(aspect).or_default();
        c.predicted += pred.len();
        c.ground_truth += gt.len();
        c.correct += pairs
            .iter()
            .filter(|&&(i, k)| {
                let p = pred[i].report.get(aspect);
                p.is_some() && p == gt[k].report.get(aspect)
            })
            .count();
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// Overlap of the voxels identified as this class.
    pub dsc: f64,
    pub nsd: f64,
    /// Overlap of all foreground voxels, ignoring the identified disease.
    pub foreground_dsc: f64,
    /// Number of samples containing the class.
    pub support: usize,
    /// Held out from training.
    pub zero_shot: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub counts: AspectCounts,
}

/// Evaluation summary with stable key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: BTreeMap<String, ClassMetrics>,
    pub aspects: BTreeMap<String, AspectMetrics>,
    pub seen_mean_dsc: Option<f64>,
    pub unseen_mean_dsc: Option<f64>,
    pub seen_mean_nsd: Option<f64>,
    pub unseen_mean_nsd: Option<f64>,
}

impl MetricReport {
    pub fn new(classes: BTreeMap<String, ClassMetrics>, counts: &BTreeMap<Aspect, AspectCounts>) -> Self {
        let mean = |zero_shot: bool, f: fn(&ClassMetrics) -> f64| {
            let v: Vec<f64> = classes.values().filter(|c| c.zero_shot == zero_shot).map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let aspects = counts
            .iter()
            .map(|(a, c)| (a.to_string(), AspectMetrics { precision: c.precision(), recall: c.recall(), counts: *c }))
            .collect();
        MetricReport {
            seen_mean_dsc: mean(false, |c| c.dsc),
            unseen_mean_dsc: mean(true, |c| c.dsc),
            seen_mean_nsd: mean(false, |c| c.nsd),
            unseen_mean_nsd: mean(true, |c| c.nsd),
            classes,
            aspects,
        }
    }

    pub fn aspect(&self, aspect: Aspect) -> Option<&AspectMetrics> {
        self.aspects.get(aspect.name())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::AttributeSchema;
    use proptest::prelude::*;

    fn cube(shape: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Vec<u8> {
        let mut m = vec![0u8; shape.iter().product()];
        for x in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for z in lo[2]..hi[2] {
                    m[(x * shape[1] + y) * shape[2] + z] = 1;
                }
            }
        }
        m
    }

    fn brute_nsd(a: &[u8], b: &[u8], shape: [usize; 3], sp: [f64; 3], tol: f64) -> f64 {
        let (ba, bb) = (boundary(a, shape), boundary(b, shape));
        let pos = |v: usize| {
            let (x, y, z) = (v / (shape[1] * shape[2]), v / shape[2] % shape[1], v % shape[2]);
            [x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]]
        };
        let near = |from: &[usize], to: &[usize]| {
            from.iter()
                .filter(|&&u| {
                    to.iter().any(|&w| {
                        let (p, q) = (pos(u), pos(w));
                        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt() <= tol
                    })
                })
                .count()
        };
        (near(&ba, &bb) + near(&bb, &ba)) as f64 / (ba.len() + bb.len()) as f64
    }

    #[test]
    fn dsc_cases() {
        let a = [1u8, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
        let b = [0u8, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1];
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        assert_eq!(dsc(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert_eq!(dsc(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert!(dsc(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn nsd_conventions() {
        let s = [6; 3];
        let a = cube(s, [1; 3], [4; 3]);
        assert_eq!(nsd(&a, &a, s, [1.0; 3], 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &vec![0; 216], s, [1.0; 3], 1.0).unwrap(), 0.0);
        assert_eq!(nsd(&vec![0; 216], &vec![0; 216], s, [1.0; 3], 1.0).unwrap(), 1.0);
    }

    #[test]
    fn shifted_cube_matches_brute_force() {
        let s = [8; 3];
        let a = cube(s, [2; 3], [6; 3]);
        let b = cube(s, [3, 2, 2], [7, 6, 6]);
        for tol in [0.5, 1.0, 1.5] {
            let got = nsd(&a, &b, s, [1.0; 3], tol).unwrap();
            assert!((got - brute_nsd(&a, &b, s, [1.0; 3], tol)).abs() < 1e-12, "tol {tol}");
        }
    }

    #[test]
    fn matching_counts() {
        let s = AttributeSchema::default_schema();
        let r1 = StructuredReport::from_pairs(s.aspects().map(|a| (a, s.vocab(a)[0].clone())));
        let mut r2 = r1.clone();
        r2.set(Aspect::Shape, "Cystic");
        let m1 = [1u8, 1, 0, 0];
        let m2 = [0u8, 0, 1, 1];
        let gt = [LesionRecord { mask: &m1, report: &r1 }, LesionRecord { mask: &m2, report: &r1 }];
        let pred = [LesionRecord { mask: &m1, report: &r1 }, LesionRecord { mask: &m2, report: &r2 }];
        let mut counts = BTreeMap::new();
        attribute_matching_metrics(&pred, &gt, &mut counts).unwrap();
        assert_eq!(counts[&Aspect::Shape].precision(), Some(0.5));
        assert_eq!(counts[&Aspect::Shape].recall(), Some(0.5));
        assert_eq!(counts[&Aspect::Location].precision(), Some(1.0));

        let mut empty = BTreeMap::new();
        attribute_matching_metrics(&[], &gt, &mut empty).unwrap();
        assert_eq!(empty[&Aspect::Location].recall(), Some(0.0));
        assert_eq!(empty[&Aspect::Location].precision(), None);
    }

    proptest! {
        #[test]
        fn dsc_symmetric_and_bounded(a in proptest::collection::vec(0u8..2, 27), b in proptest::collection::vec(0u8..2, 27)) {
            let (x, y) = (dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn nsd_agrees_with_brute_force(
            a in proptest::collection::vec(0u8..2, 125),
            b in proptest::collection::vec(0u8..2, 125),
            tol in 0.5f64..3.0,
            sx in 0.5f64..2.0,
        ) {
            let (s, sp) = ([5, 5, 5], [sx, 1.0, 1.3]);
            let got = nsd(&a, &b, s, sp, tol).unwrap();
            prop_assert!((0.0..=1.0).contains(&got));
            if !boundary(&a, s).is_empty() && !boundary(&b, s).is_empty() {
                prop_assert!((got - brute_nsd(&a, &b, s, sp, tol)).abs() < 1e-12);
                prop_assert_eq!(nsd(&a, &b, s, sp, 1e6).unwrap(), 1.0);
            }
        }
    }
}
