//! Procedural phantom volumes with parameterised lesions, their ground-truth
//! masks and attribute labels.

mod dataset;
mod io;

pub use dataset::{
    generate_dataset, split_dataset, split_indices, ClassCatalog, ClassProfile, DatasetSpec, Manifest,
    ManifestEntry,
};
pub use io::{read_volume, write_volume};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attributes::{Aspect, StructuredReport};
use crate::error::{Error, Result};

/// Organ names of the eight octant regions, indexed by
/// `(x >= H/2) | (y >= W/2) << 1 | (z >= D/2) << 2`.
pub const ORGANS: [&str; 8] = [
    "Liver",
    "Kidney",
    "Pancreas",
    "Gallbladder",
    "Colon",
    "Right Lung",
    "Left Lung",
    "Hepatic Vessel",
];

const ORGAN_BASE: [f64; 8] = [0.30, 0.55, 0.10, -0.20, 0.80, -0.90, -0.75, 1.05];
const ENHANCE_GAIN: [f64; 8] = [0.50, 0.80, 0.40, 0.20, 0.30, 0.25, 0.25, 0.70];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Sphere,
    Ellipsoid,
    Blob,
    Shell,
    Punctate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityVariation {
    Homogeneous,
    Heterogeneous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Margin {
    WellDefined,
    IllDefined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub class_name: String,
    pub geometry: Geometry,
    /// Voxel coordinates `(x, y, z)` along `(H, W, D)`.
    pub center: [f64; 3],
    pub size_voxels: f64,
    pub density_offset: f64,
    pub density_variation: DensityVariation,
    pub margin: Margin,
    pub organ_region: String,
    pub touching_neighbor: bool,
    /// Seeds the blob outline and heterogeneous texture.
    pub shape_seed: u64,
}

impl LesionSpec {
    /// Radius of a ball around the centre that contains the whole lesion.
    pub fn extent(&self) -> f64 {
        let s = self.size_voxels;
        match self.geometry {
            Geometry::Sphere | Geometry::Shell | Geometry::Punctate => s,
            Geometry::Ellipsoid => s * ELLIPSOID_AXES[0],
            Geometry::Blob => s * (1.0 + BLOB_MAX_AMPLITUDE),
        }
    }

    fn is_fluid(&self) -> bool {
        self.density_offset <= -0.7
    }
}

const ELLIPSOID_AXES: [f64; 3] = [1.35, 1.0, 0.75];
const BLOB_HARMONICS: usize = 3;
const BLOB_MAX_AMPLITUDE: f64 = 0.45;

/// Acquisition settings shared by all lesions of one volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanSettings {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub enhanced: bool,
}

impl ScanSettings {
    pub fn new(shape: [usize; 3], enhanced: bool) -> Self {
        ScanSettings { shape, spacing: [1.0; 3], enhanced }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub enhanced: bool,
    /// Row-major `H × W × D`, `D` fastest.
    pub data: Vec<f32>,
}

impl Volume {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lesion {
    pub spec: LesionSpec,
    /// One byte per voxel, 0 or 1.
    pub mask: Vec<u8>,
    pub labels: StructuredReport,
}

impl Lesion {
    pub fn voxel_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Volume,
    pub lesions: Vec<Lesion>,
}

impl Sample {
    pub fn classes(&self) -> Vec<&str> {
        self.lesions.iter().map(|l| l.spec.class_name.as_str()).collect()
    }
}

pub fn validate_shape(shape: [usize; 3]) -> Result<()> {
    if shape.iter().any(|&n| n == 0 || n % 32 != 0) {
        return Err(Error::Shape(format!("volume shape {shape:?} must be positive multiples of 32")));
    }
    Ok(())
}

/// Octant region lookup for a volume shape.
#[derive(Clone, Copy, Debug)]
pub struct OrganLayout {
    shape: [usize; 3],
}

impl OrganLayout {
    pub fn new(shape: [usize; 3]) -> Self {
        OrganLayout { shape }
    }

    pub fn region_index(&self, p: [usize; 3]) -> usize {
        (0..3).map(|a| usize::from(p[a] >= self.shape[a] / 2) << a).sum()
    }

    pub fn region_of_point(&self, c: [f64; 3]) -> Option<usize> {
        let mut idx = 0;
        for (a, (&x, &n)) in c.iter().zip(&self.shape).enumerate() {
            if !(x >= 0.0 && x <= (n - 1) as f64) {
                return None;
            }
            if x >= (n / 2) as f64 {
                idx |= 1 << a;
            }
        }
        Some(idx)
    }

    pub fn index_of(name: &str) -> Option<usize> {
        ORGANS.iter().position(|o| *o == name)
    }

    /// Half-open voxel range of a region along each axis.
    pub fn bounds(&self, region: usize) -> [(usize, usize); 3] {
        std::array::from_fn(|a| {
            let half = self.shape[a] / 2;
            if region >> a & 1 == 1 {
                (half, self.shape[a])
            } else {
                (0, half)
            }
        })
    }
}

/// Attribute values implied by a lesion's parameters.
pub fn derive_labels(spec: &LesionSpec, enhanced: bool) -> StructuredReport {
    let shape = match spec.geometry {
        Geometry::Sphere => "Round-like",
        Geometry::Ellipsoid => "Cystic",
        Geometry::Blob => "Irregular",
        Geometry::Shell => "Wall thickening",
        Geometry::Punctate => "Nodular",
    };
    let o = spec.density_offset;
    let density = if o <= -0.7 {
        "Hypodense fluid-like lesion"
    } else if o < -0.1 {
        "Hypodense lesion"
    } else if o <= 0.1 {
        "Isodense lesion"
    } else {
        "Hyperdense lesion"
    };
    let variation = match spec.density_variation {
        DensityVariation::Homogeneous => "Homogeneous",
        DensityVariation::Heterogeneous => "Heterogeneous",
    };
    let surface = match spec.margin {
        Margin::WellDefined => "Well-defined margin",
        Margin::IllDefined => "Ill-defined margin",
    };
    let relationship = if spec.touching_neighbor {
        "Close relationship with adjacent organs"
    } else {
        "No close relationship with surrounding organs"
    };
    let enhancement = if enhanced { "Enhanced CT" } else { "Non-contrast CT" };
    StructuredReport::from_pairs([
        (Aspect::Location, spec.organ_region.as_str()),
        (Aspect::Shape, shape),
        (Aspect::Density, density),
        (Aspect::DensityVariations, variation),
        (Aspect::Surface, surface),
        (Aspect::Enhancement, enhancement),
        (Aspect::Relationship, relationship),
        (Aspect::SpecificFeatures, specific_feature(spec)),
    ])
}

fn specific_feature(spec: &LesionSpec) -> &'static str {
    if spec.is_fluid() {
        "Cyst"
    } else if spec.geometry == Geometry::Punctate || has_calcified_focus(spec) {
        "Stone"
    } else if spec.density_offset < 0.0 {
        "Presence of decreased density areas"
    } else {
        "Presence of increased density areas"
    }
}

/// Solid gallbladder lesions carry a small bright focus at their centre.
fn has_calcified_focus(spec: &LesionSpec) -> bool {
    spec.organ_region == "Gallbladder" && !spec.is_fluid() && spec.geometry != Geometry::Punctate
}

/// Analytic membership test for a lesion, relative to its centre.
struct Shape {
    geometry: Geometry,
    size: f64,
    harmonics: Vec<([f64; 3], f64, f64)>,
}

impl Shape {
    fn new(spec: &LesionSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.shape_seed);
        let harmonics = (0..BLOB_HARMONICS)
            .map(|_| {
                let w = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let amp = rng.random_range(0.08..BLOB_MAX_AMPLITUDE / BLOB_HARMONICS as f64);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (w, amp, phase)
            })
            .collect();
        Shape { geometry: spec.geometry, size: spec.size_voxels, harmonics }
    }

    fn contains(&self, d: [f64; 3]) -> bool {
        let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let s = self.size;
        match self.geometry {
            Geometry::Sphere | Geometry::Punctate => r2 <= s * s,
            Geometry::Ellipsoid => (0..3).map(|a| (d[a] / (s * ELLIPSOID_AXES[a])).powi(2)).sum::<f64>() <= 1.0,
            Geometry::Shell => {
                let inner = s - (0.35 * s).max(1.5);
                r2 <= s * s && r2 >= inner * inner
            }
            Geometry::Blob => {
                let r = r2.sqrt();
                if r == 0.0 {
                    return true;
                }
                let u = [d[0] / r, d[1] / r, d[2] / r];
                let bump: f64 = self
                    .harmonics
                    .iter()
                    .map(|(w, amp, ph)| amp * (w[0] * u[0] + w[1] * u[1] + w[2] * u[2] + ph).sin())
                    .sum();
                r <= s * (1.0 + bump)
            }
        }
    }
}

fn index(shape: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (x * shape[1] + y) * shape[2] + z
}

/// Voxel mask of one lesion.
pub fn lesion_mask(spec: &LesionSpec, shape: [usize; 3]) -> Vec<u8> {
    let s = Shape::new(spec);
    let e = spec.extent();
    let mut mask = vec![0u8; shape.iter().product()];
    let range = |a: usize| {
        let lo = (spec.center[a] - e).floor().max(0.0) as usize;
        let hi = ((spec.center[a] + e).ceil() as usize).min(shape[a] - 1);
        lo..=hi
    };
    for x in range(0) {
        for y in range(1) {
            for z in range(2) {
                let d = [x as f64 - spec.center[0], y as f64 - spec.center[1], z as f64 - spec.center[2]];
                if s.contains(d) {
                    mask[index(shape, x, y, z)] = 1;
                }
            }
        }
    }
    mask
}

/// True when some mask voxel has a face neighbour in a different region.
pub fn touches_other_region(mask: &[u8], shape: [usize; 3]) -> bool {
    let layout = OrganLayout::new(shape);
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                if mask[index(shape, x, y, z)] == 0 {
                    continue;
                }
                let own = layout.region_index([x, y, z]);
                let p = [x, y, z];
                for a in 0..3 {
                    for step in [-1isize, 1] {
                        let q = p[a] as isize + step;
                        if q < 0 || q >= shape[a] as isize {
                            continue;
                        }
                        let mut n = p;
                        n[a] = q as usize;
                        if layout.region_index(n) != own {
                            return true;
                        }
                    }
                }
            }
        }
    }
    false
}

fn check_spec(i: usize, spec: &LesionSpec, shape: [usize; 3]) -> Result<()> {
    let bounds = |reason: String| Error::Bounds { index: i, reason };
    if !(spec.size_voxels.is_finite() && spec.size_voxels > 0.0) {
        return Err(bounds(format!("size {} must be positive", spec.size_voxels)));
    }
    if !spec.density_offset.is_finite() {
        return Err(bounds("density offset must be finite".into()));
    }
    let e = spec.extent();
    for (a, (&c, &n)) in spec.center.iter().zip(&shape).enumerate() {
        if !(c - e >= 0.0 && c + e <= (n - 1) as f64) {
            return Err(bounds(format!("axis {a}: centre {c} with extent {e} leaves 0..{n}")));
        }
    }
    let layout = OrganLayout::new(shape);
    let want = OrganLayout::index_of(&spec.organ_region)
        .ok_or_else(|| bounds(format!("unknown organ region {:?}", spec.organ_region)))?;
    if layout.region_of_point(spec.center) != Some(want) {
        return Err(bounds(format!("centre {:?} is not inside region {}", spec.center, spec.organ_region)));
    }
    Ok(())
}

/// Separable Gaussian blur of a scalar field, zero outside the volume.
fn blur(field: &[f64], shape: [usize; 3], sigma: f64) -> Vec<f64> {
    let radius = (2.5 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut cur = field.to_vec();
    for a in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let coord = (i / strides[a]) % shape[a];
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let q = coord as isize + t as isize - radius;
                if q >= 0 && q < shape[a] as isize {
                    acc += k * cur[(i as isize + (q - coord as isize) * strides[a] as isize) as usize];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Renders a phantom with the given lesions. Identical inputs give identical
/// bytes.
pub fn generate_phantom(specs: &[LesionSpec], background_texture_seed: u64, scan: &ScanSettings) -> Result<Sample> {
    let shape = scan.shape;
    validate_shape(shape)?;
    for (i, s) in specs.iter().enumerate() {
        check_spec(i, s, shape)?;
    }
    let masks: Vec<Vec<u8>> = specs.iter().map(|s| lesion_mask(s, shape)).collect();
    for (i, m) in masks.iter().enumerate() {
        if !m.contains(&1) {
            return Err(Error::Bounds { index: i, reason: "lesion covers no voxel centre".into() });
        }
    }
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            if masks[i].iter().zip(&masks[j]).any(|(&a, &b)| a & b == 1) {
                return Err(Error::Overlap { first: i, second: j });
            }
        }
    }

    let layout = OrganLayout::new(shape);
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(background_texture_seed);
    let waves: Vec<([f64; 3], f64)> = (0..4)
        .map(|_| {
            let f = std::array::from_fn(|_| rng.random_range(1..=3) as f64 * std::f64::consts::TAU);
            (f, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let noise = Normal::new(0.0, 0.04).expect("valid sigma");
    let mut tissue = vec![0.0f64; n];
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let region = layout.region_index([x, y, z]);
                let mut v = ORGAN_BASE[region];
                if scan.enhanced {
                    v += ENHANCE_GAIN[region];
                }
                let p = [x as f64 / shape[0] as f64, y as f64 / shape[1] as f64, z as f64 / shape[2] as f64];
                for (f, ph) in &waves {
                    v += 0.04 * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + ph).cos();
                }
                tissue[index(shape, x, y, z)] = v + noise.sample(&mut rng);
            }
        }
    }

    let mut data = tissue.clone();
    for (spec, mask) in specs.iter().zip(&masks) {
        let mut lrng = ChaCha8Rng::seed_from_u64(spec.shape_seed ^ 0x9e37_79b9_7f4a_7c15);
        let texture = Normal::new(0.0, 0.2).expect("valid sigma");
        let focus = has_calcified_focus(spec);
        let alpha: Vec<f64> = match spec.margin {
            Margin::WellDefined => mask.iter().map(|&m| m as f64).collect(),
            Margin::IllDefined => blur(&mask.iter().map(|&m| m as f64).collect::<Vec<_>>(), shape, 1.2),
        };
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    let i = index(shape, x, y, z);
                    if alpha[i] <= 1e-6 {
                        continue;
                    }
                    let mut lesion = tissue[i] + spec.density_offset;
                    if spec.density_variation == DensityVariation::Heterogeneous {
                        lesion += texture.sample(&mut lrng);
                    }
                    if focus {
                        let d2 = (x as f64 - spec.center[0]).powi(2)
                            + (y as f64 - spec.center[1]).powi(2)
                            + (z as f64 - spec.center[2]).powi(2);
                        if d2 <= 1.5 * 1.5 {
                            lesion += 1.2;
                        }
                    }
                    data[i] = data[i] * (1.0 - alpha[i]) + lesion * alpha[i];
                }
            }
        }
    }

    let lesions = specs
        .iter()
        .zip(masks)
        .map(|(spec, mask)| Lesion { labels: derive_labels(spec, scan.enhanced), spec: spec.clone(), mask })
        .collect();
    Ok(Sample {
        volume: Volume {
            shape,
            spacing: scan.spacing,
            enhanced: scan.enhanced,
            data: data.into_iter().map(|v| v as f32).collect(),
        },
        lesions,
    })
}
