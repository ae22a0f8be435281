use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    generate_phantom, lesion_mask, touches_other_region, DensityVariation, Geometry, LesionSpec, Margin, OrganLayout,
    Sample, ScanSettings,
};
use crate::error::{Error, Result};

/// How lesions of one synthetic class are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub name: String,
    pub region: String,
    pub geometries: Vec<Geometry>,
    pub size: (f64, f64),
    pub density_offset: f64,
    /// `None` draws the value per lesion.
    pub variation: Option<DensityVariation>,
    pub margin: Option<Margin>,
    pub touching: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub classes: Vec<ClassProfile>,
}

impl Default for ClassCatalog {
    fn default() -> Self {
        let tumor = |name: &str, region: &str, offset: f64| ClassProfile {
            name: name.into(),
            region: region.into(),
            geometries: vec![Geometry::Sphere, Geometry::Blob],
            size: (3.5, 4.5),
            density_offset: offset,
            variation: None,
            margin: None,
            touching: None,
        };
        let cyst = |name: &str, region: &str| ClassProfile {
            name: name.into(),
            region: region.into(),
            geometries: vec![Geometry::Ellipsoid],
            size: (3.0, 3.8),
            density_offset: -0.9,
            variation: Some(DensityVariation::Homogeneous),
            margin: Some(Margin::WellDefined),
            touching: Some(false),
        };
        ClassCatalog {
            classes: vec![
                tumor("Hepatic Vessel Tumor", "Liver", 0.6),
                cyst("Pancreas Cyst", "Pancreas"),
                tumor("Kidney Tumor", "Kidney", 0.6),
                cyst("Liver Cyst", "Liver"),
                ClassProfile {
                    name: "Kidney Stone".into(),
                    region: "Kidney".into(),
                    geometries: vec![Geometry::Punctate],
                    size: (2.5, 3.0),
                    density_offset: 1.0,
                    variation: Some(DensityVariation::Homogeneous),
                    margin: Some(Margin::WellDefined),
                    touching: Some(false),
                },
                tumor("Gallbladder Tumor", "Gallbladder", -0.45),
            ],
        }
    }
}

impl ClassCatalog {
    pub fn get(&self, name: &str) -> Option<&ClassProfile> {
        self.classes.iter().find(|c| c.name == name)
    }

    /// Draws a lesion of class `name` that fits its region of a `shape` volume.
    pub fn sample_lesion(&self, name: &str, shape: [usize; 3], rng: &mut impl Rng) -> Result<LesionSpec> {
        let p = self.get(name).ok_or_else(|| Error::Config(format!("unknown class {name:?}")))?;
        let region = OrganLayout::index_of(&p.region)
            .ok_or_else(|| Error::Config(format!("class {name:?} has unknown region {:?}", p.region)))?;
        let bounds = OrganLayout::new(shape).bounds(region);
        for _ in 0..200 {
            let geometry = p.geometries[rng.random_range(0..p.geometries.len())];
            let touching = p.touching.unwrap_or_else(|| rng.random_bool(0.5));
            let mut spec = LesionSpec {
                class_name: p.name.clone(),
                geometry,
                center: [0.0; 3],
                size_voxels: rng.random_range(p.size.0..=p.size.1),
                density_offset: p.density_offset,
                density_variation: p.variation.unwrap_or(if rng.random_bool(0.5) {
                    DensityVariation::Heterogeneous
                } else {
                    DensityVariation::Homogeneous
                }),
                margin: p.margin.unwrap_or(if rng.random_bool(0.5) { Margin::IllDefined } else { Margin::WellDefined }),
                organ_region: p.region.clone(),
                touching_neighbor: touching,
                shape_seed: rng.random(),
            };
            let e = spec.extent();
            let touch_axis = touching.then(|| rng.random_range(0..3));
            let mut ok = true;
            for a in 0..3 {
                let (lo, hi) = bounds[a];
                let half = shape[a] / 2;
                let below = lo == 0;
                if touch_axis == Some(a) {
                    let d = rng.random_range(0.3..0.8) * spec.size_voxels;
                    spec.center[a] = if below { half as f64 - 0.5 - d } else { half as f64 - 0.5 + d };
                } else {
                    let (min, max) =
                        if below { (e, half as f64 - 2.0 - e) } else { (half as f64 + 1.0 + e, (hi - 1) as f64 - e) };
                    if min > max {
                        ok = false;
                        break;
                    }
                    spec.center[a] = rng.random_range(min..=max);
                }
            }
            if !ok {
                continue;
            }
            let e_ok = (0..3).all(|a| spec.center[a] - e >= 0.0 && spec.center[a] + e <= (shape[a] - 1) as f64);
            let inside = OrganLayout::new(shape).region_of_point(spec.center) == Some(region);
            if !e_ok || !inside {
                continue;
            }
            let mask = lesion_mask(&spec, shape);
            if mask.contains(&1) && touches_other_region(&mask, shape) == touching {
                return Ok(spec);
            }
        }
        Err(Error::Config(format!("cannot place a {name:?} lesion in a {shape:?} volume")))
    }
}

/// Recipe for a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: Vec<String>,
    pub per_class: usize,
    pub shape: [usize; 3],
    pub seed: u64,
    pub lesions_per_sample: usize,
}

/// Samples cycle through `classes`; with more than one lesion per sample the
/// extra lesions are drawn from the same class list.
pub fn generate_dataset(spec: &DatasetSpec, catalog: &ClassCatalog) -> Result<Vec<Sample>> {
    if spec.lesions_per_sample == 0 {
        return Err(Error::Config("lesions_per_sample must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.per_class * spec.classes.len();
    let mut out = Vec::with_capacity(total);
    for i in 0..total {
        let sample_seed: u64 = rng.random();
        let mut srng = ChaCha8Rng::seed_from_u64(sample_seed);
        let enhanced = srng.random_bool(0.5);
        let scan = ScanSettings::new(spec.shape, enhanced);
        let mut attempt = 0;
        let sample = loop {
            let mut specs = vec![catalog.sample_lesion(&spec.classes[i % spec.classes.len()], spec.shape, &mut srng)?];
            for _ in 1..spec.lesions_per_sample {
                let c = &spec.classes[srng.random_range(0..spec.classes.len())];
                specs.push(catalog.sample_lesion(c, spec.shape, &mut srng)?);
            }
            match generate_phantom(&specs, srng.random(), &scan) {
                Err(Error::Overlap { .. }) if attempt < 50 => attempt += 1,
                other => break other?,
            }
        };
        out.push(sample);
    }
    Ok(out)
}

/// Splits by class composition: all-seen samples train, any unseen lesion
/// sends a sample to the zero-shot test set.
pub fn split_indices<S: AsRef<str>>(
    compositions: &[Vec<S>],
    seen: &BTreeSet<String>,
    unseen: &BTreeSet<String>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if let Some(c) = seen.intersection(unseen).next() {
        return Err(Error::Config(format!("class {c:?} is both seen and unseen")));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, classes) in compositions.iter().enumerate() {
        let mut any_unseen = false;
        for c in classes {
            let c = c.as_ref();
            if unseen.contains(c) {
                any_unseen = true;
            } else if !seen.contains(c) {
                return Err(Error::Config(format!("sample {i} has class {c:?} in neither set")));
            }
        }
        if any_unseen { test.push(i) } else { train.push(i) }
    }
    Ok((train, test))
}

pub fn split_dataset(
    samples: Vec<Sample>,
    seen: &BTreeSet<String>,
    unseen: &BTreeSet<String>,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let comps: Vec<Vec<&str>> = samples.iter().map(|s| s.classes()).collect();
    let (train_idx, _) = split_indices(&comps, seen, unseen)?;
    let train_idx: BTreeSet<usize> = train_idx.into_iter().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if train_idx.contains(&i) { train.push(s) } else { test.push(s) }
    }
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub classes: Vec<String>,
}

/// Lists sample files of a dataset directory, relative to the manifest.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format("manifest", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::{query_disease, KnowledgeTable};

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn split_by_definition() {
        let comps = vec![vec!["A"], vec!["B"], vec!["C"], vec!["A", "C"]];
        let (train, test) = split_indices(&comps, &set(&["A", "B"]), &set(&["C"])).unwrap();
        assert_eq!(train, vec![0, 1]);
        assert_eq!(test, vec![2, 3]);
    }

    #[test]
    fn overlapping_or_unknown_classes_rejected() {
        let comps = vec![vec!["A"]];
        assert!(matches!(split_indices(&comps, &set(&["A"]), &set(&["A"])), Err(Error::Config(_))));
        assert!(matches!(split_indices(&comps, &set(&["B"]), &set(&["C"])), Err(Error::Config(_))));
    }

    #[test]
    fn catalog_lesions_match_their_knowledge_rows() {
        let catalog = ClassCatalog::default();
        let table = KnowledgeTable::default_table();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for class in &catalog.classes {
            for _ in 0..6 {
                let spec = catalog.sample_lesion(&class.name, [32; 3], &mut rng).unwrap();
                let mask = lesion_mask(&spec, [32; 3]);
                assert_eq!(touches_other_region(&mask, [32; 3]), spec.touching_neighbor);
                let enhanced = rng.random_bool(0.5);
                let s = generate_phantom(&[spec], 1, &ScanSettings::new([32; 3], enhanced)).unwrap();
                let ranked = query_disease(&s.lesions[0].labels, &table).unwrap();
                assert_eq!(ranked[0], (class.name.clone(), 8), "{:?}", s.lesions[0].labels);
                assert!(ranked[1].1 < 8);
            }
        }
    }

    #[test]
    fn dataset_generation_is_seeded() {
        let spec = DatasetSpec {
            classes: vec!["Kidney Stone".into(), "Liver Cyst".into()],
            per_class: 2,
            shape: [32; 3],
            seed: 5,
            lesions_per_sample: 1,
        };
        let a = generate_dataset(&spec, &ClassCatalog::default()).unwrap();
        let b = generate_dataset(&spec, &ClassCatalog::default()).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        assert_eq!(a[1].classes(), vec!["Liver Cyst"]);
    }

    #[test]
    fn split_never_puts_unseen_voxels_in_training() {
        let spec = DatasetSpec {
            classes: ClassCatalog::default().classes.iter().map(|c| c.name.clone()).collect(),
            per_class: 1,
            shape: [32; 3],
            seed: 8,
            lesions_per_sample: 2,
        };
        let samples = generate_dataset(&spec, &ClassCatalog::default()).unwrap();
        let unseen = set(&["Liver Cyst", "Kidney Tumor"]);
        let seen: BTreeSet<String> = spec.classes.iter().filter(|c| !unseen.contains(*c)).cloned().collect();
        let (train, test) = split_dataset(samples, &seen, &unseen).unwrap();
        assert_eq!(train.len() + test.len(), 6);
        for s in &train {
            assert!(s.lesions.iter().all(|l| !unseen.contains(&l.spec.class_name)));
        }
        for s in &test {
            assert!(s.lesions.iter().any(|l| unseen.contains(&l.spec.class_name)));
        }
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            samples: vec![ManifestEntry { file: "s0.mlna".into(), classes: vec!["Liver Cyst".into()] }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(Manifest::FILE_NAME);
        m.write(&p).unwrap();
        assert_eq!(Manifest::read(&p).unwrap(), m);
    }
}
