use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Lesion, LesionSpec, Sample, Volume};
use crate::attributes::StructuredReport;
use crate::error::{Error, Result};
use crate::io::{put_text, Reader};

const MAGIC: &[u8; 4] = b"MLNA";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    shape: [usize; 3],
    spacing: [f64; 3],
    enhanced: bool,
    lesions: Vec<LesionMeta>,
}

#[derive(Serialize, Deserialize)]
struct LesionMeta {
    spec: LesionSpec,
    labels: StructuredReport,
}

pub fn encode_sample(sample: &Sample) -> Result<Vec<u8>> {
    let v = &sample.volume;
    let meta = Meta {
        shape: v.shape,
        spacing: v.spacing,
        enhanced: v.enhanced,
        lesions: sample
            .lesions
            .iter()
            .map(|l| LesionMeta { spec: l.spec.clone(), labels: l.labels.clone() })
            .collect(),
    };
    let json = serde_json::to_string(&meta).map_err(|e| Error::format("volume", e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + v.len() * (4 + sample.lesions.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_text(&mut out, &json);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for l in &sample.lesions {
        out.extend_from_slice(&l.mask);
    }
    Ok(out)
}

pub fn decode_sample(bytes: &[u8]) -> Result<Sample> {
    let mut r = Reader::new(bytes, "volume");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("volume", format!("unsupported version {version}")));
    }
    let meta: Meta = serde_json::from_str(r.text()?).map_err(|e| Error::format("volume", e.to_string()))?;
    let n: usize = meta.shape.iter().product();
    let data = r.f32s(n)?;
    let mut lesions = Vec::with_capacity(meta.lesions.len());
    for l in meta.lesions {
        let mask = r.take(n)?.to_vec();
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::format("volume", "mask bytes must be 0 or 1"));
        }
        lesions.push(Lesion { spec: l.spec, mask, labels: l.labels });
    }
    r.finish()?;
    Ok(Sample {
        volume: Volume { shape: meta.shape, spacing: meta.spacing, enhanced: meta.enhanced, data },
        lesions,
    })
}

pub fn write_volume(sample: &Sample, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_sample(sample)?).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Sample> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sample(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, DensityVariation, Geometry, Margin, ScanSettings};

    fn sample() -> Sample {
        let spec = LesionSpec {
            class_name: "Liver Cyst".into(),
            geometry: Geometry::Ellipsoid,
            center: [7.3, 8.1, 7.9],
            size_voxels: 3.1,
            density_offset: -0.9,
            density_variation: DensityVariation::Heterogeneous,
            margin: Margin::IllDefined,
            organ_region: "Liver".into(),
            touching_neighbor: false,
            shape_seed: 42,
        };
        generate_phantom(&[spec], 11, &ScanSettings::new([32; 3], true)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let s = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mlna");
        write_volume(&s, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, s);
        assert!(back.volume.data.iter().zip(&s.volume.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = encode_sample(&sample()).unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_sample(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn unknown_version_is_named() {
        let mut bytes = encode_sample(&sample()).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        match decode_sample(&bytes) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("version 7"), "{reason}"),
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        assert!(matches!(decode_sample(&bytes), Err(Error::Format { .. })));
    }
}
