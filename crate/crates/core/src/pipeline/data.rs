use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{read_volume, write_volume, Manifest, ManifestEntry, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Purpose {
    Train,
    Eval,
}

/// One annotated sample handed out by a [`SampleStore`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub sample: String,
    pub classes: Vec<String>,
    pub purpose: Purpose,
}

/// Shared log of every sample read, for auditing the seen/unseen split.
#[derive(Clone, Debug, Default)]
pub struct AccessLog(Arc<Mutex<Vec<AccessRecord>>>);

impl AccessLog {
    fn record(&self, r: AccessRecord) {
        self.0.lock().expect("access log poisoned").push(r);
    }

    pub fn records(&self) -> Vec<AccessRecord> {
        self.0.lock().expect("access log poisoned").clone()
    }

    /// Reads for `purpose` whose annotations include any of `classes`.
    pub fn reads_of(&self, classes: &BTreeSet<String>, purpose: Purpose) -> usize {
        self.records().iter().filter(|r| r.purpose == purpose && r.classes.iter().any(|c| classes.contains(c))).count()
    }
}

#[derive(Clone, Debug)]
enum Source {
    Dir(PathBuf),
    Memory(Vec<Sample>),
}

/// A dataset on disk or in memory; every annotated read is logged.
#[derive(Clone, Debug)]
pub struct SampleStore {
    source: Source,
    manifest: Manifest,
    log: AccessLog,
}

impl SampleStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = Manifest::read(dir.join(Manifest::FILE_NAME))?;
        Ok(SampleStore { source: Source::Dir(dir.to_path_buf()), manifest, log: AccessLog::default() })
    }

    pub fn in_memory(samples: Vec<Sample>) -> Self {
        let manifest = manifest_for(&samples);
        SampleStore { source: Source::Memory(samples), manifest, log: AccessLog::default() }
    }

    /// Writes one file per sample and a manifest into `dir`.
    pub fn write(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<Manifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = manifest_for(samples);
        for (s, e) in samples.iter().zip(&manifest.samples) {
            write_volume(s, dir.join(&e.file))?;
        }
        manifest.write(dir.join(Manifest::FILE_NAME))?;
        Ok(manifest)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn log(&self) -> &AccessLog {
        &self.log
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn load(&self, index: usize, purpose: Purpose) -> Result<Sample> {
        let entry = self
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| Error::Config(format!("sample {index} out of {}", self.len())))?;
        let sample = match &self.source {
            Source::Dir(dir) => read_volume(dir.join(&entry.file))?,
            Source::Memory(v) => v[index].clone(),
        };
        self.log.record(AccessRecord {
            sample: entry.file.clone(),
            classes: sample.classes().into_iter().map(String::from).collect(),
            purpose,
        });
        Ok(sample)
    }

    pub fn load_all(&self, purpose: Purpose) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load(i, purpose)).collect()
    }

    /// Loads the samples whose manifest lists only seen classes. A file whose
    /// annotations disagree with its manifest entry is rejected.
    pub fn load_training(&self, seen: &BTreeSet<String>) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for (i, e) in self.manifest.samples.iter().enumerate() {
            if e.classes.iter().all(|c| seen.contains(c)) {
                let s = self.load(i, Purpose::Train)?;
                if let Some(c) = s.classes().into_iter().find(|c| !seen.contains(*c)) {
                    return Err(Error::Config(format!("{} holds unseen class {c:?} despite its manifest", e.file)));
                }
                out.push(s);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no training samples with only seen classes".into()));
        }
        Ok(out)
    }
}

fn manifest_for(samples: &[Sample]) -> Manifest {
    Manifest {
        samples: samples
            .iter()
            .enumerate()
            .map(|(i, s)| ManifestEntry {
                file: format!("sample_{i:04}.mlna"),
                classes: s.classes().into_iter().map(String::from).collect(),
            })
            .collect(),
    }
}
