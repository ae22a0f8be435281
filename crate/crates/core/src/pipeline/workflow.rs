use std::collections::BTreeSet;

use malenia_tensor::Scalar;

use super::checkpoint::Checkpoint;
use super::config::{Config, DataConfig};
use super::model::Malenia;
use super::train::{EpochRecord, Trainer};
use crate::attributes::{AttributeSchema, HashingProvider, TextProvider};
use crate::error::{Error, Result};
use crate::phantom::{generate_dataset, ClassCatalog, DatasetSpec, Sample};

/// The default text provider for a configuration.
pub fn default_provider(config: &Config) -> HashingProvider {
    HashingProvider::new(config.model.text_dim, config.model.provider_seed)
}

/// Training samples of the seen classes only.
pub fn generate_training_set(data: &DataConfig, catalog: &ClassCatalog) -> Result<Vec<Sample>> {
    let spec = DatasetSpec {
        classes: data.seen.clone(),
        per_class: data.train_per_class,
        shape: data.shape,
        seed: data.seed,
        lesions_per_sample: data.lesions_per_sample,
    };
    generate_dataset(&spec, catalog)
}

/// Held-out samples of every seen and unseen class, drawn from a stream
/// disjoint from the training set.
pub fn generate_test_set(data: &DataConfig, catalog: &ClassCatalog) -> Result<Vec<Sample>> {
    let spec = DatasetSpec {
        classes: data.seen.iter().chain(&data.unseen).cloned().collect(),
        per_class: data.test_per_class,
        shape: data.shape,
        seed: data.seed.wrapping_add(0x5EED_0001),
        lesions_per_sample: 1,
    };
    generate_dataset(&spec, catalog)
}

/// Builds a fresh model and trains it on `samples`, which must hold only
/// seen classes.
pub fn train<T: Scalar>(
    config: &Config,
    schema: AttributeSchema,
    provider: &dyn TextProvider,
    samples: Vec<Sample>,
    progress: impl FnMut(&EpochRecord),
) -> Result<Checkpoint<T>> {
    let unseen: BTreeSet<&str> = config.data.unseen.iter().map(String::as_str).collect();
    if let Some(c) = samples.iter().flat_map(|s| s.classes()).find(|c| unseen.contains(c)) {
        return Err(Error::Config(format!("training set contains unseen class {c:?}")));
    }
    let model = Malenia::new(&config.model, schema, provider, config.train.seed)?;
    let mut trainer = Trainer::new(model, config.train.clone(), config.loss.clone(), samples)?;
    trainer.run(progress)?;
    Checkpoint::new(config.clone(), trainer.model, Some(trainer.optimizer), trainer.epoch, trainer.curve)
}
