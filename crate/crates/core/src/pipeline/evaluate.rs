use std::collections::{BTreeMap, BTreeSet};

use malenia_tensor::Scalar;

use super::model::Malenia;
use crate::attributes::{Aspect, EmbeddingBank, KnowledgeTable};
use crate::error::{Error, Result};
use crate::metrics::{attribute_matching_metrics, dsc, nsd, AspectCounts, ClassMetrics, LesionRecord, MetricReport};
use crate::phantom::Sample;

/// Environment variable that forces single-threaded, fixed-order execution.
pub const DETERMINISTIC_ENV: &str = "MALENIA_DETERMINISTIC";

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

#[derive(Clone, Copy, Debug, Default)]
struct Scores {
    dsc: f64,
    nsd: f64,
    foreground_dsc: f64,
}

struct SampleOutcome {
    classes: BTreeMap<String, Scores>,
    counts: BTreeMap<Aspect, AspectCounts>,
}

fn union(masks: impl Iterator<Item = impl AsRef<[u8]>>, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    for m in masks {
        for (o, &x) in out.iter_mut().zip(m.as_ref()) {
            *o |= (x != 0) as u8;
        }
    }
    out
}

fn evaluate_sample<T: Scalar>(
    model: &Malenia<T>,
    sample: &Sample,
    bank: &EmbeddingBank,
    table: &KnowledgeTable,
    tolerance: f64,
) -> Result<SampleOutcome> {
    let bundle = model.infer(&sample.volume, bank, table)?;
    let (shape, spacing, len) = (sample.volume.shape, sample.volume.spacing, sample.volume.len());
    let all = union(sample.lesions.iter().map(|l| &l.mask), len);
    let foreground_dsc = dsc(&bundle.foreground_mask(), &all)?;
    let mut classes = BTreeMap::new();
    for class in sample.classes().into_iter().collect::<BTreeSet<_>>() {
        let gt = union(sample.lesions.iter().filter(|l| l.spec.class_name == class).map(|l| &l.mask), len);
        let pred = bundle.class_mask(class);
        let scores = Scores {
            dsc: dsc(&pred, &gt)?,
            nsd: nsd(&pred, &gt, shape, spacing, tolerance)?,
            foreground_dsc,
        };
        classes.insert(class.to_string(), scores);
    }
    let lesions = bundle.lesions();
    let pred: Vec<LesionRecord> = lesions.iter().map(|(t, m)| LesionRecord { mask: m, report: &t.report }).collect();
    let gt: Vec<LesionRecord> = sample.lesions.iter().map(|l| LesionRecord { mask: &l.mask, report: &l.labels }).collect();
    let mut counts = BTreeMap::new();
    attribute_matching_metrics(&pred, &gt, &mut counts)?;
    Ok(SampleOutcome { classes, counts })
}

/// Per-class DSC/NSD and per-aspect matching metrics over `samples`. Classes
/// in `unseen` are flagged zero-shot. Samples are processed in parallel
/// unless deterministic mode is set; the aggregate is order-independent of
/// scheduling either way.
pub fn evaluate<T: Scalar>(
    model: &Malenia<T>,
    samples: &[Sample],
    bank: &EmbeddingBank,
    table: &KnowledgeTable,
    unseen: &BTreeSet<String>,
    nsd_tolerance: f64,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let threads = if deterministic_mode() {
        1
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get()).min(samples.len())
    };
    let outcomes: Vec<Result<SampleOutcome>> = if threads <= 1 {
        samples.iter().map(|s| evaluate_sample(model, s, bank, table, nsd_tolerance)).collect()
    } else {
        let chunk = samples.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter().map(|s| evaluate_sample(model, s, bank, table, nsd_tolerance)).collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };

    let mut sums: BTreeMap<String, (Scores, usize)> = BTreeMap::new();
    let mut counts: BTreeMap<Aspect, AspectCounts> = BTreeMap::new();
    for outcome in outcomes {
        let outcome = outcome?;
        for (class, s) in outcome.classes {
            let (acc, n) = sums.entry(class).or_default();
            acc.dsc += s.dsc;
            acc.nsd += s.nsd;
            acc.foreground_dsc += s.foreground_dsc;
            *n += 1;
        }
        for (aspect, c) in outcome.counts {
            let acc = counts.entry(aspect).or_default();
            acc.correct += c.correct;
            acc.predicted += c.predicted;
            acc.ground_truth += c.ground_truth;
        }
    }
    let classes = sums
        .into_iter()
        .map(|(class, (s, n))| {
            let n_f = n as f64;
            let m = ClassMetrics {
                dsc: s.dsc / n_f,
                nsd: s.nsd / n_f,
                foreground_dsc: s.foreground_dsc / n_f,
                support: n,
                zero_shot: unseen.contains(&class),
            };
            (class, m)
        })
        .collect();
    Ok(MetricReport::new(classes, &counts))
}
