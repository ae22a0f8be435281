//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Run all criteria with `cargo test -p malenia-core --test acceptance`, or a
//! subset with `cargo test -p malenia-core --test acceptance -- 1 3 5`.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use malenia_core::alignment::{deep_dice_loss, mp_nce, multiscale_sim_loss, GtDownsample, PairSets};
use malenia_core::attributes::{
    load_bank, query_disease, save_bank, Aspect, AttributeSchema, CountingProvider, HashingProvider, KnowledgeTable,
    StructuredReport,
};
use malenia_core::backbone::{FeaturePyramid, Level};
use malenia_core::cmki::{seg_loss, total_loss, LossWeights};
use malenia_core::maskdecoder::{bipartite_match, matching_cost, total_cost, Assignment, MatchWeights};
use malenia_core::metrics::MetricReport;
use malenia_core::phantom::{ClassCatalog, Sample, Volume};
use malenia_core::pipeline::{
    decode_checkpoint, default_provider, encode_checkpoint, evaluate, generate_test_set, generate_training_set, train,
    Checkpoint, Config, Malenia, Purpose, SampleStore, Trainer, DETERMINISTIC_ENV,
};
use malenia_tensor::{Binder, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const MP_NCE_TOL: f64 = 1e-9;
const INFONCE_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const SEEN_DSC_MIN: f64 = 0.80;
const UNSEEN_DSC_MIN: f64 = 0.50;
const ABLATION_MARGIN: f64 = 0.05;
const ATTRIBUTE_MIN: f64 = 0.95;
const BENCHMARK_CONFIG: &str = include_str!("../../../configs/benchmark.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

// Criterion 1

fn naive_mp_nce(s: &Tensor<f64>, pairs: &PairSets) -> f64 {
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for j in 0..pairs.len() {
        let row = s.row(j);
        let neg: f64 = pairs.negatives[j].iter().map(|&k| row[k].exp()).sum();
        let per: f64 = pairs.positives[j].iter().map(|&p| (row[p].exp() / (row[p].exp() + neg)).ln()).sum();
        total += per / pairs.positives[j].len() as f64;
    }
    -total / n
}

/// Textbook InfoNCE with one positive per row, log-softmax over the positive
/// and its negatives.
fn info_nce(s: &Tensor<f64>, positive: &[usize], negatives: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for (j, &p) in positive.iter().enumerate() {
        let row = s.row(j);
        let ids: Vec<usize> = std::iter::once(p).chain(negatives[j].iter().copied()).collect();
        let m = ids.iter().map(|&k| row[k]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + ids.iter().map(|&k| (row[k] - m).exp()).sum::<f64>().ln();
        total += lse - row[p];
    }
    total / positive.len() as f64
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize, k: usize, single: bool) -> PairSets {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for _ in 0..n {
        let mut ids: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        let np = if single { 1 } else { rng.random_range(1..k) };
        let nn = rng.random_range(0..=k - np);
        positives.push(ids[..np].to_vec());
        negatives.push(ids[np..np + nn].to_vec());
    }
    PairSets::new(positives, negatives, k).expect("valid pairs")
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (n, k) = (rng.random_range(1..=5), rng.random_range(2..=9));
        let pairs = random_pairs(&mut rng, n, k, false);
        let s = random_tensor(&mut rng, &[n, k], 3.0);
        let g = Graph::inference();
        let got = mp_nce(g.constant(s.clone()), &pairs).unwrap().item();
        worst = worst.max((got - naive_mp_nce(&s, &pairs)).abs());
    }
    let mut worst_single = 0.0f64;
    for _ in 0..100 {
        let (n, k) = (rng.random_range(1..=5), rng.random_range(2..=9));
        let pairs = random_pairs(&mut rng, n, k, true);
        let s = random_tensor(&mut rng, &[n, k], 3.0);
        let g = Graph::inference();
        let got = mp_nce(g.constant(s.clone()), &pairs).unwrap().item();
        let positive: Vec<usize> = pairs.positives.iter().map(|p| p[0]).collect();
        worst_single = worst_single.max((got - info_nce(&s, &positive, &pairs.negatives)).abs());
    }
    outcome(
        worst < MP_NCE_TOL && worst_single < INFONCE_TOL,
        format!("200 instances max |Δ| {worst:.1e} (< {MP_NCE_TOL:.0e}); 100 single-positive max |Δ| {worst_single:.1e} (< {INFONCE_TOL:.0e})"),
    )
}

// Criterion 2

/// Norm-relative error between analytic and central-difference gradients of
/// `f` with respect to every input.
fn gradient_error<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let mut grads = g.backward(f(&g, &vars));
    let eval = |xs: &[Tensor<f64>]| {
        let g = Graph::inference();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).item()
    };
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.take(vars[i]).unwrap_or_else(|| Tensor::zeros(t.shape()));
        let numeric: Vec<f64> = (0..t.len())
            .map(|k| {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[k] += FD_STEP;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[k] -= FD_STEP;
                (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP)
            })
            .collect();
        let diff: Vec<f64> = numeric.iter().zip(analytic.data()).map(|(a, b)| a - b).collect();
        let scale = norm(&numeric).max(norm(analytic.data()));
        worst = worst.max(if scale > 1e-7 { norm(&diff) / scale } else { norm(&diff) });
    }
    worst
}

fn cube_mask(grid: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Vec<u8> {
    let mut m = vec![0u8; grid.iter().product()];
    for i in lo[0]..hi[0] {
        for j in lo[1]..hi[1] {
            for k in lo[2]..hi[2] {
                m[(i * grid[1] + j) * grid[2] + k] = 1;
            }
        }
    }
    m
}

fn lesion_report(schema: &AttributeSchema, pick: usize) -> StructuredReport {
    StructuredReport::from_pairs(schema.aspects().map(|a| {
        let v = schema.vocab(a);
        (a, v[pick % v.len()].clone())
    }))
}

fn criterion_2() -> Outcome {
    let (n, c) = (4, 8);
    let full = [4, 4, 4];
    let schema = AttributeSchema::default_schema();
    let k = schema.num_values() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let masks = [cube_mask(full, [0, 0, 0], [2, 2, 2]), cube_mask(full, [2, 1, 2], [4, 3, 4])];
    let gt: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
    let reports = [lesion_report(&schema, 0), lesion_report(&schema, 1)];
    let assignment = Assignment::new(vec![(2, 0), (0, 1)], n).unwrap();
    let pairs = malenia_core::alignment::build_pairs(&assignment, &reports, &schema).unwrap();
    let mut errors = Vec::new();

    let sims: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&mut rng, &[n, k], 2.0)).collect();
    errors.push(("mp_nce", gradient_error(&sims[..1], |_, v| mp_nce(v[0], &pairs).unwrap())));
    errors.push(("multiscale_sim_loss", gradient_error(&sims, |_, v| multiscale_sim_loss(v, &pairs).unwrap())));

    let grids = vec![[1, 1, 1], [2, 2, 2], [4, 4, 4]];
    let logits: Vec<Tensor<f64>> =
        grids.iter().map(|g| random_tensor(&mut rng, &[g.iter().product(), n], 1.5)).collect();
    errors.push((
        "deep_dice_loss",
        gradient_error(&logits, |_, v| {
            deep_dice_loss(v, &grids, &assignment, &gt, full, GtDownsample::Occupancy).unwrap().unwrap()
        }),
    ));

    let weights = LossWeights::default();
    let targets: Vec<usize> = (0..64).map(|_| rng.random_range(0..n)).collect();
    let mask = random_tensor(&mut rng, &[64, n], 2.0);
    errors.push(("seg_loss", gradient_error(&[mask], |_, v| seg_loss(v[0], &targets, weights).unwrap())));

    let terms: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::scalar(rng.random_range(0.1..2.0))).collect();
    let mixed = LossWeights { lambda_deep: 0.7, lambda_sim: 1.3, lambda_seg: 0.9, ..weights };
    errors.push(("total_loss", gradient_error(&terms, |_, v| total_loss(Some(v[0]), v[1], v[2], mixed))));

    // The full objective of the model, differentiated through the decoder,
    // alignment and knowledge injection down to a synthetic 4³ pyramid.
    let mut config = Config::default();
    config.model.tokens = n;
    config.model.dim = c;
    config.model.text_dim = 16;
    // The graph borrows the parameter store for its whole lifetime.
    let model: &'static Malenia<f64> = Box::leak(Box::new(
        Malenia::new(&config.model, schema.clone(), &HashingProvider::new(16, 0), 5).expect("model"),
    ));
    let level_grids = [[1, 1, 1], [2, 2, 2], [4, 4, 4], full];
    let features: Vec<Tensor<f64>> =
        level_grids.iter().map(|g| random_tensor(&mut rng, &[g.iter().product(), c], 1.0)).collect();
    errors.push((
        "total_loss (model)",
        gradient_error(&features, |g, v| {
            let p = Binder::new(g, &model.store);
            let levels = std::array::from_fn(|i| Level { features: v[i], grid: level_grids[i] });
            model.losses(&p, FeaturePyramid { levels }, &gt, &reports, &config.loss).unwrap().total
        }),
    ));

    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errors.iter().map(|(name, e)| format!("{name} {e:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(worst < GRAD_TOL, format!("{detail} (< {GRAD_TOL:.0e})"))
}

// Criterion 3

fn exhaustive_minimum(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn rec(cost: &[f64], rows: usize, cols: usize, cur: &mut Vec<usize>, best: &mut f64) {
        if cur.len() == rows {
            *best = best.min(total_cost(cost, cols, cur));
            return;
        }
        for j in 0..cols {
            if !cur.contains(&j) {
                cur.push(j);
                rec(cost, rows, cols, cur, best);
                cur.pop();
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, rows, cols, &mut Vec::new(), &mut best);
    best
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = 27;
    let mut mismatches = 0;
    for _ in 0..200 {
        let s = rng.random_range(1..=6);
        let n = rng.random_range(s..=8);
        let logits = random_tensor(&mut rng, &[grid, n], 3.0);
        let masks: Vec<Vec<u8>> = (0..s)
            .map(|_| {
                let mut m: Vec<u8> = (0..grid).map(|_| rng.random_bool(0.3) as u8).collect();
                m[rng.random_range(0..grid)] = 1;
                m
            })
            .collect();
        let gt: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
        let w = MatchWeights::default();
        let assignment = bipartite_match(&logits, &gt, w).unwrap();
        let cost = matching_cost(&logits, &gt, w).unwrap();
        let cols: Vec<usize> = (0..s).map(|l| assignment.token_of(l)).collect();
        if total_cost(&cost, n, &cols) != exhaustive_minimum(&cost, s, n) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches}/200 instances differ from the exhaustive minimum"))
}

// Criterion 4

fn blank_volume(side: usize) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(side as u64);
    Volume {
        shape: [side; 3],
        spacing: [1.0; 3],
        enhanced: false,
        data: (0..side * side * side).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn criterion_4() -> Outcome {
    let config = Config::default();
    let (n, c) = (config.model.tokens, config.model.dim);
    let model: Malenia<f32> =
        Malenia::new(&config.model, AttributeSchema::default_schema(), &default_provider(&config), 0).unwrap();
    let mut failures = Vec::new();
    for side in [32, 96] {
        let volume = blank_volume(side);
        let g = Graph::inference();
        let p = Binder::new(&g, &model.store);
        let pyramid = model.pyramid(&p, &volume).unwrap();
        for (i, div) in [32, 16, 8, 1].into_iter().enumerate() {
            let s = side / div;
            let width = pyramid.levels[i].features.shape()[1];
            if pyramid.level_shape(i) != [s, s, s, width] || width != c {
                failures.push(format!("{side}³ level {i}: {:?}", pyramid.level_shape(i)));
            }
        }
        let bundle = model.infer(&volume, &model.export_bank().unwrap(), &KnowledgeTable::default_table()).unwrap();
        let v = side * side * side;
        for (name, t) in [("mask_m", &bundle.mask_m), ("mask_t", &bundle.mask_t), ("mask", &bundle.mask)] {
            if t.clone().reshape(&[side, side, side, n]).shape() != [side, side, side, n] || t.shape() != [v, n] {
                failures.push(format!("{side}³ {name}: {:?}", t.shape()));
            }
        }
    }

    let sample = training_samples(&config, 1).remove(0);
    let g = Graph::inference();
    let p = Binder::new(&g, &model.store);
    let pyramid = model.pyramid(&p, &sample.volume).unwrap();
    let gt: Vec<&[u8]> = sample.lesions.iter().map(|l| l.mask.as_slice()).collect();
    let reports: Vec<StructuredReport> = sample.lesions.iter().map(|l| l.labels.clone()).collect();
    let parts = model.losses(&p, pyramid, &gt, &reports, &config.loss).unwrap();
    for (b, t) in parts.trace.decoder.tokens.iter().enumerate() {
        if t.shape() != [n, c] {
            failures.push(format!("block {b} tokens {:?}", t.shape()));
        }
    }
    if parts.trace.decoder.tokens.len() != 3 {
        failures.push(format!("{} decoder blocks", parts.trace.decoder.tokens.len()));
    }
    let pred = &parts.trace.prediction;
    let (m, t, pre) = (pred.mask_m.value(), pred.mask_t.value(), pred.pre_head.value());
    let w = config.model.ensemble;
    let (bm, bt) = (w.beta_m as f32, w.beta_t as f32);
    let exact = m.data().iter().zip(t.data()).zip(pre.data()).all(|((a, b), x)| *x == bm * a + bt * b);
    if !exact {
        failures.push("pre-head differs from β_m·mask_m + β_t·mask_t".into());
    }
    let detail = if failures.is_empty() {
        format!("levels 1/32..1 at 32³ and 96³; tokens ({n}, {c}) in 3 blocks; masks (H,W,D,{n}); pre-head exact")
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

// Criterion 5

fn criterion_5() -> Outcome {
    let table = KnowledgeTable::default_table();
    let mut wrong = Vec::new();
    for row in table.rows() {
        let report = StructuredReport::from_pairs(
            Aspect::ALL.into_iter().map(|a| {
                let values = row.admissible.get(&a).expect("row covers every aspect");
                (a, values.iter().next().expect("nonempty").clone())
            }),
        );
        let ranked = query_disease(&report, &table).unwrap();
        if ranked[0] != (row.name.clone(), 8) {
            wrong.push(format!("{} -> {:?}", row.name, ranked[0]));
        }
    }
    let detail = if wrong.is_empty() { format!("{} rows identified with score 8", table.rows().len()) } else { wrong.join("; ") };
    outcome(wrong.is_empty(), detail)
}

// Criteria 6 and 7

fn training_samples(config: &Config, per_class: usize) -> Vec<Sample> {
    let mut data = config.data.clone();
    data.train_per_class = per_class;
    generate_training_set(&data, &ClassCatalog::default()).unwrap()
}

fn results_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../results")
}

fn train_and_evaluate(config: &Config, store: &SampleStore, test: &[Sample]) -> (Checkpoint<f32>, MetricReport, f64) {
    let start = Instant::now();
    let samples = store.load_training(&config.seen()).unwrap();
    let ck: Checkpoint<f32> =
        train(config, AttributeSchema::default_schema(), &default_provider(config), samples, |r| {
            eprintln!(
                "  epoch {:>3} total {:.4} deep {:.4} sim {:.4} seg {:.4} ({:.0}s)",
                r.epoch,
                r.total,
                r.deep,
                r.sim,
                r.seg,
                start.elapsed().as_secs_f64()
            )
        })
        .unwrap();
    let table = KnowledgeTable::default_table();
    let report = evaluate(&ck.model, test, &ck.bank, &table, &config.unseen(), config.eval.nsd_tolerance).unwrap();
    (ck, report, start.elapsed().as_secs_f64())
}

fn criteria_6_and_7() -> (Outcome, Outcome) {
    let config = Config::from_toml_str(BENCHMARK_CONFIG).expect("benchmark config");
    let catalog = ClassCatalog::default();
    let all_train = generate_training_set(&config.data, &catalog).unwrap();
    let test = generate_test_set(&config.data, &catalog).unwrap();
    let store = SampleStore::in_memory(all_train);
    eprintln!("benchmark: {} training samples, {} test samples", store.len(), test.len());

    let (ck, full, full_secs) = train_and_evaluate(&config, &store, &test);
    let mut ablation_config = config.clone();
    ablation_config.loss.weights.lambda_sim = 0.0;
    // Without alignment the similarities are untrained, so they must not steer matching either.
    ablation_config.loss.matching.attribute = 0.0;
    eprintln!("ablation: lambda_sim = 0");
    let (_, ablation, ablation_secs) = train_and_evaluate(&ablation_config, &store, &test);
    let unseen_reads = store.log().reads_of(&config.unseen(), Purpose::Train);

    let seen = full.seen_mean_dsc.unwrap_or(0.0);
    let unseen = full.unseen_mean_dsc.unwrap_or(0.0);
    let unseen_ablation = ablation.unseen_mean_dsc.unwrap_or(0.0);
    let total_secs = full_secs + ablation_secs;
    let pass6 = store.len() >= 200
        && unseen_reads == 0
        && seen >= SEEN_DSC_MIN
        && unseen >= UNSEEN_DSC_MIN
        && unseen - unseen_ablation >= ABLATION_MARGIN
        && total_secs <= 4.0 * 3600.0;
    let o6 = outcome(
        pass6,
        format!(
            "{} samples; seen DSC {seen:.3} (>= {SEEN_DSC_MIN}); unseen DSC {unseen:.3} (>= {UNSEEN_DSC_MIN}); \
             ablation unseen DSC {unseen_ablation:.3} (margin {:.3} >= {ABLATION_MARGIN}); \
             unseen training reads {unseen_reads}; {:.0} min",
            store.len(),
            unseen - unseen_ablation,
            total_secs / 60.0
        ),
    );

    let mut parts = Vec::new();
    let mut pass7 = true;
    for aspect in [Aspect::Location, Aspect::Enhancement] {
        let m = full.aspect(aspect);
        let p = m.and_then(|m| m.precision).unwrap_or(0.0);
        let r = m.and_then(|m| m.recall).unwrap_or(0.0);
        pass7 &= p >= ATTRIBUTE_MIN && r >= ATTRIBUTE_MIN;
        parts.push(format!("{aspect} P {p:.3} R {r:.3}"));
    }
    let o7 = outcome(pass7, format!("{} (>= {ATTRIBUTE_MIN})", parts.join(", ")));

    let record = json!({
        "config": config,
        "training_samples": store.len(),
        "test_samples": test.len(),
        "unseen_training_reads": unseen_reads,
        "full": { "report": full, "curve": ck.curve, "seconds": full_secs },
        "ablation_lambda_sim_0": { "report": ablation, "seconds": ablation_secs },
        "criterion_6": { "pass": o6.pass, "detail": o6.detail },
        "criterion_7": { "pass": o7.pass, "detail": o7.detail },
    });
    let dir = results_dir();
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("benchmark.json"), serde_json::to_string_pretty(&record).unwrap()).unwrap();
    (o6, o7)
}

// Criterion 8

fn criterion_8() -> Outcome {
    let config = Config::default();
    let schema = AttributeSchema::default_schema();
    let provider = CountingProvider::new(default_provider(&config));
    let counter = provider.counter();
    let model: Malenia<f32> = Malenia::new(&config.model, schema.clone(), &provider, 0).unwrap();
    let construction_calls = provider.calls();
    let dir = tempfile::tempdir().unwrap();
    let bank_path = dir.path().join("bank.mlnb");
    save_bank(&model.export_bank().unwrap(), &bank_path).unwrap();
    let ck = Checkpoint::new(config.clone(), model, None, 0, Vec::new()).unwrap();
    let bytes = encode_checkpoint(&ck).unwrap();
    drop(ck);
    drop(provider);

    let before = counter.load(std::sync::atomic::Ordering::SeqCst);
    let loaded: Checkpoint<f32> = decode_checkpoint(&bytes).unwrap();
    let bank = load_bank(&bank_path, &schema).unwrap();
    let samples = training_samples(&config, 1);
    let table = KnowledgeTable::default_table();
    let mut tokens = 0;
    for s in &samples {
        tokens += loaded.model.infer(&s.volume, &bank, &table).unwrap().tokens.len();
    }
    let calls = counter.load(std::sync::atomic::Ordering::SeqCst) - before;
    outcome(
        calls == 0 && construction_calls == schema.num_values(),
        format!(
            "{construction_calls} provider calls at construction, {calls} during {} inferences over {tokens} tokens",
            samples.len()
        ),
    )
}

// Criterion 9

fn criterion_9() -> Outcome {
    std::env::set_var(DETERMINISTIC_ENV, "1");
    let mut config = Config::default();
    config.model.tokens = 4;
    config.model.dim = 8;
    config.model.text_dim = 16;
    config.train.epochs = 2;
    config.train.lr = 1e-3;
    let samples = training_samples(&config, 1)[..2].to_vec();
    let run = || {
        let model = Malenia::<f32>::new(&config.model, AttributeSchema::default_schema(), &default_provider(&config), 9)
            .unwrap();
        let mut t = Trainer::new(model, config.train.clone(), config.loss.clone(), samples.clone()).unwrap();
        t.run(|_| {}).unwrap();
        t
    };
    let (a, b) = (run(), run());
    let curve_bits = |t: &Trainer<f32>| {
        t.curve.iter().flat_map(|r| [r.total, r.deep, r.sim, r.seg]).map(f64::to_bits).collect::<Vec<_>>()
    };
    let same_curve = curve_bits(&a) == curve_bits(&b);

    let ck = Checkpoint::new(config.clone(), a.model, Some(a.optimizer), a.epoch, a.curve).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mlnc");
    malenia_core::pipeline::save_checkpoint(&ck, &path).unwrap();
    let loaded: Checkpoint<f32> = malenia_core::pipeline::load_checkpoint(&path).unwrap();
    let table = KnowledgeTable::default_table();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut same_forward = true;
    for s in &samples {
        let x = ck.model.infer(&s.volume, &ck.bank, &table).unwrap();
        let y = loaded.model.infer(&s.volume, &loaded.bank, &table).unwrap();
        same_forward &= bits(&x.mask) == bits(&y.mask)
            && bits(&x.mask_m) == bits(&y.mask_m)
            && bits(&x.mask_t) == bits(&y.mask_t)
            && x.tokens == y.tokens;
    }
    outcome(
        same_curve && same_forward,
        format!("loss trajectory identical: {same_curve}; forward bit-exact after save/load: {same_forward}"),
    )
}

fn main() {
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wants = |c: u32| selected.is_empty() || selected.contains(&c);
    let mut results: Vec<(u32, Outcome, f64)> = Vec::new();
    let mut run = |c: u32, f: &dyn Fn() -> Outcome| {
        if wants(c) {
            let t = Instant::now();
            let o = f();
            results.push((c, o, t.elapsed().as_secs_f64()));
        }
    };
    run(1, &criterion_1);
    run(2, &criterion_2);
    run(3, &criterion_3);
    run(4, &criterion_4);
    run(5, &criterion_5);
    run(8, &criterion_8);
    run(9, &criterion_9);
    if wants(6) || wants(7) {
        let t = Instant::now();
        let (o6, o7) = criteria_6_and_7();
        let secs = t.elapsed().as_secs_f64();
        results.push((6, o6, secs));
        results.push((7, o7, 0.0));
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (c, o, secs) in &results {
        println!("criterion {c}: {} ({secs:.1}s) {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
