use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use malenia_core::attributes::{load_bank, save_bank, AttributeSchema, KnowledgeTable};
use malenia_core::metrics::{attribute_matching_metrics, LesionRecord, MetricReport};
use malenia_core::phantom::{read_volume, ClassCatalog};
use malenia_core::pipeline::{
    default_provider, evaluate, generate_test_set, generate_training_set, load_checkpoint, save_checkpoint, train,
    Checkpoint, Config, Purpose, SampleStore,
};

#[derive(Parser)]
#[command(name = "malenia", version, about = "Zero-shot lesion segmentation on synthetic phantoms")]
struct Cli {
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    /// Seen classes only.
    Train,
    /// Seen and unseen classes.
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom samples and a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Train on the seen-class samples of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the text-embedding bank of a checkpoint.
    ExportBank {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one sample file with stored embeddings.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to the bank stored in the checkpoint.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Summary JSON; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Raw per-voxel token labels, one byte each.
        #[arg(long)]
        labels_out: Option<PathBuf>,
    },
    /// Per-class DSC/NSD and attribute matching over a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Report JSON; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lesion-level attribute precision and recall over a dataset.
    MatchAttributes {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Errors in user input rather than in the run itself.
fn is_usage_error(err: &anyhow::Error) -> bool {
    use malenia_core::Error;
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<Error>(),
            Some(Error::Config(_) | Error::Schema(_) | Error::UnknownValue { .. })
        )
    })
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p).map_err(|e| match e {
            malenia_core::Error::Io { .. } => malenia_core::Error::Config(e.to_string()),
            other => other,
        })?,
        None => Config::default(),
    })
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn open_checkpoint(path: &Path, bank: Option<&Path>) -> Result<Checkpoint<f32>> {
    let mut ck: Checkpoint<f32> = load_checkpoint(path)?;
    if let Some(b) = bank {
        ck.bank = load_bank(b, ck.model.schema())?;
    }
    Ok(ck)
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    let catalog = ClassCatalog::default();
    match cli.command {
        Command::GenData { out, n, seed, split } => {
            if let Some(s) = seed {
                config.data.seed = s;
            }
            let classes = match split {
                Split::Train => config.data.seen.len(),
                Split::Test => config.data.seen.len() + config.data.unseen.len(),
            };
            if let Some(n) = n {
                config.data.train_per_class = n.div_ceil(classes);
                config.data.test_per_class = n.div_ceil(classes);
            }
            let mut samples = match split {
                Split::Train => generate_training_set(&config.data, &catalog)?,
                Split::Test => generate_test_set(&config.data, &catalog)?,
            };
            if let Some(n) = n {
                samples.truncate(n);
            }
            let manifest = SampleStore::write(&out, &samples)?;
            eprintln!("wrote {} samples to {}", manifest.samples.len(), out.display());
        }
        Command::Train { data, out, epochs, lr, seed } => {
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            if let Some(lr) = lr {
                config.train.lr = lr;
            }
            if let Some(s) = seed {
                config.train.seed = s;
            }
            config.validate()?;
            let store = SampleStore::open(&data)?;
            let samples = store.load_training(&config.seen())?;
            eprintln!("training on {} samples", samples.len());
            let provider = default_provider(&config);
            let ck: Checkpoint<f32> = train(&config, AttributeSchema::default_schema(), &provider, samples, |r| {
                eprintln!(
                    "epoch {:>3}  total {:.4}  deep {:.4}  sim {:.4}  seg {:.4}  lr {:.2e}  tau {:.4}",
                    r.epoch, r.total, r.deep, r.sim, r.seg, r.lr, r.tau
                )
            })?;
            save_checkpoint(&ck, &out)?;
            eprintln!("saved {}", out.display());
        }
        Command::ExportBank { ckpt, out } => {
            let ck: Checkpoint<f32> = load_checkpoint(&ckpt)?;
            save_bank(&ck.model.export_bank()?, &out)?;
            eprintln!("saved {}", out.display());
        }
        Command::Infer { ckpt, bank, input, out, labels_out } => {
            let ck = open_checkpoint(&ckpt, bank.as_deref())?;
            let sample = read_volume(&input)?;
            let bundle = ck.model.infer(&sample.volume, &ck.bank, &KnowledgeTable::default_table())?;
            if let Some(p) = labels_out {
                let bytes: Vec<u8> = bundle.labels.iter().map(|&j| j as u8).collect();
                std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
            }
            emit(&serde_json::to_string_pretty(&bundle.summary())?, out.as_deref())?;
        }
        Command::Eval { ckpt, data, bank, out } => {
            let ck = open_checkpoint(&ckpt, bank.as_deref())?;
            let tolerance = if cli.config.is_some() { config.eval.nsd_tolerance } else { ck.config.eval.nsd_tolerance };
            let samples = SampleStore::open(&data)?.load_all(Purpose::Eval)?;
            let table = KnowledgeTable::default_table();
            let report = evaluate(&ck.model, &samples, &ck.bank, &table, &ck.config.unseen(), tolerance)?;
            emit(&report.to_json(), out.as_deref())?;
        }
        Command::MatchAttributes { ckpt, data, bank, out } => {
            let ck = open_checkpoint(&ckpt, bank.as_deref())?;
            let samples = SampleStore::open(&data)?.load_all(Purpose::Eval)?;
            let table = KnowledgeTable::default_table();
            let mut counts = BTreeMap::new();
            for s in &samples {
                let bundle = ck.model.infer(&s.volume, &ck.bank, &table)?;
                let lesions = bundle.lesions();
                let pred: Vec<LesionRecord> =
                    lesions.iter().map(|(t, m)| LesionRecord { mask: m, report: &t.report }).collect();
                let gt: Vec<LesionRecord> =
                    s.lesions.iter().map(|l| LesionRecord { mask: &l.mask, report: &l.labels }).collect();
                attribute_matching_metrics(&pred, &gt, &mut counts)?;
            }
            let report = MetricReport::new(BTreeMap::new(), &counts);
            emit(&serde_json::to_string_pretty(&report.aspects)?, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) { 2 } else { 1 })
        }
    }
}
