mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{CommandFactory, Parser, Subcommand};
use serde::Serialize;

use config::{CaptionKind, ExperimentConfig};
use dualenc::ablation::{self, TABLE_VARIANTS};
use dualenc::data::{
    default_classes, generate_classification_set, generate_dataset, read_dataset, write_dataset, Record,
    Vocabulary,
};
use dualenc::encoders::DualEncoder;
use dualenc::eval::{
    default_probe_lengths, effective_length_probe, max_caption_tokens, recall_at_k, zero_shot_classify, TEMPLATES,
};
use dualenc::numerics::Matrix;
use dualenc::stretch::StretchMode;
use dualenc::train::{train, Checkpoint, Variant};

#[derive(Parser, Debug)]
#[command(name = "dualenc", version, about = "Toy dual-encoder long-caption experiments")]
struct Cli {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its vocabulary.
    GenData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        group_size: Option<usize>,
    },
    /// Stretch a checkpoint's text positional table.
    Stretch {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        mode: Option<StretchMode>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        keep: Option<usize>,
    },
    /// Train one variant.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Starting checkpoint; a fresh model from the config when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        shuffle_seed: Option<u64>,
        #[arg(long)]
        mix_seed: Option<u64>,
        #[arg(long)]
        init_seed: Option<u64>,
    },
    /// Recall@K in both directions.
    EvalRetrieval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        captions: Option<CaptionKind>,
    },
    /// Zero-shot color/object classification with prompt ensembling.
    EvalClassify {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Long-caption text-to-image R@1 under truncation.
    ProbeLength {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
    },
    /// Baseline plus the stretch × objective grid and the three alternatives.
    AblationSuite {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
    },
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(clap::error::ErrorKind::ArgumentConflict, msg).exit()
}

fn required(flag: Option<PathBuf>, from_config: &mut Option<PathBuf>, name: &str) -> PathBuf {
    if let Some(p) = flag {
        *from_config = Some(p);
    }
    match from_config {
        Some(p) => p.clone(),
        None => usage_error(format!("--{name} is required (or paths.{name} in the config)")),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_vocab(flag: Option<PathBuf>, cfg: &mut ExperimentConfig) -> anyhow::Result<Vocabulary> {
    if let Some(p) = flag {
        cfg.paths.vocab = Some(p);
    }
    if cfg.paths.vocab.is_none() {
        let beside = cfg
            .paths
            .dataset
            .as_ref()
            .and_then(|d| d.parent())
            .map(|d| d.join("vocab.txt"))
            .filter(|p| p.exists());
        cfg.paths.vocab = beside;
    }
    match &cfg.paths.vocab {
        Some(p) => Ok(Vocabulary::read(p)?),
        None => Ok(Vocabulary::standard()),
    }
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    if !path.exists() {
        bail!("checkpoint not found: {}", path.display());
    }
    Ok(Checkpoint::load(path)?)
}

fn load_records(path: &Path) -> anyhow::Result<Vec<Record>> {
    if !path.exists() {
        bail!("dataset not found: {}", path.display());
    }
    Ok(read_dataset(path)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData {
            out_dir,
            seed,
            n,
            group_size,
        } => {
            cfg.data.seed = seed.unwrap_or(cfg.data.seed);
            cfg.data.n = n.unwrap_or(cfg.data.n);
            cfg.data.synth.group_size = group_size.unwrap_or(cfg.data.synth.group_size);
            prepare_out_dir(&out_dir)?;
            let started = Instant::now();
            let records: Vec<Record> = generate_dataset(cfg.data.seed, cfg.data.n, &cfg.data.synth)?
                .iter()
                .map(Record::from)
                .collect();
            write_dataset(&out_dir.join("dataset.jsonl"), &records)?;
            Vocabulary::standard().write(&out_dir.join("vocab.txt"))?;
            write_json(&out_dir.join("config.json"), &cfg)?;
            log::info!("wrote {} records in {:.2}s", records.len(), started.elapsed().as_secs_f64());
        }
        Command::Stretch {
            checkpoint,
            out_dir,
            mode,
            ratio,
            keep,
        } => {
            let input = required(checkpoint, &mut cfg.paths.checkpoint, "checkpoint");
            if let Some(m) = mode {
                cfg.stretch.mode = m;
            }
            if keep.is_some() && cfg.stretch.mode == StretchMode::Linear {
                usage_error("--keep only applies to --mode kps");
            }
            cfg.stretch.ratio = ratio.unwrap_or(cfg.stretch.ratio);
            cfg.stretch.keep = keep.unwrap_or(cfg.stretch.keep);
            let ck = load_checkpoint(&input)?;
            let mut model = ck.model;
            cfg.stretch.apply_to_model(&mut model)?;
            cfg.model = model.config().clone();
            prepare_out_dir(&out_dir)?;
            // moments of the old table no longer fit; start the optimizer afresh
            Checkpoint::new(model).save(&out_dir.join("model.ckpt"))?;
            write_json(&out_dir.join("config.json"), &cfg)?;
            log::info!("stretched to context {}", cfg.model.context_len);
        }
        Command::Train {
            data,
            vocab,
            init,
            out_dir,
            variant,
            epochs,
            batch_size,
            lr,
            shuffle_seed,
            mix_seed,
            init_seed,
        } => {
            let data = required(data, &mut cfg.paths.dataset, "data");
            if init.is_some() {
                cfg.paths.init = init;
            }
            if cfg.paths.init.is_some() && init_seed.is_some() {
                usage_error("--init-seed only applies when training a fresh model (no --init)");
            }
            let t = &mut cfg.train;
            t.variant = variant.unwrap_or(t.variant);
            t.epochs = epochs.unwrap_or(t.epochs);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.optimizer.learning_rate = lr.unwrap_or(t.optimizer.learning_rate);
            t.shuffle_seed = shuffle_seed.unwrap_or(t.shuffle_seed);
            t.mix_seed = mix_seed.unwrap_or(t.mix_seed);
            cfg.model.init_seed = init_seed.unwrap_or(cfg.model.init_seed);
            let vocab = load_vocab(vocab, &mut cfg)?;
            let records = load_records(&data)?;
            let model = match &cfg.paths.init {
                Some(p) => load_checkpoint(p)?.model,
                None => DualEncoder::new(cfg.model.clone())?,
            };
            cfg.model = model.config().clone();
            prepare_out_dir(&out_dir)?;
            let started = Instant::now();
            let out = train(&cfg.train, &cfg.loss, model, &records, &vocab)?;
            out.checkpoint.save(&out_dir.join("model.ckpt"))?;
            write_json(&out_dir.join("train_log.json"), &out.log)?;
            write_json(&out_dir.join("config.json"), &cfg)?;
            log::info!(
                "{} trained {} steps in {:.1}s",
                cfg.train.variant,
                out.log.steps.len(),
                started.elapsed().as_secs_f64()
            );
        }
        Command::EvalRetrieval {
            checkpoint,
            data,
            vocab,
            out_dir,
            ks,
            captions,
        } => {
            let ckpt = required(checkpoint, &mut cfg.paths.checkpoint, "checkpoint");
            let data = required(data, &mut cfg.paths.dataset, "data");
            cfg.eval.ks = ks.unwrap_or(cfg.eval.ks);
            cfg.eval.captions = captions.unwrap_or(cfg.eval.captions);
            let vocab = load_vocab(vocab, &mut cfg)?;
            let model = load_checkpoint(&ckpt)?.model;
            let records = load_records(&data)?;
            cfg.model = model.config().clone();
            let ctx = model.config().context_len;
            let texts = records
                .iter()
                .map(|r| {
                    let text = match cfg.eval.captions {
                        CaptionKind::Long => &r.long,
                        CaptionKind::Short => &r.short,
                    };
                    if Vocabulary::word_count(text) + 2 > ctx {
                        bail!("caption of record {} does not fit context {ctx}", r.id);
                    }
                    Ok(vocab.tokenize(text, ctx)?)
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let images: Vec<&Matrix<f32>> = records.iter().map(|r| &r.image).collect();
            let img = model.encode_images_chunked(&images, 256)?;
            let txt = model.encode_texts_chunked(&texts, 256)?;
            let reports = recall_at_k(&img, &txt, &cfg.eval.ks)?;
            prepare_out_dir(&out_dir)?;
            write_json(&out_dir.join("retrieval.json"), &reports)?;
            write_json(&out_dir.join("config.json"), &cfg)?;
            for r in &reports {
                log::info!("{:?}: {:?} at k={:?}", r.direction, r.recalls, r.ks);
            }
        }
        Command::EvalClassify {
            checkpoint,
            vocab,
            out_dir,
            seed,
            per_class,
        } => {
            let ckpt = required(checkpoint, &mut cfg.paths.checkpoint, "checkpoint");
            cfg.eval.classify_seed = seed.unwrap_or(cfg.eval.classify_seed);
            cfg.eval.per_class = per_class.unwrap_or(cfg.eval.per_class);
            let vocab = load_vocab(vocab, &mut cfg)?;
            let model = load_checkpoint(&ckpt)?.model;
            cfg.model = model.config().clone();
            let classes = default_classes();
            let set = generate_classification_set(cfg.eval.classify_seed, cfg.eval.per_class, &classes, &cfg.data.synth)?;
            let images: Vec<&Matrix<f32>> = set.iter().map(|(m, _)| m).collect();
            let labels: Vec<usize> = set.iter().map(|&(_, l)| l).collect();
            let names: Vec<String> = classes.iter().map(|c| c.name()).collect();
            let report = zero_shot_classify(&model, &vocab, &images, &labels, &names, &TEMPLATES)?;
            prepare_out_dir(&out_dir)?;
            write_json(&out_dir.join("classify.json"), &report)?;
            write_json(&out_dir.join("config.json"), &cfg)?;
            log::info!("zero-shot accuracy {:.4} over {} images", report.accuracy, report.n);
        }
        Command::ProbeLength {
            checkpoint,
            data,
            vocab,
            out_dir,
            lengths,
        } => {
            let ckpt = required(checkpoint, &mut cfg.paths.checkpoint, "checkpoint");
            let data = required(data, &mut cfg.paths.dataset, "data");
            if lengths.is_some() {
                cfg.eval.probe_lengths = lengths;
            }
            let vocab = load_vocab(vocab, &mut cfg)?;
            let model = load_checkpoint(&ckpt)?.model;
            let records = load_records(&data)?;
            cfg.model = model.config().clone();
            let captions: Vec<String> = records.iter().map(|r| r.long.clone()).collect();
            let lengths = cfg
                .eval
                .probe_lengths
                .clone()
                .unwrap_or_else(|| default_probe_lengths(max_caption_tokens(&captions)));
            let images: Vec<&Matrix<f32>> = records.iter().map(|r| &r.image).collect();
            let tag = ckpt.display().to_string();
            let curve = effective_length_probe(&model, &vocab, &tag, &images, &captions, &lengths)?;
            prepare_out_dir(&out_dir)?;
            write_json(&out_dir.join("probe.json"), &curve)?;
            fs::write(out_dir.join("probe.csv"), curve.to_csv())
                .with_context(|| format!("writing {}", out_dir.join("probe.csv").display()))?;
            write_json(&out_dir.join("config.json"), &cfg)?;
        }
        Command::AblationSuite { out_dir, seed, variants } => {
            cfg.ablation.data_seed = seed.unwrap_or(cfg.ablation.data_seed);
            let variants = variants.unwrap_or_else(|| TABLE_VARIANTS.to_vec());
            if variants.contains(&Variant::ShortBaseline) {
                usage_error("short_baseline is always the reference row; list only fine-tuned variants");
            }
            prepare_out_dir(&out_dir)?;
            let started = Instant::now();
            let out = ablation::run(&cfg.ablation, &variants, &Vocabulary::standard())?;
            write_json(&out_dir.join("ablation.json"), &out.report)?;
            write_json(
                &out_dir.join("ablation_log.json"),
                &AblationLog {
                    train_seconds: out.train_seconds.iter().map(|&(v, s)| (v.name(), s)).collect(),
                    total_seconds: started.elapsed().as_secs_f64(),
                    logs: &out.logs,
                },
            )?;
            write_json(&out_dir.join("config.json"), &cfg)?;
            log::info!("ablation finished in {:.0}s", started.elapsed().as_secs_f64());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationLog<'a> {
    train_seconds: Vec<(&'static str, f64)>,
    total_seconds: f64,
    logs: &'a [dualenc::train::TrainLog],
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
