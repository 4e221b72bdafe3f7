//! The strategy ablation: pretrain a short-caption baseline, stretch it,
//! fine-tune each variant from the same starting point and score them all on
//! the same held-out sets.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    default_classes, generate_classification_set, generate_dataset, Record, SynthConfig, Vocabulary,
};
use crate::encoders::{DualEncoder, ModelConfig};
use crate::error::{ensure, Result};
use crate::eval::{
    default_probe_lengths, effective_length_probe, max_caption_tokens, text_to_image_r1, zero_shot_classify,
    LengthProbeCurve, TEMPLATES,
};
use crate::numerics::Matrix;
use crate::pcm::LossConfig;
use crate::stretch::{StretchMode, StretchSpec};
use crate::train::{train, AdamW, Checkpoint, TrainConfig, TrainLog, Variant};

/// The four stretch × objective cells, then the three alternatives.
pub const TABLE_VARIANTS: [Variant; 7] = [
    Variant::DirectFt,
    Variant::KpsOnly,
    Variant::PcmOnly,
    Variant::KpsPcm,
    Variant::Undistinguished,
    Variant::MixedLength,
    Variant::Bounded,
];

pub const GRID_VARIANTS: [Variant; 4] = [Variant::DirectFt, Variant::KpsOnly, Variant::PcmOnly, Variant::KpsPcm];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub data_seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Seed of the sibling-structured long-caption evaluation set.
    pub eval_seed: u64,
    /// Seed of the sibling-free short-caption evaluation set.
    pub short_eval_seed: u64,
    pub classify_seed: u64,
    pub classify_per_class: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Short-caption training of the starting model (variant is forced to short_baseline).
    pub pretrain: TrainConfig,
    /// Shared by every fine-tuned variant (variant is overridden per row).
    pub finetune: TrainConfig,
    pub linear_ratio: f64,
    pub kps_keep: usize,
    pub kps_ratio: f64,
    /// Probe budgets; defaults to the standard grid up to the longest eval caption.
    pub probe_lengths: Option<Vec<usize>>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            data_seed: 7,
            n_train: 2000,
            n_eval: 200,
            eval_seed: 1007,
            short_eval_seed: 2007,
            classify_seed: 3007,
            classify_per_class: 25,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            pretrain: TrainConfig {
                variant: Variant::ShortBaseline,
                epochs: 30,
                group_shuffle: false,
                optimizer: AdamW {
                    learning_rate: 2e-3,
                    warmup_iters: 50,
                    ..AdamW::default()
                },
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 8,
                shuffle_seed: 1,
                mix_seed: 1,
                optimizer: AdamW {
                    learning_rate: 3e-4,
                    warmup_iters: 50,
                    ..AdamW::default()
                },
                ..TrainConfig::default()
            },
            linear_ratio: 3.0,
            kps_keep: 20,
            kps_ratio: 4.0,
            probe_lengths: None,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_train >= 2 && self.n_eval >= 2, "need at least 2 train and 2 eval scenes");
        self.synth.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        ensure!(self.model.stretch.is_none(), "the starting model must be unstretched");
        Ok(())
    }

    pub fn stretch_for(&self, mode: StretchMode) -> StretchSpec {
        match mode {
            StretchMode::Linear => StretchSpec::linear(self.linear_ratio),
            StretchMode::Kps => StretchSpec::kps(self.kps_keep, self.kps_ratio),
        }
    }
}

/// Held-out data shared by every row.
pub struct EvalSets {
    /// Sibling-structured: only long captions separate group members.
    pub long: Vec<Record>,
    /// One scene per group: short captions are discriminative.
    pub short: Vec<Record>,
    pub classify: Vec<(Matrix<f32>, usize)>,
    pub class_names: Vec<String>,
}

impl EvalSets {
    pub fn generate(cfg: &AblationConfig) -> Result<Self> {
        let records = |seed, synth: &SynthConfig| -> Result<Vec<Record>> {
            Ok(generate_dataset(seed, cfg.n_eval, synth)?.iter().map(Record::from).collect())
        };
        let singles = SynthConfig {
            group_size: 1,
            ..cfg.synth.clone()
        };
        let classes = default_classes();
        Ok(Self {
            long: records(cfg.eval_seed, &cfg.synth)?,
            short: records(cfg.short_eval_seed, &singles)?,
            classify: generate_classification_set(cfg.classify_seed, cfg.classify_per_class, &classes, &cfg.synth)?,
            class_names: classes.iter().map(|c| c.name()).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Text-to-image R@1 with full long captions on the sibling set.
    pub long_r1: f64,
    /// Text-to-image R@1 with short captions on the sibling-free set.
    pub short_r1: f64,
    pub mean_r1: f64,
    pub classify_accuracy: f64,
    pub probe: LengthProbeCurve,
}

fn images(records: &[Record]) -> Vec<&Matrix<f32>> {
    records.iter().map(|r| &r.image).collect()
}

pub fn score(
    model: &DualEncoder<f32>,
    tag: &str,
    sets: &EvalSets,
    vocab: &Vocabulary,
    probe_lengths: &[usize],
) -> Result<Scores> {
    let ctx = model.config().context_len;
    let embed = |records: &[Record], long: bool| -> Result<f64> {
        let texts = records
            .iter()
            .map(|r| vocab.tokenize(if long { &r.long } else { &r.short }, ctx))
            .collect::<Result<Vec<_>>>()?;
        let img = model.encode_images_chunked(&images(records), 256)?;
        text_to_image_r1(&img, &model.encode_texts_chunked(&texts, 256)?)
    };
    let long_r1 = embed(&sets.long, true)?;
    let short_r1 = embed(&sets.short, false)?;
    let cls_images: Vec<&Matrix<f32>> = sets.classify.iter().map(|(m, _)| m).collect();
    let labels: Vec<usize> = sets.classify.iter().map(|&(_, l)| l).collect();
    let classify = zero_shot_classify(model, vocab, &cls_images, &labels, &sets.class_names, &TEMPLATES)?;
    let captions: Vec<String> = sets.long.iter().map(|r| r.long.clone()).collect();
    let probe = effective_length_probe(model, vocab, tag, &images(&sets.long), &captions, probe_lengths)?;
    Ok(Scores {
        long_r1,
        short_r1,
        mean_r1: (long_r1 + short_r1) / 2.0,
        classify_accuracy: classify.accuracy,
        probe,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub stretch: Option<StretchSpec>,
    /// Prefix-preserving stretch.
    pub kps: bool,
    /// Whether the coarse short-caption term is trained.
    pub pcm: bool,
    pub scores: Scores,
    /// Loss of the first optimizer step.
    pub initial_loss: f64,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: AblationRow,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        if v == Variant::ShortBaseline {
            return Some(&self.baseline);
        }
        self.rows.iter().find(|r| r.variant == v)
    }
}

/// Everything a run produces. Wall times live only in `train_seconds` and the logs.
pub struct AblationOutcome {
    pub report: AblationReport,
    pub checkpoints: Vec<(Variant, Checkpoint)>,
    pub logs: Vec<TrainLog>,
    pub train_seconds: Vec<(Variant, f64)>,
}

fn row(variant: Variant, model: &DualEncoder<f32>, log: &TrainLog, scores: Scores) -> AblationRow {
    let stretch = model.config().stretch;
    AblationRow {
        variant,
        stretch,
        kps: stretch.is_some_and(|s| s.mode == StretchMode::Kps),
        pcm: matches!(variant, Variant::PcmOnly | Variant::KpsPcm),
        scores,
        initial_loss: log.steps.first().map_or(f64::NAN, |s| s.loss.total),
        final_loss: log.epochs.last().map_or(f64::NAN, |e| e.total),
    }
}

/// Runs the baseline and then each of `variants` fine-tuned from it.
pub fn run(cfg: &AblationConfig, variants: &[Variant], vocab: &Vocabulary) -> Result<AblationOutcome> {
    cfg.validate()?;
    ensure!(
        !variants.contains(&Variant::ShortBaseline),
        "the baseline row is always produced; list only fine-tuned variants"
    );
    let train_set: Vec<Record> = generate_dataset(cfg.data_seed, cfg.n_train, &cfg.synth)?
        .iter()
        .map(Record::from)
        .collect();
    let sets = EvalSets::generate(cfg)?;
    let lengths = match &cfg.probe_lengths {
        Some(l) => l.clone(),
        None => default_probe_lengths(max_caption_tokens(
            &sets.long.iter().map(|r| r.long.clone()).collect::<Vec<_>>(),
        )),
    };

    let started = Instant::now();
    let pre_cfg = TrainConfig {
        variant: Variant::ShortBaseline,
        ..cfg.pretrain.clone()
    };
    let base = train(&pre_cfg, &cfg.loss, DualEncoder::new(cfg.model.clone())?, &train_set, vocab)?;
    let seconds = started.elapsed().as_secs_f64();
    // the baseline is probed inside its own context
    let base_model = base.checkpoint.model;
    let base_lengths: Vec<usize> = lengths
        .iter()
        .copied()
        .filter(|&l| l <= base_model.config().context_len)
        .collect();
    let base_scores = score(&base_model, Variant::ShortBaseline.name(), &sets, vocab, &base_lengths)?;
    log::info!("short_baseline: {:?}", (base_scores.long_r1, base_scores.short_r1));
    let baseline = row(Variant::ShortBaseline, &base_model, &base.log, base_scores);
    let mut train_seconds = vec![(Variant::ShortBaseline, seconds)];
    let mut checkpoints = vec![(Variant::ShortBaseline, Checkpoint::new(base_model.clone()))];
    let mut logs = vec![base.log];

    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut model = base_model.clone();
        if let Some(mode) = variant.required_stretch() {
            cfg.stretch_for(mode).apply_to_model(&mut model)?;
        }
        let ft_cfg = TrainConfig {
            variant,
            ..cfg.finetune.clone()
        };
        let started = Instant::now();
        let out = train(&ft_cfg, &cfg.loss, model, &train_set, vocab)?;
        let seconds = started.elapsed().as_secs_f64();
        let scores = score(&out.checkpoint.model, variant.name(), &sets, vocab, &lengths)?;
        log::info!("{variant}: long {:.3} short {:.3}", scores.long_r1, scores.short_r1);
        rows.push(row(variant, &out.checkpoint.model, &out.log, scores));
        train_seconds.push((variant, seconds));
        checkpoints.push((variant, out.checkpoint));
        logs.push(out.log);
    }
    Ok(AblationOutcome {
        report: AblationReport { baseline, rows },
        checkpoints,
        logs,
        train_seconds,
    })
}
