//! Training variants, the optimization loop and checkpoint persistence.

mod checkpoint;
mod optim;

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{config_hash, sha256_hex, Checkpoint, MAGIC, VERSION};
pub use optim::{adamw_step, clip_global_norm, global_norm, AdamState, AdamW};

use crate::data::{Record, TokenSequence, Vocabulary};
use crate::encoders::DualEncoder;
use crate::error::{ensure, Result};
use crate::numerics::{Matrix, Tape};
use crate::pcm::{
    alt_strategy_on_tape, contrastive_on_tape, dual_loss_on_tape, logit_scale_on_tape, mixed_length_mask,
    AltStrategy, LossConfig, LossValues, TapeBatch,
};
use crate::stretch::StretchMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Short captions only, unstretched table: the stand-in pretrained model.
    ShortBaseline,
    /// Fixed-ratio stretch, long captions only.
    DirectFt,
    /// Fixed-ratio stretch with the fine/coarse objective.
    PcmOnly,
    /// Prefix-preserving stretch, long captions only.
    KpsOnly,
    /// Prefix-preserving stretch with the fine/coarse objective.
    KpsPcm,
    Undistinguished,
    MixedLength,
    Bounded,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::ShortBaseline,
        Variant::DirectFt,
        Variant::PcmOnly,
        Variant::KpsOnly,
        Variant::KpsPcm,
        Variant::Undistinguished,
        Variant::MixedLength,
        Variant::Bounded,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ShortBaseline => "short_baseline",
            Variant::DirectFt => "direct_ft",
            Variant::PcmOnly => "pcm_only",
            Variant::KpsOnly => "kps_only",
            Variant::KpsPcm => "kps_pcm",
            Variant::Undistinguished => "undistinguished",
            Variant::MixedLength => "mixed_length",
            Variant::Bounded => "bounded",
        }
    }

    /// Stretch the model's positional table must carry before training.
    pub fn required_stretch(self) -> Option<StretchMode> {
        match self {
            Variant::ShortBaseline => None,
            Variant::DirectFt | Variant::PcmOnly => Some(StretchMode::Linear),
            _ => Some(StretchMode::Kps),
        }
    }

    pub fn uses_long_captions(self) -> bool {
        self != Variant::ShortBaseline
    }

    fn uses_short_captions(self) -> bool {
        !matches!(self, Variant::DirectFt | Variant::KpsOnly)
    }

    fn alt_strategy(self) -> Option<AltStrategy> {
        match self {
            Variant::Undistinguished => Some(AltStrategy::Undistinguished),
            Variant::MixedLength => Some(AltStrategy::MixedLength),
            Variant::Bounded => Some(AltStrategy::Bounded),
            _ => None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamW,
    /// Global-norm gradient clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Seed of the per-epoch shuffling stream.
    pub shuffle_seed: u64,
    /// Seed of the mixed-length substitution masks.
    pub mix_seed: u64,
    /// Shuffle whole sibling groups (runs of equal short captions) so that
    /// siblings share batches.
    pub group_shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::KpsPcm,
            batch_size: 64,
            epochs: 6,
            optimizer: AdamW::default(),
            grad_clip: 1.0,
            shuffle_seed: 0,
            mix_seed: 0,
            group_shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 2, "batch_size must be at least 2");
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        let o = &self.optimizer;
        ensure!(o.learning_rate > 0.0, "learning_rate must be positive");
        ensure!(o.weight_decay >= 0.0, "weight_decay must be non-negative");
        ensure!(
            (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0,
            "AdamW betas must lie in [0, 1) and eps must be positive"
        );
        ensure!(self.grad_clip >= 0.0, "grad_clip must be non-negative");
        Ok(())
    }
}

/// Which caption fields were tokenized during data preparation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerLog {
    pub long_captions: usize,
    pub short_captions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub learning_rate: f64,
    pub logit_scale: f64,
    pub grad_norm: f64,
    pub loss: LossValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub total: f64,
    pub fine: f64,
    pub coarse: Option<f64>,
    pub penalty: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub variant: Variant,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub tokenizer: TokenizerLog,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

struct Prepared {
    images: Vec<Matrix<f32>>,
    long: Vec<TokenSequence>,
    short: Vec<TokenSequence>,
    groups: Vec<Range<usize>>,
}

/// Runs of consecutive records with identical short captions.
fn sibling_groups(records: &[Record]) -> Vec<Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || records[i].short != records[start].short {
            groups.push(start..i);
            start = i;
        }
    }
    groups
}

fn prepare(
    records: &[Record],
    vocab: &Vocabulary,
    variant: Variant,
    context_len: usize,
    log: &mut TokenizerLog,
) -> Result<Prepared> {
    let mut tokenize = |text: &str, long: bool| -> Result<TokenSequence> {
        let need = Vocabulary::word_count(text) + 2;
        ensure!(
            need <= context_len,
            "{} caption needs {need} tokens but the model context is {context_len}",
            if long { "long" } else { "short" }
        );
        if long {
            log.long_captions += 1;
        } else {
            log.short_captions += 1;
        }
        vocab.tokenize(text, context_len)
    };
    let long = if variant.uses_long_captions() {
        records.iter().map(|r| tokenize(&r.long, true)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let short = if variant.uses_short_captions() {
        records.iter().map(|r| tokenize(&r.short, false)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(Prepared {
        images: records.iter().map(|r| r.image.clone()).collect(),
        long,
        short,
        groups: sibling_groups(records),
    })
}

fn epoch_order(p: &Prepared, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if cfg.group_shuffle {
        let mut groups = p.groups.clone();
        groups.shuffle(rng);
        groups.into_iter().flatten().collect()
    } else {
        let mut order: Vec<usize> = (0..p.images.len()).collect();
        order.shuffle(rng);
        order
    }
}

/// Batches of `batch_size`; a trailing batch smaller than 2 is dropped
/// because the contrastive objective needs negatives.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order.chunks(batch_size).filter(|b| b.len() >= 2).collect()
}

fn check_model(cfg: &TrainConfig, model: &DualEncoder<f32>) -> Result<()> {
    let have = model.config().stretch.map(|s| s.mode);
    let want = cfg.variant.required_stretch();
    ensure!(
        have == want,
        "variant {} needs positional stretch {want:?} but the model carries {have:?}",
        cfg.variant
    );
    Ok(())
}

/// Parameters excluded from weight decay: biases, layer-norm gains and the temperature.
pub fn decay_mask<T: crate::numerics::Scalar>(model: &DualEncoder<T>) -> Vec<bool> {
    model
        .param_names()
        .iter()
        .map(|n| !(n.ends_with(".bias") || n.ends_with(".gain") || n == "temperature"))
        .collect()
}

/// Trains `model` under `cfg`; the optimizer starts from zero moments.
pub fn train(
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    model: DualEncoder<f32>,
    records: &[Record],
    vocab: &Vocabulary,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    ensure!(records.len() >= 2, "training needs at least 2 records");
    check_model(cfg, &model)?;
    let mut tokenizer = TokenizerLog::default();
    let data = prepare(records, vocab, cfg.variant, model.config().context_len, &mut tokenizer)?;

    let frozen_short = if cfg.variant == Variant::Bounded {
        Some(model.encode_texts_chunked(&data.short, 256)?)
    } else {
        None
    };
    let mut model = model;
    let mut state = AdamState::new(model.params());
    let decay = decay_mask(&model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut log = TrainLog {
        variant: cfg.variant,
        steps: Vec::new(),
        epochs: Vec::new(),
        tokenizer,
    };

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(&data, cfg, &mut shuffle_rng);
        let mask = mixed_length_mask(
            data.images.len(),
            loss_cfg.mixed_rate,
            cfg.mix_seed.wrapping_add(epoch as u64),
        );
        let first_step = log.steps.len();
        for idx in batches(&order, cfg.batch_size) {
            let (values, mut grads, scale) = step_gradients(&model, &data, idx, cfg.variant, loss_cfg, &mask, frozen_short.as_ref())?;
            let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
            let lr = adamw_step(model.params_mut(), &grads, &mut state, &cfg.optimizer, &decay)?;
            log.steps.push(StepRecord {
                step: state.step,
                learning_rate: lr,
                logit_scale: scale,
                grad_norm,
                loss: values,
            });
        }
        let steps = &log.steps[first_step..];
        let n = steps.len().max(1) as f64;
        let mean_opt = |f: fn(&StepRecord) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = steps.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let record = EpochRecord {
            epoch,
            steps: steps.len(),
            total: steps.iter().map(|s| s.loss.total).sum::<f64>() / n,
            fine: steps.iter().map(|s| s.loss.fine).sum::<f64>() / n,
            coarse: mean_opt(|s| s.loss.coarse),
            penalty: mean_opt(|s| s.loss.penalty),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: total {:.4} fine {:.4} coarse {:?} penalty {:?} ({:.1}s)",
            cfg.variant,
            record.total,
            record.fine,
            record.coarse,
            record.penalty,
            record.wall_seconds
        );
        log.epochs.push(record);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            optimizer: Some(state),
        },
        log,
    })
}

type StepResult = (LossValues, Vec<Matrix<f32>>, f64);

fn step_gradients(
    model: &DualEncoder<f32>,
    data: &Prepared,
    idx: &[usize],
    variant: Variant,
    loss_cfg: &LossConfig,
    mask: &[bool],
    frozen_short: Option<&Matrix<f32>>,
) -> Result<StepResult> {
    let mut tape = Tape::<f32>::new();
    let bound = model.bind(&mut tape);
    let images: Vec<&Matrix<f32>> = idx.iter().map(|&i| &data.images[i]).collect();
    let image = model.image_forward(&mut tape, &bound, &images)?;
    let scale = logit_scale_on_tape(&mut tape, bound.vars()[model.temperature_index()], loss_cfg)?;

    let terms = match variant {
        Variant::ShortBaseline => {
            let short = model.text_forward(&mut tape, &bound, &pick(idx, &data.short))?;
            let fine = contrastive_on_tape(&mut tape, image, short, scale, loss_cfg.symmetric)?;
            single(fine)
        }
        Variant::DirectFt | Variant::KpsOnly => {
            let long = model.text_forward(&mut tape, &bound, &pick(idx, &data.long))?;
            let fine = contrastive_on_tape(&mut tape, image, long, scale, loss_cfg.symmetric)?;
            single(fine)
        }
        Variant::PcmOnly | Variant::KpsPcm => {
            let long = model.text_forward(&mut tape, &bound, &pick(idx, &data.long))?;
            let short = model.text_forward(&mut tape, &bound, &pick(idx, &data.short))?;
            dual_loss_on_tape(&mut tape, image, long, short, scale, loss_cfg, None)?
        }
        Variant::Undistinguished | Variant::MixedLength | Variant::Bounded => {
            let strategy = variant.alt_strategy().expect("alternative variant");
            let batch = if strategy == AltStrategy::MixedLength {
                let mixed: Vec<&TokenSequence> = idx
                    .iter()
                    .map(|&i| if mask[i] { &data.short[i] } else { &data.long[i] })
                    .collect();
                TapeBatch {
                    image,
                    long: model.text_forward(&mut tape, &bound, &mixed)?,
                    short: None,
                    frozen_short: None,
                }
            } else {
                let long = model.text_forward(&mut tape, &bound, &pick(idx, &data.long))?;
                let short = model.text_forward(&mut tape, &bound, &pick(idx, &data.short))?;
                let frozen_short = frozen_short.map(|f| tape.constant(f.select_rows(idx)));
                TapeBatch {
                    image,
                    long,
                    short: Some(short),
                    frozen_short,
                }
            };
            alt_strategy_on_tape(&mut tape, strategy, &batch, scale, loss_cfg)?
        }
    };
    let values = terms.values(&tape);
    ensure!(values.total.is_finite(), "non-finite loss {}", values.total);
    let grads = tape.backward(terms.total)?;
    let flat = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
    Ok((values, flat, tape.value(scale).item() as f64))
}

fn pick<'a>(idx: &[usize], seqs: &'a [TokenSequence]) -> Vec<&'a TokenSequence> {
    idx.iter().map(|&i| &seqs[i]).collect()
}

fn single(fine: crate::numerics::Var) -> crate::pcm::LossTerms {
    crate::pcm::LossTerms {
        total: fine,
        fine,
        coarse: None,
        penalty: None,
    }
}
