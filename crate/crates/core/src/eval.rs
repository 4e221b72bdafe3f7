//! Retrieval recall, prompt-ensembled zero-shot classification and the
//! effective-length probe.
//!
//! Rankings break similarity ties in favour of the lower index.

use serde::{Deserialize, Serialize};

use crate::data::{TokenSequence, Vocabulary};
use crate::encoders::DualEncoder;
use crate::error::{ensure, Result};
use crate::numerics::{Matrix, Scalar};

/// Row-norm tolerance for embeddings handed to the metrics.
const NORM_TOLERANCE: f64 = 1e-4;

pub const TEMPLATES: [&str; 8] = [
    "a {}",
    "a {} .",
    "the image shows a {}",
    "the image shows a {} .",
    "a photo of a {}",
    "a picture with a {}",
    "there is a {} in the image",
    "this image shows a {}",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub ks: Vec<usize>,
    pub recalls: Vec<f64>,
    pub n: usize,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recalls[i])
    }
}

fn check_unit_rows<T: Scalar>(m: &Matrix<T>, what: &str) -> Result<()> {
    for (i, n) in m.row_norms().into_iter().enumerate() {
        ensure!(
            (n.as_f64() - 1.0).abs() <= NORM_TOLERANCE,
            "{what} row {i} has norm {}, expected unit norm",
            n.as_f64()
        );
    }
    Ok(())
}

/// Rank of the matching candidate `target` among the scores of one query
/// (0 = top), ties going to the lower index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(c, &x)| x > s || (x == s && c < target))
        .count()
}

fn sims<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<f64>> {
    a.cast::<f64>().matmul_t(&b.cast::<f64>())
}

/// Recall@K in both directions for matched rows `img[i] ↔ txt[i]`.
///
/// Returns `[image_to_text, text_to_image]`.
pub fn recall_at_k<T: Scalar>(img: &Matrix<T>, txt: &Matrix<T>, ks: &[usize]) -> Result<[RetrievalReport; 2]> {
    ensure!(
        img.rows() == txt.rows(),
        "{} images but {} texts",
        img.rows(),
        txt.rows()
    );
    ensure!(img.rows() >= 1, "retrieval needs at least one pair");
    ensure!(!ks.is_empty(), "no k values");
    ensure!(
        ks[0] >= 1 && ks.windows(2).all(|w| w[0] < w[1]),
        "k values must be positive and strictly ascending"
    );
    check_unit_rows(img, "image")?;
    check_unit_rows(txt, "text")?;
    let s = sims(img, txt)?;
    let st = s.transpose();
    let report = |m: &Matrix<f64>, direction| {
        let ranks: Vec<usize> = (0..m.rows()).map(|q| rank_of(m.row(q), q)).collect();
        let n = ranks.len();
        RetrievalReport {
            direction,
            ks: ks.to_vec(),
            recalls: ks
                .iter()
                .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)
                .collect(),
            n,
        }
    };
    Ok([report(&s, Direction::ImageToText), report(&st, Direction::TextToImage)])
}

/// Text-to-image R@1.
pub fn text_to_image_r1<T: Scalar>(img: &Matrix<T>, txt: &Matrix<T>) -> Result<f64> {
    let [_, t2i] = recall_at_k(img, txt, &[1])?;
    Ok(t2i.recalls[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub n: usize,
    pub predictions: Vec<usize>,
}

/// Index of the largest score, ties to the lower index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Per class: the normalized mean of its template embeddings.
pub fn class_embeddings<T: Scalar>(
    model: &DualEncoder<T>,
    vocab: &Vocabulary,
    class_names: &[String],
    templates: &[&str],
) -> Result<Matrix<f64>> {
    ensure!(!templates.is_empty(), "at least one template is required");
    ensure!(
        templates.iter().all(|t| t.contains("{}")),
        "every template needs a {{}} slot"
    );
    let ctx = model.config().context_len;
    let mut rows = Vec::with_capacity(class_names.len());
    for name in class_names {
        let seqs: Vec<TokenSequence> = templates
            .iter()
            .map(|t| vocab.tokenize(&t.replace("{}", name), ctx))
            .collect::<Result<_>>()?;
        let e = model.encode_texts(&seqs.iter().collect::<Vec<_>>())?.cast::<f64>();
        let mut mean = vec![0.0; e.cols()];
        for r in 0..e.rows() {
            for (m, &x) in mean.iter_mut().zip(e.row(r)) {
                *m += x / e.rows() as f64;
            }
        }
        rows.push(mean);
    }
    Ok(Matrix::from_rows(&rows)?.normalize_rows())
}

/// Predictions and accuracy from image embeddings and class embeddings.
pub fn classify_embeddings(images: &Matrix<f64>, classes: &Matrix<f64>, labels: &[usize]) -> Result<ClassificationReport> {
    ensure!(images.rows() == labels.len(), "{} images for {} labels", images.rows(), labels.len());
    ensure!(classes.rows() >= 1, "at least one class is required");
    ensure!(
        labels.iter().all(|&l| l < classes.rows()),
        "label out of range for {} classes",
        classes.rows()
    );
    let scores = images.matmul_t(classes)?;
    let predictions: Vec<usize> = (0..scores.rows()).map(|r| argmax(scores.row(r))).collect();
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(ClassificationReport {
        accuracy: correct as f64 / labels.len().max(1) as f64,
        n: labels.len(),
        predictions,
    })
}

/// Zero-shot top-1 accuracy with prompt ensembling.
pub fn zero_shot_classify<T: Scalar>(
    model: &DualEncoder<T>,
    vocab: &Vocabulary,
    images: &[&Matrix<f32>],
    labels: &[usize],
    class_names: &[String],
    templates: &[&str],
) -> Result<ClassificationReport> {
    ensure!(!class_names.is_empty(), "at least one class is required");
    let classes = class_embeddings(model, vocab, class_names, templates)?;
    let img = model.encode_images_chunked(images, 256)?.cast::<f64>();
    classify_embeddings(&img, &classes, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthProbeCurve {
    pub model_tag: String,
    /// Token budgets, BOS and EOT included.
    pub lengths: Vec<usize>,
    pub r_at_1: Vec<f64>,
}

impl LengthProbeCurve {
    pub fn at(&self, length: usize) -> Option<f64> {
        self.lengths.iter().position(|&l| l == length).map(|i| self.r_at_1[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("length,r_at_1\n");
        for (l, r) in self.lengths.iter().zip(&self.r_at_1) {
            out.push_str(&format!("{l},{r}\n"));
        }
        out
    }
}

/// `{5, 10, 15, 20, 30, 40, 48, 60}` below `full`, then `full` itself.
pub fn default_probe_lengths(full: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [5, 10, 15, 20, 30, 40, 48, 60]
        .into_iter()
        .filter(|&l| l < full)
        .collect();
    v.push(full);
    v
}

/// Longest tokenized caption (BOS and EOT included).
pub fn max_caption_tokens(captions: &[String]) -> usize {
    captions.iter().map(|c| Vocabulary::word_count(c) + 2).max().unwrap_or(2)
}

/// Text-to-image R@1 with every caption truncated to each token budget.
pub fn effective_length_probe<T: Scalar>(
    model: &DualEncoder<T>,
    vocab: &Vocabulary,
    model_tag: &str,
    images: &[&Matrix<f32>],
    captions: &[String],
    lengths: &[usize],
) -> Result<LengthProbeCurve> {
    ensure!(!lengths.is_empty(), "no probe lengths");
    ensure!(
        lengths.windows(2).all(|w| w[0] < w[1]),
        "probe lengths must be strictly ascending"
    );
    let ctx = model.config().context_len;
    ensure!(
        *lengths.last().unwrap() <= ctx,
        "probe length {} exceeds context length {ctx}",
        lengths.last().unwrap()
    );
    ensure!(images.len() == captions.len(), "{} images for {} captions", images.len(), captions.len());
    let img = model.encode_images_chunked(images, 256)?;
    let mut r_at_1 = Vec::with_capacity(lengths.len());
    for &m in lengths {
        let seqs: Vec<TokenSequence> = captions
            .iter()
            .map(|c| vocab.tokenize(c, m))
            .collect::<Result<_>>()?;
        let txt = model.encode_texts_chunked(&seqs, 256)?;
        r_at_1.push(text_to_image_r1(&img, &txt)?);
    }
    Ok(LengthProbeCurve {
        model_tag: model_tag.to_string(),
        lengths: lengths.to_vec(),
        r_at_1,
    })
}
