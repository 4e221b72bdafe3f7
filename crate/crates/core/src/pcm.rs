//! Primary component extraction and the fine/coarse contrastive objective.
//!
//! Coarse image features are obtained from a batch of fine features by
//! centering them, projecting onto the top-k eigenvectors of the batch
//! covariance, mapping back, restoring the mean and re-normalizing rows.
//! During training the mean and eigenvectors are tape constants, so
//! gradients flow through the projection and reconstruction only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{sym_eig, Matrix, Scalar, Tape, Var};

/// Row-norm tolerance for batches claimed to be unit-normalized.
pub const NORM_TOLERANCE: f64 = 1e-6;
/// Threshold of the smooth-L1 penalty in the bounded strategy.
pub const SMOOTH_L1_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the coarse (short-caption) term.
    pub alpha_loss: f64,
    pub k_components: usize,
    /// Average the image→text and text→image cross-entropies.
    pub symmetric: bool,
    /// Upper clamp on the logit scale `exp(t)`.
    pub temperature_clamp_max: f64,
    /// Weight of the smooth-L1 penalty in the bounded strategy.
    pub bounded_beta: f64,
    /// Fraction of long captions replaced by short ones in the mixed strategy.
    pub mixed_rate: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_loss: 0.1,
            k_components: 32,
            symmetric: true,
            temperature_clamp_max: 100.0,
            bounded_beta: 1.0,
            mixed_rate: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.alpha_loss.is_finite() && self.alpha_loss >= 0.0,
            "alpha_loss must be ≥ 0"
        );
        ensure!(self.k_components >= 1, "k_components must be ≥ 1");
        ensure!(
            self.temperature_clamp_max.is_finite() && self.temperature_clamp_max >= 1.0,
            "temperature_clamp_max must be ≥ 1"
        );
        ensure!(
            self.bounded_beta.is_finite() && self.bounded_beta >= 0.0,
            "bounded_beta must be ≥ 0"
        );
        ensure!(
            (0.0..=1.0).contains(&self.mixed_rate),
            "mixed_rate must lie in [0, 1]"
        );
        Ok(())
    }
}

/// Per-sample embeddings, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    features: Matrix<f64>,
    normalized: bool,
}

impl FeatureBatch {
    pub fn raw(features: Matrix<f64>) -> Result<Self> {
        ensure!(features.rows() >= 1, "feature batch needs at least one row");
        if !features.is_finite() {
            return Err(Error::NonFinite("feature batch".into()));
        }
        Ok(Self {
            features,
            normalized: false,
        })
    }

    /// Scales every row to unit norm.
    pub fn normalized(features: Matrix<f64>) -> Result<Self> {
        let raw = Self::raw(features)?;
        ensure!(
            raw.features.row_norms().iter().all(|&n| n > 0.0),
            "cannot normalize a zero row"
        );
        Ok(Self {
            features: raw.features.normalize_rows(),
            normalized: true,
        })
    }

    /// Wraps rows that are already unit-norm within [`NORM_TOLERANCE`].
    pub fn from_unit_rows<T: Scalar>(features: &Matrix<T>) -> Result<Self> {
        let raw = Self::raw(features.cast())?;
        for (i, n) in raw.features.row_norms().into_iter().enumerate() {
            ensure!(
                (n - 1.0).abs() <= NORM_TOLERANCE,
                "row {i} has norm {n}, expected unit norm"
            );
        }
        Ok(Self {
            normalized: true,
            ..raw
        })
    }

    pub fn features(&self) -> &Matrix<f64> {
        &self.features
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    fn require_normalized(&self, what: &str) -> Result<()> {
        ensure!(self.normalized, "{what} batch must be unit-normalized");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentDecomposition {
    pub mean: Vec<f64>,
    /// `d × m`, one unit eigenvector per column.
    pub components: Matrix<f64>,
    /// Eigenvalues of the batch covariance, descending.
    pub importances: Vec<f64>,
    /// `n × m` coordinates of the centered rows.
    pub projections: Matrix<f64>,
}

impl ComponentDecomposition {
    pub fn rank(&self) -> usize {
        self.components.cols()
    }
}

fn center(x: &Matrix<f64>, mean: &[f64]) -> Matrix<f64> {
    Matrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) - mean[c])
}

/// Eigendecomposition of the batch covariance `XcᵀXc / (n − 1)`.
///
/// Keeps `m = min(d, n)` components.
pub fn decompose(batch: &FeatureBatch) -> Result<ComponentDecomposition> {
    let n = batch.n();
    ensure!(n >= 2, "decompose needs at least 2 rows, got {n}");
    let x = batch.features();
    let mean = x.column_mean();
    let xc = center(x, &mean);
    let cov = xc.t_matmul(&xc)?.scale(1.0 / (n as f64 - 1.0));
    let eig = sym_eig(&cov)?;
    let m = batch.dim().min(n);
    let components = eig.eigenvectors.select_cols(0..m);
    let importances = eig.eigenvalues[..m].iter().map(|&v| v.max(0.0)).collect();
    let projections = xc.matmul(&components)?;
    Ok(ComponentDecomposition {
        mean,
        components,
        importances,
        projections,
    })
}

/// Keeps the leading `min(k, m)` components.
pub fn filter_components(dec: &ComponentDecomposition, k: usize) -> Result<ComponentDecomposition> {
    ensure!(k >= 1, "k must be ≥ 1");
    let k = k.min(dec.rank());
    Ok(ComponentDecomposition {
        mean: dec.mean.clone(),
        components: dec.components.select_cols(0..k),
        importances: dec.importances[..k].to_vec(),
        projections: dec.projections.select_cols(0..k),
    })
}

/// `projections · componentsᵀ + mean`, before re-normalization.
pub fn reconstruct_raw(dec: &ComponentDecomposition) -> Result<Matrix<f64>> {
    let mut out = dec.projections.matmul_t(&dec.components)?;
    for r in 0..out.rows() {
        for (x, &m) in out.row_mut(r).iter_mut().zip(&dec.mean) {
            *x += m;
        }
    }
    Ok(out)
}

pub fn reconstruct(dec: &ComponentDecomposition) -> Result<FeatureBatch> {
    FeatureBatch::normalized(reconstruct_raw(dec)?)
}

/// `min(k, d, n − 1)`: the centered batch has rank at most `n − 1`.
pub fn effective_k(k: usize, n: usize, d: usize) -> usize {
    k.min(d).min(n.saturating_sub(1)).max(1)
}

pub fn primary_component_extract(batch: &FeatureBatch, k: usize) -> Result<FeatureBatch> {
    ensure!(k >= 1, "k must be ≥ 1");
    let dec = decompose(batch)?;
    let dec = filter_components(&dec, effective_k(k, batch.n(), batch.dim()))?;
    reconstruct(&dec)
}

/// Mean and leading components of one batch, used as backward-pass constants.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `d × k_eff`.
    pub components: Matrix<f64>,
}

impl PcaBasis {
    pub fn fit<T: Scalar>(features: &Matrix<T>, k: usize) -> Result<Self> {
        let batch = FeatureBatch::raw(features.cast())?;
        let dec = decompose(&batch)?;
        let dec = filter_components(&dec, effective_k(k, batch.n(), batch.dim()))?;
        Ok(Self {
            mean: dec.mean,
            components: dec.components,
        })
    }

    pub fn k(&self) -> usize {
        self.components.cols()
    }
}

/// Differentiable extraction with `basis` held constant.
pub fn pce_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, basis: &PcaBasis) -> Result<Var> {
    let d = basis.mean.len();
    ensure!(
        tape.shape(x).1 == d,
        "basis dimension {d} does not match features {:?}",
        tape.shape(x)
    );
    let neg_mean = tape.constant(Matrix::from_fn(1, d, |_, c| T::of(-basis.mean[c])));
    let mean = tape.constant(Matrix::from_fn(1, d, |_, c| T::of(basis.mean[c])));
    let v = tape.constant(basis.components.cast());
    let xc = tape.add_row(x, neg_mean)?;
    let p = tape.matmul(xc, v)?;
    let r = tape.matmul_t(p, v)?;
    let r = tape.add_row(r, mean)?;
    tape.row_l2_normalize(r)
}

/// `exp(clamp(t, 0, ln max))` for the raw temperature node `t`.
pub fn logit_scale_on_tape<T: Scalar>(tape: &mut Tape<T>, t: Var, cfg: &LossConfig) -> Result<Var> {
    tape.exp_clamp(t, T::one(), T::of(cfg.temperature_clamp_max))
}

/// Diagonal-label cross-entropy on `scale · img · txtᵀ`.
pub fn contrastive_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    img: Var,
    txt: Var,
    scale: Var,
    symmetric: bool,
) -> Result<Var> {
    ensure!(
        tape.shape(img) == tape.shape(txt),
        "image batch {:?} and text batch {:?} differ",
        tape.shape(img),
        tape.shape(txt)
    );
    let labels: Vec<usize> = (0..tape.shape(img).0).collect();
    let logits = tape.matmul_t(img, txt)?;
    let logits = tape.scale_by(logits, scale)?;
    let i2t = tape.cross_entropy(logits, &labels)?;
    if !symmetric {
        return Ok(i2t);
    }
    let lt = tape.transpose(logits);
    let t2i = tape.cross_entropy(lt, &labels)?;
    let both = tape.add(i2t, t2i)?;
    Ok(tape.scale(both, T::of(0.5)))
}

/// Loss nodes of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub fine: Var,
    pub coarse: Option<Var>,
    pub penalty: Option<Var>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub fine: f64,
    pub coarse: Option<f64>,
    pub penalty: Option<f64>,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        let get = |v: Var| tape.value(v).item().as_f64();
        LossValues {
            total: get(self.total),
            fine: get(self.fine),
            coarse: self.coarse.map(get),
            penalty: self.penalty.map(get),
        }
    }
}

fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, w: f64) -> Result<Var> {
    let wb = tape.scale(b, T::of(w));
    tape.add(a, wb)
}

/// `contrastive(I, T_long) + α · contrastive(PCE(I), T_short)`.
///
/// Without a `basis` one is fitted to the current image features.
pub fn dual_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    long: Var,
    short: Var,
    scale: Var,
    cfg: &LossConfig,
    basis: Option<&PcaBasis>,
) -> Result<LossTerms> {
    let fine = contrastive_on_tape(tape, image, long, scale, cfg.symmetric)?;
    let fitted;
    let basis = match basis {
        Some(b) => b,
        None => {
            fitted = PcaBasis::fit(tape.value(image), cfg.k_components)?;
            &fitted
        }
    };
    let coarse_img = pce_on_tape(tape, image, basis)?;
    let coarse = contrastive_on_tape(tape, coarse_img, short, scale, cfg.symmetric)?;
    let total = weighted_sum(tape, fine, coarse, cfg.alpha_loss)?;
    Ok(LossTerms {
        total,
        fine,
        coarse: Some(coarse),
        penalty: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AltStrategy {
    /// Short captions aligned to the fine image features directly.
    Undistinguished,
    /// A fraction of long captions swapped for short ones.
    MixedLength,
    /// Short-caption features tied to a frozen copy of the text encoder.
    Bounded,
}

/// Embedding nodes available to an objective.
///
/// For [`AltStrategy::MixedLength`] the `long` slot holds the already-mixed
/// caption batch.
#[derive(Debug, Clone, Copy)]
pub struct TapeBatch {
    pub image: Var,
    pub long: Var,
    pub short: Option<Var>,
    pub frozen_short: Option<Var>,
}

pub fn alt_strategy_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    strategy: AltStrategy,
    batch: &TapeBatch,
    scale: Var,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let fine = contrastive_on_tape(tape, batch.image, batch.long, scale, cfg.symmetric)?;
    let need_short = || {
        batch
            .short
            .ok_or_else(|| Error::Contract(format!("{strategy:?} needs short-caption embeddings")))
    };
    match strategy {
        AltStrategy::MixedLength => Ok(LossTerms {
            total: fine,
            fine,
            coarse: None,
            penalty: None,
        }),
        AltStrategy::Undistinguished => {
            let short = need_short()?;
            let coarse = contrastive_on_tape(tape, batch.image, short, scale, cfg.symmetric)?;
            let total = weighted_sum(tape, fine, coarse, cfg.alpha_loss)?;
            Ok(LossTerms {
                total,
                fine,
                coarse: Some(coarse),
                penalty: None,
            })
        }
        AltStrategy::Bounded => {
            let short = need_short()?;
            let frozen = batch.frozen_short.ok_or_else(|| {
                Error::Contract("bounded strategy needs a frozen reference encoder".into())
            })?;
            let penalty = tape.smooth_l1(short, frozen, T::of(SMOOTH_L1_THRESHOLD))?;
            let total = weighted_sum(tape, fine, penalty, cfg.bounded_beta)?;
            Ok(LossTerms {
                total,
                fine,
                coarse: None,
                penalty: Some(penalty),
            })
        }
    }
}

/// Seeded per-sample substitution mask; `true` selects the short caption.
pub fn mixed_length_mask(n: usize, rate: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>() < rate).collect()
}

fn same_n(a: &FeatureBatch, b: &FeatureBatch) -> Result<()> {
    ensure!(a.n() == b.n(), "batch sizes differ: {} vs {}", a.n(), b.n());
    ensure!(a.dim() == b.dim(), "feature dims differ: {} vs {}", a.dim(), b.dim());
    Ok(())
}

struct Eval {
    tape: Tape<f64>,
    scale: Var,
}

impl Eval {
    fn new(t: f64, cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        let mut tape = Tape::new();
        let t = tape.constant(Matrix::scalar(t));
        let scale = logit_scale_on_tape(&mut tape, t, cfg)?;
        Ok(Self { tape, scale })
    }

    fn put(&mut self, b: &FeatureBatch) -> Var {
        self.tape.constant(b.features().clone())
    }
}

/// Contrastive loss of two unit-normalized batches at log-scale temperature `t`.
pub fn contrastive_loss(img: &FeatureBatch, txt: &FeatureBatch, t: f64, cfg: &LossConfig) -> Result<f64> {
    img.require_normalized("image")?;
    txt.require_normalized("text")?;
    same_n(img, txt)?;
    let mut ev = Eval::new(t, cfg)?;
    let (i, x) = (ev.put(img), ev.put(txt));
    let l = contrastive_on_tape(&mut ev.tape, i, x, ev.scale, cfg.symmetric)?;
    Ok(ev.tape.value(l).item())
}

pub fn dual_loss(
    i_fine: &FeatureBatch,
    t_long: &FeatureBatch,
    t_short: &FeatureBatch,
    cfg: &LossConfig,
    t: f64,
) -> Result<LossValues> {
    for (b, what) in [(i_fine, "image"), (t_long, "long text"), (t_short, "short text")] {
        b.require_normalized(what)?;
    }
    same_n(i_fine, t_long)?;
    same_n(i_fine, t_short)?;
    ensure!(i_fine.n() >= 2, "dual loss needs at least 2 pairs");
    let mut ev = Eval::new(t, cfg)?;
    let (i, l, s) = (ev.put(i_fine), ev.put(t_long), ev.put(t_short));
    let terms = dual_loss_on_tape(&mut ev.tape, i, l, s, ev.scale, cfg, None)?;
    Ok(terms.values(&ev.tape))
}

/// Inputs of [`alt_strategy_loss`].
#[derive(Debug, Clone, Copy)]
pub struct AltInputs<'a> {
    pub image: &'a FeatureBatch,
    pub long: &'a FeatureBatch,
    pub short: &'a FeatureBatch,
    /// Short-caption features from the frozen reference encoder.
    pub frozen_short: Option<&'a FeatureBatch>,
    /// Seed of the mixed-length substitution mask.
    pub mix_seed: u64,
}

pub fn alt_strategy_loss(
    strategy: AltStrategy,
    inputs: &AltInputs<'_>,
    cfg: &LossConfig,
    t: f64,
) -> Result<LossValues> {
    same_n(inputs.image, inputs.long)?;
    same_n(inputs.image, inputs.short)?;
    let mut ev = Eval::new(t, cfg)?;
    let image = ev.put(inputs.image);
    let (long, short) = match strategy {
        AltStrategy::MixedLength => {
            let mask = mixed_length_mask(inputs.long.n(), cfg.mixed_rate, inputs.mix_seed);
            let rows: Vec<Vec<f64>> = mask
                .iter()
                .enumerate()
                .map(|(i, &m)| {
                    let src = if m { inputs.short } else { inputs.long };
                    src.features().row(i).to_vec()
                })
                .collect();
            (ev.tape.constant(Matrix::from_rows(&rows)?), None)
        }
        _ => (ev.put(inputs.long), Some(ev.put(inputs.short))),
    };
    let frozen_short = match inputs.frozen_short {
        Some(f) => {
            same_n(inputs.short, f)?;
            Some(ev.put(f))
        }
        None => None,
    };
    let batch = TapeBatch {
        image,
        long,
        short,
        frozen_short,
    };
    let terms = alt_strategy_on_tape(&mut ev.tape, strategy, &batch, ev.scale, cfg)?;
    Ok(terms.values(&ev.tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    fn unit(n: usize, d: usize, seed: u64) -> FeatureBatch {
        FeatureBatch::normalized(gaussian(n, d, seed)).unwrap()
    }

    /// Top-`k` eigenpairs of a symmetric PSD matrix by power iteration with deflation.
    fn power_eigs(s: &Matrix<f64>, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = s.rows();
        let mut a = s.clone();
        let mut vals = Vec::new();
        let mut vecs = Vec::new();
        for j in 0..k {
            let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7 + j * 3) % 5) as f64).collect();
            let mut lambda = 0.0;
            for _ in 0..20_000 {
                let w: Vec<f64> = (0..d)
                    .map(|r| (0..d).map(|c| a.get(r, c) * v[c]).sum())
                    .collect();
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 1e-300 {
                    break;
                }
                lambda = norm;
                v = w.iter().map(|x| x / norm).collect();
            }
            for r in 0..d {
                for c in 0..d {
                    a.set(r, c, a.get(r, c) - lambda * v[r] * v[c]);
                }
            }
            vals.push(lambda);
            vecs.push(v);
        }
        (vals, vecs)
    }

    #[test]
    fn identical_rows_have_zero_variance() {
        let row = vec![0.6, 0.8, 0.0];
        let x = Matrix::from_rows(&vec![row.clone(); 5]).unwrap();
        let dec = decompose(&FeatureBatch::raw(x).unwrap()).unwrap();
        assert!(dec.importances.iter().all(|&v| v.abs() < 1e-15));
        assert_eq!(dec.mean, row);
        let out = reconstruct(&filter_components(&dec, 2).unwrap()).unwrap();
        for r in 0..5 {
            assert!(out.features().row(r).iter().zip(&row).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn collinear_points() {
        let dir = [0.6, 0.8];
        let x = Matrix::from_fn(3, 2, |r, c| 1.0 + r as f64 * dir[c]);
        let dec = decompose(&FeatureBatch::raw(x).unwrap()).unwrap();
        assert!(dec.importances[1].abs() < 1e-12);
        let v = dec.components.column(0);
        assert!((v[0] * dir[0] + v[1] * dir[1]).abs() > 1.0 - 1e-6);
        let one = filter_components(&dec, 1).unwrap();
        assert_eq!(one.rank(), 1);
        assert_eq!(one.components.column(0), v);
    }

    #[test]
    fn importances_match_singular_values() {
        let x = gaussian(8, 4, 11);
        let n = 8.0;
        let mean = x.column_mean();
        let xc = center(&x, &mean);
        // Gram-side oracle: nonzero eigenvalues of Xc·Xcᵀ/(n−1) are σ² of Xc/√(n−1)
        let gram = xc.matmul_t(&xc).unwrap().scale(1.0 / (n - 1.0));
        let (sv2, _) = power_eigs(&gram, 4);
        let dec = decompose(&FeatureBatch::raw(x).unwrap()).unwrap();
        for (a, b) in dec.importances.iter().zip(&sv2) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        for j in 1..dec.importances.len() {
            assert!(dec.importances[j] <= dec.importances[j - 1]);
        }
        let vtv = dec.components.t_matmul(&dec.components).unwrap();
        assert!(vtv.max_abs_diff(&Matrix::identity(4)) < 1e-6);
    }

    #[test]
    fn decompose_needs_two_rows() {
        let b = unit(1, 4, 1);
        assert!(matches!(decompose(&b), Err(Error::Contract(_))));
    }

    #[test]
    fn filter_saturates_and_keeps_order() {
        let dec = decompose(&unit(10, 6, 2)).unwrap();
        assert_eq!(filter_components(&dec, 100).unwrap(), dec);
        assert!(filter_components(&dec, 0).is_err());
        let f = filter_components(&dec, 3).unwrap();
        assert_eq!(f.importances, dec.importances[..3]);
    }

    #[test]
    fn thirty_two_of_sixty_four() {
        let b = unit(256, 64, 3);
        let f = filter_components(&decompose(&b).unwrap(), 32).unwrap();
        assert_eq!(f.rank(), 32);
        assert_eq!(f.projections.shape(), (256, 32));
        assert_eq!(PcaBasis::fit(b.features(), 32).unwrap().k(), 32);
    }

    #[test]
    fn full_rank_reconstruction_is_lossless() {
        let b = unit(12, 5, 4);
        let out = reconstruct(&decompose(&b).unwrap()).unwrap();
        assert!(out.features().max_abs_diff(b.features()) < 1e-5);
        let pce = primary_component_extract(&b, 5).unwrap();
        assert!(pce.features().max_abs_diff(b.features()) < 1e-5);
        // rank ≤ n − 1 for small batches
        let small = unit(4, 16, 5);
        let pce = primary_component_extract(&small, 32).unwrap();
        assert!(pce.features().max_abs_diff(small.features()) < 1e-5);
    }

    #[test]
    fn tail_identity() {
        let b = unit(20, 8, 6);
        let dec = decompose(&b).unwrap();
        for k in 1..=8 {
            let f = filter_components(&dec, k).unwrap();
            let err = reconstruct_raw(&f).unwrap().sub(b.features()).unwrap().frobenius().powi(2);
            let tail: f64 = dec.importances[k..].iter().sum::<f64>() * 19.0;
            assert!((err - tail).abs() < 1e-6, "k={k}: {err} vs {tail}");
        }
    }

    #[test]
    fn pce_matches_power_iteration_oracle() {
        let b = unit(16, 6, 7);
        let x = b.features();
        let mean = x.column_mean();
        let xc = center(x, &mean);
        let (_, vecs) = power_eigs(&xc.t_matmul(&xc).unwrap(), 3);
        let mut want = Matrix::zeros(16, 6);
        for r in 0..16 {
            for v in &vecs {
                let p: f64 = (0..6).map(|c| xc.get(r, c) * v[c]).sum();
                for c in 0..6 {
                    want.set(r, c, want.get(r, c) + p * v[c]);
                }
            }
            for c in 0..6 {
                want.set(r, c, want.get(r, c) + mean[c]);
            }
        }
        let want = want.normalize_rows();
        let got = primary_component_extract(&b, 3).unwrap();
        assert!(got.features().max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn outlier_direction_is_suppressed() {
        let d = 8;
        let mut rows = Vec::new();
        for i in 0..15 {
            let th = i as f64 * 0.1;
            let mut r = vec![0.0; d];
            r[0] = th.cos();
            r[1] = th.sin();
            r[2] = 0.5 * (i as f64 * 0.7).sin();
            rows.push(r);
        }
        let mut outlier = vec![0.0; d];
        outlier[0] = 1.0;
        outlier[5] = 0.3;
        rows.push(outlier);
        let b = FeatureBatch::normalized(Matrix::from_rows(&rows).unwrap()).unwrap();
        let out = primary_component_extract(&b, 2).unwrap();
        let cos: Vec<f64> = (0..16)
            .map(|r| {
                let a = b.features().row(r);
                let c = out.features().row(r);
                a.iter().zip(c).map(|(x, y)| x * y).sum()
            })
            .collect();
        let inlier_min = cos[..15].iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(cos[15] < inlier_min, "outlier {} vs inliers {inlier_min}", cos[15]);
    }

    #[test]
    fn repeated_extraction() {
        let b = unit(24, 10, 8);
        let once = primary_component_extract(&b, 4).unwrap();
        let twice = primary_component_extract(&once, 4).unwrap();
        let manual = reconstruct(&filter_components(&decompose(&once).unwrap(), 4).unwrap()).unwrap();
        assert!(twice.features().max_abs_diff(manual.features()) < 1e-5);
        // batches already inside a k-dim affine subspace are fixed points
        let low = FeatureBatch::normalized(
            gaussian(24, 3, 9).matmul(&gaussian(3, 10, 10)).unwrap(),
        )
        .unwrap();
        let a = primary_component_extract(&low, 4).unwrap();
        let b2 = primary_component_extract(&a, 4).unwrap();
        assert!(a.features().max_abs_diff(b2.features()) < 1e-5);
    }

    #[test]
    fn monotone_in_k() {
        let b = unit(30, 12, 12);
        let dec = decompose(&b).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..=12 {
            let err = reconstruct_raw(&filter_components(&dec, k).unwrap())
                .unwrap()
                .sub(b.features())
                .unwrap()
                .frobenius();
            assert!(err <= prev + 1e-12);
            prev = err;
        }
    }

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let b = unit(1, 4, 13);
        assert_eq!(contrastive_loss(&b, &b, 2.0, &cfg()).unwrap(), 0.0);
    }

    #[test]
    fn two_pair_closed_forms() {
        let e = FeatureBatch::from_unit_rows(&Matrix::<f64>::identity(2)).unwrap();
        let swapped =
            FeatureBatch::from_unit_rows(&Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap())
                .unwrap();
        let t = 100f64.ln();
        for symmetric in [false, true] {
            let c = LossConfig { symmetric, ..cfg() };
            let good = contrastive_loss(&e, &e, t, &c).unwrap();
            assert!((good - (-100f64).exp().ln_1p()).abs() < 1e-12);
            let bad = contrastive_loss(&e, &swapped, t, &c).unwrap();
            let want = 100.0 + (-100f64).exp().ln_1p();
            assert!((bad - want).abs() < 1e-9, "{bad}");
        }
    }

    #[test]
    fn uniform_logits_give_log_n() {
        for n in [2usize, 4] {
            let img = Matrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { 0.0 });
            let txt = Matrix::from_fn(n, 2, |_, c| if c == 1 { 1.0 } else { 0.0 });
            let l = contrastive_loss(
                &FeatureBatch::from_unit_rows(&img).unwrap(),
                &FeatureBatch::from_unit_rows(&txt).unwrap(),
                1.0,
                &cfg(),
            )
            .unwrap();
            assert_eq!(l, (n as f64).ln());
        }
    }

    #[test]
    fn contrastive_rejects_bad_batches() {
        let a = unit(3, 4, 14);
        let b = unit(4, 4, 15);
        assert!(matches!(contrastive_loss(&a, &b, 1.0, &cfg()), Err(Error::Contract(_))));
        let raw = FeatureBatch::raw(gaussian(3, 4, 16).scale(3.0)).unwrap();
        assert!(contrastive_loss(&a, &raw, 1.0, &cfg()).is_err());
        assert!(FeatureBatch::from_unit_rows(raw.features()).is_err());
    }

    #[test]
    fn dual_loss_special_cases() {
        let i = unit(8, 6, 17);
        let tl = unit(8, 6, 18);
        let ts = unit(8, 6, 19);
        let zero = LossConfig { alpha_loss: 0.0, ..cfg() };
        let v = dual_loss(&i, &tl, &ts, &zero, 1.5).unwrap();
        assert_eq!(v.total, v.fine);
        assert_eq!(v.fine, contrastive_loss(&i, &tl, 1.5, &cfg()).unwrap());
        let v = dual_loss(&i, &tl, &tl, &cfg(), 1.5).unwrap();
        assert!((v.total - 1.1 * v.fine).abs() < 1e-5);
    }

    #[test]
    fn alternative_strategies_degenerate_cases() {
        let i = unit(10, 6, 20);
        let tl = unit(10, 6, 21);
        let ts = unit(10, 6, 22);
        let plain = contrastive_loss(&i, &tl, 2.0, &cfg()).unwrap();
        let inputs = AltInputs {
            image: &i,
            long: &tl,
            short: &ts,
            frozen_short: Some(&ts),
            mix_seed: 3,
        };
        let none = LossConfig { mixed_rate: 0.0, ..cfg() };
        let v = alt_strategy_loss(AltStrategy::MixedLength, &inputs, &none, 2.0).unwrap();
        assert_eq!(v.total, plain);
        let v = alt_strategy_loss(AltStrategy::Bounded, &inputs, &cfg(), 2.0).unwrap();
        assert_eq!(v.penalty, Some(0.0));
        assert_eq!(v.total, plain);
        let same = AltInputs { short: &tl, ..inputs };
        let v = alt_strategy_loss(AltStrategy::Undistinguished, &same, &cfg(), 2.0).unwrap();
        assert!((v.total - 1.1 * plain).abs() < 1e-12);
        let missing = AltInputs { frozen_short: None, ..inputs };
        assert!(matches!(
            alt_strategy_loss(AltStrategy::Bounded, &missing, &cfg(), 2.0),
            Err(Error::Contract(_))
        ));
        let all = LossConfig { mixed_rate: 1.0, ..cfg() };
        let v = alt_strategy_loss(AltStrategy::MixedLength, &inputs, &all, 2.0).unwrap();
        assert_eq!(v.total, contrastive_loss(&i, &ts, 2.0, &cfg()).unwrap());
    }

    #[test]
    fn mask_is_seeded() {
        let a = mixed_length_mask(1000, 0.1, 9);
        assert_eq!(a, mixed_length_mask(1000, 0.1, 9));
        assert_ne!(a, mixed_length_mask(1000, 0.1, 10));
        let share = a.iter().filter(|&&m| m).count();
        assert!((60..140).contains(&share), "{share}");
    }

    #[test]
    fn loss_config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(LossConfig { k_components: 0, ..cfg() }.validate().is_err());
        assert!(LossConfig { alpha_loss: -1.0, ..cfg() }.validate().is_err());
        assert!(LossConfig { mixed_rate: 1.5, ..cfg() }.validate().is_err());
        let parsed: LossConfig = serde_json::from_str(r#"{"alpha_loss": 0.5}"#).unwrap();
        assert_eq!(parsed.k_components, 32);
        assert!(serde_json::from_str::<LossConfig>(r#"{"alpha": 0.5}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn permutation_equivariance(seed in 0u64..10_000, n in 3usize..12, shift in 1usize..11) {
            let b = unit(n, 5, seed);
            let t = unit(n, 5, seed + 1);
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let pb = FeatureBatch::normalized(b.features().select_rows(&perm)).unwrap();
            let pt = FeatureBatch::normalized(t.features().select_rows(&perm)).unwrap();
            let out = primary_component_extract(&b, 2).unwrap();
            let pout = primary_component_extract(&pb, 2).unwrap();
            prop_assert!(pout.features().max_abs_diff(&out.features().select_rows(&perm)) < 1e-8);
            let l = contrastive_loss(&b, &t, 1.0, &cfg()).unwrap();
            let pl = contrastive_loss(&pb, &pt, 1.0, &cfg()).unwrap();
            prop_assert!((l - pl).abs() < 1e-10);
        }

        #[test]
        fn loss_is_nonnegative(seed in 0u64..10_000, n in 1usize..10, t in 0.0f64..5.0) {
            let l = contrastive_loss(&unit(n, 4, seed), &unit(n, 4, seed + 7), t, &cfg()).unwrap();
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn scaling_raw_features_leaves_loss_unchanged(seed in 0u64..10_000, s in 0.01f64..100.0) {
            let raw_i = gaussian(6, 4, seed);
            let raw_t = gaussian(6, 4, seed + 3);
            let a = contrastive_loss(&FeatureBatch::normalized(raw_i.clone()).unwrap(),
                                     &FeatureBatch::normalized(raw_t.clone()).unwrap(), 2.0, &cfg()).unwrap();
            let b = contrastive_loss(&FeatureBatch::normalized(raw_i.scale(s)).unwrap(),
                                     &FeatureBatch::normalized(raw_t.scale(s)).unwrap(), 2.0, &cfg()).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
