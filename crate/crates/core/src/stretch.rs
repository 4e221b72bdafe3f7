//! Positional-embedding stretching.
//!
//! * [`linear_stretch`] interpolates every position with one fixed ratio.
//! * [`kps_stretch`] keeps the first `keep` rows untouched and interpolates
//!   only the remaining rows, with the source coordinate shifted so that the
//!   interpolated region starts right after the preserved prefix:
//!   `s = keep + (pos − keep) / ratio`.
//!
//! In both cases an output row is `(1 − α)·PE(⌊s⌋) + α·PE(⌈s⌉)`, with the
//! ceiling index clamped to the last source row.

use serde::{Deserialize, Serialize};

use crate::encoders::{DualEncoder, PositionalTable};
use crate::error::{ensure, Result};
use crate::numerics::{Matrix, Scalar};

pub const DEFAULT_KEEP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StretchMode {
    Linear,
    Kps,
}

impl std::str::FromStr for StretchMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "kps" => Ok(Self::Kps),
            other => Err(format!("unknown stretch mode {other:?} (expected linear or kps)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StretchSpec {
    pub mode: StretchMode,
    pub ratio: f64,
    /// Preserved prefix length; ignored by linear mode.
    #[serde(default = "default_keep")]
    pub keep: usize,
}

fn default_keep() -> usize {
    DEFAULT_KEEP
}

impl StretchSpec {
    pub fn linear(ratio: f64) -> Self {
        Self {
            mode: StretchMode::Linear,
            ratio,
            keep: DEFAULT_KEEP,
        }
    }

    pub fn kps(keep: usize, ratio: f64) -> Self {
        Self {
            mode: StretchMode::Kps,
            ratio,
            keep,
        }
    }

    pub fn apply<T: Scalar>(&self, pe: &PositionalTable<T>) -> Result<PositionalTable<T>> {
        match self.mode {
            StretchMode::Linear => linear_stretch(pe, self.ratio),
            StretchMode::Kps => kps_stretch(pe, self.keep, self.ratio),
        }
    }

    /// Replaces the model's text positional table with its stretched version.
    pub fn apply_to_model<T: Scalar>(&self, model: &mut DualEncoder<T>) -> Result<()> {
        ensure!(
            model.config().stretch.is_none(),
            "positional table was already stretched"
        );
        let stretched = self.apply(&model.positional_table())?;
        model.set_positional_table(stretched)?;
        model.mark_stretched(*self);
        Ok(())
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    ensure!(ratio.is_finite() && ratio >= 1.0, "stretch ratio must be ≥ 1, got {ratio}");
    Ok(())
}

fn blend<T: Scalar>(src: &Matrix<T>, lo: usize, alpha: f64) -> Vec<T> {
    let last = src.rows() - 1;
    let lo = lo.min(last);
    if alpha == 0.0 {
        return src.row(lo).to_vec();
    }
    let hi = (lo + 1).min(last);
    src.row(lo)
        .iter()
        .zip(src.row(hi))
        .map(|(&a, &b)| {
            let (a, b) = (a.as_f64(), b.as_f64());
            // clamp absorbs one-ulp rounding past the endpoints
            T::of(((1.0 - alpha) * a + alpha * b).clamp(a.min(b), a.max(b)))
        })
        .collect()
}

/// Fixed-ratio interpolation to `⌊len · ratio⌋` rows, with
/// `α = (pos mod ratio) / ratio`.
pub fn linear_stretch<T: Scalar>(pe: &PositionalTable<T>, ratio: f64) -> Result<PositionalTable<T>> {
    check_ratio(ratio)?;
    ensure!(!pe.is_empty(), "positional table is empty");
    let src = &pe.table;
    let out_len = (src.rows() as f64 * ratio).floor() as usize;
    let mut data = Vec::with_capacity(out_len * src.cols());
    for pos in 0..out_len {
        let p = pos as f64;
        let lo = (p / ratio).floor() as usize;
        let alpha = (p % ratio) / ratio;
        data.extend(blend(src, lo, alpha));
    }
    Ok(PositionalTable {
        table: Matrix::from_vec(out_len, src.cols(), data)?,
        trainable: pe.trainable,
    })
}

/// Prefix-preserving interpolation to `keep + ⌊(len − keep) · ratio⌋` rows.
pub fn kps_stretch<T: Scalar>(
    pe: &PositionalTable<T>,
    keep: usize,
    ratio: f64,
) -> Result<PositionalTable<T>> {
    check_ratio(ratio)?;
    let src = &pe.table;
    let len = src.rows();
    ensure!(keep > 0 && keep < len, "keep must lie in 1..{len}, got {keep}");
    let out_len = keep + ((len - keep) as f64 * ratio).floor() as usize;
    let mut data = Vec::with_capacity(out_len * src.cols());
    for pos in 0..keep {
        data.extend_from_slice(src.row(pos));
    }
    for pos in keep..out_len {
        let s = keep as f64 + (pos - keep) as f64 / ratio;
        let lo = s.floor();
        data.extend(blend(src, lo as usize, s - lo));
    }
    Ok(PositionalTable {
        table: Matrix::from_vec(out_len, src.cols(), data)?,
        trainable: pe.trainable,
    })
}
