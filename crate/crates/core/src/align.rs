//! Gradient alignment between the ID-classification direction and the OOD
//! regularization direction.
//!
//! Given the classification gradient `g_id` and the regularization gradient
//! `g_ood`, the update direction is `g_id` itself when the two form an acute
//! (or right) angle, and otherwise `g_id` with its component along `g_ood`
//! removed:
//!
//! ```text
//! aligned = g_id                                        if g_id · g_ood >= 0
//!         = g_id - (g_id · g_ood / ||g_ood||²) · g_ood   otherwise
//! ```
//!
//! `g_ood` itself never enters the update; it only gates and filters `g_id`.
//! Both operands are whole flattened parameter-space vectors, so there is a
//! single dot product over every trainable entry.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::numerics::{check_finite, dot_unchecked, norm};

/// Default threshold on `||g_ood||` below which the regularizer is treated as
/// absent.
pub const DEFAULT_ALIGN_EPS: f64 = 1e-12;

/// A gradient over the flattened prompt parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGradient(Vec<f64>);

impl FlatGradient {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        check_finite(&v, "gradient")?;
        Ok(FlatGradient(v))
    }

    pub fn zeros(len: usize) -> Self {
        FlatGradient(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dot(&self, other: &FlatGradient) -> Result<f64> {
        crate::numerics::dot(&self.0, &other.0)
    }

    pub fn scaled(&self, c: f64) -> FlatGradient {
        FlatGradient(self.0.iter().map(|x| c * x).collect())
    }

    pub fn add(&self, other: &FlatGradient) -> Result<FlatGradient> {
        same_len(self, other, "FlatGradient::add")?;
        Ok(FlatGradient(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &FlatGradient) -> Result<FlatGradient> {
        same_len(self, other, "FlatGradient::sub")?;
        Ok(FlatGradient(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }
}

impl Deref for FlatGradient {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn same_len(a: &FlatGradient, b: &FlatGradient, context: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context,
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Which case of the alignment rule fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignBranch {
    /// `||g_ood|| < eps`: no regularization signal.
    Degenerate,
    /// `g_id · g_ood >= 0`.
    Acute,
    /// `g_id · g_ood < 0`: the conflicting component was projected out.
    Obtuse,
}

pub fn classify(g_id: &FlatGradient, g_ood: &FlatGradient, eps: f64) -> Result<AlignBranch> {
    same_len(g_id, g_ood, "align")?;
    if g_ood.norm() < eps {
        return Ok(AlignBranch::Degenerate);
    }
    if dot_unchecked(g_id, g_ood) >= 0.0 {
        Ok(AlignBranch::Acute)
    } else {
        Ok(AlignBranch::Obtuse)
    }
}

/// Applies the alignment rule and returns the update direction.
pub fn align(g_id: &FlatGradient, g_ood: &FlatGradient, eps: f64) -> Result<FlatGradient> {
    match classify(g_id, g_ood, eps)? {
        AlignBranch::Degenerate | AlignBranch::Acute => Ok(g_id.clone()),
        AlignBranch::Obtuse => {
            let (_, orthogonal) = decompose_unchecked(g_id, g_ood);
            Ok(orthogonal)
        }
    }
}

/// Splits `g_id` into its component along `g_ood` and the remainder.
///
/// Returns `(parallel, orthogonal)` with `parallel + orthogonal == g_id`.
pub fn decompose(
    g_id: &FlatGradient,
    g_ood: &FlatGradient,
    eps: f64,
) -> Result<(FlatGradient, FlatGradient)> {
    same_len(g_id, g_ood, "decompose")?;
    let n = g_ood.norm();
    if n < eps {
        return Err(Error::DegenerateVector { norm: n, eps });
    }
    Ok(decompose_unchecked(g_id, g_ood))
}

fn decompose_unchecked(g_id: &FlatGradient, g_ood: &FlatGradient) -> (FlatGradient, FlatGradient) {
    let coef = dot_unchecked(g_id, g_ood) / dot_unchecked(g_ood, g_ood);
    let mut parallel = Vec::with_capacity(g_id.len());
    let mut orthogonal = Vec::with_capacity(g_id.len());
    for (a, b) in g_id.iter().zip(g_ood.iter()) {
        let p = coef * b;
        parallel.push(p);
        orthogonal.push(a - p);
    }
    (FlatGradient(parallel), FlatGradient(orthogonal))
}

/// Running instrumentation of how often, and how strongly, the two
/// directions conflict during training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConflictStats {
    pub steps_total: u64,
    pub steps_conflicting: u64,
    /// Steps where a cosine was defined (both gradients non-zero).
    pub steps_with_angle: u64,
    pub sum_cos: f64,
    pub sum_projection_loss: f64,
}

impl ConflictStats {
    /// Mean cosine between `g_id` and `g_ood` over steps where both are
    /// non-zero; `0` if there were none.
    pub fn mean_cos_angle(&self) -> f64 {
        if self.steps_with_angle == 0 {
            0.0
        } else {
            self.sum_cos / self.steps_with_angle as f64
        }
    }

    /// Mean norm removed by projection, averaged over all steps.
    pub fn mean_projection_loss(&self) -> f64 {
        if self.steps_total == 0 {
            0.0
        } else {
            self.sum_projection_loss / self.steps_total as f64
        }
    }

    pub fn conflict_ratio(&self) -> f64 {
        if self.steps_total == 0 {
            0.0
        } else {
            self.steps_conflicting as f64 / self.steps_total as f64
        }
    }

    pub fn merge(&mut self, other: &ConflictStats) {
        self.steps_total += other.steps_total;
        self.steps_conflicting += other.steps_conflicting;
        self.steps_with_angle += other.steps_with_angle;
        self.sum_cos += other.sum_cos;
        self.sum_projection_loss += other.sum_projection_loss;
    }
}

/// Records one step. A step conflicts iff `g_id · g_ood < 0` and
/// `||g_ood|| >= eps`.
pub fn record_conflict(
    stats: &mut ConflictStats,
    g_id: &FlatGradient,
    g_ood: &FlatGradient,
    eps: f64,
) -> Result<AlignBranch> {
    let branch = classify(g_id, g_ood, eps)?;
    stats.steps_total += 1;
    let (ni, no) = (g_id.norm(), g_ood.norm());
    if ni > 0.0 && no >= eps {
        let cos = (dot_unchecked(g_id, g_ood) / (ni * no)).clamp(-1.0, 1.0);
        stats.steps_with_angle += 1;
        stats.sum_cos += cos;
    }
    if branch == AlignBranch::Obtuse {
        stats.steps_conflicting += 1;
        let (parallel, _) = decompose_unchecked(g_id, g_ood);
        stats.sum_projection_loss += parallel.norm();
    }
    Ok(branch)
}
