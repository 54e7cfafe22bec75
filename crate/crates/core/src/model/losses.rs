//! The three training objectives and their weighted combination. Each loss
//! is mean-reduced over its valid entries.

use alloc::vec::Vec;

use super::Variant;
use crate::data::Batch;
use crate::error::Result;
use crate::tape::{Tape, Var};

/// Next-response cross-entropy: `r̂_t[kc_{t+1}]` against `r_{t+1}` for every
/// step with a successor. Zero when no step has one.
pub fn loss_kt(tape: &mut Tape, r_hat: Var, batch: &Batch) -> Result<Var> {
    let p = tape.pick(r_hat, &batch.kt_index)?;
    let n = batch.kt_targets.len();
    tape.bce(p, batch.kt_targets.clone(), alloc::vec![1.0; n])
}

/// KC-membership cross-entropy over every KC slot of every valid step.
pub fn loss_qt(tape: &mut Tape, c_hat: Var, batch: &Batch) -> Result<Var> {
    let n = batch.num_kcs;
    let weights: Vec<f64> = batch
        .mask
        .iter()
        .flat_map(|&m| core::iter::repeat_n(m, n))
        .collect();
    tape.bce(c_hat, batch.qt_targets.clone(), weights)
}

/// Squared error against the running scoring rate over valid steps with
/// 1-based position `t > delay`. Zero when no step qualifies.
pub fn loss_ik(tape: &mut Tape, y_hat: Var, batch: &Batch, delay: usize) -> Result<Var> {
    let weights: Vec<f64> = batch
        .mask
        .iter()
        .zip(&batch.positions)
        .map(|(&m, &t)| if t + 1 > delay { m } else { 0.0 })
        .collect();
    tape.mse(y_hat, batch.scoring_rates.clone(), weights)
}

/// `L_KT + β₁·L_QT + β₂·L_IK`, dropping the terms the variant disables.
pub fn total_loss(
    tape: &mut Tape,
    kt: Var,
    qt: Option<Var>,
    ik: Option<Var>,
    qt_weight: f64,
    ik_weight: f64,
    variant: Variant,
) -> Result<Var> {
    let mut total = kt;
    if let (true, Some(qt)) = (variant.uses_qt(), qt) {
        let w = tape.scale(qt, qt_weight);
        total = tape.add(total, w)?;
    }
    if let (true, Some(ik)) = (variant.uses_ik(), ik) {
        let w = tape.scale(ik, ik_weight);
        total = tape.add(total, w)?;
    }
    Ok(total)
}

/// Scalar loss values read back from a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossValues {
    pub kt: f64,
    pub qt: f64,
    pub ik: f64,
    pub total: f64,
}
