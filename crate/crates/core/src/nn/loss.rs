use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// Additive smoothing in numerator and denominator of the soft Dice ratio.
pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceReduction {
    /// One ratio over sums taken across the whole batch.
    #[default]
    Batch,
    /// Mean of per-sample ratios.
    PerSample,
}

/// Negative soft Dice: `-(2·Σpg + s) / (Σp + Σg + s)`.
///
/// Returns the loss and its gradient with respect to `pred`.
pub fn soft_dice_loss(pred: &Tensor, target: &Tensor, reduction: DiceReduction) -> Result<(f64, Tensor), NnError> {
    if pred.shape() != target.shape() {
        return Err(NnError::ShapeMismatch(format!("pred {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let mut grad = Tensor::zeros(pred.shape());
    let groups = match reduction {
        DiceReduction::Batch => 1,
        DiceReduction::PerSample => pred.batch().max(1),
    };
    let per = pred.len() / groups;
    let mut loss = 0.0;
    for g in 0..groups {
        let p = &pred.data()[g * per..(g + 1) * per];
        let t = &target.data()[g * per..(g + 1) * per];
        let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let denom = p.iter().sum::<f64>() + t.iter().sum::<f64>() + DICE_SMOOTHING;
        let numer = 2.0 * inter + DICE_SMOOTHING;
        loss -= numer / denom;
        let scale = 1.0 / groups as f64;
        for (d, &tv) in grad.data_mut()[g * per..(g + 1) * per].iter_mut().zip(t) {
            *d = -scale * (2.0 * tv * denom - numer) / (denom * denom);
        }
    }
    Ok((loss / groups as f64, grad))
}
