//! The learnable spatial mask and the L1 importance regularizer.
//!
//! The mask `M ∈ [0,1]^{d×k}` is stored as unconstrained logits and realized as
//! `sigmoid(logits)`, so every entry stays strictly inside `(0, 1)` and gradients
//! never vanish at a clamp boundary. One mask is shared by all channels and all
//! classes: `E_s[c, i, j] = E[c, i, j] · M[i, j]`.
//!
//! The training objective is `ℓ_total = ℓ_pre + λ · Σ |m_i|`, where `ℓ_pre` is
//! the cross-entropy of the masked prediction. The sum is not normalized by the
//! number of cells, so the effective strength of `λ` grows with the grid.

use crate::tensor::{sigmoid, Tape, Tensor, Var};
use crate::{Error, Result};

/// Initial logit, `ln 9`, giving a mask of 0.9 everywhere.
pub const MASK_INIT_LOGIT: f64 = 2.197_224_577_336_219_6;

/// Entries below this value are counted as suppressed in reports. Inference
/// always uses the continuous mask.
pub const SUPPRESSED_THRESHOLD: f64 = 0.05;

/// Unconstrained mask logits over the feature map's spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskParams {
    logits: Tensor,
}

impl MaskParams {
    /// Logits for a `rows × cols` grid at [`MASK_INIT_LOGIT`].
    pub fn init(rows: usize, cols: usize) -> Self {
        Self {
            logits: Tensor::filled(&[rows, cols], MASK_INIT_LOGIT),
        }
    }

    pub fn from_logits(logits: Tensor) -> Result<Self> {
        if logits.rank() != 2 {
            return Err(Error::shape(format!(
                "mask logits must be rows×cols, got {:?}",
                logits.shape()
            )));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Tensor {
        &mut self.logits
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.logits.shape()[0], self.logits.shape()[1])
    }

    /// The mask values `sigmoid(logits)`, evaluated off-tape.
    pub fn values(&self) -> Tensor {
        self.logits.map(sigmoid)
    }
}

/// `M = sigmoid(logits)` on the tape.
pub fn mask_from_logits(tape: &mut Tape, logits: Var) -> Var {
    tape.sigmoid(logits)
}

/// `E ⊙ M` with the mask broadcast over channels.
pub fn apply_mask(tape: &mut Tape, features: Var, mask: Var) -> Result<Var> {
    tape.apply_mask(features, mask)
}

/// `ℓ_reg = Σ |m_i|` over every mask cell.
pub fn l1_importance(tape: &mut Tape, mask: Var) -> Var {
    let abs = tape.abs(mask);
    tape.sum(abs)
}

/// The parts of `ℓ_total` for one sample.
#[derive(Debug, Clone, Copy)]
pub struct MaskedLossBreakdown {
    pub prediction_loss: f64,
    pub regularization_loss: f64,
    pub lambda: f64,
    pub total: f64,
    /// Node holding `total`, for `backward`.
    pub total_var: Var,
}

impl MaskedLossBreakdown {
    /// A breakdown with no regularizer, used by the baseline head.
    pub fn unregularized(tape: &Tape, prediction_loss: Var) -> Self {
        let value = tape.value(prediction_loss).item();
        Self {
            prediction_loss: value,
            regularization_loss: 0.0,
            lambda: 0.0,
            total: value,
            total_var: prediction_loss,
        }
    }
}

/// Builds `ℓ_pre + λ · ℓ_reg` on the tape. With `λ = 0` the regularizer is
/// left out of the graph and `total` is the prediction-loss node itself.
pub fn total_loss(
    tape: &mut Tape,
    prediction_loss: Var,
    mask: Var,
    lambda: f64,
) -> Result<MaskedLossBreakdown> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::config(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    let reg = l1_importance(tape, mask);
    let total_var = if lambda == 0.0 {
        prediction_loss
    } else {
        let weighted = tape.scale(reg, lambda);
        tape.add(prediction_loss, weighted)?
    };
    Ok(MaskedLossBreakdown {
        prediction_loss: tape.value(prediction_loss).item(),
        regularization_loss: tape.value(reg).item(),
        lambda,
        total: tape.value(total_var).item(),
        total_var,
    })
}
