//! Neural-network core: dense matrices, sparse graph operators, a tape-based
//! reverse-mode autodiff, layers, losses, and Adam.

pub mod layers;
pub mod matrix;
pub mod optim;
pub mod sparse;
pub mod tape;

pub use layers::{Activation, Layer, LayerKind, LayerSpec};
pub use matrix::Matrix;
pub use optim::Adam;
pub use sparse::{Csr, CsrPair, GraphOperator};
pub use tape::{Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("loss must be scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("quantile level must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("no masked entries to average over")]
    EmptyMask,
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
}

/// Pinball (quantile) loss at level `alpha`:
/// `alpha * (y - y_hat)` when `y > y_hat`, else `(1 - alpha) * (y_hat - y)`.
/// Nonnegative, zero exactly at `y = y_hat`.
pub fn pinball_loss(y: f64, y_hat: f64, alpha: f64) -> Result<f64, NnError> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(NnError::BadAlpha(alpha));
    }
    Ok(pinball_value(y, y_hat, alpha))
}

pub(crate) fn pinball_value(y: f64, y_hat: f64, alpha: f64) -> f64 {
    if y > y_hat {
        alpha * (y - y_hat)
    } else {
        (1.0 - alpha) * (y_hat - y)
    }
}
