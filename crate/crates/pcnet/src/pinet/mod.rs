//! Permutation-invariant position-correction network: per-satellite encoder
//! MLP, sum-pooling aggregation, decoder MLP to a 3-D ECEF correction.
//! Forward/backward passes, Adam, the training loop, and model files are
//! all implemented here.

mod net;
mod train;
mod io;

pub use net::{
    backward, forward, leaky_relu, leaky_relu_deriv, mse_loss, mse_loss_grad, param_count,
    param_count_per_layer, sum_pool, AdamConfig, AdamState, ForwardCache, Gradients, LayerParams,
    Mode, ModelArch, PiDnnModel, PinetError, adam_step,
};
pub use train::{predict_correction, train, LabeledSet, TrainConfig, TrainHistory};
pub use io::{load_model, save_model};

use crate::features::CorrectionLabel;
use crate::geodesy::EcefPosition;
use crate::solver::PositionFix;

/// Corrected position: the predicted correction added componentwise to the
/// initial fix in ECEF.
pub fn correct_position(fix: &PositionFix, correction: &CorrectionLabel) -> EcefPosition {
    EcefPosition::new(
        fix.position.x + correction.dx,
        fix.position.y + correction.dy,
        fix.position.z + correction.dz,
    )
}
