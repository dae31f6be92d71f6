//! Stage two: layer-wise reconstruction in the embedding space, and the
//! conventional least-squares baseline it is compared against.

mod baseline;
mod ldrf;
mod objective;
mod optimize;

pub use baseline::{baseline_prune_layer, baseline_prune_network, BaselineLayer, BaselineReport};
pub use ldrf::{ldrf_prune_logged, ldrf_prune_network, LayerLoss, PruneReport};
pub use objective::{full_loss, recon_grad, recon_loss, ClassifierProblem, Glue, ReconParams, ReconProblem, UnitSpec};
pub use optimize::{optimize_layer, train_final_layer, LayerFit};

use crate::data::Dataset;
use crate::error::Result;
use crate::net::train::{fit, TrainSettings};
use crate::net::Network;

/// End-to-end fine-tuning of a pruned network against labels. Returns the
/// per-step batch losses.
pub fn finetune(net: &mut Network, data: &Dataset, settings: &TrainSettings) -> Result<Vec<f64>> {
    fit(net, &data.images, &data.labels, settings)
}
