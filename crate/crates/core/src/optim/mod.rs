//! Similarity, symmetric contrastive loss, exact gradients, AdamW and the
//! training loop.

mod adamw;
mod grad;
mod loss;
mod train;

pub use adamw::{adamw_step, adamw_update, AdamWConfig, AdamWState, Moments};
pub use grad::{batch_loss, loss_gradients, Batch, Gradients, PreparedBatch};
pub use loss::{contrastive_loss, contrastive_loss_and_grad, similarity_matrix};
pub use train::{
    distinct_species_batches, train, write_loss_log, ClipViews, LossRecord, TemplateMode,
    TrainConfig, TrainOutcome,
};
