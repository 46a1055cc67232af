//! Feasibility matrix, trajectory-success losses, and classifier training.

pub mod feasibility;
pub mod losses;
pub mod model;
pub mod train;

pub use feasibility::{build_feasibility, reduce_runs, transition_score, FeasibilityMatrix};
pub use losses::{
    loss_boundary, loss_dyn, loss_fail, loss_full, loss_full_with_grads, loss_succ, LossTerms,
    LossWeights, ModelGrads,
};
pub use model::{argmax_mode, EncodedTrajectory, GroundingModel, Normalizer, Segmentation};
pub use train::{train, write_train_log, EpochLog, TrainConfig};
