//! Embedding network, affinity objective and training protocol.

mod loss;
mod model;
mod recurrent;
mod trainer;

pub use loss::{
    affinity_loss, affinity_loss_grad, affinity_terms, build_targets, embedding_grad,
    normalize_backward, AffinityTarget, AffinityTerms, BinMask, EmbeddingMatrix,
    DEFAULT_BIN_THRESHOLD_DB,
};
pub use model::{BiLayer, NetworkParameters, NetworkShape};
pub use recurrent::{CellKind, CellParams};
pub use trainer::{
    run_seed, train, Adam, Init, LogRecord, TrainOutcome, TrainerConfig, TrainingExample,
    TrainingLog, ValidationOutcome, ValidationSchedule,
};
