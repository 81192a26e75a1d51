//! UBM, total variability model, i-vectors, LDA and cosine scoring.

mod gmm;
mod lda;
mod linalg;
mod tv;

pub use gmm::{
    accumulate_stats, pool_frames, train_ubm, BaumWelchStats, GmmUbm, UbmTraining,
    SPLIT_ITERATIONS, VARIANCE_FLOOR_RELATIVE,
};
pub use lda::{
    cosine_score, identify, ivectors_to_tsv, project_lda, scatter_matrices, speaker_models,
    train_lda, LdaProjection, LDA_SHRINKAGE,
};
pub use tv::{
    extract_ivector, subspace_angle_degrees, train_tv, IVector, Posterior, TotalVariabilityModel,
    TvTraining, TV_RIDGE,
};
