//! Evaluation: metrics, the feature extractor and report assembly.

mod extractor;
mod metrics;
mod report;

pub use extractor::{matched_rate, train_bi_encoder, ExtractorConfig, FeatureExtractor};
pub use metrics::{
    default_diversity_subset, diversity, fid, fid_detailed, key_dist, mm_dist, r_precision, recon_loss, vel_loss,
    vel_loss_with, FidValue, VelMode,
};
pub use report::{evaluate, pairs_from_batch, EvalConfig, EvalCounts, EvalPair, EvalReport};
