//! Training losses: foreground-guided matching, cycle and transitivity
//! consistency, perceptual contrast, and cross-network mask consistency.

pub mod coseg;
pub mod matching;

pub use coseg::{contrastive_loss_var, figure_ground_split, task_consistency_loss_var};
pub use matching::{
    correspondence_mask, cycle_loss, cycle_loss_var, match_score, match_score_var,
    matching_loss_var, soft_correspondence_var, trans_loss, trans_loss_var, CorrMaskMode,
    CorrespondenceMask, MatchScoreMap,
};
