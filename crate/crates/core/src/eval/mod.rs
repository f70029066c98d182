//! Zero-shot ranking and its metrics, rank-level error coherence, trait
//! probes with F1, 2-D projection and the metrics report.

mod hierarchy;
mod probe;
mod project;
mod report;
mod zero_shot;

pub use hierarchy::{
    chance_match_rate, hierarchy_error_analysis, HierarchyReport, RankRate, HIERARCHY_RANKS,
};
pub use probe::{
    embed_with_labels, f1_is_degenerate, fit_linear_probe, fit_probe_on_embeddings, trait_f1,
    ProbeConfig, ProbeHead,
};
pub use project::{export_embeddings_2d, pca_2d, write_projection, Pca2, ProjectionRow};
pub use report::{MetricsReport, ZeroShotScores};
pub use zero_shot::{
    candidate_embeddings, map_at_5, rank_by_score, topk_accuracy, zero_shot_classify, EvalClip,
    RankedPrediction,
};
