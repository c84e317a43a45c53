//! Evaluation of any method's `(output image, mask)` results: background
//! consistency, location reasonableness, local CLIP-style score, local
//! FID, success rate and the cross-method unified score.

pub mod backends;
pub mod metrics;
pub mod run;

pub use backends::{
    CachedJudge, EmbeddingBackend, FeatureBackend, HeuristicJudge, HttpBackendConfig, HttpEmbedding, HttpFeatures,
    HttpJudge, HttpPerceptual, JudgeBackend, JudgeRequest, OracleEmbedding, OracleFeatures, PerceptualBackend,
    SsimDistance, DEFAULT_JUDGE_TEMPLATE,
};
pub use metrics::{
    background_consistency, cosine, frechet_distance, local_clip_from_cosines, local_clip_score, local_fid,
    local_fid_from_features, location_reasonableness, oracle_success, parse_rating, success_rate, unified_from_axes,
    unified_metric, EvalRecord, GaussianStats, Judgment, MethodReport, RecordRow, RecordScores,
};
pub use run::{load_evalset, load_method, run_eval, Backends, BackendsConfig, EvalItem, ScoreScope, SuccessProtocol};
