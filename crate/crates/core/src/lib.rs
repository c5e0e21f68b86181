//! Ensemble topic labeling with several language models.
//!
//! The pipeline prompts every configured model about every text, turns the
//! returned evidence phrases into embedding-based relevancy scores, checks
//! agreement between models, and fuses labels per topic.

pub mod agreement;
pub mod annotator;
pub mod config;
pub mod corpus;
pub mod ensemble;
pub mod eval;
pub mod pipeline;
pub mod relevancy;
pub mod stubserver;
pub mod transport;
pub mod util;

pub use agreement::{
    bin_scores, bootstrap_ci, detect_outliers, fleiss_kappa, gwet_ac1, percent_agreement,
    AgreementResult, Coefficient, OutlierReport, RatingMatrix,
};
pub use annotator::{
    annotate_corpus, build_prompt, parse_response, AnnotationMatrix, ModelBackend, TopicAnnotation,
};
pub use config::{ConfigError, LoadedConfig, RunConfig};
pub use corpus::{load_corpus, load_topics, CorpusFormat, TextItem, Topic, TopicSet};
pub use ensemble::{
    ensemble_topic, fuse_labels, intersection_label, optimal_threshold, pca_first_component,
    union_label, EnsembleDecision, ScoreEnsemble, ScoreMatrix,
};
pub use eval::{auprc, confusion, ConfusionMetrics, GroupSummary};
pub use relevancy::{cosine_similarity, relevancy_score, EmbeddingVector, RelevancyRecord};
pub use pipeline::{run, PipelineError, RunSummary, Stage};
