//! Diagnostics: corpus divergence, cross-task alignment, rewrite-paradox
//! statistics and held-out evaluation.

mod alignment;
mod corpus;
mod csv;
mod eval;
mod paradox;

pub use alignment::{
    cosine_matrix, grad_cosine_matrix, loss_transfer_matrix, AlignmentKind, AlignmentMatrix,
    TransferScale,
};
pub use corpus::{
    js_divergence, mean_pairwise_js, mean_pairwise_tfidf, tfidf_cosine, CorpusStats, JS_SMOOTHING,
};
pub use csv::{write_metric_csv, MetricRow, METRIC_CSV_HEADER};
pub use eval::eval_heldout;
pub use paradox::{high_probability_bigrams, paradox_stats, ParadoxStats};
