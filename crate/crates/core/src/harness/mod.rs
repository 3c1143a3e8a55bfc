//! Training, probing and ablation runs.

mod ablate;
mod config;
mod optim;
mod probe;
mod train;

pub use ablate::{ablate, format_table, run_ablation, AblationGrid, AblationRow};
pub use config::{AdaptConfig, OptimConfig, Precision, RunConfig, Schedule};
pub use optim::Adam;
pub use probe::{
    adapt_caption, adapt_qa, caption_content, caption_probe, caption_scores, cosine_matrix, decode_captions, qa_probe,
    qa_probe_cached, rerank_order, retrieval_from_scores, retrieval_probe, run_probe, text_features, visual_features,
    vtm_probabilities, CaptionReport, ProbeReport, ProbeTask, QaReport, RetrievalReport, RERANK_TOP,
};
pub use train::{
    check_corpus, checkpoint_path, pretrain, pretrain_on, train_step, BatchSampler, PretrainSummary, Trained,
    CHECKPOINT_DIR, METRICS_FILE,
};
