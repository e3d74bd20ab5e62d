//! Retrieve-then-answer engine for zero-shot video question answering.
//!
//! A caption corpus is embedded once and stored as a normalized flat index.
//! For each video, every frame embedding retrieves its top-k most similar
//! captions; the distinct captions are strung together with temporal
//! connectives into a hint paragraph, appended to a
//! `Question: ... Answer: [MASK]. Hints: ...` prompt, and a masked language
//! model picks the best candidate answer for the mask.
//!
//! Modules:
//! - [`corpus`]: caption ingestion, embedding matrices, `R2AV` persistence
//! - [`retrieval`]: exact top-k cosine search, dedup, random baseline
//! - [`context`]: temporal context, answer prompt, token-budget truncation
//! - [`answer`]: scorer/embedder backends and answer selection
//! - [`mlm`]: masking and projection for fine-tuning data
//! - [`eval`]: exact-match evaluation harness
//! - [`fixture`]: hermetic synthetic dataset

pub mod answer;
pub mod context;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod mlm;
mod par;
pub mod retrieval;
pub mod rng;

pub use error::{Error, Result};
pub use par::{is_parallel, with_threads};

pub use answer::{
    http_scorer, mock_embed, mock_score, select_answer, select_answer_with, Aggregation, AnswerResult,
    CandidateSet, Embedder, HttpBackend, MockBackend, OverlapScorer, Scorer,
};
pub use context::{
    build_answer_prompt, build_context, temporal_connective, truncate_to_budget, whitespace_tokens, AnswerPrompt,
    VideoContext,
};
pub use corpus::{ingest_texts, normalize_rows, CorpusIndex, EmbeddingMatrix, TextCorpus};
pub use eval::{compare_runs, evaluate, exact_match, normalize_answer, EvalConfig, EvalReport, Pipeline, QaRecord};
pub use mlm::{apply_projection, assemble_training_example, mask_tokens, MaskingConfig, ProjectionMatrix};
pub use retrieval::{
    dedup_captions, random_sample, retrieve_video, similarity, topk_frame, FrameFeatures, Hit, VideoRetrieval,
};
