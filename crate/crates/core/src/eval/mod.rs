//! Forgetting-curve and knowledge-accumulation metrics.

pub mod metrics;
pub mod protocol;

pub use metrics::{
    bucket_and_smooth, bucket_label, bucket_of, evidence_lag, knowledge_curve, normalize_answer, pava_non_increasing,
    retained_score, token_f1, BucketCurve, KnowledgePoint, QuestionResult, BUCKET_EDGES,
};
pub use protocol::{
    curve_csv, format_table, input_hash, knowledge_csv, run_protocol, ProtocolOptions, ProtocolOutput, SummaryRow,
};
