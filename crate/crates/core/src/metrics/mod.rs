//! Segmentation overlap and boundary metrics, cross-modal retrieval
//! accuracy and paired significance tests.

pub mod retrieval;
pub mod seg;
pub mod stats;

pub use retrieval::{retrieval_from_embeddings, retrieval_protocol, retrieval_topk, MeanStd, RetrievalReport, TopK};
pub use seg::{boundary, dice, nsd, SegScore, SegSummary, DEFAULT_NSD_TOLERANCE};
pub use stats::{mean_std, paired_ttest, TTest};
