//! Dataset curation: frame extraction from clips, crowd annotation
//! storage and consensus, and demographic audits.

mod audit;
mod consensus;
mod frames;
mod store;

pub use audit::{bias_audit, BiasAudit, BiasRow};
pub use consensus::{
    consensus, consensus_all, histogram, latest_verdicts, AnnotationRecord, ConsensusResult, ConsensusRule, Decision,
    Verdict, DEFAULT_IRRELEVANT_QUORUM, DEFAULT_MIN_AGREEMENT,
};
pub use frames::{
    decode_gif, extract_frames, sample_times, save_frames, write_gif, DecodedClip, ExtractedFrame, FrameProvenance,
};
pub use store::AnnotationStore;
