//! On-disk formats: binary signatures, cohort tables and the decision log.

pub mod decisions;
pub mod ksig;
pub mod tables;

pub use decisions::{append_decision, parse_decisions, read_decisions, DecisionRecord};
pub use ksig::{decode_signature, encode_signature, read_signature, write_signature, KEYPOINT_BYTES};
pub use tables::{parse_metadata, parse_relations, read_metadata, read_relations, MetadataRow};
