//! Canonicalisation of raw surfaces: cup extraction and similarity alignment.

mod align;
mod extract;

pub use align::{
    align_from, quat_to_rotation, rigid_align, Alignment, AlignmentConfig, SimilarityTransform,
    START_QUATERNIONS,
};
pub use extract::{extract_cup, extract_cup_with, minimal_enclosing_ball, Ball, Extraction, ExtractionConfig};
