//! Deterministic synthetic videos, training-sample draws and sequence I/O.

mod io;
mod render;
mod sample;
mod spec;
mod suite;

pub use io::{
    decode_frame, encode_frame, export, format_box, frame_paths, ingest, ingest_frames,
    parse_box_line, read_boxes, RasterFormat,
};
pub use render::{generate, generate_named, AnnotatedSequence, Attributes, OCCLUDER_OFFSET};
pub use sample::{
    augment_patch, sample_episode, sample_frame_pair, sample_training_pair, Augment, PairSampling,
    SequencePool,
};
pub use spec::{WorldSpec, MAX_SCALE, MIN_SCALE, MIN_TARGET};
pub use suite::{training_pool, training_specs, Suite, SUITE_NAMES};
