//! The online tracking loop: scale pyramid, cosine window, confidence-gated
//! memory, minimum-entropy sample selection and periodic weight updates.

mod memory;
mod params;
mod session;
mod window;

pub use memory::{response_entropy, select_min_entropy, MemoryBank, MemoryEntry};
pub use params::{TrackerParams, Variant};
pub use session::{
    locate, track_sequence, Choice, FrameResult, TargetState, Track, TrackerSession,
};
pub use window::CosineWindow;

#[cfg(test)]
mod tests;
