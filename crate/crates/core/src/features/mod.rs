//! Audio and video front ends producing the patch vectors consumed by the
//! tokenizer and the encoder.

mod audio;
mod video;

pub use audio::*;
pub use video::*;
