//! Conformer transducer ASR with environment fusion, plus its loss,
//! decoding, augmentation and scoring utilities.

mod model;
pub mod rnnt;
pub mod specaugment;
pub mod wer;

pub use model::{build_models, Augmenter, ConformerConfig, FusionMode, Transducer, Utterance, MAX_SYMBOLS_PER_FRAME};
pub use rnnt::{rnnt_loss, TransducerLattice};
pub use specaugment::{specaugment, SpecAugmentPolicy};
pub use wer::{edit_counts, wer, wer_str, EditCounts};
