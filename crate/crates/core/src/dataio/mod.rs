//! Dataset formats, real-sequence extraction, augmentation and the toy
//! dataset generator.

pub mod augment;
pub mod manifest;
pub mod pnm;
pub mod sequences;
pub mod toy;

pub use augment::{augment_sequence, AugmentParams, AugmentRanges};
pub use manifest::{Dataset, DatasetManifest, Video, VideoEntry, MANIFEST_FILE};
pub use pnm::{load_frame, save_frame, LabeledFrame};
pub use sequences::{extract_real_sequences, sequence_indices, ExtractionReport, DEFAULT_SAMPLING_STRIDE};
pub use toy::{gen_toy_dataset, render_video, ToyConfig, ToyReport};
