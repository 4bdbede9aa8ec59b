//! GroupToy: a synthetic weak-label group-activity benchmark with exact
//! ground-truth flow magnitudes.
//!
//! Actors are anti-aliased discs over a smooth textured background. A few
//! key actors perform the class-defining motion while the rest wander
//! slowly, and a per-frame camera offset shifts the whole image.

mod class;
mod generate;
mod sampling;
mod store;

pub use class::ActivityClass;
pub use generate::{
    flip_planes, generate_sample, generate_sample_mirrored, horizontal_flip, ActorTrack, GenConfig, VideoSample,
};
pub use sampling::{segment_indices, SampleMode};
pub use store::{balanced_specs, split_specs, generate_dataset, read_dataset, sample_dir, write_dataset, SampleSpec, StoredSample, MANIFEST};
