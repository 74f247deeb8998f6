//! Task streams, dataset ingestion, and the restricted replay memory.

pub mod dataset;
pub mod idx;
pub mod replay;
pub mod stream;

pub use dataset::TaskDataset;
pub use idx::{load_idx, write_idx_images, write_idx_labels};
pub use replay::{CoreSet, ReplayBuffer};
pub use stream::{
    make_permuted_stream, make_split_stream, synthetic_blob_stream, synthetic_image_base,
    Protocol, TaskPair, TaskStream,
};
