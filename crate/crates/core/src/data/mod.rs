//! Datasets: IDX and raw container loading, synthetic tasks, task
//! sequences and seeded batching.

mod batch;
mod container;
mod dataset;
mod idx;
mod synth;

pub use batch::{batch_order, batches, epoch_stream, split_semi_supervised, SemiSplit};
pub use container::{
    dataset_from_bytes, dataset_to_bytes, read_dataset, write_dataset, PixelEncoding,
};
pub use dataset::{one_hot, ImageShape, TaskDataset, TaskSequence};
pub use idx::{
    encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, IdxData,
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use synth::{apply_transform, synthesize, Generator, SynthSpec, Transform};
