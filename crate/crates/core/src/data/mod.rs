//! MNIST ingestion: IDX parsing, digit filtering, normalization and
//! dataset statistics.

mod dataset;
pub mod idx;

pub use dataset::{
    dataset_stats, filter_digits, load_raw, load_splits, normalize, Dataset, DatasetStats, Example,
    Normalization, RawDataset, Split, Splits,
};
pub use idx::{parse_idx_images, parse_idx_labels, ByteGrid};
