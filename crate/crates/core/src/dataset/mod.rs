//! On-disk formats, manifests, seen/unseen splits and dataset assembly.

mod assemble;
mod manifest;
mod split;
mod synthetic;
mod table;

pub use assemble::{assemble_dataset, AssembledDataset, Assembly, DatasetRow};
pub use manifest::{ClassEntry, Manifest, SampleEntry};
pub use split::{make_split, SplitSpec};
pub use synthetic::{class_label, generate_synthetic, SyntheticConfig, SyntheticData};
pub use table::{
    load_feature_file, write_feature_file, ClassVectorSet, FeatureTable, ZSLF_MAGIC, ZSLF_VERSION,
};
