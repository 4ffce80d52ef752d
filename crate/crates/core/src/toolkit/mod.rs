//! File formats, dataset manifests, the synthetic generator and the CLI.

pub mod checkpoint;
pub mod cli;
pub mod manifest;
pub mod synth;
pub mod tensor_file;

pub use checkpoint::Container;
pub use manifest::{Manifest, Record, Split, SplitData};
pub use synth::{generate_images, generate_synthetic, SyntheticConfig};
pub use tensor_file::{read_tensor, write_tensor, DType, StoredTensor};
