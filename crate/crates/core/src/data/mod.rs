//! Dataset container, on-disk format, preprocessing and the synthetic
//! domain-shift generator.

mod dataset;
mod io;
mod preprocess;
mod synth;

pub use dataset::{ChannelStats, DomainDataset, UnlabeledDataset};
pub use io::{load_domain, save_domain, DatasetMeta};
pub use preprocess::{sliding_window, split_and_normalize, SplitPair, TRAIN_FRACTION};
pub use synth::{generate_shifted_pair, GeneratorSpec, ShiftSpec};
