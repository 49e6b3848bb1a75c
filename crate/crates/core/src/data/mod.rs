//! Feature banks on disk, synthetic benchmark generation and run configuration.

pub mod bank;
pub mod config;
pub mod layout;
pub mod synth;

pub use bank::{
    decode_bank, decode_checkpoint, encode_bank, encode_checkpoint, read_bank, read_bank_with_warnings,
    read_checkpoint, write_bank, write_checkpoint, Checkpoint, FeatureBank, Split,
};
pub use config::{default_config, load_config, parse_config, RunConfig};
pub use synth::{generate_synthetic, SynthConfig, SyntheticBenchmark};
pub use layout::{load_dir_config, load_test, load_train, write_synthetic_dir};
