//! Domain types, Vietnamese-flavored text preprocessing, tokenization,
//! dataset I/O, statistics, and planted-signal synthetic data generation.

pub mod dataset;
pub mod fcmt;
pub mod preprocess;
pub mod stats;
pub mod synth;
pub mod types;
pub mod vocab;

pub use dataset::{
    load_dataset, load_dataset_with_features, write_dataset, FeatureStore, DATASET_FILE,
    FEATURES_DIR,
};
pub use preprocess::{preprocess, PreprocessOptions};
pub use stats::{dataset_stats, write_stats_csv, DatasetStats};
pub use synth::{generate_synthetic, Recipe, SynthConfig, RECIPE_FILE};
pub use types::{
    AspectCategory, ImageEntry, MultimodalSample, Roi, SentimentLabel, FEATURE_DIM,
    GRID_CELLS, J_MAX, K_MAX, N_MAX,
};
pub use vocab::Vocabulary;
