//! Shared fixtures for the benchmarks.

use causalrm::datagen::{Dataset, GenConfig, Generator, Split};

/// Default-scale benchmark data with `n_train` training pairs.
pub fn dataset(n_train: usize, split: Split) -> Dataset {
    let cfg = GenConfig { n_train, n_test: n_train / 4, seed: 1, ..GenConfig::default() };
    Generator::new(&cfg).expect("default config is valid").generate_split(split)
}
