//! Shared fixtures for the pipeline benchmarks.

use puf_forge::challenge::generate;
use puf_forge::puf::build_puf;
use puf_forge::{Challenge, Dataset, DatasetSpec, PufConfig, SchemeType, TransmissionMatrix};

/// Default geometry (512 px responses, 128 px crops) on an `l`×`l` grid.
pub fn puf(l: usize) -> TransmissionMatrix {
    build_puf(&config(l)).expect("valid config")
}

pub fn config(l: usize) -> PufConfig {
    PufConfig {
        grid_side: l,
        seed: 7,
        ..PufConfig::default()
    }
}

pub fn challenges(l: usize, count: usize) -> Vec<Challenge> {
    generate(l, SchemeType::A, count, 7).expect("valid grid")
}

/// A simulated type-A dataset with both Gabor bit responses.
pub fn dataset(l: usize, count: usize) -> Dataset {
    Dataset::generate(&DatasetSpec::new(config(l), SchemeType::A, count, 7)).expect("simulation")
}
