//! Fixtures shared by the benchmarks.

use drcombine::simulation::generate_dataset;
use drcombine::{CaseSpec, CombinedDataset};

/// One desk-scale replicate of a simulation case.
pub fn desk_dataset(case: &str, seed: u64) -> CombinedDataset {
    let spec = CaseSpec::from_id(case).expect("known case").desk_scale();
    generate_dataset(&spec, seed).expect("generated")
}
