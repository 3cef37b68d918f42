//! Fixtures shared by the benchmarks.

use permrank_core::perm_engine::PartialTest;
use permrank_core::{Dataset, SimulationScenario, Statistic};

/// C groups of `n` units with `p` normal variables and unit shifts.
pub fn shifted_dataset(c: usize, n: usize, p: usize, seed: u64) -> Dataset {
    SimulationScenario::null(vec![n; c], p)
        .with_shifts((0..c).map(|j| (c - j) as f64 * 0.5).collect())
        .generate(seed)
        .expect("valid scenario")
}

pub fn mean_diff_tests(p: usize) -> Vec<PartialTest> {
    (0..p)
        .map(|column| PartialTest {
            column,
            statistic: Statistic::MeanDiff,
        })
        .collect()
}
