//! Ranking of multivariate populations from pairwise directional
//! permutation tests.
//!
//! The pipeline runs in this order:
//!
//! 1. [`dataset`] loads a one-way layout (optionally stratified, blocked and
//!    split into variable domains) and orients every variable so that larger
//!    values are better.
//! 2. [`partial_tests`] supplies univariate directional statistics for
//!    numeric, binary and ordered categorical responses.
//! 3. [`perm_engine`] draws (or enumerates) relabelings and builds the
//!    conditional Monte Carlo tableau of observed and permuted statistics.
//! 4. [`npc`] combines dependent partial tests into pairwise directional
//!    p-values and per-population dominance scores.
//! 5. [`multiplicity`] adjusts the ordered upper-triangular family.
//! 6. [`ranking`] turns the adjusted matrix into the final global ranking.
//!
//! [`time_to_time`] applies the same machinery to response profiles,
//! [`analysis`] wires everything into a report and [`simulate`] hosts the
//! Monte Carlo validation harness.

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod multiplicity;
pub mod npc;
pub mod perm_engine;
pub mod ranking;
pub mod simulate;
pub mod time_to_time;

mod rng;

pub use analysis::{run_analysis, run_analyze, AnalysisConfig, AnalysisOptions, AnalysisReport};
pub use dataset::{Dataset, DatasetConfig, Direction, VariableKind, VariableMeta};
pub use error::{Error, Result};
pub use multiplicity::AdjustMethod;
pub use npc::{Combiner, CombiningFunction, DirectionalPMatrix, IteratedConfig};
pub use partial_tests::{AspectBundle, Statistic};
pub use perm_engine::{PermutationPlan, StatisticTableau, Strategy};
pub use ranking::{GlobalRanking, RankingOptions};
pub use simulate::{run_simulate, SimulationScenario, SimulationSummary};
