//! Monte Carlo validation harness.
//!
//! Each replication draws a fresh dataset from a [`SimulationScenario`],
//! runs the full ranking procedure with its own derived seed and is scored
//! against the ranking implied by the effect vectors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataView, Dataset, Labels, VariableMeta};
use crate::error::{Error, Result};
use crate::multiplicity::AdjustMethod;
use crate::npc::Combiner;
use crate::partial_tests::Statistic;
use crate::perm_engine::{PartialTest, PermutationPlan, Strategy};
use crate::ranking::{competition_ranks, global_ranking, RankingOptions};
use crate::rng::{derive_seed, keyed_rng, STREAM_SIM_DATA, STREAM_SIM_SEED};
use crate::time_to_time::ProfileDataset;

/// Error distribution of the generated responses.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorDistribution {
    #[default]
    Normal,
    /// Student t with the given degrees of freedom.
    HeavyTailed { df: f64 },
    /// Latent normal cut into `levels` equiprobable (under no effect)
    /// ordered categories.
    OrdinalMultinomial { levels: usize },
}

fn default_replications() -> usize {
    100
}

fn default_b() -> usize {
    999
}

fn default_alpha() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

/// A data-generating design plus the analysis settings applied to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationScenario {
    pub group_sizes: Vec<usize>,
    /// Number of response variables p.
    pub variables: usize,
    /// Effect δ per population and variable (C × p). Overrides `shifts`.
    #[serde(default)]
    pub effects: Option<Vec<Vec<f64>>>,
    /// One shift per population applied to every variable.
    #[serde(default)]
    pub shifts: Option<Vec<f64>>,
    #[serde(default)]
    pub distribution: ErrorDistribution,
    /// Common correlation between the variables of a unit.
    #[serde(default)]
    pub correlation: f64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_b", rename = "B")]
    pub b: usize,
    #[serde(default)]
    pub combiner: Combiner,
    #[serde(default)]
    pub adjust: AdjustMethod,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_true")]
    pub gate_on_global_test: bool,
    /// Ranking the replications are scored against; derived from the
    /// effects when absent.
    #[serde(default)]
    pub true_ranks: Option<Vec<usize>>,
}

fn default_strategy() -> Strategy {
    Strategy::Pip
}

impl SimulationScenario {
    /// Normal errors, no effect, defaults elsewhere.
    pub fn null(group_sizes: Vec<usize>, variables: usize) -> Self {
        SimulationScenario {
            group_sizes,
            variables,
            effects: None,
            shifts: None,
            distribution: ErrorDistribution::Normal,
            correlation: 0.0,
            replications: default_replications(),
            seed: 0,
            strategy: Strategy::Pip,
            b: default_b(),
            combiner: Combiner::FISHER,
            adjust: AdjustMethod::Holm,
            alpha: default_alpha(),
            gate_on_global_test: true,
            true_ranks: None,
        }
    }

    pub fn with_shifts(mut self, shifts: Vec<f64>) -> Self {
        self.shifts = Some(shifts);
        self
    }

    pub fn num_groups(&self) -> usize {
        self.group_sizes.len()
    }

    /// C × p effect matrix.
    pub fn effect_matrix(&self) -> Vec<Vec<f64>> {
        let c = self.num_groups();
        match (&self.effects, &self.shifts) {
            (Some(e), _) => e.clone(),
            (None, Some(s)) => s.iter().map(|&d| vec![d; self.variables]).collect(),
            (None, None) => vec![vec![0.0; self.variables]; c],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_groups();
        if c < 2 {
            return Err(Error::config("a scenario needs at least two populations"));
        }
        if self.group_sizes.iter().any(|&n| n < 2) {
            return Err(Error::config("every population needs at least two units"));
        }
        if self.variables == 0 {
            return Err(Error::config("a scenario needs at least one variable"));
        }
        if self.replications == 0 {
            return Err(Error::config("replications R must be at least 1"));
        }
        if self.b == 0 {
            return Err(Error::config("B must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("alpha must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.correlation) {
            return Err(Error::config("correlation must lie in [0, 1)"));
        }
        if let Some(e) = &self.effects {
            if e.len() != c || e.iter().any(|r| r.len() != self.variables) {
                return Err(Error::config("effects must be a C × p matrix"));
            }
        }
        if let Some(s) = &self.shifts {
            if s.len() != c {
                return Err(Error::config("shifts need one value per population"));
            }
        }
        if let Some(r) = &self.true_ranks {
            if r.len() != c {
                return Err(Error::config("true_ranks needs one rank per population"));
            }
        }
        match self.distribution {
            ErrorDistribution::HeavyTailed { df } if df.is_nan() || df <= 0.0 => {
                Err(Error::config("heavy-tailed errors need df > 0"))
            }
            ErrorDistribution::OrdinalMultinomial { levels } if levels < 2 => {
                Err(Error::config("ordinal errors need at least two levels"))
            }
            _ => Ok(()),
        }
    }

    /// Ranking implied by the effects: competition ranks of the mean effect
    /// of each population, larger being better.
    pub fn expected_ranks(&self) -> Vec<usize> {
        if let Some(r) = &self.true_ranks {
            return r.clone();
        }
        let means: Vec<f64> = self
            .effect_matrix()
            .iter()
            .map(|row| -row.iter().sum::<f64>() / row.len() as f64)
            .collect();
        competition_ranks(&means)
    }

    /// Draws one dataset from `seed`.
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = keyed_rng(seed, STREAM_SIM_DATA, 0);
        let effects = self.effect_matrix();
        let p = self.variables;
        let mut columns = vec![Vec::new(); p];
        let mut names = Vec::new();
        let shared = self.correlation.sqrt();
        let own = (1.0 - self.correlation).sqrt();
        let cuts = match self.distribution {
            ErrorDistribution::OrdinalMultinomial { levels } => equiprobable_cuts(levels),
            _ => Vec::new(),
        };
        for (j, &n) in self.group_sizes.iter().enumerate() {
            for _ in 0..n {
                names.push(format!("P{}", j + 1));
                let common = self.draw(&mut rng);
                for (k, col) in columns.iter_mut().enumerate() {
                    let e = shared * common + own * self.draw(&mut rng);
                    let y = effects[j][k] + e;
                    col.push(Some(if cuts.is_empty() {
                        y
                    } else {
                        (1 + cuts.iter().filter(|&&c| y > c).count()) as f64
                    }));
                }
            }
        }
        let meta = (0..p)
            .map(|k| match self.distribution {
                ErrorDistribution::OrdinalMultinomial { levels } => VariableMeta::ordinal(
                    format!("Y{}", k + 1),
                    (1..=levels).map(|l| l.to_string()).collect(),
                ),
                _ => VariableMeta::numeric(format!("Y{}", k + 1)),
            })
            .collect();
        Dataset::new(columns, Labels::from_strings(&names), None, None, meta)
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.distribution {
            ErrorDistribution::HeavyTailed { df } => {
                StudentT::new(df).expect("validated df").sample(rng)
            }
            _ => StandardNormal.sample(rng),
        }
    }

    fn ranking_options(&self) -> RankingOptions {
        RankingOptions {
            combiner: self.combiner.clone(),
            method: self.adjust,
            alpha: self.alpha,
            hierarchical: false,
            gate_on_global_test: self.gate_on_global_test,
            ..RankingOptions::default()
        }
    }
}

fn equiprobable_cuts(levels: usize) -> Vec<f64> {
    use statrs::distribution::{ContinuousCDF, Normal};
    let normal = Normal::new(0.0, 1.0).expect("valid parameters");
    (1..levels)
        .map(|l| normal.inverse_cdf(l as f64 / levels as f64))
        .collect()
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationOutcome {
    pub seed: u64,
    pub ranks: Vec<usize>,
    /// Pairs declared different (adjusted p ≤ α), none when gated.
    pub rejections: usize,
    /// Rejected pairs whose populations have equal effects.
    pub false_rejections: usize,
    /// Rejected pairs ordered consistently with the effects.
    pub correct_rejections: usize,
    pub global_p: f64,
    pub gated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub scenario: SimulationScenario,
    pub expected_ranks: Vec<usize>,
    pub replications: Vec<ReplicationOutcome>,
    /// Share of replications with at least one false rejection.
    pub fwer: f64,
    /// Share of replications with at least one rejection.
    pub rejection_rate: f64,
    /// Share of replications whose ranks are all 1.
    pub all_rank_one_rate: f64,
    /// Share of replications reproducing the expected ranking exactly.
    pub correct_ranking_rate: f64,
    /// Per population, the share of replications giving it its expected rank.
    pub position_accuracy: Vec<f64>,
    /// Share of replications with at least one correct rejection.
    pub power: f64,
    /// Share of replications whose global test is significant.
    pub global_rejection_rate: f64,
}

impl SimulationSummary {
    /// Monte Carlo standard error of a proportion estimated by this run.
    pub fn standard_error(&self, rate: f64) -> f64 {
        (rate * (1.0 - rate) / self.replications.len() as f64).sqrt()
    }
}

fn replicate(scn: &SimulationScenario, r: u64, opts: &RankingOptions) -> Result<ReplicationOutcome> {
    let seed = derive_seed(scn.seed, STREAM_SIM_SEED, r);
    let ds = scn.generate(seed)?;
    let view = DataView::full(&ds);
    let plan = PermutationPlan::new(scn.strategy, scn.b, seed)?;
    let tests: Vec<PartialTest> = (0..ds.num_variables())
        .map(|column| PartialTest {
            column,
            statistic: Statistic::default_for(ds.meta()[column].kind),
        })
        .collect();
    let run = global_ranking(&view, &plan, &tests, opts)?;
    let effects = scn.effect_matrix();
    let mean = |j: usize| effects[j].iter().sum::<f64>();
    let ranking = &run.ranking;
    let (mut rejections, mut false_rej, mut correct_rej) = (0, 0, 0);
    if !run.gated {
        let c = ranking.order.len();
        for a in 0..c {
            for b in a + 1..c {
                if ranking.upper.adjusted[a][b].is_some_and(|p| p <= scn.alpha) {
                    rejections += 1;
                    let (x, y) = (ranking.order[a], ranking.order[b]);
                    if effects[x] == effects[y] {
                        false_rej += 1;
                    } else if mean(x) > mean(y) {
                        correct_rej += 1;
                    }
                }
            }
        }
    }
    Ok(ReplicationOutcome {
        seed,
        ranks: ranking.ranks.clone(),
        rejections,
        false_rejections: false_rej,
        correct_rejections: correct_rej,
        global_p: run.global_test.p_value,
        gated: run.gated,
    })
}

/// Runs every replication of a scenario and summarizes them.
pub fn run_simulate(scn: &SimulationScenario) -> Result<SimulationSummary> {
    scn.validate()?;
    let opts = scn.ranking_options();
    let outcomes = (0..scn.replications as u64)
        .into_par_iter()
        .map(|r| replicate(scn, r, &opts))
        .collect::<Result<Vec<_>>>()?;
    let expected = scn.expected_ranks();
    let total = outcomes.len() as f64;
    let rate = |f: &dyn Fn(&ReplicationOutcome) -> bool| {
        outcomes.iter().filter(|o| f(o)).count() as f64 / total
    };
    let position_accuracy = (0..scn.num_groups())
        .map(|j| rate(&|o| o.ranks[j] == expected[j]))
        .collect();
    Ok(SimulationSummary {
        fwer: rate(&|o| o.false_rejections > 0),
        rejection_rate: rate(&|o| o.rejections > 0),
        all_rank_one_rate: rate(&|o| o.ranks.iter().all(|&r| r == 1)),
        correct_ranking_rate: rate(&|o| o.ranks == expected),
        position_accuracy,
        power: rate(&|o| o.correct_rejections > 0),
        global_rejection_rate: rate(&|o| o.global_p <= scn.alpha),
        expected_ranks: expected,
        replications: outcomes,
        scenario: scn.clone(),
    })
}

/// Response profiles with group mean curves and AR(1) individual effects:
/// X_ji(t) = η_j(t) + Δ_ji(t) + σ ε_ji(t), Δ_ji(0) = 0,
/// Δ_ji(t) = γ Δ_ji(t−1) + β W_ji(t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileScenario {
    pub group_sizes: Vec<usize>,
    /// η_j(t): one curve per group, all of the same length N.
    pub curves: Vec<Vec<f64>>,
    pub gamma: f64,
    pub beta: f64,
    pub sigma: f64,
}

impl ProfileScenario {
    pub fn generate(&self, seed: u64) -> Result<ProfileDataset> {
        if self.curves.len() != self.group_sizes.len() {
            return Err(Error::config("one mean curve per group is required"));
        }
        let n_times = self.curves.first().map_or(0, Vec::len);
        let mut rng = keyed_rng(seed, STREAM_SIM_DATA, 1);
        let mut rows = Vec::new();
        let mut names = Vec::new();
        for (j, &n) in self.group_sizes.iter().enumerate() {
            for _ in 0..n {
                let mut delta = 0.0;
                let mut row = Vec::with_capacity(n_times);
                for t in 0..n_times {
                    if t > 0 {
                        let w: f64 = StandardNormal.sample(&mut rng);
                        delta = self.gamma * delta + self.beta * w;
                    }
                    let e: f64 = StandardNormal.sample(&mut rng);
                    row.push(self.curves[j][t] + delta + self.sigma * e);
                }
                rows.push(row);
                names.push(format!("G{}", j + 1));
            }
        }
        ProfileDataset::new(
            rows,
            Labels::from_strings(&names),
            (1..=n_times).map(|t| format!("t{t}")).collect(),
        )
    }
}
