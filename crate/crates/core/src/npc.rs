//! Nonparametric combination of dependent permutation tests.
//!
//! Every combination works permutation-wise: each row of a
//! [`StatisticTableau`] is turned into significance levels λ* by ranking it
//! against the permuted rows, the levels are combined row by row and the
//! combined statistic is calibrated the same way.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::DataView;
use crate::error::{Error, Result};
use crate::perm_engine::{
    cmc_run, level_from_count, significance_level, PartialTest, PermutationPlan,
    StatisticTableau, TableauMode,
};
use crate::rng::{keyed_rng, STREAM_ITERATED};

pub const DEFAULT_ITERATED_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_ITERATED_MAX_ITER: usize = 20;

/// Combining functions that act on significance levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombiningFunction {
    Fisher,
    Tippett,
    Liptak,
}

impl CombiningFunction {
    pub const DEFAULT_MEMBERS: [CombiningFunction; 3] = [
        CombiningFunction::Fisher,
        CombiningFunction::Liptak,
        CombiningFunction::Tippett,
    ];

    /// φ(λ). `eps` bounds the levels away from the points where φ is
    /// undefined: Fisher needs λ > 0, Liptak needs 0 < λ < 1.
    pub fn apply(self, lambdas: &[f64], eps: f64) -> f64 {
        match self {
            CombiningFunction::Fisher => {
                2.0 * ordered_sum(lambdas.iter().map(|&l| l.clamp(eps, 1.0).ln().abs()))
            }
            CombiningFunction::Tippett => lambdas
                .iter()
                .map(|&l| 1.0 - l)
                .fold(f64::NEG_INFINITY, f64::max),
            CombiningFunction::Liptak => {
                let normal = standard_normal();
                ordered_sum(
                    lambdas
                        .iter()
                        .map(|&l| normal.inverse_cdf(1.0 - l.clamp(eps, 1.0 - eps))),
                )
            }
        }
    }
}

impl CombiningFunction {
    /// The common level u with φ(u, …, u) = φ(ps), kept inside
    /// [min ps, max ps].
    pub fn diagonal_level(self, ps: &[f64], eps: f64) -> f64 {
        let k = ps.len() as f64;
        let lo = ps.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let u = match self {
            CombiningFunction::Fisher => {
                (ordered_sum(ps.iter().map(|&p| p.clamp(eps, 1.0).ln())) / k).exp()
            }
            CombiningFunction::Tippett => lo,
            CombiningFunction::Liptak => {
                let normal = standard_normal();
                let z = ordered_sum(
                    ps.iter()
                        .map(|&p| normal.inverse_cdf(p.clamp(eps, 1.0 - eps))),
                ) / k;
                normal.cdf(z)
            }
        };
        u.clamp(lo, hi)
    }
}

impl fmt::Display for CombiningFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombiningFunction::Fisher => "fisher",
            CombiningFunction::Tippett => "tippett",
            CombiningFunction::Liptak => "liptak",
        })
    }
}

impl FromStr for CombiningFunction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fisher" => Ok(CombiningFunction::Fisher),
            "tippett" => Ok(CombiningFunction::Tippett),
            "liptak" => Ok(CombiningFunction::Liptak),
            _ => Err(format!("unknown combining function '{s}'")),
        }
    }
}

/// Sum in ascending order, so the result does not depend on the order of
/// the partial tests.
fn ordered_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let mut terms: Vec<f64> = terms.collect();
    terms.sort_by(|a, b| a.total_cmp(b));
    terms.iter().sum()
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid parameters")
}

/// Number of values that fall outside the open unit interval.
pub fn count_clamped(lambdas: &[f64]) -> usize {
    lambdas.iter().filter(|&&l| l <= 0.0 || l >= 1.0).count()
}

/// Clamp bound for a tableau with `rows` permuted rows.
pub fn clamp_epsilon(rows: usize) -> f64 {
    1.0 / (2.0 * (rows as f64 + 1.0))
}

/// φ applied to a vector of partial p-values.
pub fn apply_combiner(f: CombiningFunction, lambdas: &[f64], eps: f64) -> f64 {
    f.apply(lambdas, eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IteratedConfig {
    pub members: Vec<CombiningFunction>,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for IteratedConfig {
    fn default() -> Self {
        IteratedConfig {
            members: CombiningFunction::DEFAULT_MEMBERS.to_vec(),
            tolerance: DEFAULT_ITERATED_TOLERANCE,
            max_iter: DEFAULT_ITERATED_MAX_ITER,
        }
    }
}

/// How a set of partial tests is merged into one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Combiner {
    Function(CombiningFunction),
    /// Sum of partial statistics standardized over the permuted rows.
    Direct,
    Iterated(IteratedConfig),
}

impl Combiner {
    pub const FISHER: Combiner = Combiner::Function(CombiningFunction::Fisher);
    pub const TIPPETT: Combiner = Combiner::Function(CombiningFunction::Tippett);
    pub const LIPTAK: Combiner = Combiner::Function(CombiningFunction::Liptak);

    /// The level-based function used where a single φ is needed, such as
    /// dominance scores.
    pub fn level_function(&self) -> CombiningFunction {
        match self {
            Combiner::Function(f) => *f,
            Combiner::Direct => CombiningFunction::Liptak,
            Combiner::Iterated(_) => CombiningFunction::Fisher,
        }
    }
}

impl Default for Combiner {
    fn default() -> Self {
        Combiner::FISHER
    }
}

impl fmt::Display for Combiner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Combiner::Function(c) => c.fmt(f),
            Combiner::Direct => f.write_str("direct"),
            Combiner::Iterated(_) => f.write_str("iterated"),
        }
    }
}

impl FromStr for Combiner {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(Combiner::Direct),
            "iterated" => Ok(Combiner::Iterated(IteratedConfig::default())),
            other => other
                .parse()
                .map(Combiner::Function)
                .map_err(|_| format!("unknown combiner '{s}' (expected fisher, liptak, tippett, direct or iterated)")),
        }
    }
}

impl TryFrom<String> for Combiner {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Combiner> for String {
    fn from(c: Combiner) -> Self {
        c.to_string()
    }
}

// ---------------------------------------------------------------------------
// Rank calibration
// ---------------------------------------------------------------------------

/// Levels of `values` against the reference sample `reference`:
/// the count of reference entries ≥ each value, through the tableau's
/// estimator.
fn calibrate(values: &[f64], reference: &[f64], mode: TableauMode) -> Vec<f64> {
    let mut sorted = reference.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rows = sorted.len();
    values
        .iter()
        .map(|&v| {
            let below = sorted.partition_point(|&r| r < v);
            level_from_count(rows - below, rows, mode)
        })
        .collect()
}

/// Observed and permuted λ for every column of a tableau subset.
/// `obs[k]`, `perm[b][k]`.
struct LevelTable {
    obs: Vec<f64>,
    perm: Vec<Vec<f64>>,
}

fn level_table(tableau: &StatisticTableau, columns: &[usize]) -> LevelTable {
    let rows = tableau.num_permuted();
    let mode = tableau.mode();
    let mut obs = Vec::with_capacity(columns.len());
    let mut perm = vec![Vec::with_capacity(columns.len()); rows];
    for &k in columns {
        let reference: Vec<f64> = tableau.permuted_column(k).collect();
        obs.push(calibrate(&[tableau.observed()[k]], &reference, mode)[0]);
        for (row, l) in perm.iter_mut().zip(calibrate(&reference, &reference, mode)) {
            row.push(l);
        }
    }
    LevelTable { obs, perm }
}

/// λ*_bk for every permuted row, by the sort-based calibration.
pub fn permuted_levels(tableau: &StatisticTableau, k: usize) -> Vec<f64> {
    let reference: Vec<f64> = tableau.permuted_column(k).collect();
    calibrate(&reference, &reference, tableau.mode())
}

/// Combined statistic T'' for the observed row and every permuted row.
fn combined_column(
    tableau: &StatisticTableau,
    columns: &[usize],
    combiner: &Combiner,
) -> (f64, Vec<f64>) {
    let eps = clamp_epsilon(tableau.num_permuted());
    match combiner {
        Combiner::Function(f) => {
            let levels = level_table(tableau, columns);
            (
                f.apply(&levels.obs, eps),
                levels.perm.iter().map(|row| f.apply(row, eps)).collect(),
            )
        }
        Combiner::Direct => direct_column(tableau, columns),
        Combiner::Iterated(cfg) => {
            let levels = level_table(tableau, columns);
            let out = iterate(levels.obs, levels.perm, cfg, tableau.mode());
            (1.0 - out.p_value, out.reference.iter().map(|p| 1.0 - p).collect())
        }
    }
}

fn direct_column(tableau: &StatisticTableau, columns: &[usize]) -> (f64, Vec<f64>) {
    let rows = tableau.num_permuted();
    let mut obs = Vec::with_capacity(columns.len());
    let mut perm = vec![Vec::with_capacity(columns.len()); rows];
    for &k in columns {
        let finite: Vec<f64> = tableau.permuted_column(k).filter(|v| v.is_finite()).collect();
        if finite.len() < 2 {
            continue;
        }
        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
        let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (finite.len() - 1) as f64;
        if var <= 0.0 {
            continue;
        }
        let sd = var.sqrt();
        obs.push((tableau.observed()[k] - mean) / sd);
        for (terms, v) in perm.iter_mut().zip(tableau.permuted_column(k)) {
            terms.push((v - mean) / sd);
        }
    }
    (
        ordered_sum(obs.into_iter()),
        perm.into_iter().map(|t| ordered_sum(t.into_iter())).collect(),
    )
}

/// Result of combining a subset of tableau columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NpcResult {
    pub global: f64,
    pub partial: Vec<f64>,
}

/// Global and partial p-values of the listed columns.
pub fn npc_pvalue(
    tableau: &StatisticTableau,
    columns: &[usize],
    combiner: &Combiner,
) -> Result<NpcResult> {
    if columns.is_empty() {
        return Err(Error::config("no partial tests to combine"));
    }
    if let Some(&k) = columns.iter().find(|&&k| k >= tableau.num_tests()) {
        return Err(Error::config(format!("tableau has no column {k}")));
    }
    let partial = columns.iter().map(|&k| significance_level(tableau, k)).collect();
    let global = if columns.len() == 1 {
        significance_level(tableau, columns[0])
    } else {
        let (obs, perm) = combined_column(tableau, columns, combiner);
        calibrate(&[obs], &perm, tableau.mode())[0]
    };
    Ok(NpcResult { global, partial })
}

/// Combines column groups into one combined column each, keeping the rows
/// aligned so a second stage can reuse the same relabelings.
pub fn combine_stage(
    tableau: &StatisticTableau,
    groups: &[Vec<usize>],
    combiner: &Combiner,
) -> Result<StatisticTableau> {
    let rows = tableau.num_permuted();
    let mut observed = Vec::with_capacity(groups.len());
    let mut permuted = vec![Vec::with_capacity(groups.len()); rows];
    for cols in groups {
        if cols.is_empty() {
            return Err(Error::config("empty domain in hierarchical combination"));
        }
        let (obs, perm) = if cols.len() == 1 {
            (
                tableau.observed()[cols[0]],
                tableau.permuted_column(cols[0]).collect(),
            )
        } else {
            combined_column(tableau, cols, combiner)
        };
        observed.push(obs);
        for (row, v) in permuted.iter_mut().zip(perm) {
            row.push(v);
        }
    }
    StatisticTableau::new(observed, permuted, tableau.mode())
}

// ---------------------------------------------------------------------------
// Iterated combination
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IteratedOutcome {
    pub p_value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Max − min of the member p-values after each iteration.
    pub spread_history: Vec<f64>,
    #[serde(skip)]
    reference: Vec<f64>,
}

fn spread(ps: &[f64]) -> f64 {
    let max = ps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = ps.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Repeatedly combines the member p-values with every member until they
/// agree. The first step calibrates against the reference rows. Later
/// steps combine p-values of one and the same hypothesis, so they are
/// calibrated on the diagonal: each member returns the u with
/// φ(u, …, u) = φ(p). That keeps every iterate inside the range of the
/// previous one. Reference rows go through the same map.
fn iterate(
    obs: Vec<f64>,
    reference: Vec<Vec<f64>>,
    cfg: &IteratedConfig,
    mode: TableauMode,
) -> IteratedOutcome {
    let eps = clamp_epsilon(reference.len());
    let mut obs_now = Vec::with_capacity(cfg.members.len());
    let mut ref_now = vec![Vec::with_capacity(cfg.members.len()); reference.len()];
    for f in &cfg.members {
        let stats: Vec<f64> = reference.iter().map(|row| f.apply(row, eps)).collect();
        obs_now.push(calibrate(&[f.apply(&obs, eps)], &stats, mode)[0]);
        for (row, p) in ref_now.iter_mut().zip(calibrate(&stats, &stats, mode)) {
            row.push(p);
        }
    }
    let step = |ps: &[f64]| -> Vec<f64> {
        cfg.members.iter().map(|f| f.diagonal_level(ps, eps)).collect()
    };
    let mut history = vec![spread(&obs_now)];
    let mut converged = history[0] < cfg.tolerance;
    while !converged && history.len() < cfg.max_iter.max(1) {
        obs_now = step(&obs_now);
        let s = spread(&obs_now);
        history.push(s);
        converged = s < cfg.tolerance;
    }
    for row in &mut ref_now {
        for _ in 1..history.len() {
            *row = step(row);
        }
    }
    let mean = |ps: &[f64]| ps.iter().sum::<f64>() / ps.len() as f64;
    IteratedOutcome {
        p_value: mean(&obs_now),
        converged,
        iterations: history.len(),
        spread_history: history,
        reference: ref_now.iter().map(|r| mean(r)).collect(),
    }
}

/// Iterated combination of a vector of partial p-values.
///
/// Each iterate is calibrated against `reference_size` synthetic rows of
/// independent uniform levels drawn from `seed`.
pub fn iterated_combination(
    partial_ps: &[f64],
    cfg: &IteratedConfig,
    reference_size: usize,
    seed: u64,
) -> Result<IteratedOutcome> {
    if cfg.members.is_empty() {
        return Err(Error::config("iterated combination needs at least one member"));
    }
    if partial_ps.is_empty() {
        return Err(Error::config("no partial p-values to combine"));
    }
    if reference_size == 0 {
        return Err(Error::config("reference size must be positive"));
    }
    let q = partial_ps.len();
    let mut rng = keyed_rng(seed, STREAM_ITERATED, 0);
    let reference: Vec<Vec<f64>> = (0..reference_size)
        .map(|_| {
            (0..q)
                .map(|_| (rng.random_range(0..reference_size) as f64 + 0.5) / (reference_size as f64 + 1.0))
                .collect()
        })
        .collect();
    Ok(iterate(partial_ps.to_vec(), reference, cfg, TableauMode::Sampled))
}

// ---------------------------------------------------------------------------
// Directional p-value matrices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatrixLevel {
    Marginal { variable: String, statistic: String },
    Domain { name: String },
    Global,
}

/// C×C matrix; entry (j, h) is the p-value-like statistic for
/// "population j dominates population h". The diagonal is undefined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionalPMatrix {
    pub level: MatrixLevel,
    values: Vec<Vec<Option<f64>>>,
}

impl DirectionalPMatrix {
    pub fn new(level: MatrixLevel, size: usize) -> Self {
        DirectionalPMatrix {
            level,
            values: vec![vec![None; size]; size],
        }
    }

    /// Builds a matrix from full rows; diagonal entries are ignored.
    pub fn from_rows(level: MatrixLevel, rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::config("p-value matrix must be square"));
        }
        let mut m = DirectionalPMatrix::new(level, c);
        for (j, row) in rows.iter().enumerate() {
            for (h, &v) in row.iter().enumerate() {
                if j != h {
                    m.set(j, h, v);
                }
            }
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, j: usize, h: usize) -> Option<f64> {
        self.values[j][h]
    }

    pub fn set(&mut self, j: usize, h: usize, p: f64) {
        if j != h {
            self.values[j][h] = Some(p);
        }
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.values
    }

    /// Off-diagonal entries of row j, in column order.
    pub fn row_entries(&self, j: usize) -> Vec<f64> {
        self.values[j].iter().flatten().copied().collect()
    }

    fn is_complete(&self) -> bool {
        self.values
            .iter()
            .enumerate()
            .all(|(j, r)| r.iter().enumerate().all(|(h, v)| j == h || v.is_some()))
    }
}

/// Evidence that population j dominates each of the others, as
/// p-value-like scores (smaller means stronger dominance).
///
/// With two populations the score is the pairwise p. Otherwise φ combines
/// the C − 1 row entries and the combined values are re-calibrated by rank
/// across rows.
pub fn dominance_scores(pmatrix: &DirectionalPMatrix, f: CombiningFunction) -> Result<Vec<f64>> {
    let c = pmatrix.size();
    if c < 2 || !pmatrix.is_complete() {
        return Err(Error::config("dominance scores need a full off-diagonal matrix with C ≥ 2"));
    }
    if c == 2 {
        return Ok(vec![pmatrix.get(0, 1).unwrap(), pmatrix.get(1, 0).unwrap()]);
    }
    let stats: Vec<f64> = (0..c)
        .map(|j| f.apply(&pmatrix.row_entries(j), f64::MIN_POSITIVE))
        .collect();
    Ok(stats
        .iter()
        .map(|&s| (stats.iter().filter(|&&o| o >= s).count() as f64 - 0.5) / c as f64)
        .collect())
}

// ---------------------------------------------------------------------------
// Pairwise directional tests
// ---------------------------------------------------------------------------

/// Directional evidence for one ordered pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionalEvidence {
    pub global: f64,
    /// One p per active partial test.
    pub marginal: Vec<f64>,
    /// (domain name, p) when the analysis is hierarchical.
    pub domains: Vec<(String, f64)>,
}

/// Both directions of the comparison between populations j and h.
#[derive(Debug, Clone, Serialize)]
pub struct PairwiseDirectional {
    pub pair: (usize, usize),
    pub tests: Vec<PartialTest>,
    /// Evidence for j dominating h.
    pub forward: DirectionalEvidence,
    /// Evidence for h dominating j.
    pub backward: DirectionalEvidence,
    pub notes: Vec<String>,
}

/// Domain grouping of the active tests, in first-appearance order.
fn domain_groups(view: &DataView<'_>, tests: &[PartialTest]) -> Vec<(String, Vec<usize>)> {
    let meta = view.dataset.meta();
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, t) in tests.iter().enumerate() {
        let name = meta[t.column].domain.clone().unwrap_or_else(|| "(none)".to_string());
        match groups.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => v.push(i),
            None => groups.push((name, vec![i])),
        }
    }
    groups
}

fn directional_evidence(
    tableau: &StatisticTableau,
    domains: Option<&[(String, Vec<usize>)]>,
    combiner: &Combiner,
) -> Result<DirectionalEvidence> {
    let all: Vec<usize> = (0..tableau.num_tests()).collect();
    match domains {
        Some(domains) if domains.len() > 1 => {
            let groups: Vec<Vec<usize>> = domains.iter().map(|(_, c)| c.clone()).collect();
            let stage = combine_stage(tableau, &groups, combiner)?;
            let second: Vec<usize> = (0..groups.len()).collect();
            let res = npc_pvalue(&stage, &second, combiner)?;
            Ok(DirectionalEvidence {
                global: res.global,
                marginal: all.iter().map(|&k| significance_level(tableau, k)).collect(),
                domains: domains.iter().map(|(n, _)| n.clone()).zip(res.partial).collect(),
            })
        }
        _ => {
            let res = npc_pvalue(tableau, &all, combiner)?;
            Ok(DirectionalEvidence {
                global: res.global,
                marginal: res.partial,
                domains: Vec::new(),
            })
        }
    }
}

/// Directional tests of j over h and of h over j.
///
/// Both directions are evaluated on the same relabelings. The marginal
/// reverse p-values are set to the complement of the forward ones; the
/// combined (global) values are computed independently in each direction.
pub fn pairwise_directional(
    view: &DataView<'_>,
    plan: &PermutationPlan,
    pair: (usize, usize),
    tests: &[PartialTest],
    combiner: &Combiner,
    hierarchical: bool,
) -> Result<PairwiseDirectional> {
    let (j, h) = pair;
    let fwd = cmc_run(view, plan, (j, h), tests)?;
    let mut notes: Vec<String> = fwd
        .excluded
        .iter()
        .map(|(_, why)| format!("pair ({j}, {h}) excluded {why}"))
        .collect();
    if fwd.tests.is_empty() {
        notes.push(format!("pair ({j}, {h}) has no informative partial test; p set to 1"));
        let none = DirectionalEvidence {
            global: 1.0,
            marginal: Vec::new(),
            domains: Vec::new(),
        };
        return Ok(PairwiseDirectional {
            pair,
            tests: Vec::new(),
            forward: none.clone(),
            backward: none,
            notes,
        });
    }
    let bwd = cmc_run(view, plan, (h, j), &fwd.tests)?;
    debug_assert_eq!(bwd.tests, fwd.tests);

    let domains = hierarchical.then(|| domain_groups(view, &fwd.tests));
    let forward = directional_evidence(&fwd.tableau, domains.as_deref(), combiner)?;
    let mut backward = directional_evidence(&bwd.tableau, domains.as_deref(), combiner)?;
    backward.marginal = forward.marginal.iter().map(|p| 1.0 - p).collect();
    Ok(PairwiseDirectional {
        pair,
        tests: fwd.tests,
        forward,
        backward,
        notes,
    })
}
