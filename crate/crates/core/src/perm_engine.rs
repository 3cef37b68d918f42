//! Relabeling generation, exhaustive enumeration and the conditional Monte
//! Carlo (CMC) tableau of observed and permuted partial statistics.
//!
//! Relabelings are always confined to the units taking part in the
//! comparison (the two groups of a pair for PIP, every unit for NPIP) and,
//! when the design has strata or blocks, to the units sharing a cell.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DataView;
use crate::error::{Error, Result};
use crate::partial_tests::Statistic;
use crate::rng::{keyed_rng, pair_stream, STREAM_NPIP};

pub const DEFAULT_EXHAUSTIVE_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Pairwise independent permutations.
    Pip,
    /// C-sample permutations shared by every pair.
    Npip,
    /// Full enumeration of the pairwise relabelings.
    Exhaustive,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Pip => "pip",
            Strategy::Npip => "npip",
            Strategy::Exhaustive => "exhaustive",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pip" => Ok(Strategy::Pip),
            "npip" => Ok(Strategy::Npip),
            "exhaustive" => Ok(Strategy::Exhaustive),
            _ => Err(format!("unknown strategy '{s}' (expected pip, npip or exhaustive)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationPlan {
    pub strategy: Strategy,
    /// Number of sampled relabelings B (ignored when exhaustive).
    pub replications: usize,
    pub seed: u64,
    pub exhaustive_cap: u64,
    /// Cell id per dataset unit; units only permute within their cell.
    pub constraint: Option<Vec<usize>>,
}

impl PermutationPlan {
    pub fn new(strategy: Strategy, replications: usize, seed: u64) -> Result<Self> {
        if replications == 0 {
            return Err(Error::config("the number of relabelings B must be at least 1"));
        }
        Ok(PermutationPlan {
            strategy,
            replications,
            seed,
            exhaustive_cap: DEFAULT_EXHAUSTIVE_CAP,
            constraint: None,
        })
    }

    pub fn with_cap(mut self, cap: u64) -> Self {
        self.exhaustive_cap = cap;
        self
    }

    pub fn with_constraint(mut self, cells: Option<Vec<usize>>) -> Self {
        self.constraint = cells;
        self
    }
}

// ---------------------------------------------------------------------------
// Cardinalities
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CardinalityStrategy {
    Pip,
    Npip,
    /// Pairwise constrained synchronized permutations.
    Pcsp,
    /// Pairwise unconstrained synchronized permutations.
    Pusp,
}

impl FromStr for CardinalityStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pip" => Ok(CardinalityStrategy::Pip),
            "npip" => Ok(CardinalityStrategy::Npip),
            "pcsp" => Ok(CardinalityStrategy::Pcsp),
            "pusp" | "pups" => Ok(CardinalityStrategy::Pusp),
            _ => Err(format!("unknown strategy '{s}' (expected pip, npip, pcsp or pusp)")),
        }
    }
}

fn factorial(n: usize) -> BigUint {
    (1..=n as u64).fold(BigUint::from(1u32), |acc, k| acc * k)
}

fn multinomial(counts: &[usize]) -> BigUint {
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .fold(factorial(total), |acc, &c| acc / factorial(c))
}

/// Size of the permutation space of a pairwise statistic.
///
/// `pair` indexes into `sizes` and is required for PIP; for PCSP/PUSP the
/// design must be balanced.
pub fn cardinality(
    strategy: CardinalityStrategy,
    sizes: &[usize],
    pair: Option<(usize, usize)>,
) -> Result<BigUint> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::config("group sizes must be positive"));
    }
    match strategy {
        CardinalityStrategy::Pip => {
            let (j, h) = match (pair, sizes.len()) {
                (Some(p), _) => p,
                (None, 2) => (0, 1),
                (None, _) => return Err(Error::config("PIP cardinality needs a pair (j, h)")),
            };
            if j >= sizes.len() || h >= sizes.len() || j == h {
                return Err(Error::config("pair indices out of range"));
            }
            Ok(multinomial(&[sizes[j], sizes[h]]))
        }
        CardinalityStrategy::Npip => Ok(multinomial(sizes)),
        CardinalityStrategy::Pcsp | CardinalityStrategy::Pusp => {
            let n = sizes[0];
            if sizes.iter().any(|&s| s != n) {
                return Err(Error::config(
                    "synchronized permutations require balanced group sizes",
                ));
            }
            Ok(multinomial(&[n, n]))
        }
    }
}

// ---------------------------------------------------------------------------
// Relabelings
// ---------------------------------------------------------------------------

/// Units taking part in a comparison, grouped by constraint cell.
#[derive(Debug, Clone)]
pub(crate) struct Participants {
    cells: Vec<Vec<usize>>,
}

impl Participants {
    pub(crate) fn new(units: impl IntoIterator<Item = usize>, constraint: Option<&[usize]>) -> Self {
        let mut units: Vec<usize> = units.into_iter().collect();
        units.sort_unstable();
        units.dedup();
        let cells = match constraint {
            None => vec![units],
            Some(cells) => {
                let mut ids: Vec<usize> = units.iter().map(|&u| cells[u]).collect();
                ids.sort_unstable();
                ids.dedup();
                ids.iter()
                    .map(|&id| units.iter().copied().filter(|&u| cells[u] == id).collect())
                    .collect()
            }
        };
        Participants { cells }
    }

    /// Writes the relabeling permutation π for replication `index` into
    /// `perm`; index 0 is the identity.
    fn fill_permutation(&self, seed: u64, stream: u64, index: u64, perm: &mut [usize]) {
        for (i, p) in perm.iter_mut().enumerate() {
            *p = i;
        }
        if index == 0 {
            return;
        }
        let mut rng = keyed_rng(seed, stream, index);
        let mut shuffled = Vec::new();
        for cell in &self.cells {
            shuffled.clear();
            shuffled.extend_from_slice(cell);
            shuffled.shuffle(&mut rng);
            for (&u, &v) in cell.iter().zip(&shuffled) {
                perm[u] = v;
            }
        }
    }

    /// Group labels after relabeling: the data of unit π(i) now carries the
    /// label of position i.
    fn fill_labels(&self, base: &[usize], perm: &[usize], labels: &mut [usize]) {
        labels.copy_from_slice(base);
        for cell in &self.cells {
            for &i in cell {
                labels[perm[i]] = base[i];
            }
        }
    }

    fn space_size(&self, base: &[usize]) -> BigUint {
        self.cells.iter().fold(BigUint::from(1u32), |acc, cell| {
            let mut counts: Vec<usize> = Vec::new();
            let mut labels: Vec<usize> = cell.iter().map(|&u| base[u]).collect();
            labels.sort_unstable();
            for chunk in labels.chunk_by(|a, b| a == b) {
                counts.push(chunk.len());
            }
            acc * multinomial(&counts)
        })
    }
}

fn participants_for(
    plan: &PermutationPlan,
    groups: &[usize],
    units: &[usize],
    pair: Option<(usize, usize)>,
) -> Result<(Participants, u64)> {
    let constraint = plan.constraint.as_deref();
    if let Some(c) = constraint {
        if c.len() != groups.len() {
            return Err(Error::config("constraint partition length differs from unit count"));
        }
    }
    match (plan.strategy, pair) {
        (Strategy::Npip, _) | (Strategy::Exhaustive, None) => Ok((
            Participants::new(units.iter().copied(), constraint),
            STREAM_NPIP,
        )),
        (Strategy::Pip | Strategy::Exhaustive, Some((j, h))) => Ok((
            Participants::new(
                units.iter().copied().filter(|&u| groups[u] == j || groups[u] == h),
                constraint,
            ),
            pair_stream(j, h),
        )),
        (Strategy::Pip, None) => Err(Error::config("PIP relabeling needs a pair (j, h)")),
    }
}

/// Unit permutation π for replication `index`: relabeled data x*_i = x_π(i).
///
/// A pure function of `(plan.seed, pair, index)`; index 0 is the identity.
/// Under PIP only units of groups j and h move; with a constraint no unit
/// leaves its cell.
pub fn generate_relabeling(
    plan: &PermutationPlan,
    groups: &[usize],
    pair: Option<(usize, usize)>,
    index: u64,
) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..groups.len()).collect();
    let (participants, stream) = participants_for(plan, groups, &all, pair)?;
    let mut perm = vec![0; groups.len()];
    participants.fill_permutation(plan.seed, stream, index, &mut perm);
    Ok(perm)
}

/// Steps `v` to its next lexicographic multiset permutation; returns false
/// (leaving `v` sorted ascending) after the last one.
fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        v.reverse();
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Visits every distinct arrangement of the participants' labels.
struct Enumeration<'a> {
    participants: &'a Participants,
    arrangement: Vec<Vec<usize>>,
    done: bool,
}

impl<'a> Enumeration<'a> {
    fn new(participants: &'a Participants, base: &[usize]) -> Self {
        let arrangement = participants
            .cells
            .iter()
            .map(|cell| {
                let mut l: Vec<usize> = cell.iter().map(|&u| base[u]).collect();
                l.sort_unstable();
                l
            })
            .collect();
        Enumeration {
            participants,
            arrangement,
            done: false,
        }
    }

    fn next_into(&mut self, labels: &mut [usize]) -> bool {
        if self.done {
            return false;
        }
        for (cell, arr) in self.participants.cells.iter().zip(&self.arrangement) {
            for (&u, &l) in cell.iter().zip(arr) {
                labels[u] = l;
            }
        }
        // Odometer over cells.
        self.done = true;
        for arr in self.arrangement.iter_mut() {
            if next_permutation(arr) {
                self.done = false;
                break;
            }
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Tableau
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TableauMode {
    /// B random relabelings.
    Sampled,
    /// Every relabeling of the orbit, observed arrangement included.
    Exhaustive,
}

/// Observed statistics plus one row per relabeling.
///
/// Permuted statistics that cannot be evaluated (a relabeled group left
/// without data) are stored as −∞ so they never count as extreme.
#[derive(Debug, Clone, PartialEq)]
pub struct StatisticTableau {
    observed: Vec<f64>,
    permuted: Vec<f64>,
    num_tests: usize,
    mode: TableauMode,
}

impl StatisticTableau {
    pub fn new(observed: Vec<f64>, permuted_rows: Vec<Vec<f64>>, mode: TableauMode) -> Result<Self> {
        let q = observed.len();
        if permuted_rows.iter().any(|r| r.len() != q) {
            return Err(Error::config("tableau rows must match the observed row length"));
        }
        if permuted_rows.is_empty() {
            return Err(Error::config("tableau needs at least one permuted row"));
        }
        let permuted = permuted_rows
            .into_iter()
            .flatten()
            .map(|v| if v.is_nan() { f64::NEG_INFINITY } else { v })
            .collect();
        Ok(StatisticTableau {
            observed,
            permuted,
            num_tests: q,
            mode,
        })
    }

    pub fn num_tests(&self) -> usize {
        self.num_tests
    }

    /// B in sampled mode, the orbit size in exhaustive mode.
    pub fn num_permuted(&self) -> usize {
        self.permuted.len().checked_div(self.num_tests).unwrap_or(0)
    }

    pub fn mode(&self) -> TableauMode {
        self.mode
    }

    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    pub fn permuted_row(&self, b: usize) -> &[f64] {
        &self.permuted[b * self.num_tests..(b + 1) * self.num_tests]
    }

    pub fn permuted_column(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.permuted.iter().skip(k).step_by(self.num_tests.max(1)).copied()
    }

    /// Applies `g` to every entry.
    pub fn map(&self, g: impl Fn(f64) -> f64) -> Self {
        StatisticTableau {
            observed: self.observed.iter().map(|&v| g(v)).collect(),
            permuted: self.permuted.iter().map(|&v| g(v)).collect(),
            num_tests: self.num_tests,
            mode: self.mode,
        }
    }

    /// Keeps the listed columns, in the given order.
    pub fn select(&self, columns: &[usize]) -> Self {
        let rows = self.num_permuted();
        let mut permuted = Vec::with_capacity(rows * columns.len());
        for b in 0..rows {
            let row = self.permuted_row(b);
            permuted.extend(columns.iter().map(|&k| row[k]));
        }
        StatisticTableau {
            observed: columns.iter().map(|&k| self.observed[k]).collect(),
            permuted,
            num_tests: columns.len(),
            mode: self.mode,
        }
    }

    /// Reorders the permuted rows: row `b` of the result is row `order[b]`.
    pub fn reorder_rows(&self, order: &[usize]) -> Self {
        let mut permuted = Vec::with_capacity(self.permuted.len());
        for &b in order {
            permuted.extend_from_slice(self.permuted_row(b));
        }
        StatisticTableau {
            observed: self.observed.clone(),
            permuted,
            num_tests: self.num_tests,
            mode: self.mode,
        }
    }
}

/// Significance level of column `k`.
///
/// Sampled: λ̂ = (½ + #{T*_b ≥ T_obs}) / (B + 1), always inside (0, 1).
/// Exhaustive: the exact proportion #{T* ≥ T_obs} / S.
pub fn significance_level(tableau: &StatisticTableau, k: usize) -> f64 {
    let obs = tableau.observed[k];
    let count = tableau.permuted_column(k).filter(|&t| t >= obs).count();
    level_from_count(count, tableau.num_permuted(), tableau.mode)
}

pub(crate) fn level_from_count(count: usize, rows: usize, mode: TableauMode) -> f64 {
    match mode {
        TableauMode::Sampled => (0.5 + count as f64) / (rows as f64 + 1.0),
        TableauMode::Exhaustive => count as f64 / rows as f64,
    }
}

// ---------------------------------------------------------------------------
// CMC driver
// ---------------------------------------------------------------------------

/// A vector of partial statistics evaluated on a (re)labeling of the units.
pub trait PartialStatistics: Sync {
    fn num_tests(&self) -> usize;

    /// `labels[u]` is the group currently assigned to the data of unit `u`.
    /// NaN marks a value that cannot be computed on this labeling.
    fn evaluate(&self, labels: &[usize], out: &mut [f64]);
}

/// Where the relabelings come from.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Relabelings {
    Sampled { seed: u64, stream: u64, count: usize },
    Exhaustive { cap: u64 },
}

const ENUMERATION_BATCH: usize = 2048;

pub(crate) fn run_cmc<E: PartialStatistics + ?Sized>(
    stats: &E,
    base: &[usize],
    participants: &Participants,
    source: Relabelings,
) -> Result<StatisticTableau> {
    let q = stats.num_tests();
    let n = base.len();
    let mut observed = vec![0.0; q];
    stats.evaluate(base, &mut observed);

    let (permuted, mode) = match source {
        Relabelings::Sampled { seed, stream, count } => {
            let mut permuted = vec![0.0; count * q.max(1)];
            if q > 0 {
                permuted
                    .par_chunks_mut(q)
                    .enumerate()
                    .for_each_init(
                        || (vec![0usize; n], vec![0usize; n]),
                        |(perm, labels), (b, out)| {
                            participants.fill_permutation(seed, stream, b as u64 + 1, perm);
                            participants.fill_labels(base, perm, labels);
                            stats.evaluate(labels, out);
                        },
                    );
            }
            (permuted, TableauMode::Sampled)
        }
        Relabelings::Exhaustive { cap } => {
            let size = participants.space_size(base);
            if size > BigUint::from(cap) {
                return Err(Error::config(format!(
                    "exhaustive enumeration needs {size} relabelings, above the cap of {cap}"
                )));
            }
            let total: usize = size.try_into().expect("bounded by the cap");
            let mut permuted = Vec::with_capacity(total * q);
            let mut enumeration = Enumeration::new(participants, base);
            let mut batch: Vec<usize> = Vec::with_capacity(ENUMERATION_BATCH * n);
            loop {
                batch.clear();
                let mut labels = base.to_vec();
                while batch.len() < ENUMERATION_BATCH * n && enumeration.next_into(&mut labels) {
                    batch.extend_from_slice(&labels);
                }
                if batch.is_empty() {
                    break;
                }
                let rows = batch.len() / n.max(1);
                let start = permuted.len();
                permuted.resize(start + rows * q, 0.0);
                if q > 0 {
                    permuted[start..]
                        .par_chunks_mut(q)
                        .zip(batch.par_chunks(n))
                        .for_each(|(out, labels)| stats.evaluate(labels, out));
                }
            }
            (permuted, TableauMode::Exhaustive)
        }
    };
    let permuted = permuted
        .into_iter()
        .map(|v| if v.is_nan() { f64::NEG_INFINITY } else { v })
        .collect();
    Ok(StatisticTableau {
        observed,
        permuted,
        num_tests: q,
        mode,
    })
}

/// One partial test: a statistic applied to one dataset column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PartialTest {
    pub column: usize,
    pub statistic: Statistic,
}

/// Pairwise directional statistics for groups (j, h) over a set of units.
pub(crate) struct PairStatistics<'a> {
    view: &'a DataView<'a>,
    units: Vec<usize>,
    pair: (usize, usize),
    /// Tests grouped by column: (column, [(output slot, statistic)]).
    by_column: Vec<(usize, Vec<(usize, Statistic)>)>,
    num_tests: usize,
}

impl<'a> PairStatistics<'a> {
    pub(crate) fn new(
        view: &'a DataView<'a>,
        units: Vec<usize>,
        pair: (usize, usize),
        tests: &[PartialTest],
    ) -> Self {
        let mut by_column: Vec<(usize, Vec<(usize, Statistic)>)> = Vec::new();
        for (slot, t) in tests.iter().enumerate() {
            match by_column.iter_mut().find(|(c, _)| *c == t.column) {
                Some((_, v)) => v.push((slot, t.statistic)),
                None => by_column.push((t.column, vec![(slot, t.statistic)])),
            }
        }
        PairStatistics {
            view,
            units,
            pair,
            by_column,
            num_tests: tests.len(),
        }
    }
}

impl PartialStatistics for PairStatistics<'_> {
    fn num_tests(&self) -> usize {
        self.num_tests
    }

    fn evaluate(&self, labels: &[usize], out: &mut [f64]) {
        let ds = self.view.dataset;
        let (j, h) = self.pair;
        let mut xj = Vec::with_capacity(self.units.len());
        let mut xh = Vec::with_capacity(self.units.len());
        for (column, stats) in &self.by_column {
            xj.clear();
            xh.clear();
            let col = ds.column(*column);
            for &u in &self.units {
                if let Some(v) = col[u] {
                    if labels[u] == j {
                        xj.push(v);
                    } else if labels[u] == h {
                        xh.push(v);
                    }
                }
            }
            let meta = &ds.meta()[*column];
            for &(slot, stat) in stats {
                out[slot] = stat.evaluate(&xj, &xh, meta).unwrap_or(f64::NAN);
            }
        }
    }
}

/// Form of the C-sample between-groups statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CSampleForm {
    /// Σ_j n_j X̄_j².
    Raw,
    /// Σ_j n_j (X̄_j − X̄)².
    #[default]
    Centered,
    /// Σ_j n_j (X̄_j − X̄)² / Σ_ji (X_ji − X̄_j)².
    Standardized,
}

/// Between-groups statistic of one column under a labeling.
///
/// Missing values are skipped. NaN when fewer than two groups have data or,
/// in standardized form, when the within-group sum of squares vanishes.
pub fn between_groups(
    column: &[Option<f64>],
    units: &[usize],
    labels: &[usize],
    num_groups: usize,
    form: CSampleForm,
) -> f64 {
    let mut sums = vec![0.0; num_groups];
    let mut counts = vec![0usize; num_groups];
    for &u in units {
        if let Some(v) = column[u] {
            sums[labels[u]] += v;
            counts[labels[u]] += 1;
        }
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    if form == CSampleForm::Raw {
        return means.iter().zip(&counts).map(|(m, &c)| c as f64 * m * m).sum();
    }
    let total: usize = counts.iter().sum();
    let grand = sums.iter().sum::<f64>() / total as f64;
    let between: f64 = means
        .iter()
        .zip(&counts)
        .map(|(m, &c)| c as f64 * (m - grand).powi(2))
        .sum();
    if form == CSampleForm::Centered {
        return between;
    }
    let mut within = 0.0;
    for &u in units {
        if let Some(v) = column[u] {
            within += (v - means[labels[u]]).powi(2);
        }
    }
    if within > 0.0 {
        between / within
    } else {
        f64::NAN
    }
}

/// C-sample between-groups statistics, one per column.
pub struct CSampleStatistics<'a> {
    pub columns: Vec<&'a [Option<f64>]>,
    pub units: Vec<usize>,
    pub num_groups: usize,
    pub form: CSampleForm,
}

impl PartialStatistics for CSampleStatistics<'_> {
    fn num_tests(&self) -> usize {
        self.columns.len()
    }

    fn evaluate(&self, labels: &[usize], out: &mut [f64]) {
        for (slot, col) in out.iter_mut().zip(&self.columns) {
            *slot = between_groups(col, &self.units, labels, self.num_groups, self.form);
        }
    }
}

/// Tableau of a pair's partial tests plus the tests excluded as degenerate.
#[derive(Debug, Clone)]
pub struct PairTableau {
    pub tableau: StatisticTableau,
    pub tests: Vec<PartialTest>,
    pub excluded: Vec<(PartialTest, String)>,
}

/// Runs the CMC procedure for the directional comparison of groups j and h.
///
/// Tests whose statistic cannot be evaluated on the observed data, or whose
/// pooled sample is non-informative, are excluded and reported.
pub fn cmc_run(
    view: &DataView<'_>,
    plan: &PermutationPlan,
    pair: (usize, usize),
    tests: &[PartialTest],
) -> Result<PairTableau> {
    let ds = view.dataset;
    let groups = ds.groups().codes();
    let (j, h) = pair;
    if j == h || j >= ds.num_groups() || h >= ds.num_groups() {
        return Err(Error::config(format!("invalid pair ({j}, {h})")));
    }

    let pair_units: Vec<usize> = view
        .units
        .iter()
        .copied()
        .filter(|&u| groups[u] == j || groups[u] == h)
        .collect();
    let mut active = Vec::new();
    let mut excluded = Vec::new();
    for &t in tests {
        let meta = &ds.meta()[t.column];
        if !t.statistic.applies_to(meta.kind) {
            return Err(Error::config(format!(
                "statistic {} does not apply to {} variable '{}'",
                t.statistic, meta.kind, meta.name
            )));
        }
        let col = ds.column(t.column);
        let pick = |g: usize| -> Vec<f64> {
            pair_units
                .iter()
                .filter(|&&u| groups[u] == g)
                .filter_map(|&u| col[u])
                .collect()
        };
        let (xj, xh) = (pick(j), pick(h));
        match t.statistic.evaluate(&xj, &xh, meta) {
            Err(e) => excluded.push((t, format!("{}: {e}", meta.name))),
            Ok(_) if t.statistic.is_non_informative(&xj, &xh) => {
                excluded.push((t, format!("{}: non-informative variable", meta.name)))
            }
            Ok(_) => active.push(t),
        }
    }

    let (participants, stream) = participants_for(plan, groups, &view.units, Some(pair))?;
    // NPIP evaluates the pair on C-sample relabelings, so any unit of the
    // view may land in group j or h.
    let eval_units = match plan.strategy {
        Strategy::Npip => view.units.clone(),
        _ => pair_units,
    };
    let stats = PairStatistics::new(view, eval_units, pair, &active);
    let source = match plan.strategy {
        Strategy::Exhaustive => Relabelings::Exhaustive {
            cap: plan.exhaustive_cap,
        },
        _ => Relabelings::Sampled {
            seed: plan.seed,
            stream,
            count: plan.replications,
        },
    };
    let tableau = run_cmc(&stats, groups, &participants, source)?;
    Ok(PairTableau {
        tableau,
        tests: active,
        excluded,
    })
}

/// Runs the CMC procedure for an arbitrary statistic vector over the given
/// units of a labeled design (C-sample when `pair` is `None`).
pub fn cmc_custom<E: PartialStatistics + ?Sized>(
    stats: &E,
    groups: &[usize],
    units: &[usize],
    plan: &PermutationPlan,
    pair: Option<(usize, usize)>,
) -> Result<StatisticTableau> {
    let (participants, stream) = participants_for(plan, groups, units, pair)?;
    let source = match plan.strategy {
        Strategy::Exhaustive => Relabelings::Exhaustive {
            cap: plan.exhaustive_cap,
        },
        _ => Relabelings::Sampled {
            seed: plan.seed,
            stream,
            count: plan.replications,
        },
    };
    run_cmc(stats, groups, &participants, source)
}

/// Number of relabelings an exhaustive run over `units` would enumerate.
pub fn orbit_size(
    plan: &PermutationPlan,
    groups: &[usize],
    units: &[usize],
    pair: Option<(usize, usize)>,
) -> Result<BigUint> {
    let (participants, _) = participants_for(plan, groups, units, pair)?;
    Ok(participants.space_size(groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, Labels, VariableMeta};

    fn two_group(xj: &[f64], xh: &[f64]) -> Dataset {
        let mut names = vec!["A"; xj.len()];
        names.extend(vec!["B"; xh.len()]);
        let col = xj.iter().chain(xh).map(|&v| Some(v)).collect();
        Dataset::new(
            vec![col],
            Labels::from_strings(&names),
            None,
            None,
            vec![VariableMeta::numeric("y")],
        )
        .unwrap()
    }

    fn mean_test() -> Vec<PartialTest> {
        vec![PartialTest {
            column: 0,
            statistic: Statistic::MeanDiff,
        }]
    }

    #[test]
    fn cardinality_examples() {
        let pip = cardinality(CardinalityStrategy::Pip, &[4, 4], Some((0, 1))).unwrap();
        assert_eq!(pip, BigUint::from(70u32));
        let npip = cardinality(CardinalityStrategy::Npip, &[2, 2, 2], None).unwrap();
        assert_eq!(npip, BigUint::from(90u32));
        let pcsp = cardinality(CardinalityStrategy::Pcsp, &[4, 4], None).unwrap();
        assert_eq!(pcsp, BigUint::from(70u32));
        assert!(cardinality(CardinalityStrategy::Pusp, &[4, 5], None).is_err());
        assert!(cardinality(CardinalityStrategy::Pip, &[4, 4, 4], None).is_err());
    }

    #[test]
    fn next_permutation_visits_each_multiset_arrangement_once() {
        let mut v = vec![0, 0, 1, 1];
        let mut seen = vec![v.clone()];
        while next_permutation(&mut v) {
            seen.push(v.clone());
        }
        assert_eq!(seen.len(), 6);
        assert_eq!(v, vec![0, 0, 1, 1]);
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn index_zero_is_identity() {
        let plan = PermutationPlan::new(Strategy::Pip, 10, 42).unwrap();
        let groups = vec![0, 0, 1, 1, 2, 2];
        let perm = generate_relabeling(&plan, &groups, Some((0, 1)), 0).unwrap();
        assert_eq!(perm, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn pip_leaves_other_groups_fixed() {
        let plan = PermutationPlan::new(Strategy::Pip, 10, 42).unwrap();
        let groups = vec![0, 0, 1, 1, 2, 2, 0, 1, 2];
        for index in 1..200 {
            let perm = generate_relabeling(&plan, &groups, Some((0, 1)), index).unwrap();
            for (u, &g) in groups.iter().enumerate() {
                if g == 2 {
                    assert_eq!(perm[u], u);
                } else {
                    assert_ne!(groups[perm[u]], 2);
                }
            }
        }
    }

    #[test]
    fn strata_are_never_crossed() {
        let groups = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let strata = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let plan = PermutationPlan::new(Strategy::Npip, 10, 9)
            .unwrap()
            .with_constraint(Some(strata.clone()));
        for index in 0..200 {
            let perm = generate_relabeling(&plan, &groups, None, index).unwrap();
            assert!(perm.iter().enumerate().all(|(u, &v)| strata[u] == strata[v]));
        }
    }

    #[test]
    fn singleton_cells_stay_fixed() {
        let groups = vec![0, 1, 0, 1, 0];
        let cells = vec![0, 0, 0, 0, 1];
        let plan = PermutationPlan::new(Strategy::Npip, 10, 9)
            .unwrap()
            .with_constraint(Some(cells));
        for index in 0..50 {
            assert_eq!(generate_relabeling(&plan, &groups, None, index).unwrap()[4], 4);
        }
    }

    #[test]
    fn relabeling_is_a_pure_function_of_its_key() {
        let plan = PermutationPlan::new(Strategy::Pip, 10, 1234).unwrap();
        let groups = vec![0, 0, 0, 1, 1, 1, 2, 2];
        let a = generate_relabeling(&plan, &groups, Some((0, 1)), 17).unwrap();
        let b = generate_relabeling(&plan, &groups, Some((1, 0)), 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_relabeling(&plan, &groups, Some((0, 1)), 18).unwrap());
    }

    #[test]
    fn exhaustive_identical_groups_sum_to_zero() {
        let ds = two_group(&[1.0, 5.0], &[1.0, 5.0]);
        let view = DataView::full(&ds);
        let plan = PermutationPlan::new(Strategy::Exhaustive, 1, 0).unwrap();
        let run = cmc_run(&view, &plan, (0, 1), &mean_test()).unwrap();
        assert_eq!(run.tableau.observed(), &[0.0]);
        assert_eq!(run.tableau.num_permuted(), 6);
        let total: f64 = run.tableau.permuted_column(0).sum();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn sampled_tableau_has_b_rows() {
        let ds = two_group(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]);
        let view = DataView::full(&ds);
        let plan = PermutationPlan::new(Strategy::Pip, 10, 3).unwrap();
        let run = cmc_run(&view, &plan, (0, 1), &mean_test()).unwrap();
        assert_eq!(run.tableau.num_permuted(), 10);
        assert_eq!(run.tableau.mode(), TableauMode::Sampled);
    }

    #[test]
    fn significance_level_boundaries() {
        let obs = vec![10.0];
        let none: Vec<Vec<f64>> = (0..999).map(|_| vec![0.0]).collect();
        let t = StatisticTableau::new(obs.clone(), none, TableauMode::Sampled).unwrap();
        assert_eq!(significance_level(&t, 0), 0.0005);
        let all: Vec<Vec<f64>> = (0..999).map(|_| vec![20.0]).collect();
        let t = StatisticTableau::new(obs, all, TableauMode::Sampled).unwrap();
        assert_eq!(significance_level(&t, 0), 0.9995);
    }

    #[test]
    fn exhaustive_exact_proportion() {
        let ds = two_group(&[3.0, 4.0], &[1.0, 2.0]);
        let view = DataView::full(&ds);
        let plan = PermutationPlan::new(Strategy::Exhaustive, 1, 0).unwrap();
        let run = cmc_run(&view, &plan, (0, 1), &mean_test()).unwrap();
        assert_eq!(run.tableau.observed(), &[2.0]);
        assert_eq!(significance_level(&run.tableau, 0), 1.0 / 6.0);
    }

    #[test]
    fn exhaustive_cap_is_enforced() {
        let ds = two_group(&[1.0; 10], &[2.0; 10]);
        let view = DataView::full(&ds);
        let plan = PermutationPlan::new(Strategy::Exhaustive, 1, 0).unwrap().with_cap(1000);
        assert!(matches!(cmc_run(&view, &plan, (0, 1), &mean_test()), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_observed_statistic_is_excluded() {
        let groups = Labels::from_strings(&["A", "A", "B", "B"]);
        let ds = Dataset::new(
            vec![
                vec![None, None, Some(1.0), Some(2.0)],
                vec![Some(1.0), Some(2.0), Some(3.0), Some(4.0)],
            ],
            groups,
            None,
            None,
            vec![VariableMeta::numeric("gone"), VariableMeta::numeric("ok")],
        )
        .unwrap();
        let view = DataView::full(&ds);
        let plan = PermutationPlan::new(Strategy::Pip, 20, 1).unwrap();
        let tests = [
            PartialTest { column: 0, statistic: Statistic::MeanDiff },
            PartialTest { column: 1, statistic: Statistic::MeanDiff },
        ];
        let run = cmc_run(&view, &plan, (0, 1), &tests).unwrap();
        assert_eq!(run.tests.len(), 1);
        assert_eq!(run.excluded.len(), 1);
        assert!(run.excluded[0].1.contains("gone"));
        // relabelings may leave a group with no value of column 0 but column 1 is complete
        assert!(run.tableau.permuted_column(0).all(f64::is_finite));
    }

    #[test]
    fn worker_count_does_not_change_the_tableau() {
        let ds = two_group(&[1.0, 2.5, 3.0, 7.0, 0.5], &[4.0, 5.0, 6.0, -1.0]);
        let view = DataView::full(&ds);
        let plan = PermutationPlan::new(Strategy::Pip, 500, 77).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| cmc_run(&view, &plan, (0, 1), &mean_test()).unwrap().tableau)
        };
        assert_eq!(run(1), run(4));
    }
}
