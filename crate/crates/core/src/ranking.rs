//! From the global directional p-value matrix to the final ranking.
//!
//! Populations are first ordered by dominance score. The upper triangle of
//! the reordered matrix is adjusted for multiplicity and thresholded into a
//! 0/1 matrix S of "not declared different" pairs. Rows of S contained in an
//! earlier row are dropped, each surviving row at position j hands the value
//! j to its columns, and the column means are turned into competition ranks.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::DataView;
use crate::error::{Error, Result};
use crate::multiplicity::{AdjustMethod, AdjustedUpperMatrix};
use crate::npc::{
    dominance_scores, npc_pvalue, Combiner, CombiningFunction, DirectionalPMatrix, MatrixLevel,
    NpcResult, PairwiseDirectional,
};
use crate::perm_engine::{
    cmc_custom, orbit_size, CSampleForm, CSampleStatistics, PartialTest, PermutationPlan,
    Strategy,
};

/// Step 1: positions sorted by ascending score, ties by original index.
pub fn order_populations(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Steps 2–3: reorders rows and columns and keeps the strict upper triangle.
pub fn build_upper(pmatrix: &DirectionalPMatrix, order: &[usize]) -> Vec<Vec<Option<f64>>> {
    let c = order.len();
    let mut upper = vec![vec![None; c]; c];
    for a in 0..c {
        for b in a + 1..c {
            upper[a][b] = pmatrix.get(order[a], order[b]);
        }
    }
    upper
}

/// S with s[a][b] = 1 iff the adjusted p exceeds α (a < b); unit diagonal;
/// zeros below the diagonal.
pub fn threshold_s(adjusted: &[Vec<Option<f64>>], alpha: f64) -> Vec<Vec<u8>> {
    let c = adjusted.len();
    (0..c)
        .map(|a| {
            (0..c)
                .map(|b| match a.cmp(&b) {
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Greater => 0,
                    std::cmp::Ordering::Less => u8::from(adjusted[a][b].is_some_and(|p| p > alpha)),
                })
                .collect()
        })
        .collect()
}

fn support(row: &[u8]) -> Vec<usize> {
    row.iter().enumerate().filter(|(_, &s)| s == 1).map(|(b, _)| b).collect()
}

/// Drops every row whose support is contained in the support of an earlier
/// kept row. Returns the kept row positions.
pub fn eliminate_subset_rows(s: &[Vec<u8>]) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (a, row) in s.iter().enumerate() {
        let sup = support(row);
        let contained = kept
            .iter()
            .any(|&k| sup.iter().all(|&b| s[k][b] == 1));
        if !contained {
            kept.push(a);
        }
    }
    kept
}

/// Column means of the rank values handed out by the kept rows; the row at
/// position a hands out a + 1.
pub fn rank_scores(s: &[Vec<u8>], kept: &[usize]) -> Vec<f64> {
    let c = s.len();
    let mut sum = vec![0.0; c];
    let mut count = vec![0usize; c];
    for &a in kept {
        for b in support(&s[a]) {
            sum[b] += (a + 1) as f64;
            count[b] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { f64::NAN })
        .collect()
}

/// Minimum ("competition") ranking: ties share the smallest rank.
pub fn competition_ranks(scores: &[f64]) -> Vec<usize> {
    scores
        .iter()
        .map(|&x| 1 + scores.iter().filter(|&&y| y < x).count())
        .collect()
}

/// C-sample test of equality of all populations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalTest {
    pub p_value: f64,
    /// Partial p per variable, in dataset column order.
    pub partial: Vec<f64>,
    pub columns: Vec<usize>,
}

/// Final ranking plus the evidence chain that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalRanking {
    pub labels: Vec<String>,
    pub dominance_scores: Vec<f64>,
    /// Original population index at each ordered position.
    pub order: Vec<usize>,
    pub upper: AdjustedUpperMatrix,
    /// Rows and columns in step-1 order.
    pub s: Vec<Vec<u8>>,
    pub kept_rows: Vec<usize>,
    /// Rank scores in step-1 order.
    pub rank_scores: Vec<f64>,
    /// Final ranks keyed by original population index.
    pub ranks: Vec<usize>,
}

impl GlobalRanking {
    /// Rank of each population label.
    pub fn ranked_labels(&self) -> Vec<(String, usize)> {
        self.labels.iter().cloned().zip(self.ranks.iter().copied()).collect()
    }

    pub fn all_tied(&self) -> bool {
        self.ranks.iter().all(|&r| r == 1)
    }
}

/// Post-processing from a global matrix and dominance scores.
pub fn rank_from_matrix(
    labels: Vec<String>,
    pmatrix: &DirectionalPMatrix,
    scores: &[f64],
    method: AdjustMethod,
    alpha: f64,
) -> Result<GlobalRanking> {
    let c = pmatrix.size();
    if scores.len() != c || labels.len() != c {
        return Err(Error::config("scores and labels must have one entry per population"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let order = order_populations(scores);
    let raw = build_upper(pmatrix, &order);
    let upper = AdjustedUpperMatrix::new(order.clone(), raw, method, alpha)?;
    let s = threshold_s(&upper.adjusted, alpha);
    let kept_rows = eliminate_subset_rows(&s);
    let rank_scores = rank_scores(&s, &kept_rows);
    let positional = competition_ranks(&rank_scores);
    let mut ranks = vec![0; c];
    for (pos, &pop) in order.iter().enumerate() {
        ranks[pop] = positional[pos];
    }
    Ok(GlobalRanking {
        labels,
        dominance_scores: scores.to_vec(),
        order,
        upper,
        s,
        kept_rows,
        rank_scores,
        ranks,
    })
}

/// Ranking knobs shared by the analysis and the simulation harness.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingOptions {
    pub combiner: Combiner,
    pub method: AdjustMethod,
    pub alpha: f64,
    /// Combine variables within domains first, then domains.
    pub hierarchical: bool,
    pub dominance: CombiningFunction,
    /// Report every population tied at rank 1 when the C-sample global
    /// test is not significant.
    pub gate_on_global_test: bool,
}

impl Default for RankingOptions {
    fn default() -> Self {
        RankingOptions {
            combiner: Combiner::FISHER,
            method: AdjustMethod::Holm,
            alpha: 0.05,
            hierarchical: true,
            dominance: CombiningFunction::Fisher,
            gate_on_global_test: true,
        }
    }
}

/// Everything computed for one view.
#[derive(Debug, Clone, Serialize)]
pub struct RankingRun {
    pub ranking: GlobalRanking,
    pub global_test: GlobalTest,
    /// True when the ranking was collapsed to all ties by the global test.
    pub gated: bool,
    pub global_matrix: DirectionalPMatrix,
    pub pairwise: Vec<PairwiseDirectional>,
}

/// C-sample global test over the listed columns.
///
/// Uses shared C-sample relabelings; an exhaustive plan falls back to
/// sampling when the C-sample orbit exceeds the cap.
pub fn global_test(
    view: &DataView<'_>,
    plan: &PermutationPlan,
    columns: &[usize],
    combiner: &Combiner,
) -> Result<GlobalTest> {
    let ds = view.dataset;
    let groups = ds.groups().codes();
    let mut plan = plan.clone();
    plan.strategy = match plan.strategy {
        Strategy::Exhaustive
            if orbit_size(&plan, groups, &view.units, None)? <= plan.exhaustive_cap.into() =>
        {
            Strategy::Exhaustive
        }
        _ => Strategy::Npip,
    };
    let stats = CSampleStatistics {
        columns: columns.iter().map(|&k| ds.column(k)).collect(),
        units: view.units.clone(),
        num_groups: ds.num_groups(),
        form: CSampleForm::Centered,
    };
    let tableau = cmc_custom(&stats, groups, &view.units, &plan, None)?;
    let active: Vec<usize> = (0..columns.len())
        .filter(|&k| tableau.observed()[k].is_finite())
        .collect();
    if active.is_empty() {
        return Err(Error::Degenerate("no variable supports the global test".into()));
    }
    let NpcResult { global, partial } = npc_pvalue(&tableau, &active, combiner)?;
    Ok(GlobalTest {
        p_value: global,
        partial,
        columns: active.iter().map(|&k| columns[k]).collect(),
    })
}

/// The whole procedure on one (oriented) view: pairwise directional tests
/// for every pair, dominance scores, ordering, adjustment and ranking.
pub fn global_ranking(
    view: &DataView<'_>,
    plan: &PermutationPlan,
    tests: &[PartialTest],
    opts: &RankingOptions,
) -> Result<RankingRun> {
    let ds = view.dataset;
    let c = ds.num_groups();
    if tests.is_empty() {
        return Err(Error::config("no partial tests specified"));
    }
    let pairs: Vec<(usize, usize)> = (0..c)
        .flat_map(|j| (j + 1..c).map(move |h| (j, h)))
        .collect();
    let pairwise = pairs
        .par_iter()
        .map(|&pair| {
            crate::npc::pairwise_directional(
                view,
                plan,
                pair,
                tests,
                &opts.combiner,
                opts.hierarchical,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut global_matrix = DirectionalPMatrix::new(MatrixLevel::Global, c);
    for pw in &pairwise {
        let (j, h) = pw.pair;
        global_matrix.set(j, h, pw.forward.global);
        global_matrix.set(h, j, pw.backward.global);
    }
    let scores = dominance_scores(&global_matrix, opts.dominance)?;
    let labels = ds.groups().names().to_vec();
    let mut ranking = rank_from_matrix(labels, &global_matrix, &scores, opts.method, opts.alpha)?;

    let mut columns: Vec<usize> = tests.iter().map(|t| t.column).collect();
    columns.sort_unstable();
    columns.dedup();
    let global = global_test(view, plan, &columns, &opts.combiner)?;
    let gated = opts.gate_on_global_test && global.p_value > opts.alpha && !ranking.all_tied();
    if gated {
        ranking.rank_scores = vec![1.0; c];
        ranking.ranks = vec![1; c];
    }
    Ok(RankingRun {
        ranking,
        global_test: global,
        gated,
        global_matrix,
        pairwise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s_from_upper(rows: &[&[u8]]) -> Vec<Vec<u8>> {
        let c = rows.len();
        (0..c)
            .map(|a| (0..c).map(|b| if b < a { 0 } else { rows[a][b - a] }).collect())
            .collect()
    }

    #[test]
    fn ordering_examples() {
        assert_eq!(order_populations(&[0.0001, 0.8120, 0.7942]), vec![0, 2, 1]);
        assert_eq!(order_populations(&[0.3, 0.3, 0.3]), vec![0, 1, 2]);
        assert_eq!(order_populations(&[0.9, 0.1]), vec![1, 0]);
    }

    #[test]
    fn competition_examples() {
        assert_eq!(competition_ranks(&[1.0, 1.0, 3.0]), vec![1, 1, 3]);
        assert_eq!(competition_ranks(&[1.0, 1.0, 3.0, 3.0]), vec![1, 1, 3, 3]);
        assert_eq!(competition_ranks(&[1.0, 2.0, 2.0, 2.0]), vec![1, 2, 2, 2]);
    }

    #[test]
    fn extreme_s_patterns() {
        let all_sig = vec![vec![Some(0.001); 4]; 4];
        let s = threshold_s(&all_sig, 0.05);
        let kept = eliminate_subset_rows(&s);
        assert_eq!(kept, vec![0, 1, 2, 3]);
        assert_eq!(competition_ranks(&rank_scores(&s, &kept)), vec![1, 2, 3, 4]);

        let none = vec![vec![Some(0.9); 4]; 4];
        let s = threshold_s(&none, 0.05);
        let kept = eliminate_subset_rows(&s);
        assert_eq!(kept, vec![0]);
        assert_eq!(rank_scores(&s, &kept), vec![1.0; 4]);
    }

    #[test]
    fn table_seven_third_case() {
        let s = s_from_upper(&[&[1, 0, 0, 0], &[1, 1, 1], &[1, 1], &[1]]);
        let kept = eliminate_subset_rows(&s);
        assert_eq!(kept, vec![0, 1]);
        assert_eq!(competition_ranks(&rank_scores(&s, &kept)), vec![1, 2, 2, 2]);
    }

    fn ranks_at(upper: &[Vec<Option<f64>>], alpha: f64) -> (Vec<f64>, Vec<usize>) {
        let s = threshold_s(upper, alpha);
        let kept = eliminate_subset_rows(&s);
        let scores = rank_scores(&s, &kept);
        let ranks = competition_ranks(&scores);
        (scores, ranks)
    }

    fn fill_upper(c: usize, mut entry: impl FnMut(usize, usize) -> f64) -> Vec<Vec<Option<f64>>> {
        let mut upper = vec![vec![None; c]; c];
        for a in 0..c {
            for b in a + 1..c {
                upper[a][b] = Some(entry(a, b));
            }
        }
        upper
    }

    proptest! {
        #[test]
        fn ranks_obey_competition_arithmetic(
            ps in prop::collection::vec(0.0f64..0.2, 15),
            alpha in 0.001f64..0.2,
        ) {
            let mut it = ps.iter();
            let upper = fill_upper(6, |_, _| *it.next().unwrap());
            let (_, ranks) = ranks_at(&upper, alpha);
            let mut sorted = ranks.clone();
            sorted.sort_unstable();
            let mut i = 0;
            while i < sorted.len() {
                prop_assert_eq!(sorted[i], i + 1);
                i += sorted.iter().filter(|&&x| x == sorted[i]).count();
            }
        }

        #[test]
        fn consistent_matrices_give_monotone_scores(
            mut x in prop::collection::vec(0.0f64..6.0, 2..9),
            a1 in 0.001f64..0.2,
            a2 in 0.001f64..0.2,
        ) {
            // p shrinks with the distance between ordered populations
            x.sort_by(|a, b| a.total_cmp(b));
            let upper = fill_upper(x.len(), |a, b| 0.2 * (x[a] - x[b]).exp());
            let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            let (scores_hi, r_hi) = ranks_at(&upper, hi);
            let (scores_lo, r_lo) = ranks_at(&upper, lo);
            for scores in [&scores_hi, &scores_lo] {
                for w in scores.windows(2) {
                    prop_assert!(w[0] <= w[1]);
                }
            }
            prop_assert_eq!(r_hi[0], 1);
            prop_assert_eq!(r_lo[0], 1);
        }
    }

    #[test]
    fn smaller_alpha_can_split_a_rank_one_tie() {
        // Fewer rejections keep row 1 out of row 0's support, so column 1
        // picks up a second assignment.
        let upper = fill_upper(3, |a, b| match (a, b) {
            (0, 1) => 0.3,
            (1, 2) => 0.08,
            _ => 0.001,
        });
        assert_eq!(ranks_at(&upper, 0.1).1, vec![1, 1, 3]);
        assert_eq!(ranks_at(&upper, 0.05).1, vec![1, 2, 3]);
    }
}
