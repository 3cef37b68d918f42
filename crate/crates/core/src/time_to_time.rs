//! Comparison and ranking of response profiles observed on a common time
//! grid. Units are permuted as whole profiles, so the dependence between
//! time points is preserved and the N time-wise partial tests can be
//! combined by NPC.

use serde::Serialize;

use crate::dataset::{DataView, Dataset, Labels, VariableMeta};
use crate::error::{Error, Result};
use crate::npc::{npc_pvalue, Combiner};
use crate::partial_tests::Statistic;
use crate::perm_engine::{
    between_groups, cmc_custom, CSampleForm, CSampleStatistics, PartialTest, PermutationPlan,
    Strategy,
};
use crate::ranking::{global_ranking, RankingOptions, RankingRun};

/// n units × N time points, one group label per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileDataset {
    trajectories: Vec<Vec<f64>>,
    groups: Labels,
    times: Vec<String>,
}

impl ProfileDataset {
    pub fn new(trajectories: Vec<Vec<f64>>, groups: Labels, times: Vec<String>) -> Result<Self> {
        let n_times = times.len();
        if n_times == 0 {
            return Err(Error::data("profiles need at least one time point"));
        }
        if trajectories.len() != groups.len() {
            return Err(Error::data("one group label per profile is required"));
        }
        if let Some(i) = trajectories.iter().position(|t| t.len() != n_times) {
            return Err(Error::data(format!(
                "profile {i} has {} values, expected {n_times}",
                trajectories[i].len()
            )));
        }
        if trajectories.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data("profile values must be finite"));
        }
        let ds = ProfileDataset {
            trajectories,
            groups,
            times,
        };
        // Reuse the one-way layout's checks on groups.
        ds.to_dataset()?;
        Ok(ds)
    }

    pub fn num_units(&self) -> usize {
        self.trajectories.len()
    }

    pub fn num_times(&self) -> usize {
        self.times.len()
    }

    pub fn groups(&self) -> &Labels {
        &self.groups
    }

    pub fn times(&self) -> &[String] {
        &self.times
    }

    pub fn value(&self, unit: usize, t: usize) -> f64 {
        self.trajectories[unit][t]
    }

    /// The profiles as a one-way layout with one numeric variable per time.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let columns = (0..self.num_times())
            .map(|t| self.trajectories.iter().map(|p| Some(p[t])).collect())
            .collect();
        let meta = self.times.iter().map(VariableMeta::numeric).collect();
        Dataset::new(columns, self.groups.clone(), None, None, meta)
    }

    fn column(&self, t: usize) -> Vec<Option<f64>> {
        self.trajectories.iter().map(|p| Some(p[t])).collect()
    }
}

/// Time-wise between-groups statistic at time `t` under `labels`:
/// Σ_j n_j X̄_j(t)² in raw form, or between over within sums of squares in
/// standardized form (NaN when the within-group variation vanishes).
pub fn time_partial_stat(ds: &ProfileDataset, t: usize, labels: &[usize], standardized: bool) -> f64 {
    let units: Vec<usize> = (0..ds.num_units()).collect();
    let form = if standardized {
        CSampleForm::Standardized
    } else {
        CSampleForm::Raw
    };
    between_groups(&ds.column(t), &units, labels, ds.groups.num_levels(), form)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileTest {
    pub p_value: f64,
    /// Partial p per retained time point.
    pub partial: Vec<f64>,
    /// Indices of the time points entering the combination.
    pub times: Vec<usize>,
    /// Time points dropped as degenerate.
    pub excluded: Vec<usize>,
}

/// C-sample test that the profiles of all groups coincide at every time.
pub fn profile_global_test(
    ds: &ProfileDataset,
    plan: &PermutationPlan,
    combiner: &Combiner,
    standardized: bool,
) -> Result<ProfileTest> {
    let mut plan = plan.clone();
    if plan.strategy == Strategy::Pip {
        plan.strategy = Strategy::Npip;
    }
    let columns: Vec<Vec<Option<f64>>> = (0..ds.num_times()).map(|t| ds.column(t)).collect();
    let units: Vec<usize> = (0..ds.num_units()).collect();
    let stats = CSampleStatistics {
        columns: columns.iter().map(|c| c.as_slice()).collect(),
        units: units.clone(),
        num_groups: ds.groups.num_levels(),
        form: if standardized {
            CSampleForm::Standardized
        } else {
            CSampleForm::Raw
        },
    };
    let tableau = cmc_custom(&stats, ds.groups.codes(), &units, &plan, None)?;
    let (times, excluded): (Vec<usize>, Vec<usize>) =
        (0..ds.num_times()).partition(|&t| tableau.observed()[t].is_finite());
    if times.is_empty() {
        return Err(Error::Degenerate("every time point is degenerate".into()));
    }
    let res = npc_pvalue(&tableau, &times, combiner)?;
    Ok(ProfileTest {
        p_value: res.global,
        partial: res.partial,
        times,
        excluded,
    })
}

/// Ranks the curve populations with one mean difference per time point.
pub fn rank_curve_populations(
    ds: &ProfileDataset,
    plan: &PermutationPlan,
    opts: &RankingOptions,
) -> Result<RankingRun> {
    let data = ds.to_dataset()?;
    let view = DataView::full(&data);
    let tests: Vec<PartialTest> = (0..ds.num_times())
        .map(|column| PartialTest {
            column,
            statistic: Statistic::MeanDiff,
        })
        .collect();
    let opts = RankingOptions {
        hierarchical: false,
        ..opts.clone()
    };
    global_ranking(&view, plan, &tests, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profiles(rows: &[(&str, Vec<f64>)]) -> ProfileDataset {
        let names: Vec<&str> = rows.iter().map(|r| r.0).collect();
        let n = rows[0].1.len();
        ProfileDataset::new(
            rows.iter().map(|r| r.1.clone()).collect(),
            Labels::from_strings(&names),
            (1..=n).map(|t| format!("t{t}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn raw_statistic_by_hand() {
        let ds = profiles(&[("a", vec![2.0]), ("a", vec![2.0]), ("b", vec![0.0]), ("b", vec![0.0])]);
        let labels = ds.groups().codes().to_vec();
        assert_eq!(time_partial_stat(&ds, 0, &labels, false), 8.0);
    }

    #[test]
    fn standardized_is_shift_invariant() {
        let base = [1.0, 2.5, 0.3, 4.0, 3.1, 2.2];
        let make = |shift: f64| {
            profiles(&[
                ("a", vec![base[0] + shift]),
                ("a", vec![base[1] + shift]),
                ("a", vec![base[2] + shift]),
                ("b", vec![base[3] + shift]),
                ("b", vec![base[4] + shift]),
                ("b", vec![base[5] + shift]),
            ])
        };
        let (x, y) = (make(0.0), make(10.0));
        let labels = x.groups().codes().to_vec();
        let a = time_partial_stat(&x, 0, &labels, true);
        let b = time_partial_stat(&y, 0, &labels, true);
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn identical_profiles_are_central() {
        let ds = profiles(&[
            ("a", vec![1.0, 2.0]),
            ("a", vec![1.0, 2.0]),
            ("b", vec![1.0, 2.0]),
            ("b", vec![1.0, 2.0]),
        ]);
        let plan = PermutationPlan::new(Strategy::Npip, 99, 4).unwrap();
        let test = profile_global_test(&ds, &plan, &Combiner::FISHER, false).unwrap();
        assert_eq!(test.p_value, 99.5 / 100.0);
    }

    #[test]
    fn degenerate_time_points_are_excluded() {
        let ds = profiles(&[
            ("a", vec![1.0, 2.0]),
            ("a", vec![1.0, 3.0]),
            ("b", vec![1.0, 2.5]),
            ("b", vec![1.0, 0.5]),
        ]);
        let plan = PermutationPlan::new(Strategy::Npip, 50, 4).unwrap();
        let test = profile_global_test(&ds, &plan, &Combiner::FISHER, true).unwrap();
        assert_eq!(test.excluded, vec![0]);
        assert_eq!(test.times, vec![1]);
    }

    #[test]
    fn ragged_profiles_are_rejected() {
        let res = ProfileDataset::new(
            vec![vec![1.0, 2.0], vec![1.0]],
            Labels::from_strings(&["a", "b"]),
            vec!["t1".into(), "t2".into()],
        );
        assert!(matches!(res, Err(Error::Data(_))));
    }
}
