//! Familywise error control for the ordered upper-triangular family of
//! pairwise directional p-values.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest population count for which Shaffer's truth counts are enumerated.
pub const SHAFFER_MAX_POPULATIONS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustMethod {
    None,
    #[default]
    Holm,
    Shaffer,
}

impl fmt::Display for AdjustMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdjustMethod::None => "none",
            AdjustMethod::Holm => "holm",
            AdjustMethod::Shaffer => "shaffer",
        })
    }
}

impl FromStr for AdjustMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AdjustMethod::None),
            "holm" => Ok(AdjustMethod::Holm),
            "shaffer" => Ok(AdjustMethod::Shaffer),
            _ => Err(format!("unknown adjustment '{s}' (expected none, holm or shaffer)")),
        }
    }
}

/// Indices of `ps` in ascending order of p (stable).
fn ascending(ps: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ps.len()).collect();
    idx.sort_by(|&a, &b| ps[a].total_cmp(&ps[b]));
    idx
}

/// Step-down adjustment with the given multiplier per step.
fn step_down(ps: &[f64], multiplier: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; ps.len()];
    let mut running = 0.0f64;
    for (i, &k) in ascending(ps).iter().enumerate() {
        running = running.max((multiplier(i) * ps[k]).min(1.0));
        out[k] = running;
    }
    out
}

/// Bonferroni–Holm adjusted p-values, in input order.
pub fn holm_adjust(ps: &[f64]) -> Vec<f64> {
    let m = ps.len();
    step_down(ps, |i| (m - i) as f64)
}

fn truth_count_cache() -> &'static Mutex<HashMap<usize, Vec<usize>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Vec<usize>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn collect_partition_counts(remaining: usize, max_part: usize, acc: usize, out: &mut BTreeSet<usize>) {
    if remaining == 0 {
        out.insert(acc);
        return;
    }
    for part in (1..=remaining.min(max_part)).rev() {
        collect_partition_counts(remaining - part, part, acc + part * (part - 1) / 2, out);
    }
}

/// Achievable numbers of simultaneously true pairwise equalities among C
/// populations, in descending order.
pub fn shaffer_truth_counts(c: usize) -> Result<Vec<usize>> {
    if c < 2 {
        return Err(Error::config("Shaffer's procedure needs C ≥ 2"));
    }
    if c > SHAFFER_MAX_POPULATIONS {
        return Err(Error::config(format!(
            "Shaffer's procedure supports at most {SHAFFER_MAX_POPULATIONS} populations"
        )));
    }
    let mut cache = truth_count_cache().lock().expect("cache lock");
    Ok(cache
        .entry(c)
        .or_insert_with(|| {
            let mut set = BTreeSet::new();
            collect_partition_counts(c, c, 0, &mut set);
            set.into_iter().rev().collect()
        })
        .clone())
}

/// Shaffer multipliers for steps 1..=m.
pub fn shaffer_multipliers(c: usize) -> Result<Vec<usize>> {
    let counts = shaffer_truth_counts(c)?;
    let m = c * (c - 1) / 2;
    Ok((0..m)
        .map(|i| {
            let bound = m - i;
            *counts.iter().find(|&&t| t <= bound).expect("1 is always achievable")
        })
        .collect())
}

/// Shaffer's logically constrained step-down adjustment of the
/// m = C(C − 1)/2 pairwise p-values, in input order.
pub fn shaffer_adjust(ps: &[f64], c: usize) -> Result<Vec<f64>> {
    let m = c * c.saturating_sub(1) / 2;
    if ps.len() != m {
        return Err(Error::config(format!(
            "Shaffer adjustment for C = {c} needs {m} p-values, got {}",
            ps.len()
        )));
    }
    let mult = shaffer_multipliers(c)?;
    Ok(step_down(ps, |i| mult[i] as f64))
}

pub fn adjust(ps: &[f64], c: usize, method: AdjustMethod) -> Result<Vec<f64>> {
    match method {
        AdjustMethod::None => Ok(ps.to_vec()),
        AdjustMethod::Holm => Ok(holm_adjust(ps)),
        AdjustMethod::Shaffer => shaffer_adjust(ps, c),
    }
}

/// Upper-triangular raw and adjusted p-values over populations listed in
/// step-1 order. Entry `[a][b]`, a < b, compares the populations at
/// positions a and b.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjustedUpperMatrix {
    /// Original population index at each ordered position.
    pub order: Vec<usize>,
    pub raw: Vec<Vec<Option<f64>>>,
    pub adjusted: Vec<Vec<Option<f64>>>,
    pub method: AdjustMethod,
    pub alpha: f64,
}

impl AdjustedUpperMatrix {
    /// Adjusts the upper triangle of `raw` (row-major family order).
    pub fn new(order: Vec<usize>, raw: Vec<Vec<Option<f64>>>, method: AdjustMethod, alpha: f64) -> Result<Self> {
        let c = raw.len();
        let mut family = Vec::with_capacity(c * c.saturating_sub(1) / 2);
        for (a, row) in raw.iter().enumerate() {
            for p in &row[a + 1..] {
                family.push(p.ok_or_else(|| Error::config("upper matrix has a missing entry"))?);
            }
        }
        let adj = adjust(&family, c, method)?;
        let mut adjusted = vec![vec![None; c]; c];
        let mut it = adj.into_iter();
        for (a, row) in adjusted.iter_mut().enumerate() {
            for slot in &mut row[a + 1..] {
                *slot = it.next();
            }
        }
        Ok(AdjustedUpperMatrix {
            order,
            raw,
            adjusted,
            method,
            alpha,
        })
    }

    pub fn size(&self) -> usize {
        self.raw.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn holm_examples() {
        close(&holm_adjust(&[0.01, 0.02, 0.03]), &[0.03, 0.04, 0.04]);
        assert_eq!(holm_adjust(&[1.0, 1.0, 1.0]), vec![1.0, 1.0, 1.0]);
        assert_eq!(holm_adjust(&[0.3]), vec![0.3]);
        close(&holm_adjust(&[0.03, 0.01, 0.02]), &[0.04, 0.03, 0.04]);
    }

    #[test]
    fn truth_counts() {
        assert_eq!(shaffer_truth_counts(2).unwrap(), vec![1, 0]);
        assert_eq!(shaffer_truth_counts(3).unwrap(), vec![3, 1, 0]);
        assert_eq!(shaffer_truth_counts(4).unwrap(), vec![6, 3, 2, 1, 0]);
        assert!(shaffer_truth_counts(1).is_err());
        assert!(shaffer_truth_counts(31).is_err());
        assert_eq!(shaffer_truth_counts(30).unwrap()[0], 435);
    }

    #[test]
    fn shaffer_three_population_example() {
        assert_eq!(shaffer_multipliers(3).unwrap(), vec![3, 1, 1]);
        close(
            &shaffer_adjust(&[0.0001, 0.0002, 0.7510], 3).unwrap(),
            &[0.0003, 0.0003, 0.7510],
        );
        assert_eq!(shaffer_adjust(&[1.0; 3], 3).unwrap(), vec![1.0; 3]);
        assert_eq!(shaffer_adjust(&[0.2], 2).unwrap(), vec![0.2]);
        assert!(shaffer_adjust(&[0.2, 0.3], 3).is_err());
    }

    proptest! {
        #[test]
        fn shaffer_never_exceeds_holm(c in 2usize..8, seed in prop::collection::vec(0.0001f64..1.0, 28)) {
            let m = c * (c - 1) / 2;
            let ps = &seed[..m];
            let s = shaffer_adjust(ps, c).unwrap();
            let h = holm_adjust(ps);
            for i in 0..m {
                prop_assert!(s[i] <= h[i]);
                prop_assert!(s[i] >= ps[i] && s[i] <= 1.0);
            }
            let order = ascending(ps);
            for w in order.windows(2) {
                prop_assert!(s[w[0]] <= s[w[1]]);
                prop_assert!(h[w[0]] <= h[w[1]]);
            }
        }

        #[test]
        fn lowering_a_p_never_removes_a_rejection(
            ps in prop::collection::vec(0.0001f64..1.0, 6),
            k in 0usize..6,
            shrink in 0.0f64..1.0,
        ) {
            let mut lower = ps.clone();
            lower[k] *= shrink;
            for method in [AdjustMethod::Holm, AdjustMethod::Shaffer] {
                let before = adjust(&ps, 4, method).unwrap();
                let after = adjust(&lower, 4, method).unwrap();
                for i in 0..6 {
                    if before[i] <= 0.05 {
                        prop_assert!(after[i] <= 0.05);
                    }
                }
            }
        }
    }
}
