//! End-to-end analysis: configuration, the ranking pipeline on the full
//! dataset and on each stratum, and the report with its text rendering.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, orient, partition_views, DataView, Dataset, DatasetConfig};
use crate::error::{Error, Result};
use crate::multiplicity::AdjustMethod;
use crate::npc::{Combiner, CombiningFunction, DirectionalPMatrix, IteratedConfig, MatrixLevel};
use crate::partial_tests::Statistic;
use crate::perm_engine::{PartialTest, PermutationPlan, Strategy, DEFAULT_EXHAUSTIVE_CAP};
use crate::ranking::{global_ranking, GlobalRanking, RankingOptions, RankingRun};

pub const REPORT_SCHEMA: &str = "permrank-report/1";

fn default_alpha() -> f64 {
    0.05
}

fn default_b() -> usize {
    2000
}

fn default_cap() -> u64 {
    DEFAULT_EXHAUSTIVE_CAP
}

fn default_true() -> bool {
    true
}

fn default_strategy() -> Strategy {
    Strategy::Pip
}

fn default_dominance() -> CombiningFunction {
    CombiningFunction::Fisher
}

/// The `[analysis]` section of a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOptions {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_b", rename = "B")]
    pub b: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub combiner: Combiner,
    #[serde(default)]
    pub adjust: AdjustMethod,
    #[serde(default = "default_cap")]
    pub exhaustive_cap: u64,
    /// Combine variables within domains before combining domains.
    #[serde(default = "default_true")]
    pub hierarchical: bool,
    /// Combining function for the dominance scores.
    #[serde(default = "default_dominance")]
    pub dominance: CombiningFunction,
    /// Collapse to the all-tied ranking when the global test is not
    /// significant.
    #[serde(default = "default_true")]
    pub gate_on_global_test: bool,
    /// Members, tolerance and iteration cap of the iterated combiner.
    #[serde(default)]
    pub iterated: IteratedConfig,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            alpha: default_alpha(),
            b: default_b(),
            seed: 0,
            strategy: default_strategy(),
            combiner: Combiner::FISHER,
            adjust: AdjustMethod::Holm,
            exhaustive_cap: default_cap(),
            hierarchical: true,
            dominance: default_dominance(),
            gate_on_global_test: true,
            iterated: IteratedConfig::default(),
        }
    }
}

impl AnalysisOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.b == 0 {
            return Err(Error::config("B must be at least 1"));
        }
        if self.iterated.members.is_empty() {
            return Err(Error::config("iterated combination needs at least one member"));
        }
        if self.iterated.tolerance.is_nan() || self.iterated.tolerance <= 0.0 || self.iterated.max_iter == 0 {
            return Err(Error::config("iterated tolerance and max_iter must be positive"));
        }
        Ok(())
    }

    fn combiner(&self) -> Combiner {
        match self.combiner {
            Combiner::Iterated(_) => Combiner::Iterated(self.iterated.clone()),
            ref c => c.clone(),
        }
    }

    fn ranking_options(&self) -> RankingOptions {
        RankingOptions {
            combiner: self.combiner(),
            method: self.adjust,
            alpha: self.alpha,
            hierarchical: self.hierarchical,
            dominance: self.dominance,
            gate_on_global_test: self.gate_on_global_test,
        }
    }
}

/// A full analysis configuration: how to read the table plus the
/// `[analysis]` options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Response table, relative to the configuration file.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(flatten)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub analysis: AnalysisOptions,
}

impl AnalysisConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads a configuration file; a relative `data` path is resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(data), Some(dir)) = (&cfg.data, path.parent()) {
            if data.is_relative() {
                cfg.data = Some(dir.join(data));
            }
        }
        Ok(cfg)
    }

    /// Partial tests per variable, in declaration order.
    pub fn partial_tests(&self, ds: &Dataset) -> Result<Vec<PartialTest>> {
        let mut tests = Vec::new();
        for (column, (var, meta)) in self.dataset.variables.iter().zip(ds.meta()).enumerate() {
            let stats = match &var.statistics {
                None => vec![Statistic::default_for(meta.kind)],
                Some(names) if names.is_empty() => {
                    return Err(Error::config(format!("variable '{}' lists no statistics", var.name)))
                }
                Some(names) => names
                    .iter()
                    .map(|n| {
                        n.parse::<Statistic>()
                            .map_err(|e| Error::config(format!("variable '{}': {e}", var.name)))
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            for statistic in stats {
                if !statistic.applies_to(meta.kind) {
                    return Err(Error::config(format!(
                        "statistic {statistic} does not apply to {} variable '{}'",
                        meta.kind, var.name
                    )));
                }
                tests.push(PartialTest { column, statistic });
            }
        }
        Ok(tests)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    #[serde(rename = "B")]
    pub b: usize,
    pub strategy: Strategy,
    pub combiner: String,
    pub adjust: AdjustMethod,
    pub alpha: f64,
    pub exhaustive_cap: u64,
    pub hierarchical: bool,
    pub dominance: CombiningFunction,
    pub gate_on_global_test: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub label: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestSummary {
    pub variable: String,
    pub statistic: Statistic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalTestReport {
    pub p_value: f64,
    pub significant: bool,
    /// (variable, partial p).
    pub partial: Vec<(String, f64)>,
}

/// Results for one set of units (the whole dataset or one stratum).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionReport {
    pub stratum: Option<String>,
    pub global_test: GlobalTestReport,
    /// One matrix per partial test.
    pub marginal: Vec<DirectionalPMatrix>,
    /// One matrix per variable domain (hierarchical runs only).
    pub domains: Vec<DirectionalPMatrix>,
    pub global: DirectionalPMatrix,
    pub ranking: GlobalRanking,
    /// The ranking was collapsed to all ties by a non-significant global
    /// test.
    pub gated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub schema: String,
    pub provenance: Provenance,
    pub units: usize,
    pub groups: Vec<GroupSummary>,
    pub tests: Vec<TestSummary>,
    pub overall: SectionReport,
    pub strata: Vec<SectionReport>,
    pub notes: Vec<String>,
}

fn section(
    ds: &Dataset,
    view: &DataView<'_>,
    tests: &[PartialTest],
    run: RankingRun,
    alpha: f64,
    notes: &mut Vec<String>,
) -> SectionReport {
    let c = ds.num_groups();
    let meta = ds.meta();
    let mut marginal: Vec<DirectionalPMatrix> = tests
        .iter()
        .map(|t| {
            DirectionalPMatrix::new(
                MatrixLevel::Marginal {
                    variable: meta[t.column].name.clone(),
                    statistic: t.statistic.to_string(),
                },
                c,
            )
        })
        .collect();
    let mut domains: Vec<DirectionalPMatrix> = Vec::new();
    for pw in &run.pairwise {
        let (j, h) = pw.pair;
        for (i, t) in pw.tests.iter().enumerate() {
            if let Some(slot) = tests.iter().position(|x| x == t) {
                marginal[slot].set(j, h, pw.forward.marginal[i]);
                marginal[slot].set(h, j, pw.backward.marginal[i]);
            }
        }
        for ((name, pf), (_, pb)) in pw.forward.domains.iter().zip(&pw.backward.domains) {
            let m = match domains
                .iter_mut()
                .position(|m| matches!(&m.level, MatrixLevel::Domain { name: n } if n == name))
            {
                Some(i) => &mut domains[i],
                None => {
                    domains.push(DirectionalPMatrix::new(MatrixLevel::Domain { name: name.clone() }, c));
                    domains.last_mut().expect("just pushed")
                }
            };
            m.set(j, h, *pf);
            m.set(h, j, *pb);
        }
        let prefix = view.stratum.as_deref().map(|s| format!("stratum '{s}': ")).unwrap_or_default();
        notes.extend(pw.notes.iter().map(|n| format!("{prefix}{n}")));
    }
    let global_test = GlobalTestReport {
        p_value: run.global_test.p_value,
        significant: run.global_test.p_value <= alpha,
        partial: run
            .global_test
            .columns
            .iter()
            .zip(&run.global_test.partial)
            .map(|(&k, &p)| (meta[k].name.clone(), p))
            .collect(),
    };
    SectionReport {
        stratum: view.stratum.clone(),
        global_test,
        marginal,
        domains,
        global: run.global_matrix,
        ranking: run.ranking,
        gated: run.gated,
    }
}

/// Runs the analysis on a table read from `table`.
pub fn run_analysis<R: Read>(cfg: &AnalysisConfig, table: R) -> Result<AnalysisReport> {
    let opts = &cfg.analysis;
    opts.validate()?;
    let raw = load_dataset(table, &cfg.dataset)?;
    let ds = orient(&raw);
    let tests = cfg.partial_tests(&ds)?;
    let plan = PermutationPlan::new(opts.strategy, opts.b, opts.seed)?
        .with_cap(opts.exhaustive_cap)
        .with_constraint(ds.constraint_cells());
    let ranking_opts = opts.ranking_options();
    let mut notes = Vec::new();

    let full = DataView::full(&ds);
    let run = global_ranking(&full, &plan, &tests, &ranking_opts)?;
    let overall = section(&ds, &full, &tests, run, opts.alpha, &mut notes);

    let mut strata = Vec::new();
    if ds.strata().is_some() {
        let mut seen = Vec::new();
        for view in partition_views(&ds)? {
            if seen.contains(&view.stratum) {
                continue;
            }
            seen.push(view.stratum.clone());
            let view = DataView {
                columns: full.columns.clone(),
                domain: None,
                ..view
            };
            let run = global_ranking(&view, &plan, &tests, &ranking_opts)?;
            strata.push(section(&ds, &view, &tests, run, opts.alpha, &mut notes));
        }
    }
    if overall.gated {
        notes.push(format!(
            "global test not significant at alpha = {}: every population is ranked 1",
            opts.alpha
        ));
    }

    Ok(AnalysisReport {
        schema: REPORT_SCHEMA.to_string(),
        provenance: Provenance {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: opts.seed,
            b: opts.b,
            strategy: opts.strategy,
            combiner: opts.combiner.to_string(),
            adjust: opts.adjust,
            alpha: opts.alpha,
            exhaustive_cap: opts.exhaustive_cap,
            hierarchical: opts.hierarchical,
            dominance: opts.dominance,
            gate_on_global_test: opts.gate_on_global_test,
        },
        units: ds.num_units(),
        groups: ds
            .groups()
            .names()
            .iter()
            .zip(ds.group_sizes())
            .map(|(label, size)| GroupSummary {
                label: label.clone(),
                size,
            })
            .collect(),
        tests: tests
            .iter()
            .map(|t| TestSummary {
                variable: ds.meta()[t.column].name.clone(),
                statistic: t.statistic,
            })
            .collect(),
        overall,
        strata,
        notes,
    })
}

/// Runs the analysis on the table named by `cfg.data`.
pub fn run_analyze(cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::config("no data file given"))?;
    let file = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    run_analysis(cfg, file)
}

// ---------------------------------------------------------------------------
// Text rendering
// ---------------------------------------------------------------------------

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |p| p.to_string())
}

fn write_matrix(out: &mut String, title: &str, labels: &[String], rows: &[Vec<Option<f64>>]) {
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "  {:>10} {}", "", labels.iter().map(|l| format!("{l:>22}")).collect::<String>());
    for (label, row) in labels.iter().zip(rows) {
        let cells: String = row.iter().map(|&v| format!("{:>22}", cell(v))).collect();
        let _ = writeln!(out, "  {label:>10} {cells}");
    }
}

fn level_title(m: &DirectionalPMatrix) -> String {
    match &m.level {
        MatrixLevel::Marginal { variable, statistic } => format!("marginal p+ ({variable}, {statistic})"),
        MatrixLevel::Domain { name } => format!("domain p+ ({name})"),
        MatrixLevel::Global => "global p+".to_string(),
    }
}

fn render_section(out: &mut String, s: &SectionReport, labels: &[String]) {
    if let Some(stratum) = &s.stratum {
        let _ = writeln!(out, "\n== stratum {stratum} ==");
    }
    let _ = writeln!(
        out,
        "global test p = {} ({})",
        s.global_test.p_value,
        if s.global_test.significant { "significant" } else { "not significant" }
    );
    for (v, p) in &s.global_test.partial {
        let _ = writeln!(out, "  {v}: {p}");
    }
    for m in s.marginal.iter().chain(&s.domains).chain(std::iter::once(&s.global)) {
        let _ = writeln!(out);
        write_matrix(out, &level_title(m), labels, m.rows());
    }
    let r = &s.ranking;
    let _ = writeln!(out, "\ndominance scores");
    for (l, v) in labels.iter().zip(&r.dominance_scores) {
        let _ = writeln!(out, "  {l:>10} {v}");
    }
    let ordered: Vec<String> = r.order.iter().map(|&j| labels[j].clone()).collect();
    let _ = writeln!(out);
    write_matrix(out, &format!("ordered upper p+ adjusted ({})", r.upper.method), &ordered, &r.upper.adjusted);
    let _ = writeln!(out, "\nS");
    for (l, row) in ordered.iter().zip(&r.s) {
        let cells: String = row.iter().map(|v| format!(" {v}")).collect();
        let _ = writeln!(out, "  {l:>10}{cells}");
    }
    let kept: Vec<String> = r.kept_rows.iter().map(|&k| ordered[k].clone()).collect();
    let _ = writeln!(out, "kept rows: {}", kept.join(", "));
    let _ = writeln!(out, "\nranking{}", if s.gated { " (global test not significant: all tied)" } else { "" });
    for pos in 0..ordered.len() {
        let pop = r.order[pos];
        let _ = writeln!(out, "  {:>10} score {} rank {}", labels[pop], r.rank_scores[pos], r.ranks[pop]);
    }
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let p = &self.provenance;
        let _ = writeln!(
            out,
            "permrank {} | seed {} | B {} | strategy {} | combiner {} | adjust {} | alpha {}",
            p.version, p.seed, p.b, p.strategy, p.combiner, p.adjust, p.alpha
        );
        let labels: Vec<String> = self.groups.iter().map(|g| g.label.clone()).collect();
        let sizes: Vec<String> = self.groups.iter().map(|g| format!("{} (n={})", g.label, g.size)).collect();
        let _ = writeln!(out, "{} units; populations: {}", self.units, sizes.join(", "));
        let tests: Vec<String> = self.tests.iter().map(|t| format!("{}:{}", t.variable, t.statistic)).collect();
        let _ = writeln!(out, "partial tests: {}\n", tests.join(", "));
        render_section(&mut out, &self.overall, &labels);
        for s in &self.strata {
            render_section(&mut out, s, &labels);
        }
        if !self.notes.is_empty() {
            let _ = writeln!(out, "\nnotes");
            for n in &self.notes {
                let _ = writeln!(out, "  - {n}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"
group = "g"

[[variables]]
name = "y"
kind = "numeric"

[analysis]
B = 199
seed = 3
"#;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = AnalysisConfig::from_toml(CONFIG).unwrap();
        assert_eq!(cfg.analysis.b, 199);
        assert_eq!(cfg.analysis.alpha, 0.05);
        assert_eq!(cfg.analysis.combiner, Combiner::FISHER);
        assert_eq!(cfg.analysis.adjust, AdjustMethod::Holm);
        assert_eq!(cfg.analysis.strategy, Strategy::Pip);
    }

    #[test]
    fn unknown_names_are_config_errors() {
        let bad = CONFIG.replace("seed = 3", "combiner = \"lancaster\"");
        assert!(matches!(AnalysisConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = CONFIG.replace("seed = 3", "colour = 1");
        assert!(matches!(AnalysisConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = CONFIG.replace("kind = \"numeric\"", "kind = \"numeric\"\nstatistics = [\"multi_focus\"]");
        let cfg = AnalysisConfig::from_toml(&bad).unwrap();
        let table = "g,y\na,1\na,2\nb,3\nb,4\n";
        assert!(matches!(run_analysis(&cfg, table.as_bytes()), Err(Error::Config(_))));
    }

    #[test]
    fn two_sample_report_degenerates_to_one_test() {
        let cfg = AnalysisConfig::from_toml(CONFIG).unwrap();
        let table = "g,y\na,5\na,6\na,7\na,8\nb,1\nb,2\nb,3\nb,4\n";
        let report = run_analysis(&cfg, table.as_bytes()).unwrap();
        let s = &report.overall;
        assert_eq!(s.marginal.len(), 1);
        assert_eq!(s.global.get(0, 1), s.marginal[0].get(0, 1));
        assert_eq!(s.ranking.ranks, vec![1, 2]);
        assert!(report.render_text().contains("rank 2"));
    }
}
