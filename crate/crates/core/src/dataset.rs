//! One-way (M)ANOVA data model: response table, group/stratum/block labels
//! and per-variable metadata, plus CSV ingestion and orientation.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Numeric,
    Binary,
    Ordinal,
}

impl fmt::Display for VariableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VariableKind::Numeric => "numeric",
            VariableKind::Binary => "binary",
            VariableKind::Ordinal => "ordinal",
        };
        f.write_str(s)
    }
}

/// Preference direction of a response variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    HigherBetter,
    LowerBetter,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::HigherBetter => Direction::LowerBetter,
            Direction::LowerBetter => Direction::HigherBetter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMeta {
    pub name: String,
    pub kind: VariableKind,
    pub direction: Direction,
    pub domain: Option<String>,
    /// Ordered category labels, lowest first. Empty unless `kind` is ordinal.
    pub levels: Vec<String>,
}

impl VariableMeta {
    pub fn numeric(name: impl Into<String>) -> Self {
        VariableMeta {
            name: name.into(),
            kind: VariableKind::Numeric,
            direction: Direction::HigherBetter,
            domain: None,
            levels: Vec::new(),
        }
    }

    pub fn ordinal(name: impl Into<String>, levels: Vec<String>) -> Self {
        VariableMeta {
            name: name.into(),
            kind: VariableKind::Ordinal,
            direction: Direction::HigherBetter,
            domain: None,
            levels,
        }
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = Some(domain.into());
        self
    }

    /// Number of ordered categories (0 for non-ordinal variables).
    pub fn num_levels(&self) -> usize {
        match self.kind {
            VariableKind::Ordinal => self.levels.len(),
            _ => 0,
        }
    }
}

/// A factor: integer codes into a list of distinct label names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    codes: Vec<usize>,
    names: Vec<String>,
}

impl Labels {
    pub fn new(codes: Vec<usize>, names: Vec<String>) -> Result<Self> {
        if let Some(&bad) = codes.iter().find(|&&c| c >= names.len()) {
            return Err(Error::data(format!(
                "label code {bad} out of range for {} labels",
                names.len()
            )));
        }
        Ok(Labels { codes, names })
    }

    /// Encodes string labels in order of first appearance.
    pub fn from_strings<S: AsRef<str>>(values: &[S]) -> Self {
        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let codes = values
            .iter()
            .map(|v| {
                let v = v.as_ref();
                *index.entry(v.to_string()).or_insert_with(|| {
                    names.push(v.to_string());
                    names.len() - 1
                })
            })
            .collect();
        Labels { codes, names }
    }

    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_levels(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.names.len()];
        for &c in &self.codes {
            counts[c] += 1;
        }
        counts
    }
}

/// Units × variables response table with its design labels.
///
/// Cells are `None` when missing. Ordinal cells hold the 1-based category
/// index into [`VariableMeta::levels`]; binary cells hold 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Vec<Option<f64>>>,
    groups: Labels,
    strata: Option<Labels>,
    blocks: Option<Labels>,
    meta: Vec<VariableMeta>,
}

impl Dataset {
    /// Builds a dataset from column-major responses, checking every invariant.
    pub fn new(
        columns: Vec<Vec<Option<f64>>>,
        groups: Labels,
        strata: Option<Labels>,
        blocks: Option<Labels>,
        meta: Vec<VariableMeta>,
    ) -> Result<Self> {
        let n = groups.len();
        if n == 0 {
            return Err(Error::data("no units"));
        }
        if columns.is_empty() || meta.is_empty() {
            return Err(Error::data("no response variables (p = 0)"));
        }
        if columns.len() != meta.len() {
            return Err(Error::data(format!(
                "{} response columns but {} variable descriptions",
                columns.len(),
                meta.len()
            )));
        }
        let counts = groups.counts();
        let used = counts.iter().filter(|&&c| c > 0).count();
        if used < 2 {
            return Err(Error::data("C ≥ 2 required: fewer than two groups present"));
        }
        for (name, &count) in groups.names().iter().zip(&counts) {
            if count < 2 {
                return Err(Error::data(format!(
                    "group '{name}' has {count} unit(s); every group needs at least 2"
                )));
            }
        }
        for (label, what) in [(&strata, "stratum"), (&blocks, "block")] {
            if let Some(l) = label {
                if l.len() != n {
                    return Err(Error::data(format!(
                        "{what} labels have length {} but there are {n} units",
                        l.len()
                    )));
                }
            }
        }
        for (col, m) in columns.iter().zip(&meta) {
            validate_column(col, m, n)?;
        }
        if let Some(b) = &blocks {
            let c = groups.num_levels();
            let mut seen = vec![vec![false; c]; b.num_levels()];
            for (&blk, &g) in b.codes().iter().zip(groups.codes()) {
                seen[blk][g] = true;
            }
            for (name, row) in b.names().iter().zip(&seen) {
                if let Some(g) = row.iter().position(|&s| !s) {
                    return Err(Error::data(format!(
                        "block '{name}' contains no unit of group '{}'",
                        groups.names()[g]
                    )));
                }
            }
        }
        Ok(Dataset {
            columns,
            groups,
            strata,
            blocks,
            meta,
        })
    }

    pub fn num_units(&self) -> usize {
        self.groups.len()
    }

    pub fn num_variables(&self) -> usize {
        self.columns.len()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.num_levels()
    }

    pub fn groups(&self) -> &Labels {
        &self.groups
    }

    pub fn strata(&self) -> Option<&Labels> {
        self.strata.as_ref()
    }

    pub fn blocks(&self) -> Option<&Labels> {
        self.blocks.as_ref()
    }

    pub fn meta(&self) -> &[VariableMeta] {
        &self.meta
    }

    pub fn column(&self, k: usize) -> &[Option<f64>] {
        &self.columns[k]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.counts()
    }

    /// Cell id per unit combining stratum and block, used to confine
    /// permutations. `None` when the design has neither.
    pub fn constraint_cells(&self) -> Option<Vec<usize>> {
        match (&self.strata, &self.blocks) {
            (None, None) => None,
            (Some(s), None) => Some(s.codes().to_vec()),
            (None, Some(b)) => Some(b.codes().to_vec()),
            (Some(s), Some(b)) => {
                let nb = b.num_levels();
                Some(
                    s.codes()
                        .iter()
                        .zip(b.codes())
                        .map(|(&si, &bi)| si * nb + bi)
                        .collect(),
                )
            }
        }
    }

    /// Variable domains in order of first appearance; untagged variables
    /// form a domain of their own keyed by `None`.
    pub fn domains(&self) -> Vec<(Option<String>, Vec<usize>)> {
        let mut out: Vec<(Option<String>, Vec<usize>)> = Vec::new();
        for (k, m) in self.meta.iter().enumerate() {
            match out.iter_mut().find(|(d, _)| *d == m.domain) {
                Some((_, cols)) => cols.push(k),
                None => out.push((m.domain.clone(), vec![k])),
            }
        }
        out
    }

    /// Replaces the metadata's preference directions (values untouched).
    pub fn with_directions(mut self, directions: &[Direction]) -> Self {
        for (m, &d) in self.meta.iter_mut().zip(directions) {
            m.direction = d;
        }
        self
    }
}

fn validate_column(col: &[Option<f64>], meta: &VariableMeta, n: usize) -> Result<()> {
    if col.len() != n {
        return Err(Error::data(format!(
            "column '{}' has {} cells but there are {n} units",
            meta.name,
            col.len()
        )));
    }
    match meta.kind {
        VariableKind::Numeric => {
            if let Some(row) = col.iter().position(|v| matches!(v, Some(x) if !x.is_finite())) {
                return Err(Error::data(format!(
                    "row {}, column '{}': non-finite value",
                    row + 1,
                    meta.name
                )));
            }
        }
        VariableKind::Binary => {
            if let Some(row) = col
                .iter()
                .position(|v| matches!(v, Some(x) if *x != 0.0 && *x != 1.0))
            {
                return Err(Error::data(format!(
                    "row {}, column '{}': binary value must be 0 or 1",
                    row + 1,
                    meta.name
                )));
            }
        }
        VariableKind::Ordinal => {
            validate_levels(meta)?;
            let k = meta.levels.len() as f64;
            if let Some(row) = col
                .iter()
                .position(|v| matches!(v, Some(x) if x.fract() != 0.0 || *x < 1.0 || *x > k))
            {
                return Err(Error::data(format!(
                    "row {}, column '{}': category index outside 1..={}",
                    row + 1,
                    meta.name,
                    meta.levels.len()
                )));
            }
        }
    }
    Ok(())
}

fn validate_levels(meta: &VariableMeta) -> Result<()> {
    if meta.levels.len() < 2 {
        return Err(Error::config(format!(
            "ordinal variable '{}' needs at least 2 levels",
            meta.name
        )));
    }
    for (i, l) in meta.levels.iter().enumerate() {
        if meta.levels[..i].contains(l) {
            return Err(Error::config(format!(
                "ordinal variable '{}' repeats level '{l}'",
                meta.name
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// Per-variable entry of the ingestion config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableConfig {
    pub name: String,
    pub kind: VariableKind,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub domain: Option<String>,
    #[serde(default)]
    pub levels: Vec<String>,
    /// "Closer to the target is better": the value y is replaced by
    /// −|y − target| and the direction becomes higher-better.
    #[serde(default)]
    pub target: Option<f64>,
    /// Statistic names for this variable; the kind's default when absent.
    #[serde(default)]
    pub statistics: Option<Vec<String>>,
}

/// Describes how to read the response table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Column holding the population label.
    pub group: String,
    #[serde(default)]
    pub stratum: Option<String>,
    #[serde(default)]
    pub block: Option<String>,
    /// Extra token (besides the empty string) that marks a missing cell.
    #[serde(default)]
    pub missing: Option<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Explicit population order; first-appearance order otherwise.
    #[serde(default)]
    pub group_order: Option<Vec<String>>,
    /// Count column: each row is replicated that many times.
    #[serde(default)]
    pub frequency: Option<String>,
    pub variables: Vec<VariableConfig>,
}

fn default_delimiter() -> char {
    ','
}

impl DatasetConfig {
    pub fn new(group: impl Into<String>, variables: Vec<VariableConfig>) -> Self {
        DatasetConfig {
            group: group.into(),
            stratum: None,
            block: None,
            missing: None,
            delimiter: ',',
            group_order: None,
            frequency: None,
            variables,
        }
    }
}

fn find_column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::config(format!("column '{name}' not found in table header")))
}

fn is_missing(cell: &str, token: Option<&str>) -> bool {
    cell.is_empty() || token.is_some_and(|t| cell == t)
}

fn parse_cell(cell: &str, var: &VariableConfig, row: usize) -> Result<f64> {
    let loc = || format!("row {row}, column '{}'", var.name);
    match var.kind {
        VariableKind::Numeric => {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::data(format!("{}: '{cell}' is not a number", loc())))?;
            if !v.is_finite() {
                return Err(Error::data(format!("{}: non-finite value", loc())));
            }
            Ok(match var.target {
                Some(t) => -(v - t).abs(),
                None => v,
            })
        }
        VariableKind::Binary => match cell {
            "0" | "0.0" | "false" | "FALSE" => Ok(0.0),
            "1" | "1.0" | "true" | "TRUE" => Ok(1.0),
            _ => Err(Error::data(format!(
                "{}: binary value must be 0 or 1, got '{cell}'",
                loc()
            ))),
        },
        VariableKind::Ordinal => var
            .levels
            .iter()
            .position(|l| l == cell)
            .map(|i| (i + 1) as f64)
            .ok_or_else(|| Error::data(format!("{}: unknown ordinal level '{cell}'", loc()))),
    }
}

/// Reads a delimited table with a header row into a validated [`Dataset`].
pub fn load_dataset<R: Read>(table: R, cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.variables.is_empty() {
        return Err(Error::data("no response variables (p = 0)"));
    }
    if !cfg.delimiter.is_ascii() {
        return Err(Error::config("delimiter must be an ASCII character"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(cfg.delimiter as u8)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(table);
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("cannot read header row: {e}")))?
        .clone();

    let group_col = find_column(&headers, &cfg.group)?;
    let stratum_col = cfg.stratum.as_deref().map(|s| find_column(&headers, s)).transpose()?;
    let block_col = cfg.block.as_deref().map(|s| find_column(&headers, s)).transpose()?;
    let freq_col = cfg.frequency.as_deref().map(|s| find_column(&headers, s)).transpose()?;
    let var_cols = cfg
        .variables
        .iter()
        .map(|v| find_column(&headers, &v.name))
        .collect::<Result<Vec<_>>>()?;
    for v in &cfg.variables {
        if v.kind == VariableKind::Ordinal {
            validate_levels(&config_meta(v))?;
        }
        if v.target.is_some() && v.kind != VariableKind::Numeric {
            return Err(Error::config(format!(
                "variable '{}': a target is only meaningful for numeric variables",
                v.name
            )));
        }
    }

    let token = cfg.missing.as_deref();
    let mut groups: Vec<String> = Vec::new();
    let mut strata: Vec<String> = Vec::new();
    let mut blocks: Vec<String> = Vec::new();
    let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::new(); cfg.variables.len()];

    for (i, record) in reader.records().enumerate() {
        // Header is line 1, so the first data row is line 2.
        let row = i + 2;
        let record = record.map_err(|e| Error::data(format!("row {row}: {e}")))?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let label = |c: usize, what: &str| -> Result<String> {
            let v = field(c);
            if is_missing(v, token) {
                Err(Error::data(format!("row {row}: missing {what} label")))
            } else {
                Ok(v.to_string())
            }
        };
        let copies = match freq_col {
            Some(c) => field(c).parse::<usize>().map_err(|_| {
                Error::data(format!(
                    "row {row}, column '{}': frequency must be a non-negative integer",
                    headers.get(c).unwrap_or("")
                ))
            })?,
            None => 1,
        };
        let group = label(group_col, "group")?;
        let stratum = stratum_col.map(|c| label(c, "stratum")).transpose()?;
        let block = block_col.map(|c| label(c, "block")).transpose()?;
        let cells = cfg
            .variables
            .iter()
            .zip(&var_cols)
            .map(|(v, &c)| {
                let cell = field(c);
                if is_missing(cell, token) {
                    Ok(None)
                } else {
                    parse_cell(cell, v, row).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        for _ in 0..copies {
            groups.push(group.clone());
            if let Some(s) = &stratum {
                strata.push(s.clone());
            }
            if let Some(b) = &block {
                blocks.push(b.clone());
            }
            for (col, &cell) in columns.iter_mut().zip(&cells) {
                col.push(cell);
            }
        }
    }

    if groups.is_empty() {
        return Err(Error::data("no units"));
    }

    let groups = match &cfg.group_order {
        Some(order) => {
            let mut codes = Vec::with_capacity(groups.len());
            for (i, g) in groups.iter().enumerate() {
                let c = order.iter().position(|o| o == g).ok_or_else(|| {
                    Error::data(format!("unit {}: group '{g}' not listed in group_order", i + 1))
                })?;
                codes.push(c);
            }
            Labels::new(codes, order.clone())?
        }
        None => Labels::from_strings(&groups),
    };
    let strata = stratum_col.map(|_| Labels::from_strings(&strata));
    let blocks = block_col.map(|_| Labels::from_strings(&blocks));
    let meta = cfg.variables.iter().map(config_meta).collect();
    Dataset::new(columns, groups, strata, blocks, meta)
}

fn config_meta(v: &VariableConfig) -> VariableMeta {
    VariableMeta {
        name: v.name.clone(),
        kind: v.kind,
        direction: if v.target.is_some() {
            Direction::HigherBetter
        } else {
            v.direction
        },
        domain: v.domain.clone(),
        levels: v.levels.clone(),
    }
}

// ---------------------------------------------------------------------------
// Orientation and views
// ---------------------------------------------------------------------------

/// Rewrites every lower-better variable as higher-better.
///
/// Numeric and binary values are negated; ordinal index `c` of `K` becomes
/// `K + 1 − c` and the level list is reversed so cells keep their labels.
pub fn orient(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for (col, meta) in out.columns.iter_mut().zip(out.meta.iter_mut()) {
        if meta.direction == Direction::HigherBetter {
            continue;
        }
        match meta.kind {
            VariableKind::Numeric | VariableKind::Binary => {
                for v in col.iter_mut().flatten() {
                    *v = -*v;
                }
            }
            VariableKind::Ordinal => {
                let k = meta.levels.len() as f64;
                for v in col.iter_mut().flatten() {
                    *v = k + 1.0 - *v;
                }
                meta.levels.reverse();
            }
        }
        meta.direction = Direction::HigherBetter;
    }
    out
}

/// Borrowed subset of a dataset: some units, some variables.
#[derive(Debug, Clone)]
pub struct DataView<'a> {
    pub dataset: &'a Dataset,
    pub units: Vec<usize>,
    pub columns: Vec<usize>,
    pub stratum: Option<String>,
    pub domain: Option<String>,
}

impl<'a> DataView<'a> {
    /// All units and all variables.
    pub fn full(dataset: &'a Dataset) -> Self {
        DataView {
            dataset,
            units: (0..dataset.num_units()).collect(),
            columns: (0..dataset.num_variables()).collect(),
            stratum: None,
            domain: None,
        }
    }

    /// Number of units of each group present in the view.
    pub fn group_sizes(&self) -> Vec<usize> {
        let codes = self.dataset.groups().codes();
        let mut sizes = vec![0; self.dataset.num_groups()];
        for &u in &self.units {
            sizes[codes[u]] += 1;
        }
        sizes
    }
}

/// Splits a dataset into one view per (stratum level × variable domain).
pub fn partition_views(ds: &Dataset) -> Result<Vec<DataView<'_>>> {
    let domains = ds.domains();
    let strata: Vec<(Option<String>, Vec<usize>)> = match ds.strata() {
        None => vec![(None, (0..ds.num_units()).collect())],
        Some(s) => {
            let mut cells = vec![Vec::new(); s.num_levels()];
            for (u, &c) in s.codes().iter().enumerate() {
                cells[c].push(u);
            }
            s.names().iter().cloned().map(Some).zip(cells).collect()
        }
    };
    let mut views = Vec::with_capacity(strata.len() * domains.len());
    for (stratum, units) in &strata {
        let mut present = vec![false; ds.num_groups()];
        for &u in units {
            present[ds.groups().codes()[u]] = true;
        }
        if let Some(g) = present.iter().position(|&p| !p) {
            return Err(Error::data(format!(
                "stratum '{}' lacks group '{}'",
                stratum.as_deref().unwrap_or(""),
                ds.groups().names()[g]
            )));
        }
        for (domain, cols) in &domains {
            views.push(DataView {
                dataset: ds,
                units: units.clone(),
                columns: cols.clone(),
                stratum: stratum.clone(),
                domain: domain.clone(),
            });
        }
    }
    Ok(views)
}
