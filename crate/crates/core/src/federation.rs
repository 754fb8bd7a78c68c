//! Provider export, analyst-side validation, pooling, and model fitting on
//! pooled pseudo-data.
//!
//! Providers run [`export_summaries`] once and ship the JSON it produces.
//! Everything after that point reads only summaries or pseudo-data.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{fit_glm, truncated_aic, FitResult, Family};
use crate::glmm::{fit_mixed, MixedFitResult, MixedModelSpec};
use crate::moments::{
    enumerate_multi_indices, moment_count, partition_subgroups, ProviderSummary, Variable,
    VariableKind, FORMAT_VERSION,
};
use crate::pseudogen::{generate_provider, PseudoTable, SolverOptions};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "MOMENTFED_WORKERS";

const IDENTITY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub k_max: u32,
    pub subgroup_base: usize,
    pub subgroup_cap: usize,
    pub solver: SolverOptions,
    pub formula: Option<String>,
    pub family: Family,
    pub n_agq: usize,
    pub seed: u64,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_max: 4,
            subgroup_base: 250,
            subgroup_cap: 500,
            solver: SolverOptions::default(),
            formula: None,
            family: Family::Gaussian,
            n_agq: 1,
            seed: 0,
            input: None,
            output: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.k_max) {
            return Err(Error::InvalidInput(format!(
                "k_max must be 2, 3 or 4, got {}",
                self.k_max
            )));
        }
        if self.subgroup_base < 2
            || self.subgroup_cap < self.subgroup_base
            || self.subgroup_cap > 2 * self.subgroup_base
        {
            return Err(Error::InvalidInput(format!(
                "subgroup sizes need 2 <= base <= cap <= 2*base, got base {} cap {}",
                self.subgroup_base, self.subgroup_cap
            )));
        }
        if self.n_agq == 0 {
            return Err(Error::InvalidInput("nAGQ must be at least 1".into()));
        }
        self.solver.validate()
    }
}

/// Worker count: explicit value, else `MOMENTFED_WORKERS`, else the number
/// of available cores.
pub fn worker_count(explicit: Option<usize>) -> Result<usize> {
    if let Some(n) = explicit {
        return if n == 0 {
            Err(Error::InvalidInput("worker count must be at least 1".into()))
        } else {
            Ok(n)
        };
    }
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::InvalidInput(format!(
                "{WORKERS_ENV}='{v}' is not a positive integer"
            ))),
        };
    }
    Ok(std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub(crate) fn run_in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

// ---------------------------------------------------------------------------
// Tables

fn is_missing(s: &str) -> bool {
    matches!(s.trim(), "" | "NA" | "NaN" | "nan" | "." | "null" | "NULL")
}

/// A CSV held as strings.
#[derive(Clone, Debug)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        let headers = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("column '{name}' not found")))
    }

    fn require(&self, names: &[&str]) -> Result<Vec<usize>> {
        let missing: Vec<&str> = names
            .iter()
            .copied()
            .filter(|n| !self.headers.iter().any(|h| h == n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::InvalidInput(format!(
                "missing column(s): {}; available: {}",
                missing.join(", "),
                self.headers.join(", ")
            )));
        }
        Ok(names.iter().map(|n| self.column(n).unwrap()).collect())
    }

    /// Keeps rows complete in `cols`; returns the number dropped.
    fn retain_complete(&mut self, cols: &[usize]) -> usize {
        let before = self.rows.len();
        self.rows.retain(|r| cols.iter().all(|&c| r.get(c).is_some_and(|v| !is_missing(v))));
        before - self.rows.len()
    }

    fn numeric(&self, col: usize) -> Option<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r[col].trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect()
    }

    fn levels(&self, col: usize) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r[col].trim()).collect();
        set.into_iter().map(str::to_string).collect()
    }
}

/// Named numeric columns built from a table.
struct Columns {
    names: Vec<String>,
    kinds: Vec<VariableKind>,
    data: Vec<Vec<f64>>,
}

impl Columns {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            kinds: Vec::new(),
            data: Vec::new(),
        }
    }

    fn push(&mut self, name: String, values: Vec<f64>) {
        let binary = values.iter().all(|&v| v == 0.0 || v == 1.0);
        self.kinds.push(if binary { VariableKind::Binary } else { VariableKind::Numeric });
        self.names.push(name);
        self.data.push(values);
    }

    /// Dummy columns `var_level` for every level but the first.
    fn push_dummies(&mut self, table: &Table, col: usize, var: &str) -> Result<()> {
        let levels = table.levels(col);
        if levels.len() < 2 {
            return Err(Error::ZeroVariance {
                column: format!(
                    "{var} (single level '{}', every dummy would be constant)",
                    levels.first().map_or("", String::as_str)
                ),
            });
        }
        for level in &levels[1..] {
            let values = table
                .rows
                .iter()
                .map(|r| (r[col].trim() == level) as u8 as f64)
                .collect();
            self.push(format!("{var}_{level}"), values);
        }
        Ok(())
    }

    fn matrix(&self, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.data.len(), |i, j| self.data[j][rows[i]])
    }
}

// ---------------------------------------------------------------------------
// Provider export

#[derive(Clone, Debug, Default)]
pub struct ExportSpec {
    /// Source columns to export, in order.
    pub variables: Vec<String>,
    /// Columns forced to be dummy-expanded even if they look numeric.
    pub categorical: Vec<String>,
    /// Column whose levels are exported as separate providers.
    pub group_column: Option<String>,
    /// Provider id when there is no group column.
    pub provider_id: Option<String>,
}

/// Reads a provider CSV and summarizes it, one summary per provider.
///
/// Rows with a missing value in any exported column are dropped. Columns
/// that do not parse as numbers, or are listed in `categorical`, are
/// expanded into `var_level` dummies with the first sorted level as
/// reference.
pub fn export_summaries(
    csv_path: &Path,
    spec: &ExportSpec,
    config: &PipelineConfig,
) -> Result<Vec<ProviderSummary>> {
    config.validate()?;
    if spec.variables.is_empty() {
        return Err(Error::InvalidInput("no variables requested for export".into()));
    }
    let mut table = Table::read(csv_path)?;
    let mut wanted: Vec<&str> = spec.variables.iter().map(String::as_str).collect();
    if let Some(g) = &spec.group_column {
        if spec.variables.contains(g) {
            return Err(Error::InvalidInput(format!(
                "group column '{g}' cannot also be an exported variable"
            )));
        }
        wanted.push(g);
    }
    let cols = table.require(&wanted)?;
    let dropped = table.retain_complete(&cols);
    if dropped > 0 {
        info!("{}: dropped {dropped} incomplete row(s)", csv_path.display());
    }
    if table.rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no complete rows left after filtering",
            csv_path.display()
        )));
    }

    let mut columns = Columns::new();
    for (var, &col) in spec.variables.iter().zip(&cols) {
        let forced = spec.categorical.contains(var);
        match table.numeric(col) {
            Some(values) if !forced => {
                if values.iter().all(|&v| v == values[0]) {
                    return Err(Error::ZeroVariance { column: var.clone() });
                }
                columns.push(var.clone(), values);
            }
            _ => columns.push_dummies(&table, col, var)?,
        }
    }
    let variables: Vec<Variable> = columns
        .names
        .iter()
        .zip(&columns.kinds)
        .map(|(name, &kind)| Variable {
            name: name.clone(),
            kind,
        })
        .collect();

    let providers: Vec<(String, Vec<usize>)> = match &spec.group_column {
        Some(_) => {
            let gcol = *cols.last().unwrap();
            table
                .levels(gcol)
                .into_iter()
                .map(|level| {
                    let rows = (0..table.rows.len())
                        .filter(|&i| table.rows[i][gcol].trim() == level)
                        .collect();
                    (level, rows)
                })
                .collect()
        }
        None => {
            let id = spec.provider_id.clone().unwrap_or_else(|| {
                csv_path
                    .file_stem()
                    .map_or("provider".into(), |s| s.to_string_lossy().into_owned())
            });
            vec![(id, (0..table.rows.len()).collect())]
        }
    };

    providers
        .into_iter()
        .map(|(id, rows)| {
            if rows.len() < 2 {
                return Err(Error::InvalidInput(format!(
                    "provider '{id}' has {} complete row(s); at least 2 are needed",
                    rows.len()
                )));
            }
            let data = columns.matrix(&rows);
            let sizes = partition_subgroups(rows.len(), config.subgroup_base, config.subgroup_cap);
            ProviderSummary::from_data(id.clone(), variables.clone(), &data, &sizes, config.k_max)
                .map_err(|e| e.context(format!("provider '{id}'")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Validation(self.violations))
        }
    }
}

/// Structural and moment-identity checks on a received summary. Violations
/// are collected rather than raised.
pub fn validate_summary(summary: &ProviderSummary) -> ValidationReport {
    let mut v = Vec::new();
    let p = summary.p();
    if summary.format_version != FORMAT_VERSION {
        v.push(format!(
            "format_version {} (expected {FORMAT_VERSION})",
            summary.format_version
        ));
    }
    if p == 0 {
        v.push("no variables".into());
    }
    if summary.k_max == 0 {
        v.push("k_max is 0".into());
    }
    if summary.subgroups.is_empty() {
        v.push("no subgroups".into());
    }
    let mut names = BTreeSet::new();
    for var in &summary.variables {
        if !names.insert(&var.name) {
            v.push(format!("duplicate variable '{}'", var.name));
        }
    }
    if !v.is_empty() {
        return ValidationReport { violations: v };
    }

    let expected = enumerate_multi_indices(p, summary.k_max);
    let nu = moment_count(p, summary.k_max);
    for (g, sub) in summary.subgroups.iter().enumerate() {
        let at = |msg: String| format!("subgroup {g}: {msg}");
        if sub.n < 2 {
            v.push(at(format!("n = {} (need >= 2)", sub.n)));
        }
        if sub.means.len() != p || sub.variances.len() != p {
            v.push(at(format!(
                "{} means and {} variances for {p} variables",
                sub.means.len(),
                sub.variances.len()
            )));
            continue;
        }
        if sub.std_moments.len() != nu {
            v.push(at(format!("{} moments (expected {nu})", sub.std_moments.len())));
            continue;
        }
        for (j, (&m, &s2)) in sub.means.iter().zip(&sub.variances).enumerate() {
            if !m.is_finite() || !s2.is_finite() {
                v.push(at(format!("non-finite mean or variance for '{}'", summary.variables[j].name)));
            } else if s2 <= 0.0 {
                v.push(at(format!("variance {s2} for '{}'", summary.variables[j].name)));
            }
        }
        let ratio = (sub.n as f64 - 1.0) / sub.n as f64;
        let mut order_ok = true;
        for (e, r) in sub.std_moments.iter().zip(&expected) {
            if &e.r != r {
                v.push(at(format!("moment index {} out of canonical order (expected {r})", e.r)));
                order_ok = false;
                break;
            }
            if !e.value.is_finite() {
                v.push(at(format!("moment {r} is not finite")));
                continue;
            }
            match r.order() {
                1 if e.value.abs() > IDENTITY_TOL => {
                    v.push(at(format!("moment {r} = {} (standardized mean must be 0)", e.value)));
                }
                2 if r.is_pure() && (e.value - ratio).abs() > IDENTITY_TOL => {
                    v.push(at(format!(
                        "moment {r} = {} (pure second moment must be (n-1)/n = {ratio})",
                        e.value
                    )));
                }
                2 if !r.is_pure() && e.value.abs() > ratio + IDENTITY_TOL => {
                    v.push(at(format!(
                        "moment {r} = {} exceeds (n-1)/n in magnitude",
                        e.value
                    )));
                }
                _ => {}
            }
        }
        if order_ok && summary.k_max >= 2 && sub.std_moments.iter().all(|e| e.value.is_finite()) {
            let m2 = sub.second_order_matrix();
            let min = SymmetricEigen::new(m2)
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            if min < -PSD_TOL {
                v.push(at(format!(
                    "second-order block is not positive semidefinite (min eigenvalue {min:e})"
                )));
            }
        }
    }
    ValidationReport { violations: v }
}

pub fn read_summary(path: &Path) -> Result<ProviderSummary> {
    let text = fs::read_to_string(path)?;
    ProviderSummary::from_json(&text).map_err(|e| e.context(format!("parsing {}", path.display())))
}

/// One summary file, or every `*.json` in a directory in file-name order.
pub fn load_summaries(path: &Path) -> Result<Vec<ProviderSummary>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no .json summaries in {}",
                path.display()
            )));
        }
        files.iter().map(|f| read_summary(f)).collect()
    } else {
        Ok(vec![read_summary(path)?])
    }
}

// ---------------------------------------------------------------------------
// Pooling

/// Validates every summary, checks they describe the same variables, and
/// generates pooled pseudo-data on a pool of `workers` threads.
pub fn generate_pooled(
    summaries: &[ProviderSummary],
    solver: &SolverOptions,
    workers: usize,
) -> Result<PseudoTable> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::InvalidInput("no summaries to pool".into()))?;
    let mut violations = Vec::new();
    let mut ids = BTreeSet::new();
    for s in summaries {
        for msg in validate_summary(s).violations {
            violations.push(format!("provider '{}': {msg}", s.provider_id));
        }
        if !ids.insert(s.provider_id.as_str()) {
            violations.push(format!("provider id '{}' appears twice", s.provider_id));
        }
        if s.variable_names() != first.variable_names() {
            violations.push(format!(
                "provider '{}' exports [{}] but '{}' exports [{}]",
                s.provider_id,
                s.variable_names().join(", "),
                first.provider_id,
                first.variable_names().join(", ")
            ));
        }
    }
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    solver.validate()?;
    let datasets = run_in_pool(workers, || -> Result<Vec<_>> {
        let mut all = Vec::new();
        for s in summaries {
            all.extend(generate_provider(s, solver)?);
        }
        Ok(all)
    })??;
    PseudoTable::from_datasets(first.variable_names(), &datasets)
}

// ---------------------------------------------------------------------------
// Formulas and fitting

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Variable(String),
    /// `C(name)`: dummy-coded factor.
    Categorical(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Formula {
    pub response: String,
    pub terms: Vec<Term>,
}

/// Parses `y ~ a + C(f) + b`. An intercept is always included; a `1` term
/// is accepted and ignored.
pub fn parse_formula(text: &str) -> Result<Formula> {
    let bad = |msg: &str| Error::InvalidInput(format!("formula '{text}': {msg}"));
    let (lhs, rhs) = text.split_once('~').ok_or_else(|| bad("missing '~'"))?;
    let response = lhs.trim();
    if response.is_empty() || response.contains(char::is_whitespace) {
        return Err(bad("the response must be a single column name"));
    }
    let mut terms = Vec::new();
    for raw in rhs.split('+') {
        let t = raw.trim();
        if t.is_empty() {
            return Err(bad("empty term"));
        }
        if t == "1" {
            continue;
        }
        if t == "0" || t.starts_with('-') || t.contains(['*', ':', '^', '|', '-']) {
            return Err(bad(&format!("unsupported term '{t}'; only main effects with an intercept")));
        }
        let term = match t.strip_prefix("C(").and_then(|s| s.strip_suffix(')')) {
            Some(inner) if !inner.trim().is_empty() => Term::Categorical(inner.trim().to_string()),
            Some(_) => return Err(bad("C() needs a column name")),
            None if t.contains(['(', ')', ' ']) => return Err(bad(&format!("cannot parse term '{t}'"))),
            None => Term::Variable(t.to_string()),
        };
        if terms.contains(&term) {
            return Err(bad(&format!("term '{t}' repeated")));
        }
        terms.push(term);
    }
    Ok(Formula {
        response: response.to_string(),
        terms,
    })
}

#[derive(Clone, Debug)]
pub struct FitRequest {
    pub formula: Formula,
    pub family: Family,
    pub random_intercept: Option<String>,
    /// Predictor columns to center and scale before fitting.
    pub standardize: Vec<String>,
    pub n_agq: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFit {
    Mixed(MixedFitResult),
    Fixed(FitResult),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub formula: String,
    pub response: String,
    pub predictors: Vec<String>,
    pub random_intercept: Option<String>,
    pub standardized: Vec<Standardization>,
    pub rows_used: usize,
    pub rows_dropped: usize,
    pub model: ModelFit,
}

impl FitReport {
    pub fn coefficients(&self) -> Vec<f64> {
        match &self.model {
            ModelFit::Mixed(m) => m.beta(),
            ModelFit::Fixed(f) => f.coefficients.clone(),
        }
    }

    /// AIC with response-only terms omitted for soft families.
    pub fn aic(&self) -> f64 {
        match &self.model {
            ModelFit::Mixed(m) => m.aic,
            ModelFit::Fixed(f) => truncated_aic(f),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Design matrix with a leading intercept column, plus response and groups.
struct Design {
    names: Vec<String>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    groups: Option<Vec<String>>,
    standardized: Vec<Standardization>,
    dropped: usize,
}

fn build_design(table: &Table, req: &FitRequest) -> Result<Design> {
    let mut table = table.clone();
    let f = &req.formula;
    let mut needed: Vec<String> = vec![f.response.clone()];
    for t in &f.terms {
        match t {
            Term::Variable(v) => needed.push(v.clone()),
            Term::Categorical(v) => {
                if table.headers.contains(v) {
                    needed.push(v.clone());
                } else {
                    let prefix = format!("{v}_");
                    let dummies: Vec<String> = table
                        .headers
                        .iter()
                        .filter(|h| h.starts_with(&prefix))
                        .cloned()
                        .collect();
                    if dummies.is_empty() {
                        return Err(Error::InvalidInput(format!(
                            "C({v}): no column '{v}' and no dummy columns '{prefix}*'"
                        )));
                    }
                    needed.extend(dummies);
                }
            }
        }
    }
    if let Some(g) = &req.random_intercept {
        needed.push(g.clone());
    }
    let refs: Vec<&str> = needed.iter().map(String::as_str).collect();
    let cols = table.require(&refs)?;
    let dropped = table.retain_complete(&cols);
    if dropped > 0 {
        info!("dropped {dropped} incomplete row(s) before fitting");
    }
    let n = table.rows.len();
    if n == 0 {
        return Err(Error::InvalidInput("no complete rows to fit".into()));
    }

    let numeric = |name: &str| -> Result<Vec<f64>> {
        let col = table.column(name)?;
        table
            .numeric(col)
            .ok_or_else(|| Error::InvalidInput(format!("column '{name}' is not numeric")))
    };

    let mut columns = Columns::new();
    columns.push("(Intercept)".into(), vec![1.0; n]);
    for t in &f.terms {
        match t {
            Term::Variable(v) => columns.push(v.clone(), numeric(v)?),
            Term::Categorical(v) if table.headers.contains(v) => {
                let col = table.column(v)?;
                columns.push_dummies(&table, col, v)?;
            }
            Term::Categorical(v) => {
                let prefix = format!("{v}_");
                for h in table.headers.iter().filter(|h| h.starts_with(&prefix)) {
                    columns.push(h.clone(), numeric(h)?);
                }
            }
        }
    }

    let mut standardized = Vec::new();
    for name in &req.standardize {
        let j = columns.names.iter().position(|c| c == name).ok_or_else(|| {
            Error::InvalidInput(format!("--std {name}: not a predictor in the formula"))
        })?;
        let col = &mut columns.data[j];
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        if !(sd > 0.0) {
            return Err(Error::ZeroVariance { column: name.clone() });
        }
        col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        standardized.push(Standardization {
            name: name.clone(),
            mean,
            sd,
        });
    }

    let all: Vec<usize> = (0..n).collect();
    let groups = req.random_intercept.as_ref().map(|g| {
        let col = table.column(g).unwrap();
        table.rows.iter().map(|r| r[col].trim().to_string()).collect()
    });
    Ok(Design {
        x: columns.matrix(&all),
        names: columns.names,
        y: DVector::from_vec(numeric(&f.response)?),
        groups,
        standardized,
        dropped,
    })
}

/// Fits the requested model to a table (actual or pseudo-data alike).
pub fn fit_table(table: &Table, req: &FitRequest, formula_text: &str) -> Result<FitReport> {
    let d = build_design(table, req)?;
    let rows_used = d.y.len();
    let model = match d.groups {
        Some(groups) => {
            let spec = MixedModelSpec::new(req.family, d.y, d.x, groups, d.names.clone())?;
            ModelFit::Mixed(fit_mixed(&spec, req.n_agq)?)
        }
        None => ModelFit::Fixed(fit_glm(&d.y, &d.x, req.family)?),
    };
    let converged = match &model {
        ModelFit::Mixed(m) => m.converged,
        ModelFit::Fixed(f) => f.converged,
    };
    if !converged {
        warn!("fit of '{formula_text}' did not meet its convergence criterion");
    }
    Ok(FitReport {
        formula: formula_text.to_string(),
        response: req.formula.response.clone(),
        predictors: d.names,
        random_intercept: req.random_intercept.clone(),
        standardized: d.standardized,
        rows_used,
        rows_dropped: d.dropped,
        model,
    })
}

// ---------------------------------------------------------------------------
// Command entry points

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
}

fn file_name_for(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.json")
}

/// `aggregate`: writes one summary to `out`, or with a group column one
/// `<group>.json` per group into the directory `out`. Returns the paths.
pub fn cmd_aggregate(
    input: &Path,
    spec: &ExportSpec,
    config: &PipelineConfig,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let summaries = export_summaries(input, spec, config)?;
    let mut written = Vec::new();
    if spec.group_column.is_some() {
        fs::create_dir_all(out)?;
        let mut seen = BTreeSet::new();
        for s in &summaries {
            let name = file_name_for(&s.provider_id);
            if !seen.insert(name.clone()) {
                return Err(Error::InvalidInput(format!(
                    "group labels collide on file name '{name}'"
                )));
            }
            let path = out.join(name);
            write_file(&path, &s.to_json()?)?;
            written.push(path);
        }
    } else {
        write_file(out, &summaries[0].to_json()?)?;
        written.push(out.to_path_buf());
    }
    for s in &summaries {
        info!(
            "provider '{}': {} rows in {} subgroup(s), {} variables",
            s.provider_id,
            s.total_n(),
            s.subgroups.len(),
            s.p()
        );
    }
    Ok(written)
}

/// `validate`: checks each summary at `path`; returns one report per file.
pub fn cmd_validate(path: &Path) -> Result<Vec<(String, ValidationReport)>> {
    Ok(load_summaries(path)?
        .iter()
        .map(|s| (s.provider_id.clone(), validate_summary(s)))
        .collect())
}

/// `generate`: pools every summary at `summaries` into one pseudo-data CSV.
pub fn cmd_generate(
    summaries: &Path,
    solver: &SolverOptions,
    workers: usize,
    out: &Path,
) -> Result<PseudoTable> {
    let all = load_summaries(summaries)?;
    let table = generate_pooled(&all, solver, workers)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    write_file(out, std::str::from_utf8(&buf).expect("csv output is UTF-8"))?;
    info!("wrote {} pseudo rows from {} provider(s)", table.n_rows(), all.len());
    Ok(table)
}

/// `fit`: fits a formula to a CSV and writes the JSON report.
pub fn cmd_fit(data: &Path, req: &FitRequest, formula_text: &str, out: &Path) -> Result<FitReport> {
    let table = Table::read(data)?;
    let report = fit_table(&table, req, formula_text)?;
    write_file(out, &report.to_json()?)?;
    Ok(report)
}
