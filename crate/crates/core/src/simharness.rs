//! Simulation study: draw datasets from a known Poisson random-intercept
//! model, push each through the pseudo-data pipeline at several moment
//! orders, and compare fits against the truth and against the actual-data
//! fit.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::federation::run_in_pool;
use crate::glm::Family;
use crate::glmm::{fit_mixed, predict, wald_ci, MixedFitResult, MixedModelSpec};
use crate::moments::{partition_subgroups, ProviderSummary, Variable, VariableKind};
use crate::pseudogen::{generate_provider, mix_seed, PseudoTable, SolverOptions};

pub const TRUE_BETA: [f64; 7] = [2.29, -0.30, 0.09, -0.96, -0.81, -0.81, -0.79];
pub const TRUE_SIGMA_U: f64 = 0.48;
pub const X1_MEAN: f64 = 3150.14;
pub const X1_VARIANCE: f64 = 710797.5;
pub const X2_PROB: f64 = 0.56;
pub const X3_PROBS: [f64; 5] = [0.095, 0.127, 0.111, 0.387, 0.280];
pub const NUISANCE_PROB: f64 = 0.5;
pub const MAX_RETRIES: usize = 3;

const CORE_NAMES: [&str; 6] = ["x1", "x2", "x3_2", "x3_3", "x3_4", "x3_5"];
const BLOCK_NAMES: [&str; 5] = ["x1", "x2", "x3", "x4", "x5"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseModel {
    Poisson,
    /// Linear mixed model with this residual standard deviation.
    Gaussian { sigma_e: f64 },
}

#[derive(Clone, Debug)]
pub struct SimSetting {
    pub name: String,
    pub m: usize,
    pub n: usize,
    /// Intercept, x1, x2 and the four x3 dummies.
    pub beta: Vec<f64>,
    pub sigma_u: f64,
    pub response: ResponseModel,
    /// Append the nuisance columns x4 and x5.
    pub nuisance: bool,
    pub k_values: Vec<u32>,
    pub reps: usize,
    pub seed: u64,
    pub n_agq: usize,
    pub solver: SolverOptions,
    pub subgroup_base: usize,
    pub subgroup_cap: usize,
}

impl SimSetting {
    /// One of `m30n100`, `m50n60`, `m100n30`.
    pub fn named(name: &str) -> Result<Self> {
        let (m, n) = match name {
            "m30n100" => (30, 100),
            "m50n60" => (50, 60),
            "m100n30" => (100, 30),
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown setting '{other}'; expected m30n100, m50n60 or m100n30"
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            m,
            n,
            beta: TRUE_BETA.to_vec(),
            sigma_u: TRUE_SIGMA_U,
            response: ResponseModel::Poisson,
            nuisance: true,
            k_values: vec![2, 3, 4],
            reps: 500,
            seed: 0,
            n_agq: 1,
            solver: SolverOptions::default(),
            subgroup_base: 250,
            subgroup_cap: 500,
        })
    }

    pub fn standard_settings() -> Vec<Self> {
        ["m30n100", "m50n60", "m100n30"]
            .iter()
            .map(|s| Self::named(s).unwrap())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.n < 2 {
            return Err(Error::InvalidInput(format!(
                "need m >= 2 groups of n >= 2 rows, got m={} n={}",
                self.m, self.n
            )));
        }
        if self.beta.len() != TRUE_BETA.len() {
            return Err(Error::DimensionMismatch {
                what: "true coefficients",
                expected: TRUE_BETA.len(),
                found: self.beta.len(),
            });
        }
        if !(self.sigma_u >= 0.0) {
            return Err(Error::InvalidInput("sigma_u must be non-negative".into()));
        }
        if self.k_values.is_empty() || self.k_values.iter().any(|k| !(2..=4).contains(k)) {
            return Err(Error::InvalidInput(format!(
                "K values must be drawn from 2, 3, 4; got {:?}",
                self.k_values
            )));
        }
        if self.reps == 0 {
            return Err(Error::InvalidInput("reps must be at least 1".into()));
        }
        self.solver.validate()
    }

    fn family(&self) -> Family {
        match self.response {
            ResponseModel::Poisson => Family::SoftPoisson,
            ResponseModel::Gaussian { .. } => Family::Gaussian,
        }
    }

    pub fn predictor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = CORE_NAMES.iter().map(|s| s.to_string()).collect();
        if self.nuisance {
            names.push("x4".into());
            names.push("x5".into());
        }
        names
    }

    /// Predictor columns of each selectable block; x3 is one block.
    fn blocks(&self) -> Vec<Vec<usize>> {
        let mut b = vec![vec![0], vec![1], vec![2, 3, 4, 5]];
        if self.nuisance {
            b.push(vec![6]);
            b.push(vec![7]);
        }
        b
    }

    /// Every non-empty block subset as a bitmask, in increasing order.
    pub fn candidate_models(&self) -> Vec<u32> {
        (1..(1u32 << self.blocks().len())).collect()
    }

    /// The mask of {x1, x2, x3}.
    pub fn correct_model(&self) -> u32 {
        0b111
    }

    pub fn model_label(&self, mask: u32) -> String {
        BLOCK_NAMES
            .iter()
            .enumerate()
            .filter(|(b, _)| mask >> b & 1 == 1)
            .map(|(_, n)| *n)
            .collect::<Vec<_>>()
            .join("+")
    }

    fn model_columns(&self, mask: u32) -> Vec<usize> {
        self.blocks()
            .into_iter()
            .enumerate()
            .filter(|(b, _)| mask >> b & 1 == 1)
            .flat_map(|(_, cols)| cols)
            .collect()
    }
}

/// One simulated corpus. `x` holds predictors only (no intercept); `x1` is
/// already standardized.
#[derive(Clone, Debug, PartialEq)]
pub struct SimDataset {
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub predictor_names: Vec<String>,
    pub groups: Vec<String>,
}

impl SimDataset {
    fn group_label(g: usize, m: usize) -> String {
        let width = (m - 1).to_string().len();
        format!("g{g:0width$}")
    }

    /// Row indices of each group, in label order.
    fn group_rows(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, g) in self.groups.iter().enumerate() {
            match out.iter_mut().find(|(l, _)| l == g) {
                Some((_, rows)) => rows.push(i),
                None => out.push((g.clone(), vec![i])),
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// `[y, predictors]` for the given rows.
    fn block(&self, rows: &[usize]) -> DMatrix<f64> {
        let p = self.x.ncols();
        DMatrix::from_fn(rows.len(), p + 1, |i, j| {
            if j == 0 {
                self.y[rows[i]]
            } else {
                self.x[(rows[i], j - 1)]
            }
        })
    }

    /// First group with a constant column, if any.
    pub fn degenerate_group(&self) -> Option<String> {
        self.group_rows().into_iter().find_map(|(label, rows)| {
            let b = self.block(&rows);
            let constant = b
                .column_iter()
                .any(|c| c.iter().all(|&v| v == c[0]));
            constant.then_some(label)
        })
    }
}

/// Draws one dataset from the true model.
pub fn simulate_dataset(setting: &SimSetting, seed: u64) -> SimDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let x1_dist = Normal::new(X1_MEAN, X1_VARIANCE.sqrt()).unwrap();
    let names = setting.predictor_names();
    let rows = setting.m * setting.n;
    let mut x = DMatrix::zeros(rows, names.len());
    let mut y = Vec::with_capacity(rows);
    let mut groups = Vec::with_capacity(rows);
    let b = &setting.beta;
    for g in 0..setting.m {
        let u = setting.sigma_u * std.sample(&mut rng);
        let label = SimDataset::group_label(g, setting.m);
        for j in 0..setting.n {
            let i = g * setting.n + j;
            let x1 = (x1_dist.sample(&mut rng) - X1_MEAN) / X1_VARIANCE.sqrt();
            let x2 = (rng.random::<f64>() < X2_PROB) as u8 as f64;
            let r: f64 = rng.random();
            let mut cat = 0;
            let mut acc = X3_PROBS[0];
            while r >= acc && cat < X3_PROBS.len() - 1 {
                cat += 1;
                acc += X3_PROBS[cat];
            }
            x[(i, 0)] = x1;
            x[(i, 1)] = x2;
            for d in 1..5 {
                x[(i, 1 + d)] = (cat == d) as u8 as f64;
            }
            if setting.nuisance {
                x[(i, 6)] = std.sample(&mut rng);
                x[(i, 7)] = (rng.random::<f64>() < NUISANCE_PROB) as u8 as f64;
            }
            let mut eta = b[0] + b[1] * x1 + b[2] * x2 + u;
            if cat > 0 {
                eta += b[2 + cat];
            }
            y.push(match setting.response {
                ResponseModel::Poisson => Poisson::new(eta.exp()).unwrap().sample(&mut rng),
                ResponseModel::Gaussian { sigma_e } => eta + sigma_e * std.sample(&mut rng),
            });
            groups.push(label.clone());
        }
    }
    SimDataset {
        y,
        x,
        predictor_names: names,
        groups,
    }
}

fn replicate_seed(setting: &SimSetting, rep: usize, attempt: usize) -> u64 {
    mix_seed(mix_seed(setting.seed, rep as u64), attempt as u64)
}

/// Draws the dataset for replicate `rep`, redrawing with the next sub-seed
/// when some group has a constant column. Returns the dataset and the
/// number of redraws.
pub fn simulate_replicate_dataset(setting: &SimSetting, rep: usize) -> Result<(SimDataset, usize)> {
    for attempt in 0..=MAX_RETRIES {
        let data = simulate_dataset(setting, replicate_seed(setting, rep, attempt));
        match data.degenerate_group() {
            None => return Ok((data, attempt)),
            Some(g) => warn!(
                "replicate {rep}: group {g} has a constant column (draw {attempt}); redrawing"
            ),
        }
    }
    Err(Error::InvalidInput(format!(
        "replicate {rep}: still degenerate after {MAX_RETRIES} redraws"
    )))
}

/// One provider summary per group, columns `[y, predictors]`.
pub fn group_summaries(setting: &SimSetting, data: &SimDataset, k_max: u32) -> Result<Vec<ProviderSummary>> {
    let mut vars = vec![Variable {
        name: "y".into(),
        kind: VariableKind::Numeric,
    }];
    for (j, name) in data.predictor_names.iter().enumerate() {
        let binary = data.x.column(j).iter().all(|&v| v == 0.0 || v == 1.0);
        vars.push(Variable {
            name: name.clone(),
            kind: if binary { VariableKind::Binary } else { VariableKind::Numeric },
        });
    }
    data.group_rows()
        .into_iter()
        .map(|(label, rows)| {
            let block = data.block(&rows);
            let sizes = partition_subgroups(rows.len(), setting.subgroup_base, setting.subgroup_cap);
            ProviderSummary::from_data(label, vars.clone(), &block, &sizes, k_max)
        })
        .collect()
}

/// Pseudo-data for every group at moment order `k_max`.
pub fn pseudo_dataset(setting: &SimSetting, data: &SimDataset, k_max: u32, seed: u64) -> Result<SimDataset> {
    let summaries = group_summaries(setting, data, k_max)?;
    let opts = SolverOptions {
        seed,
        ..setting.solver.clone()
    };
    let mut datasets = Vec::new();
    for s in &summaries {
        datasets.extend(generate_provider(s, &opts)?);
    }
    let mut names = vec!["y".to_string()];
    names.extend(data.predictor_names.iter().cloned());
    let table = PseudoTable::from_datasets(names, &datasets)?;
    let p = data.x.ncols();
    Ok(SimDataset {
        y: table.values.column(0).iter().cloned().collect(),
        x: table.values.columns(1, p).into_owned(),
        predictor_names: data.predictor_names.clone(),
        groups: table.group_ids,
    })
}

fn design(data: &SimDataset, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(data.x.nrows(), cols.len() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            data.x[(i, cols[j - 1])]
        }
    })
}

fn fit_model(setting: &SimSetting, data: &SimDataset, mask: u32) -> Result<MixedFitResult> {
    let cols = setting.model_columns(mask);
    let mut names = vec!["(Intercept)".to_string()];
    names.extend(cols.iter().map(|&c| data.predictor_names[c].clone()));
    let spec = MixedModelSpec::new(
        setting.family(),
        DVector::from_column_slice(&data.y),
        design(data, &cols),
        data.groups.clone(),
        names,
    )?;
    fit_mixed(&spec, setting.n_agq)
}

/// Fits on one dataset: the correct model's estimates and intervals, the
/// AIC of every candidate, and predictions of the AIC-selected model at the
/// actual design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitBundle {
    pub beta: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
    pub sigma_u: f64,
    pub residual_sigma: Option<f64>,
    /// Truncated AIC per candidate, in [`SimSetting::candidate_models`] order.
    pub aics: Vec<f64>,
    pub selected: u32,
    pub predictions: Vec<f64>,
}

fn fit_bundle(setting: &SimSetting, data: &SimDataset, actual: &SimDataset) -> Result<FitBundle> {
    let models = setting.candidate_models();
    let mut fits = Vec::with_capacity(models.len());
    for &mask in &models {
        let fit = fit_model(setting, data, mask)
            .map_err(|e| e.context(format!("model {}", setting.model_label(mask))))?;
        fits.push(fit);
    }
    let aics: Vec<f64> = fits.iter().map(|f| f.aic).collect();
    let best = (0..aics.len())
        .min_by(|&a, &b| aics[a].total_cmp(&aics[b]))
        .expect("at least one model");
    let selected = models[best];
    let correct = &fits[models.iter().position(|&m| m == setting.correct_model()).unwrap()];
    let predictions = predict(
        &fits[best],
        &design(actual, &setting.model_columns(selected)),
        &actual.groups,
    )?;
    Ok(FitBundle {
        beta: correct.beta(),
        std_errors: correct.standard_errors(),
        ci: wald_ci(correct, 0.95)?,
        sigma_u: correct.sigma_u,
        residual_sigma: correct.residual_sigma,
        aics,
        selected,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoOutcome {
    pub k: u32,
    pub bundle: std::result::Result<FitBundle, String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub rep: usize,
    pub redraws: usize,
    pub actual: std::result::Result<FitBundle, String>,
    pub pseudo: Vec<PseudoOutcome>,
}

/// Runs the pipeline for every K on one dataset. Stage failures are stored,
/// not raised.
pub fn run_replicate(setting: &SimSetting, rep: usize, data: &SimDataset, redraws: usize) -> ReplicateResult {
    let actual = fit_bundle(setting, data, data).map_err(|e| e.to_string());
    let pseudo = setting
        .k_values
        .iter()
        .map(|&k| {
            let t = Instant::now();
            let seed = mix_seed(replicate_seed(setting, rep, redraws), 1000 + k as u64);
            let bundle = pseudo_dataset(setting, data, k, seed)
                .and_then(|ps| fit_bundle(setting, &ps, data))
                .map_err(|e| e.to_string());
            if let Err(e) = &bundle {
                warn!("replicate {rep}, K={k}: {e}");
            }
            PseudoOutcome {
                k,
                bundle,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect();
    if let Err(e) = &actual {
        warn!("replicate {rep}, actual data: {e}");
    }
    ReplicateResult {
        rep,
        redraws,
        actual,
        pseudo,
    }
}

/// All replicates on a pool of `workers` threads, ordered by replicate.
pub fn run_study(setting: &SimSetting, workers: usize) -> Result<Vec<ReplicateResult>> {
    setting.validate()?;
    let results = run_in_pool(workers, || {
        (0..setting.reps)
            .into_par_iter()
            .map(|rep| {
                let t = Instant::now();
                let out = match simulate_replicate_dataset(setting, rep) {
                    Ok((data, redraws)) => run_replicate(setting, rep, &data, redraws),
                    Err(e) => ReplicateResult {
                        rep,
                        redraws: MAX_RETRIES,
                        actual: Err(e.to_string()),
                        pseudo: Vec::new(),
                    },
                };
                info!("{} replicate {rep} done in {:.1?}", setting.name, t.elapsed());
                out
            })
            .collect::<Vec<_>>()
    })?;
    Ok(results)
}

// ---------------------------------------------------------------------------
// Reporting

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub setting: String,
    pub data: String,
    pub coefficient: String,
    pub truth: f64,
    pub n_reps: usize,
    pub mean_rel_bias: f64,
    pub median_rel_bias: f64,
    pub sd_rel_bias: f64,
    pub q025_rel_bias: f64,
    pub q975_rel_bias: f64,
    /// Mean |estimate - actual-data estimate|; empty for the actual data.
    pub mean_abs_diff_vs_actual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub setting: String,
    pub data: String,
    pub coefficient: String,
    pub truth: f64,
    pub n_reps: usize,
    pub coverage: f64,
    pub mean_ci_lower: f64,
    pub mean_ci_upper: f64,
    /// Central 95% range of the empirical coverage if the true rate were 0.95.
    pub nominal_band_lower: f64,
    pub nominal_band_upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub setting: String,
    pub data: String,
    pub n_reps: usize,
    pub n_failed: usize,
    pub prop_correct: f64,
    /// Share of replicates selecting the same model as the actual data,
    /// over replicates where both fits succeeded.
    pub prop_same_as_actual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub setting: String,
    pub data: String,
    pub n_reps: usize,
    pub mean_abs_diff: f64,
    pub mean_rel_diff: f64,
    pub max_abs_diff: f64,
    pub mean_correlation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub bias: Vec<BiasRow>,
    pub coverage: Vec<CoverageRow>,
    pub selection: Vec<SelectionRow>,
    pub predictions: Vec<PredictionRow>,
    pub warnings: Vec<String>,
}

/// Central `level` range `[lo, hi]` of a Binomial(`n`, `p`) count: `lo` is
/// the smallest count with `P(X <= lo) > α/2`, `hi` the largest with
/// `P(X >= hi) > α/2`.
pub fn binomial_band(n: usize, p: f64, level: f64) -> (usize, usize) {
    let tail = (1.0 - level) / 2.0;
    let dist = Binomial::new(p, n as u64).expect("valid binomial");
    let mut lo = 0;
    while lo < n && dist.cdf(lo as u64) <= tail {
        lo += 1;
    }
    let mut hi = n;
    while hi > 0 && 1.0 - dist.cdf(hi as u64 - 1) <= tail {
        hi -= 1;
    }
    (lo, hi)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn data_labels(setting: &SimSetting) -> Vec<(String, Option<u32>)> {
    let mut out = vec![("actual".to_string(), None)];
    out.extend(setting.k_values.iter().map(|&k| (format!("ps{k}"), Some(k))));
    out
}

fn bundle_for(r: &ReplicateResult, k: Option<u32>) -> Option<&FitBundle> {
    match k {
        None => r.actual.as_ref().ok(),
        Some(k) => r.pseudo.iter().find(|o| o.k == k)?.bundle.as_ref().ok(),
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Folds replicate results, in replicate order, into the report tables.
pub fn aggregate_report(setting: &SimSetting, results: &[ReplicateResult]) -> SimulationReport {
    let mut report = SimulationReport::default();
    let mut coef_names = vec!["(Intercept)".to_string()];
    coef_names.extend(CORE_NAMES.iter().map(|s| s.to_string()));
    let correct = setting.correct_model();

    for (label, k) in data_labels(setting) {
        let ok: Vec<(&ReplicateResult, &FitBundle)> = results
            .iter()
            .filter_map(|r| bundle_for(r, k).map(|b| (r, b)))
            .collect();
        let failed = results.len() - ok.len();
        if ok.is_empty() {
            let msg = format!("{} {label}: no successful replicate; cell omitted", setting.name);
            warn!("{msg}");
            report.warnings.push(msg);
            report.selection.push(SelectionRow {
                setting: setting.name.clone(),
                data: label,
                n_reps: 0,
                n_failed: failed,
                prop_correct: f64::NAN,
                prop_same_as_actual: None,
            });
            continue;
        }
        let n = ok.len();

        let mut targets: Vec<(String, f64, Box<dyn Fn(&FitBundle) -> f64>)> = coef_names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                (
                    name.clone(),
                    setting.beta[j],
                    Box::new(move |b: &FitBundle| b.beta[j]) as Box<dyn Fn(&FitBundle) -> f64>,
                )
            })
            .collect();
        targets.push(("sigma_u".into(), setting.sigma_u, Box::new(|b: &FitBundle| b.sigma_u)));
        for (name, truth, get) in &targets {
            let mut rel: Vec<f64> = ok
                .iter()
                .map(|(_, b)| (get(b) - truth) / truth.abs())
                .collect();
            let mean = rel.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (rel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                f64::NAN
            };
            rel.sort_by(f64::total_cmp);
            let diffs: Vec<f64> = ok
                .iter()
                .filter_map(|(r, b)| r.actual.as_ref().ok().map(|a| (get(b) - get(a)).abs()))
                .collect();
            report.bias.push(BiasRow {
                setting: setting.name.clone(),
                data: label.clone(),
                coefficient: name.clone(),
                truth: *truth,
                n_reps: n,
                mean_rel_bias: mean,
                median_rel_bias: quantile(&rel, 0.5),
                sd_rel_bias: sd,
                q025_rel_bias: quantile(&rel, 0.025),
                q975_rel_bias: quantile(&rel, 0.975),
                mean_abs_diff_vs_actual: (k.is_some() && !diffs.is_empty())
                    .then(|| diffs.iter().sum::<f64>() / diffs.len() as f64),
            });
        }

        let (band_lo, band_hi) = binomial_band(n, 0.95, 0.95);
        for (j, name) in coef_names.iter().enumerate() {
            let truth = setting.beta[j];
            let covered = ok
                .iter()
                .filter(|(_, b)| b.ci[j].0 <= truth && truth <= b.ci[j].1)
                .count();
            report.coverage.push(CoverageRow {
                setting: setting.name.clone(),
                data: label.clone(),
                coefficient: name.clone(),
                truth,
                n_reps: n,
                coverage: covered as f64 / n as f64,
                mean_ci_lower: ok.iter().map(|(_, b)| b.ci[j].0).sum::<f64>() / n as f64,
                mean_ci_upper: ok.iter().map(|(_, b)| b.ci[j].1).sum::<f64>() / n as f64,
                nominal_band_lower: band_lo as f64 / n as f64,
                nominal_band_upper: band_hi as f64 / n as f64,
            });
        }

        let paired: Vec<(&FitBundle, &FitBundle)> = ok
            .iter()
            .filter_map(|(r, b)| r.actual.as_ref().ok().map(|a| (*b, a)))
            .collect();
        report.selection.push(SelectionRow {
            setting: setting.name.clone(),
            data: label.clone(),
            n_reps: n,
            n_failed: failed,
            prop_correct: ok.iter().filter(|(_, b)| b.selected == correct).count() as f64 / n as f64,
            prop_same_as_actual: (!paired.is_empty()).then(|| {
                paired.iter().filter(|(b, a)| b.selected == a.selected).count() as f64
                    / paired.len() as f64
            }),
        });

        if k.is_some() && !paired.is_empty() {
            let mut abs = 0.0;
            let mut rel = 0.0;
            let mut max: f64 = 0.0;
            let mut corr = 0.0;
            let mut count = 0usize;
            for (b, a) in &paired {
                for (pb, pa) in b.predictions.iter().zip(&a.predictions) {
                    let d = (pb - pa).abs();
                    abs += d;
                    rel += d / pa.abs().max(f64::MIN_POSITIVE);
                    max = max.max(d);
                    count += 1;
                }
                corr += correlation(&b.predictions, &a.predictions);
            }
            report.predictions.push(PredictionRow {
                setting: setting.name.clone(),
                data: label.clone(),
                n_reps: paired.len(),
                mean_abs_diff: abs / count as f64,
                mean_rel_diff: rel / count as f64,
                max_abs_diff: max,
                mean_correlation: corr / paired.len() as f64,
            });
        }
    }
    report
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl SimulationReport {
    /// Writes `bias.csv`, `coverage.csv`, `selection.csv` and
    /// `predictions.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_rows(
            &dir.join("bias.csv"),
            &self.bias,
            &["setting", "data", "coefficient", "truth", "n_reps", "mean_rel_bias", "median_rel_bias",
              "sd_rel_bias", "q025_rel_bias", "q975_rel_bias", "mean_abs_diff_vs_actual"],
        )?;
        write_rows(
            &dir.join("coverage.csv"),
            &self.coverage,
            &["setting", "data", "coefficient", "truth", "n_reps", "coverage", "mean_ci_lower",
              "mean_ci_upper", "nominal_band_lower", "nominal_band_upper"],
        )?;
        write_rows(
            &dir.join("selection.csv"),
            &self.selection,
            &["setting", "data", "n_reps", "n_failed", "prop_correct", "prop_same_as_actual"],
        )?;
        write_rows(
            &dir.join("predictions.csv"),
            &self.predictions,
            &["setting", "data", "n_reps", "mean_abs_diff", "mean_rel_diff", "max_abs_diff",
              "mean_correlation"],
        )?;
        Ok(())
    }
}

/// `simulate`: runs the study and writes the report CSVs plus the raw
/// per-replicate results as `replicates.json`.
pub fn cmd_simulate(setting: &SimSetting, workers: usize, out: &Path) -> Result<SimulationReport> {
    let results = run_study(setting, workers)?;
    let report = aggregate_report(setting, &results);
    report.write_csvs(out)?;
    let mut json = serde_json::to_string_pretty(&results)?;
    json.push('\n');
    fs::write(out.join("replicates.json"), json)?;
    Ok(report)
}
