//! Moment-matched pseudo-data.
//!
//! For each subgroup summary, `n` unconstrained pseudo-observations of the `p`
//! standardized variables are found by driving the moment residuals to zero
//! with Levenberg-Marquardt, then mapped back to the original scale.

pub mod lm;
mod twopoint;

use std::io::Write;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::moments::{raw_moments, MultiIndex, ProviderSummary, SubgroupSummary};
pub use lm::{minimize, levenberg_marquardt, Diagnostics, LeastSquaresProblem, Linearization, SolverOptions};

/// Residuals `moment_r(x) - target_r` for a flattened n x p pseudo matrix.
///
/// The unknown vector is stored column-major: entry `j * n + i` is
/// observation `i` of variable `j`.
#[derive(Clone, Debug)]
pub struct MomentResidualProblem {
    indices: Vec<MultiIndex>,
    targets: Vec<f64>,
    n: usize,
    p: usize,
    /// For each variable, the moment rows whose exponent on it is positive.
    rows_by_var: Vec<Vec<usize>>,
}

impl MomentResidualProblem {
    pub fn new(indices: Vec<MultiIndex>, targets: Vec<f64>, n: usize) -> Result<Self> {
        if indices.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                what: "moment targets",
                expected: indices.len(),
                found: targets.len(),
            });
        }
        let p = indices.first().map(MultiIndex::len).unwrap_or(0);
        if p == 0 || n == 0 {
            return Err(Error::InvalidInput("empty moment problem".into()));
        }
        if indices.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidInput("multi-indices disagree on p".into()));
        }
        let rows_by_var = (0..p)
            .map(|j| {
                (0..indices.len())
                    .filter(|&k| indices[k].exponents()[j] > 0)
                    .collect()
            })
            .collect();
        Ok(Self {
            indices,
            targets,
            n,
            p,
            rows_by_var,
        })
    }

    pub fn from_summary(summary: &SubgroupSummary) -> Result<Self> {
        Self::new(summary.indices(), summary.targets(), summary.n)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of matched moments ν.
    pub fn nu(&self) -> usize {
        self.indices.len()
    }

    pub fn is_underdetermined(&self) -> bool {
        self.n * self.p > self.nu()
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n * self.p {
            return Err(Error::DimensionMismatch {
                what: "pseudo data vector",
                expected: self.n * self.p,
                found: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pseudo data".into()));
        }
        Ok(())
    }

    fn as_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.p, x.as_slice())
    }

    /// Powers `x_ij^k` for `k = 0..=k_max`, laid out `[j][k * n + i]`.
    fn powers(&self, x: &DVector<f64>) -> Vec<Vec<f64>> {
        let k_max = self.indices.iter().map(MultiIndex::order).max().unwrap_or(0) as usize;
        let n = self.n;
        (0..self.p)
            .map(|j| {
                let col = &x.as_slice()[j * n..(j + 1) * n];
                let mut pw = vec![1.0; (k_max + 1) * n];
                for k in 1..=k_max {
                    for i in 0..n {
                        pw[k * n + i] = pw[(k - 1) * n + i] * col[i];
                    }
                }
                pw
            })
            .collect()
    }

    /// `(r_j / n) x_ij^(r_j - 1) prod_{k != j} x_ik^r_k` for every row `r`
    /// touching variable `j`; one `rows_j x n` block per variable.
    fn jacobian_blocks(&self, x: &DVector<f64>, vars: &[usize]) -> Vec<DMatrix<f64>> {
        let pw = self.powers(x);
        let n = self.n;
        let inv_n = 1.0 / n as f64;
        vars.iter()
            .map(|&j| {
                let rows = &self.rows_by_var[j];
                let mut block = DMatrix::zeros(rows.len(), n);
                let mut acc = vec![0.0; n];
                for (a, &k) in rows.iter().enumerate() {
                    let r = &self.indices[k];
                    let rj = r.exponents()[j];
                    let scale = rj as f64 * inv_n;
                    let own = &pw[j][(rj as usize - 1) * n..rj as usize * n];
                    acc.iter_mut().zip(own).for_each(|(c, v)| *c = scale * v);
                    for (v, e) in r.terms().filter(|&(v, _)| v != j) {
                        let other = &pw[v][e as usize * n..(e as usize + 1) * n];
                        acc.iter_mut().zip(other).for_each(|(c, o)| *c *= o);
                    }
                    for (i, c) in acc.iter().enumerate() {
                        block[(a, i)] = *c;
                    }
                }
                block
            })
            .collect()
    }

    /// Dense ν x np Jacobian.
    pub fn dense_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(LeastSquaresProblem::jacobian(self, x)?.to_dense())
    }

    /// Sum of squared moment differences.
    pub fn ssd(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(LeastSquaresProblem::residuals(self, x)?.norm_squared())
    }
}

impl LeastSquaresProblem for MomentResidualProblem {
    type Jacobian = MomentJacobian;

    fn n_residuals(&self) -> usize {
        self.nu()
    }

    fn n_params(&self) -> usize {
        self.n * self.p
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        let m = raw_moments(&self.as_matrix(x), &self.indices);
        let r = DVector::from_iterator(
            self.nu(),
            m.iter().zip(&self.targets).map(|(a, b)| a - b),
        );
        if r.iter().all(|v| v.is_finite()) {
            Ok(r)
        } else {
            Err(Error::NonFinite("moment residuals".into()))
        }
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<MomentJacobian> {
        self.check(x)?;
        let all: Vec<usize> = (0..self.p).collect();
        Ok(self.partial_jacobian(x, &all))
    }
}

impl MomentResidualProblem {
    /// Jacobian restricted to the columns of the variables in `vars`.
    fn partial_jacobian(&self, x: &DVector<f64>, vars: &[usize]) -> MomentJacobian {
        MomentJacobian {
            rows_by_var: vars.iter().map(|&j| self.rows_by_var[j].clone()).collect(),
            nu: self.nu(),
            n: self.n,
            blocks: self.jacobian_blocks(x, vars),
        }
    }
}

/// Positions in two ascending row lists where they hold the same row.
fn shared_positions(a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let (mut i, mut j) = (0, 0);
    let (mut pa, mut pb) = (Vec::new(), Vec::new());
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                pa.push(i);
                pb.push(j);
                i += 1;
                j += 1;
            }
        }
    }
    (pa, pb)
}

/// Block-sparse moment Jacobian: variable `j` only touches the rows whose
/// exponent on `j` is positive.
pub struct MomentJacobian {
    rows_by_var: Vec<Vec<usize>>,
    nu: usize,
    n: usize,
    blocks: Vec<DMatrix<f64>>,
}

impl MomentJacobian {
    fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut dense = DMatrix::zeros(self.nu, n * self.blocks.len());
        for (j, block) in self.blocks.iter().enumerate() {
            for (a, &row) in self.rows_by_var[j].iter().enumerate() {
                for i in 0..n {
                    dense[(row, j * n + i)] = block[(a, i)];
                }
            }
        }
        dense
    }
}

impl Linearization for MomentJacobian {
    fn row_gram(&self) -> DMatrix<f64> {
        let mut gram = DMatrix::zeros(self.nu, self.nu);
        for (rows, block) in self.rows_by_var.iter().zip(&self.blocks) {
            let g = block * block.transpose();
            for (a, &ra) in rows.iter().enumerate() {
                for (b, &rb) in rows.iter().enumerate() {
                    gram[(ra, rb)] += g[(a, b)];
                }
            }
        }
        gram
    }

    fn col_gram(&self) -> DMatrix<f64> {
        let n = self.n;
        let q = self.blocks.len();
        let mut gram = DMatrix::zeros(n * q, n * q);
        for a in 0..q {
            let at = self.blocks[a].transpose();
            let g = &at * &self.blocks[a];
            gram.view_mut((a * n, a * n), (n, n)).copy_from(&g);
            for b in a + 1..q {
                let (pa, pb) = shared_positions(&self.rows_by_var[a], &self.rows_by_var[b]);
                if pa.is_empty() {
                    continue;
                }
                let g = self.blocks[a].select_rows(pa.iter()).transpose()
                    * self.blocks[b].select_rows(pb.iter());
                gram.view_mut((a * n, b * n), (n, n)).copy_from(&g);
                gram.view_mut((b * n, a * n), (n, n)).copy_from(&g.transpose());
            }
        }
        gram
    }

    fn tr_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut out = DVector::zeros(n * self.blocks.len());
        for (j, (rows, block)) in self.rows_by_var.iter().zip(&self.blocks).enumerate() {
            let sub = DVector::from_iterator(rows.len(), rows.iter().map(|&r| v[r]));
            let part = block.transpose() * sub;
            out.rows_mut(j * n, n).copy_from(&part);
        }
        out
    }
}

/// Residual vector of `problem` at `x`, in canonical index order.
pub fn residuals(problem: &MomentResidualProblem, x: &DVector<f64>) -> Result<DVector<f64>> {
    LeastSquaresProblem::residuals(problem, x)
}

/// Dense ν x np Jacobian of `problem` at `x`.
pub fn jacobian(problem: &MomentResidualProblem, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    problem.dense_jacobian(x)
}

/// Pseudo-data for one subgroup.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoDataset {
    /// n x p, original scale.
    pub values: DMatrix<f64>,
    pub group_id: String,
    pub subgroup_index: usize,
    pub achieved_max_residual: f64,
    pub solver_iterations: usize,
}

/// SplitMix64 finalizer; used to derive independent sub-seeds.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, stable across platforms and toolchains.
pub(crate) fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn destandardize(summary: &SubgroupSummary, z: &DVector<f64>) -> DMatrix<f64> {
    let n = summary.n;
    let sds = summary.std_devs();
    DMatrix::from_fn(n, summary.p(), |i, j| summary.means[j] + sds[j] * z[j * n + i])
}

fn warn_if_determined(problem: &MomentResidualProblem) {
    if !problem.is_underdetermined() {
        warn!(
            "np = {} does not exceed the {} matched moments; pseudo-data may reproduce the source rows",
            problem.n * problem.p,
            problem.nu()
        );
    }
}

/// Solves from a given standardized starting matrix (n x p), no restarts.
pub fn generate_from_start(
    summary: &SubgroupSummary,
    start: &DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<PseudoDataset> {
    let problem = MomentResidualProblem::from_summary(summary)?;
    warn_if_determined(&problem);
    let x0 = DVector::from_column_slice(start.as_slice());
    let (x, diag) = lm::minimize(&problem, x0, opts)?;
    if !diag.converged() {
        return Err(Error::ConvergenceFailure {
            attempts: 1,
            best_residual: diag.max_residual,
        });
    }
    Ok(PseudoDataset {
        values: destandardize(summary, &x),
        group_id: String::new(),
        subgroup_index: 0,
        achieved_max_residual: diag.max_residual,
        solver_iterations: diag.iterations,
    })
}

/// Synthesizes pseudo-data for one subgroup, retrying with fresh seeds up to
/// `opts.restarts` times.
///
/// The start is seeded standard normal draws, except that columns whose
/// moments pin them to two values (binary variables when `k_max >= 4`) start
/// on that support with matching joint counts, and the remaining columns are
/// first solved with that block held fixed.
pub fn generate_pseudo_data(summary: &SubgroupSummary, opts: &SolverOptions) -> Result<PseudoDataset> {
    let problem = MomentResidualProblem::from_summary(summary)?;
    if summary.variances.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::ZeroVariance {
            column: "summary variance".into(),
        });
    }
    warn_if_determined(&problem);
    let np = problem.n_params();
    let mut best = f64::INFINITY;
    let mut iterations = 0;
    for attempt in 0..=opts.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, attempt as u64));
        let x0 = match twopoint::structured_start(summary, &problem, &mut rng, opts) {
            Ok(Some((x, diag))) => {
                iterations += diag.iterations;
                x
            }
            Ok(None) | Err(Error::NonFinite(_)) => {
                DVector::from_iterator(np, (0..np).map(|_| StandardNormal.sample(&mut rng)))
            }
            Err(e) => return Err(e),
        };
        let (x, diag) = match lm::minimize(&problem, x0, opts) {
            Ok(out) => out,
            Err(Error::NonFinite(_)) => continue,
            Err(e) => return Err(e),
        };
        iterations += diag.iterations;
        debug!(
            "attempt {attempt}: {:?} after {} iterations, max residual {:e}",
            diag.termination, diag.iterations, diag.max_residual
        );
        if diag.converged() {
            return Ok(PseudoDataset {
                values: destandardize(summary, &x),
                group_id: String::new(),
                subgroup_index: 0,
                achieved_max_residual: diag.max_residual,
                solver_iterations: iterations,
            });
        }
        best = best.min(diag.max_residual);
    }
    Err(Error::ConvergenceFailure {
        attempts: opts.restarts + 1,
        best_residual: best,
    })
}

/// Seed for subgroup `index` of provider `provider_id`.
pub fn subgroup_seed(base: u64, provider_id: &str, index: usize) -> u64 {
    mix_seed(mix_seed(base, stable_hash(provider_id)), index as u64)
}

/// Generates every subgroup of a provider. Subgroups run on the current rayon
/// pool; results keep subgroup order.
pub fn generate_provider(summary: &ProviderSummary, opts: &SolverOptions) -> Result<Vec<PseudoDataset>> {
    summary
        .subgroups
        .par_iter()
        .enumerate()
        .map(|(index, sub)| {
            let sub_opts = SolverOptions {
                seed: subgroup_seed(opts.seed, &summary.provider_id, index),
                ..opts.clone()
            };
            generate_pseudo_data(sub, &sub_opts)
                .map(|mut ds| {
                    ds.group_id = summary.provider_id.clone();
                    ds.subgroup_index = index;
                    ds
                })
                .map_err(|e| {
                    e.context(format!(
                        "provider '{}' subgroup {index}",
                        summary.provider_id
                    ))
                })
        })
        .collect()
}

/// Pooled pseudo-data with group and subgroup labels per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTable {
    pub variable_names: Vec<String>,
    pub values: DMatrix<f64>,
    pub group_ids: Vec<String>,
    pub subgroups: Vec<usize>,
}

impl PseudoTable {
    pub fn from_datasets(variable_names: Vec<String>, datasets: &[PseudoDataset]) -> Result<Self> {
        let p = variable_names.len();
        if let Some(bad) = datasets.iter().find(|d| d.values.ncols() != p) {
            return Err(Error::DimensionMismatch {
                what: "pseudo dataset width",
                expected: p,
                found: bad.values.ncols(),
            });
        }
        let total: usize = datasets.iter().map(|d| d.values.nrows()).sum();
        let mut values = DMatrix::zeros(total, p);
        let mut group_ids = Vec::with_capacity(total);
        let mut subgroups = Vec::with_capacity(total);
        let mut start = 0;
        for d in datasets {
            let rows = d.values.nrows();
            values.rows_mut(start, rows).copy_from(&d.values);
            group_ids.extend(std::iter::repeat_n(d.group_id.clone(), rows));
            subgroups.extend(std::iter::repeat_n(d.subgroup_index, rows));
            start += rows;
        }
        Ok(Self {
            variable_names,
            values,
            group_ids,
            subgroups,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    /// CSV with the variable columns followed by `group_id` and `subgroup`.
    /// Floats use the shortest representation that round-trips exactly.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.variable_names.clone();
        header.push("group_id".into());
        header.push("subgroup".into());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n_rows() {
            record.clear();
            record.extend(self.values.row(i).iter().map(|v| format!("{v:?}")));
            record.push(self.group_ids[i].clone());
            record.push(self.subgroups[i].to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{enumerate_multi_indices, summarize_subgroup, Variable, VariableKind};
    use rand::Rng;

    fn random_matrix(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 2.0 - 0.5)
    }

    #[test]
    fn residual_examples() {
        let idx = enumerate_multi_indices(1, 2);
        let prob = MomentResidualProblem::new(idx.clone(), vec![0.0, 1.0], 2).unwrap();
        let r = residuals(&prob, &DVector::from_vec(vec![-1.0, 1.0])).unwrap();
        assert_eq!(r.as_slice(), &[0.0, 0.0]);

        let prob = MomentResidualProblem::new(idx, vec![0.0, 1.0], 1).unwrap();
        let r = residuals(&prob, &DVector::from_vec(vec![2.0])).unwrap();
        assert_eq!(r.as_slice(), &[2.0, 3.0]);

        let bad = residuals(&prob, &DVector::from_vec(vec![f64::INFINITY]));
        assert!(matches!(bad, Err(Error::NonFinite(_))));
    }

    #[test]
    fn residuals_vanish_at_source() {
        let d = random_matrix(12, 3, 5);
        let s = summarize_subgroup(&d, 4).unwrap();
        let sds = s.std_devs();
        let z = DMatrix::from_fn(12, 3, |i, j| (d[(i, j)] - s.means[j]) / sds[j]);
        let prob = MomentResidualProblem::from_summary(&s).unwrap();
        let r = residuals(&prob, &DVector::from_column_slice(z.as_slice())).unwrap();
        assert!(r.amax() < 1e-13);
    }

    #[test]
    fn jacobian_examples() {
        let x = DVector::from_vec(vec![0.5, -1.5, 2.0]);
        let prob =
            MomentResidualProblem::new(vec![MultiIndex::new(vec![2])], vec![0.0], 3).unwrap();
        let j = jacobian(&prob, &x).unwrap();
        for i in 0..3 {
            assert!((j[(0, i)] - 2.0 * x[i] / 3.0).abs() < 1e-15);
        }
        // p = 2, r = (1,1): d/dx_i1 = x_i2 / n
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let prob =
            MomentResidualProblem::new(vec![MultiIndex::new(vec![1, 1])], vec![0.0], 2).unwrap();
        let j = jacobian(&prob, &x).unwrap();
        assert_eq!(j.row(0).iter().cloned().collect::<Vec<_>>(), vec![1.5, 2.0, 0.5, 1.0]);
    }

    #[test]
    fn order_one_rows_are_constant() {
        let idx = enumerate_multi_indices(2, 3);
        let t = vec![0.0; idx.len()];
        let prob = MomentResidualProblem::new(idx, t, 4).unwrap();
        let x = DVector::from_column_slice(random_matrix(4, 2, 1).as_slice());
        let j = jacobian(&prob, &x).unwrap();
        for c in 0..4 {
            assert_eq!(j[(0, c)], 0.25);
            assert_eq!(j[(0, 4 + c)], 0.0);
            assert_eq!(j[(1, 4 + c)], 0.25);
        }
    }

    #[test]
    fn structured_products_match_dense() {
        let idx = enumerate_multi_indices(3, 4);
        let t = vec![0.0; idx.len()];
        let prob = MomentResidualProblem::new(idx, t, 7).unwrap();
        let x = DVector::from_column_slice(random_matrix(7, 3, 2).as_slice());
        let dense = jacobian(&prob, &x).unwrap();
        let structured = LeastSquaresProblem::jacobian(&prob, &x).unwrap();
        assert!((structured.row_gram() - dense.row_gram()).amax() < 1e-12);
        assert!((structured.col_gram() - dense.col_gram()).amax() < 1e-12);
        let v = DVector::from_fn(prob.nu(), |i, _| (i as f64).sin());
        assert!((structured.tr_mul(&v) - dense.tr_mul(&v)).amax() < 1e-12);
    }

    #[test]
    fn three_point_source() {
        let d = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let s = summarize_subgroup(&d, 4).unwrap();
        let opts = SolverOptions {
            seed: 11,
            residual_tolerance: 1e-11,
            ..Default::default()
        };
        let ps = generate_pseudo_data(&s, &opts).unwrap();
        let want = [1.0, 5.0 / 3.0, 3.0, 17.0 / 3.0];
        for (k, w) in (1..=4).zip(want) {
            let m = crate::moments::raw_moment(&ps.values, &MultiIndex::new(vec![k])).unwrap();
            assert!((m - w).abs() < 1e-8, "order {k}: {m}");
        }
    }

    #[test]
    fn start_at_source_needs_no_iterations() {
        let d = random_matrix(30, 3, 8);
        let s = summarize_subgroup(&d, 4).unwrap();
        let sds = s.std_devs();
        let z = DMatrix::from_fn(30, 3, |i, j| (d[(i, j)] - s.means[j]) / sds[j]);
        let ps = generate_from_start(&s, &z, &SolverOptions::default()).unwrap();
        assert_eq!(ps.solver_iterations, 0);
        assert!((ps.values - d).amax() < 1e-12);
    }

    #[test]
    fn fidelity_and_seed_sensitivity() {
        let d = random_matrix(60, 3, 21);
        let s = summarize_subgroup(&d, 4).unwrap();
        let opts = SolverOptions::default();
        let a = generate_pseudo_data(&s, &SolverOptions { seed: 1, ..opts.clone() }).unwrap();
        let b = generate_pseudo_data(&s, &SolverOptions { seed: 2, ..opts.clone() }).unwrap();
        let a2 = generate_pseudo_data(&s, &SolverOptions { seed: 1, ..opts }).unwrap();
        assert_eq!(a, a2);
        assert!((&a.values - &b.values).norm() > 1e-3);
        for ds in [&a, &b] {
            assert!(ds.achieved_max_residual <= 1e-8);
            let again = summarize_subgroup(&ds.values, 4).unwrap();
            for (x, y) in again.std_moments.iter().zip(&s.std_moments) {
                assert!((x.value - y.value).abs() < 1e-7);
            }
            for r in enumerate_multi_indices(3, 4) {
                let want = s.recover_raw_moment(&r).unwrap();
                let got = crate::moments::raw_moment(&ds.values, &r).unwrap();
                assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{r}");
            }
        }
    }

    #[test]
    fn provider_concatenation_keeps_labels() {
        let d = random_matrix(50, 2, 4);
        let vars = vec![
            Variable { name: "a".into(), kind: VariableKind::Numeric },
            Variable { name: "b".into(), kind: VariableKind::Numeric },
        ];
        let summary = ProviderSummary::from_data("h1", vars, &d, &[25, 25], 4).unwrap();
        let parts = generate_provider(&summary, &SolverOptions::default()).unwrap();
        assert_eq!(parts.len(), 2);
        let table = PseudoTable::from_datasets(summary.variable_names(), &parts).unwrap();
        assert_eq!(table.n_rows(), 50);
        assert!(table.group_ids.iter().all(|g| g == "h1"));
        assert_eq!(table.subgroups[24], 0);
        assert_eq!(table.subgroups[25], 1);

        let single = ProviderSummary::from_data("h1", summary.variables.clone(), &d, &[50], 4).unwrap();
        let parts = generate_provider(&single, &SolverOptions { seed: 3, ..Default::default() }).unwrap();
        let direct = generate_pseudo_data(
            &single.subgroups[0],
            &SolverOptions { seed: subgroup_seed(3, "h1", 0), ..Default::default() },
        )
        .unwrap();
        assert_eq!(parts[0].values, direct.values);
    }

    #[test]
    fn csv_layout() {
        let ds = PseudoDataset {
            values: DMatrix::from_row_slice(2, 2, &[0.1, 2.0, -3.5e-7, 1.0 / 3.0]),
            group_id: "g".into(),
            subgroup_index: 1,
            achieved_max_residual: 0.0,
            solver_iterations: 0,
        };
        let t = PseudoTable::from_datasets(vec!["x".into(), "y".into()], &[ds]).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "x,y,group_id,subgroup\n0.1,2.0,g,1\n-3.5e-7,0.3333333333333333,g,1\n"
        );
    }
}
