//! Multivariate sample moments.
//!
//! A moment of order `|r|` is indexed by an exponent vector `r` with one entry
//! per variable and is the average of the monomial `x^r` over the rows of a
//! data block. Providers exchange raw moments of their *standardized*
//! variables, together with per-variable means and sample variances, so that
//! the original-scale moments remain recoverable by affine expansion.

use std::collections::HashMap;
use std::fmt;

use nalgebra::DMatrix;
#[cfg(test)]
use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Current version of the provider export format.
pub const FORMAT_VERSION: u32 = 1;

/// Default highest moment order shared by providers.
pub const DEFAULT_K_MAX: u32 = 4;

/// Exponent vector identifying one multivariate moment.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(exponents: Vec<u32>) -> Self {
        Self(exponents)
    }

    /// Index of the pure moment `x_var^power` among `p` variables.
    pub fn pure(p: usize, var: usize, power: u32) -> Self {
        let mut e = vec![0; p];
        e[var] = power;
        Self(e)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    /// Number of variables `p`.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total order `|r|`.
    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    /// `(variable, exponent)` pairs with a nonzero exponent.
    pub fn terms(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(j, &e)| (j, e))
    }

    /// True if exactly one variable carries the whole order.
    pub fn is_pure(&self) -> bool {
        self.terms().count() == 1
    }

    /// Evaluates the monomial at one observation.
    pub fn monomial(&self, row: &[f64]) -> f64 {
        self.terms().map(|(j, e)| row[j].powi(e as i32)).product()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, e) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")")
    }
}

/// All exponent vectors with `1 <= |r| <= k_max`, in graded lexicographic
/// order: ascending total order, and within one order descending
/// lexicographically, so `(1,0)` precedes `(0,1)`.
pub fn enumerate_multi_indices(p: usize, k_max: u32) -> Vec<MultiIndex> {
    assert!(p >= 1 && k_max >= 1, "need p >= 1 and k_max >= 1");
    let mut out = Vec::with_capacity(moment_count(p, k_max));
    let mut buf = vec![0u32; p];
    for degree in 1..=k_max {
        fill_degree(&mut buf, 0, degree, &mut out);
    }
    out
}

fn fill_degree(buf: &mut [u32], pos: usize, remaining: u32, out: &mut Vec<MultiIndex>) {
    if pos + 1 == buf.len() {
        buf[pos] = remaining;
        out.push(MultiIndex(buf.to_vec()));
        buf[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        buf[pos] = e;
        fill_degree(buf, pos + 1, remaining - e, out);
    }
    buf[pos] = 0;
}

/// `C(p + k_max, k_max) - 1`, the number of moments with `1 <= |r| <= k_max`.
pub fn moment_count(p: usize, k_max: u32) -> usize {
    binomial(p + k_max as usize, k_max as usize) - 1
}

pub(crate) fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

fn check_finite(data: &DMatrix<f64>, what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `(1/n) * sum_i prod_j x_ij^r_j` over the rows of `data` (n x p).
pub fn raw_moment(data: &DMatrix<f64>, r: &MultiIndex) -> Result<f64> {
    if r.len() != data.ncols() {
        return Err(Error::DimensionMismatch {
            what: "multi-index length",
            expected: data.ncols(),
            found: r.len(),
        });
    }
    if data.nrows() == 0 {
        return Err(Error::InvalidInput("raw moment of an empty data block".into()));
    }
    check_finite(data, "moment data")?;
    Ok(raw_moments(data, std::slice::from_ref(r))[0])
}

/// Raw moments for many indices at once. Assumes finite data of matching width.
pub(crate) fn raw_moments(data: &DMatrix<f64>, indices: &[MultiIndex]) -> Vec<f64> {
    let n = data.nrows();
    let p = data.ncols();
    let k_max = indices.iter().map(MultiIndex::order).max().unwrap_or(0) as usize;
    // powers[j][k*n + i] = x_ij^k
    let powers: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            let col = data.column(j);
            let mut pw = vec![1.0; (k_max + 1) * n];
            for k in 1..=k_max {
                for i in 0..n {
                    pw[k * n + i] = pw[(k - 1) * n + i] * col[i];
                }
            }
            pw
        })
        .collect();
    let mut acc = vec![0.0; n];
    indices
        .iter()
        .map(|r| {
            acc.iter_mut().for_each(|a| *a = 1.0);
            for (j, e) in r.terms() {
                let pw = &powers[j][e as usize * n..(e as usize + 1) * n];
                acc.iter_mut().zip(pw).for_each(|(a, v)| *a *= v);
            }
            acc.iter().sum::<f64>() / n as f64
        })
        .collect()
}

/// One exported moment value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub r: MultiIndex,
    pub value: f64,
}

/// Summary statistics of one subgroup: size, original-scale means and
/// (n-1)-denominator variances, and raw moments of the standardized variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupSummary {
    pub n: usize,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub std_moments: Vec<MomentEntry>,
}

impl SubgroupSummary {
    pub fn p(&self) -> usize {
        self.means.len()
    }

    /// Highest moment order present.
    pub fn k_max(&self) -> u32 {
        self.std_moments.iter().map(|m| m.r.order()).max().unwrap_or(0)
    }

    pub fn std_devs(&self) -> Vec<f64> {
        self.variances.iter().map(|v| v.sqrt()).collect()
    }

    pub fn indices(&self) -> Vec<MultiIndex> {
        self.std_moments.iter().map(|m| m.r.clone()).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.std_moments.iter().map(|m| m.value).collect()
    }

    pub fn std_moment(&self, r: &MultiIndex) -> Option<f64> {
        self.std_moments.iter().find(|m| &m.r == r).map(|m| m.value)
    }

    /// p x p matrix of order-2 standardized moments.
    pub fn second_order_matrix(&self) -> DMatrix<f64> {
        let p = self.p();
        let mut m = DMatrix::zeros(p, p);
        for entry in self.std_moments.iter().filter(|e| e.r.order() == 2) {
            let vars: Vec<usize> = entry
                .r
                .terms()
                .flat_map(|(j, e)| std::iter::repeat_n(j, e as usize))
                .collect();
            m[(vars[0], vars[1])] = entry.value;
            m[(vars[1], vars[0])] = entry.value;
        }
        m
    }

    /// Raw moment of the original-scale data, recovered by expanding
    /// `x_j = mean_j + sd_j * z_j` into standardized moments.
    pub fn recover_raw_moment(&self, r: &MultiIndex) -> Result<f64> {
        if r.len() != self.p() {
            return Err(Error::DimensionMismatch {
                what: "multi-index length",
                expected: self.p(),
                found: r.len(),
            });
        }
        if r.order() > self.k_max() {
            return Err(Error::InvalidInput(format!(
                "moment {r} exceeds the summary's order {}",
                self.k_max()
            )));
        }
        let lookup: HashMap<&MultiIndex, f64> =
            self.std_moments.iter().map(|m| (&m.r, m.value)).collect();
        let sds = self.std_devs();
        let mut total = 0.0;
        let mut k = vec![0u32; r.len()];
        loop {
            let mut coeff = 1.0;
            for j in 0..r.len() {
                let (rj, kj) = (r.exponents()[j], k[j]);
                coeff *= binomial(rj as usize, kj as usize) as f64
                    * self.means[j].powi((rj - kj) as i32)
                    * sds[j].powi(kj as i32);
            }
            let z_moment = if k.iter().all(|&e| e == 0) {
                1.0
            } else {
                lookup[&MultiIndex(k.clone())]
            };
            total += coeff * z_moment;
            // odometer over 0 <= k <= r
            let mut j = 0;
            loop {
                if j == k.len() {
                    return Ok(total);
                }
                if k[j] < r.exponents()[j] {
                    k[j] += 1;
                    break;
                }
                k[j] = 0;
                j += 1;
            }
        }
    }
}

/// Summarizes one subgroup (n x p, complete cases) up to order `k_max`.
pub fn summarize_subgroup(data: &DMatrix<f64>, k_max: u32) -> Result<SubgroupSummary> {
    let (n, p) = data.shape();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "a subgroup needs at least 2 rows, got {n}"
        )));
    }
    if p == 0 || k_max == 0 {
        return Err(Error::InvalidInput("need at least one variable and k_max >= 1".into()));
    }
    check_finite(data, "subgroup data")?;

    let mut means = Vec::with_capacity(p);
    let mut variances = Vec::with_capacity(p);
    let mut z = data.clone();
    for j in 0..p {
        let col = data.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        if !(sd > f64::EPSILON * mean.abs().max(1.0) * 16.0) {
            return Err(Error::ZeroVariance {
                column: format!("#{j}"),
            });
        }
        z.column_mut(j).iter_mut().for_each(|v| *v = (*v - mean) / sd);
        means.push(mean);
        variances.push(var);
    }

    let indices = enumerate_multi_indices(p, k_max);
    let values = raw_moments(&z, &indices);
    let std_moments = indices
        .into_iter()
        .zip(values)
        .map(|(r, value)| MomentEntry { r, value })
        .collect();
    Ok(SubgroupSummary {
        n,
        means,
        variances,
        std_moments,
    })
}

/// Subgroup sizes for a group of `n` rows. Groups up to `cap` stay whole;
/// larger groups are cut into blocks of `base` and the remainder is merged
/// into the last block. If that would exceed `cap`, the remainder is spread
/// one row at a time over all blocks instead. Every block lands in
/// `[base, cap]` whenever `cap >= 2 * base - 1`.
pub fn partition_subgroups(n: usize, base: usize, cap: usize) -> Vec<usize> {
    assert!(base >= 1 && base <= cap, "need 1 <= base <= cap");
    if n <= cap {
        return vec![n];
    }
    let blocks = n / base;
    let rem = n % base;
    let mut sizes = vec![base; blocks];
    if base + rem <= cap {
        *sizes.last_mut().unwrap() += rem;
    } else {
        for k in 0..rem {
            sizes[k % blocks] += 1;
        }
    }
    sizes
}

/// Kind of an exported variable; informational only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Numeric,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub kind: VariableKind,
}

/// Everything one provider exports, once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderSummary {
    pub format_version: u32,
    pub provider_id: String,
    pub variables: Vec<Variable>,
    pub k_max: u32,
    pub subgroups: Vec<SubgroupSummary>,
}

impl ProviderSummary {
    /// Summarizes `data` block by block; `sizes` must sum to the row count.
    pub fn from_data(
        provider_id: impl Into<String>,
        variables: Vec<Variable>,
        data: &DMatrix<f64>,
        sizes: &[usize],
        k_max: u32,
    ) -> Result<Self> {
        if variables.len() != data.ncols() {
            return Err(Error::DimensionMismatch {
                what: "variable list",
                expected: data.ncols(),
                found: variables.len(),
            });
        }
        let total: usize = sizes.iter().sum();
        if total != data.nrows() {
            return Err(Error::DimensionMismatch {
                what: "subgroup sizes",
                expected: data.nrows(),
                found: total,
            });
        }
        let mut subgroups = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for (g, &size) in sizes.iter().enumerate() {
            let block = data.rows(start, size).into_owned();
            let summary = summarize_subgroup(&block, k_max).map_err(|e| match e {
                Error::ZeroVariance { column } => {
                    let j: usize = column.trim_start_matches('#').parse().unwrap_or(0);
                    Error::ZeroVariance {
                        column: variables[j].name.clone(),
                    }
                    .context(format!("subgroup {g}"))
                }
                other => other.context(format!("subgroup {g}")),
            })?;
            subgroups.push(summary);
            start += size;
        }
        Ok(Self {
            format_version: FORMAT_VERSION,
            provider_id: provider_id.into(),
            variables,
            k_max,
            subgroups,
        })
    }

    pub fn p(&self) -> usize {
        self.variables.len()
    }

    pub fn total_n(&self) -> usize {
        self.subgroups.iter().map(|s| s.n).sum()
    }

    pub fn variable_names(&self) -> Vec<String> {
        self.variables.iter().map(|v| v.name.clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Smallest eigenvalue of a symmetric matrix.
#[cfg(test)]
pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
