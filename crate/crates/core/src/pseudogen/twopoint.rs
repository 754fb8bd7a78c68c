//! Columns pinned to two values by their fourth-order moments.
//!
//! A column takes at most two distinct values exactly when the Hankel matrix
//! of its moments of order 0..=4 is singular, and then every exact solution
//! of the moment equations puts that column on the same two values. Starting
//! the solver with those columns already on their support, with joint counts
//! that match the targets, avoids the local minima a generic start falls
//! into; the remaining columns are then solved with the two-point block held
//! fixed.

use std::collections::HashMap;

use log::debug;
use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::lm::{self, Diagnostics, LeastSquaresProblem, SolverOptions};
use super::{MomentJacobian, MomentResidualProblem};
use crate::error::Result;
use crate::moments::{MultiIndex, SubgroupSummary};

const HANKEL_TOL: f64 = 1e-9;
const COUNT_TOL: f64 = 1e-6;
const MAX_TWO_POINT: usize = 63;
const SEARCH_ROUNDS: usize = 4;
const FROZEN_STARTS: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct TwoPoint {
    pub var: usize,
    pub lo: f64,
    pub hi: f64,
    /// Rows at `hi`.
    pub count: usize,
}

fn moment_map(summary: &SubgroupSummary) -> HashMap<&MultiIndex, f64> {
    summary.std_moments.iter().map(|m| (&m.r, m.value)).collect()
}

/// Two-point columns of a summary with moments through order 4.
pub(crate) fn detect(summary: &SubgroupSummary) -> Vec<TwoPoint> {
    if summary.k_max() < 4 {
        return Vec::new();
    }
    let p = summary.p();
    let moments = moment_map(summary);
    let n = summary.n as f64;
    (0..p)
        .filter_map(|j| {
            let m: Vec<f64> = (1..=4)
                .map(|k| moments.get(&MultiIndex::pure(p, j, k)).copied())
                .collect::<Option<_>>()?;
            let (m1, m2, m3, m4) = (m[0], m[1], m[2], m[3]);
            let det = (m2 * m4 - m3 * m3) - m1 * (m1 * m4 - m3 * m2) + m2 * (m1 * m3 - m2 * m2);
            if det.abs() > HANKEL_TOL * m2.powi(3).max(1.0) {
                return None;
            }
            // support = roots of the monic degree-2 orthogonal polynomial
            let var = m2 - m1 * m1;
            let c1 = (m1 * m2 - m3) / var;
            let c0 = -m2 - m1 * c1;
            let disc = c1 * c1 - 4.0 * c0;
            if !(disc > 0.0) {
                return None;
            }
            let (lo, hi) = ((-c1 - disc.sqrt()) / 2.0, (-c1 + disc.sqrt()) / 2.0);
            let count = n * (m1 - lo) / (hi - lo);
            let rounded = count.round();
            ((count - rounded).abs() < COUNT_TOL && rounded >= 1.0 && rounded < n).then_some(TwoPoint {
                var: j,
                lo,
                hi,
                count: rounded as usize,
            })
        })
        .collect()
}

/// Target counts `#{rows at hi on every column of S}` for each set `S` of
/// two-point columns with `2 <= |S| <= k_max`, keyed by bit mask.
pub(crate) fn joint_counts(summary: &SubgroupSummary, cols: &[TwoPoint]) -> Option<Vec<(u64, usize)>> {
    let b = cols.len();
    if b > MAX_TWO_POINT {
        return None;
    }
    let p = summary.p();
    let k_max = summary.k_max() as usize;
    let moments = moment_map(summary);
    let n = summary.n as f64;

    let mut masks: Vec<u64> = (1u64..1 << b).filter(|m| m.count_ones() as usize <= k_max).collect();
    masks.sort_by_key(|m| m.count_ones());
    // E[prod z_S] = sum over T ⊆ S of prod_{S\T} lo * prod_T (hi - lo) * E[b_T]
    let mut expect: HashMap<u64, f64> = HashMap::from([(0, 1.0)]);
    let mut out = Vec::new();
    for &s in &masks {
        let mut exps = vec![0u32; p];
        for (k, c) in cols.iter().enumerate() {
            if s >> k & 1 == 1 {
                exps[c.var] = 1;
            }
        }
        let ez = *moments.get(&MultiIndex::new(exps))?;
        let mut rest = ez;
        let mut t = (s - 1) & s;
        loop {
            let mut coef = expect[&t];
            for (k, c) in cols.iter().enumerate() {
                if s >> k & 1 == 1 {
                    coef *= if t >> k & 1 == 1 { c.hi - c.lo } else { c.lo };
                }
            }
            rest -= coef;
            if t == 0 {
                break;
            }
            t = (t - 1) & s;
        }
        let scale: f64 = cols
            .iter()
            .enumerate()
            .filter(|(k, _)| s >> k & 1 == 1)
            .map(|(_, c)| c.hi - c.lo)
            .product();
        let e = rest / scale;
        let count = n * e;
        let rounded = count.round();
        if (count - rounded).abs() > COUNT_TOL * n.max(1.0) || rounded < 0.0 {
            debug!("two-point joint count {count} for mask {s:#b} is not integral");
            return None;
        }
        expect.insert(s, e);
        if s.count_ones() >= 2 {
            out.push((s, rounded as usize));
        }
    }
    Some(out)
}

/// Annealed swap search for an `n`-row 0/1 table (one bit mask per row) with
/// the given column totals and joint counts. Swapping a 1 and a 0 within a
/// column keeps the column totals fixed.
pub(crate) fn search_table<R: Rng>(
    n: usize,
    totals: &[usize],
    joint: &[(u64, usize)],
    rng: &mut R,
    proposals: usize,
) -> Option<Vec<u64>> {
    let b = totals.len();
    let by_col: Vec<Vec<usize>> = (0..b)
        .map(|j| (0..joint.len()).filter(|&s| joint[s].0 >> j & 1 == 1).collect())
        .collect();

    for _ in 0..SEARCH_ROUNDS {
        let mut rows = vec![0u64; n];
        let mut ones: Vec<Vec<usize>> = Vec::with_capacity(b);
        let mut zeros: Vec<Vec<usize>> = Vec::with_capacity(b);
        for (j, &t) in totals.iter().enumerate() {
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for &i in &order[..t] {
                rows[i] |= 1 << j;
            }
            ones.push(order[..t].to_vec());
            zeros.push(order[t..].to_vec());
        }
        let mut gap: Vec<i64> = joint
            .iter()
            .map(|&(s, c)| rows.iter().filter(|&&r| r & s == s).count() as i64 - c as i64)
            .collect();
        let mut energy: i64 = gap.iter().map(|g| g * g).sum();
        let mut temp = 2.0f64;
        let cool = (1e-3f64 / temp).powf(1.0 / proposals as f64);
        for _ in 0..proposals {
            if energy == 0 {
                return Some(rows);
            }
            temp *= cool;
            let j = rng.random_range(0..b);
            if ones[j].is_empty() || zeros[j].is_empty() {
                continue;
            }
            let a = rng.random_range(0..ones[j].len());
            let z = rng.random_range(0..zeros[j].len());
            let (r1, r0) = (ones[j][a], zeros[j][z]);
            let bit = 1u64 << j;
            let mut delta = 0i64;
            for &s in &by_col[j] {
                let mask = joint[s].0 & !bit;
                let d = i64::from(rows[r0] & mask == mask) - i64::from(rows[r1] & mask == mask);
                delta += d * (2 * gap[s] + d);
            }
            if delta <= 0 || rng.random::<f64>() < (-(delta as f64) / temp).exp() {
                for &s in &by_col[j] {
                    let mask = joint[s].0 & !bit;
                    gap[s] += i64::from(rows[r0] & mask == mask) - i64::from(rows[r1] & mask == mask);
                }
                rows[r1] &= !bit;
                rows[r0] |= bit;
                ones[j][a] = r0;
                zeros[j][z] = r1;
                energy += delta;
            }
        }
        if energy == 0 {
            return Some(rows);
        }
        debug!("two-point table search ended with energy {energy}");
    }
    None
}

/// The moment problem in the free columns only, the others held at `base`.
struct FrozenProblem<'a> {
    inner: &'a MomentResidualProblem,
    free: Vec<usize>,
    base: DVector<f64>,
}

impl FrozenProblem<'_> {
    fn embed(&self, c: &DVector<f64>) -> DVector<f64> {
        let n = self.inner.n();
        let mut x = self.base.clone();
        for (a, &j) in self.free.iter().enumerate() {
            x.rows_mut(j * n, n).copy_from(&c.rows(a * n, n));
        }
        x
    }
}

impl LeastSquaresProblem for FrozenProblem<'_> {
    type Jacobian = MomentJacobian;

    fn n_residuals(&self) -> usize {
        self.inner.nu()
    }

    fn n_params(&self) -> usize {
        self.free.len() * self.inner.n()
    }

    fn residuals(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.residuals(&self.embed(c))
    }

    fn jacobian(&self, c: &DVector<f64>) -> Result<MomentJacobian> {
        Ok(self.inner.partial_jacobian(&self.embed(c), &self.free))
    }
}

/// A starting point with the two-point block exact and the other columns
/// solved against it. `None` when the summary has no usable two-point
/// structure.
pub(crate) fn structured_start<R: Rng>(
    summary: &SubgroupSummary,
    problem: &MomentResidualProblem,
    rng: &mut R,
    opts: &SolverOptions,
) -> Result<Option<(DVector<f64>, Diagnostics)>> {
    let cols = detect(summary);
    if cols.is_empty() {
        return Ok(None);
    }
    let Some(joint) = joint_counts(summary, &cols) else {
        return Ok(None);
    };
    let n = summary.n;
    let p = summary.p();
    let totals: Vec<usize> = cols.iter().map(|c| c.count).collect();
    let budget = 2000 * n * cols.len();
    let Some(table) = search_table(n, &totals, &joint, rng, budget) else {
        return Ok(None);
    };

    let mut x = DVector::zeros(n * p);
    for (k, c) in cols.iter().enumerate() {
        for (i, row) in table.iter().enumerate() {
            x[c.var * n + i] = if row >> k & 1 == 1 { c.hi } else { c.lo };
        }
    }
    let free: Vec<usize> = (0..p).filter(|j| cols.iter().all(|c| c.var != *j)).collect();
    if free.is_empty() {
        let r = problem.residuals(&x)?;
        let diag = Diagnostics {
            termination: lm::Termination::Converged,
            iterations: 0,
            max_residual: r.amax(),
            final_damping: opts.initial_damping,
        };
        return Ok(Some((x, diag)));
    }
    let frozen = FrozenProblem {
        inner: problem,
        free: free.clone(),
        base: x,
    };
    // The free-column problem is small and has isolated local minima, so
    // fresh starts are cheaper than pushing one run further.
    let mut best: Option<(DVector<f64>, Diagnostics)> = None;
    let mut iterations = 0;
    for _ in 0..FROZEN_STARTS {
        let c0 = DVector::from_iterator(free.len() * n, (0..free.len() * n).map(|_| StandardNormal.sample(rng)));
        let (c, diag) = match lm::minimize(&frozen, c0, opts) {
            Ok(out) => out,
            Err(crate::error::Error::NonFinite(_)) => continue,
            Err(e) => return Err(e),
        };
        iterations += diag.iterations;
        debug!(
            "{} two-point column(s); free-column solve {:?} after {} iterations, max residual {:e}",
            cols.len(),
            diag.termination,
            diag.iterations,
            diag.max_residual
        );
        let done = diag.converged();
        if best.as_ref().is_none_or(|(_, b)| diag.max_residual < b.max_residual) {
            best = Some((c, diag));
        }
        if done {
            break;
        }
    }
    Ok(best.map(|(c, mut diag)| {
        diag.iterations = iterations;
        (frozen.embed(&c), diag)
    }))
}
