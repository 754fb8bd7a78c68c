//! Random-intercept mixed models.
//!
//! Gaussian responses are fitted by maximum likelihood in closed form,
//! profiling out `β` and `σ_ε` so only the variance ratio `σ_u²/σ_ε²` is
//! searched numerically. Soft-binomial and soft-Poisson responses use an
//! adaptive Gauss-Hermite approximation to each group's integral over its
//! random intercept (one node is the Laplace approximation), maximized over
//! `(β, log σ_u)` by BFGS with an analytic gradient.

use std::f64::consts::{LN_2, PI};
use std::ops::Range;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::glm::{check_design, fit_glm, logistic, softplus, Family};

/// `log σ_u` below this is reported as a boundary fit.
pub const BOUNDARY_LOG_SIGMA: f64 = -8.0;
pub const MAX_AGQ: usize = 25;

const BFGS_MAX_ITER: usize = 500;
const BFGS_GTOL: f64 = 1e-7;
const FINAL_GTOL: f64 = 1e-4;
const MAX_STEP: f64 = 5.0;
const INNER_MAX_ITER: usize = 200;

#[derive(Clone, Debug)]
pub struct MixedModelSpec {
    pub family: Family,
    pub y: DVector<f64>,
    /// n x p fixed-effects design, intercept column included by the caller.
    pub x: DMatrix<f64>,
    /// Group label per row.
    pub groups: Vec<String>,
    pub coefficient_names: Vec<String>,
}

impl MixedModelSpec {
    pub fn new(
        family: Family,
        y: DVector<f64>,
        x: DMatrix<f64>,
        groups: Vec<String>,
        coefficient_names: Vec<String>,
    ) -> Result<Self> {
        if groups.len() != y.len() {
            return Err(Error::DimensionMismatch {
                what: "group labels",
                expected: y.len(),
                found: groups.len(),
            });
        }
        if coefficient_names.len() != x.ncols() {
            return Err(Error::DimensionMismatch {
                what: "coefficient names",
                expected: x.ncols(),
                found: coefficient_names.len(),
            });
        }
        check_design(&y, &x)?;
        Ok(Self {
            family,
            y,
            x,
            groups,
            coefficient_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// Rows sorted by group, groups indexed by sorted label.
#[derive(Clone, Debug)]
struct Grouped {
    labels: Vec<String>,
    ranges: Vec<Range<usize>>,
    y: Vec<f64>,
    x: DMatrix<f64>,
}

impl Grouped {
    fn new(spec: &MixedModelSpec) -> Result<Self> {
        let mut labels = spec.groups.clone();
        labels.sort();
        labels.dedup();
        if labels.len() < 2 {
            return Err(Error::Identifiability(format!(
                "{} group(s); the random-intercept variance needs at least 2",
                labels.len()
            )));
        }
        let idx: Vec<usize> = spec
            .groups
            .iter()
            .map(|g| labels.binary_search(g).expect("label present"))
            .collect();
        let mut order: Vec<usize> = (0..spec.n()).collect();
        order.sort_by_key(|&i| idx[i]);
        let x = spec.x.select_rows(order.iter());
        let y = order.iter().map(|&i| spec.y[i]).collect();
        let mut ranges = Vec::with_capacity(labels.len());
        let mut start = 0;
        for g in 0..labels.len() {
            let len = idx.iter().filter(|&&k| k == g).count();
            ranges.push(start..start + len);
            start += len;
        }
        Ok(Self {
            labels,
            ranges,
            y,
            x,
        })
    }

    fn m(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEffect {
    pub group: String,
    pub blup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedFitResult {
    pub family: Family,
    /// Quadrature nodes per group; `None` for the closed-form gaussian fit.
    pub n_agq: Option<usize>,
    pub coefficients: Vec<Coefficient>,
    pub sigma_u: f64,
    pub residual_sigma: Option<f64>,
    /// `log σ_u` fell below the boundary threshold.
    pub boundary: bool,
    /// Response-only terms excluded for soft families.
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n: usize,
    pub m: usize,
    pub n_parameters: usize,
    pub blups: Vec<GroupEffect>,
    /// Wald covariance of the fixed effects.
    pub covariance: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    /// Approximate log-likelihood after each accepted outer step.
    #[serde(skip)]
    pub loglik_trace: Vec<f64>,
}

impl MixedFitResult {
    pub fn beta(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.estimate).collect()
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.std_error).collect()
    }

    pub fn blup(&self, group: &str) -> Option<f64> {
        self.blups.iter().find(|b| b.group == group).map(|b| b.blup)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

fn normal_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

/// Wald intervals `estimate ± z·se` at the given two-sided level.
pub fn wald_ci(fit: &MixedFitResult, level: f64) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("confidence level {level} not in (0, 1)")));
    }
    let z = normal_quantile(level);
    Ok(fit
        .coefficients
        .iter()
        .map(|c| (c.estimate - z * c.std_error, c.estimate + z * c.std_error))
        .collect())
}

/// Fitted responses `g⁻¹(xβ + û)`. Groups absent from the fit get `û = 0`.
pub fn predict(fit: &MixedFitResult, x_new: &DMatrix<f64>, groups: &[String]) -> Result<Vec<f64>> {
    let p = fit.coefficients.len();
    if x_new.ncols() != p {
        return Err(Error::DimensionMismatch {
            what: "prediction design columns",
            expected: p,
            found: x_new.ncols(),
        });
    }
    if groups.len() != x_new.nrows() {
        return Err(Error::DimensionMismatch {
            what: "prediction group labels",
            expected: x_new.nrows(),
            found: groups.len(),
        });
    }
    let beta = DVector::from_vec(fit.beta());
    let eta = x_new * beta;
    Ok(eta
        .iter()
        .zip(groups)
        .map(|(&e, g)| fit.family.inverse_link(e + fit.blup(g).unwrap_or(0.0)))
        .collect())
}

fn information_criteria(loglik: f64, k: usize, n: usize) -> (f64, f64) {
    (
        -2.0 * loglik + 2.0 * k as f64,
        -2.0 * loglik + (n as f64).ln() * k as f64,
    )
}

fn coefficient_table(names: &[String], beta: &DVector<f64>, cov: &DMatrix<f64>) -> Vec<Coefficient> {
    let z = normal_quantile(0.95);
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let se = cov[(i, i)].max(0.0).sqrt();
            Coefficient {
                name: name.clone(),
                estimate: beta[i],
                std_error: se,
                ci_lower: beta[i] - z * se,
                ci_upper: beta[i] + z * se,
            }
        })
        .collect()
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

/// Dispatches on family: closed form for gaussian, quadrature otherwise.
pub fn fit_mixed(spec: &MixedModelSpec, n_agq: usize) -> Result<MixedFitResult> {
    match spec.family {
        Family::Gaussian => fit_lmm(spec),
        _ => fit_glmm(spec, n_agq),
    }
}

struct LmmProfile {
    beta: DVector<f64>,
    sigma2: f64,
    loglik: f64,
    /// `(Xᵀ V⁻¹ X)⁻¹ / σ²`
    xtvx_inv: DMatrix<f64>,
    blups: Vec<f64>,
}

struct LmmData<'a> {
    g: &'a Grouped,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    col_sums: Vec<DVector<f64>>,
    y_sums: Vec<f64>,
}

impl<'a> LmmData<'a> {
    fn new(g: &'a Grouped) -> Self {
        let y = DVector::from_column_slice(&g.y);
        let xtx = g.x.tr_mul(&g.x);
        let xty = g.x.tr_mul(&y);
        let col_sums = g
            .ranges
            .iter()
            .map(|r| g.x.rows(r.start, r.len()).row_sum().transpose())
            .collect();
        let y_sums = g.ranges.iter().map(|r| g.y[r.clone()].iter().sum()).collect();
        Self {
            g,
            xtx,
            xty,
            col_sums,
            y_sums,
        }
    }

    /// Profiled log-likelihood at variance ratio `gamma = σ_u² / σ_ε²`.
    fn profile(&self, gamma: f64) -> Result<LmmProfile> {
        let g = self.g;
        let n = g.y.len() as f64;
        let mut a = self.xtx.clone();
        let mut b = self.xty.clone();
        let mut log_det = 0.0;
        let mut c = Vec::with_capacity(g.m());
        for (i, r) in g.ranges.iter().enumerate() {
            let ni = r.len() as f64;
            let ci = gamma / (1.0 + ni * gamma);
            let s = &self.col_sums[i];
            a.ger(-ci, s, s, 1.0);
            b.axpy(-ci * self.y_sums[i], s, 1.0);
            log_det += (ni * gamma).ln_1p();
            c.push(ci);
        }
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Divergence("mixed-model normal equations are singular".into()))?;
        let beta = chol.solve(&b);
        let fitted = &g.x * &beta;
        let mut rss = 0.0;
        let mut blups = Vec::with_capacity(g.m());
        for (i, r) in g.ranges.iter().enumerate() {
            let mut sr = 0.0;
            for k in r.clone() {
                let e = g.y[k] - fitted[k];
                rss += e * e;
                sr += e;
            }
            rss -= c[i] * sr * sr;
            blups.push(c[i] * sr);
        }
        let sigma2 = rss / n;
        if !(sigma2 > 0.0) {
            return Err(Error::Divergence("residual variance collapsed to zero".into()));
        }
        let loglik = -0.5 * n * ((2.0 * PI * sigma2).ln() + 1.0) - 0.5 * log_det;
        Ok(LmmProfile {
            beta,
            sigma2,
            loglik,
            xtvx_inv: chol.inverse(),
            blups,
        })
    }
}

/// Golden-section maximization of `f` on `[lo, hi]`.
fn golden_max(mut lo: f64, mut hi: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Linear mixed model by maximum likelihood (not REML).
pub fn fit_lmm(spec: &MixedModelSpec) -> Result<MixedFitResult> {
    if spec.family != Family::Gaussian {
        return Err(Error::InvalidInput(format!(
            "fit_lmm needs the gaussian family, got {}",
            spec.family
        )));
    }
    let grouped = Grouped::new(spec)?;
    let data = LmmData::new(&grouped);
    let ll = |omega: f64| data.profile(omega.exp()).map(|p| p.loglik).unwrap_or(f64::NEG_INFINITY);

    let grid: Vec<f64> = (0..=48).map(|k| -16.0 + 0.5 * k as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&w| ll(w)).collect();
    let best = (0..grid.len())
        .max_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("non-empty grid");
    let at_zero = data.profile(0.0)?;
    let mut gamma = if best == 0 {
        0.0
    } else {
        let hi = grid[(best + 1).min(grid.len() - 1)];
        golden_max(grid[best - 1], hi, 1e-10, ll).exp()
    };
    if gamma > 0.0 && data.profile(gamma)?.loglik <= at_zero.loglik {
        gamma = 0.0;
    }
    let prof = data.profile(gamma)?;
    let sigma_u = (gamma * prof.sigma2).sqrt();
    let boundary = gamma == 0.0 || sigma_u.ln() < BOUNDARY_LOG_SIGMA;
    let cov = &prof.xtvx_inv * prof.sigma2;
    let k = spec.p() + 2;
    let (aic, bic) = information_criteria(prof.loglik, k, spec.n());
    Ok(MixedFitResult {
        family: Family::Gaussian,
        n_agq: None,
        coefficients: coefficient_table(&spec.coefficient_names, &prof.beta, &cov),
        sigma_u,
        residual_sigma: Some(prof.sigma2.sqrt()),
        boundary,
        loglik: prof.loglik,
        aic,
        bic,
        n: spec.n(),
        m: grouped.m(),
        n_parameters: k,
        blups: grouped
            .labels
            .iter()
            .zip(&prof.blups)
            .map(|(g, &b)| GroupEffect {
                group: g.clone(),
                blup: b,
            })
            .collect(),
        covariance: matrix_rows(&cov),
        converged: true,
        iterations: grid.len(),
        loglik_trace: Vec::new(),
    })
}

/// Gauss-Hermite rule for `∫ exp(-z²) f(z) dz` (Golub-Welsch).
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 || n > MAX_AGQ {
        return Err(Error::InvalidInput(format!(
            "quadrature order {n} outside 1..={MAX_AGQ}"
        )));
    }
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut rule: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], PI.sqrt() * v0 * v0)
        })
        .collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    if n % 2 == 1 {
        rule[n / 2].0 = 0.0;
    }
    Ok(rule.into_iter().unzip())
}

/// Log-likelihood pieces of one row at linear predictor `eta`:
/// value, score `s`, weight `w = -s'`, and `w'`.
#[inline]
fn row_terms(family: Family, y: f64, eta: f64, inv_se2: f64, half_log_2pi_se2: f64) -> (f64, f64, f64, f64) {
    match family {
        Family::Gaussian => {
            let r = y - eta;
            (-0.5 * r * r * inv_se2 - half_log_2pi_se2, r * inv_se2, inv_se2, 0.0)
        }
        Family::SoftPoisson => {
            let mu = eta.exp();
            (y * eta - mu, y - mu, mu, mu)
        }
        Family::SoftBinomial => {
            let mu = logistic(eta);
            let w = mu * (1.0 - mu);
            (y * eta - softplus(eta), y - mu, w, w * (1.0 - 2.0 * mu))
        }
    }
}

#[derive(Clone, Copy)]
struct Scales {
    sigma2: f64,
    inv_s2: f64,
    inv_se2: f64,
    half_log_2pi_se2: f64,
}

/// Negative approximate marginal log-likelihood over
/// `θ = (β, log σ_u[, log σ_ε])`; the last entry only for gaussian.
struct Objective<'a> {
    data: &'a Grouped,
    family: Family,
    p: usize,
    nodes: Vec<f64>,
    /// `ln w_k + z_k²`
    log_weights: Vec<f64>,
    modes: Vec<f64>,
}

impl<'a> Objective<'a> {
    fn new(data: &'a Grouped, family: Family, n_agq: usize) -> Result<Self> {
        let (nodes, weights) = gauss_hermite(n_agq)?;
        let log_weights = nodes.iter().zip(&weights).map(|(z, w)| w.ln() + z * z).collect();
        Ok(Self {
            data,
            family,
            p: data.x.ncols(),
            nodes,
            log_weights,
            modes: vec![0.0; data.m()],
        })
    }

    fn q(&self) -> usize {
        self.p + 1 + usize::from(self.family == Family::Gaussian)
    }

    fn scales(&self, theta: &DVector<f64>) -> Scales {
        let sigma2 = (2.0 * theta[self.p]).exp();
        let (inv_se2, half) = if self.family == Family::Gaussian {
            let le = theta[self.p + 1];
            ((-2.0 * le).exp(), 0.5 * (2.0 * PI).ln() + le)
        } else {
            (0.0, 0.0)
        };
        Scales {
            sigma2,
            inv_s2: 1.0 / sigma2,
            inv_se2,
            half_log_2pi_se2: half,
        }
    }

    /// `f(u)`, `f'(u)` and `-f''(u)` for one group's joint log density.
    fn joint(&self, rows: Range<usize>, eta0: &DVector<f64>, u: f64, sc: Scales) -> (f64, f64, f64) {
        let (mut f, mut fp, mut h) = (-0.5 * u * u * sc.inv_s2, -u * sc.inv_s2, sc.inv_s2);
        for i in rows {
            let (l, s, w, _) = row_terms(self.family, self.data.y[i], eta0[i] + u, sc.inv_se2, sc.half_log_2pi_se2);
            f += l;
            fp += s;
            h += w;
        }
        (f, fp, h)
    }

    fn mode(&self, g: usize, eta0: &DVector<f64>, sc: Scales) -> Result<f64> {
        let rows = self.data.ranges[g].clone();
        let mut u = self.modes[g];
        let (mut f, mut fp, mut h) = self.joint(rows.clone(), eta0, u, sc);
        if !f.is_finite() {
            u = 0.0;
            (f, fp, h) = self.joint(rows.clone(), eta0, u, sc);
        }
        for _ in 0..INNER_MAX_ITER {
            let step = fp / h;
            let mut t = 1.0;
            loop {
                let cand = u + t * step;
                let (fc, fpc, hc) = self.joint(rows.clone(), eta0, cand, sc);
                if fc.is_finite() && fc >= f - 1e-12 * (1.0 + f.abs()) {
                    u = cand;
                    (f, fp, h) = (fc, fpc, hc);
                    break;
                }
                t *= 0.5;
                if t < 1e-10 {
                    return Err(Error::Divergence(format!(
                        "conditional mode search stalled for group '{}'",
                        self.data.labels[g]
                    )));
                }
            }
            if (t * step).abs() <= 1e-12 * (1.0 + u.abs()) {
                return Ok(u);
            }
        }
        Err(Error::Divergence(format!(
            "conditional mode did not converge for group '{}'",
            self.data.labels[g]
        )))
    }

    /// Value and gradient of the negative log-likelihood; also stores the
    /// conditional modes.
    fn eval(&mut self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (p, q) = (self.p, self.q());
        let gauss = self.family == Family::Gaussian;
        let sc = self.scales(theta);
        let eta0 = &self.data.x * theta.rows(0, p);
        let sqrt2 = 2f64.sqrt();
        let mut total = 0.0;
        let mut grad = DVector::zeros(q);
        let mut modes = vec![0.0; self.data.m()];

        let mut df = DVector::zeros(q);
        let mut dh = DVector::zeros(q);
        let mut part = DVector::zeros(q);
        let mut acc = DVector::zeros(q);
        for g in 0..self.data.m() {
            let rows = self.data.ranges[g].clone();
            let u_hat = self.mode(g, &eta0, sc)?;
            modes[g] = u_hat;

            // implicit derivatives of the mode and curvature
            df.fill(0.0);
            dh.fill(0.0);
            let mut h = sc.inv_s2;
            let mut sum_s = 0.0;
            for i in rows.clone() {
                let (_, s, w, wp) = row_terms(self.family, self.data.y[i], eta0[i] + u_hat, sc.inv_se2, sc.half_log_2pi_se2);
                h += w;
                sum_s += s;
                for k in 0..p {
                    let xik = self.data.x[(i, k)];
                    df[k] -= w * xik;
                    dh[k] += wp * xik;
                }
            }
            df[p] = 2.0 * u_hat * sc.inv_s2;
            if gauss {
                df[p + 1] = -2.0 * sum_s;
            }
            let du = &df / h;
            let sum_wp: f64 = if gauss {
                0.0
            } else {
                rows.clone()
                    .map(|i| row_terms(self.family, self.data.y[i], eta0[i] + u_hat, 0.0, 0.0).3)
                    .sum()
            };
            for k in 0..q {
                dh[k] += sum_wp * du[k];
            }
            dh[p] -= 2.0 * sc.inv_s2;
            if gauss {
                dh[p + 1] -= 2.0 * rows.len() as f64 * sc.inv_se2;
            }
            let s_hat = 1.0 / h.sqrt();
            let dlog_s = &dh * (-0.5 / h);
            let ds = &dlog_s * s_hat;

            // quadrature over u = û + √2 ŝ z
            let mut log_terms = Vec::with_capacity(self.nodes.len());
            acc.fill(0.0);
            let mut node_grads = Vec::with_capacity(self.nodes.len());
            for (k, &z) in self.nodes.iter().enumerate() {
                let u = u_hat + sqrt2 * s_hat * z;
                part.fill(0.0);
                let mut f = -0.5 * u * u * sc.inv_s2;
                let mut fp = -u * sc.inv_s2;
                let mut r2 = 0.0;
                for i in rows.clone() {
                    let (l, s, _, _) = row_terms(self.family, self.data.y[i], eta0[i] + u, sc.inv_se2, sc.half_log_2pi_se2);
                    f += l;
                    fp += s;
                    for c in 0..p {
                        part[c] += s * self.data.x[(i, c)];
                    }
                    if gauss {
                        let r = self.data.y[i] - eta0[i] - u;
                        r2 += r * r * sc.inv_se2 - 1.0;
                    }
                }
                part[p] = u * u * sc.inv_s2;
                if gauss {
                    part[p + 1] = r2;
                }
                let du_k = &du + &ds * (sqrt2 * z);
                part.axpy(fp, &du_k, 1.0);
                log_terms.push(self.log_weights[k] + f);
                node_grads.push(part.clone());
            }
            let top = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !top.is_finite() {
                return Err(Error::NonFinite(format!(
                    "approximate likelihood of group '{}'",
                    self.data.labels[g]
                )));
            }
            let sum_exp: f64 = log_terms.iter().map(|t| (t - top).exp()).sum();
            for (t, ng) in log_terms.iter().zip(&node_grads) {
                acc.axpy((t - top).exp() / sum_exp, ng, 1.0);
            }
            let log_l = 0.5 * LN_2 + s_hat.ln() + top + sum_exp.ln() - 0.5 * (2.0 * PI * sc.sigma2).ln();
            total += log_l;
            grad += &dlog_s + &acc;
            grad[p] -= 1.0;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("approximate marginal log-likelihood".into()));
        }
        self.modes = modes;
        Ok((-total, -grad))
    }

    /// Central-difference Hessian of the analytic gradient.
    fn hessian(&mut self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let q = theta.len();
        let saved = self.modes.clone();
        let mut hess = DMatrix::zeros(q, q);
        for j in 0..q {
            let h = 1e-4 * (1.0 + theta[j].abs());
            let mut tp = theta.clone();
            tp[j] += h;
            let gp = self.eval(&tp)?.1;
            let mut tm = theta.clone();
            tm[j] -= h;
            let gm = self.eval(&tm)?.1;
            hess.set_column(j, &((gp - gm) / (2.0 * h)));
        }
        self.modes = saved;
        Ok((&hess + hess.transpose()) * 0.5)
    }
}

struct OuterResult {
    theta: DVector<f64>,
    value: f64,
    gradient: DVector<f64>,
    iterations: usize,
    trace: Vec<f64>,
}

fn bfgs(obj: &mut Objective, theta0: DVector<f64>) -> Result<OuterResult> {
    let q = theta0.len();
    let mut x = theta0;
    let (mut f, mut g) = obj.eval(&x)?;
    let mut hinv = DMatrix::identity(q, q);
    let mut scaled = false;
    let mut trace = vec![f];
    let mut iterations = 0;
    while iterations < BFGS_MAX_ITER && g.amax() > BFGS_GTOL {
        iterations += 1;
        let mut d = -(&hinv * &g);
        if d.dot(&g) >= 0.0 {
            hinv = DMatrix::identity(q, q);
            d = -g.clone();
        }
        let norm = d.norm();
        if norm > MAX_STEP {
            d *= MAX_STEP / norm;
        }
        let slope = g.dot(&d);
        let mut alpha = 1.0;
        let accepted = loop {
            let trial = &x + &d * alpha;
            if let Ok((ft, gt)) = obj.eval(&trial) {
                if ft <= f + 1e-4 * alpha * slope {
                    break Some((trial, ft, gt));
                }
            }
            alpha *= 0.5;
            if alpha < 1e-14 {
                break None;
            }
        };
        let Some((x_new, f_new, g_new)) = accepted else {
            debug!("line search stalled at |g| = {:e}", g.amax());
            break;
        };
        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if !scaled {
                hinv = DMatrix::identity(q, q) * (sy / yv.norm_squared());
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            // H' = H - ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            hinv.ger(-rho, &hy, &s, 1.0);
            hinv.ger(-rho, &s, &hy, 1.0);
            hinv.ger(rho * rho * yhy + rho, &s, &s, 1.0);
        }
        let small = (f - f_new).abs() <= 1e-15 * (1.0 + f.abs());
        x = x_new;
        f = f_new;
        g = g_new;
        trace.push(f);
        if small && s.amax() < 1e-12 {
            break;
        }
    }
    Ok(OuterResult {
        theta: x,
        value: f,
        gradient: g,
        iterations,
        trace,
    })
}

fn starting_values(spec: &MixedModelSpec, grouped: &Grouped) -> Result<DVector<f64>> {
    let glm = fit_glm(&spec.y, &spec.x, spec.family)?;
    let p = spec.p();
    let q = p + 1 + usize::from(spec.family == Family::Gaussian);
    let mut theta = DVector::zeros(q);
    for k in 0..p {
        theta[k] = glm.coefficients[k];
    }
    let beta = DVector::from_column_slice(&glm.coefficients);
    let eta = &grouped.x * beta;
    let means: Vec<f64> = grouped
        .ranges
        .iter()
        .map(|r| {
            let (sy, smu) = r.clone().fold((0.0, 0.0), |(a, b), i| {
                (a + grouped.y[i], b + spec.family.inverse_link(eta[i]))
            });
            match spec.family {
                Family::SoftPoisson if sy > 0.0 && smu > 0.0 => (sy / smu).ln(),
                _ => (sy - smu) / r.len() as f64,
            }
        })
        .collect();
    let m = means.len() as f64;
    let centre = means.iter().sum::<f64>() / m;
    let sd = (means.iter().map(|v| (v - centre).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    theta[p] = sd.max(0.1).ln();
    if spec.family == Family::Gaussian {
        theta[p + 1] = glm.dispersion.sqrt().ln();
    }
    Ok(theta)
}

/// Negative approximate log-likelihood and its gradient at `theta =
/// (β, log σ_u[, log σ_ε])`, exposed for gradient checks.
pub fn outer_objective(spec: &MixedModelSpec, theta: &[f64], n_agq: usize) -> Result<(f64, Vec<f64>)> {
    let grouped = Grouped::new(spec)?;
    let mut obj = Objective::new(&grouped, spec.family, n_agq)?;
    if theta.len() != obj.q() {
        return Err(Error::DimensionMismatch {
            what: "outer parameter vector",
            expected: obj.q(),
            found: theta.len(),
        });
    }
    let (f, g) = obj.eval(&DVector::from_column_slice(theta))?;
    Ok((f, g.iter().cloned().collect()))
}

/// Generalized linear mixed model by adaptive Gauss-Hermite quadrature
/// (`n_agq = 1` is Laplace). A gaussian family is accepted and fitted with
/// an explicit `log σ_ε`, for which Laplace is exact.
pub fn fit_glmm(spec: &MixedModelSpec, n_agq: usize) -> Result<MixedFitResult> {
    let grouped = Grouped::new(spec)?;
    let mut obj = Objective::new(&grouped, spec.family, n_agq)?;
    let p = spec.p();
    let theta0 = starting_values(spec, &grouped)?;
    let mut out = bfgs(&mut obj, theta0)?;

    // Newton polish on the finite-difference Hessian; the same Hessian then
    // gives the Wald covariance.
    let mut hess = obj.hessian(&out.theta)?;
    for _ in 0..5 {
        if out.gradient.amax() < 1e-9 {
            break;
        }
        let Some(chol) = hess.clone().cholesky() else { break };
        let step = chol.solve(&out.gradient);
        let cand = &out.theta - step;
        match obj.eval(&cand) {
            Ok((f, g)) if f <= out.value + 1e-12 * (1.0 + out.value.abs()) && g.amax() < out.gradient.amax() => {
                out.theta = cand;
                out.value = f;
                out.gradient = g;
                out.trace.push(f);
                hess = obj.hessian(&out.theta)?;
            }
            _ => break,
        }
    }
    // refresh modes at the final estimate
    let (value, gradient) = obj.eval(&out.theta)?;
    out.value = value;
    out.gradient = gradient;

    let theta = &out.theta;
    let boundary = theta[p] < BOUNDARY_LOG_SIGMA;
    let block = if boundary {
        hess.view((0, 0), (p, p)).into_owned()
    } else {
        hess.clone()
    };
    let inv = block
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| block.try_inverse())
        .ok_or_else(|| Error::Divergence("outer Hessian is singular".into()))?;
    let cov = inv.view((0, 0), (p, p)).into_owned();
    if (0..p).any(|i| !(cov[(i, i)] >= 0.0)) {
        warn!("Wald covariance has a negative diagonal entry; the fit may not be at a maximum");
    }

    let converged = out.gradient.amax() <= FINAL_GTOL;
    if !converged {
        warn!(
            "outer optimizer stopped with max |gradient| = {:e} after {} iterations",
            out.gradient.amax(),
            out.iterations
        );
    }
    let loglik = -out.value;
    let k = obj.q();
    let (aic, bic) = information_criteria(loglik, k, spec.n());
    let beta = theta.rows(0, p).into_owned();
    Ok(MixedFitResult {
        family: spec.family,
        n_agq: Some(n_agq),
        coefficients: coefficient_table(&spec.coefficient_names, &beta, &cov),
        sigma_u: theta[p].exp(),
        residual_sigma: (spec.family == Family::Gaussian).then(|| theta[p + 1].exp()),
        boundary,
        loglik,
        aic,
        bic,
        n: spec.n(),
        m: grouped.m(),
        n_parameters: k,
        blups: grouped
            .labels
            .iter()
            .zip(&obj.modes)
            .map(|(g, &b)| GroupEffect {
                group: g.clone(),
                blup: b,
            })
            .collect(),
        covariance: matrix_rows(&cov),
        converged,
        iterations: out.iterations,
        loglik_trace: out.trace.iter().map(|v| -v).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as Gauss, Poisson};

    fn poisson_spec(m: usize, n: usize, sigma_u: f64, seed: u64) -> MixedModelSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Gauss::new(0.0, 1.0).unwrap();
        let mut x = DMatrix::zeros(m * n, 3);
        let mut y = DVector::zeros(m * n);
        let mut groups = Vec::new();
        for g in 0..m {
            let u = sigma_u * std.sample(&mut rng);
            for j in 0..n {
                let i = g * n + j;
                x[(i, 0)] = 1.0;
                x[(i, 1)] = std.sample(&mut rng);
                x[(i, 2)] = (rng.random::<f64>() < 0.5) as u8 as f64;
                let eta = 1.0 + 0.3 * x[(i, 1)] - 0.5 * x[(i, 2)] + u;
                y[i] = Poisson::new(eta.exp()).unwrap().sample(&mut rng);
                groups.push(format!("g{g}"));
            }
        }
        let names = vec!["(Intercept)".into(), "x1".into(), "x2".into()];
        MixedModelSpec::new(Family::SoftPoisson, y, x, groups, names).unwrap()
    }

    fn gaussian_spec(m: usize, n: usize, seed: u64) -> MixedModelSpec {
        let mut spec = poisson_spec(m, n, 0.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let std = Gauss::new(0.0, 1.0).unwrap();
        let mut u = 0.0;
        for i in 0..spec.n() {
            if i % n == 0 {
                u = 0.7 * std.sample(&mut rng);
            }
            spec.y[i] = 2.0 + spec.x[(i, 1)] - 0.4 * spec.x[(i, 2)] + u + 0.5 * std.sample(&mut rng);
        }
        spec.family = Family::Gaussian;
        spec
    }

    #[test]
    fn hermite_rules() {
        let (z, w) = gauss_hermite(1).unwrap();
        assert_eq!(z, vec![0.0]);
        assert!((w[0] - PI.sqrt()).abs() < 1e-14);
        let (z, w) = gauss_hermite(7).unwrap();
        let moment = |k: i32| z.iter().zip(&w).map(|(z, w)| w * z.powi(k)).sum::<f64>();
        assert!((moment(0) - PI.sqrt()).abs() < 1e-13);
        assert!((moment(4) - 0.75 * PI.sqrt()).abs() < 1e-12);
        assert!((moment(12) - 10395.0 / 64.0 * PI.sqrt()).abs() < 1e-9);
        assert!(moment(5).abs() < 1e-12);
        assert!(gauss_hermite(0).is_err() && gauss_hermite(26).is_err());
    }

    #[test]
    fn outer_gradient_matches_finite_differences() {
        let spec = poisson_spec(8, 15, 0.5, 3);
        for n_agq in [1, 5] {
            let theta = [0.9, 0.25, -0.4, (0.6f64).ln()];
            let (_, g) = outer_objective(&spec, &theta, n_agq).unwrap();
            for k in 0..theta.len() {
                let h = 1e-5;
                let mut tp = theta;
                tp[k] += h;
                let mut tm = theta;
                tm[k] -= h;
                let fd = (outer_objective(&spec, &tp, n_agq).unwrap().0 - outer_objective(&spec, &tm, n_agq).unwrap().0) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + g[k].abs()), "agq {n_agq} k {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn laplace_is_exact_for_gaussian() {
        let spec = gaussian_spec(12, 20, 5);
        let lmm = fit_lmm(&spec).unwrap();
        let lap = fit_glmm(&spec, 1).unwrap();
        assert!((lmm.loglik - lap.loglik).abs() < 1e-8, "{} vs {}", lmm.loglik, lap.loglik);
        for (a, b) in lmm.beta().iter().zip(lap.beta()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!((lmm.sigma_u - lap.sigma_u).abs() < 1e-5);
    }

    #[test]
    fn one_way_anova_oracle() {
        let (m, n) = (9, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut y = DVector::zeros(m * n);
        let mut groups = Vec::new();
        for g in 0..m {
            let u: f64 = rng.random::<f64>() * 3.0;
            for j in 0..n {
                y[g * n + j] = u + rng.random::<f64>();
                groups.push(format!("{g}"));
            }
        }
        let spec = MixedModelSpec::new(Family::Gaussian, y.clone(), DMatrix::from_element(m * n, 1, 1.0), groups, vec!["(Intercept)".into()]).unwrap();
        let fit = fit_lmm(&spec).unwrap();

        let grand = y.mean();
        let means: Vec<f64> = (0..m).map(|g| y.rows(g * n, n).mean()).collect();
        let ssb: f64 = means.iter().map(|v| n as f64 * (v - grand).powi(2)).sum();
        let ssw: f64 = (0..m * n).map(|i| (y[i] - means[i / n]).powi(2)).sum();
        let msw = ssw / (m * (n - 1)) as f64;
        let su2 = (ssb / m as f64 - msw) / n as f64;
        assert!(su2 > 0.0);
        assert!((fit.sigma_u.powi(2) - su2).abs() < 1e-7, "{} vs {su2}", fit.sigma_u.powi(2));
        assert!((fit.residual_sigma.unwrap().powi(2) - msw).abs() < 1e-7);
        assert!((fit.beta()[0] - grand).abs() < 1e-10);
    }

    #[test]
    fn single_group_is_unidentifiable() {
        let mut spec = poisson_spec(2, 10, 0.3, 1);
        spec.groups = vec!["only".into(); spec.n()];
        let err = fit_glmm(&spec, 1).unwrap_err();
        assert!(matches!(err, Error::Identifiability(_)));
        spec.family = Family::Gaussian;
        assert!(matches!(fit_lmm(&spec), Err(Error::Identifiability(_))));
    }

    #[test]
    fn no_between_group_variance_hits_boundary() {
        let mut spec = gaussian_spec(10, 20, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..spec.n() {
            spec.y[i] = rng.random::<f64>();
        }
        let means: Vec<f64> = (0..10).map(|g| spec.y.rows(g * 20, 20).mean()).collect();
        let total: f64 = means.iter().sum::<f64>() / 10.0;
        for i in 0..spec.n() {
            spec.y[i] += total - means[i / 20];
        }
        let fit = fit_lmm(&spec).unwrap();
        assert!(fit.sigma_u < 1e-6 && fit.boundary);
    }

    #[test]
    fn permutation_and_relabelling_invariance() {
        let spec = poisson_spec(10, 12, 0.5, 8);
        let base = fit_glmm(&spec, 1).unwrap();

        let mut perm = spec.clone();
        let mut order: Vec<usize> = (0..spec.n()).collect();
        order.reverse();
        perm.x = spec.x.select_rows(order.iter());
        perm.y = DVector::from_iterator(spec.n(), order.iter().map(|&i| spec.y[i]));
        perm.groups = order.iter().map(|&i| format!("z{}", spec.groups[i])).collect();
        let other = fit_glmm(&perm, 1).unwrap();
        for (a, b) in base.beta().iter().zip(other.beta()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!((base.sigma_u - other.sigma_u).abs() < 1e-10);
        for e in &base.blups {
            assert!((e.blup - other.blup(&format!("z{}", e.group)).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn quadrature_orders_agree() {
        let spec = poisson_spec(20, 30, 0.5, 21);
        let lap = fit_glmm(&spec, 1).unwrap();
        let agq = fit_glmm(&spec, 7).unwrap();
        assert!(lap.converged && agq.converged);
        assert!((lap.loglik - agq.loglik).abs() < 5e-3 * 20.0);
        for (a, b) in lap.beta().iter().zip(agq.beta()) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!(lap.loglik_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }

    #[test]
    fn wald_examples() {
        let mut fit = fit_lmm(&gaussian_spec(5, 10, 1)).unwrap();
        fit.coefficients[0].estimate = 1.508;
        fit.coefficients[0].std_error = 0.033;
        fit.coefficients[1].std_error = 0.0;
        let ci = wald_ci(&fit, 0.95).unwrap();
        assert!((ci[0].0 - 1.4433).abs() < 5e-5 && (ci[0].1 - 1.5727).abs() < 5e-5);
        assert_eq!(ci[1].0, ci[1].1);
        let wide = wald_ci(&fit, 0.99).unwrap();
        assert!(wide[0].0 < ci[0].0 && wide[0].1 > ci[0].1);
    }

    #[test]
    fn prediction() {
        let spec = gaussian_spec(6, 10, 4);
        let fit = fit_lmm(&spec).unwrap();
        let x = spec.x.rows(0, 2).into_owned();
        let fresh = predict(&fit, &x, &["new".into(), "new".into()]).unwrap();
        let xb = &x * DVector::from_vec(fit.beta());
        assert_eq!(fresh, xb.iter().cloned().collect::<Vec<_>>());
        let known = predict(&fit, &x, &[spec.groups[0].clone(), spec.groups[0].clone()]).unwrap();
        assert!((known[0] - xb[0] - fit.blup(&spec.groups[0]).unwrap()).abs() < 1e-12);
        assert!(predict(&fit, &DMatrix::zeros(1, 2), &["a".into()]).is_err());

        let pfit = MixedFitResult {
            family: Family::SoftPoisson,
            ..fit
        };
        let one = predict(&pfit, &DMatrix::zeros(1, 3), &["new".into()]).unwrap();
        assert_eq!(one, vec![1.0]);
    }
}
