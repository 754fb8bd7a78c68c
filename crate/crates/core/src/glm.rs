//! Exponential-family regression by iteratively reweighted least squares.
//!
//! The two "soft" families accept any real response: their validity checks
//! are gone and every term that depends on the response alone (the saturated
//! log-likelihood in the deviance, `log C(1,y)` or `log y!` in the AIC) is left
//! out. Those terms carry no parameters, so estimates are unaffected and AIC
//! differences between models fitted to the same response are preserved.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicBool, Ordering};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const MU_EPS: f64 = 1e-12;
const IRLS_MAX_ITER: usize = 50;
const IRLS_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 10;

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Identity link, `V(μ) = 1`, dispersion estimated.
    Gaussian,
    /// Logit link, `V(μ) = μ(1-μ)`, any real response.
    SoftBinomial,
    /// Log link, `V(μ) = μ`, any real response.
    SoftPoisson,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "soft_binomial" | "binomial" => Ok(Family::SoftBinomial),
            "soft_poisson" | "poisson" => Ok(Family::SoftPoisson),
            other => Err(Error::InvalidInput(format!(
                "unknown family '{other}' (expected gaussian, soft_binomial or soft_poisson)"
            ))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub(crate) fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
pub(crate) fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::SoftBinomial => "soft_binomial",
            Family::SoftPoisson => "soft_poisson",
        }
    }

    pub fn estimates_dispersion(&self) -> bool {
        matches!(self, Family::Gaussian)
    }

    pub fn link(&self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::SoftBinomial => (mu / (1.0 - mu)).ln(),
            Family::SoftPoisson => mu.ln(),
        }
    }

    pub fn inverse_link(&self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::SoftBinomial => logistic(eta),
            Family::SoftPoisson => eta.exp(),
        }
    }

    /// `dμ/dη`
    pub fn mu_eta(&self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::SoftBinomial => {
                let mu = logistic(eta);
                (mu * (1.0 - mu)).max(f64::MIN_POSITIVE)
            }
            Family::SoftPoisson => eta.exp().max(f64::MIN_POSITIVE),
        }
    }

    pub fn variance(&self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::SoftBinomial => mu * (1.0 - mu),
            Family::SoftPoisson => mu,
        }
    }

    /// Starting mean for IRLS.
    pub fn mu_init(&self, y: f64) -> f64 {
        match self {
            Family::Gaussian => y,
            Family::SoftBinomial => ((y + 0.5) / 2.0).clamp(1e-3, 1.0 - 1e-3),
            Family::SoftPoisson => y.max(0.1),
        }
    }

    /// Per-observation deviance with the saturated term dropped. For the
    /// gaussian family this is the squared residual.
    pub fn deviance_contribution(&self, y: f64, mu: f64) -> f64 {
        match self {
            Family::Gaussian => (y - mu).powi(2),
            Family::SoftBinomial => {
                let m = mu.clamp(MU_EPS, 1.0 - MU_EPS);
                if m != mu && !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
                    warn!("soft_binomial fitted value {mu} clamped to [{MU_EPS}, {}]", 1.0 - MU_EPS);
                }
                -2.0 * (y * m.ln() + (1.0 - y) * (1.0 - m).ln())
            }
            Family::SoftPoisson => -2.0 * (y * mu.ln() - mu),
        }
    }

    /// The response-only log-likelihood term the soft families leave out,
    /// when it is defined: `Σ log C(1, y)` (binary `y`) or `-Σ log y!`
    /// (non-negative integer `y`). Gaussian keeps its full likelihood.
    pub fn dropped_response_term(&self, y: &[f64]) -> Option<f64> {
        match self {
            Family::Gaussian => Some(0.0),
            Family::SoftBinomial => y.iter().all(|&v| v == 0.0 || v == 1.0).then_some(0.0),
            Family::SoftPoisson => {
                if y.iter().all(|&v| v >= 0.0 && v.fract() == 0.0) {
                    Some(-y.iter().map(|&v| ln_gamma(v + 1.0)).sum::<f64>())
                } else {
                    None
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: Family,
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Log-likelihood at the fit, response-only terms excluded for soft families.
    pub loglik_fitted: f64,
    pub aic: f64,
    pub bic: f64,
    /// Sum of deviance contributions (saturated term excluded).
    pub deviance: f64,
    pub dispersion: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n: usize,
    pub p_model: usize,
    pub fitted: Vec<f64>,
}

impl FitResult {
    /// Number of estimated parameters, including a gaussian scale.
    pub fn n_parameters(&self) -> usize {
        self.p_model + usize::from(self.family.estimates_dispersion())
    }
}

/// AIC with response-only terms omitted for soft families.
pub fn truncated_aic(fit: &FitResult) -> f64 {
    -2.0 * fit.loglik_fitted + 2.0 * fit.n_parameters() as f64
}

/// BIC with the same truncation as [`truncated_aic`].
pub fn truncated_bic(fit: &FitResult) -> f64 {
    -2.0 * fit.loglik_fitted + (fit.n as f64).ln() * fit.n_parameters() as f64
}

/// Numerical rank from a column-pivoted QR.
pub(crate) fn numerical_rank(x: &DMatrix<f64>) -> usize {
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let top = diag.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    let tol = 1e-10 * top * (x.nrows().max(x.ncols()) as f64);
    diag.iter().filter(|&&d| d > tol).count()
}

pub(crate) fn check_design(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "design rows",
            expected: y.len(),
            found: x.nrows(),
        });
    }
    if x.ncols() == 0 || x.nrows() <= x.ncols() {
        return Err(Error::InvalidInput(format!(
            "need more observations ({}) than coefficients ({})",
            x.nrows(),
            x.ncols()
        )));
    }
    if !y.iter().chain(x.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("model data".into()));
    }
    let rank = numerical_rank(x);
    if rank < x.ncols() {
        return Err(Error::RankDeficient {
            rank,
            cols: x.ncols(),
        });
    }
    Ok(())
}

fn total_deviance(family: Family, y: &DVector<f64>, mu: &DVector<f64>) -> f64 {
    y.iter().zip(mu.iter()).map(|(&yi, &mi)| family.deviance_contribution(yi, mi)).sum()
}

/// Weighted least squares step: `(XᵀWX)⁻¹XᵀWz` together with `XᵀWX`.
fn wls(x: &DMatrix<f64>, w: &DVector<f64>, z: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = x.ncols();
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwz = DVector::zeros(p);
    let mut xw = x.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    xtwx.gemm_tr(1.0, &xw, x, 0.0);
    xtwz.gemv_tr(1.0, &xw, z, 0.0);
    let chol = xtwx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Divergence("weighted cross-product is not positive definite".into()))?;
    Ok((chol.solve(&xtwz), xtwx))
}

/// Fits a fixed-effects GLM by IRLS with step halving.
pub fn fit_glm(y: &DVector<f64>, x: &DMatrix<f64>, family: Family) -> Result<FitResult> {
    check_design(y, x)?;
    let n = y.len();
    let p = x.ncols();

    let mut mu = y.map(|v| family.mu_init(v));
    let mut eta = mu.map(|m| family.link(m));
    let mut dev = total_deviance(family, y, &mu);
    let mut beta: Option<DVector<f64>> = None;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=IRLS_MAX_ITER {
        iterations = iter;
        let d = eta.map(|e| family.mu_eta(e));
        let w = DVector::from_fn(n, |i, _| d[i] * d[i] / family.variance(mu[i]));
        let z = DVector::from_fn(n, |i, _| eta[i] + (y[i] - mu[i]) / d[i]);
        if !w.iter().chain(z.iter()).all(|v| v.is_finite()) {
            return Err(Error::Divergence("non-finite IRLS working weights".into()));
        }
        let (mut beta_new, _) = wls(x, &w, &z)?;
        let mut eta_new = x * &beta_new;
        let mut mu_new = eta_new.map(|e| family.inverse_link(e));
        let mut dev_new = total_deviance(family, y, &mu_new);

        let mut halvings = 0;
        while !(dev_new.is_finite() && dev_new <= dev + 1e-12 * dev.abs()) {
            let Some(old) = &beta else { break };
            if halvings == MAX_HALVINGS {
                return Err(Error::Divergence(
                    "IRLS deviance did not decrease after step halving".into(),
                ));
            }
            beta_new = (&beta_new + old) * 0.5;
            eta_new = x * &beta_new;
            mu_new = eta_new.map(|e| family.inverse_link(e));
            dev_new = total_deviance(family, y, &mu_new);
            halvings += 1;
        }
        if !dev_new.is_finite() {
            return Err(Error::Divergence("non-finite deviance".into()));
        }

        let change = (dev_new - dev).abs() / (dev_new.abs() + 0.1);
        beta = Some(beta_new);
        eta = eta_new;
        mu = mu_new;
        dev = dev_new;
        if change < IRLS_TOL {
            converged = true;
            break;
        }
    }
    let beta = beta.expect("at least one IRLS iteration");

    let d = eta.map(|e| family.mu_eta(e));
    let w = DVector::from_fn(n, |i, _| d[i] * d[i] / family.variance(mu[i]));
    let (_, xtwx) = wls(x, &w, &eta)?;
    let dispersion = if family.estimates_dispersion() {
        dev / (n - p) as f64
    } else {
        1.0
    };
    let inv = xtwx
        .try_inverse()
        .ok_or_else(|| Error::Divergence("information matrix is singular".into()))?;
    let cov = inv * dispersion;

    let loglik = match family {
        Family::Gaussian => -0.5 * n as f64 * ((2.0 * PI * dev / n as f64).ln() + 1.0),
        Family::SoftBinomial | Family::SoftPoisson => -0.5 * dev,
    };

    let mut fit = FitResult {
        family,
        coefficients: beta.iter().cloned().collect(),
        standard_errors: (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        covariance: (0..p).map(|i| cov.row(i).iter().cloned().collect()).collect(),
        loglik_fitted: loglik,
        aic: 0.0,
        bic: 0.0,
        deviance: dev,
        dispersion,
        converged,
        iterations,
        n,
        p_model: p,
        fitted: mu.iter().cloned().collect(),
    };
    fit.aic = truncated_aic(&fit);
    fit.bic = truncated_bic(&fit);
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn design(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() * 2.0 - 1.0 })
    }

    #[test]
    fn gaussian_is_ols() {
        let x = design(40, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = DVector::from_fn(40, |i, _| 1.0 + 2.0 * x[(i, 1)] + rng.random::<f64>());
        let fit = fit_glm(&y, &x, Family::Gaussian).unwrap();
        let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
        for (a, b) in fit.coefficients.iter().zip(ols.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        let rss: f64 = (&y - &x * &ols).norm_squared();
        assert!((fit.dispersion - rss / 37.0).abs() < 1e-10);
    }

    #[test]
    fn poisson_intercept_only_is_log_mean() {
        let y = DVector::from_vec(vec![1.0, 4.0, 2.5, 7.0, 0.5]);
        let x = DMatrix::from_element(5, 1, 1.0);
        let fit = fit_glm(&y, &x, Family::SoftPoisson).unwrap();
        assert!((fit.coefficients[0] - 3.0f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn soft_families_accept_unconstrained_responses() {
        let x = design(60, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let yb = DVector::from_fn(60, |i, _| {
            (rng.random::<f64>() < logistic(x[(i, 1)])) as u8 as f64 + 0.05 * rng.random::<f64>() - 0.025
        });
        let fit = fit_glm(&yb, &x, Family::SoftBinomial).unwrap();
        assert!(fit.converged);
        let yp = DVector::from_fn(60, |i, _| (1.0 + x[(i, 2)]).exp() + rng.random::<f64>() - 0.8);
        assert!(yp.iter().any(|&v| v < 0.0 || v.fract() != 0.0));
        let fit = fit_glm(&yp, &x, Family::SoftPoisson).unwrap();
        assert!(fit.converged);
    }

    #[test]
    fn score_vanishes_at_optimum() {
        let x = design(200, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = DVector::from_fn(200, |i, _| {
            Poisson::new((0.5 + 0.8 * x[(i, 1)]).exp()).unwrap().sample(&mut rng)
        });
        for family in [Family::SoftPoisson, Family::SoftBinomial, Family::Gaussian] {
            let yy = if family == Family::SoftBinomial { y.map(|v| (v > 1.0) as u8 as f64) } else { y.clone() };
            let fit = fit_glm(&yy, &x, family).unwrap();
            let mu = DVector::from_vec(fit.fitted.clone());
            let score = x.transpose() * (&yy - mu);
            assert!(score.amax() < 1e-6, "{family}: {score}");
        }
    }

    #[test]
    fn deviance_contribution_examples() {
        let eps = 1e-13;
        assert!(Family::SoftBinomial.deviance_contribution(1.0, 1.0 - eps) < 1e-11);
        let lam = 0.7;
        assert!((Family::SoftPoisson.deviance_contribution(0.0, lam) - 2.0 * lam).abs() < 1e-15);
        let truncated = Family::SoftPoisson.deviance_contribution(2.0, 1.0);
        assert!((truncated - 2.0).abs() < 1e-15);
        let full = 2.0 * (2.0 * 2.0f64.ln() - (2.0 - 1.0));
        assert!((full - 0.7725887222397811).abs() < 1e-12);
        // the gap is the saturated term -2 (y log y - y)
        assert!((truncated - full - (4.0 - 4.0 * 2.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn dropped_terms() {
        assert_eq!(Family::SoftBinomial.dropped_response_term(&[0.0, 1.0, 1.0]), Some(0.0));
        assert_eq!(Family::SoftBinomial.dropped_response_term(&[0.5]), None);
        let t = Family::SoftPoisson.dropped_response_term(&[0.0, 1.0, 3.0]).unwrap();
        assert!((t + 6.0f64.ln()).abs() < 1e-12);
        assert_eq!(Family::SoftPoisson.dropped_response_term(&[-1.0]), None);
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let mut x = design(20, 7);
        let c = x.column(1).clone_owned();
        x.set_column(2, &(c * 2.0));
        let y = DVector::from_element(20, 1.0);
        assert!(matches!(
            fit_glm(&y, &x, Family::Gaussian),
            Err(Error::RankDeficient { rank: 2, cols: 3 })
        ));
    }

    #[test]
    fn family_parsing() {
        assert_eq!("soft_poisson".parse::<Family>().unwrap(), Family::SoftPoisson);
        assert!("gamma".parse::<Family>().is_err());
    }
}
