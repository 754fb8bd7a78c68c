//! Damped Gauss-Newton (Levenberg-Marquardt) for least squares problems that
//! may be underdetermined.
//!
//! Each step solves `(JᵀJ + λI) δ = -Jᵀr`. When the problem has fewer
//! residuals `m` than unknowns `n`, the same step is computed through the
//! identity `(JᵀJ + λI)⁻¹Jᵀ = Jᵀ(JJᵀ + λI)⁻¹`, which only needs an `m x m`
//! factorization.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_DAMPING: f64 = 1e-12;
const MAX_DAMPING: f64 = 1e16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Convergence when `max |r_i| <= residual_tolerance`.
    pub residual_tolerance: f64,
    /// Stop when `‖δ‖ <= step_tolerance * (1 + ‖x‖)`.
    pub step_tolerance: f64,
    pub initial_damping: f64,
    pub seed: u64,
    /// Extra seeded attempts after a failed solve.
    pub restarts: usize,
    /// Give up when the squared residual norm falls by less than 1% over
    /// this many iterations; 0 disables the check.
    pub stall_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            residual_tolerance: 1e-8,
            step_tolerance: 1e-15,
            initial_damping: 1e-3,
            seed: 0,
            restarts: 3,
            stall_iterations: 25,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0
            || !(self.residual_tolerance > 0.0)
            || !(self.step_tolerance > 0.0)
            || !(self.initial_damping > 0.0)
        {
            return Err(Error::InvalidInput(
                "solver tolerances and damping must be positive and max_iterations >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// The products of a Jacobian that the solver needs.
pub trait Linearization {
    /// `J Jᵀ`
    fn row_gram(&self) -> DMatrix<f64>;
    /// `Jᵀ J`
    fn col_gram(&self) -> DMatrix<f64>;
    /// `Jᵀ v`
    fn tr_mul(&self, v: &DVector<f64>) -> DVector<f64>;
}

impl Linearization for DMatrix<f64> {
    fn row_gram(&self) -> DMatrix<f64> {
        self * self.transpose()
    }

    fn col_gram(&self) -> DMatrix<f64> {
        self.transpose() * self
    }

    fn tr_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        self.transpose() * v
    }
}

pub trait LeastSquaresProblem {
    type Jacobian: Linearization;

    fn n_residuals(&self) -> usize;
    fn n_params(&self) -> usize;
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn jacobian(&self, x: &DVector<f64>) -> Result<Self::Jacobian>;
}

/// Adapts a pair of closures to [`LeastSquaresProblem`].
pub struct FnProblem<R, J> {
    pub m: usize,
    pub n: usize,
    pub residual_fn: R,
    pub jacobian_fn: J,
}

impl<R, J> LeastSquaresProblem for FnProblem<R, J>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    type Jacobian = DMatrix<f64>;

    fn n_residuals(&self) -> usize {
        self.m
    }

    fn n_params(&self) -> usize {
        self.n
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let r = (self.residual_fn)(x);
        if r.len() != self.m {
            return Err(Error::DimensionMismatch {
                what: "residual vector",
                expected: self.m,
                found: r.len(),
            });
        }
        Ok(r)
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let j = (self.jacobian_fn)(x);
        if j.shape() != (self.m, self.n) {
            return Err(Error::DimensionMismatch {
                what: "jacobian columns",
                expected: self.n,
                found: j.ncols(),
            });
        }
        Ok(j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
    SmallStep,
    DampingOverflow,
    Stalled,
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub termination: Termination,
    pub iterations: usize,
    pub max_residual: f64,
    pub final_damping: f64,
}

impl Diagnostics {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn residuals_checked<P: LeastSquaresProblem>(p: &P, x: &DVector<f64>) -> Result<DVector<f64>> {
    let r = p.residuals(x)?;
    if r.iter().all(|v| v.is_finite()) {
        Ok(r)
    } else {
        Err(Error::NonFinite("residuals".into()))
    }
}

/// Minimizes `½‖r(x)‖²` from `x0`. A non-converged run is not an error: the
/// last iterate is returned together with its [`Termination`] reason.
pub fn minimize<P: LeastSquaresProblem>(
    problem: &P,
    x0: DVector<f64>,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, Diagnostics)> {
    opts.validate()?;
    let (m, n) = (problem.n_residuals(), problem.n_params());
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            what: "initial point",
            expected: n,
            found: x0.len(),
        });
    }
    let mut x = x0;
    let mut r = residuals_checked(problem, &x)?;
    let mut cost = r.norm_squared();
    let mut lambda = opts.initial_damping;
    let dual = m < n;

    let mut iterations = 0;
    let mut history = std::collections::VecDeque::with_capacity(opts.stall_iterations + 1);
    let termination = loop {
        if max_abs(&r) <= opts.residual_tolerance {
            break Termination::Converged;
        }
        if iterations >= opts.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let jac = problem.jacobian(&x)?;
        let gram = if dual { jac.row_gram() } else { jac.col_gram() };
        let gradient = if dual { None } else { Some(jac.tr_mul(&r)) };

        let k = gram.nrows();
        let gram = Mat::<f64>::from_fn(k, k, |i, j| gram[(i, j)]);
        let rhs = match &gradient {
            None => &r,
            Some(g) => g,
        };
        let rhs = Mat::<f64>::from_fn(k, 1, |i, _| rhs[i]);

        let mut accepted = None;
        while lambda <= MAX_DAMPING {
            let mut a = gram.clone();
            for i in 0..k {
                a[(i, i)] += lambda;
            }
            let Ok(chol) = a.llt(Side::Lower) else {
                lambda *= 2.0;
                continue;
            };
            let sol = chol.solve(&rhs);
            let sol = DVector::from_fn(k, |i, _| sol[(i, 0)]);
            let step = match &gradient {
                None => -jac.tr_mul(&sol),
                Some(_) => -sol,
            };
            let candidate = &x + &step;
            match residuals_checked(problem, &candidate) {
                Ok(r_new) if r_new.norm_squared() < cost => {
                    accepted = Some((candidate, r_new, step.norm()));
                    break;
                }
                _ => lambda *= 2.0,
            }
        }
        let Some((x_new, r_new, step_norm)) = accepted else {
            break Termination::DampingOverflow;
        };
        lambda = (lambda * 0.5).max(MIN_DAMPING);
        let x_norm = x.norm();
        x = x_new;
        r = r_new;
        cost = r.norm_squared();
        if step_norm <= opts.step_tolerance * (1.0 + x_norm) && max_abs(&r) > opts.residual_tolerance
        {
            break Termination::SmallStep;
        }
        if opts.stall_iterations > 0 {
            history.push_back(cost);
            if history.len() > opts.stall_iterations {
                let past = history.pop_front().unwrap_or(f64::INFINITY);
                if cost > 0.99 * past && max_abs(&r) > opts.residual_tolerance {
                    break Termination::Stalled;
                }
            }
        }
    };

    let diag = Diagnostics {
        termination,
        iterations,
        max_residual: max_abs(&r),
        final_damping: lambda,
    };
    Ok((x, diag))
}

/// Closure form of [`minimize`].
pub fn levenberg_marquardt<R, J>(
    residual_fn: R,
    jacobian_fn: J,
    m: usize,
    x0: DVector<f64>,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, Diagnostics)>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let problem = FnProblem {
        m,
        n: x0.len(),
        residual_fn,
        jacobian_fn,
    };
    minimize(&problem, x0, opts)
}
