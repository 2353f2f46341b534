use nalgebra::{DMatrix, DVector};

use super::kernel::prior_factor;
use super::{Method, PosteriorEstimate, PredictorTheta, RegressionProblem};
use crate::error::{dim_check, Error, Result};
use crate::numerics::{chol_factor, SymMatrix};

/// Sensitivity shaping term `μ (θ − θ̄)ᵀ W̄ (θ − θ̄)`.
struct Shaping<'a> {
    theta_bar: &'a DVector<f64>,
    w_bar: &'a SymMatrix,
    mu: f64,
}

/// Posterior with precision `σ⁻²HᵀH + K⁻¹ + μW̄` and information vector
/// `σ⁻²Hᵀy + μW̄θ̄`.
///
/// With `K = L Lᵀ` the covariance is evaluated as `L (I + Lᵀ A L)⁻¹ Lᵀ`,
/// `A = σ⁻²HᵀH + μW̄`, which never forms `K⁻¹` and stays well defined for
/// nearly singular priors.
fn posterior_core(prob: &RegressionProblem, k: &SymMatrix, sigma2: f64, shaping: Option<Shaping<'_>>) -> Result<(DVector<f64>, SymMatrix)> {
    let n = prob.structure.n_theta();
    dim_check(k.dim() == n, || format!("K is {0}x{0}, θ has length {n}", k.dim()))?;
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("σ² must be positive, got {sigma2}")));
    }
    let l = prior_factor(k)?.lower().clone();
    let mut a = prob.gram().into_matrix() / sigma2;
    let mut b = prob.hty() / sigma2;
    if let Some(sh) = &shaping {
        dim_check(sh.w_bar.dim() == n && sh.theta_bar.len() == n, || "W̄ or θ̄ has the wrong dimension".into())?;
        a += sh.w_bar.matrix() * sh.mu;
        b += sh.w_bar.matrix() * sh.theta_bar * sh.mu;
    }
    let m = SymMatrix::from_dense(DMatrix::identity(n, n) + l.transpose() * &a * &l);
    let mf = chol_factor(&m, 0.0)?;
    let rhs = l.transpose();
    let inner = mf.solve(&rhs)?;
    let sigma = SymMatrix::from_dense(&l * inner);
    let theta = sigma.matrix() * b;
    Ok((theta, sigma))
}

/// Kernel-regularized posterior for prior `θ ~ N(0, K)` and noise variance `σ²`.
pub fn kernel_posterior(prob: &RegressionProblem, k: &SymMatrix, sigma2: f64) -> Result<PosteriorEstimate> {
    let (theta, sigma) = posterior_core(prob, k, sigma2, None)?;
    Ok(PosteriorEstimate {
        theta_bar: PredictorTheta::new(prob.structure, theta)?,
        sigma_theta: sigma,
        sigma2,
        kernel: None,
        method: Method::Ss,
        ridge_fallback: false,
    })
}

/// Second-stage estimate that adds the precision `μW̄` centered at `θ̄`.
/// `μ = 0` returns exactly the [`kernel_posterior`] result, retagged.
pub fn shaped_estimate(
    prob: &RegressionProblem,
    k: &SymMatrix,
    sigma2: f64,
    theta_bar: &PredictorTheta,
    w_bar: &SymMatrix,
    mu: f64,
) -> Result<PosteriorEstimate> {
    if !(mu >= 0.0) {
        return Err(Error::InvalidArgument(format!("μ must be non-negative, got {mu}")));
    }
    let shaping = (mu > 0.0).then_some(Shaping { theta_bar: &theta_bar.values, w_bar, mu });
    let (theta, sigma) = posterior_core(prob, k, sigma2, shaping)?;
    Ok(PosteriorEstimate {
        theta_bar: PredictorTheta::new(prob.structure, theta)?,
        sigma_theta: sigma,
        sigma2,
        kernel: None,
        method: Method::SsW,
        ridge_fallback: false,
    })
}
