//! Individual MCMC moves: elliptical slice sampling for latent Gaussian
//! vectors, whitened random-walk moves for kernel hyperparameters, exact
//! Gibbs draws for conditionally Gaussian coefficient blocks, and plain
//! random-walk Metropolis.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::covariance::{CovMatrix, ExpKernelParams};
use crate::error::{Error, Result};
use crate::model::Priors;

/// One elliptical slice move for a latent vector with zero-mean Gaussian
/// prior factor `prior_l` (lower Cholesky). Returns the log-likelihood at the
/// accepted state. Non-finite likelihood at a proposal shrinks the bracket;
/// the move always terminates.
pub fn ess_update_field<F, R>(
    values: &mut Vec<f64>,
    prior_l: &DMatrix<f64>,
    loglik: &F,
    rng: &mut R,
) -> f64
where
    F: Fn(&[f64]) -> f64 + ?Sized,
    R: Rng + ?Sized,
{
    let n = values.len();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let nu = prior_l * z;
    let ll0 = loglik(values);
    let log_y = ll0 + rng.random::<f64>().ln();
    let mut theta = rng.random::<f64>() * std::f64::consts::TAU;
    let mut lo = theta - std::f64::consts::TAU;
    let mut hi = theta;
    let mut proposal = vec![0.0; n];
    loop {
        let (c, s) = (theta.cos(), theta.sin());
        for i in 0..n {
            proposal[i] = values[i] * c + nu[i] * s;
        }
        let ll = loglik(&proposal);
        if ll.is_finite() && ll > log_y {
            values.copy_from_slice(&proposal);
            return ll;
        }
        if theta < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        if hi - lo < 1e-14 {
            // numerically back at the current state, which satisfies the slice
            return ll0;
        }
        theta = lo + rng.random::<f64>() * (hi - lo);
    }
}

/// Whitened joint move for kernel hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct WhitenedHyperMove {
    /// Propose `log sigma2` too; off for unit-variance coregionalization
    /// fields, whose scale lives in the loadings.
    pub update_sigma2: bool,
    pub step: f64,
}

/// Random-walk proposal on `(log sigma2, logit(phi / phi_max))` holding the
/// whitened coordinates `z = L^{-1} field` fixed: the field is recomputed as
/// `L' z` under the proposed kernel, and the pair is accepted by
/// Metropolis-Hastings on the joint posterior. The logit keeps `phi` inside
/// its uniform prior support.
///
/// Returns `(accepted, log-likelihood at the new state)`.
#[allow(clippy::too_many_arguments)]
pub fn update_hyperparams<F, R>(
    kernel: &mut ExpKernelParams,
    values: &mut Vec<f64>,
    cov: &mut CovMatrix,
    dist: &DMatrix<f64>,
    loglik: &F,
    current_ll: f64,
    priors: &Priors,
    mv: &WhitenedHyperMove,
    rng: &mut R,
) -> (bool, f64)
where
    F: Fn(&[f64]) -> f64 + ?Sized,
    R: Rng + ?Sized,
{
    if mv.step == 0.0 {
        return (false, current_ll);
    }
    let phi_max = priors.phi_max;
    let sigma2 = kernel.sigma2();
    let phi = kernel.phi();

    let new_sigma2 = if mv.update_sigma2 {
        (sigma2.ln() + mv.step * rng.sample::<f64, _>(StandardNormal)).exp()
    } else {
        sigma2
    };
    let logit = (phi / (phi_max - phi)).ln();
    let new_logit = logit + mv.step * rng.sample::<f64, _>(StandardNormal);
    let new_phi = phi_max / (1.0 + (-new_logit).exp());
    if !(new_phi > 0.0 && new_phi < phi_max && new_sigma2 > 0.0 && new_sigma2.is_finite()) {
        return (false, current_ll);
    }
    let new_kernel = match ExpKernelParams::new(new_sigma2, new_phi) {
        Ok(k) => k,
        Err(_) => return (false, current_ll),
    };
    let new_cov = match CovMatrix::from_distances_auto(&new_kernel, dist) {
        Ok(c) => c,
        Err(_) => return (false, current_ll),
    };
    let z = cov.whiten(values);
    let new_values = new_cov.correlate(&z);
    let new_ll = loglik(&new_values);
    if !new_ll.is_finite() {
        return (false, current_ll);
    }

    let mut log_r = new_ll - current_ll;
    if mv.update_sigma2 {
        // IG prior plus the log-scale Jacobian
        log_r += priors.log_sigma2(new_sigma2) + new_sigma2.ln()
            - priors.log_sigma2(sigma2)
            - sigma2.ln();
    }
    // uniform prior on phi plus the logit-scale Jacobian
    log_r += priors.log_phi(new_phi) + (new_phi * (phi_max - new_phi) / phi_max).ln()
        - priors.log_phi(phi)
        - (phi * (phi_max - phi) / phi_max).ln();

    if rng.random::<f64>().ln() < log_r {
        *kernel = new_kernel;
        *values = new_values;
        *cov = new_cov;
        (true, new_ll)
    } else {
        (false, current_ll)
    }
}

/// Gaussian full conditional of linear coefficients with prior
/// `N(0, prior_prec^{-1} I)` and likelihood `y ~ N(design * theta, tau2 I)`.
/// Returns the conditional mean and the lower Cholesky factor of the
/// posterior precision.
pub fn linear_gaussian_conditional(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    tau2: f64,
    prior_prec: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !(tau2 > 0.0) {
        return Err(Error::InvalidParameter(format!("tau2 must be positive, got {tau2}")));
    }
    let k = design.ncols();
    let mut prec = design.transpose() * design / tau2;
    for i in 0..k {
        prec[(i, i)] += prior_prec;
    }
    let chol = prec
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("singular coefficient precision".into()))?;
    let rhs = design.transpose() * y / tau2;
    let mean = chol.solve(&rhs);
    Ok((mean, chol.unpack()))
}

/// Exact draw from the Gaussian full conditional of a linear coefficient
/// block.
pub fn gibbs_linear_block<R: Rng + ?Sized>(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    tau2: f64,
    prior_prec: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let k = design.ncols();
    if k == 0 {
        return Ok(DVector::zeros(0));
    }
    let (mean, l) = linear_gaussian_conditional(design, y, tau2, prior_prec)?;
    let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let noise = l
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| Error::InvalidParameter("singular precision factor".into()))?;
    Ok(mean + noise)
}

/// Draw from `InvGamma(shape, scale)` by inverting a gamma draw.
pub fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    let gamma = Gamma::new(shape, 1.0 / scale)
        .map_err(|e| Error::InvalidParameter(format!("inverse-gamma draw: {e}")))?;
    Ok(1.0 / gamma.sample(rng))
}

/// Joint random-walk Metropolis update of a coefficient vector. Returns
/// `(accepted, log-posterior at the new state)`.
pub fn rw_update_vec<F, R>(
    x: &mut [f64],
    step: f64,
    logpost: &F,
    current_lp: f64,
    rng: &mut R,
) -> (bool, f64)
where
    F: Fn(&[f64]) -> f64 + ?Sized,
    R: Rng + ?Sized,
{
    if step == 0.0 {
        return (false, current_lp);
    }
    let proposal: Vec<f64> =
        x.iter().map(|v| v + step * rng.sample::<f64, _>(StandardNormal)).collect();
    let lp = logpost(&proposal);
    if lp.is_finite() && rng.random::<f64>().ln() < lp - current_lp {
        x.copy_from_slice(&proposal);
        (true, lp)
    } else {
        (false, current_lp)
    }
}

/// Robbins-Monro step-size adaptation toward a target acceptance rate,
/// applied during burn-in only and frozen afterwards.
#[derive(Clone, Debug)]
pub struct AdaptiveStep {
    pub step: f64,
    accepted: usize,
    attempts: usize,
}

impl AdaptiveStep {
    pub const TARGET: f64 = 0.3;

    pub fn new(step: f64) -> Self {
        Self { step, accepted: 0, attempts: 0 }
    }

    pub fn record(&mut self, accepted: bool) {
        self.attempts += 1;
        if accepted {
            self.accepted += 1;
        }
    }

    pub fn adapt(&mut self, accepted: bool, iter: usize) {
        let kappa = (iter as f64 + 1.0).powf(-0.6);
        let a = if accepted { 1.0 } else { 0.0 };
        self.step = (self.step.ln() + kappa * (a - Self::TARGET)).exp().clamp(1e-6, 50.0);
    }

    pub fn reset_counts(&mut self) {
        self.accepted = 0;
        self.attempts = 0;
    }

    pub fn rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempts as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::pairwise_distances;
    use crate::domain::{GridApprox, Region};
    use crate::mcmc::diagnostics::{ess_ips, ks_pvalue, ks_statistic};
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;

    #[test]
    fn ess_flat_likelihood_recovers_prior() {
        // with a constant likelihood the stationary law is the prior
        let grid = GridApprox::build(&Region::unit_square(), 2).unwrap();
        let k = ExpKernelParams::new(0.7, 2.0).unwrap();
        let cov = CovMatrix::from_points_auto(&k, grid.centroids()).unwrap();
        let mut rng = stream_rng(5, 0, 0);
        let mut values = vec![0.0; 4];
        let flat = |_: &[f64]| 0.0;
        let n = 10_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            ess_update_field(&mut values, cov.factor_l(), &flat, &mut rng);
            sum += values[1];
            sumsq += values[1] * values[1];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!((var - 0.7).abs() / 0.7 < 0.05, "marginal variance {var} vs 0.7");
    }

    #[test]
    fn ess_zero_variance_prior_is_noop() {
        let grid = GridApprox::build(&Region::unit_square(), 2).unwrap();
        let k = ExpKernelParams::new(1e-20, 2.0).unwrap();
        let cov = CovMatrix::from_points_auto(&k, grid.centroids()).unwrap();
        let mut rng = stream_rng(6, 0, 0);
        let mut values = vec![0.0; 4];
        let ll = |v: &[f64]| -0.5 * v.iter().map(|x| x * x).sum::<f64>();
        for _ in 0..100 {
            ess_update_field(&mut values, cov.factor_l(), &ll, &mut rng);
        }
        for v in &values {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn ess_conjugate_single_cell_posterior() {
        // prior N(0, s0), likelihood y ~ N(f, sy): posterior closed form
        let (s0, sy, y) = (2.0f64, 0.5f64, 1.2f64);
        let post_var = 1.0 / (1.0 / s0 + 1.0 / sy);
        let post_mean = post_var * y / sy;
        let prior_l = DMatrix::from_element(1, 1, s0.sqrt());
        let ll = move |v: &[f64]| -0.5 * (y - v[0]) * (y - v[0]) / sy;
        let mut rng = stream_rng(7, 0, 0);
        let mut values = vec![0.0];
        let n = 10_000;
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            ess_update_field(&mut values, &prior_l, &ll, &mut rng);
            draws.push(values[0]);
        }
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var =
            draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
        let ess = ess_ips(&draws);
        let se = (post_var / ess).sqrt();
        assert!(
            (mean - post_mean).abs() < 3.0 * se,
            "posterior mean {mean} vs {post_mean} (se {se})"
        );
        assert!((var - post_var).abs() / post_var < 0.1, "posterior var {var} vs {post_var}");
    }

    #[test]
    fn whitened_move_flat_likelihood_recovers_phi_prior() {
        let grid = GridApprox::build(&Region::unit_square(), 2).unwrap();
        let dist = pairwise_distances(grid.centroids());
        let priors = Priors::default();
        let mut kernel = ExpKernelParams::new(0.5, 3.0).unwrap();
        let mut cov = CovMatrix::from_distances_auto(&kernel, &dist).unwrap();
        let mut values = cov.sample_zero_mean(&mut stream_rng(8, 0, 0));
        let flat = |_: &[f64]| 0.0;
        let mv = WhitenedHyperMove { update_sigma2: true, step: 2.0 };
        let mut rng = stream_rng(8, 1, 0);
        let mut ll = 0.0;
        let total = 200_000usize;
        let mut phis = Vec::with_capacity(10_000);
        for it in 0..total {
            let (_, l) = update_hyperparams(
                &mut kernel, &mut values, &mut cov, &dist, &flat, ll, &priors, &mv, &mut rng,
            );
            ll = l;
            if it % 20 == 0 {
                phis.push(kernel.phi());
            }
        }
        phis.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let stat = ks_statistic(&phis, |x| x / 100.0);
        let p = ks_pvalue(stat, phis.len());
        assert!(p > 0.001, "KS p = {p} (stat {stat}) against U(0, 100)");
    }

    #[test]
    fn whitened_move_zero_step_stays() {
        let grid = GridApprox::build(&Region::unit_square(), 2).unwrap();
        let dist = pairwise_distances(grid.centroids());
        let priors = Priors::default();
        let mut kernel = ExpKernelParams::new(0.5, 3.0).unwrap();
        let mut cov = CovMatrix::from_distances_auto(&kernel, &dist).unwrap();
        let mut values = vec![0.1, -0.2, 0.3, 0.0];
        let before = values.clone();
        let flat = |_: &[f64]| 0.0;
        let mv = WhitenedHyperMove { update_sigma2: true, step: 0.0 };
        let mut rng = stream_rng(9, 0, 0);
        for _ in 0..50 {
            update_hyperparams(
                &mut kernel, &mut values, &mut cov, &dist, &flat, 0.0, &priors, &mv, &mut rng,
            );
        }
        assert_eq!(values, before);
        assert_eq!(kernel.phi(), 3.0);
        assert_eq!(kernel.sigma2(), 0.5);
    }

    #[test]
    fn gibbs_no_data_draws_from_prior() {
        let design = DMatrix::zeros(0, 1);
        let y = DVector::zeros(0);
        let mut rng = stream_rng(10, 0, 0);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let d = gibbs_linear_block(&design, &y, 1.0, 0.01, &mut rng).unwrap();
            sum += d[0];
            sumsq += d[0] * d[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 3.0 * (100.0f64 / n as f64).sqrt());
        assert!((var - 100.0).abs() / 100.0 < 0.05, "prior variance {var}");
    }

    #[test]
    fn gibbs_posterior_mean_approaches_ols() {
        let n = 10_000;
        let mut rng = stream_rng(11, 0, 0);
        let design = DMatrix::from_fn(n, 2, |i, j| {
            if j == 0 {
                1.0
            } else {
                (i as f64 / n as f64) - 0.5
            }
        });
        let truth = DVector::from_vec(vec![0.7, -1.3]);
        let tau2 = 0.25f64;
        let y = &design * &truth
            + DVector::from_fn(n, |_, _| {
                tau2.sqrt() * rng.sample::<f64, _>(StandardNormal)
            });
        let (mean, _) = linear_gaussian_conditional(&design, &y, tau2, 1.0 / 100.0).unwrap();
        let ols = (design.transpose() * &design)
            .cholesky()
            .unwrap()
            .solve(&(design.transpose() * &y));
        for i in 0..2 {
            assert!(
                (mean[i] - ols[i]).abs() < 1e-3,
                "coef {i}: posterior mean {} vs OLS {}",
                mean[i],
                ols[i]
            );
        }
    }

    #[test]
    fn tau2_full_conditional_parameters() {
        // IG(shape + n/2, scale + SSR/2) is conjugate for the nugget; check
        // the helper draws with the right moments under a frozen SSR
        let (shape, scale) = (2.0f64, 0.1f64);
        let n = 40.0f64;
        let ssr = 8.0f64;
        let (a, b) = (shape + n / 2.0, scale + ssr / 2.0);
        let mut rng = stream_rng(12, 0, 0);
        let m = 200_000;
        let mut sum = 0.0;
        for _ in 0..m {
            sum += sample_inv_gamma(a, b, &mut rng).unwrap();
        }
        let mean = sum / m as f64;
        assert_relative_eq!(mean, b / (a - 1.0), max_relative = 0.02);
    }

    #[test]
    fn rw_update_zero_step_stays() {
        let mut x = vec![1.0, 2.0];
        let lp = |_: &[f64]| 0.0;
        let mut rng = stream_rng(13, 0, 0);
        let (acc, _) = rw_update_vec(&mut x, 0.0, &lp, 0.0, &mut rng);
        assert!(!acc);
        assert_eq!(x, vec![1.0, 2.0]);
    }

    #[test]
    fn rw_update_samples_gaussian() {
        let lp = |v: &[f64]| -0.5 * v[0] * v[0];
        let mut x = vec![0.0];
        let mut rng = stream_rng(14, 0, 0);
        let mut cur = lp(&x);
        let n = 50_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let (_, l) = rw_update_vec(&mut x, 2.4, &lp, cur, &mut rng);
            cur = l;
            sum += x[0];
            sumsq += x[0] * x[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.08, "var {var}");
    }
}
