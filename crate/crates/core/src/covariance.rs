//! Exponential covariance kernels, dense SPD covariance assembly with
//! Cholesky factorization, and the closed-form cross-covariance matrices of
//! the shared-process and coregionalization response models.

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::Location;
use crate::error::{Error, Result};

/// Relative starting jitter for automatic escalation.
const JITTER_START_REL: f64 = 1e-10;
/// Relative ceiling; factorization fails beyond this.
const JITTER_MAX_REL: f64 = 1e-4;

/// Parameters of the exponential kernel `sigma2 * exp(-phi * h)`.
///
/// Only the product `sigma2 * phi` is identifiable for this kernel under
/// infill asymptotics; [`ExpKernelParams::identifiable_product`] exposes it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpKernelParams {
    sigma2: f64,
    phi: f64,
}

impl ExpKernelParams {
    pub fn new(sigma2: f64, phi: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel variance must be positive, got {sigma2}"
            )));
        }
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel decay must be positive, got {phi}"
            )));
        }
        Ok(Self { sigma2, phi })
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// `sigma2 * phi`, the identifiable quantity reported alongside raw draws.
    pub fn identifiable_product(&self) -> f64 {
        self.sigma2 * self.phi
    }

    /// Covariance at separation `h >= 0` (unchecked hot path).
    #[inline]
    pub fn cov(&self, h: f64) -> f64 {
        debug_assert!(h >= 0.0);
        self.sigma2 * (-self.phi * h).exp()
    }

    /// Correlation at separation `h >= 0`.
    #[inline]
    pub fn corr(&self, h: f64) -> f64 {
        debug_assert!(h >= 0.0);
        (-self.phi * h).exp()
    }
}

/// Checked kernel evaluation; rejects negative distances.
pub fn exp_cov(params: &ExpKernelParams, h: f64) -> Result<f64> {
    if !(h >= 0.0) {
        return Err(Error::InvalidParameter(format!("distance must be nonnegative, got {h}")));
    }
    Ok(params.cov(h))
}

/// Pairwise Euclidean distances.
pub fn pairwise_distances(pts: &[Location]) -> DMatrix<f64> {
    let n = pts.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = pts[i].distance(&pts[j]);
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    d
}

/// Dense SPD covariance matrix, held through its lower Cholesky factor.
#[derive(Clone, Debug)]
pub struct CovMatrix {
    l: DMatrix<f64>,
    jitter: f64,
}

impl CovMatrix {
    /// Assemble from points with exactly the given diagonal jitter.
    pub fn from_points(params: &ExpKernelParams, pts: &[Location], jitter: f64) -> Result<Self> {
        Self::from_distances(params, &pairwise_distances(pts), jitter)
    }

    /// Assemble from points under the escalating jitter policy.
    pub fn from_points_auto(params: &ExpKernelParams, pts: &[Location]) -> Result<Self> {
        Self::from_distances_auto(params, &pairwise_distances(pts))
    }

    /// Assemble from a precomputed distance matrix with fixed jitter.
    pub fn from_distances(
        params: &ExpKernelParams,
        dist: &DMatrix<f64>,
        jitter: f64,
    ) -> Result<Self> {
        if dist.nrows() == 0 {
            return Err(Error::InvalidParameter("empty point set".into()));
        }
        if !(jitter >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "jitter must be nonnegative, got {jitter}"
            )));
        }
        Self::try_build(params, dist, jitter).ok_or(Error::CholeskyFailed { jitter })
    }

    /// Assemble from a distance matrix, escalating jitter from
    /// `1e-10 * sigma2` by factors of ten up to `1e-4 * sigma2`.
    pub fn from_distances_auto(params: &ExpKernelParams, dist: &DMatrix<f64>) -> Result<Self> {
        if dist.nrows() == 0 {
            return Err(Error::InvalidParameter("empty point set".into()));
        }
        let mut jitter = JITTER_START_REL * params.sigma2();
        let max_jitter = JITTER_MAX_REL * params.sigma2();
        loop {
            if let Some(built) = Self::try_build(params, dist, jitter) {
                return Ok(built);
            }
            jitter *= 10.0;
            if jitter > max_jitter * (1.0 + 1e-12) {
                return Err(Error::CholeskyFailed { jitter: jitter / 10.0 });
            }
        }
    }

    fn try_build(params: &ExpKernelParams, dist: &DMatrix<f64>, jitter: f64) -> Option<Self> {
        let n = dist.nrows();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = params.cov(dist[(i, j)]);
            }
            m[(i, i)] += jitter;
        }
        let chol = m.cholesky()?;
        Some(Self { l: chol.unpack(), jitter })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Lower Cholesky factor `L` with `L L^T = Sigma`.
    pub fn factor_l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Draw `L z` with `z` standard normal.
    pub fn sample_zero_mean<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.l * z).iter().copied().collect()
    }

    /// `z = L^{-1} v`.
    pub fn whiten(&self, v: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(v);
        self.l
            .solve_lower_triangular(&v)
            .expect("Cholesky factor has positive diagonal")
            .iter()
            .copied()
            .collect()
    }

    /// `v = L z`.
    pub fn correlate(&self, z: &[f64]) -> Vec<f64> {
        let z = DVector::from_column_slice(z);
        (&self.l * z).iter().copied().collect()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }

    /// Zero-mean multivariate normal log density of `x` under this matrix.
    pub fn mvn_logpdf(&self, x: &[f64]) -> f64 {
        let z = self.whiten(x);
        let quad: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * (quad + self.log_det() + self.dim() as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

/// Lower-triangular coregionalization loadings; the diagonal is nonnegative
/// by sign convention to resolve the reflection non-identifiability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoregCoef {
    pub a11: f64,
    pub a21: f64,
    pub a22: f64,
}

impl CoregCoef {
    pub fn new(a11: f64, a21: f64, a22: f64) -> Result<Self> {
        if !(a11.is_finite() && a21.is_finite() && a22.is_finite()) {
            return Err(Error::InvalidParameter("coregionalization loadings must be finite".into()));
        }
        if a11 < 0.0 || a22 < 0.0 {
            return Err(Error::InvalidParameter(
                "diagonal loadings a11, a22 must be nonnegative".into(),
            ));
        }
        Ok(Self { a11, a21, a22 })
    }

    pub fn zero() -> Self {
        Self { a11: 0.0, a21: 0.0, a22: 0.0 }
    }
}

/// Preferential-sampling loadings on the shared intensity process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PSCoef {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl PSCoef {
    pub fn new(gamma1: f64, gamma2: f64) -> Result<Self> {
        if !(gamma1.is_finite() && gamma2.is_finite()) {
            return Err(Error::InvalidParameter("shared-process loadings must be finite".into()));
        }
        Ok(Self { gamma1, gamma2 })
    }

    pub fn zero() -> Self {
        Self { gamma1: 0.0, gamma2: 0.0 }
    }
}

fn check_distance(h: f64) -> Result<()> {
    if !(h >= 0.0) {
        return Err(Error::InvalidParameter(format!("distance must be nonnegative, got {h}")));
    }
    Ok(())
}

/// Shared-process cross-covariance: `c_eta(h) * gamma gamma^T`.
pub fn cross_cov_m2(ps: &PSCoef, eta_k: &ExpKernelParams, h: f64) -> Result<Matrix2<f64>> {
    check_distance(h)?;
    let c = eta_k.cov(h);
    let (g1, g2) = (ps.gamma1, ps.gamma2);
    Ok(Matrix2::new(g1 * g1 * c, g1 * g2 * c, g1 * g2 * c, g2 * g2 * c))
}

/// Coregionalization cross-covariance:
/// `rho_w1(h) * [[a11^2, a11 a21], [a11 a21, a21^2]] + rho_w2(h) * diag(0, a22^2)`.
pub fn cross_cov_m3(
    coreg: &CoregCoef,
    w1_k: &ExpKernelParams,
    w2_k: &ExpKernelParams,
    h: f64,
) -> Result<Matrix2<f64>> {
    check_distance(h)?;
    let r1 = w1_k.corr(h);
    let r2 = w2_k.corr(h);
    let CoregCoef { a11, a21, a22 } = *coreg;
    Ok(Matrix2::new(
        a11 * a11 * r1,
        a11 * a21 * r1,
        a11 * a21 * r1,
        a21 * a21 * r1 + a22 * a22 * r2,
    ))
}

/// Full cross-covariance of the combined model: the shared-process and
/// coregionalization parts added entrywise. Zeroing `gamma` recovers the
/// coregionalization matrix and zeroing the loadings recovers the
/// shared-process matrix.
pub fn cross_cov_m4(
    ps: &PSCoef,
    coreg: &CoregCoef,
    eta_k: &ExpKernelParams,
    w1_k: &ExpKernelParams,
    w2_k: &ExpKernelParams,
    h: f64,
) -> Result<Matrix2<f64>> {
    Ok(cross_cov_m2(ps, eta_k, h)? + cross_cov_m3(coreg, w1_k, w2_k, h)?)
}

/// Same-site covariance and correlation of the two responses.
///
/// `cov = gamma1 gamma2 sigma_eta^2 + a11 a21 sigma_w1^2`; marginal variances
/// include the nuggets iff `include_nugget`. When a marginal variance is zero
/// the covariance is necessarily zero and the correlation is reported as
/// zero.
#[allow(clippy::too_many_arguments)]
pub fn local_cov_corr(
    ps: &PSCoef,
    coreg: &CoregCoef,
    eta_sigma2: f64,
    w1_sigma2: f64,
    w2_sigma2: f64,
    include_nugget: bool,
    tau1_2: f64,
    tau2_2: f64,
) -> Result<(f64, f64)> {
    for (name, v) in [("eta", eta_sigma2), ("w1", w1_sigma2), ("w2", w2_sigma2)] {
        if !(v > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "{name} variance must be positive, got {v}"
            )));
        }
    }
    if !(tau1_2 >= 0.0 && tau2_2 >= 0.0) {
        return Err(Error::InvalidParameter("nugget variances must be nonnegative".into()));
    }
    let PSCoef { gamma1, gamma2 } = *ps;
    let CoregCoef { a11, a21, a22 } = *coreg;
    let cov = gamma1 * gamma2 * eta_sigma2 + a11 * a21 * w1_sigma2;
    let mut var1 = gamma1 * gamma1 * eta_sigma2 + a11 * a11 * w1_sigma2;
    let mut var2 = gamma2 * gamma2 * eta_sigma2 + a21 * a21 * w1_sigma2 + a22 * a22 * w2_sigma2;
    if include_nugget {
        var1 += tau1_2;
        var2 += tau2_2;
    }
    if !(var1 > 0.0 && var2 > 0.0) {
        if cov == 0.0 {
            return Ok((0.0, 0.0));
        }
        return Err(Error::InvalidParameter("non-positive marginal variance".into()));
    }
    Ok((cov, cov / (var1 * var2).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{GridApprox, Region};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn kernel(sigma2: f64, phi: f64) -> ExpKernelParams {
        ExpKernelParams::new(sigma2, phi).unwrap()
    }

    #[test]
    fn exp_cov_values() {
        let k = kernel(1.0, 3.0);
        assert_relative_eq!(exp_cov(&k, 0.0).unwrap(), 1.0);
        let low = kernel(1.0 / 3.0, 3.0);
        assert_relative_eq!(exp_cov(&low, 0.0).unwrap(), 1.0 / 3.0);
        assert_relative_eq!(exp_cov(&k, 2f64.ln() / 3.0).unwrap(), 0.5, max_relative = 1e-15);
        assert!(exp_cov(&k, -0.1).is_err());
    }

    #[test]
    fn kernel_rejects_nonpositive() {
        assert!(ExpKernelParams::new(0.0, 1.0).is_err());
        assert!(ExpKernelParams::new(1.0, -2.0).is_err());
        assert_relative_eq!(kernel(0.5, 3.0).identifiable_product(), 1.5);
    }

    #[test]
    fn single_point_matrix() {
        let k = kernel(2.0, 1.0);
        let cm = CovMatrix::from_points(&k, &[Location::new(0.3, 0.4)], 0.5).unwrap();
        assert_eq!(cm.dim(), 1);
        // 1x1 matrix holds sigma2 + jitter
        let l00 = cm.factor_l()[(0, 0)];
        assert_relative_eq!(l00 * l00, 2.5, max_relative = 1e-14);
    }

    #[test]
    fn coincident_points_zero_jitter_fail() {
        let k = kernel(1.0, 3.0);
        let pts = [Location::new(0.5, 0.5), Location::new(0.5, 0.5)];
        assert!(matches!(
            CovMatrix::from_points(&k, &pts, 0.0),
            Err(Error::CholeskyFailed { .. })
        ));
    }

    #[test]
    fn grid_900_is_spd() {
        let grid = GridApprox::build(&Region::unit_square(), 30).unwrap();
        let k = kernel(1.0, 3.0);
        let cm = CovMatrix::from_points_auto(&k, grid.centroids()).unwrap();
        for i in 0..cm.dim() {
            assert!(cm.factor_l()[(i, i)] > 0.0);
        }
    }

    #[test]
    fn cholesky_reconstructs_matrix() {
        let grid = GridApprox::build(&Region::unit_square(), 8).unwrap();
        let k = kernel(1.3, 2.0);
        let cm = CovMatrix::from_points_auto(&k, grid.centroids()).unwrap();
        // assemble the target matrix independently of the factorization path
        let pts = grid.centroids();
        let n = pts.len();
        let mut target = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                target[(i, j)] = k.cov(pts[i].distance(&pts[j]));
            }
            target[(i, i)] += cm.jitter();
        }
        let recon = cm.factor_l() * cm.factor_l().transpose();
        let mut max_err = 0.0f64;
        let mut max_abs = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                max_err = max_err.max((recon[(i, j)] - target[(i, j)]).abs());
                max_abs = max_abs.max(target[(i, j)].abs());
            }
        }
        assert!(max_err <= 1e-8 * max_abs, "reconstruction error {max_err}");
    }

    #[test]
    fn whiten_correlate_roundtrip() {
        let grid = GridApprox::build(&Region::unit_square(), 4).unwrap();
        let k = kernel(0.7, 1.5);
        let cm = CovMatrix::from_points_auto(&k, grid.centroids()).unwrap();
        let v: Vec<f64> = (0..cm.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let back = cm.correlate(&cm.whiten(&v));
        for (a, b) in v.iter().zip(&back) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn shared_process_matrix_example() {
        // c_eta(h) = 0.5 at the chosen distance
        let k = kernel(1.0, 3.0);
        let h = 2f64.ln() / 3.0;
        let ps = PSCoef::new(1.0, 0.3).unwrap();
        let m = cross_cov_m2(&ps, &k, h).unwrap();
        assert_relative_eq!(m[(0, 0)], 0.5, max_relative = 1e-12);
        assert_relative_eq!(m[(0, 1)], 0.15, max_relative = 1e-12);
        assert_relative_eq!(m[(1, 0)], 0.15, max_relative = 1e-12);
        assert_relative_eq!(m[(1, 1)], 0.045, max_relative = 1e-12);
        let m4 =
            cross_cov_m4(&ps, &CoregCoef::zero(), &k, &kernel(1.0, 1.0), &kernel(1.0, 1.0), h)
                .unwrap();
        assert_relative_eq!(m4[(0, 1)], 0.15, max_relative = 1e-12);
    }

    #[test]
    fn coreg_matrix_at_zero_distance() {
        let coreg = CoregCoef::new(1.0, -0.4, 1.0).unwrap();
        let w = kernel(1.0, 1.0);
        let m = cross_cov_m4(&PSCoef::zero(), &coreg, &kernel(1.0, 1.0), &w, &w, 0.0).unwrap();
        assert_relative_eq!(m[(0, 0)], 1.0);
        assert_relative_eq!(m[(0, 1)], -0.4);
        assert_relative_eq!(m[(1, 0)], -0.4);
        assert_relative_eq!(m[(1, 1)], 1.16);
    }

    #[test]
    fn cross_cov_vanishes_at_infinity() {
        let ps = PSCoef::new(1.0, 0.3).unwrap();
        let coreg = CoregCoef::new(1.0, -0.4, 1.0).unwrap();
        let k = kernel(1.0, 1.0);
        let m = cross_cov_m4(&ps, &coreg, &k, &k, &k, 1e6).unwrap();
        for v in m.iter() {
            assert!(v.abs() < 1e-300);
        }
    }

    #[test]
    fn coreg_sign_convention_enforced() {
        assert!(CoregCoef::new(-1.0, 0.0, 1.0).is_err());
        assert!(CoregCoef::new(1.0, -5.0, 0.0).is_ok());
    }

    #[test]
    fn local_cov_corr_data1() {
        let ps = PSCoef::new(1.0, 0.3).unwrap();
        let coreg = CoregCoef::new(1.0, -0.4, 1.0).unwrap();
        let (cov, corr) =
            local_cov_corr(&ps, &coreg, 1.0, 1.0, 1.0, false, 0.3, 0.1).unwrap();
        assert_relative_eq!(cov, -0.1, max_relative = 1e-12);
        // var1 = 1 + 1 = 2, var2 = 0.09 + 0.16 + 1 = 1.25
        assert_relative_eq!(corr, -0.1 / (2.0f64 * 1.25).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn local_cov_corr_data2_sign_flip() {
        let ps = PSCoef::new(1.0, -0.3).unwrap();
        let coreg = CoregCoef::new(1.0, -0.4, 1.0).unwrap();
        let (cov, _) = local_cov_corr(&ps, &coreg, 1.0, 1.0, 1.0, false, 0.3, 0.1).unwrap();
        assert_relative_eq!(cov, -0.7, max_relative = 1e-12);
    }

    #[test]
    fn local_cov_corr_zero_loadings() {
        let (cov, corr) = local_cov_corr(
            &PSCoef::zero(),
            &CoregCoef::zero(),
            1.0,
            1.0,
            1.0,
            false,
            0.3,
            0.1,
        )
        .unwrap();
        assert_eq!(cov, 0.0);
        assert_eq!(corr, 0.0);
    }

    #[test]
    fn local_cov_nugget_flag_shrinks_correlation() {
        let ps = PSCoef::new(1.0, 0.3).unwrap();
        let coreg = CoregCoef::zero();
        let (_, corr_no) = local_cov_corr(&ps, &coreg, 1.0, 1.0, 1.0, false, 0.3, 0.1).unwrap();
        let (_, corr_with) = local_cov_corr(&ps, &coreg, 1.0, 1.0, 1.0, true, 0.3, 0.1).unwrap();
        assert!(corr_with.abs() < corr_no.abs());
    }

    proptest! {
        #[test]
        fn cross_cov_m4_is_symmetric_psd(
            g1 in -3.0f64..3.0,
            g2 in -3.0f64..3.0,
            a11 in 0.0f64..3.0,
            a21 in -3.0f64..3.0,
            a22 in 0.0f64..3.0,
            s2 in 0.01f64..5.0,
            p_eta in 0.01f64..10.0,
            p1 in 0.01f64..10.0,
            p2 in 0.01f64..10.0,
            h in 0.0f64..5.0,
        ) {
            let ps = PSCoef::new(g1, g2).unwrap();
            let coreg = CoregCoef::new(a11, a21, a22).unwrap();
            let m = cross_cov_m4(
                &ps,
                &coreg,
                &kernel(s2, p_eta),
                &kernel(1.0, p1),
                &kernel(1.0, p2),
                h,
            ).unwrap();
            prop_assert!((m[(0, 1)] - m[(1, 0)]).abs() < 1e-12);
            let tr = m[(0, 0)] + m[(1, 1)];
            prop_assert!(m[(0, 0)] >= -1e-12);
            prop_assert!(m[(1, 1)] >= -1e-12);
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            prop_assert!(det >= -1e-9 * (1.0 + tr * tr));
        }

        #[test]
        fn m4_is_sum_of_m2_and_m3(
            g1 in -2.0f64..2.0,
            g2 in -2.0f64..2.0,
            a21 in -2.0f64..2.0,
            h in 0.0f64..4.0,
        ) {
            let ps = PSCoef::new(g1, g2).unwrap();
            let coreg = CoregCoef::new(0.8, a21, 1.1).unwrap();
            let eta = kernel(0.7, 2.0);
            let w1 = kernel(1.0, 1.0);
            let w2 = kernel(1.0, 3.0);
            let m4 = cross_cov_m4(&ps, &coreg, &eta, &w1, &w2, h).unwrap();
            let sum = cross_cov_m2(&ps, &eta, h).unwrap()
                + cross_cov_m3(&coreg, &w1, &w2, h).unwrap();
            for (a, b) in m4.iter().zip(sum.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn exp_cov_matrices_are_psd(
            pts in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..50),
            s2 in 0.1f64..3.0,
            phi in 0.1f64..8.0,
        ) {
            let locs: Vec<Location> = pts.iter().map(|&(x, y)| Location::new(x, y)).collect();
            let k = kernel(s2, phi);
            let n = locs.len();
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] = k.cov(locs[i].distance(&locs[j]));
                }
            }
            let trace: f64 = (0..n).map(|i| m[(i, i)]).sum();
            let eig = m.symmetric_eigen();
            let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(min_eig >= -1e-8 * trace);
        }
    }
}
