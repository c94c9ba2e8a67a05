//! Seeded simulation of latent Gaussian fields at the grid representative
//! points, and piecewise-constant evaluation at arbitrary locations.

use std::sync::Arc;

use rand::Rng;

use crate::covariance::{CovMatrix, ExpKernelParams};
use crate::domain::{GridApprox, Location};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// A latent Gaussian field realized at the grid centroids.
///
/// Off-grid evaluation returns the value at the nearest representative
/// point, matching the convention used both to simulate data and to evaluate
/// the LGCP likelihood.
#[derive(Clone, Debug)]
pub struct GpField {
    grid: Arc<GridApprox>,
    values: Vec<f64>,
    params: ExpKernelParams,
}

impl GpField {
    pub fn from_values(
        grid: Arc<GridApprox>,
        params: ExpKernelParams,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::InvalidParameter(format!(
                "field has {} values for {} grid cells",
                values.len(),
                grid.n_cells()
            )));
        }
        Ok(Self { grid, values, params })
    }

    /// Constant field, mostly useful for degenerate configurations.
    pub fn constant(grid: Arc<GridApprox>, params: ExpKernelParams, value: f64) -> Self {
        let n = grid.n_cells();
        Self { grid, values: vec![value; n], params }
    }

    /// Zero-mean draw `L z` with `L` the Cholesky factor of the centroid
    /// covariance; bit-reproducible for a fixed seed.
    pub fn simulate(grid: Arc<GridApprox>, params: ExpKernelParams, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, 0, 0);
        Self::simulate_with_rng(grid, params, &mut rng)
    }

    pub fn simulate_with_rng<R: Rng + ?Sized>(
        grid: Arc<GridApprox>,
        params: ExpKernelParams,
        rng: &mut R,
    ) -> Result<Self> {
        let cov = CovMatrix::from_points_auto(&params, grid.centroids())?;
        let values = cov.sample_zero_mean(rng);
        Ok(Self { grid, values, params })
    }

    /// Draw reusing an existing factorization of the centroid covariance.
    pub fn simulate_with_cov<R: Rng + ?Sized>(
        grid: Arc<GridApprox>,
        params: ExpKernelParams,
        cov: &CovMatrix,
        rng: &mut R,
    ) -> Result<Self> {
        if cov.dim() != grid.n_cells() {
            return Err(Error::InvalidParameter("covariance/grid size mismatch".into()));
        }
        let values = cov.sample_zero_mean(rng);
        Ok(Self { grid, values, params })
    }

    pub fn grid(&self) -> &Arc<GridApprox> {
        &self.grid
    }

    pub fn params(&self) -> &ExpKernelParams {
        &self.params
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn value_at_cell(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    /// Field value at the representative point nearest to `s`.
    pub fn eval(&self, s: &Location) -> Result<f64> {
        Ok(self.values[self.grid.nearest_centroid(s)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Region;

    fn unit_grid(res: usize) -> Arc<GridApprox> {
        Arc::new(GridApprox::build(&Region::unit_square(), res).unwrap())
    }

    fn kernel(sigma2: f64, phi: f64) -> ExpKernelParams {
        ExpKernelParams::new(sigma2, phi).unwrap()
    }

    #[test]
    fn single_cell_marginal_variance() {
        let grid = unit_grid(1);
        let k = kernel(0.8, 3.0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for seed in 0..n {
            let f = GpField::simulate(grid.clone(), k, seed as u64).unwrap();
            let v = f.value_at_cell(0);
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(
            (var - 0.8).abs() / 0.8 < 0.03,
            "sample variance {var} off from 0.8 by more than 3%"
        );
    }

    #[test]
    fn near_zero_variance_pins_field() {
        let grid = unit_grid(3);
        let f = GpField::simulate(grid, kernel(1e-20, 3.0), 42).unwrap();
        for v in f.values() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let grid = unit_grid(5);
        let k = kernel(1.0, 3.0);
        let a = GpField::simulate(grid.clone(), k, 7).unwrap();
        let b = GpField::simulate(grid, k, 7).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn eval_at_centroid_is_exact() {
        let grid = unit_grid(4);
        let f = GpField::simulate(grid.clone(), kernel(1.0, 2.0), 3).unwrap();
        for (i, c) in grid.centroids().iter().enumerate() {
            assert_eq!(f.eval(c).unwrap(), f.value_at_cell(i));
        }
    }

    #[test]
    fn constant_field_everywhere() {
        let grid = unit_grid(6);
        let f = GpField::constant(grid, kernel(1.0, 1.0), 2.5);
        assert_eq!(f.eval(&Location::new(0.13, 0.87)).unwrap(), 2.5);
        assert_eq!(f.eval(&Location::new(0.99, 0.01)).unwrap(), 2.5);
    }

    #[test]
    fn eval_is_piecewise_constant_within_cell() {
        let grid = unit_grid(2);
        let f = GpField::simulate(grid, kernel(1.0, 3.0), 11).unwrap();
        // all strictly inside the lower-left cell
        let v = f.eval(&Location::new(0.25, 0.25)).unwrap();
        for s in [(0.05, 0.05), (0.45, 0.05), (0.05, 0.45), (0.49, 0.49)] {
            assert_eq!(f.eval(&Location::new(s.0, s.1)).unwrap(), v);
        }
    }

    #[test]
    fn eval_out_of_region_rejected() {
        let grid = unit_grid(2);
        let f = GpField::constant(grid, kernel(1.0, 1.0), 0.0);
        assert!(f.eval(&Location::new(-0.1, 0.5)).is_err());
    }

    #[test]
    fn empirical_covariance_matches_kernel() {
        // adjacent centroids on a 5x5 grid, distance 0.2
        let grid = unit_grid(5);
        let k = kernel(1.0, 1.0);
        let cov = CovMatrix::from_points_auto(&k, grid.centroids()).unwrap();
        let (i, j) = (0usize, 1usize);
        let d = grid.centroid(i).distance(grid.centroid(j));
        let expected = k.cov(d);
        let n = 100_000;
        let mut rng = stream_rng(99, 0, 0);
        let (mut sxy, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let f = GpField::simulate_with_cov(grid.clone(), k, &cov, &mut rng).unwrap();
            let (a, b) = (f.value_at_cell(i), f.value_at_cell(j));
            sxy += a * b;
            sx += a;
            sy += b;
        }
        let nf = n as f64;
        let emp = sxy / nf - (sx / nf) * (sy / nf);
        assert!(
            (emp - expected).abs() / expected < 0.05,
            "empirical {emp} vs kernel {expected}"
        );
    }
}
