//! Covariate providers: the design vector `X(s)` as a function over the
//! region, shared by the point-process intensity and the response means.

use std::sync::Arc;

use crate::domain::Location;

/// A covariate field over the study region. The first entry is conventionally
/// an intercept.
pub trait Covariates: Send + Sync {
    fn dim(&self) -> usize;

    /// Covariate vector at `s`, written into `out` (length `dim()`).
    fn fill(&self, s: &Location, out: &mut [f64]);

    fn at(&self, s: &Location) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.fill(s, &mut out);
        out
    }
}

/// Intercept only: `X(s) = (1)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct InterceptOnly;

impl Covariates for InterceptOnly {
    fn dim(&self) -> usize {
        1
    }

    fn fill(&self, _s: &Location, out: &mut [f64]) {
        out[0] = 1.0;
    }
}

/// Intercept plus the centered y coordinate: `X(s) = (1, s_y - 0.5)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct InterceptYCentered;

impl Covariates for InterceptYCentered {
    fn dim(&self) -> usize {
        2
    }

    fn fill(&self, s: &Location, out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = s.y - 0.5;
    }
}

/// Covariates observed at a finite set of sites, extended over the region by
/// nearest-site lookup. An intercept column is prepended.
///
/// This is the generic stand-in for interpolated covariate surfaces when
/// data arrive as a plain site table.
#[derive(Clone, Debug)]
pub struct NearestSiteCovariates {
    sites: Vec<Location>,
    rows: Vec<Vec<f64>>,
    dim: usize,
}

impl NearestSiteCovariates {
    /// `rows[i]` are the covariate values observed at `sites[i]` (without
    /// intercept). All rows must share a length.
    pub fn new(sites: Vec<Location>, rows: Vec<Vec<f64>>) -> crate::Result<Self> {
        if sites.is_empty() || sites.len() != rows.len() {
            return Err(crate::Error::InvalidParameter(
                "covariate rows must be nonempty and aligned with sites".into(),
            ));
        }
        let k = rows[0].len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(crate::Error::InvalidParameter("ragged covariate rows".into()));
        }
        Ok(Self { sites, rows, dim: k + 1 })
    }
}

impl Covariates for NearestSiteCovariates {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fill(&self, s: &Location, out: &mut [f64]) {
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (i, site) in self.sites.iter().enumerate() {
            let d2 = s.distance2(site);
            if d2 < best_d2 {
                best = i;
                best_d2 = d2;
            }
        }
        out[0] = 1.0;
        out[1..].copy_from_slice(&self.rows[best]);
    }
}

impl<T: Covariates + ?Sized> Covariates for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn fill(&self, s: &Location, out: &mut [f64]) {
        (**self).fill(s, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_y_centered() {
        let c = InterceptYCentered;
        assert_eq!(c.at(&Location::new(0.2, 0.5)), vec![1.0, 0.0]);
        assert_eq!(c.at(&Location::new(0.2, 1.0)), vec![1.0, 0.5]);
    }

    #[test]
    fn nearest_site_lookup() {
        let c = NearestSiteCovariates::new(
            vec![Location::new(0.0, 0.0), Location::new(1.0, 1.0)],
            vec![vec![3.0], vec![7.0]],
        )
        .unwrap();
        assert_eq!(c.at(&Location::new(0.1, 0.1)), vec![1.0, 3.0]);
        assert_eq!(c.at(&Location::new(0.9, 0.8)), vec![1.0, 7.0]);
    }
}
