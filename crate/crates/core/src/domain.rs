//! Study region, coordinate rescaling, and the regular grid of
//! representative points used to approximate stochastic integrals and to
//! realize latent Gaussian fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the (rescaled) study region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        self.distance2(other).sqrt()
    }

    #[inline]
    pub fn distance2(&self, other: &Location) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Axis-aligned rectangular study region with positive area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Region {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && y_min.is_finite() && y_max.is_finite()) {
            return Err(Error::InvalidParameter("region bounds must be finite".into()));
        }
        if x_max <= x_min || y_max <= y_min {
            return Err(Error::InvalidParameter(format!(
                "region must have positive extent, got [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        Ok(Self { x_min, x_max, y_min, y_max })
    }

    /// The default region `[0,1] x [0,1]`.
    pub fn unit_square() -> Self {
        Self { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0 }
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Membership is inclusive on all boundaries.
    pub fn contains(&self, s: &Location) -> bool {
        s.x >= self.x_min && s.x <= self.x_max && s.y >= self.y_min && s.y <= self.y_max
    }
}

/// Regular grid of representative points over a region.
///
/// Centroids are stored row-major, x fastest: index `iy * nx + ix`.
#[derive(Clone, Debug)]
pub struct GridApprox {
    region: Region,
    nx: usize,
    ny: usize,
    centroids: Vec<Location>,
    cell_area: f64,
}

impl GridApprox {
    /// Square grid with `resolution` cells per axis.
    pub fn build(region: &Region, resolution: usize) -> Result<Self> {
        Self::build_rect(region, resolution, resolution)
    }

    /// Rectangular grid, `nx` cells along x and `ny` along y.
    pub fn build_rect(region: &Region, nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidParameter(
                "grid resolution must be at least 1 cell per axis".into(),
            ));
        }
        let dx = region.width() / nx as f64;
        let dy = region.height() / ny as f64;
        let mut centroids = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                centroids.push(Location::new(
                    region.x_min + (ix as f64 + 0.5) * dx,
                    region.y_min + (iy as f64 + 0.5) * dy,
                ));
            }
        }
        Ok(Self { region: *region, nx, ny, centroids, cell_area: dx * dy })
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn n_cells(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids(&self) -> &[Location] {
        &self.centroids
    }

    pub fn centroid(&self, idx: usize) -> &Location {
        &self.centroids[idx]
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_area
    }

    /// Half the cell diagonal: an upper bound on the distance from any point
    /// in the region to its nearest centroid.
    pub fn half_diagonal(&self) -> f64 {
        let dx = self.region.width() / self.nx as f64;
        let dy = self.region.height() / self.ny as f64;
        0.5 * (dx * dx + dy * dy).sqrt()
    }

    /// Index of the centroid nearest to `s`; equidistant candidates resolve
    /// to the lowest index.
    pub fn nearest_centroid(&self, s: &Location) -> Result<usize> {
        if !self.region.contains(s) {
            return Err(Error::OutOfRegion { x: s.x, y: s.y });
        }
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (i, c) in self.centroids.iter().enumerate() {
            let d2 = s.distance2(c);
            if d2 < best_d2 {
                best = i;
                best_d2 = d2;
            }
        }
        Ok(best)
    }

    /// Nearest-centroid indices for a batch of locations.
    pub fn nearest_centroids(&self, sites: &[Location]) -> Result<Vec<usize>> {
        sites.iter().map(|s| self.nearest_centroid(s)).collect()
    }
}

/// Result of standardizing raw coordinates so the maximum pairwise distance
/// equals one.
#[derive(Clone, Debug)]
pub struct Rescaled {
    pub locations: Vec<Location>,
    pub region: Region,
    /// Divisor applied to centered coordinates; multiply to map back.
    pub scale: f64,
    /// Subtracted from raw coordinates before scaling.
    pub offset: (f64, f64),
}

impl Rescaled {
    /// Map a rescaled location back to the raw coordinate system.
    pub fn to_raw(&self, s: &Location) -> (f64, f64) {
        (s.x * self.scale + self.offset.0, s.y * self.scale + self.offset.1)
    }
}

/// Standardize raw eastings/northings so the maximum pairwise distance is 1,
/// translating the minimum corner to the origin.
///
/// The returned region is the bounding box of the rescaled points; an axis
/// with zero extent (collinear input) is padded to `[-1/2, 1/2]` around the
/// constant coordinate so the region keeps positive area.
pub fn rescale_coordinates(raw: &[(f64, f64)]) -> Result<Rescaled> {
    if raw.len() < 2 {
        return Err(Error::DegenerateCoordinates(
            "need at least two points to standardize".into(),
        ));
    }
    if raw.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::DegenerateCoordinates("non-finite coordinate".into()));
    }
    let mut max_d2 = 0.0f64;
    for i in 0..raw.len() {
        for j in (i + 1)..raw.len() {
            let dx = raw[i].0 - raw[j].0;
            let dy = raw[i].1 - raw[j].1;
            max_d2 = max_d2.max(dx * dx + dy * dy);
        }
    }
    if max_d2 == 0.0 {
        return Err(Error::DegenerateCoordinates("all points are identical".into()));
    }
    let scale = max_d2.sqrt();
    let min_x = raw.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let min_y = raw.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let locations: Vec<Location> = raw
        .iter()
        .map(|(x, y)| Location::new((x - min_x) / scale, (y - min_y) / scale))
        .collect();
    let ext_x = locations.iter().map(|p| p.x).fold(0.0, f64::max);
    let ext_y = locations.iter().map(|p| p.y).fold(0.0, f64::max);
    let (x_min, x_max) = if ext_x > 1e-12 { (0.0, ext_x) } else { (-0.5, 0.5) };
    let (y_min, y_max) = if ext_y > 1e-12 { (0.0, ext_y) } else { (-0.5, 0.5) };
    Ok(Rescaled {
        locations,
        region: Region::new(x_min, x_max, y_min, y_max)?,
        scale,
        offset: (min_x, min_y),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn unit_square_resolution_30() {
        let grid = GridApprox::build(&Region::unit_square(), 30).unwrap();
        assert_eq!(grid.n_cells(), 900);
        assert_relative_eq!(grid.cell_area(), 1.0 / 900.0, max_relative = 1e-15);
    }

    #[test]
    fn single_cell_grid() {
        let grid = GridApprox::build(&Region::unit_square(), 1).unwrap();
        assert_eq!(grid.n_cells(), 1);
        assert_eq!(grid.centroid(0), &Location::new(0.5, 0.5));
        assert_relative_eq!(grid.cell_area(), 1.0);
    }

    #[test]
    fn resolution_two_centroids() {
        let grid = GridApprox::build(&Region::unit_square(), 2).unwrap();
        let expected = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];
        for (c, (x, y)) in grid.centroids().iter().zip(expected) {
            assert_eq!(c, &Location::new(x, y));
        }
    }

    #[test]
    fn zero_resolution_rejected() {
        assert!(GridApprox::build(&Region::unit_square(), 0).is_err());
    }

    #[test]
    fn nearest_centroid_basic() {
        let grid = GridApprox::build(&Region::unit_square(), 2).unwrap();
        assert_eq!(grid.nearest_centroid(&Location::new(0.1, 0.1)).unwrap(), 0);
    }

    #[test]
    fn nearest_centroid_tie_breaks_to_lowest_index() {
        let grid = GridApprox::build(&Region::unit_square(), 2).unwrap();
        // equidistant to all four centroids
        assert_eq!(grid.nearest_centroid(&Location::new(0.5, 0.5)).unwrap(), 0);
    }

    #[test]
    fn centroid_is_its_own_nearest() {
        let grid = GridApprox::build(&Region::unit_square(), 30).unwrap();
        for (i, c) in grid.centroids().iter().enumerate() {
            assert_eq!(grid.nearest_centroid(c).unwrap(), i);
        }
    }

    #[test]
    fn out_of_region_rejected() {
        let grid = GridApprox::build(&Region::unit_square(), 2).unwrap();
        assert!(matches!(
            grid.nearest_centroid(&Location::new(1.5, 0.5)),
            Err(Error::OutOfRegion { .. })
        ));
    }

    #[test]
    fn cell_areas_sum_to_region_area() {
        for res in [1usize, 7, 30] {
            let region = Region::new(0.0, 2.0, 0.0, 0.5).unwrap();
            let grid = GridApprox::build(&region, res).unwrap();
            let total = grid.cell_area() * grid.n_cells() as f64;
            assert_relative_eq!(total, region.area(), max_relative = 1e-12);
        }
    }

    #[test]
    fn rescale_vertical_pair() {
        let r = rescale_coordinates(&[(0.0, 0.0), (0.0, 2.0)]).unwrap();
        assert_eq!(r.scale, 2.0);
        assert_eq!(r.locations[0], Location::new(0.0, 0.0));
        assert_eq!(r.locations[1], Location::new(0.0, 1.0));
        // padded degenerate x-axis still contains the points
        assert!(r.region.contains(&r.locations[0]));
    }

    #[test]
    fn rescale_three_four_five() {
        let r = rescale_coordinates(&[(0.0, 0.0), (3.0, 4.0)]).unwrap();
        assert_eq!(r.scale, 5.0);
        let d = r.locations[0].distance(&r.locations[1]);
        assert_relative_eq!(d, 1.0, max_relative = 1e-15);
    }

    #[test]
    fn rescale_identity_on_unit_input() {
        let pts = [(0.0, 0.0), (0.6, 0.8), (0.3, 0.1)];
        let r = rescale_coordinates(&pts).unwrap();
        assert_relative_eq!(r.scale, 1.0, max_relative = 1e-15);
        for (loc, raw) in r.locations.iter().zip(pts) {
            assert_relative_eq!(loc.x, raw.0, max_relative = 1e-15);
            assert_relative_eq!(loc.y, raw.1, max_relative = 1e-15);
        }
    }

    #[test]
    fn rescale_identical_points_rejected() {
        assert!(rescale_coordinates(&[(1.0, 1.0), (1.0, 1.0)]).is_err());
    }

    #[test]
    fn rescale_idempotent() {
        let r = rescale_coordinates(&[(2.0, 7.0), (9.0, 1.0), (4.0, 4.0)]).unwrap();
        let again: Vec<(f64, f64)> = r.locations.iter().map(|l| (l.x, l.y)).collect();
        let r2 = rescale_coordinates(&again).unwrap();
        assert_relative_eq!(r2.scale, 1.0, max_relative = 1e-12);
        for (a, b) in r.locations.iter().zip(&r2.locations) {
            assert_relative_eq!(a.x, b.x, epsilon = 1e-12);
            assert_relative_eq!(a.y, b.y, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn nearest_centroid_within_half_diagonal(
            x in 0.0f64..=1.0,
            y in 0.0f64..=1.0,
            res in 1usize..20,
        ) {
            let grid = GridApprox::build(&Region::unit_square(), res).unwrap();
            let s = Location::new(x, y);
            let idx = grid.nearest_centroid(&s).unwrap();
            let d = s.distance(grid.centroid(idx));
            prop_assert!(d <= grid.half_diagonal() + 1e-12);
        }
    }
}
