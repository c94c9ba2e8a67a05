//! Posterior-predictive co-kriging at held-out locations and posterior
//! cross-covariance dependence summaries.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::covariance::{local_cov_corr, pairwise_distances, CoregCoef, ExpKernelParams, PSCoef};
use crate::domain::Location;
use crate::error::{Error, Result};
use crate::gp::GpField;
use crate::mcmc::{quantile, summarize_trace, PosteriorDraws, TraceSummary};
use crate::model::{BivariateDataset, ModelFamily};
use crate::rng::stream_rng;

const S_FIELD: u64 = 100; // + field slot
const S_NOISE: u64 = 110;

/// Posterior-predictive draws at test locations, one row per stored latent
/// snapshot.
#[derive(Clone, Debug)]
pub struct PredictiveDraws {
    pub locations: Vec<Location>,
    /// `draws1[d][i]` is draw `d` of response 1 at `locations[i]`.
    pub draws1: Vec<Vec<f64>>,
    pub draws2: Vec<Vec<f64>>,
}

impl PredictiveDraws {
    pub fn n_draws(&self) -> usize {
        self.draws1.len()
    }

    fn site_draws(&self, response: usize, site: usize) -> Vec<f64> {
        let source = if response == 1 { &self.draws1 } else { &self.draws2 };
        source.iter().map(|d| d[site]).collect()
    }

    pub fn mean(&self, response: usize, site: usize) -> f64 {
        let d = self.site_draws(response, site);
        d.iter().sum::<f64>() / d.len() as f64
    }

    pub fn quantile(&self, response: usize, site: usize, q: f64) -> f64 {
        quantile(&self.site_draws(response, site), q)
    }
}

/// Exact conditional simulation of a latent field at test locations given
/// its grid values: kriging from the representative points under the field's
/// own kernel, then a draw from the conditional Gaussian.
fn conditional_field_draw<R: Rng + ?Sized>(
    field: &GpField,
    grid_chol: &DMatrix<f64>,
    test: &[Location],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let grid = field.grid();
    let kernel = field.params();
    let n = grid.n_cells();
    let m = test.len();
    let mut cross = DMatrix::zeros(m, n);
    for (i, t) in test.iter().enumerate() {
        for (j, c) in grid.centroids().iter().enumerate() {
            cross[(i, j)] = kernel.cov(t.distance(c));
        }
    }
    // conditional mean: K_tg Sigma^{-1} f
    let f = DVector::from_column_slice(field.values());
    let tmp = grid_chol
        .solve_lower_triangular(&f)
        .ok_or(Error::CholeskyFailed { jitter: 0.0 })?;
    let sigma_inv_f = grid_chol
        .tr_solve_lower_triangular(&tmp)
        .ok_or(Error::CholeskyFailed { jitter: 0.0 })?;
    let mean = &cross * &sigma_inv_f;
    // conditional covariance: K_tt - V^T V with V = L^{-1} K_gt
    let v = grid_chol
        .solve_lower_triangular(&cross.transpose())
        .ok_or(Error::CholeskyFailed { jitter: 0.0 })?;
    let mut cond = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            cond[(i, j)] = kernel.cov(test[i].distance(&test[j]));
        }
    }
    cond -= v.transpose() * &v;
    // kriging residual variances can round below zero at grid points
    let mut jitter = 1e-12 * kernel.sigma2();
    let max_jitter = 1e-4 * kernel.sigma2();
    let chol = loop {
        let mut c = cond.clone();
        for i in 0..m {
            c[(i, i)] += jitter;
        }
        match c.cholesky() {
            Some(ch) => break ch,
            None => {
                jitter *= 10.0;
                if jitter > max_jitter {
                    return Err(Error::CholeskyFailed { jitter });
                }
            }
        }
    };
    let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((mean + chol.l() * z).iter().copied().collect())
}

/// Posterior-predictive draws of both responses at `test_locations`.
///
/// For every stored latent snapshot, latent-field values at the test sites
/// are drawn from their Gaussian conditional given the grid-level values,
/// the response mean is assembled under the fitted family, and nugget noise
/// is added.
pub fn predict_responses(
    draws: &PosteriorDraws,
    data: &BivariateDataset,
    test_locations: &[Location],
    seed: u64,
) -> Result<PredictiveDraws> {
    if draws.snapshots.is_empty() {
        return Err(Error::InvalidParameter("no latent snapshots stored in the draws".into()));
    }
    if test_locations.is_empty() {
        return Err(Error::InvalidParameter("no test locations".into()));
    }
    let family = draws.family;
    let covars = data.covariates();
    let p = covars.dim();
    let grid = draws.snapshots[0].eta[0].grid().clone();
    for s in test_locations {
        if !grid.region().contains(s) {
            return Err(Error::OutOfRegion { x: s.x, y: s.y });
        }
    }
    let grid_dist = pairwise_distances(grid.centroids());
    let mut x_test = vec![vec![0.0; p]; test_locations.len()];
    for (s, row) in test_locations.iter().zip(x_test.iter_mut()) {
        covars.fill(s, row);
    }

    let m = test_locations.len();
    let mut draws1 = Vec::with_capacity(draws.snapshots.len());
    let mut draws2 = Vec::with_capacity(draws.snapshots.len());
    for (snap_idx, snap) in draws.snapshots.iter().enumerate() {
        let counter = snap_idx as u64;
        // latent values at test sites, one conditional draw per active field
        let eta_t: Vec<Vec<f64>> = if family.has_shared_process() {
            snap.eta
                .iter()
                .enumerate()
                .map(|(l, field)| {
                    let cov =
                        crate::covariance::CovMatrix::from_distances_auto(field.params(), &grid_dist)?;
                    let mut rng = stream_rng(seed, S_FIELD + l as u64, counter);
                    conditional_field_draw(field, cov.factor_l(), test_locations, &mut rng)
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let (w1_t, w2_t) = if family.has_coreg() {
            let cov1 =
                crate::covariance::CovMatrix::from_distances_auto(snap.w1.params(), &grid_dist)?;
            let mut rng1 = stream_rng(seed, S_FIELD + 3, counter);
            let w1 = conditional_field_draw(&snap.w1, cov1.factor_l(), test_locations, &mut rng1)?;
            let cov2 =
                crate::covariance::CovMatrix::from_distances_auto(snap.w2.params(), &grid_dist)?;
            let mut rng2 = stream_rng(seed, S_FIELD + 4, counter);
            let w2 = conditional_field_draw(&snap.w2, cov2.factor_l(), test_locations, &mut rng2)?;
            (w1, w2)
        } else {
            (Vec::new(), Vec::new())
        };

        let mut rng_noise = stream_rng(seed, S_NOISE, counter);
        let mut row1 = Vec::with_capacity(m);
        let mut row2 = Vec::with_capacity(m);
        let two_etas = snap.eta.len() == 2;
        for i in 0..m {
            let xb1: f64 = x_test[i].iter().zip(&snap.beta1).map(|(a, b)| a * b).sum();
            let xb2: f64 = x_test[i].iter().zip(&snap.beta2).map(|(a, b)| a * b).sum();
            let mut m1 = xb1;
            let mut m2 = xb2;
            if family.has_shared_process() {
                m1 += snap.gamma1 * eta_t[0][i];
                m2 += snap.gamma2 * eta_t[if two_etas { 1 } else { 0 }][i];
            }
            if family.has_coreg() {
                m1 += snap.a11 * w1_t[i];
                m2 += snap.a21 * w1_t[i] + snap.a22 * w2_t[i];
            }
            row1.push(m1 + snap.tau1_2.sqrt() * rng_noise.sample::<f64, _>(StandardNormal));
            row2.push(m2 + snap.tau2_2.sqrt() * rng_noise.sample::<f64, _>(StandardNormal));
        }
        draws1.push(row1);
        draws2.push(row2);
    }
    Ok(PredictiveDraws { locations: test_locations.to_vec(), draws1, draws2 })
}

/// Pointwise posterior mean and 95% interval of one cross-covariance curve.
#[derive(Clone, Debug)]
pub struct CurveSummary {
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

fn summarize_curves(per_draw: &[Vec<f64>], n_dist: usize) -> CurveSummary {
    let mut mean = Vec::with_capacity(n_dist);
    let mut lo = Vec::with_capacity(n_dist);
    let mut hi = Vec::with_capacity(n_dist);
    for d in 0..n_dist {
        let col: Vec<f64> = per_draw.iter().map(|row| row[d]).collect();
        mean.push(col.iter().sum::<f64>() / col.len() as f64);
        lo.push(quantile(&col, 0.025));
        hi.push(quantile(&col, 0.975));
    }
    CurveSummary { mean, lo, hi }
}

/// Posterior same-site covariance/correlation summaries.
#[derive(Clone, Debug)]
pub struct LocalSummary {
    pub cov11: TraceSummary,
    pub cov22: TraceSummary,
    pub cov21: TraceSummary,
    pub corr21: TraceSummary,
}

/// Posterior cross-covariance surfaces over a distance grid, with the
/// between-response curve decomposed into its shared-process and
/// coregionalization contributions (`cov21 = cov21_shared + cov21_corr`
/// pointwise in every draw).
#[derive(Clone, Debug)]
pub struct DependenceSummary {
    pub distances: Vec<f64>,
    pub cov11: CurveSummary,
    pub cov22: CurveSummary,
    pub cov21: CurveSummary,
    pub cov21_shared: CurveSummary,
    pub cov21_corr: CurveSummary,
    pub local: LocalSummary,
    pub include_nugget: bool,
}

/// Evaluate the fitted cross-covariance structure on a distance grid for
/// every posterior draw and aggregate pointwise means and 95% intervals.
pub fn dependence_summary(
    draws: &PosteriorDraws,
    distances: &[f64],
    include_nugget: bool,
) -> Result<DependenceSummary> {
    if !matches!(draws.family, ModelFamily::M3 | ModelFamily::M4) {
        return Err(Error::ModelMismatch(
            "dependence summaries are defined for the coregionalized families".into(),
        ));
    }
    if distances.iter().any(|h| *h < 0.0) {
        return Err(Error::InvalidParameter("distances must be nonnegative".into()));
    }
    let n = draws.n_kept();
    let zeros = vec![0.0; n];
    let get = |name: &str| -> Result<&[f64]> {
        draws
            .trace(name)
            .ok_or_else(|| Error::InvalidParameter(format!("missing trace {name}")))
    };
    let gamma1 = draws.trace("gamma1").unwrap_or(&zeros);
    let gamma2 = draws.trace("gamma2").unwrap_or(&zeros);
    let sigma2_eta = get("sigma2_eta")?;
    let phi_eta = get("phi_eta")?;
    let a11 = get("a11")?;
    let a21 = get("a21")?;
    let a22 = get("a22")?;
    let phi_w1 = get("phi_w1")?;
    let phi_w2 = get("phi_w2")?;
    let tau2_1 = get("tau2_1")?;
    let tau2_2 = get("tau2_2")?;

    let nd = distances.len();
    let mut cov11 = Vec::with_capacity(n);
    let mut cov22 = Vec::with_capacity(n);
    let mut cov21 = Vec::with_capacity(n);
    let mut shared = Vec::with_capacity(n);
    let mut corr = Vec::with_capacity(n);
    let mut local_cov11 = Vec::with_capacity(n);
    let mut local_cov22 = Vec::with_capacity(n);
    let mut local_cov21 = Vec::with_capacity(n);
    let mut local_corr21 = Vec::with_capacity(n);
    for t in 0..n {
        let eta_k = ExpKernelParams::new(sigma2_eta[t], phi_eta[t])?;
        let w1_k = ExpKernelParams::new(1.0, phi_w1[t])?;
        let w2_k = ExpKernelParams::new(1.0, phi_w2[t])?;
        let (g1, g2) = (gamma1[t], gamma2[t]);
        let (l11, l21, l22) = (a11[t], a21[t], a22[t]);
        let mut r11 = Vec::with_capacity(nd);
        let mut r22 = Vec::with_capacity(nd);
        let mut r21 = Vec::with_capacity(nd);
        let mut rsh = Vec::with_capacity(nd);
        let mut rco = Vec::with_capacity(nd);
        for &h in distances {
            let ce = eta_k.cov(h);
            let r1 = w1_k.corr(h);
            let r2 = w2_k.corr(h);
            let sh = g1 * g2 * ce;
            let co = l11 * l21 * r1;
            r11.push(g1 * g1 * ce + l11 * l11 * r1);
            r22.push(g2 * g2 * ce + l21 * l21 * r1 + l22 * l22 * r2);
            rsh.push(sh);
            rco.push(co);
            r21.push(sh + co);
        }
        cov11.push(r11);
        cov22.push(r22);
        cov21.push(r21);
        shared.push(rsh);
        corr.push(rco);

        let ps = PSCoef::new(g1, g2)?;
        let coreg = CoregCoef::new(l11, l21, l22)?;
        let (lc, lr) =
            local_cov_corr(&ps, &coreg, sigma2_eta[t], 1.0, 1.0, include_nugget, tau2_1[t], tau2_2[t])?;
        local_cov21.push(lc);
        local_corr21.push(lr);
        let nug1 = if include_nugget { tau2_1[t] } else { 0.0 };
        let nug2 = if include_nugget { tau2_2[t] } else { 0.0 };
        local_cov11.push(g1 * g1 * sigma2_eta[t] + l11 * l11 + nug1);
        local_cov22.push(g2 * g2 * sigma2_eta[t] + l21 * l21 + l22 * l22 + nug2);
    }

    Ok(DependenceSummary {
        distances: distances.to_vec(),
        cov11: summarize_curves(&cov11, nd),
        cov22: summarize_curves(&cov22, nd),
        cov21: summarize_curves(&cov21, nd),
        cov21_shared: summarize_curves(&shared, nd),
        cov21_corr: summarize_curves(&corr, nd),
        local: LocalSummary {
            cov11: summarize_trace(&local_cov11),
            cov22: summarize_trace(&local_cov22),
            cov21: summarize_trace(&local_cov21),
            corr21: summarize_trace(&local_corr21),
        },
        include_nugget,
    })
}
