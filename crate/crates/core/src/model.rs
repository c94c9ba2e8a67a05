//! The joint hierarchical model: sampling scenario x response-model family
//! assembled into log-posterior evaluators over a unified parameter and
//! latent state.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::covariance::{CovMatrix, ExpKernelParams};
use crate::covariates::Covariates;
use crate::domain::{GridApprox, Location, Region};
use crate::error::{Error, Result};
use crate::gp::GpField;
use crate::lgcp::{IntensityModel, PointPattern};

/// How the sampling locations of the two responses relate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// One point pattern carries both responses.
    #[serde(rename = "shared")]
    SharedLocations,
    /// One point pattern; each response observed on a subset (missing data).
    Overlapping,
    /// Two disjoint point patterns from independent location processes.
    Disjoint,
}

impl Scenario {
    pub fn n_lgcp(&self) -> usize {
        match self {
            Scenario::Disjoint => 2,
            _ => 1,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Scenario::SharedLocations => "shared",
            Scenario::Overlapping => "overlapping",
            Scenario::Disjoint => "disjoint",
        }
    }
}

/// Response-model family.
///
/// `M1`..`M4` apply to the shared and overlapping scenarios; the starred
/// families are their disjoint-scenario counterparts (`M1Star` has the same
/// structure as `M3`; `M2Star` adds one shared process per location process).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelFamily {
    M1,
    M2,
    M3,
    M4,
    #[serde(rename = "M1star")]
    M1Star,
    #[serde(rename = "M2star")]
    M2Star,
}

impl ModelFamily {
    /// Latent intensity fields enter the response means.
    pub fn has_shared_process(&self) -> bool {
        matches!(self, ModelFamily::M2 | ModelFamily::M4 | ModelFamily::M2Star)
    }

    /// Coregionalized fields enter the response means.
    pub fn has_coreg(&self) -> bool {
        matches!(
            self,
            ModelFamily::M3 | ModelFamily::M4 | ModelFamily::M1Star | ModelFamily::M2Star
        )
    }

    pub fn valid_for(&self, scenario: Scenario) -> bool {
        match self {
            ModelFamily::M1Star | ModelFamily::M2Star => scenario == Scenario::Disjoint,
            _ => scenario != Scenario::Disjoint,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ModelFamily::M1 => "M1",
            ModelFamily::M2 => "M2",
            ModelFamily::M3 => "M3",
            ModelFamily::M4 => "M4",
            ModelFamily::M1Star => "M1star",
            ModelFamily::M2Star => "M2star",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "M1" => Ok(ModelFamily::M1),
            "M2" => Ok(ModelFamily::M2),
            "M3" => Ok(ModelFamily::M3),
            "M4" => Ok(ModelFamily::M4),
            "M1star" | "M1*" => Ok(ModelFamily::M1Star),
            "M2star" | "M2*" => Ok(ModelFamily::M2Star),
            _ => Err(Error::Config(format!("unknown model family '{s}'"))),
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// The four univariate regression specifications, realized as bivariate
/// configurations with the second response fully masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnivariateModel {
    /// Plain regression with white-noise errors.
    Regression,
    /// Regression plus the intensity field as a regressor.
    SharedProcess,
    /// Regression plus an independent spatial effect.
    Geostat,
    /// Both spatial effect and intensity-field regressor.
    GeostatPs,
}

impl UnivariateModel {
    pub fn bivariate_family(&self) -> ModelFamily {
        match self {
            UnivariateModel::Regression => ModelFamily::M1,
            UnivariateModel::SharedProcess => ModelFamily::M2,
            UnivariateModel::Geostat => ModelFamily::M3,
            UnivariateModel::GeostatPs => ModelFamily::M4,
        }
    }
}

/// Point-referenced bivariate responses with per-site observation masks.
///
/// One site list covers both responses; `obs1`/`obs2` say where each response
/// is available. Under the shared-locations scenario both masks are all true;
/// under the disjoint scenario they are disjoint.
#[derive(Clone)]
pub struct BivariateDataset {
    region: Region,
    sites: Vec<Location>,
    y1: Vec<f64>,
    y2: Vec<f64>,
    obs1: Vec<bool>,
    obs2: Vec<bool>,
    covariates: Arc<dyn Covariates>,
}

impl fmt::Debug for BivariateDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BivariateDataset")
            .field("n_sites", &self.sites.len())
            .field("n_obs1", &self.n_obs1())
            .field("n_obs2", &self.n_obs2())
            .field("covar_dim", &self.covariates.dim())
            .finish()
    }
}

impl BivariateDataset {
    pub fn new(
        region: Region,
        sites: Vec<Location>,
        y1: Vec<f64>,
        y2: Vec<f64>,
        obs1: Vec<bool>,
        obs2: Vec<bool>,
        covariates: Arc<dyn Covariates>,
    ) -> Result<Self> {
        let n = sites.len();
        if y1.len() != n || y2.len() != n || obs1.len() != n || obs2.len() != n {
            return Err(Error::Dataset("site/response/mask lengths differ".into()));
        }
        if let Some(bad) = sites.iter().find(|s| !region.contains(s)) {
            return Err(Error::OutOfRegion { x: bad.x, y: bad.y });
        }
        for i in 0..n {
            if obs1[i] && !y1[i].is_finite() {
                return Err(Error::Dataset(format!("site {i}: observed y1 is not finite")));
            }
            if obs2[i] && !y2[i].is_finite() {
                return Err(Error::Dataset(format!("site {i}: observed y2 is not finite")));
            }
        }
        Ok(Self { region, sites, y1, y2, obs1, obs2, covariates })
    }

    /// Both responses observed at every site.
    pub fn fully_observed(
        region: Region,
        sites: Vec<Location>,
        y1: Vec<f64>,
        y2: Vec<f64>,
        covariates: Arc<dyn Covariates>,
    ) -> Result<Self> {
        let n = sites.len();
        Self::new(region, sites, y1, y2, vec![true; n], vec![true; n], covariates)
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn sites(&self) -> &[Location] {
        &self.sites
    }

    pub fn site(&self, i: usize) -> &Location {
        &self.sites[i]
    }

    pub fn y1(&self) -> &[f64] {
        &self.y1
    }

    pub fn y2(&self) -> &[f64] {
        &self.y2
    }

    pub fn obs1(&self) -> &[bool] {
        &self.obs1
    }

    pub fn obs2(&self) -> &[bool] {
        &self.obs2
    }

    pub fn n_obs1(&self) -> usize {
        self.obs1.iter().filter(|b| **b).count()
    }

    pub fn n_obs2(&self) -> usize {
        self.obs2.iter().filter(|b| **b).count()
    }

    pub fn covariates(&self) -> &Arc<dyn Covariates> {
        &self.covariates
    }

    pub fn is_fully_observed(&self) -> bool {
        self.obs1.iter().all(|b| *b) && self.obs2.iter().all(|b| *b)
    }

    pub fn observed_indices1(&self) -> Vec<usize> {
        (0..self.n_sites()).filter(|&i| self.obs1[i]).collect()
    }

    pub fn observed_indices2(&self) -> Vec<usize> {
        (0..self.n_sites()).filter(|&i| self.obs2[i]).collect()
    }

    /// Sites where the first response is observed.
    pub fn pattern1(&self) -> PointPattern {
        let locs = self
            .sites
            .iter()
            .zip(&self.obs1)
            .filter_map(|(s, &o)| o.then_some(*s))
            .collect();
        PointPattern::new(locs, self.region).expect("sites validated at construction")
    }

    /// Sites where the second response is observed.
    pub fn pattern2(&self) -> PointPattern {
        let locs = self
            .sites
            .iter()
            .zip(&self.obs2)
            .filter_map(|(s, &o)| o.then_some(*s))
            .collect();
        PointPattern::new(locs, self.region).expect("sites validated at construction")
    }

    /// Sites where at least one response is observed.
    pub fn union_pattern(&self) -> PointPattern {
        let locs = self
            .sites
            .iter()
            .enumerate()
            .filter_map(|(i, s)| (self.obs1[i] || self.obs2[i]).then_some(*s))
            .collect();
        PointPattern::new(locs, self.region).expect("sites validated at construction")
    }

    /// Keep the given site rows with possibly tightened masks. A row may only
    /// request an observation that exists in the parent dataset.
    pub fn subset(&self, rows: &[(usize, bool, bool)]) -> Result<Self> {
        let mut sites = Vec::with_capacity(rows.len());
        let mut y1 = Vec::with_capacity(rows.len());
        let mut y2 = Vec::with_capacity(rows.len());
        let mut obs1 = Vec::with_capacity(rows.len());
        let mut obs2 = Vec::with_capacity(rows.len());
        for &(i, o1, o2) in rows {
            if i >= self.n_sites() {
                return Err(Error::Dataset(format!("subset row {i} out of range")));
            }
            if (o1 && !self.obs1[i]) || (o2 && !self.obs2[i]) {
                return Err(Error::Dataset(format!(
                    "subset requests an unobserved response at site {i}"
                )));
            }
            sites.push(self.sites[i]);
            y1.push(self.y1[i]);
            y2.push(self.y2[i]);
            obs1.push(o1);
            obs2.push(o2);
        }
        Self::new(self.region, sites, y1, y2, obs1, obs2, self.covariates.clone())
    }

    /// The univariate view: second response fully masked.
    pub fn with_second_masked(&self) -> Self {
        let mut out = self.clone();
        out.obs2 = vec![false; out.n_sites()];
        out
    }
}

/// Prior settings. Defaults follow the weakly informative choices used
/// throughout: coefficients `N(0, 100)`, variances `IG(2, 0.1)`, decay
/// `U(0, 100)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Priors {
    pub coef_var: f64,
    pub sigma2_shape: f64,
    pub sigma2_scale: f64,
    pub phi_max: f64,
    pub tau2_shape: f64,
    pub tau2_scale: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            coef_var: 100.0,
            sigma2_shape: 2.0,
            sigma2_scale: 0.1,
            phi_max: 100.0,
            tau2_shape: 2.0,
            tau2_scale: 0.1,
        }
    }
}

/// The default weakly informative prior set.
pub fn priors_default() -> Priors {
    Priors::default()
}

pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (d * d / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
}

/// Inverse-gamma log density with shape `a` and scale `b`:
/// `b^a / Gamma(a) * x^{-a-1} * exp(-b/x)`.
pub fn inv_gamma_logpdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

impl Priors {
    pub fn log_coef(&self, x: f64) -> f64 {
        normal_logpdf(x, 0.0, self.coef_var)
    }

    pub fn log_sigma2(&self, x: f64) -> f64 {
        inv_gamma_logpdf(x, self.sigma2_shape, self.sigma2_scale)
    }

    pub fn log_phi(&self, x: f64) -> f64 {
        if x > 0.0 && x < self.phi_max {
            -self.phi_max.ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn log_tau2(&self, x: f64) -> f64 {
        inv_gamma_logpdf(x, self.tau2_shape, self.tau2_scale)
    }

    pub fn sigma2_mean(&self) -> f64 {
        if self.sigma2_shape > 1.0 {
            self.sigma2_scale / (self.sigma2_shape - 1.0)
        } else {
            self.sigma2_scale
        }
    }

    pub fn tau2_mean(&self) -> f64 {
        if self.tau2_shape > 1.0 {
            self.tau2_scale / (self.tau2_shape - 1.0)
        } else {
            self.tau2_scale
        }
    }
}

/// Full parameter and latent state of the joint model.
///
/// Parameters absent from the active family sit at their null values
/// (`gamma = 0` without a shared process, zero loadings and zero fields
/// without coregionalization), so every evaluator can read the state
/// uniformly.
#[derive(Clone, Debug)]
pub struct ParamState {
    /// LGCP coefficient vector(s); one per location process.
    pub alpha: Vec<Vec<f64>>,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub a11: f64,
    pub a21: f64,
    pub a22: f64,
    pub tau1_2: f64,
    pub tau2_2: f64,
    /// Intensity field(s); one per location process, kernel params inside.
    pub eta: Vec<GpField>,
    /// Coregionalization fields with unit marginal variance.
    pub w1: GpField,
    pub w2: GpField,
}

impl ParamState {
    /// Chain starting point: coefficients at zero, variances at prior means,
    /// decay at 3, fields flat at zero.
    pub fn init(
        scenario: Scenario,
        family: ModelFamily,
        grid: &Arc<GridApprox>,
        covar_dim: usize,
        priors: &Priors,
    ) -> Result<Self> {
        if !family.valid_for(scenario) {
            return Err(Error::ModelMismatch(format!(
                "{} is not defined for the {} scenario",
                family.label(),
                scenario.label()
            )));
        }
        let eta_kernel = ExpKernelParams::new(priors.sigma2_mean(), 3.0)?;
        let w_kernel = ExpKernelParams::new(1.0, 3.0)?;
        let eta: Vec<GpField> = (0..scenario.n_lgcp())
            .map(|_| GpField::constant(grid.clone(), eta_kernel, 0.0))
            .collect();
        Ok(Self {
            alpha: vec![vec![0.0; covar_dim]; scenario.n_lgcp()],
            beta1: vec![0.0; covar_dim],
            beta2: vec![0.0; covar_dim],
            gamma1: 0.0,
            gamma2: 0.0,
            a11: 0.0,
            a21: 0.0,
            a22: 0.0,
            tau1_2: priors.tau2_mean(),
            tau2_2: priors.tau2_mean(),
            eta,
            w1: GpField::constant(grid.clone(), w_kernel, 0.0),
            w2: GpField::constant(grid.clone(), w_kernel, 0.0),
        })
    }

    /// The shared-process field feeding response `j` (1-based).
    pub fn eta_for_response(&self, j: usize) -> &GpField {
        if self.eta.len() == 2 && j == 2 {
            &self.eta[1]
        } else {
            &self.eta[0]
        }
    }

    /// Mean of each response at every dataset site under `family`.
    pub fn response_means(
        &self,
        family: ModelFamily,
        data: &BivariateDataset,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let covars = data.covariates();
        let p = covars.dim();
        if self.beta1.len() != p || self.beta2.len() != p {
            return Err(Error::ModelMismatch(format!(
                "beta dimension {} does not match covariate dimension {p}",
                self.beta1.len()
            )));
        }
        let grid = self.eta[0].grid();
        let mut mean1 = Vec::with_capacity(data.n_sites());
        let mut mean2 = Vec::with_capacity(data.n_sites());
        let mut x = vec![0.0; p];
        for s in data.sites() {
            covars.fill(s, &mut x);
            let cell = grid.nearest_centroid(s)?;
            let xb1: f64 = x.iter().zip(&self.beta1).map(|(a, b)| a * b).sum();
            let xb2: f64 = x.iter().zip(&self.beta2).map(|(a, b)| a * b).sum();
            let mut m1 = xb1;
            let mut m2 = xb2;
            if family.has_shared_process() {
                m1 += self.gamma1 * self.eta_for_response(1).value_at_cell(cell);
                m2 += self.gamma2 * self.eta_for_response(2).value_at_cell(cell);
            }
            if family.has_coreg() {
                let w1 = self.w1.value_at_cell(cell);
                let w2 = self.w2.value_at_cell(cell);
                m1 += self.a11 * w1;
                m2 += self.a21 * w1 + self.a22 * w2;
            }
            mean1.push(m1);
            mean2.push(m2);
        }
        Ok((mean1, mean2))
    }
}

/// Gaussian response log-likelihood conditional on the latent fields; masked
/// observations contribute nothing.
pub fn response_loglik(
    family: ModelFamily,
    state: &ParamState,
    data: &BivariateDataset,
) -> Result<f64> {
    if !(state.tau1_2 > 0.0 && state.tau2_2 > 0.0) {
        return Err(Error::InvalidParameter("nugget variances must be positive".into()));
    }
    let (mean1, mean2) = state.response_means(family, data)?;
    let mut ll = 0.0;
    for i in 0..data.n_sites() {
        if data.obs1()[i] {
            ll += normal_logpdf(data.y1()[i], mean1[i], state.tau1_2);
        }
        if data.obs2()[i] {
            ll += normal_logpdf(data.y2()[i], mean2[i], state.tau2_2);
        }
    }
    Ok(ll)
}

/// Response log-likelihood with the latent fields integrated out exactly.
///
/// The joint covariance over observed (response, site) pairs is assembled
/// from the model's cross-covariance structure at the exact site separations
/// plus nuggets, and the Gaussian density is evaluated densely. Intended for
/// small instances and validation.
pub fn marginal_response_loglik(
    family: ModelFamily,
    state: &ParamState,
    data: &BivariateDataset,
) -> Result<f64> {
    let covars = data.covariates();
    let p = covars.dim();
    let mut entries: Vec<(usize, usize)> = Vec::new(); // (response j, site i)
    for i in 0..data.n_sites() {
        if data.obs1()[i] {
            entries.push((1, i));
        }
    }
    for i in 0..data.n_sites() {
        if data.obs2()[i] {
            entries.push((2, i));
        }
    }
    let n = entries.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut x = vec![0.0; p];
    let mut resid = DVector::zeros(n);
    for (k, &(j, i)) in entries.iter().enumerate() {
        covars.fill(data.site(i), &mut x);
        let (beta, y) = if j == 1 {
            (&state.beta1, data.y1()[i])
        } else {
            (&state.beta2, data.y2()[i])
        };
        let xb: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
        resid[k] = y - xb;
    }
    let gammas = [state.gamma1, state.gamma2];
    let load_w1 = [state.a11, state.a21];
    let load_w2 = [0.0, state.a22];
    let shared = family.has_shared_process();
    let coreg = family.has_coreg();
    let two_etas = state.eta.len() == 2;
    let mut cov = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let (ja, ia) = entries[a];
            let (jb, ib) = entries[b];
            let d = data.site(ia).distance(data.site(ib));
            let mut c = 0.0;
            if shared {
                if two_etas {
                    if ja == jb {
                        c += gammas[ja - 1]
                            * gammas[jb - 1]
                            * state.eta[ja - 1].params().cov(d);
                    }
                } else {
                    c += gammas[ja - 1] * gammas[jb - 1] * state.eta[0].params().cov(d);
                }
            }
            if coreg {
                c += load_w1[ja - 1] * load_w1[jb - 1] * state.w1.params().corr(d);
                c += load_w2[ja - 1] * load_w2[jb - 1] * state.w2.params().corr(d);
            }
            if a == b {
                c += if ja == 1 { state.tau1_2 } else { state.tau2_2 };
            }
            cov[(a, b)] = c;
            cov[(b, a)] = c;
        }
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or(Error::CholeskyFailed { jitter: 0.0 })?;
    let l = chol.l();
    let z = l
        .solve_lower_triangular(&resid)
        .ok_or(Error::CholeskyFailed { jitter: 0.0 })?;
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let log_det: f64 = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok(-0.5 * (quad + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Log prior density of the latent fields present in `family`.
pub fn latent_fields_logprior(family: ModelFamily, state: &ParamState) -> Result<f64> {
    let mut lp = 0.0;
    for field in &state.eta {
        let cov = CovMatrix::from_points_auto(field.params(), field.grid().centroids())?;
        lp += cov.mvn_logpdf(field.values());
    }
    if family.has_coreg() {
        for field in [&state.w1, &state.w2] {
            let cov = CovMatrix::from_points_auto(field.params(), field.grid().centroids())?;
            lp += cov.mvn_logpdf(field.values());
        }
    }
    Ok(lp)
}

/// Log prior density of all scalar parameters present in `family`.
pub fn params_logprior(family: ModelFamily, state: &ParamState, priors: &Priors) -> f64 {
    let mut lp = 0.0;
    for alpha in &state.alpha {
        lp += alpha.iter().map(|&a| priors.log_coef(a)).sum::<f64>();
    }
    lp += state.beta1.iter().map(|&b| priors.log_coef(b)).sum::<f64>();
    lp += state.beta2.iter().map(|&b| priors.log_coef(b)).sum::<f64>();
    if family.has_shared_process() {
        lp += priors.log_coef(state.gamma1) + priors.log_coef(state.gamma2);
    }
    if family.has_coreg() {
        lp += priors.log_coef(state.a11)
            + priors.log_coef(state.a21)
            + priors.log_coef(state.a22);
        lp += priors.log_phi(state.w1.params().phi()) + priors.log_phi(state.w2.params().phi());
    }
    for field in &state.eta {
        lp += priors.log_sigma2(field.params().sigma2()) + priors.log_phi(field.params().phi());
    }
    lp += priors.log_tau2(state.tau1_2) + priors.log_tau2(state.tau2_2);
    lp
}

/// Full joint log posterior (up to a constant): LGCP likelihood(s) per the
/// scenario, the conditional response likelihood, latent-field GP priors,
/// and scalar-parameter priors. Families without a preferential-sampling
/// link still include the LGCP term; it just carries no information about
/// the responses.
pub fn joint_log_posterior(
    scenario: Scenario,
    family: ModelFamily,
    state: &ParamState,
    data: &BivariateDataset,
    priors: &Priors,
) -> Result<f64> {
    if !family.valid_for(scenario) {
        return Err(Error::ModelMismatch(format!(
            "{} is not defined for the {} scenario",
            family.label(),
            scenario.label()
        )));
    }
    if state.eta.len() != scenario.n_lgcp() {
        return Err(Error::ModelMismatch(format!(
            "state has {} intensity fields, scenario needs {}",
            state.eta.len(),
            scenario.n_lgcp()
        )));
    }
    let covars = data.covariates();
    let mut lp = 0.0;
    match scenario {
        Scenario::SharedLocations | Scenario::Overlapping => {
            let m = IntensityModel::new(state.alpha[0].clone(), state.eta[0].clone());
            lp += m.loglik(covars.as_ref(), &data.union_pattern())?;
        }
        Scenario::Disjoint => {
            let m1 = IntensityModel::new(state.alpha[0].clone(), state.eta[0].clone());
            lp += m1.loglik(covars.as_ref(), &data.pattern1())?;
            let m2 = IntensityModel::new(state.alpha[1].clone(), state.eta[1].clone());
            lp += m2.loglik(covars.as_ref(), &data.pattern2())?;
        }
    }
    lp += response_loglik(family, state, data)?;
    lp += latent_fields_logprior(family, state)?;
    lp += params_logprior(family, state, priors);
    Ok(lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{cross_cov_m4, CoregCoef, PSCoef};
    use crate::covariates::{InterceptOnly, InterceptYCentered};
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn unit_grid(res: usize) -> Arc<GridApprox> {
        Arc::new(GridApprox::build(&Region::unit_square(), res).unwrap())
    }

    fn small_dataset(n: usize, seed: u64) -> BivariateDataset {
        let mut rng = stream_rng(seed, 0, 0);
        let sites: Vec<Location> =
            (0..n).map(|_| Location::new(rng.random::<f64>(), rng.random::<f64>())).collect();
        let y1: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y2: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        BivariateDataset::fully_observed(
            Region::unit_square(),
            sites,
            y1,
            y2,
            Arc::new(InterceptYCentered),
        )
        .unwrap()
    }

    fn random_state(grid: &Arc<GridApprox>, seed: u64) -> ParamState {
        let mut rng = stream_rng(seed, 1, 0);
        let mut st =
            ParamState::init(Scenario::SharedLocations, ModelFamily::M4, grid, 2, &Priors::default())
                .unwrap();
        st.beta1 = vec![0.3, -0.2];
        st.beta2 = vec![-0.1, 0.5];
        st.gamma1 = 0.9;
        st.gamma2 = 0.4;
        st.a11 = 0.8;
        st.a21 = -0.5;
        st.a22 = 1.1;
        st.tau1_2 = 0.3;
        st.tau2_2 = 0.1;
        let eta_k = ExpKernelParams::new(0.7, 2.0).unwrap();
        let w_k1 = ExpKernelParams::new(1.0, 1.5).unwrap();
        let w_k2 = ExpKernelParams::new(1.0, 4.0).unwrap();
        st.eta =
            vec![GpField::simulate_with_rng(grid.clone(), eta_k, &mut rng).unwrap()];
        st.w1 = GpField::simulate_with_rng(grid.clone(), w_k1, &mut rng).unwrap();
        st.w2 = GpField::simulate_with_rng(grid.clone(), w_k2, &mut rng).unwrap();
        st
    }

    #[test]
    fn m1_single_observation_density() {
        let grid = unit_grid(2);
        let mut st = ParamState::init(
            Scenario::SharedLocations,
            ModelFamily::M1,
            &grid,
            1,
            &Priors::default(),
        )
        .unwrap();
        st.tau1_2 = 1.0;
        st.tau2_2 = 1.0;
        let data = BivariateDataset::new(
            Region::unit_square(),
            vec![Location::new(0.5, 0.5)],
            vec![0.0],
            vec![0.0],
            vec![true],
            vec![false],
            Arc::new(InterceptOnly),
        )
        .unwrap();
        let ll = response_loglik(ModelFamily::M1, &st, &data).unwrap();
        assert_relative_eq!(ll, -0.5 * (2.0 * std::f64::consts::PI).ln(), max_relative = 1e-14);
    }

    #[test]
    fn m2_with_flat_field_equals_m1() {
        // the shared-process family degenerates to the plain regression when
        // the intensity field is identically zero
        let grid = unit_grid(3);
        let data = small_dataset(8, 3);
        let mut st = random_state(&grid, 4);
        st.eta = vec![GpField::constant(grid.clone(), *st.eta[0].params(), 0.0)];
        let m2 = response_loglik(ModelFamily::M2, &st, &data).unwrap();
        let m1 = response_loglik(ModelFamily::M1, &st, &data).unwrap();
        assert_relative_eq!(m2, m1, epsilon = 1e-12);
    }

    #[test]
    fn nesting_gamma_zero_matches_m3() {
        let grid = unit_grid(3);
        let data = small_dataset(10, 5);
        let mut st = random_state(&grid, 6);
        st.gamma1 = 0.0;
        st.gamma2 = 0.0;
        let m4 = response_loglik(ModelFamily::M4, &st, &data).unwrap();
        let m3 = response_loglik(ModelFamily::M3, &st, &data).unwrap();
        assert!((m4 - m3).abs() < 1e-10);
    }

    #[test]
    fn nesting_loadings_zero_matches_m2() {
        let grid = unit_grid(3);
        let data = small_dataset(10, 7);
        let mut st = random_state(&grid, 8);
        st.a11 = 0.0;
        st.a21 = 0.0;
        st.a22 = 0.0;
        let m4 = response_loglik(ModelFamily::M4, &st, &data).unwrap();
        let m2 = response_loglik(ModelFamily::M2, &st, &data).unwrap();
        assert!((m4 - m2).abs() < 1e-10);
    }

    #[test]
    fn univariate_equals_masked_bivariate() {
        let grid = unit_grid(3);
        let data = small_dataset(9, 11);
        let masked = data.with_second_masked();
        let st = random_state(&grid, 12);
        for (uni, fam) in [
            (UnivariateModel::Regression, ModelFamily::M1),
            (UnivariateModel::SharedProcess, ModelFamily::M2),
            (UnivariateModel::Geostat, ModelFamily::M3),
            (UnivariateModel::GeostatPs, ModelFamily::M4),
        ] {
            assert_eq!(uni.bivariate_family(), fam);
            let ll = response_loglik(fam, &st, &masked).unwrap();
            // second response contributes nothing: recompute dropping y2 by hand
            let (mean1, _) = st.response_means(fam, &masked).unwrap();
            let by_hand: f64 = (0..masked.n_sites())
                .map(|i| normal_logpdf(masked.y1()[i], mean1[i], st.tau1_2))
                .sum();
            assert_relative_eq!(ll, by_hand, max_relative = 1e-12);
        }
    }

    #[test]
    fn priors_default_values() {
        let pr = priors_default();
        // N(0, 100) density at zero
        let dens = pr.log_coef(0.0).exp();
        assert_relative_eq!(dens, 1.0 / (200.0 * std::f64::consts::PI).sqrt(), max_relative = 1e-12);
        assert_eq!(pr.phi_max, 100.0);
        assert!(pr.log_phi(0.0).is_infinite());
        assert!(pr.log_phi(100.0).is_infinite());
        assert!(pr.log_phi(50.0).is_finite());
        // IG(2, 0.1) mean
        assert_relative_eq!(pr.sigma2_mean(), 0.1);
    }

    #[test]
    fn inv_gamma_logpdf_normalizes() {
        // coarse quadrature check of total mass
        let (a, b) = (2.0, 0.1);
        let mut mass = 0.0;
        let dx = 1e-4;
        let mut x = dx / 2.0;
        while x < 50.0 {
            mass += inv_gamma_logpdf(x, a, b).exp() * dx;
            x += dx;
        }
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn marginal_loglik_matches_cross_cov_oracle() {
        let grid = unit_grid(4);
        let data = small_dataset(5, 21);
        let st = random_state(&grid, 22);
        let lib = marginal_response_loglik(ModelFamily::M4, &st, &data).unwrap();

        // oracle: 10x10 covariance assembled entrywise from the cross-covariance
        // formula plus nuggets, density via direct Cholesky
        let ps = PSCoef::new(st.gamma1, st.gamma2).unwrap();
        let coreg = CoregCoef::new(st.a11, st.a21, st.a22).unwrap();
        let n = data.n_sites();
        let dim = 2 * n;
        let mut cov = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                let h = data.site(i).distance(data.site(j));
                let block = cross_cov_m4(
                    &ps,
                    &coreg,
                    st.eta[0].params(),
                    st.w1.params(),
                    st.w2.params(),
                    h,
                )
                .unwrap();
                cov[(i, j)] = block[(0, 0)];
                cov[(i, n + j)] = block[(0, 1)];
                cov[(n + i, j)] = block[(1, 0)];
                cov[(n + i, n + j)] = block[(1, 1)];
            }
        }
        for i in 0..n {
            cov[(i, i)] += st.tau1_2;
            cov[(n + i, n + i)] += st.tau2_2;
        }
        let mut resid = DVector::zeros(dim);
        for i in 0..n {
            let x = data.covariates().at(data.site(i));
            let xb1: f64 = x.iter().zip(&st.beta1).map(|(a, b)| a * b).sum();
            let xb2: f64 = x.iter().zip(&st.beta2).map(|(a, b)| a * b).sum();
            resid[i] = data.y1()[i] - xb1;
            resid[n + i] = data.y2()[i] - xb2;
        }
        let chol = cov.cholesky().unwrap();
        let l = chol.l();
        let z = l.solve_lower_triangular(&resid).unwrap();
        let quad: f64 = z.iter().map(|v| v * v).sum();
        let logdet: f64 = 2.0 * (0..dim).map(|i| l[(i, i)].ln()).sum::<f64>();
        let oracle =
            -0.5 * (quad + logdet + dim as f64 * (2.0 * std::f64::consts::PI).ln());
        assert!((lib - oracle).abs() < 1e-6, "lib {lib} vs oracle {oracle}");
    }

    #[test]
    fn m3_posterior_separates_from_responses() {
        // changing eta moves the posterior only through the LGCP + GP prior
        let grid = unit_grid(3);
        let data = small_dataset(6, 31);
        let priors = Priors::default();
        let mut st = random_state(&grid, 32);
        st.gamma1 = 0.0;
        st.gamma2 = 0.0;
        let lp_a = joint_log_posterior(Scenario::SharedLocations, ModelFamily::M3, &st, &data, &priors)
            .unwrap();
        let resp_a = response_loglik(ModelFamily::M3, &st, &data).unwrap();
        let mut st_b = st.clone();
        let mut rng = stream_rng(33, 0, 0);
        st_b.eta = vec![GpField::simulate_with_rng(
            grid.clone(),
            *st.eta[0].params(),
            &mut rng,
        )
        .unwrap()];
        let lp_b = joint_log_posterior(Scenario::SharedLocations, ModelFamily::M3, &st_b, &data, &priors)
            .unwrap();
        let resp_b = response_loglik(ModelFamily::M3, &st_b, &data).unwrap();
        assert_relative_eq!(resp_a, resp_b, max_relative = 1e-12);
        // the posterior difference is fully explained by LGCP + GP prior change
        let m_a = IntensityModel::new(st.alpha[0].clone(), st.eta[0].clone());
        let m_b = IntensityModel::new(st_b.alpha[0].clone(), st_b.eta[0].clone());
        let covars = data.covariates();
        let lgcp_diff = m_b.loglik(covars.as_ref(), &data.union_pattern()).unwrap()
            - m_a.loglik(covars.as_ref(), &data.union_pattern()).unwrap();
        let prior_diff = latent_fields_logprior(ModelFamily::M3, &st_b).unwrap()
            - latent_fields_logprior(ModelFamily::M3, &st).unwrap();
        assert_relative_eq!(lp_b - lp_a, lgcp_diff + prior_diff, max_relative = 1e-9);
    }

    #[test]
    fn overlapping_full_masks_equals_shared() {
        let grid = unit_grid(3);
        let data = small_dataset(7, 41);
        let st = random_state(&grid, 42);
        let priors = Priors::default();
        let a = joint_log_posterior(Scenario::SharedLocations, ModelFamily::M4, &st, &data, &priors)
            .unwrap();
        let b = joint_log_posterior(Scenario::Overlapping, ModelFamily::M4, &st, &data, &priors)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn joint_posterior_equals_sum_of_parts() {
        let grid = unit_grid(3);
        let data = small_dataset(3, 51);
        let st = random_state(&grid, 52);
        let priors = Priors::default();
        let total =
            joint_log_posterior(Scenario::SharedLocations, ModelFamily::M4, &st, &data, &priors)
                .unwrap();
        let m = IntensityModel::new(st.alpha[0].clone(), st.eta[0].clone());
        let parts = m.loglik(data.covariates().as_ref(), &data.union_pattern()).unwrap()
            + response_loglik(ModelFamily::M4, &st, &data).unwrap()
            + latent_fields_logprior(ModelFamily::M4, &st).unwrap()
            + params_logprior(ModelFamily::M4, &st, &priors);
        assert_relative_eq!(total, parts, max_relative = 1e-12);
    }

    #[test]
    fn starred_families_require_disjoint() {
        assert!(!ModelFamily::M2Star.valid_for(Scenario::SharedLocations));
        assert!(ModelFamily::M2Star.valid_for(Scenario::Disjoint));
        assert!(!ModelFamily::M4.valid_for(Scenario::Disjoint));
        let grid = unit_grid(2);
        assert!(ParamState::init(
            Scenario::SharedLocations,
            ModelFamily::M1Star,
            &grid,
            1,
            &Priors::default()
        )
        .is_err());
    }
}
