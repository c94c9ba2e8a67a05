//! Posterior sampling for the joint models: elliptical slice sampling for
//! latent fields, whitened joint moves for kernel hyperparameters, exact
//! Gibbs draws for the conditionally Gaussian coefficient blocks, random-walk
//! Metropolis for the intensity coefficients, and ESS-based diagnostics.

pub mod diagnostics;
pub mod samplers;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{pairwise_distances, CovMatrix, ExpKernelParams};
use crate::domain::GridApprox;
use crate::error::{Error, Result};
use crate::gp::GpField;
use crate::model::{
    joint_log_posterior, normal_logpdf, BivariateDataset, ModelFamily, ParamState, Priors,
    Scenario,
};
use crate::rng::stream_rng;

pub use diagnostics::{ess_ips, ks_pvalue, ks_statistic};
pub use samplers::{
    ess_update_field, gibbs_linear_block, linear_gaussian_conditional, rw_update_vec,
    sample_inv_gamma, update_hyperparams, AdaptiveStep, WhitenedHyperMove,
};

// one RNG stream per sampler block; the iteration number is the counter
const S_ETA: u64 = 10;
const S_ETA_HYP: u64 = 20;
const S_W1: u64 = 30;
const S_W1_HYP: u64 = 31;
const S_W2: u64 = 32;
const S_W2_HYP: u64 = 33;
const S_ALPHA: u64 = 40;
const S_GIBBS1: u64 = 50;
const S_GIBBS2: u64 = 51;
const S_TAU: u64 = 52;

/// Sampler configuration. Defaults follow the 10,000 burn-in / 20,000 kept
/// protocol with an ESS floor of 200.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub n_burn: usize,
    pub n_keep: usize,
    pub thin: usize,
    /// Latent-field snapshots (used for prediction) are stored every
    /// `field_thin`-th kept draw.
    pub field_thin: usize,
    pub seed: u64,
    pub step_alpha: f64,
    pub step_hyper: f64,
    pub ess_floor: f64,
    /// Robbins-Monro step adaptation during burn-in.
    pub adapt: bool,
    /// Hold the preferential-sampling loadings at zero.
    pub freeze_gamma: bool,
    /// Hold the cross-response loading `a21` at zero, removing latent
    /// cross-dependence between the responses.
    pub freeze_a21: bool,
    /// Hold the response mean structure at zero (no regression block).
    pub fix_beta_zero: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_burn: 10_000,
            n_keep: 20_000,
            thin: 1,
            field_thin: 20,
            seed: 0,
            step_alpha: 0.15,
            step_hyper: 0.4,
            ess_floor: 200.0,
            adapt: true,
            freeze_gamma: false,
            freeze_a21: false,
            fix_beta_zero: false,
        }
    }
}

impl McmcConfig {
    /// Desk-scale profile: 1,000 burn-in, 2,000 kept, denser field snapshots.
    pub fn smoke(seed: u64) -> Self {
        Self { n_burn: 1_000, n_keep: 2_000, field_thin: 4, seed, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.field_thin == 0 {
            return Err(Error::InvalidParameter("thinning intervals must be >= 1".into()));
        }
        if self.n_keep == 0 {
            return Err(Error::InvalidParameter("n_keep must be positive".into()));
        }
        Ok(())
    }
}

/// Posterior summary of one scalar trace.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TraceSummary {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Parameter and latent-field draws from one chain.
#[derive(Clone, Debug)]
pub struct PosteriorDraws {
    pub scenario: Scenario,
    pub family: ModelFamily,
    pub names: Vec<String>,
    /// `traces[k][t]` is parameter `names[k]` at kept draw `t`.
    pub traces: Vec<Vec<f64>>,
    pub ess: Vec<f64>,
    /// Acceptance rate per adapted random-walk block over the kept phase.
    pub acceptance: Vec<(String, f64)>,
    /// Full-state snapshots (including latent fields) for prediction.
    pub snapshots: Vec<ParamState>,
    /// Kept-draw index of each snapshot.
    pub snapshot_kept_idx: Vec<usize>,
    pub warnings: Vec<String>,
}

impl PosteriorDraws {
    pub fn n_kept(&self) -> usize {
        self.traces.first().map_or(0, Vec::len)
    }

    pub fn trace(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.traces[i].as_slice())
    }

    pub fn ess_for(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.ess[i])
    }

    pub fn summary(&self, name: &str) -> Option<TraceSummary> {
        self.trace(name).map(summarize_trace)
    }

    /// One column per scalar parameter.
    pub fn export_traces_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.names)?;
        for t in 0..self.n_kept() {
            let row: Vec<String> = self.traces.iter().map(|tr| format!("{:.9e}", tr[t])).collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn summarize_trace(trace: &[f64]) -> TraceSummary {
    let n = trace.len().max(1) as f64;
    let mean = trace.iter().sum::<f64>() / n;
    let var = trace.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    TraceSummary { mean, sd: var.sqrt(), lo: quantile(trace, 0.025), hi: quantile(trace, 0.975) }
}

/// Linear-interpolated empirical quantile.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

struct Caches {
    grid: Arc<GridApprox>,
    dist: DMatrix<f64>,
    cell_area: f64,
    x_cells: DMatrix<f64>,
    p: usize,
    y1: Vec<f64>,
    x1: DMatrix<f64>,
    cell1: Vec<usize>,
    y2: Vec<f64>,
    x2: DMatrix<f64>,
    cell2: Vec<usize>,
    pat_x: Vec<DMatrix<f64>>,
    pat_cells: Vec<Vec<usize>>,
}

fn design_rows(
    covars: &dyn crate::covariates::Covariates,
    sites: &[crate::domain::Location],
) -> DMatrix<f64> {
    let p = covars.dim();
    let mut m = DMatrix::zeros(sites.len(), p);
    let mut row = vec![0.0; p];
    for (i, s) in sites.iter().enumerate() {
        covars.fill(s, &mut row);
        for j in 0..p {
            m[(i, j)] = row[j];
        }
    }
    m
}

fn build_caches(
    scenario: Scenario,
    data: &BivariateDataset,
    grid: &Arc<GridApprox>,
) -> Result<Caches> {
    if data.region() != grid.region() {
        return Err(Error::ModelMismatch("dataset region differs from grid region".into()));
    }
    let covars = data.covariates().clone();
    let p = covars.dim();
    let site_cells = grid.nearest_centroids(data.sites())?;
    let x_cells = design_rows(covars.as_ref(), grid.centroids());

    let idx1 = data.observed_indices1();
    let idx2 = data.observed_indices2();
    if idx1.is_empty() || idx2.is_empty() {
        return Err(Error::Dataset("each response needs at least one observation".into()));
    }
    match scenario {
        Scenario::SharedLocations => {
            if !data.is_fully_observed() {
                return Err(Error::ModelMismatch(
                    "shared-locations scenario requires both responses at every site".into(),
                ));
            }
        }
        Scenario::Disjoint => {
            if (0..data.n_sites()).any(|i| data.obs1()[i] && data.obs2()[i]) {
                return Err(Error::ModelMismatch(
                    "disjoint scenario requires disjoint observation patterns".into(),
                ));
            }
        }
        Scenario::Overlapping => {}
    }

    let pick_sites = |idx: &[usize]| -> Vec<crate::domain::Location> {
        idx.iter().map(|&i| *data.site(i)).collect()
    };
    let y1: Vec<f64> = idx1.iter().map(|&i| data.y1()[i]).collect();
    let y2: Vec<f64> = idx2.iter().map(|&i| data.y2()[i]).collect();
    let x1 = design_rows(covars.as_ref(), &pick_sites(&idx1));
    let x2 = design_rows(covars.as_ref(), &pick_sites(&idx2));
    let cell1: Vec<usize> = idx1.iter().map(|&i| site_cells[i]).collect();
    let cell2: Vec<usize> = idx2.iter().map(|&i| site_cells[i]).collect();

    let (pat_x, pat_cells) = match scenario {
        Scenario::SharedLocations | Scenario::Overlapping => {
            let union: Vec<usize> = (0..data.n_sites())
                .filter(|&i| data.obs1()[i] || data.obs2()[i])
                .collect();
            let x = design_rows(covars.as_ref(), &pick_sites(&union));
            let cells: Vec<usize> = union.iter().map(|&i| site_cells[i]).collect();
            (vec![x], vec![cells])
        }
        Scenario::Disjoint => (
            vec![x1.clone(), x2.clone()],
            vec![cell1.clone(), cell2.clone()],
        ),
    };

    Ok(Caches {
        grid: grid.clone(),
        dist: pairwise_distances(grid.centroids()),
        cell_area: grid.cell_area(),
        x_cells,
        p,
        y1,
        x1,
        cell1,
        y2,
        x2,
        cell2,
        pat_x,
        pat_cells,
    })
}

struct State {
    alpha: Vec<Vec<f64>>,
    beta1: Vec<f64>,
    beta2: Vec<f64>,
    gamma1: f64,
    gamma2: f64,
    a11: f64,
    a21: f64,
    a22: f64,
    tau1_2: f64,
    tau2_2: f64,
    eta_kernels: Vec<ExpKernelParams>,
    w_kernels: [ExpKernelParams; 2],
    eta_vals: Vec<Vec<f64>>,
    w1_vals: Vec<f64>,
    w2_vals: Vec<f64>,
}

impl State {
    fn init(scenario: Scenario, caches: &Caches, priors: &Priors) -> Result<Self> {
        let n_lgcp = scenario.n_lgcp();
        let n_cells = caches.grid.n_cells();
        let eta_kernel = ExpKernelParams::new(priors.sigma2_mean(), 3.0)?;
        let w_kernel = ExpKernelParams::new(1.0, 3.0)?;
        Ok(Self {
            alpha: vec![vec![0.0; caches.p]; n_lgcp],
            beta1: vec![0.0; caches.p],
            beta2: vec![0.0; caches.p],
            gamma1: 0.0,
            gamma2: 0.0,
            a11: 0.0,
            a21: 0.0,
            a22: 0.0,
            tau1_2: priors.tau2_mean(),
            tau2_2: priors.tau2_mean(),
            eta_kernels: vec![eta_kernel; n_lgcp],
            w_kernels: [w_kernel, w_kernel],
            eta_vals: vec![vec![0.0; n_cells]; n_lgcp],
            w1_vals: vec![0.0; n_cells],
            w2_vals: vec![0.0; n_cells],
        })
    }

    /// Shared-process field index feeding response `j` (1-based).
    fn eta_index_for_response(&self, j: usize) -> usize {
        if self.eta_vals.len() == 2 && j == 2 {
            1
        } else {
            0
        }
    }

    fn snapshot(&self, caches: &Caches) -> ParamState {
        let grid = &caches.grid;
        let eta = self
            .eta_vals
            .iter()
            .zip(&self.eta_kernels)
            .map(|(vals, k)| {
                GpField::from_values(grid.clone(), *k, vals.clone())
                    .expect("field sized to grid")
            })
            .collect();
        ParamState {
            alpha: self.alpha.clone(),
            beta1: self.beta1.clone(),
            beta2: self.beta2.clone(),
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            a11: self.a11,
            a21: self.a21,
            a22: self.a22,
            tau1_2: self.tau1_2,
            tau2_2: self.tau2_2,
            eta,
            w1: GpField::from_values(grid.clone(), self.w_kernels[0], self.w1_vals.clone())
                .expect("field sized to grid"),
            w2: GpField::from_values(grid.clone(), self.w_kernels[1], self.w2_vals.clone())
                .expect("field sized to grid"),
        }
    }

    /// Residual of response `j` with every active mean component subtracted
    /// except `skip`: 0 = none, 1 = eta, 2 = w1, 3 = w2.
    fn partial_resid(&self, j: usize, skip: u8, family: ModelFamily, caches: &Caches) -> Vec<f64> {
        let (y, x, cells, beta) = if j == 1 {
            (&caches.y1, &caches.x1, &caches.cell1, &self.beta1)
        } else {
            (&caches.y2, &caches.x2, &caches.cell2, &self.beta2)
        };
        let eta_vals = &self.eta_vals[self.eta_index_for_response(j)];
        let gamma = if j == 1 { self.gamma1 } else { self.gamma2 };
        let (l1, l2) = if j == 1 { (self.a11, 0.0) } else { (self.a21, self.a22) };
        let shared = family.has_shared_process();
        let coreg = family.has_coreg();
        let mut r = Vec::with_capacity(y.len());
        for (i, &yi) in y.iter().enumerate() {
            let mut v = yi;
            for k in 0..caches.p {
                v -= x[(i, k)] * beta[k];
            }
            let c = cells[i];
            if shared && skip != 1 {
                v -= gamma * eta_vals[c];
            }
            if coreg {
                if skip != 2 {
                    v -= l1 * self.w1_vals[c];
                }
                if skip != 3 {
                    v -= l2 * self.w2_vals[c];
                }
            }
            r.push(v);
        }
        r
    }
}

/// Log-likelihood contribution of a response block given a candidate field:
/// `-1/(2 tau2) * sum (partial - load * vals[cell])^2`, constants dropped.
fn gaussian_load_term(partial: &[f64], cells: &[usize], load: f64, tau2: f64, vals: &[f64]) -> f64 {
    let mut s = 0.0;
    for (r, &c) in partial.iter().zip(cells) {
        let d = r - load * vals[c];
        s += d * d;
    }
    -0.5 * s / tau2
}

/// LGCP log-likelihood terms that depend on the intensity field (constants
/// kept; they are cheap and make the value interpretable).
fn lgcp_term(
    alpha_lin_cells: &[f64],
    alpha_lin_pts: &[f64],
    pat_cells: &[usize],
    cell_area: f64,
    vals: &[f64],
) -> f64 {
    let mut integral = 0.0;
    for (lin, v) in alpha_lin_cells.iter().zip(vals) {
        integral += (lin + v).exp();
    }
    if !integral.is_finite() {
        return f64::NEG_INFINITY;
    }
    let mut pts = 0.0;
    for (lin, &c) in alpha_lin_pts.iter().zip(pat_cells) {
        pts += lin + vals[c];
    }
    pts - integral * cell_area
}

fn matvec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.nrows()];
    for i in 0..m.nrows() {
        let mut s = 0.0;
        for j in 0..m.ncols() {
            s += m[(i, j)] * v[j];
        }
        out[i] = s;
    }
    out
}

/// Which mean components response `j`'s Gibbs block estimates.
struct GibbsLayout {
    use_beta: bool,
    use_eta: bool,
    use_w1: bool,
    use_w2: bool,
}

fn gibbs_layout(j: usize, family: ModelFamily, config: &McmcConfig) -> GibbsLayout {
    GibbsLayout {
        use_beta: !config.fix_beta_zero,
        use_eta: family.has_shared_process() && !config.freeze_gamma,
        use_w1: family.has_coreg() && (j == 1 || !config.freeze_a21),
        use_w2: family.has_coreg() && j == 2,
    }
}

/// Run one chain. Deterministic given the config seed; returns scalar traces
/// with ESS diagnostics plus periodic latent-field snapshots for prediction.
pub fn run_chain(
    scenario: Scenario,
    family: ModelFamily,
    data: &BivariateDataset,
    grid: &Arc<GridApprox>,
    priors: &Priors,
    config: &McmcConfig,
) -> Result<PosteriorDraws> {
    config.validate()?;
    if !family.valid_for(scenario) {
        return Err(Error::ModelMismatch(format!(
            "{} is not defined for the {} scenario",
            family.label(),
            scenario.label()
        )));
    }
    let caches = build_caches(scenario, data, grid)?;
    let mut state = State::init(scenario, &caches, priors)?;
    let n_lgcp = scenario.n_lgcp();
    let coreg = family.has_coreg();
    let shared = family.has_shared_process();

    // initial posterior must be finite; report the offending term otherwise
    {
        let snap = state.snapshot(&caches);
        let lp = joint_log_posterior(scenario, family, &snap, data, priors)?;
        if !lp.is_finite() {
            let resp = crate::model::response_loglik(family, &snap, data)?;
            let term = if !resp.is_finite() { "response likelihood" } else { "point process likelihood" };
            return Err(Error::NonFinitePosterior(term.into()));
        }
    }

    let mut eta_cov: Vec<CovMatrix> = state
        .eta_kernels
        .iter()
        .map(|k| CovMatrix::from_distances_auto(k, &caches.dist))
        .collect::<Result<_>>()?;
    let mut w_cov: Vec<CovMatrix> = state
        .w_kernels
        .iter()
        .map(|k| CovMatrix::from_distances_auto(k, &caches.dist))
        .collect::<Result<_>>()?;

    let mut step_alpha: Vec<AdaptiveStep> =
        (0..n_lgcp).map(|_| AdaptiveStep::new(config.step_alpha)).collect();
    let mut step_eta: Vec<AdaptiveStep> =
        (0..n_lgcp).map(|_| AdaptiveStep::new(config.step_hyper)).collect();
    let mut step_w = [
        AdaptiveStep::new(config.step_hyper),
        AdaptiveStep::new(config.step_hyper),
    ];

    let names = param_names(scenario, family, &caches, config);
    let kept_total = config.n_keep / config.thin;
    let mut traces: Vec<Vec<f64>> = vec![Vec::with_capacity(kept_total); names.len()];
    let mut snapshots = Vec::new();
    let mut snapshot_kept_idx = Vec::new();

    let prior_prec = 1.0 / priors.coef_var;
    let total_iters = config.n_burn + config.n_keep;
    let seed = config.seed;

    for it in 0..total_iters {
        let burning = it < config.n_burn;
        let itc = it as u64;

        // latent intensity fields: elliptical slice, then whitened hyper move
        for l in 0..n_lgcp {
            let alpha_lin_cells = matvec(&caches.x_cells, &state.alpha[l]);
            let alpha_lin_pts = matvec(&caches.pat_x[l], &state.alpha[l]);
            let pat_cells = &caches.pat_cells[l];
            // responses loading on this field through gamma
            let mut loads: Vec<(f64, Vec<f64>, &Vec<usize>, f64)> = Vec::new();
            if shared {
                for j in [1usize, 2] {
                    if state.eta_index_for_response(j) != l {
                        continue;
                    }
                    let gamma = if j == 1 { state.gamma1 } else { state.gamma2 };
                    if gamma == 0.0 {
                        continue;
                    }
                    let partial = state.partial_resid(j, 1, family, &caches);
                    let cells = if j == 1 { &caches.cell1 } else { &caches.cell2 };
                    let tau2 = if j == 1 { state.tau1_2 } else { state.tau2_2 };
                    loads.push((gamma, partial, cells, tau2));
                }
            }
            let cell_area = caches.cell_area;
            let loglik = move |vals: &[f64]| {
                let mut ll =
                    lgcp_term(&alpha_lin_cells, &alpha_lin_pts, pat_cells, cell_area, vals);
                for (gamma, partial, cells, tau2) in &loads {
                    ll += gaussian_load_term(partial, cells, *gamma, *tau2, vals);
                }
                ll
            };
            let mut vals = std::mem::take(&mut state.eta_vals[l]);
            let mut rng = stream_rng(seed, S_ETA + l as u64, itc);
            let ll = ess_update_field(&mut vals, eta_cov[l].factor_l(), &loglik, &mut rng);

            let mut rng_h = stream_rng(seed, S_ETA_HYP + l as u64, itc);
            let mv = WhitenedHyperMove { update_sigma2: true, step: step_eta[l].step };
            let (accepted, _) = update_hyperparams(
                &mut state.eta_kernels[l],
                &mut vals,
                &mut eta_cov[l],
                &caches.dist,
                &loglik,
                ll,
                priors,
                &mv,
                &mut rng_h,
            );
            state.eta_vals[l] = vals;
            step_eta[l].record(accepted);
            if burning && config.adapt {
                step_eta[l].adapt(accepted, it);
            }
        }

        // coregionalization fields
        if coreg {
            for (widx, (stream_f, stream_h)) in
                [(S_W1, S_W1_HYP), (S_W2, S_W2_HYP)].into_iter().enumerate()
            {
                let mut terms: Vec<(f64, Vec<f64>, &Vec<usize>, f64)> = Vec::new();
                if widx == 0 {
                    if state.a11 != 0.0 {
                        terms.push((
                            state.a11,
                            state.partial_resid(1, 2, family, &caches),
                            &caches.cell1,
                            state.tau1_2,
                        ));
                    }
                    if state.a21 != 0.0 {
                        terms.push((
                            state.a21,
                            state.partial_resid(2, 2, family, &caches),
                            &caches.cell2,
                            state.tau2_2,
                        ));
                    }
                } else if state.a22 != 0.0 {
                    terms.push((
                        state.a22,
                        state.partial_resid(2, 3, family, &caches),
                        &caches.cell2,
                        state.tau2_2,
                    ));
                }
                let loglik = move |vals: &[f64]| {
                    let mut ll = 0.0;
                    for (load, partial, cells, tau2) in &terms {
                        ll += gaussian_load_term(partial, cells, *load, *tau2, vals);
                    }
                    ll
                };
                let mut vals = if widx == 0 {
                    std::mem::take(&mut state.w1_vals)
                } else {
                    std::mem::take(&mut state.w2_vals)
                };
                let mut rng = stream_rng(seed, stream_f, itc);
                let ll = ess_update_field(&mut vals, w_cov[widx].factor_l(), &loglik, &mut rng);

                let mut rng_h = stream_rng(seed, stream_h, itc);
                let mv = WhitenedHyperMove { update_sigma2: false, step: step_w[widx].step };
                let (accepted, _) = update_hyperparams(
                    &mut state.w_kernels[widx],
                    &mut vals,
                    &mut w_cov[widx],
                    &caches.dist,
                    &loglik,
                    ll,
                    priors,
                    &mv,
                    &mut rng_h,
                );
                if widx == 0 {
                    state.w1_vals = vals;
                } else {
                    state.w2_vals = vals;
                }
                step_w[widx].record(accepted);
                if burning && config.adapt {
                    step_w[widx].adapt(accepted, it);
                }
            }
        }

        // intensity coefficients: random-walk Metropolis
        for l in 0..n_lgcp {
            let eta_vals = &state.eta_vals[l];
            let x_cells = &caches.x_cells;
            let pat_x = &caches.pat_x[l];
            let pat_cells = &caches.pat_cells[l];
            let cell_area = caches.cell_area;
            let coef_var = priors.coef_var;
            let logpost = move |a: &[f64]| {
                let lin_cells = matvec(x_cells, a);
                let lin_pts = matvec(pat_x, a);
                let ll = lgcp_term(&lin_cells, &lin_pts, pat_cells, cell_area, eta_vals);
                ll + a.iter().map(|&v| normal_logpdf(v, 0.0, coef_var)).sum::<f64>()
            };
            let mut a = std::mem::take(&mut state.alpha[l]);
            let cur = logpost(&a);
            let mut rng = stream_rng(seed, S_ALPHA + l as u64, itc);
            let (accepted, _) =
                rw_update_vec(&mut a, step_alpha[l].step, &logpost, cur, &mut rng);
            state.alpha[l] = a;
            step_alpha[l].record(accepted);
            if burning && config.adapt {
                step_alpha[l].adapt(accepted, it);
            }
        }

        // conditionally Gaussian coefficient blocks, exact Gibbs
        for j in [1usize, 2] {
            let layout = gibbs_layout(j, family, config);
            let (y, x, cells, n_obs) = if j == 1 {
                (&caches.y1, &caches.x1, &caches.cell1, caches.y1.len())
            } else {
                (&caches.y2, &caches.x2, &caches.cell2, caches.y2.len())
            };
            let eta_vals = &state.eta_vals[state.eta_index_for_response(j)];
            let mut cols: usize = 0;
            if layout.use_beta {
                cols += caches.p;
            }
            cols += usize::from(layout.use_eta)
                + usize::from(layout.use_w1)
                + usize::from(layout.use_w2);
            if cols == 0 {
                continue;
            }
            let mut design = DMatrix::zeros(n_obs, cols);
            for i in 0..n_obs {
                let mut k = 0;
                if layout.use_beta {
                    for c in 0..caches.p {
                        design[(i, k)] = x[(i, c)];
                        k += 1;
                    }
                }
                let cell = cells[i];
                if layout.use_eta {
                    design[(i, k)] = eta_vals[cell];
                    k += 1;
                }
                if layout.use_w1 {
                    design[(i, k)] = state.w1_vals[cell];
                    k += 1;
                }
                if layout.use_w2 {
                    design[(i, k)] = state.w2_vals[cell];
                }
            }
            let yv = DVector::from_column_slice(y);
            let tau2 = if j == 1 { state.tau1_2 } else { state.tau2_2 };
            let stream = if j == 1 { S_GIBBS1 } else { S_GIBBS2 };
            let mut rng = stream_rng(seed, stream, itc);
            let draw = gibbs_linear_block(&design, &yv, tau2, prior_prec, &mut rng)?;
            let mut k = 0;
            if layout.use_beta {
                let beta = if j == 1 { &mut state.beta1 } else { &mut state.beta2 };
                for c in 0..caches.p {
                    beta[c] = draw[k];
                    k += 1;
                }
            }
            if layout.use_eta {
                if j == 1 {
                    state.gamma1 = draw[k];
                } else {
                    state.gamma2 = draw[k];
                }
                k += 1;
            }
            if layout.use_w1 {
                if j == 1 {
                    state.a11 = draw[k];
                } else {
                    state.a21 = draw[k];
                }
                k += 1;
            }
            if layout.use_w2 {
                state.a22 = draw[k];
            }
        }
        // sign canonicalization: flipping a loading together with its field
        // leaves the likelihood invariant
        if coreg {
            if state.a11 < 0.0 {
                state.a11 = -state.a11;
                state.a21 = -state.a21;
                for v in &mut state.w1_vals {
                    *v = -*v;
                }
            }
            if state.a22 < 0.0 {
                state.a22 = -state.a22;
                for v in &mut state.w2_vals {
                    *v = -*v;
                }
            }
        }

        // nugget variances: conjugate inverse-gamma
        {
            let mut rng = stream_rng(seed, S_TAU, itc);
            let r1 = state.partial_resid(1, 0, family, &caches);
            let ssr1: f64 = r1.iter().map(|v| v * v).sum();
            state.tau1_2 = sample_inv_gamma(
                priors.tau2_shape + caches.y1.len() as f64 / 2.0,
                priors.tau2_scale + ssr1 / 2.0,
                &mut rng,
            )?;
            let r2 = state.partial_resid(2, 0, family, &caches);
            let ssr2: f64 = r2.iter().map(|v| v * v).sum();
            state.tau2_2 = sample_inv_gamma(
                priors.tau2_shape + caches.y2.len() as f64 / 2.0,
                priors.tau2_scale + ssr2 / 2.0,
                &mut rng,
            )?;
        }

        if it + 1 == config.n_burn {
            // freeze adaptation stats so reported rates cover the kept phase
            for s in step_alpha.iter_mut().chain(step_eta.iter_mut()).chain(step_w.iter_mut()) {
                s.reset_counts();
            }
        }
        if !burning && (it - config.n_burn) % config.thin == 0 {
            let kept_idx = (it - config.n_burn) / config.thin;
            record_params(&state, scenario, family, config, &mut traces);
            if kept_idx % config.field_thin == 0 {
                snapshots.push(state.snapshot(&caches));
                snapshot_kept_idx.push(kept_idx);
            }
        }
    }

    let ess: Vec<f64> = traces.iter().map(|t| ess_ips(t)).collect();
    let mut warnings = Vec::new();
    for (name, e) in names.iter().zip(&ess) {
        if *e < config.ess_floor {
            warnings.push(format!(
                "ESS {e:.0} for {name} below floor {}",
                config.ess_floor
            ));
        }
    }
    let mut acceptance = Vec::new();
    for (l, s) in step_alpha.iter().enumerate() {
        acceptance.push((format!("alpha{}", lgcp_suffix(l, n_lgcp)), s.rate()));
    }
    for (l, s) in step_eta.iter().enumerate() {
        acceptance.push((format!("eta_hyper{}", lgcp_suffix(l, n_lgcp)), s.rate()));
    }
    if coreg {
        acceptance.push(("w1_hyper".into(), step_w[0].rate()));
        acceptance.push(("w2_hyper".into(), step_w[1].rate()));
    }

    Ok(PosteriorDraws {
        scenario,
        family,
        names,
        traces,
        ess,
        acceptance,
        snapshots,
        snapshot_kept_idx,
        warnings,
    })
}

fn lgcp_suffix(l: usize, n_lgcp: usize) -> String {
    if n_lgcp == 1 {
        String::new()
    } else {
        format!("{}", l + 1)
    }
}

fn param_names(
    scenario: Scenario,
    family: ModelFamily,
    caches: &Caches,
    config: &McmcConfig,
) -> Vec<String> {
    let mut names = Vec::new();
    let n_lgcp = scenario.n_lgcp();
    for l in 0..n_lgcp {
        for k in 0..caches.p {
            names.push(format!("alpha{}_{k}", lgcp_suffix(l, n_lgcp)));
        }
    }
    if !config.fix_beta_zero {
        for k in 0..caches.p {
            names.push(format!("beta1_{k}"));
        }
        for k in 0..caches.p {
            names.push(format!("beta2_{k}"));
        }
    }
    if family.has_shared_process() && !config.freeze_gamma {
        names.push("gamma1".into());
        names.push("gamma2".into());
    }
    if family.has_coreg() {
        names.push("a11".into());
        if !config.freeze_a21 {
            names.push("a21".into());
        }
        names.push("a22".into());
        names.push("phi_w1".into());
        names.push("phi_w2".into());
    }
    for l in 0..n_lgcp {
        names.push(format!("sigma2_eta{}", lgcp_suffix(l, n_lgcp)));
        names.push(format!("phi_eta{}", lgcp_suffix(l, n_lgcp)));
    }
    names.push("tau2_1".into());
    names.push("tau2_2".into());
    names
}

fn record_params(
    state: &State,
    scenario: Scenario,
    family: ModelFamily,
    config: &McmcConfig,
    traces: &mut [Vec<f64>],
) {
    let mut vals = Vec::with_capacity(traces.len());
    for l in 0..scenario.n_lgcp() {
        vals.extend(state.alpha[l].iter().copied());
    }
    if !config.fix_beta_zero {
        vals.extend(state.beta1.iter().copied());
        vals.extend(state.beta2.iter().copied());
    }
    if family.has_shared_process() && !config.freeze_gamma {
        vals.push(state.gamma1);
        vals.push(state.gamma2);
    }
    if family.has_coreg() {
        vals.push(state.a11);
        if !config.freeze_a21 {
            vals.push(state.a21);
        }
        vals.push(state.a22);
        vals.push(state.w_kernels[0].phi());
        vals.push(state.w_kernels[1].phi());
    }
    for k in &state.eta_kernels {
        vals.push(k.sigma2());
        vals.push(k.phi());
    }
    vals.push(state.tau1_2);
    vals.push(state.tau2_2);
    debug_assert_eq!(vals.len(), traces.len());
    for (trace, v) in traces.iter_mut().zip(vals) {
        trace.push(v);
    }
}
