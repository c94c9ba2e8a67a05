//! Config-driven experiment harness: simulate datasets, ingest external CSV
//! data, run fit/predict/score pipelines over model x holdout grids, and run
//! the cross-covariance dependence analysis. Everything is reproducible from
//! one root seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::ExpKernelParams;
use crate::covariates::{Covariates, InterceptOnly, InterceptYCentered, NearestSiteCovariates};
use crate::domain::{rescale_coordinates, GridApprox, Region};
use crate::error::{Error, Result};
use crate::gp::GpField;
use crate::lgcp::IntensityModel;
use crate::mcmc::{ess_ips, run_chain, summarize_trace, McmcConfig, PosteriorDraws};
use crate::model::{BivariateDataset, ModelFamily, Priors, Scenario};
use crate::predict::{dependence_summary, predict_responses, DependenceSummary};
use crate::rng::{child_seed, stream_rng};
use crate::score::{biased_pair_sample, make_holdout, HoldoutSpec, HoldoutStrategy, ScoreReport};

const S_SIM_ETA: u64 = 200;
const S_SIM_PATTERN: u64 = 210;
const S_SIM_W: u64 = 220;
const S_SIM_NOISE: u64 = 230;
const S_HOLDOUT: u64 = 300;
const S_CHAIN: u64 = 310;
const S_PREDICT: u64 = 320;

/// Covariate design available to simulations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    /// Intercept only.
    Intercept,
    /// Intercept plus centered y coordinate.
    InterceptY,
}

impl CovariateKind {
    pub fn build(&self) -> Arc<dyn Covariates> {
        match self {
            CovariateKind::Intercept => Arc::new(InterceptOnly),
            CovariateKind::InterceptY => Arc::new(InterceptYCentered),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CovariateKind::Intercept => 1,
            CovariateKind::InterceptY => 2,
        }
    }
}

/// Ground-truth parameters for a simulated dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationDesign {
    pub generator: ModelFamily,
    pub covariates: CovariateKind,
    /// Intensity coefficients, one vector per location process.
    pub alpha: Vec<Vec<f64>>,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub a11: f64,
    pub a21: f64,
    pub a22: f64,
    pub sigma2_eta: Vec<f64>,
    pub phi_eta: Vec<f64>,
    pub phi_w1: f64,
    pub phi_w2: f64,
    pub tau1_2: f64,
    pub tau2_2: f64,
}

impl Default for SimulationDesign {
    fn default() -> Self {
        Self::shared_low_variance()
    }
}

impl SimulationDesign {
    /// Shared-locations generating model, low intensity-field variance.
    pub fn shared_low_variance() -> Self {
        Self {
            generator: ModelFamily::M2,
            covariates: CovariateKind::InterceptY,
            alpha: vec![vec![6.0, 1.0]],
            beta1: vec![0.0, 0.5],
            beta2: vec![0.0, 0.5],
            gamma1: 1.0,
            gamma2: 0.3,
            a11: 0.0,
            a21: 0.0,
            a22: 0.0,
            sigma2_eta: vec![1.0 / 3.0],
            phi_eta: vec![3.0],
            phi_w1: 1.0,
            phi_w2: 1.0,
            tau1_2: 0.3,
            tau2_2: 0.1,
        }
    }

    /// Shared-locations generating model, high intensity-field variance.
    pub fn shared_high_variance() -> Self {
        Self { sigma2_eta: vec![1.0], ..Self::shared_low_variance() }
    }

    /// Disjoint-patterns generating model: two independent location
    /// processes, each response loading on its own intensity field.
    pub fn disjoint_low_variance() -> Self {
        Self {
            generator: ModelFamily::M2Star,
            alpha: vec![vec![6.0, 1.0], vec![6.0, 1.0]],
            sigma2_eta: vec![1.0 / 3.0, 1.0 / 3.0],
            phi_eta: vec![3.0, 3.0],
            a11: 0.0,
            a21: 0.0,
            a22: 0.0,
            ..Self::shared_low_variance()
        }
    }

    /// Dependence-bias experiment, first dataset: positive gamma2.
    pub fn dependence_data1() -> Self {
        Self {
            generator: ModelFamily::M4,
            covariates: CovariateKind::Intercept,
            alpha: vec![vec![6.0]],
            beta1: vec![0.0],
            beta2: vec![0.0],
            gamma1: 1.0,
            gamma2: 0.3,
            a11: 1.0,
            a21: -0.4,
            a22: 1.0,
            sigma2_eta: vec![1.0],
            phi_eta: vec![1.0],
            phi_w1: 1.0,
            phi_w2: 1.0,
            tau1_2: 0.3,
            tau2_2: 0.1,
        }
    }

    /// Dependence-bias experiment, second dataset: gamma2 sign flipped.
    pub fn dependence_data2() -> Self {
        Self { gamma2: -0.3, ..Self::dependence_data1() }
    }

    fn n_lgcp(&self) -> usize {
        self.alpha.len()
    }

    fn validate(&self, scenario: Scenario) -> Result<()> {
        if !self.generator.valid_for(scenario) {
            return Err(Error::Config(format!(
                "generator {} is invalid for the {} scenario",
                self.generator.label(),
                scenario.label()
            )));
        }
        if self.n_lgcp() != scenario.n_lgcp()
            || self.sigma2_eta.len() != scenario.n_lgcp()
            || self.phi_eta.len() != scenario.n_lgcp()
        {
            return Err(Error::Config(format!(
                "scenario {} needs {} location process(es)",
                scenario.label(),
                scenario.n_lgcp()
            )));
        }
        let p = self.covariates.dim();
        for a in &self.alpha {
            if a.len() != p {
                return Err(Error::Config("alpha dimension mismatch".into()));
            }
        }
        if self.beta1.len() != p || self.beta2.len() != p {
            return Err(Error::Config("beta dimension mismatch".into()));
        }
        if !(self.tau1_2 > 0.0 && self.tau2_2 > 0.0) {
            return Err(Error::Config("nugget variances must be positive".into()));
        }
        if self.a11 < 0.0 || self.a22 < 0.0 {
            return Err(Error::Config("diagonal loadings must be nonnegative".into()));
        }
        Ok(())
    }

    /// True same-site covariance of the two responses (nugget-free).
    pub fn true_local_cov(&self) -> f64 {
        let mut cov = 0.0;
        if self.generator.has_shared_process() && self.n_lgcp() == 1 {
            cov += self.gamma1 * self.gamma2 * self.sigma2_eta[0];
        }
        if self.generator.has_coreg() {
            cov += self.a11 * self.a21;
        }
        cov
    }
}

/// What a simulated dataset was generated from, persisted next to it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthRecord {
    pub scenario: Scenario,
    pub seed: u64,
    pub grid_resolution: usize,
    pub n_obs1: usize,
    pub n_obs2: usize,
    pub true_local_cov: f64,
    pub design: SimulationDesign,
}

/// Simulate a dataset from the design: latent fields at the grid, point
/// pattern(s) by thinning, responses with nugget noise at the sampled sites.
pub fn simulate_dataset(
    design: &SimulationDesign,
    scenario: Scenario,
    grid: &Arc<GridApprox>,
    seed: u64,
) -> Result<(BivariateDataset, TruthRecord)> {
    design.validate(scenario)?;
    let covars = design.covariates.build();
    let n_lgcp = scenario.n_lgcp();
    let mut etas = Vec::with_capacity(n_lgcp);
    let mut patterns = Vec::with_capacity(n_lgcp);
    for l in 0..n_lgcp {
        let kernel = ExpKernelParams::new(design.sigma2_eta[l], design.phi_eta[l])?;
        let mut rng = stream_rng(seed, S_SIM_ETA + l as u64, 0);
        let eta = GpField::simulate_with_rng(grid.clone(), kernel, &mut rng)?;
        let model = IntensityModel::new(design.alpha[l].clone(), eta.clone());
        let mut rng_p = stream_rng(seed, S_SIM_PATTERN + l as u64, 0);
        patterns.push(model.simulate_with_rng(covars.as_ref(), &mut rng_p)?);
        etas.push(eta);
    }
    let coreg = design.generator.has_coreg();
    let (w1, w2) = {
        let k1 = ExpKernelParams::new(1.0, design.phi_w1)?;
        let k2 = ExpKernelParams::new(1.0, design.phi_w2)?;
        if coreg {
            let mut rng1 = stream_rng(seed, S_SIM_W, 0);
            let mut rng2 = stream_rng(seed, S_SIM_W + 1, 0);
            (
                GpField::simulate_with_rng(grid.clone(), k1, &mut rng1)?,
                GpField::simulate_with_rng(grid.clone(), k2, &mut rng2)?,
            )
        } else {
            (GpField::constant(grid.clone(), k1, 0.0), GpField::constant(grid.clone(), k2, 0.0))
        }
    };

    let shared = design.generator.has_shared_process();
    let mut rng_noise = stream_rng(seed, S_SIM_NOISE, 0);
    let mut sites = Vec::new();
    let mut y1 = Vec::new();
    let mut y2 = Vec::new();
    let mut obs1 = Vec::new();
    let mut obs2 = Vec::new();
    let mut x = vec![0.0; covars.dim()];
    for (l, pattern) in patterns.iter().enumerate() {
        for s in pattern.locations() {
            covars.fill(s, &mut x);
            let cell = grid.nearest_centroid(s)?;
            let this1 = n_lgcp == 1 || l == 0;
            let this2 = n_lgcp == 1 || l == 1;
            let mut m1 = x.iter().zip(&design.beta1).map(|(a, b)| a * b).sum::<f64>();
            let mut m2 = x.iter().zip(&design.beta2).map(|(a, b)| a * b).sum::<f64>();
            if shared {
                m1 += design.gamma1 * etas[0].value_at_cell(cell);
                m2 += design.gamma2 * etas[if n_lgcp == 2 { 1 } else { 0 }].value_at_cell(cell);
            }
            if coreg {
                m1 += design.a11 * w1.value_at_cell(cell);
                m2 += design.a21 * w1.value_at_cell(cell) + design.a22 * w2.value_at_cell(cell);
            }
            sites.push(*s);
            y1.push(if this1 {
                m1 + design.tau1_2.sqrt() * rng_noise.sample::<f64, _>(StandardNormal)
            } else {
                f64::NAN
            });
            y2.push(if this2 {
                m2 + design.tau2_2.sqrt() * rng_noise.sample::<f64, _>(StandardNormal)
            } else {
                f64::NAN
            });
            obs1.push(this1);
            obs2.push(this2);
        }
    }
    let data =
        BivariateDataset::new(*grid.region(), sites, y1, y2, obs1, obs2, covars)?;
    let truth = TruthRecord {
        scenario,
        seed,
        grid_resolution: grid.nx(),
        n_obs1: data.n_obs1(),
        n_obs2: data.n_obs2(),
        true_local_cov: design.true_local_cov(),
        design: design.clone(),
    };
    Ok((data, truth))
}

/// External CSV data: columns `easting,northing,y1,y2[,<covariate>...]`,
/// blank response cells meaning missing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default)]
    pub log_y1: bool,
    #[serde(default)]
    pub log_y2: bool,
}

/// One model x holdout grid cell.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HoldoutCell {
    pub strategy: HoldoutStrategy,
    #[serde(default = "default_p")]
    pub p: f64,
}

fn default_p() -> f64 {
    0.2
}

/// Dependence-analysis settings for the biased-subsample experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DependenceConfig {
    /// Fraction of sites retained, largest named response first.
    pub biased_fraction: f64,
    /// Which response orders the biased subsample (1 or 2).
    pub order_by: usize,
    pub max_distance: f64,
    pub n_distances: usize,
    /// Also fit on the full (unbiased) data for comparison.
    pub fit_full: bool,
    /// Hold the response mean structure at zero during dependence fits.
    pub fix_beta_zero: bool,
    /// Include nugget variances in the local marginals.
    pub include_nugget: bool,
}

impl Default for DependenceConfig {
    fn default() -> Self {
        Self {
            biased_fraction: 0.7,
            order_by: 1,
            max_distance: 1.0,
            n_distances: 30,
            fit_full: true,
            fix_beta_zero: true,
            include_nugget: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Simulation(SimulationDesign),
    Csv(CsvSource),
}

/// Full experiment description, read from a TOML file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scenario: Scenario,
    pub models: Vec<ModelFamily>,
    #[serde(default = "default_grid_resolution")]
    pub grid_resolution: usize,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub priors: Priors,
    pub data: DataSource,
    #[serde(default)]
    pub holdouts: Vec<HoldoutCell>,
    #[serde(default)]
    pub dependence: Option<DependenceConfig>,
    /// Export latent-field snapshots alongside traces from `fit`.
    #[serde(default)]
    pub write_fields: bool,
}

fn default_grid_resolution() -> usize {
    30
}

/// Iteration-count presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Desk scale: 1,000 burn-in, 2,000 kept, 15x15 grid.
    Smoke,
    /// Full protocol: 10,000 burn-in, 20,000 kept, 30x30 grid.
    Paper,
}

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("no models requested".into()));
        }
        for m in &self.models {
            if !m.valid_for(self.scenario) {
                return Err(Error::Config(format!(
                    "model {} is invalid for the {} scenario",
                    m.label(),
                    self.scenario.label()
                )));
            }
        }
        if self.grid_resolution == 0 {
            return Err(Error::Config("grid resolution must be positive".into()));
        }
        if let DataSource::Simulation(design) = &self.data {
            design.validate(self.scenario)?;
        }
        Ok(())
    }

    pub fn apply_profile(&mut self, profile: Profile) {
        match profile {
            Profile::Smoke => {
                self.mcmc.n_burn = 1_000;
                self.mcmc.n_keep = 2_000;
                self.mcmc.field_thin = 4;
                self.grid_resolution = 15;
            }
            Profile::Paper => {
                self.mcmc.n_burn = 10_000;
                self.mcmc.n_keep = 20_000;
                self.mcmc.field_thin = 20;
                self.grid_resolution = 30;
            }
        }
    }

    /// Materialize the dataset: simulate (persisting a truth record) or
    /// ingest the configured CSV.
    pub fn load_data(&self, grid: &Arc<GridApprox>) -> Result<(BivariateDataset, Option<TruthRecord>)> {
        match &self.data {
            DataSource::Simulation(design) => {
                let (data, truth) = simulate_dataset(design, self.scenario, grid, self.seed)?;
                Ok((data, Some(truth)))
            }
            DataSource::Csv(src) => {
                let (data, _) = ingest_csv(&src.path, src.log_y1, src.log_y2)?;
                Ok((data, None))
            }
        }
    }
}

/// Parse a bivariate site table. Returns the dataset (coordinates
/// standardized to unit maximum distance) and the standardization scale.
pub fn ingest_csv(path: &Path, log_y1: bool, log_y2: bool) -> Result<(BivariateDataset, f64)> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Config(format!("csv is missing required column '{name}'")))
    };
    let c_e = col("easting")?;
    let c_n = col("northing")?;
    let c_y1 = col("y1")?;
    let c_y2 = col("y2")?;
    let covar_cols: Vec<usize> =
        (0..headers.len()).filter(|i| ![c_e, c_n, c_y1, c_y2].contains(i)).collect();

    let mut coords = Vec::new();
    let mut y1 = Vec::new();
    let mut y2 = Vec::new();
    let mut obs1 = Vec::new();
    let mut obs2 = Vec::new();
    let mut covar_rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let parse_num = |i: usize, what: &str| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| Error::CsvRow {
                line,
                msg: format!("{what} '{}' is not numeric", field(i)),
            })
        };
        coords.push((parse_num(c_e, "easting")?, parse_num(c_n, "northing")?));
        let response = |i: usize, log: bool, name: &str| -> Result<(f64, bool)> {
            if field(i).is_empty() {
                return Ok((f64::NAN, false));
            }
            let raw = parse_num(i, name)?;
            if log {
                if raw <= 0.0 {
                    return Err(Error::CsvRow {
                        line,
                        msg: format!("{name} = {raw} cannot be log-transformed"),
                    });
                }
                Ok((raw.ln(), true))
            } else {
                Ok((raw, true))
            }
        };
        let (v1, o1) = response(c_y1, log_y1, "y1")?;
        let (v2, o2) = response(c_y2, log_y2, "y2")?;
        y1.push(v1);
        y2.push(v2);
        obs1.push(o1);
        obs2.push(o2);
        let mut row = Vec::with_capacity(covar_cols.len());
        for &c in &covar_cols {
            row.push(parse_num(c, "covariate")?);
        }
        covar_rows.push(row);
    }
    if coords.is_empty() {
        return Err(Error::Dataset("csv contains no data rows".into()));
    }
    let rescaled = rescale_coordinates(&coords)?;
    let covariates: Arc<dyn Covariates> = if covar_cols.is_empty() {
        Arc::new(InterceptOnly)
    } else {
        Arc::new(NearestSiteCovariates::new(rescaled.locations.clone(), covar_rows)?)
    };
    let data = BivariateDataset::new(
        rescaled.region,
        rescaled.locations,
        y1,
        y2,
        obs1,
        obs2,
        covariates,
    )?;
    Ok((data, rescaled.scale))
}

/// Write a dataset as CSV (standardized coordinates, blank for missing).
pub fn write_dataset_csv(data: &BivariateDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = data.covariates().dim().saturating_sub(1);
    let mut header = vec!["easting".to_string(), "northing".into(), "y1".into(), "y2".into()];
    for i in 0..k {
        header.push(format!("cov_{}", i + 1));
    }
    w.write_record(&header)?;
    for i in 0..data.n_sites() {
        let s = data.site(i);
        let mut row = vec![
            format!("{:.9}", s.x),
            format!("{:.9}", s.y),
            if data.obs1()[i] { format!("{:.9}", data.y1()[i]) } else { String::new() },
            if data.obs2()[i] { format!("{:.9}", data.y2()[i]) } else { String::new() },
        ];
        let x = data.covariates().at(s);
        for v in x.iter().skip(1) {
            row.push(format!("{v:.9}"));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Posterior summary rows for one fitted cell, including the identifiable
/// products alongside the raw kernel draws.
pub fn param_summary_rows(draws: &PosteriorDraws) -> Vec<(String, f64, f64, f64, f64, f64)> {
    let mut rows = Vec::new();
    for (k, name) in draws.names.iter().enumerate() {
        let s = summarize_trace(&draws.traces[k]);
        rows.push((name.clone(), s.mean, s.sd, s.lo, s.hi, draws.ess[k]));
    }
    let mut product = |a: &str, b: &str, square_first: bool, label: String| {
        if let (Some(ta), Some(tb)) = (draws.trace(a), draws.trace(b)) {
            let trace: Vec<f64> = ta
                .iter()
                .zip(tb)
                .map(|(x, y)| if square_first { x * x * y } else { x * y })
                .collect();
            let s = summarize_trace(&trace);
            rows.push((label, s.mean, s.sd, s.lo, s.hi, ess_ips(&trace)));
        }
    };
    for suffix in ["", "1", "2"] {
        product(
            &format!("sigma2_eta{suffix}"),
            &format!("phi_eta{suffix}"),
            false,
            format!("sigma2phi_eta{suffix}"),
        );
    }
    product("a11", "phi_w1", true, "a11sq_phi_w1".into());
    product("a22", "phi_w2", true, "a22sq_phi_w2".into());
    rows
}

#[derive(Clone, Debug)]
struct CellSpec {
    index: usize,
    family: ModelFamily,
    cell: HoldoutCell,
    holdout_index: usize,
}

#[derive(Clone, Debug)]
struct CellOutput {
    family: ModelFamily,
    cell: HoldoutCell,
    score: ScoreReport,
    params: Vec<(String, f64, f64, f64, f64, f64)>,
    warnings: Vec<String>,
}

/// Outcome of a pipeline run; failures are recorded, not fatal.
#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub n_cells: usize,
    pub n_failed: usize,
    pub scores_path: PathBuf,
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// Fit, predict and score every model x holdout cell; write `scores.csv`,
/// `params.csv`, per-cell traces, and `errors.csv` for any failed cells.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineReport> {
    config.validate()?;
    if config.holdouts.is_empty() {
        return Err(Error::Config("pipeline needs at least one holdout cell".into()));
    }
    fs::create_dir_all(&config.out_dir)?;
    let grid = Arc::new(GridApprox::build(&Region::unit_square(), config.grid_resolution)?);
    let (data, truth) = load_with_grid(config, &grid)?;
    if let Some(truth) = &truth {
        let f = fs::File::create(config.out_dir.join("truth.json"))?;
        serde_json::to_writer_pretty(f, truth).map_err(|e| Error::Config(e.to_string()))?;
    }
    write_dataset_csv(&data, &config.out_dir.join("dataset.csv"))?;

    let traces_dir = config.out_dir.join("traces");
    fs::create_dir_all(&traces_dir)?;

    let mut cells = Vec::new();
    for (hi, cell) in config.holdouts.iter().enumerate() {
        for family in &config.models {
            cells.push(CellSpec {
                index: cells.len(),
                family: *family,
                cell: *cell,
                holdout_index: hi,
            });
        }
    }

    let results: Vec<std::result::Result<CellOutput, (usize, String)>> = cells
        .par_iter()
        .map(|spec| {
            run_cell(config, &grid, &data, spec, &traces_dir)
                .map_err(|e| (spec.index, e.to_string()))
        })
        .collect();

    let mut scores = csv::Writer::from_path(config.out_dir.join("scores.csv"))?;
    scores.write_record([
        "model", "scenario", "strategy", "p", "rmse1", "rmse2", "rmse_sum", "crps1", "crps2",
        "crps_sum",
    ])?;
    let mut params = csv::Writer::from_path(config.out_dir.join("params.csv"))?;
    params.write_record([
        "model", "scenario", "strategy", "p", "param", "mean", "sd", "lo", "hi", "ess",
    ])?;
    let mut failures = Vec::new();
    for r in &results {
        match r {
            Ok(out) => {
                let s = &out.score;
                scores.write_record([
                    out.family.label().to_string(),
                    config.scenario.label().into(),
                    out.cell.strategy.label().into(),
                    fmt6(out.cell.p),
                    // shortest round-trip formatting keeps the written sums
                    // exactly equal to the written components
                    s.rmse1.to_string(),
                    s.rmse2.to_string(),
                    s.rmse_sum.to_string(),
                    s.crps1.to_string(),
                    s.crps2.to_string(),
                    s.crps_sum.to_string(),
                ])?;
                for (name, mean, sd, lo, hi, ess) in &out.params {
                    params.write_record([
                        out.family.label().to_string(),
                        config.scenario.label().into(),
                        out.cell.strategy.label().into(),
                        fmt6(out.cell.p),
                        name.clone(),
                        fmt6(*mean),
                        fmt6(*sd),
                        fmt6(*lo),
                        fmt6(*hi),
                        format!("{ess:.1}"),
                    ])?;
                }
                for wmsg in &out.warnings {
                    eprintln!(
                        "warning [{} {} p={}]: {wmsg}",
                        out.family.label(),
                        out.cell.strategy.label(),
                        out.cell.p
                    );
                }
            }
            Err((idx, msg)) => failures.push((*idx, msg.clone())),
        }
    }
    scores.flush()?;
    params.flush()?;
    if !failures.is_empty() {
        let mut errs = csv::Writer::from_path(config.out_dir.join("errors.csv"))?;
        errs.write_record(["cell", "model", "strategy", "p", "error"])?;
        for (idx, msg) in &failures {
            let spec = &cells[*idx];
            errs.write_record([
                idx.to_string(),
                spec.family.label().into(),
                spec.cell.strategy.label().into(),
                fmt6(spec.cell.p),
                msg.clone(),
            ])?;
        }
        errs.flush()?;
    }
    Ok(PipelineReport {
        n_cells: cells.len(),
        n_failed: failures.len(),
        scores_path: config.out_dir.join("scores.csv"),
    })
}

fn load_with_grid(
    config: &ExperimentConfig,
    default_grid: &Arc<GridApprox>,
) -> Result<(BivariateDataset, Option<TruthRecord>)> {
    match &config.data {
        DataSource::Simulation(_) => config.load_data(default_grid),
        DataSource::Csv(_) => config.load_data(default_grid),
    }
}

/// The grid matching a dataset's region at the configured resolution.
pub fn grid_for_data(config: &ExperimentConfig, data: &BivariateDataset) -> Result<Arc<GridApprox>> {
    Ok(Arc::new(GridApprox::build(data.region(), config.grid_resolution)?))
}

fn run_cell(
    config: &ExperimentConfig,
    grid: &Arc<GridApprox>,
    data: &BivariateDataset,
    spec: &CellSpec,
    traces_dir: &Path,
) -> Result<CellOutput> {
    let holdout = HoldoutSpec {
        strategy: spec.cell.strategy,
        p: spec.cell.p,
        train_fraction: 0.5,
        scenario: config.scenario,
        seed: child_seed(config.seed, S_HOLDOUT, spec.holdout_index as u64),
    };
    let (train, test) = make_holdout(data, &holdout)?;
    let mut mcmc = config.mcmc;
    mcmc.seed = child_seed(config.seed, S_CHAIN, spec.index as u64);
    let draws = run_chain(config.scenario, spec.family, &train, grid, &config.priors, &mcmc)?;
    let pred = predict_responses(
        &draws,
        &train,
        test.sites(),
        child_seed(config.seed, S_PREDICT, spec.index as u64),
    )?;
    let score = ScoreReport::compute(&pred.draws1, &pred.draws2, &test)?;
    let trace_path = traces_dir.join(format!(
        "{}_{}_p{}.csv",
        spec.family.label(),
        spec.cell.strategy.label().replace('-', ""),
        (spec.cell.p * 100.0).round() as usize
    ));
    draws.export_traces_csv(&trace_path)?;
    Ok(CellOutput {
        family: spec.family,
        cell: spec.cell,
        score,
        params: param_summary_rows(&draws),
        warnings: draws.warnings.clone(),
    })
}

/// One dependence-analysis fit: which data variant went in and what came out.
pub struct DependenceFit {
    pub family: ModelFamily,
    pub sample: &'static str,
    pub summary: DependenceSummary,
}

/// Fit the coregionalized families to the full and biased-subsampled data
/// and summarize the posterior cross-covariance structure.
pub fn run_dependence_fits(
    config: &ExperimentConfig,
    grid: &Arc<GridApprox>,
    data: &BivariateDataset,
) -> Result<Vec<DependenceFit>> {
    let dep = config
        .dependence
        .clone()
        .ok_or_else(|| Error::Config("no [dependence] section in config".into()))?;
    let distances: Vec<f64> = (0..dep.n_distances)
        .map(|i| dep.max_distance * i as f64 / (dep.n_distances - 1).max(1) as f64)
        .collect();
    let biased = biased_pair_sample(data, dep.biased_fraction, dep.order_by)?;
    let mut variants: Vec<(&'static str, &BivariateDataset)> = Vec::new();
    if dep.fit_full {
        variants.push(("full", data));
    }
    variants.push(("biased", &biased));

    let mut jobs = Vec::new();
    for (vi, (label, subset)) in variants.iter().enumerate() {
        for (mi, family) in config.models.iter().enumerate() {
            jobs.push((vi, *label, (*subset).clone(), mi, *family));
        }
    }
    let fits: Vec<Result<DependenceFit>> = jobs
        .par_iter()
        .map(|(vi, label, subset, mi, family)| {
            let mut mcmc = config.mcmc;
            mcmc.seed = child_seed(config.seed, S_CHAIN, (100 + vi * 10 + mi) as u64);
            mcmc.fix_beta_zero = dep.fix_beta_zero;
            let draws = run_chain(config.scenario, *family, subset, grid, &config.priors, &mcmc)?;
            let summary = dependence_summary(&draws, &distances, dep.include_nugget)?;
            Ok(DependenceFit { family: *family, sample: label, summary })
        })
        .collect();
    fits.into_iter().collect()
}

/// Write dependence summaries: one curve file and one local-quantity file.
pub fn write_dependence_csv(
    fits: &[DependenceFit],
    truth: Option<&TruthRecord>,
    out_dir: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(out_dir.join("dependence.csv"))?;
    w.write_record([
        "model",
        "sample",
        "distance",
        "cov11_mean",
        "cov11_lo",
        "cov11_hi",
        "cov22_mean",
        "cov22_lo",
        "cov22_hi",
        "cov21_mean",
        "cov21_lo",
        "cov21_hi",
        "cov21_shared_mean",
        "cov21_shared_lo",
        "cov21_shared_hi",
        "cov21_corr_mean",
        "cov21_corr_lo",
        "cov21_corr_hi",
    ])?;
    for fit in fits {
        let s = &fit.summary;
        for (i, d) in s.distances.iter().enumerate() {
            w.write_record([
                fit.family.label().to_string(),
                fit.sample.into(),
                fmt6(*d),
                fmt6(s.cov11.mean[i]),
                fmt6(s.cov11.lo[i]),
                fmt6(s.cov11.hi[i]),
                fmt6(s.cov22.mean[i]),
                fmt6(s.cov22.lo[i]),
                fmt6(s.cov22.hi[i]),
                fmt6(s.cov21.mean[i]),
                fmt6(s.cov21.lo[i]),
                fmt6(s.cov21.hi[i]),
                fmt6(s.cov21_shared.mean[i]),
                fmt6(s.cov21_shared.lo[i]),
                fmt6(s.cov21_shared.hi[i]),
                fmt6(s.cov21_corr.mean[i]),
                fmt6(s.cov21_corr.lo[i]),
                fmt6(s.cov21_corr.hi[i]),
            ])?;
        }
    }
    w.flush()?;

    let mut lw = csv::Writer::from_path(out_dir.join("local.csv"))?;
    lw.write_record(["model", "sample", "quantity", "mean", "lo", "hi", "truth"])?;
    for fit in fits {
        let l = &fit.summary.local;
        let truth_cov = truth.map(|t| t.true_local_cov);
        for (name, s, tv) in [
            ("cov11", &l.cov11, None),
            ("cov22", &l.cov22, None),
            ("cov21", &l.cov21, truth_cov),
            ("corr21", &l.corr21, None),
        ] {
            lw.write_record([
                fit.family.label().to_string(),
                fit.sample.into(),
                name.into(),
                fmt6(s.mean),
                fmt6(s.lo),
                fmt6(s.hi),
                tv.map_or(String::new(), fmt6),
            ])?;
        }
    }
    lw.flush()?;
    Ok(())
}

/// `simulate` subcommand: write `dataset.csv` and `truth.json`.
pub fn cmd_simulate(config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&config.out_dir)?;
    let grid = Arc::new(GridApprox::build(&Region::unit_square(), config.grid_resolution)?);
    match &config.data {
        DataSource::Simulation(design) => {
            let (data, truth) = simulate_dataset(design, config.scenario, &grid, config.seed)?;
            write_dataset_csv(&data, &config.out_dir.join("dataset.csv"))?;
            let f = fs::File::create(config.out_dir.join("truth.json"))?;
            serde_json::to_writer_pretty(f, &truth).map_err(|e| Error::Config(e.to_string()))?;
            Ok(())
        }
        DataSource::Csv(_) => {
            Err(Error::Config("simulate needs a [data.simulation] source".into()))
        }
    }
}

/// `fit` subcommand: fit each model to the full dataset, exporting traces
/// and posterior summaries (plus field snapshots when requested).
pub fn cmd_fit(config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&config.out_dir)?;
    let base_grid = Arc::new(GridApprox::build(&Region::unit_square(), config.grid_resolution)?);
    let (data, _) = config.load_data(&base_grid)?;
    let grid = grid_for_data(config, &data)?;
    let mut params = csv::Writer::from_path(config.out_dir.join("params.csv"))?;
    params.write_record(["model", "param", "mean", "sd", "lo", "hi", "ess"])?;
    for (mi, family) in config.models.iter().enumerate() {
        let mut mcmc = config.mcmc;
        mcmc.seed = child_seed(config.seed, S_CHAIN, mi as u64);
        let draws = run_chain(config.scenario, *family, &data, &grid, &config.priors, &mcmc)?;
        draws.export_traces_csv(&config.out_dir.join(format!("traces_{}.csv", family.label())))?;
        if config.write_fields {
            write_field_snapshots(&draws, config, family)?;
        }
        for (name, mean, sd, lo, hi, ess) in param_summary_rows(&draws) {
            params.write_record([
                family.label().to_string(),
                name,
                fmt6(mean),
                fmt6(sd),
                fmt6(lo),
                fmt6(hi),
                format!("{ess:.1}"),
            ])?;
        }
        for wmsg in &draws.warnings {
            eprintln!("warning [{}]: {wmsg}", family.label());
        }
    }
    params.flush()?;
    Ok(())
}

fn write_field_snapshots(
    draws: &PosteriorDraws,
    config: &ExperimentConfig,
    family: &ModelFamily,
) -> Result<()> {
    let mut fields: Vec<(String, Vec<&[f64]>)> = Vec::new();
    for (l, _) in draws.snapshots[0].eta.iter().enumerate() {
        let name = if draws.snapshots[0].eta.len() == 1 {
            "eta".to_string()
        } else {
            format!("eta{}", l + 1)
        };
        fields.push((name, draws.snapshots.iter().map(|s| s.eta[l].values()).collect()));
    }
    if family.has_coreg() {
        fields.push(("w1".into(), draws.snapshots.iter().map(|s| s.w1.values()).collect()));
        fields.push(("w2".into(), draws.snapshots.iter().map(|s| s.w2.values()).collect()));
    }
    for (name, rows) in fields {
        let path = config.out_dir.join(format!("fields_{}_{}.csv", family.label(), name));
        let mut w = csv::Writer::from_path(path)?;
        for row in rows {
            let rec: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// `predict` subcommand: fit on the first holdout's training portion and
/// write predictive draws at the test sites in long format.
pub fn cmd_predict(config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&config.out_dir)?;
    let cell = config
        .holdouts
        .first()
        .ok_or_else(|| Error::Config("predict needs at least one holdout".into()))?;
    let base_grid = Arc::new(GridApprox::build(&Region::unit_square(), config.grid_resolution)?);
    let (data, _) = config.load_data(&base_grid)?;
    let grid = grid_for_data(config, &data)?;
    let holdout = HoldoutSpec {
        strategy: cell.strategy,
        p: cell.p,
        train_fraction: 0.5,
        scenario: config.scenario,
        seed: child_seed(config.seed, S_HOLDOUT, 0),
    };
    let (train, test) = make_holdout(&data, &holdout)?;
    let mut w = csv::Writer::from_path(config.out_dir.join("predictions.csv"))?;
    w.write_record(["model", "draw", "site", "x", "y", "response", "value"])?;
    for (mi, family) in config.models.iter().enumerate() {
        let mut mcmc = config.mcmc;
        mcmc.seed = child_seed(config.seed, S_CHAIN, mi as u64);
        let draws = run_chain(config.scenario, *family, &train, &grid, &config.priors, &mcmc)?;
        let pred = predict_responses(
            &draws,
            &train,
            test.sites(),
            child_seed(config.seed, S_PREDICT, mi as u64),
        )?;
        for (d, (row1, row2)) in pred.draws1.iter().zip(&pred.draws2).enumerate() {
            for (i, s) in pred.locations.iter().enumerate() {
                for (resp, v) in [(1usize, row1[i]), (2, row2[i])] {
                    w.write_record([
                        family.label().to_string(),
                        d.to_string(),
                        i.to_string(),
                        format!("{:.9}", s.x),
                        format!("{:.9}", s.y),
                        resp.to_string(),
                        format!("{v:.6}"),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `dependence` subcommand: the biased-subsample dependence experiment.
pub fn cmd_dependence(config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&config.out_dir)?;
    let grid = Arc::new(GridApprox::build(&Region::unit_square(), config.grid_resolution)?);
    let (data, truth) = load_with_grid(config, &grid)?;
    let grid = grid_for_data(config, &data)?;
    let fits = run_dependence_fits(config, &grid, &data)?;
    write_dependence_csv(&fits, truth.as_ref(), &config.out_dir)
}

/// `pipeline` subcommand: the full grid plus optional dependence analysis.
/// Returns the number of failed cells.
pub fn cmd_pipeline(config: &ExperimentConfig) -> Result<usize> {
    let report = run_pipeline(config)?;
    if config.dependence.is_some() {
        let grid = Arc::new(GridApprox::build(&Region::unit_square(), config.grid_resolution)?);
        let (data, truth) = load_with_grid(config, &grid)?;
        let grid = grid_for_data(config, &data)?;
        let dep_models: Vec<ModelFamily> = config
            .models
            .iter()
            .copied()
            .filter(|m| matches!(m, ModelFamily::M3 | ModelFamily::M4))
            .collect();
        if !dep_models.is_empty() {
            let mut dep_config = config.clone();
            dep_config.models = dep_models;
            let fits = run_dependence_fits(&dep_config, &grid, &data)?;
            write_dependence_csv(&fits, truth.as_ref(), &config.out_dir)?;
        }
    }
    Ok(report.n_failed)
}
