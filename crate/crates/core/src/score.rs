//! Training/test split construction (random, descending-order-biased,
//! overlapping, disjoint) and predictive scoring by RMSE and CRPS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BivariateDataset, Scenario};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutStrategy {
    /// (I) random split.
    Random,
    /// (II-a) training biased toward the largest first-response values.
    DescendingY1,
    /// (II-b) training biased toward the largest second-response values.
    DescendingY2,
}

impl HoldoutStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            HoldoutStrategy::Random => "I",
            HoldoutStrategy::DescendingY1 => "II-a",
            HoldoutStrategy::DescendingY2 => "II-b",
        }
    }
}

/// Holdout specification. `p` is the biased (or common, for the overlapping
/// scenario) fraction; `train_fraction` defaults to one half.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HoldoutSpec {
    pub strategy: HoldoutStrategy,
    pub p: f64,
    pub train_fraction: f64,
    pub scenario: Scenario,
    pub seed: u64,
}

impl HoldoutSpec {
    pub fn new(strategy: HoldoutStrategy, p: f64, scenario: Scenario, seed: u64) -> Self {
        Self { strategy, p, train_fraction: 0.5, scenario, seed }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Holdout(format!(
                "train fraction {} outside [0, 1]",
                self.train_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.p) || self.p > self.train_fraction {
            return Err(Error::Holdout(format!(
                "biased fraction {} must lie in [0, {}]",
                self.p, self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Indices sorted by descending response value; ties keep the lower index
/// first.
fn descending_order(values: &[f64], among: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = among.to_vec();
    idx.sort_by(|&a, &b| {
        values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    idx
}

fn shuffled(among: &[usize], rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut idx = among.to_vec();
    // Fisher-Yates
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Training indices for one response over `sites`: the top `floor(n*p)` by
/// `order_values` (when biased) plus random sites up to `floor(n*f)`.
fn biased_training(
    sites: &[usize],
    order_values: Option<&[f64]>,
    p: f64,
    f: f64,
    rng: &mut impl rand::Rng,
) -> Vec<usize> {
    let n = sites.len();
    let n_train = (n as f64 * f).floor() as usize;
    match order_values {
        None => shuffled(sites, rng)[..n_train].to_vec(),
        Some(values) => {
            let k_top = (n as f64 * p).floor() as usize;
            let ordered = descending_order(values, sites);
            let mut train: Vec<usize> = ordered[..k_top].to_vec();
            let rest: Vec<usize> = ordered[k_top..].to_vec();
            let extra = n_train.saturating_sub(k_top);
            train.extend_from_slice(&shuffled(&rest, rng)[..extra]);
            train
        }
    }
}

/// Split a dataset into training and test portions.
///
/// Shared locations: one split applies to both responses. Overlapping: the
/// per-response training sets share exactly the `100p%` common block and each
/// response draws its remaining training sites independently; each response
/// is tested on the complement of its own training set. Disjoint: each
/// response's own point pattern is split, the descending bias applying to the
/// pattern of the named response and the other pattern splitting at random.
pub fn make_holdout(
    data: &BivariateDataset,
    spec: &HoldoutSpec,
) -> Result<(BivariateDataset, BivariateDataset)> {
    spec.validate()?;
    match spec.scenario {
        Scenario::SharedLocations => {
            require_fully_observed(data)?;
            let all: Vec<usize> = (0..data.n_sites()).collect();
            let mut rng = stream_rng(spec.seed, 0, 0);
            let order = match spec.strategy {
                HoldoutStrategy::Random => None,
                HoldoutStrategy::DescendingY1 => Some(data.y1()),
                HoldoutStrategy::DescendingY2 => Some(data.y2()),
            };
            let train_idx = biased_training(&all, order, spec.p, spec.train_fraction, &mut rng);
            let in_train = membership(data.n_sites(), &train_idx);
            let train_rows: Vec<(usize, bool, bool)> =
                sorted_where(&in_train, true).into_iter().map(|i| (i, true, true)).collect();
            let test_rows: Vec<(usize, bool, bool)> =
                sorted_where(&in_train, false).into_iter().map(|i| (i, true, true)).collect();
            Ok((data.subset(&train_rows)?, data.subset(&test_rows)?))
        }
        Scenario::Overlapping => {
            require_fully_observed(data)?;
            let n = data.n_sites();
            let all: Vec<usize> = (0..n).collect();
            let n_half = (n as f64 * spec.train_fraction).floor() as usize;
            let k_common = (n as f64 * spec.p).floor() as usize;
            let mut rng_common = stream_rng(spec.seed, 0, 0);
            let common: Vec<usize> = match spec.strategy {
                HoldoutStrategy::Random => shuffled(&all, &mut rng_common)[..k_common].to_vec(),
                HoldoutStrategy::DescendingY1 => {
                    descending_order(data.y1(), &all)[..k_common].to_vec()
                }
                HoldoutStrategy::DescendingY2 => {
                    descending_order(data.y2(), &all)[..k_common].to_vec()
                }
            };
            let in_common = membership(n, &common);
            let rest: Vec<usize> = (0..n).filter(|&i| !in_common[i]).collect();
            let extra = n_half - k_common;
            let mut rng1 = stream_rng(spec.seed, 1, 0);
            let mut rng2 = stream_rng(spec.seed, 2, 0);
            let extra1 = shuffled(&rest, &mut rng1)[..extra].to_vec();
            let extra2 = shuffled(&rest, &mut rng2)[..extra].to_vec();
            let mut in_s1 = in_common.clone();
            for &i in &extra1 {
                in_s1[i] = true;
            }
            let mut in_s2 = in_common;
            for &i in &extra2 {
                in_s2[i] = true;
            }
            let train_rows: Vec<(usize, bool, bool)> = (0..n)
                .filter(|&i| in_s1[i] || in_s2[i])
                .map(|i| (i, in_s1[i], in_s2[i]))
                .collect();
            let test_rows: Vec<(usize, bool, bool)> = (0..n)
                .filter(|&i| !in_s1[i] || !in_s2[i])
                .map(|i| (i, !in_s1[i], !in_s2[i]))
                .collect();
            Ok((data.subset(&train_rows)?, data.subset(&test_rows)?))
        }
        Scenario::Disjoint => {
            let idx1 = data.observed_indices1();
            let idx2 = data.observed_indices2();
            if idx1.iter().any(|&i| data.obs2()[i]) {
                return Err(Error::Holdout(
                    "disjoint holdout requires disjoint observation patterns".into(),
                ));
            }
            let mut rng1 = stream_rng(spec.seed, 1, 0);
            let mut rng2 = stream_rng(spec.seed, 2, 0);
            let order1 = matches!(spec.strategy, HoldoutStrategy::DescendingY1)
                .then_some(data.y1());
            let order2 = matches!(spec.strategy, HoldoutStrategy::DescendingY2)
                .then_some(data.y2());
            let train1 = biased_training(&idx1, order1, spec.p, spec.train_fraction, &mut rng1);
            let train2 = biased_training(&idx2, order2, spec.p, spec.train_fraction, &mut rng2);
            let in_t1 = membership(data.n_sites(), &train1);
            let in_t2 = membership(data.n_sites(), &train2);
            let train_rows: Vec<(usize, bool, bool)> = (0..data.n_sites())
                .filter(|&i| in_t1[i] || in_t2[i])
                .map(|i| (i, in_t1[i], in_t2[i]))
                .collect();
            let test_rows: Vec<(usize, bool, bool)> = (0..data.n_sites())
                .filter(|&i| {
                    (data.obs1()[i] && !in_t1[i]) || (data.obs2()[i] && !in_t2[i])
                })
                .map(|i| (i, data.obs1()[i] && !in_t1[i], data.obs2()[i] && !in_t2[i]))
                .collect();
            Ok((data.subset(&train_rows)?, data.subset(&test_rows)?))
        }
    }
}

fn require_fully_observed(data: &BivariateDataset) -> Result<()> {
    if !data.is_fully_observed() {
        return Err(Error::Holdout(
            "this holdout construction requires both responses at every site".into(),
        ));
    }
    Ok(())
}

fn membership(n: usize, idx: &[usize]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &i in idx {
        m[i] = true;
    }
    m
}

fn sorted_where(mask: &[bool], value: bool) -> Vec<usize> {
    (0..mask.len()).filter(|&i| mask[i] == value).collect()
}

/// Retain the `ceil(n * fraction)` sites with the largest values of the
/// named response; both responses are kept at retained sites.
pub fn biased_pair_sample(
    data: &BivariateDataset,
    fraction: f64,
    order_by: usize,
) -> Result<BivariateDataset> {
    if data.n_sites() == 0 {
        return Err(Error::Holdout("cannot subsample an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Holdout(format!("fraction {fraction} outside (0, 1]")));
    }
    require_fully_observed(data)?;
    let values = match order_by {
        1 => data.y1(),
        2 => data.y2(),
        _ => return Err(Error::Holdout(format!("order_by must be 1 or 2, got {order_by}"))),
    };
    let keep = (data.n_sites() as f64 * fraction).ceil() as usize;
    let all: Vec<usize> = (0..data.n_sites()).collect();
    let mut top = descending_order(values, &all)[..keep].to_vec();
    top.sort_unstable();
    let rows: Vec<(usize, bool, bool)> = top.into_iter().map(|i| (i, true, true)).collect();
    data.subset(&rows)
}

/// Root mean square error of point predictions.
pub fn rmse(pred_means: &[f64], truths: &[f64]) -> Result<f64> {
    if pred_means.is_empty() || pred_means.len() != truths.len() {
        return Err(Error::Score("rmse needs aligned, nonempty inputs".into()));
    }
    let mse: f64 = pred_means
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred_means.len() as f64;
    Ok(mse.sqrt())
}

/// Empirical CRPS of a predictive sample against one realized value:
/// `mean|d_m - y| - (1/(2 M^2)) sum_{m,m'} |d_m - d_{m'}|`.
pub fn crps_empirical(draws: &[f64], truth: f64) -> Result<f64> {
    let m = draws.len();
    if m < 2 {
        return Err(Error::Score("crps needs at least two draws".into()));
    }
    if draws.iter().any(|d| !d.is_finite()) || !truth.is_finite() {
        return Err(Error::Score("crps inputs must be finite".into()));
    }
    let mf = m as f64;
    let term1: f64 = draws.iter().map(|d| (d - truth).abs()).sum::<f64>() / mf;
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // sum over ordered pairs of |d_i - d_j| equals 2 * sum_k (2k - M + 1) d_(k)
    let mut signed_sum = 0.0;
    for (k, d) in sorted.iter().enumerate() {
        signed_sum += (2.0 * k as f64 - mf + 1.0) * d;
    }
    Ok(term1 - signed_sum / (mf * mf))
}

/// Per-response and combined RMSE/CRPS over a test set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rmse1: f64,
    pub rmse2: f64,
    pub rmse_sum: f64,
    pub crps1: f64,
    pub crps2: f64,
    pub crps_sum: f64,
}

impl ScoreReport {
    /// Score predictive draws (`[draw][site]`, aligned with `test.sites()`)
    /// against the observed test responses. Each response is scored over the
    /// sites where it is observed in `test`.
    pub fn compute(
        draws1: &[Vec<f64>],
        draws2: &[Vec<f64>],
        test: &BivariateDataset,
    ) -> Result<Self> {
        let score_one = |draws: &[Vec<f64>], truths: &[f64], mask: &[bool]| -> Result<(f64, f64)> {
            let sites: Vec<usize> =
                (0..mask.len()).filter(|&i| mask[i]).collect();
            if sites.is_empty() {
                return Err(Error::Score("empty test set for a response".into()));
            }
            if draws.is_empty() {
                return Err(Error::Score("no predictive draws".into()));
            }
            let mut means = Vec::with_capacity(sites.len());
            let mut crps_acc = 0.0;
            let mut site_draws = Vec::with_capacity(draws.len());
            let mut y = Vec::with_capacity(sites.len());
            for &i in &sites {
                site_draws.clear();
                for d in draws {
                    site_draws.push(d[i]);
                }
                means.push(site_draws.iter().sum::<f64>() / site_draws.len() as f64);
                crps_acc += crps_empirical(&site_draws, truths[i])?;
                y.push(truths[i]);
            }
            Ok((rmse(&means, &y)?, crps_acc / sites.len() as f64))
        };
        let (rmse1, crps1) = score_one(draws1, test.y1(), test.obs1())?;
        let (rmse2, crps2) = score_one(draws2, test.y2(), test.obs2())?;
        Ok(Self {
            rmse1,
            rmse2,
            rmse_sum: rmse1 + rmse2,
            crps1,
            crps2,
            crps_sum: crps1 + crps2,
        })
    }
}
