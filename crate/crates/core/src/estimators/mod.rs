//! Causal-effect estimators: unadjusted and weighting baselines, the
//! two-stage nonparametric estimator, the parametric fractional-imputation
//! MLE, and bootstrap confidence intervals.

pub mod glm;
pub mod parametric;

use std::collections::BTreeMap;
use std::sync::atomic::Ordering;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Dataset, PatternIndex};
use crate::error::{Error, Result};
use crate::series::{compute_lambda, fit_xi_with, HermiteBasis, SeriesConfig, Standardizer};
use crate::smooth::{cv_bandwidth, CvConfig, LocalLinearModel, RegKind, TuningStore};

/// A point estimate with optional uncertainty and diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateResult {
    pub method: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl EstimateResult {
    fn point(method: &str, estimate: f64) -> EstimateResult {
        EstimateResult {
            method: method.to_string(),
            estimate,
            se: None,
            ci: None,
            diagnostics: BTreeMap::new(),
        }
    }
}

/// Difference in mean outcomes between arms.
pub fn unadjusted(d: &Dataset) -> Result<EstimateResult> {
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for i in 0..d.n() {
        let a = d.a()[i] as usize;
        sums[a] += d.y()[i];
        counts[a] += 1;
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::Estimation("an arm is empty".into()));
    }
    Ok(EstimateResult::point(
        "unadj",
        sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64,
    ))
}

/// Complete-case conditional effect curve: per-arm local-linear smoothers
/// of the outcome fitted on complete cases.
pub struct CateModel {
    arms: [LocalLinearModel; 2],
}

impl CateModel {
    /// tau-hat(x) = E-hat(Y | A=1, x, complete) - E-hat(Y | A=0, x, complete).
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.arms[1].eval(x) - self.arms[0].eval(x)
    }

    /// Single-arm regression value, used by reduction identities.
    pub fn arm_eval(&self, a: usize, x: &[f64]) -> f64 {
        self.arms[a].eval(x)
    }
}

/// Fits the complete-case effect curve with cross-validated bandwidths.
pub fn cate_complete_case(
    d: &Dataset,
    cv: &CvConfig,
    tuning: &mut TuningStore,
) -> Result<CateModel> {
    let idx = PatternIndex::build(d);
    let mut arms = Vec::with_capacity(2);
    for a in 0..2u8 {
        let cc: Vec<usize> =
            idx.complete_units().iter().cloned().filter(|&i| d.a()[i] == a).collect();
        if cc.is_empty() {
            return Err(Error::Estimation(format!("no complete cases in arm {a}")));
        }
        let inputs: Vec<Vec<f64>> = cc.iter().map(|&i| d.x_row(i)).collect();
        let targets: Vec<f64> = cc.iter().map(|&i| d.y()[i]).collect();
        let bw = tuning.select(&format!("cate/{a}"), || {
            cv_bandwidth(&inputs, Some(&targets), cv, RegKind::LocalLinear)
        })?;
        arms.push(LocalLinearModel::fit(inputs, targets, bw)?);
    }
    let m1 = arms.pop().unwrap();
    let m0 = arms.pop().unwrap();
    Ok(CateModel { arms: [m0, m1] })
}

/// Generalized propensity-score weighting: one logistic regression of A on
/// the observed covariates per missingness pattern, then Hajek weighting
/// with the fitted propensities clipped to `[0.01, 0.99]`.
pub fn gpsw(d: &Dataset) -> Result<EstimateResult> {
    let idx = PatternIndex::build(d);
    let mut num = [0.0; 2];
    let mut den = [0.0; 2];
    let mut dropped = 0usize;
    let mut used = 0usize;
    for (pat, units) in idx.groups() {
        let has = |arm: u8| units.iter().any(|&i| d.a()[i] == arm);
        if !has(0) || !has(1) {
            dropped += 1;
            continue;
        }
        let obs = pat.obs_idx();
        let design = DMatrix::from_fn(units.len(), obs.len() + 1, |r, c| {
            if c == 0 {
                1.0
            } else {
                d.x(units[r], obs[c - 1]).unwrap()
            }
        });
        let a_vals: Vec<f64> = units.iter().map(|&i| d.a()[i] as f64).collect();
        let w1 = vec![1.0; units.len()];
        let coef = match glm::logistic_fit(&design, &a_vals, &w1, None, 100) {
            Ok(c) if c.iter().all(|v| v.is_finite()) => c,
            _ => {
                dropped += 1;
                continue;
            }
        };
        used += 1;
        for (r, &i) in units.iter().enumerate() {
            let eta: f64 = (0..coef.len()).map(|c| coef[c] * design[(r, c)]).sum();
            let e = glm::expit(eta).clamp(0.01, 0.99);
            if d.a()[i] == 1 {
                num[1] += d.y()[i] / e;
                den[1] += 1.0 / e;
            } else {
                num[0] += d.y()[i] / (1.0 - e);
                den[0] += 1.0 / (1.0 - e);
            }
        }
    }
    if used == 0 {
        return Err(Error::Estimation("every pattern group lacked an arm".into()));
    }
    let mut res = EstimateResult::point("gpsw", num[1] / den[1] - num[0] / den[0]);
    res.diagnostics.insert("patterns_used".into(), used as f64);
    res.diagnostics.insert("patterns_dropped".into(), dropped as f64);
    Ok(res)
}

/// Settings for the two-stage nonparametric estimator.
#[derive(Debug, Clone)]
pub struct NonparaConfig {
    pub series: SeriesConfig,
    /// Bandwidth CV for the effect-curve smoothers.
    pub cate_cv: CvConfig,
    /// Use within-arm self-normalized inverse-probability weights.
    pub self_normalized: bool,
}

impl Default for NonparaConfig {
    fn default() -> Self {
        NonparaConfig {
            series: SeriesConfig::default(),
            cate_cv: CvConfig {
                folds: 10,
                grid: vec![0.15, 0.25, 0.4, 0.65, 1.0, 1.6],
                seed: 0,
            },
            self_normalized: false,
        }
    }
}

/// Two-stage nonparametric estimator of the average effect.
pub fn nonpara_tau(d: &Dataset, cfg: &NonparaConfig) -> Result<EstimateResult> {
    let mut tuning = TuningStore::default();
    nonpara_tau_with(d, cfg, &mut tuning)
}

/// Same as [`nonpara_tau`], recording or replaying tuning through `tuning`
/// (freeze the store to reuse bandwidths across bootstrap replicates).
pub fn nonpara_tau_with(
    d: &Dataset,
    cfg: &NonparaConfig,
    tuning: &mut TuningStore,
) -> Result<EstimateResult> {
    if d.p() > 3 {
        return Err(Error::InvalidArgument(format!(
            "nonparametric estimator supports p <= 3 covariates, got {}; use the parametric path",
            d.p()
        )));
    }
    let idx = PatternIndex::build(d);
    let cc_all = idx.complete_units();
    if cc_all.is_empty() {
        return Err(Error::Estimation("no complete cases".into()));
    }
    let cate = cate_complete_case(d, &cfg.cate_cv, tuning)?;
    let std = Standardizer::fit(&cc_all.iter().map(|&i| d.x_row(i)).collect::<Vec<_>>())?;
    let basis = HermiteBasis::new(cfg.series.j, d.p());
    let reg = compute_lambda(&basis, cfg.series.order, cfg.series.delta0, cfg.series.quad_nodes)?;
    let mut tau = 0.0;
    let mut diagnostics = BTreeMap::new();
    for a in 0..2u8 {
        let model =
            fit_xi_with(d, a, &cfg.series, &idx, std.clone(), basis.clone(), &reg, tuning)?;
        let cc_a: Vec<usize> = cc_all.iter().cloned().filter(|&i| d.a()[i] == a).collect();
        if cc_a.is_empty() {
            return Err(Error::Estimation(format!("no complete cases in arm {a}")));
        }
        let mut w_sum = 0.0;
        let mut tw_sum = 0.0;
        for &i in &cc_a {
            let x = d.x_row(i);
            let pr = model.response_prob(&x);
            let t = cate.eval(&x);
            tw_sum += t / pr;
            w_sum += 1.0 / pr;
        }
        if cfg.self_normalized {
            let n_arm = (0..d.n()).filter(|&i| d.a()[i] == a).count();
            tau += (n_arm as f64 / d.n() as f64) * tw_sum / w_sum;
        } else {
            let p_a_cc = cc_a.len() as f64 / d.n() as f64;
            tau += p_a_cc * tw_sum / cc_a.len() as f64;
        }
        diagnostics
            .insert(format!("clip_events_arm{a}"), model.clip_events.load(Ordering::Relaxed) as f64);
        for (pat, fit) in &model.fits {
            diagnostics.insert(format!("objective/{pat}/{a}"), fit.objective);
            diagnostics.insert(format!("multiplier/{pat}/{a}"), fit.multiplier);
        }
    }
    let mut res = EstimateResult::point("nonpara", tau);
    res.diagnostics = diagnostics;
    Ok(res)
}

/// Bootstrap output: replicate spread and the percentile interval.
#[derive(Debug, Clone, Serialize)]
pub struct Bootstrap {
    pub se: f64,
    pub ci: (f64, f64),
    pub n_boot: usize,
    pub failures: usize,
    pub estimates: Vec<f64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Resamples units with replacement and re-runs the estimator closure.
///
/// The closure must be deterministic given its data; any tuning must be
/// frozen by the caller. Up to 5% of replicates may fail; the standard
/// error is the replicate standard deviation and the interval is the
/// percentile interval at the given level.
pub fn bootstrap_ci<F>(
    estimator: F,
    d: &Dataset,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<Bootstrap>
where
    F: Fn(&Dataset) -> Result<f64> + Sync,
{
    if n_boot < 2 {
        return Err(Error::InvalidArgument("need at least 2 bootstrap replicates".into()));
    }
    if !(0.0..1.0).contains(&level) {
        return Err(Error::InvalidArgument("level must be in (0, 1)".into()));
    }
    let n = d.n();
    let results: Vec<Result<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64 + 1);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            estimator(&d.resample(&idx))
        })
        .collect();
    let mut estimates: Vec<f64> = Vec::with_capacity(n_boot);
    let mut failures = 0usize;
    for r in results {
        match r {
            Ok(v) if v.is_finite() => estimates.push(v),
            _ => failures += 1,
        }
    }
    if failures * 20 > n_boot {
        return Err(Error::Estimation(format!(
            "{failures} of {n_boot} bootstrap replicates failed"
        )));
    }
    let m = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / m;
    let se = if estimates.len() > 1 {
        (estimates.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = estimates.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = 1.0 - level;
    let ci = (percentile(&sorted, alpha / 2.0), percentile(&sorted, 1.0 - alpha / 2.0));
    Ok(Bootstrap { se, ci, n_boot, failures, estimates })
}
