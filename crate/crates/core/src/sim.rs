//! Simulation scenarios and the Monte Carlo driver.
//!
//! Scenario A: two covariates, one subject to missingness, nonparametric
//! ground truth tau = 1. Scenario B: six covariates with two jointly
//! missing under a four-pattern multinomial mechanism, tau = -0.5. Both
//! generators are exact functions of (n, rng state).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::parametric::{fit_mle_fractional, param_tau, FiConfig, ParamModelSpec};
use crate::estimators::{
    bootstrap_ci, gpsw, nonpara_tau_with, unadjusted, NonparaConfig,
};
use crate::smooth::TuningStore;

fn expit(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scenario {
    A,
    B,
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Scenario> {
        match s {
            "A" | "a" => Ok(Scenario::A),
            "B" | "b" => Ok(Scenario::B),
            other => Err(Error::InvalidArgument(format!("unknown scenario `{other}`"))),
        }
    }
}

/// A generated dataset with its true average effect.
pub struct Generated {
    pub data: Dataset,
    pub tau: f64,
}

/// Scenario A: X1 ~ N(1,1), X2 ~ Bernoulli(0.5),
/// Y(0) = 0.5 + 2 X1 + X2 + e, Y(1) = 3 X1 + 2 X2 + e,
/// logit P(A=1|X) = 1.25 - 0.5 X1 - 0.5 X2,
/// logit P(X1 observed | A, X) = -2 + 2 X1 + A (1.5 + X2).
/// Only X1 is ever missing; tau = 1.
pub fn generate_scenario_a(n: usize, rng: &mut ChaCha8Rng) -> Generated {
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let x1: f64 = 1.0 + Distribution::<f64>::sample(&StandardNormal, rng);
        let x2 = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let pi = expit(1.25 - 0.5 * x1 - 0.5 * x2);
        let ai: u8 = if rng.random::<f64>() < pi { 1 } else { 0 };
        let e0: f64 = StandardNormal.sample(rng);
        let e1: f64 = StandardNormal.sample(rng);
        let yi = if ai == 1 { 3.0 * x1 + 2.0 * x2 + e1 } else { 0.5 + 2.0 * x1 + x2 + e0 };
        let p_obs = expit(-2.0 + 2.0 * x1 + ai as f64 * (1.5 + x2));
        let r1 = rng.random::<f64>() < p_obs;
        a.push(ai);
        y.push(yi);
        x.push(if r1 { Some(x1) } else { None });
        x.push(Some(x2));
    }
    Generated { data: Dataset::new(a, y, x, 2).expect("valid generated data"), tau: 1.0 }
}

/// Scenario B: six covariates (X3, X4 coded -1/1, X5 linear in the first
/// four, X6 Bernoulli in X5), linear outcome models per arm, and a
/// four-pattern multinomial missingness mechanism on (X5, X6) with
/// P(complete) = 1/(1 + 3 e^u), u = (1, A, X) eta. tau = -0.5.
pub fn generate_scenario_b(n: usize, rng: &mut ChaCha8Rng) -> Generated {
    const B0: [f64; 7] = [0.0, -1.0, 1.0, -1.0, 1.0, -1.0, -1.0];
    const B1: [f64; 7] = [-1.5, 1.0, -1.0, 1.0, -1.0, 1.0, 1.0];
    const ALPHA: [f64; 7] = [-1.0, -0.5, -0.5, -0.5, -0.5, 1.0, 1.0];
    // intercept calibrated so P(complete) = 0.49 and each incomplete
    // pattern has probability 0.17
    const ETA: [f64; 8] = [-1.033, 0.25, 0.25, 0.25, 0.25, 0.25, -0.25, -0.25];
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(6 * n);
    for _ in 0..n {
        let x1: f64 = StandardNormal.sample(rng);
        let x2: f64 = StandardNormal.sample(rng);
        let x3 = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
        let x4 = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
        let e5: f64 = StandardNormal.sample(rng);
        let x5 = x1 + x2 + x3 + x4 + e5;
        let x6 = if rng.random::<f64>() < expit(-x5) { 1.0 } else { 0.0 };
        let xv = [x1, x2, x3, x4, x5, x6];
        let lin = |c: &[f64; 7]| c[0] + c[1..].iter().zip(&xv).map(|(b, v)| b * v).sum::<f64>();
        let ai: u8 = if rng.random::<f64>() < expit(lin(&ALPHA)) { 1 } else { 0 };
        let eps: f64 = StandardNormal.sample(rng);
        let yi = if ai == 1 { lin(&B1) } else { lin(&B0) } + eps;
        let u = ETA[0]
            + ETA[1] * ai as f64
            + ETA[2..].iter().zip(&xv).map(|(b, v)| b * v).sum::<f64>();
        let eu = u.exp();
        let p11 = 1.0 / (1.0 + 3.0 * eu);
        let pk = eu / (1.0 + 3.0 * eu);
        let un = rng.random::<f64>();
        // patterns: 0 = both observed, 1 = X6 missing, 2 = X5 missing, 3 = both
        let pat = if un < p11 {
            0
        } else if un < p11 + pk {
            1
        } else if un < p11 + 2.0 * pk {
            2
        } else {
            3
        };
        let r5 = pat == 0 || pat == 1;
        let r6 = pat == 0 || pat == 2;
        a.push(ai);
        y.push(yi);
        x.push(Some(x1));
        x.push(Some(x2));
        x.push(Some(x3));
        x.push(Some(x4));
        x.push(if r5 { Some(x5) } else { None });
        x.push(if r6 { Some(x6) } else { None });
    }
    Generated { data: Dataset::new(a, y, x, 6).expect("valid generated data"), tau: -0.5 }
}

pub fn generate(scenario: Scenario, n: usize, rng: &mut ChaCha8Rng) -> Generated {
    match scenario {
        Scenario::A => generate_scenario_a(n, rng),
        Scenario::B => generate_scenario_b(n, rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Unadj,
    Gpsw,
    Nonpara,
    Para,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Method> {
        match s {
            "unadj" => Ok(Method::Unadj),
            "gpsw" => Ok(Method::Gpsw),
            "nonpara" => Ok(Method::Nonpara),
            "para" => Ok(Method::Para),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Unadj => "unadj",
            Method::Gpsw => "gpsw",
            Method::Nonpara => "nonpara",
            Method::Para => "para",
        };
        f.write_str(s)
    }
}

/// Monte Carlo study configuration.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub n_reps: usize,
    /// Bootstrap replicates per repetition; 0 disables intervals.
    pub n_boot: usize,
    pub level: f64,
    pub nonpara: NonparaConfig,
    pub fi: FiConfig,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, n: usize, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            scenario,
            n,
            seed,
            methods: vec![Method::Unadj],
            n_reps: 200,
            n_boot: 100,
            level: 0.95,
            nonpara: NonparaConfig::default(),
            // the main fit can need several hundred EM iterations from a
            // cold start; bootstrap refits are warm-started
            fi: FiConfig { max_iter: 500, ..FiConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 50 {
            return Err(Error::InvalidArgument("n must be at least 50".into()));
        }
        if self.n_reps < 1 {
            return Err(Error::InvalidArgument("n_reps must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("no methods selected".into()));
        }
        if self.scenario == Scenario::B && self.methods.contains(&Method::Nonpara) {
            return Err(Error::InvalidArgument(
                "nonparametric estimator supports p <= 3; scenario B has p = 6".into(),
            ));
        }
        Ok(())
    }
}

/// Per-method Monte Carlo summary.
#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub method: Method,
    pub bias: f64,
    /// Variance of the point estimates across repetitions.
    pub variance: f64,
    /// Mean of the bootstrap variance estimates (absent without bootstrap).
    pub var_est: Option<f64>,
    /// Fraction of nominal-level intervals containing the truth.
    pub coverage: Option<f64>,
    pub n_ok: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub scenario: Scenario,
    pub n: usize,
    pub n_reps: usize,
    pub n_boot: usize,
    pub seed: u64,
    pub tau_true: f64,
    pub methods: Vec<MethodReport>,
}

impl MonteCarloReport {
    /// Aligned-column text table: bias, variance, mean variance estimate,
    /// coverage per method.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "scenario {} n={} reps={} boot={} tau={}\n",
            match self.scenario {
                Scenario::A => "A",
                Scenario::B => "B",
            },
            self.n,
            self.n_reps,
            self.n_boot,
            self.tau_true
        );
        out.push_str(&format!(
            "{:<10}{:>10}{:>10}{:>10}{:>10}{:>8}\n",
            "method", "bias", "var", "VE", "cvg", "fail"
        ));
        for m in &self.methods {
            out.push_str(&format!(
                "{:<10}{:>10.4}{:>10.4}{:>10}{:>10}{:>8}\n",
                m.method.to_string(),
                m.bias,
                m.variance,
                m.var_est.map_or("-".to_string(), |v| format!("{v:.4}")),
                m.coverage.map_or("-".to_string(), |v| format!("{v:.3}")),
                m.failures
            ));
        }
        out
    }
}

fn derived_seed(seed: u64, rep: usize, salt: u64) -> u64 {
    // splitmix-style mixing so nested RNG streams never collide
    let mut z = seed ^ salt.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(rep as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct RepOutcome {
    estimate: f64,
    var_est: Option<f64>,
    covered: Option<bool>,
}

/// One repetition of one method, with optional bootstrap interval.
fn run_method(
    method: Method,
    gen: &Generated,
    cfg: &ScenarioConfig,
    rep: usize,
) -> Result<RepOutcome> {
    let d = &gen.data;
    let boot_seed = derived_seed(cfg.seed, rep, 0xb007);
    let with_boot = |point: f64, est: &(dyn Fn(&Dataset) -> Result<f64> + Sync)| -> Result<RepOutcome> {
        if cfg.n_boot == 0 {
            return Ok(RepOutcome { estimate: point, var_est: None, covered: None });
        }
        let boot = bootstrap_ci(est, d, cfg.n_boot, cfg.level, boot_seed)?;
        Ok(RepOutcome {
            estimate: point,
            var_est: Some(boot.se * boot.se),
            covered: Some(boot.ci.0 <= gen.tau && gen.tau <= boot.ci.1),
        })
    };
    match method {
        Method::Unadj => {
            let point = unadjusted(d)?.estimate;
            with_boot(point, &|dd| Ok(unadjusted(dd)?.estimate))
        }
        Method::Gpsw => {
            let point = gpsw(d)?.estimate;
            with_boot(point, &|dd| Ok(gpsw(dd)?.estimate))
        }
        Method::Nonpara => {
            let mut np = cfg.nonpara.clone();
            np.series.cv.seed = derived_seed(cfg.seed, rep, 0xc101);
            np.cate_cv.seed = derived_seed(cfg.seed, rep, 0xc102);
            let mut tuning = TuningStore::default();
            let point = nonpara_tau_with(d, &np, &mut tuning)?.estimate;
            tuning.freeze();
            with_boot(point, &|dd| {
                let mut t = tuning.clone();
                Ok(nonpara_tau_with(dd, &np, &mut t)?.estimate)
            })
        }
        Method::Para => {
            let spec = ParamModelSpec::infer(d);
            let mut fi = cfg.fi.clone();
            fi.seed = derived_seed(cfg.seed, rep, 0xf1);
            let fit = fit_mle_fractional(d, &spec, &fi)?;
            let point = param_tau(&fit, d);
            let warm = fit.theta.clone();
            with_boot(point, &|dd| {
                let spec_b = ParamModelSpec::infer(dd);
                // warm-started replicate fits use a looser tolerance: the
                // remaining optimization error is far below the bootstrap
                // spread of the estimate
                let fi_b = FiConfig {
                    seed: fi.seed ^ 0x5eed,
                    init: Some(warm.clone()),
                    tol: fi.tol.max(3e-4),
                    ..fi.clone()
                };
                let f = fit_mle_fractional(dd, &spec_b, &fi_b)?;
                Ok(param_tau(&f, dd))
            })
        }
    }
}

/// Runs the full Monte Carlo study: generate, estimate, bootstrap,
/// aggregate. Repetitions run in parallel on deterministic RNG streams;
/// per-repetition failures are excluded from aggregates and counted.
pub fn run_monte_carlo(cfg: &ScenarioConfig) -> Result<MonteCarloReport> {
    cfg.validate()?;
    let reps: Vec<Vec<Result<RepOutcome>>> = (0..cfg.n_reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(rep as u64);
            let gen = generate(cfg.scenario, cfg.n, &mut rng);
            cfg.methods.iter().map(|&m| run_method(m, &gen, cfg, rep)).collect()
        })
        .collect();
    let tau_true = match cfg.scenario {
        Scenario::A => 1.0,
        Scenario::B => -0.5,
    };
    let mut methods = Vec::new();
    for (mi, &method) in cfg.methods.iter().enumerate() {
        let mut points = Vec::new();
        let mut var_ests = Vec::new();
        let mut covered = Vec::new();
        let mut failures = 0usize;
        for rep in &reps {
            match &rep[mi] {
                Ok(out) => {
                    points.push(out.estimate);
                    if let Some(v) = out.var_est {
                        var_ests.push(v);
                    }
                    if let Some(c) = out.covered {
                        covered.push(c);
                    }
                }
                Err(_) => failures += 1,
            }
        }
        if points.is_empty() {
            return Err(Error::Estimation(format!("method {method} failed in every repetition")));
        }
        let m = points.len() as f64;
        let mean = points.iter().sum::<f64>() / m;
        let variance = if points.len() > 1 {
            points.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        methods.push(MethodReport {
            method,
            bias: mean - tau_true,
            variance,
            var_est: if var_ests.is_empty() {
                None
            } else {
                Some(var_ests.iter().sum::<f64>() / var_ests.len() as f64)
            },
            coverage: if covered.is_empty() {
                None
            } else {
                Some(covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64)
            },
            n_ok: points.len(),
            failures,
        });
    }
    Ok(MonteCarloReport {
        scenario: cfg.scenario,
        n: cfg.n,
        n_reps: cfg.n_reps,
        n_boot: cfg.n_boot,
        seed: cfg.seed,
        tau_true,
        methods,
    })
}

/// One cell of the (J, B) sensitivity table.
#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub j: usize,
    pub bound: f64,
    pub n: usize,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
}

/// Monte Carlo MSE of the nonparametric estimator over a (J, B) grid
/// (scenario A only; bootstrap disabled).
pub fn sensitivity_grid(cfg: &ScenarioConfig, grid: &[(usize, f64)]) -> Result<Vec<GridCell>> {
    if cfg.scenario != Scenario::A {
        return Err(Error::InvalidArgument("sensitivity grid is defined for scenario A".into()));
    }
    let mut cells = Vec::new();
    for &(j, bound) in grid {
        let mut c = cfg.clone();
        c.methods = vec![Method::Nonpara];
        c.n_boot = 0;
        c.nonpara.series.j = j;
        c.nonpara.series.bound = bound;
        let report = run_monte_carlo(&c)?;
        let m = &report.methods[0];
        cells.push(GridCell {
            j,
            bound,
            n: cfg.n,
            bias: m.bias,
            variance: m.variance,
            mse: m.bias * m.bias + m.variance,
        });
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PatternIndex;

    #[test]
    fn scenario_a_complete_rate_and_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let n = 100_000;
        let g = generate_scenario_a(n, &mut rng);
        assert_eq!(g.tau, 1.0);
        let idx = PatternIndex::build(&g.data);
        assert_eq!(idx.num_patterns(), 2);
        let rate = idx.complete_units().len() as f64 / n as f64;
        assert!((rate - 0.67).abs() < 0.01, "complete rate {rate}");
        // E[Y(1) - Y(0)] = E[X1 + X2 - 0.5] = 1 + 0.5 - 0.5
        let mut rng2 = ChaCha8Rng::seed_from_u64(101);
        let mut diff = 0.0;
        for _ in 0..n {
            let x1: f64 = 1.0 + Distribution::<f64>::sample(&StandardNormal, &mut rng2);
            let x2 = if rng2.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            diff += x1 + x2 - 0.5;
        }
        assert!((diff / n as f64 - 1.0).abs() < 0.02);
    }

    #[test]
    fn scenario_a_treated_fraction_matches_mc_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let n = 100_000;
        let g = generate_scenario_a(n, &mut rng);
        let frac = g.data.a().iter().filter(|&&a| a == 1).count() as f64 / n as f64;
        // direct Monte Carlo of E[expit(1.25 - 0.5 X1 - 0.5 X2)]
        let mut rng2 = ChaCha8Rng::seed_from_u64(103);
        let mut want = 0.0;
        let m = 1_000_000;
        for _ in 0..m {
            let x1: f64 = 1.0 + Distribution::<f64>::sample(&StandardNormal, &mut rng2);
            let x2 = if rng2.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            want += expit(1.25 - 0.5 * x1 - 0.5 * x2);
        }
        want /= m as f64;
        assert!((frac - want).abs() < 0.01, "{frac} vs {want}");
    }

    #[test]
    fn scenario_b_pattern_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let n = 100_000;
        let g = generate_scenario_b(n, &mut rng);
        assert_eq!(g.tau, -0.5);
        let idx = PatternIndex::build(&g.data);
        let mut freqs: Vec<(String, f64)> = idx
            .groups()
            .map(|(p, u)| (p.to_string(), u.len() as f64 / n as f64))
            .collect();
        freqs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        assert!((freqs[0].1 - 0.49).abs() < 0.01, "{freqs:?}");
        assert_eq!(freqs[0].0, "111111");
        for f in &freqs[1..] {
            assert!((f.1 - 0.17).abs() < 0.01, "{freqs:?}");
        }
    }

    #[test]
    fn scenario_b_tau_and_x5_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let n = 1_000_000;
        // population tau: E[(1,X)'(b1 - b0)] with the generator's X law
        let mut tau = 0.0;
        let mut x5_mean = 0.0;
        for _ in 0..n {
            let x1: f64 = StandardNormal.sample(&mut rng);
            let x2: f64 = StandardNormal.sample(&mut rng);
            let x3 = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
            let x4 = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
            let e5: f64 = StandardNormal.sample(&mut rng);
            let x5 = x1 + x2 + x3 + x4 + e5;
            let x6 = if rng.random::<f64>() < expit(-x5) { 1.0 } else { 0.0 };
            // b1 - b0 = (-1.5, 2, -2, 2, -2, 2, 2)
            tau += -1.5 + 2.0 * (x1 - x2 + x3 - x4 + x5 + x6);
            x5_mean += x5;
        }
        tau /= n as f64;
        x5_mean /= n as f64;
        assert!((tau + 0.5).abs() < 0.01, "tau {tau}");
        assert!(x5_mean.abs() < 0.01, "x5 mean {x5_mean}");
    }

    #[test]
    fn generators_deterministic() {
        let g1 = generate_scenario_a(200, &mut ChaCha8Rng::seed_from_u64(7));
        let g2 = generate_scenario_a(200, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(g1.data, g2.data);
        let b1 = generate_scenario_b(200, &mut ChaCha8Rng::seed_from_u64(7));
        let b2 = generate_scenario_b(200, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(b1.data, b2.data);
    }

    #[test]
    fn scenario_a_missingness_ignores_outcome() {
        // same RNG, outcome replaced post hoc: the missingness indicators
        // are a function of (A, X, draws) only, by construction of the
        // generator (it consumes no Y when drawing R)
        let g = generate_scenario_a(5000, &mut ChaCha8Rng::seed_from_u64(8));
        let d = &g.data;
        // sanity: both patterns occur and only x1 is ever missing
        for i in 0..d.n() {
            assert_eq!(d.r(i, 1), 1);
        }
        let n_mis = (0..d.n()).filter(|&i| d.r(i, 0) == 0).count();
        assert!(n_mis > 0 && n_mis < d.n());
    }

    #[test]
    fn monte_carlo_unadjusted_deterministic_and_sane() {
        let mut cfg = ScenarioConfig::new(Scenario::A, 400, 11);
        cfg.n_reps = 50;
        cfg.n_boot = 50;
        let r1 = run_monte_carlo(&cfg).unwrap();
        let r2 = run_monte_carlo(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        let m = &r1.methods[0];
        assert!((m.bias + 1.275).abs() < 0.1, "unadj bias {}", m.bias);
        assert_eq!(m.failures, 0);
    }

    #[test]
    fn monte_carlo_null_effect_calibration() {
        // randomized treatment, no effect: unadjusted is unbiased with
        // near-nominal coverage
        let n_reps = 100;
        let reps: Vec<(f64, bool)> = (0..n_reps)
            .map(|rep| {
                let mut rng = ChaCha8Rng::seed_from_u64(500);
                rng.set_stream(rep);
                let n = 300;
                let mut a = Vec::new();
                let mut y = Vec::new();
                let mut x = Vec::new();
                for _ in 0..n {
                    a.push(if rng.random::<f64>() < 0.5 { 1u8 } else { 0 });
                    y.push(StandardNormal.sample(&mut rng));
                    x.push(Some(0.0));
                }
                let d = Dataset::new(a, y, x, 1).unwrap();
                let est = unadjusted(&d).unwrap().estimate;
                let boot = bootstrap_ci(
                    |dd| Ok(unadjusted(dd)?.estimate),
                    &d,
                    100,
                    0.95,
                    rep,
                )
                .unwrap();
                (est, boot.ci.0 <= 0.0 && 0.0 <= boot.ci.1)
            })
            .collect();
        let mean = reps.iter().map(|r| r.0).sum::<f64>() / n_reps as f64;
        let cvg = reps.iter().filter(|r| r.1).count() as f64 / n_reps as f64;
        assert!(mean.abs() < 0.05, "bias {mean}");
        assert!((0.85..=1.0).contains(&cvg), "coverage {cvg}");
    }

    #[test]
    fn config_guards() {
        let mut cfg = ScenarioConfig::new(Scenario::B, 400, 1);
        cfg.methods = vec![Method::Nonpara];
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::new(Scenario::A, 10, 1);
        cfg.n = 10;
        assert!(cfg.validate().is_err());
    }
}
