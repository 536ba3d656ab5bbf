//! Parametric likelihood estimation with fractional imputation.
//!
//! The complete-data likelihood factorizes as
//! `P(R|A,X; eta) f(Y|A,X; beta_a) P(A|X; alpha) f(X; lambda)` with a
//! triangular covariate model (each column Gaussian-linear or
//! Bernoulli-logistic in its predecessors). Missing covariates are handled
//! by fractional imputation: a fixed set of M proposal draws per
//! incomplete unit, importance weights refreshed every EM iteration, and
//! weighted per-factor maximizations in the M step. With the draws held
//! fixed the observed-data log-likelihood is nondecreasing.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::glm;
use crate::data::{Dataset, Pattern, PatternIndex};
use crate::error::{Error, Result};

/// Distribution family of one covariate column given its predecessors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum CovFamily {
    Gaussian,
    /// Two-point support; the logistic model predicts `P(X = hi)`.
    Bernoulli { lo: f64, hi: f64 },
}

/// Per-column families for the triangular covariate model.
#[derive(Debug, Clone, Serialize)]
pub struct ParamModelSpec {
    pub families: Vec<CovFamily>,
}

impl ParamModelSpec {
    /// Guesses families from the observed values: columns with exactly two
    /// distinct observed values become Bernoulli, all others Gaussian.
    pub fn infer(d: &Dataset) -> ParamModelSpec {
        let families = (0..d.p())
            .map(|j| {
                let mut vals: Vec<f64> = (0..d.n()).filter_map(|i| d.x(i, j)).collect();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                vals.dedup();
                if vals.len() == 2 {
                    CovFamily::Bernoulli { lo: vals[0], hi: vals[1] }
                } else {
                    CovFamily::Gaussian
                }
            })
            .collect();
        ParamModelSpec { families }
    }

    fn validate(&self, d: &Dataset) -> Result<()> {
        if self.families.len() != d.p() {
            return Err(Error::DimensionMismatch { expected: d.p(), got: self.families.len() });
        }
        for (j, fam) in self.families.iter().enumerate() {
            if let CovFamily::Bernoulli { lo, hi } = fam {
                if lo >= hi {
                    return Err(Error::InvalidArgument(format!("column {j}: lo must be < hi")));
                }
                for i in 0..d.n() {
                    if let Some(v) = d.x(i, j) {
                        if v != *lo && v != *hi {
                            return Err(Error::Validation(format!(
                                "row {i}: x{} = {v} outside Bernoulli support {{{lo}, {hi}}}",
                                j + 1
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// One covariate column's fitted model.
#[derive(Debug, Clone, Serialize)]
pub enum LambdaCol {
    Gaussian { coef: Vec<f64>, var: f64 },
    Bernoulli { lo: f64, hi: f64, coef: Vec<f64> },
}

/// All parameters of the factorized likelihood.
#[derive(Debug, Clone, Serialize)]
pub struct ParamTheta {
    /// Treatment model: logistic in (1, X).
    pub alpha: Vec<f64>,
    /// Outcome model per arm: Gaussian linear in (1, X).
    pub beta: [Vec<f64>; 2],
    pub sig2: [f64; 2],
    /// Missingness model: multinomial logistic in (1, A, X); one row per
    /// non-reference pattern, the complete pattern being the reference.
    pub eta: Vec<Vec<f64>>,
    /// Non-reference patterns, aligned with `eta` rows.
    pub patterns: Vec<Pattern>,
    /// Covariate model per column.
    pub lambda: Vec<LambdaCol>,
}

impl ParamTheta {
    fn pack(&self) -> Vec<f64> {
        let mut v = self.alpha.clone();
        v.extend(&self.beta[0]);
        v.push(self.sig2[0]);
        v.extend(&self.beta[1]);
        v.push(self.sig2[1]);
        for row in &self.eta {
            v.extend(row);
        }
        for col in &self.lambda {
            match col {
                LambdaCol::Gaussian { coef, var } => {
                    v.extend(coef);
                    v.push(*var);
                }
                LambdaCol::Bernoulli { coef, .. } => v.extend(coef),
            }
        }
        v
    }

    /// Inverse of `pack`; fails when an extrapolated variance is not
    /// strictly positive.
    fn unpack(&mut self, v: &[f64]) -> bool {
        fn take(v: &[f64], pos: &mut usize, dst: &mut [f64]) {
            dst.copy_from_slice(&v[*pos..*pos + dst.len()]);
            *pos += dst.len();
        }
        fn take1(v: &[f64], pos: &mut usize) -> f64 {
            *pos += 1;
            v[*pos - 1]
        }
        let mut pos = 0;
        take(v, &mut pos, &mut self.alpha);
        take(v, &mut pos, &mut self.beta[0]);
        let s0 = take1(v, &mut pos);
        take(v, &mut pos, &mut self.beta[1]);
        let s1 = take1(v, &mut pos);
        if s0 <= 0.0 || s1 <= 0.0 {
            return false;
        }
        self.sig2 = [s0, s1];
        for row in &mut self.eta {
            take(v, &mut pos, row);
        }
        for col in &mut self.lambda {
            match col {
                LambdaCol::Gaussian { coef, var } => {
                    take(v, &mut pos, coef);
                    let vv = take1(v, &mut pos);
                    if vv <= 0.0 {
                        return false;
                    }
                    *var = vv;
                }
                LambdaCol::Bernoulli { coef, .. } => take(v, &mut pos, coef),
            }
        }
        debug_assert_eq!(pos, v.len());
        true
    }

    /// tau(x; theta) = (1, x)'(beta1 - beta0).
    pub fn cate(&self, x: &[f64]) -> f64 {
        let mut t = self.beta[1][0] - self.beta[0][0];
        for (j, &xj) in x.iter().enumerate() {
            t += (self.beta[1][j + 1] - self.beta[0][j + 1]) * xj;
        }
        t
    }
}

/// Configuration of the fractional-imputation fit.
#[derive(Debug, Clone)]
pub struct FiConfig {
    /// Imputations per incomplete unit.
    pub m: usize,
    /// Max-abs parameter change declaring convergence.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Warm start; falls back to the complete-case initializer when the
    /// pattern set does not match.
    pub init: Option<ParamTheta>,
}

impl Default for FiConfig {
    fn default() -> Self {
        FiConfig { m: 100, tol: 1e-5, max_iter: 200, seed: 0, init: None }
    }
}

/// Stacked pseudo-data: complete units first (weight 1), then M rows per
/// incomplete unit. Design matrices are built once; only weights change
/// across EM iterations.
pub struct FiState {
    /// Full covariate rows (imputed where missing).
    pub x: Vec<Vec<f64>>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    /// Pattern class per row (0 = complete).
    pub cls: Vec<usize>,
    /// Proposal log-density per row (0 for complete rows).
    pub logh: Vec<f64>,
    /// Fractional weights; complete rows carry 1.
    pub w: Vec<f64>,
    /// Number of leading complete-unit rows.
    pub cc_rows: usize,
    /// Incomplete unit ids, in block order.
    pub inc_units: Vec<usize>,
    pub m: usize,
    ones_x: DMatrix<f64>,
    design_r: DMatrix<f64>,
    col_designs: Vec<DMatrix<f64>>,
    arm_rows: [Vec<usize>; 2],
    arm_x: [DMatrix<f64>; 2],
}

impl FiState {
    /// Design `(1, X)` over the stacked rows.
    pub fn ones_x(&self) -> &DMatrix<f64> {
        &self.ones_x
    }

    /// Design `(1, A, X)` over the stacked rows.
    pub fn design_r(&self) -> &DMatrix<f64> {
        &self.design_r
    }

    /// Design `(1, X_1..X_j)` for covariate column `j`.
    pub fn col_design(&self, j: usize) -> &DMatrix<f64> {
        &self.col_designs[j]
    }

    fn rebuild_designs(&mut self, p: usize) {
        let n = self.x.len();
        self.ones_x = DMatrix::from_fn(n, p + 1, |i, c| if c == 0 { 1.0 } else { self.x[i][c - 1] });
        self.design_r = DMatrix::from_fn(n, p + 2, |i, c| match c {
            0 => 1.0,
            1 => self.a[i],
            _ => self.x[i][c - 2],
        });
        self.col_designs = (0..p)
            .map(|j| {
                DMatrix::from_fn(n, j + 1, |i, c| if c == 0 { 1.0 } else { self.x[i][c - 1] })
            })
            .collect();
        let mut arm_rows: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for i in 0..n {
            arm_rows[self.a[i] as usize].push(i);
        }
        let arm_x = [0, 1].map(|arm: usize| {
            DMatrix::from_fn(arm_rows[arm].len(), p + 1, |r, c| {
                let i = arm_rows[arm][r];
                if c == 0 {
                    1.0
                } else {
                    self.x[i][c - 1]
                }
            })
        });
        self.arm_rows = arm_rows;
        self.arm_x = arm_x;
    }
}

/// A completed fractional-imputation fit.
pub struct FiFit {
    pub theta: ParamTheta,
    pub state: FiState,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Iterations where degenerate weights triggered a proposal refresh.
    pub ess_refreshes: usize,
}

fn norm_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * (x - mean).powi(2) / var
}

fn lin_pred(coef: &[f64], design_row: impl Fn(usize) -> f64) -> f64 {
    coef.iter().enumerate().map(|(c, &b)| b * design_row(c)).sum()
}

/// log f(X row | lambda) under the triangular covariate model.
fn logf_x_row(x: &[f64], lambda: &[LambdaCol]) -> f64 {
    let mut lp = 0.0;
    for (j, col) in lambda.iter().enumerate() {
        let pred = |c: usize| if c == 0 { 1.0 } else { x[c - 1] };
        match col {
            LambdaCol::Gaussian { coef, var } => {
                lp += norm_logpdf(x[j], lin_pred(coef, pred), *var);
            }
            LambdaCol::Bernoulli { hi, coef, .. } => {
                let pr = glm::expit(lin_pred(coef, pred)).clamp(1e-300, 1.0 - 1e-16);
                lp += if x[j] == *hi { pr.ln() } else { (1.0 - pr).ln() };
            }
        }
    }
    lp
}

/// log f(A, X, Y, R-class | theta) for one fully imputed row.
fn logf_z_row(x: &[f64], a: f64, y: f64, cls: usize, th: &ParamTheta) -> f64 {
    let mut lp = logf_x_row(x, &th.lambda);
    let pred1x = |c: usize| if c == 0 { 1.0 } else { x[c - 1] };
    let pa = glm::expit(lin_pred(&th.alpha, pred1x)).clamp(1e-300, 1.0 - 1e-16);
    lp += if a == 1.0 { pa.ln() } else { (1.0 - pa).ln() };
    let arm = a as usize;
    lp += norm_logpdf(y, lin_pred(&th.beta[arm], pred1x), th.sig2[arm]);
    if !th.eta.is_empty() {
        let pred_r = |c: usize| match c {
            0 => 1.0,
            1 => a,
            _ => x[c - 2],
        };
        let etas: Vec<f64> = th.eta.iter().map(|row| lin_pred(row, &pred_r)).collect();
        let mx = etas.iter().cloned().fold(0.0f64, f64::max);
        let logden = mx + ((-mx).exp() + etas.iter().map(|&e| (e - mx).exp()).sum::<f64>()).ln();
        let num = if cls == 0 { 0.0 } else { etas[cls - 1] };
        lp += num - logden;
    }
    lp
}

/// Complete-case initializer: per-factor MLEs on complete units, except
/// the missingness model, which complete cases cannot inform beyond the
/// reference class; its intercepts are matched to the marginal pattern
/// frequencies and its slopes start at zero.
fn init_theta(
    d: &Dataset,
    spec: &ParamModelSpec,
    cc: &[usize],
    patterns: &[Pattern],
    class_of: &[usize],
) -> Result<ParamTheta> {
    let p = d.p();
    let ncc = cc.len();
    if ncc < p + 2 {
        return Err(Error::Estimation(format!(
            "too few complete cases ({ncc}) to initialize a {p}-covariate model"
        )));
    }
    let w1 = vec![1.0; ncc];
    let ones_x = DMatrix::from_fn(ncc, p + 1, |r, c| {
        let i = cc[r];
        if c == 0 {
            1.0
        } else {
            d.x(i, c - 1).unwrap()
        }
    });
    let a_cc: Vec<f64> = cc.iter().map(|&i| d.a()[i] as f64).collect();
    let alpha = glm::logistic_fit(&ones_x, &a_cc, &w1, None, 50)?;
    let mut beta: [Vec<f64>; 2] = [vec![], vec![]];
    let mut sig2 = [1.0; 2];
    for arm in 0..2 {
        let rows: Vec<usize> = (0..ncc).filter(|&r| a_cc[r] == arm as f64).collect();
        if rows.len() < p + 2 {
            return Err(Error::Estimation(format!("too few complete cases in arm {arm}")));
        }
        let xa = DMatrix::from_fn(rows.len(), p + 1, |r, c| ones_x[(rows[r], c)]);
        let ya: Vec<f64> = rows.iter().map(|&r| d.y()[cc[r]]).collect();
        let (coef, mse) = glm::wls(&xa, &ya, &vec![1.0; rows.len()])?;
        beta[arm] = coef;
        sig2[arm] = mse.max(1e-8);
    }
    // intercept-only missingness init from marginal class counts
    let k = patterns.len() + 1;
    let mut counts = vec![0.5f64; k];
    for &c in class_of {
        counts[c] += 1.0;
    }
    let eta: Vec<Vec<f64>> = (1..k)
        .map(|c| {
            let mut row = vec![0.0; p + 2];
            row[0] = (counts[c] / counts[0]).ln();
            row
        })
        .collect();
    let mut lambda = Vec::with_capacity(p);
    for j in 0..p {
        let pred = DMatrix::from_fn(ncc, j + 1, |r, c| ones_x[(r, c)]);
        match spec.families[j] {
            CovFamily::Gaussian => {
                let xj: Vec<f64> = cc.iter().map(|&i| d.x(i, j).unwrap()).collect();
                let (coef, var) = glm::wls(&pred, &xj, &w1)?;
                lambda.push(LambdaCol::Gaussian { coef, var: var.max(1e-8) });
            }
            CovFamily::Bernoulli { lo, hi } => {
                let yb: Vec<f64> =
                    cc.iter().map(|&i| if d.x(i, j).unwrap() == hi { 1.0 } else { 0.0 }).collect();
                let coef = glm::logistic_fit(&pred, &yb, &w1, None, 50)?;
                lambda.push(LambdaCol::Bernoulli { lo, hi, coef });
            }
        }
    }
    Ok(ParamTheta { alpha, beta, sig2, eta, patterns: patterns.to_vec(), lambda })
}

/// Draws the missing columns of one unit from the triangular covariate
/// model given predecessors; returns the accumulated proposal log-density.
fn draw_missing(
    row: &mut [f64],
    missing: &[bool],
    lambda: &[LambdaCol],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut logh = 0.0;
    for (j, col) in lambda.iter().enumerate() {
        if !missing[j] {
            continue;
        }
        let pred = |c: usize| if c == 0 { 1.0 } else { row[c - 1] };
        match col {
            LambdaCol::Gaussian { coef, var } => {
                let mean = lin_pred(coef, pred);
                let z: f64 = StandardNormal.sample(rng);
                row[j] = mean + var.sqrt() * z;
                logh += norm_logpdf(row[j], mean, *var);
            }
            LambdaCol::Bernoulli { lo, hi, coef } => {
                let pr = glm::expit(lin_pred(coef, pred)).clamp(1e-12, 1.0 - 1e-12);
                if rng.random::<f64>() < pr {
                    row[j] = *hi;
                    logh += pr.ln();
                } else {
                    row[j] = *lo;
                    logh += (1.0 - pr).ln();
                }
            }
        }
    }
    logh
}

/// E step: importance weights for every imputation row and the Monte
/// Carlo observed-data log-likelihood. Returns the log-likelihood and the
/// number of incomplete units with effective sample size below 2.
///
/// Equivalent to summing `logf_z_row` over rows, with the per-factor
/// normalizing constants hoisted out of the row loop.
fn e_step(state: &mut FiState, theta: &ParamTheta) -> (f64, usize) {
    const LN_2PI: f64 = 1.8378770664093453;
    let lam_consts: Vec<(f64, f64)> = theta
        .lambda
        .iter()
        .map(|c| match c {
            LambdaCol::Gaussian { var, .. } => (-0.5 * (LN_2PI + var.ln()), 0.5 / var),
            LambdaCol::Bernoulli { .. } => (0.0, 0.0),
        })
        .collect();
    let out_consts: [(f64, f64); 2] =
        [0, 1].map(|a| (-0.5 * (LN_2PI + theta.sig2[a].ln()), 0.5 / theta.sig2[a]));
    let km1 = theta.eta.len();
    let mut etas = vec![0.0; km1];
    let mut row_ll = |x: &[f64], a: f64, y: f64, cls: usize| -> f64 {
        let mut lp = 0.0;
        for (j, col) in theta.lambda.iter().enumerate() {
            match col {
                LambdaCol::Gaussian { coef, .. } => {
                    let mut mean = coef[0];
                    for c in 0..j {
                        mean += coef[c + 1] * x[c];
                    }
                    let (c0, inv2v) = lam_consts[j];
                    lp += c0 - inv2v * (x[j] - mean).powi(2);
                }
                LambdaCol::Bernoulli { hi, coef, .. } => {
                    let mut z = coef[0];
                    for c in 0..j {
                        z += coef[c + 1] * x[c];
                    }
                    // log sigma(z), stable in both tails
                    let ls = if z > 0.0 { -(1.0 + (-z).exp()).ln() } else { z - (1.0 + z.exp()).ln() };
                    lp += if x[j] == *hi { ls } else { ls - z };
                }
            }
        }
        let mut za = theta.alpha[0];
        for c in 0..x.len() {
            za += theta.alpha[c + 1] * x[c];
        }
        let lsa = if za > 0.0 { -(1.0 + (-za).exp()).ln() } else { za - (1.0 + za.exp()).ln() };
        lp += if a == 1.0 { lsa } else { lsa - za };
        let arm = a as usize;
        let mut mean = theta.beta[arm][0];
        for c in 0..x.len() {
            mean += theta.beta[arm][c + 1] * x[c];
        }
        let (c0, inv2v) = out_consts[arm];
        lp += c0 - inv2v * (y - mean).powi(2);
        if km1 > 0 {
            let mut mx = 0.0f64;
            for (r, row) in theta.eta.iter().enumerate() {
                let mut e = row[0] + row[1] * a;
                for c in 0..x.len() {
                    e += row[c + 2] * x[c];
                }
                etas[r] = e;
                mx = mx.max(e);
            }
            let logden =
                mx + ((-mx).exp() + etas.iter().map(|&e| (e - mx).exp()).sum::<f64>()).ln();
            let num = if cls == 0 { 0.0 } else { etas[cls - 1] };
            lp += num - logden;
        }
        lp
    };
    let mut ll = 0.0;
    for r in 0..state.cc_rows {
        ll += row_ll(&state.x[r], state.a[r], state.y[r], state.cls[r]);
    }
    let m = state.m;
    let mut degenerate = 0usize;
    let mut lw = vec![0.0; m];
    for blk in 0..state.inc_units.len() {
        let start = state.cc_rows + blk * m;
        let mut mx = f64::NEG_INFINITY;
        for (j, v) in lw.iter_mut().enumerate() {
            let r = start + j;
            *v = row_ll(&state.x[r], state.a[r], state.y[r], state.cls[r]) - state.logh[r];
            mx = mx.max(*v);
        }
        let mut s = 0.0;
        for v in lw.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        let mut ess_inv = 0.0;
        for (j, v) in lw.iter().enumerate() {
            let wj = v / s;
            state.w[start + j] = wj;
            ess_inv += wj * wj;
        }
        if 1.0 / ess_inv < 2.0 {
            degenerate += 1;
        }
        ll += mx + (s / m as f64).ln();
    }
    (ll, degenerate)
}

/// M step: weighted per-factor maximizations on the cached designs.
fn m_step(
    state: &FiState,
    spec: &ParamModelSpec,
    k: usize,
    p: usize,
    theta: &mut ParamTheta,
) -> Result<()> {
    theta.alpha = glm::logistic_fit(&state.ones_x, &state.a, &state.w, Some(&theta.alpha), 50)?;
    for arm in 0..2 {
        let rows = &state.arm_rows[arm];
        let ya: Vec<f64> = rows.iter().map(|&r| state.y[r]).collect();
        let wa: Vec<f64> = rows.iter().map(|&r| state.w[r]).collect();
        let (coef, mse) = glm::wls(&state.arm_x[arm], &ya, &wa)?;
        theta.beta[arm] = coef;
        theta.sig2[arm] = mse.max(1e-10);
    }
    if k > 1 {
        theta.eta =
            glm::multinomial_fit(&state.design_r, &state.cls, &state.w, k, Some(&theta.eta), 100)?;
    }
    for j in 0..p {
        let xj: Vec<f64> = state.x.iter().map(|r| r[j]).collect();
        match spec.families[j] {
            CovFamily::Gaussian => {
                let (coef, var) = glm::wls(&state.col_designs[j], &xj, &state.w)?;
                theta.lambda[j] = LambdaCol::Gaussian { coef, var: var.max(1e-10) };
            }
            CovFamily::Bernoulli { lo, hi } => {
                let yb: Vec<f64> = xj.iter().map(|&v| if v == hi { 1.0 } else { 0.0 }).collect();
                let warm: Vec<f64> = match &theta.lambda[j] {
                    LambdaCol::Bernoulli { coef, .. } => coef.clone(),
                    _ => vec![0.0; j + 1],
                };
                let coef = glm::logistic_fit(&state.col_designs[j], &yb, &state.w, Some(&warm), 50)?;
                theta.lambda[j] = LambdaCol::Bernoulli { lo, hi, coef };
            }
        }
    }
    Ok(())
}

fn maxabs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max)
}

/// Fits the factorized parametric model by fractional-imputation EM.
pub fn fit_mle_fractional(d: &Dataset, spec: &ParamModelSpec, cfg: &FiConfig) -> Result<FiFit> {
    spec.validate(d)?;
    let p = d.p();
    let idx = PatternIndex::build(d);
    let cc: Vec<usize> = idx.complete_units().to_vec();
    if cc.is_empty() {
        return Err(Error::Estimation("no complete cases".into()));
    }
    let patterns = idx.incomplete_patterns();
    let class_of: Vec<usize> = (0..d.n())
        .map(|i| {
            let pat = d.pattern_of(i);
            if pat.is_complete() {
                0
            } else {
                1 + patterns.iter().position(|q| *q == pat).unwrap()
            }
        })
        .collect();
    let k = patterns.len() + 1;
    let mut theta = match &cfg.init {
        Some(t) if t.patterns == patterns => t.clone(),
        _ => init_theta(d, spec, &cc, &patterns, &class_of)?,
    };

    // stacked pseudo-data: complete rows then M draws per incomplete unit
    let inc_units: Vec<usize> = (0..d.n()).filter(|&i| !d.is_complete(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_rows = cc.len() + inc_units.len() * cfg.m;
    let mut state = FiState {
        x: Vec::with_capacity(n_rows),
        a: Vec::with_capacity(n_rows),
        y: Vec::with_capacity(n_rows),
        cls: Vec::with_capacity(n_rows),
        logh: Vec::with_capacity(n_rows),
        w: vec![1.0; n_rows],
        cc_rows: cc.len(),
        inc_units: inc_units.clone(),
        m: cfg.m,
        ones_x: DMatrix::zeros(0, 0),
        design_r: DMatrix::zeros(0, 0),
        col_designs: vec![],
        arm_rows: [vec![], vec![]],
        arm_x: [DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)],
    };
    for &i in &cc {
        state.x.push(d.x_row(i));
        state.a.push(d.a()[i] as f64);
        state.y.push(d.y()[i]);
        state.cls.push(0);
        state.logh.push(0.0);
    }
    let draw_unit = |i: usize, lambda: &[LambdaCol], rng: &mut ChaCha8Rng| -> (Vec<Vec<f64>>, Vec<f64>) {
        let missing: Vec<bool> = (0..p).map(|j| d.r(i, j) == 0).collect();
        let base: Vec<f64> = (0..p).map(|j| d.x(i, j).unwrap_or(0.0)).collect();
        let mut rows = Vec::with_capacity(cfg.m);
        let mut loghs = Vec::with_capacity(cfg.m);
        for _ in 0..cfg.m {
            let mut row = base.clone();
            let lh = draw_missing(&mut row, &missing, lambda, rng);
            rows.push(row);
            loghs.push(lh);
        }
        (rows, loghs)
    };
    for &i in &inc_units {
        let (rows, loghs) = draw_unit(i, &theta.lambda, &mut rng);
        for (row, lh) in rows.into_iter().zip(loghs) {
            state.x.push(row);
            state.a.push(d.a()[i] as f64);
            state.y.push(d.y()[i]);
            state.cls.push(class_of[i]);
            state.logh.push(lh);
        }
    }
    state.rebuild_designs(p);

    // Accelerated EM: each cycle takes two plain EM steps, extrapolates
    // along the observed parameter trajectory, and keeps the extrapolated
    // point only if it does not decrease the Monte Carlo observed
    // log-likelihood. The fixed points are exactly those of plain EM, and
    // the recorded log-likelihood sequence stays nondecreasing; the plain
    // EM rate near 50% missingness is otherwise impractically slow.
    // `max_iter` budgets M-step evaluations.
    let mut loglik_trace = Vec::new();
    let mut converged = false;
    let mut ess_refreshes = 0;
    let mut maps = 0usize;
    while maps < cfg.max_iter {
        let (ll0, degenerate) = e_step(&mut state, &theta);
        if !inc_units.is_empty() && degenerate * 10 > inc_units.len() {
            // proposal refresh: redraw degenerate-prone units from the
            // current covariate model
            ess_refreshes += 1;
            for (blk, &i) in inc_units.iter().enumerate() {
                let start = state.cc_rows + blk * cfg.m;
                let (rows, loghs) = draw_unit(i, &theta.lambda, &mut rng);
                for (j, (row, lh)) in rows.into_iter().zip(loghs).enumerate() {
                    state.x[start + j] = row;
                    state.logh[start + j] = lh;
                    state.w[start + j] = 1.0 / cfg.m as f64;
                }
            }
            state.rebuild_designs(p);
            continue;
        }
        loglik_trace.push(ll0);
        let p0 = theta.pack();
        let mut th1 = theta.clone();
        m_step(&state, spec, k, p, &mut th1)?;
        maps += 1;
        let p1 = th1.pack();
        if maxabs_diff(&p1, &p0) < cfg.tol {
            theta = th1;
            converged = true;
            break;
        }
        let (ll1, _) = e_step(&mut state, &th1);
        loglik_trace.push(ll1);
        let mut th2 = th1.clone();
        m_step(&state, spec, k, p, &mut th2)?;
        maps += 1;
        let p2 = th2.pack();
        if maxabs_diff(&p2, &p1) < cfg.tol {
            theta = th2;
            converged = true;
            break;
        }
        let r: Vec<f64> = p1.iter().zip(&p0).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = p2.iter().zip(&p1).zip(&r).map(|((a, b), c)| a - b - c).collect();
        let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut accepted = false;
        if vn > 0.0 {
            // back-track an overshooting extrapolation toward alpha = -1
            // (plain double EM step) instead of discarding the cycle;
            // candidate evaluations cost one cheap E step each
            let mut alpha = (-(rn / vn)).min(-1.0);
            for _ in 0..6 {
                let cand: Vec<f64> = (0..p0.len())
                    .map(|i| p0[i] - 2.0 * alpha * r[i] + alpha * alpha * v[i])
                    .collect();
                let mut thc = th2.clone();
                if thc.unpack(&cand) {
                    let (llc, degc) = e_step(&mut state, &thc);
                    let degenerate_c = !inc_units.is_empty() && degc * 10 > inc_units.len();
                    if llc >= ll1 && !degenerate_c {
                        loglik_trace.push(llc);
                        m_step(&state, spec, k, p, &mut thc)?;
                        maps += 1;
                        theta = thc;
                        accepted = true;
                        break;
                    }
                }
                if alpha >= -1.0 {
                    break;
                }
                alpha = ((alpha - 1.0) / 2.0).max(-1.0);
            }
        }
        if !accepted {
            theta = th2;
        }
    }
    let iterations = loglik_trace.len();
    if !converged && !inc_units.is_empty() {
        return Err(Error::Estimation(format!(
            "fractional imputation did not converge in {} iterations; last loglik {:.4}",
            cfg.max_iter,
            loglik_trace.last().cloned().unwrap_or(f64::NAN)
        )));
    }
    Ok(FiFit { theta, state, loglik_trace, iterations, converged: true, ess_refreshes })
}

/// Average effect from a fitted model: weighted mean of the linear CATE
/// over the stacked pseudo-data, divided by the number of original units.
pub fn param_tau(fit: &FiFit, d: &Dataset) -> f64 {
    let s = &fit.state;
    let total: f64 = (0..s.x.len()).map(|r| s.w[r] * fit.theta.cate(&s.x[r])).sum();
    total / d.n() as f64
}

/// Observed-data log-likelihood of `theta` on the fit's fixed draws.
pub fn observed_loglik(theta: &ParamTheta, fit: &FiFit) -> f64 {
    let s = &fit.state;
    let mut ll = 0.0;
    for r in 0..s.cc_rows {
        ll += logf_z_row(&s.x[r], s.a[r], s.y[r], s.cls[r], theta);
    }
    for blk in 0..s.inc_units.len() {
        let start = s.cc_rows + blk * s.m;
        let mut mx = f64::NEG_INFINITY;
        let lw: Vec<f64> = (0..s.m)
            .map(|j| {
                let r = start + j;
                let v = logf_z_row(&s.x[r], s.a[r], s.y[r], s.cls[r], theta) - s.logh[r];
                mx = mx.max(v);
                v
            })
            .collect();
        let sum: f64 = lw.iter().map(|&v| (v - mx).exp()).sum();
        ll += mx + (sum / s.m as f64).ln();
    }
    ll
}

#[cfg(test)]
mod tests {
    use super::*;

    fn complete_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Vec::new();
        let mut y = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            let x1: f64 = StandardNormal.sample(&mut rng);
            let x2 = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let ai = if rng.random::<f64>() < glm::expit(0.3 - 0.5 * x1) { 1u8 } else { 0 };
            let eps: f64 = StandardNormal.sample(&mut rng);
            let yi = if ai == 1 { 1.0 + 2.0 * x1 + x2 } else { 0.5 + x1 } + eps;
            a.push(ai);
            y.push(yi);
            x.push(Some(x1));
            x.push(Some(x2));
        }
        Dataset::new(a, y, x, 2).unwrap()
    }

    #[test]
    fn no_missing_data_single_iteration_matches_direct_mle() {
        let d = complete_dataset(600, 41);
        let spec = ParamModelSpec::infer(&d);
        let cfg = FiConfig { m: 10, seed: 1, ..FiConfig::default() };
        let fit = fit_mle_fractional(&d, &spec, &cfg).unwrap();
        assert!(fit.iterations <= 2);
        assert!(fit.theta.eta.is_empty());
        // direct per-factor MLEs on the same data
        let n = d.n();
        let ones_x = DMatrix::from_fn(n, 3, |i, c| if c == 0 { 1.0 } else { d.x(i, c - 1).unwrap() });
        let a_f: Vec<f64> = d.a().iter().map(|&v| v as f64).collect();
        let w1 = vec![1.0; n];
        let alpha = glm::logistic_fit(&ones_x, &a_f, &w1, None, 100).unwrap();
        for (got, want) in fit.theta.alpha.iter().zip(&alpha) {
            assert!((got - want).abs() < 1e-6);
        }
        for arm in 0..2usize {
            let rows: Vec<usize> = (0..n).filter(|&i| d.a()[i] == arm as u8).collect();
            let xa = DMatrix::from_fn(rows.len(), 3, |r, c| ones_x[(rows[r], c)]);
            let ya: Vec<f64> = rows.iter().map(|&i| d.y()[i]).collect();
            let (coef, mse) = glm::wls(&xa, &ya, &vec![1.0; rows.len()]).unwrap();
            for (got, want) in fit.theta.beta[arm].iter().zip(&coef) {
                assert!((got - want).abs() < 1e-6);
            }
            assert!((fit.theta.sig2[arm] - mse).abs() < 1e-6);
        }
    }

    #[test]
    fn beta_equal_gives_zero_tau() {
        let d = complete_dataset(200, 42);
        let spec = ParamModelSpec::infer(&d);
        let cfg = FiConfig { m: 5, seed: 2, ..FiConfig::default() };
        let mut fit = fit_mle_fractional(&d, &spec, &cfg).unwrap();
        fit.theta.beta[1] = fit.theta.beta[0].clone();
        assert_eq!(param_tau(&fit, &d), 0.0);
    }

    #[test]
    fn no_missingness_tau_is_mean_cate() {
        let d = complete_dataset(300, 43);
        let spec = ParamModelSpec::infer(&d);
        let cfg = FiConfig { m: 5, seed: 3, ..FiConfig::default() };
        let fit = fit_mle_fractional(&d, &spec, &cfg).unwrap();
        let direct: f64 =
            (0..d.n()).map(|i| fit.theta.cate(&d.x_row(i))).sum::<f64>() / d.n() as f64;
        assert!((param_tau(&fit, &d) - direct).abs() < 1e-12);
    }

    #[test]
    fn spec_rejects_value_outside_bernoulli_support() {
        let d = Dataset::new(
            vec![0, 1, 0, 1],
            vec![0.0, 1.0, 2.0, 3.0],
            vec![Some(0.0), Some(1.0), Some(2.0), Some(0.0)],
            1,
        )
        .unwrap();
        let spec = ParamModelSpec { families: vec![CovFamily::Bernoulli { lo: 0.0, hi: 1.0 }] };
        assert!(spec.validate(&d).is_err());
    }

    #[test]
    fn missing_data_fit_runs_and_ascends() {
        // small MCAR-ish missingness on x1
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let base = complete_dataset(400, 45);
        let mut x = Vec::new();
        for i in 0..base.n() {
            let hide = rng.random::<f64>() < 0.3;
            x.push(if hide { None } else { Some(base.x(i, 0).unwrap()) });
            x.push(Some(base.x(i, 1).unwrap()));
        }
        let d = Dataset::new(base.a().to_vec(), base.y().to_vec(), x, 2).unwrap();
        let spec = ParamModelSpec::infer(&d);
        let cfg = FiConfig { m: 50, seed: 4, ..FiConfig::default() };
        let fit = fit_mle_fractional(&d, &spec, &cfg).unwrap();
        assert!(fit.converged);
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "loglik decreased: {} -> {}", w[0], w[1]);
        }
        // weights normalized per incomplete unit
        let s = &fit.state;
        for blk in 0..s.inc_units.len() {
            let start = s.cc_rows + blk * s.m;
            let total: f64 = (0..s.m).map(|j| s.w[start + j]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_point_when_started_at_truth_like_theta() {
        // with M=1 draws equal to the observed data (no missingness) and a
        // converged theta as init, the next iteration moves less than tol
        let d = complete_dataset(300, 46);
        let spec = ParamModelSpec::infer(&d);
        let cfg = FiConfig { m: 1, seed: 5, ..FiConfig::default() };
        let fit = fit_mle_fractional(&d, &spec, &cfg).unwrap();
        let cfg2 = FiConfig { m: 1, seed: 6, init: Some(fit.theta.clone()), ..FiConfig::default() };
        let fit2 = fit_mle_fractional(&d, &spec, &cfg2).unwrap();
        assert!(fit2.iterations <= 2);
        let p1 = fit.theta.pack();
        let p2 = fit2.theta.pack();
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
