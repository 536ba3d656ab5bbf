//! Constrained Hermite-series inversion of the missingness integral
//! equation.
//!
//! Pipeline per (incomplete pattern, arm): estimate the observable
//! conditional densities by kernel smoothing, project the unknown
//! pattern-probability ratio xi onto a Gaussian-weighted polynomial basis
//! in the standardized covariates, and solve a least-squares problem with
//! a quadratic smoothness constraint beta' Lambda beta <= B.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::data::{Dataset, Pattern, PatternIndex};
use crate::error::{Error, Result};
use crate::smooth::{cv_bandwidth, CvConfig, KdeModel, NwModel, RegKind, TuningStore};

/// Affine map taking covariates to mean zero, identity covariance.
#[derive(Debug, Clone)]
pub struct Standardizer {
    mu: Vec<f64>,
    sinv: DMatrix<f64>,
    /// True when a ridge was needed to invert the covariance.
    pub ridged: bool,
}

impl Standardizer {
    /// Fits on complete-case covariate rows; `sinv` is the inverse
    /// symmetric square root of the sample covariance, ridged by
    /// `1e-8 * trace / p` if an eigenvalue is not positive.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Standardizer> {
        let m = rows.len();
        if m < 2 {
            return Err(Error::InvalidArgument("need at least 2 complete cases".into()));
        }
        let p = rows[0].len();
        if m < p + 1 {
            return Err(Error::InvalidArgument(format!(
                "need at least p+1 = {} complete cases, got {m}",
                p + 1
            )));
        }
        let mu: Vec<f64> =
            (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m as f64).collect();
        let mut cov = DMatrix::<f64>::zeros(p, p);
        for r in rows {
            for i in 0..p {
                for j in 0..p {
                    cov[(i, j)] += (r[i] - mu[i]) * (r[j] - mu[j]);
                }
            }
        }
        cov /= m as f64 - 1.0;
        let mut eig = cov.clone().symmetric_eigen();
        let mut ridged = false;
        let floor = 1e-8 * cov.trace() / p as f64;
        for v in eig.eigenvalues.iter_mut() {
            if *v < floor {
                *v = floor;
                ridged = true;
            }
        }
        if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Numerical("covariance singular after ridge".into()));
        }
        let d_inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.powf(-0.5)));
        let sinv = &eig.eigenvectors * d_inv_sqrt * eig.eigenvectors.transpose();
        Ok(Standardizer { mu, sinv, ridged })
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let p = self.mu.len();
        assert_eq!(x.len(), p);
        let centered = DVector::from_fn(p, |i, _| x[i] - self.mu[i]);
        let z = &self.sinv * centered;
        z.iter().cloned().collect()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }
}

/// Gaussian-weighted monomial basis h^j(x) = exp(-x'x) x^{lambda_j}, with
/// multi-indices in graded lexicographic order.
#[derive(Debug, Clone, Serialize)]
pub struct HermiteBasis {
    p: usize,
    indices: Vec<Vec<u32>>,
}

/// All p-tuples of the given degree, lexicographic.
fn tuples_of_degree(p: usize, deg: u32, out: &mut Vec<Vec<u32>>) {
    fn rec(prefix: &mut Vec<u32>, rem: u32, left: usize, out: &mut Vec<Vec<u32>>) {
        if left == 1 {
            let mut t = prefix.clone();
            t.push(rem);
            out.push(t);
            return;
        }
        for v in 0..=rem {
            prefix.push(v);
            rec(prefix, rem - v, left - 1, out);
            prefix.pop();
        }
    }
    rec(&mut Vec::new(), deg, p, out);
}

impl HermiteBasis {
    pub fn new(j: usize, p: usize) -> HermiteBasis {
        assert!(j >= 1 && p >= 1);
        let mut indices = Vec::new();
        let mut deg = 0;
        while indices.len() < j {
            tuples_of_degree(p, deg, &mut indices);
            deg += 1;
        }
        indices.truncate(j);
        HermiteBasis { p, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn indices(&self) -> &[Vec<u32>] {
        &self.indices
    }

    pub fn eval(&self, xt: &[f64]) -> Vec<f64> {
        assert_eq!(xt.len(), self.p);
        let e = (-xt.iter().map(|v| v * v).sum::<f64>()).exp();
        self.indices
            .iter()
            .map(|lam| {
                let mono: f64 =
                    lam.iter().zip(xt).map(|(&pw, &x)| x.powi(pw as i32)).product();
                e * mono
            })
            .collect()
    }
}

/// D^lam applied to exp(-x'x) x^mono: the polynomial part as a map from
/// monomial to coefficient (the exp factor is carried implicitly).
fn deriv_terms(mono: &[u32], lam: &[u32]) -> BTreeMap<Vec<u32>, f64> {
    let mut terms: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    terms.insert(mono.to_vec(), 1.0);
    for (axis, &k) in lam.iter().enumerate() {
        for _ in 0..k {
            let mut new: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
            for (mo, &c) in &terms {
                // d/dx_l [e^{-x'x} x^mu] = e^{-x'x} (mu_l x^{mu-e_l} - 2 x^{mu+e_l})
                if mo[axis] > 0 {
                    let mut lo = mo.clone();
                    lo[axis] -= 1;
                    *new.entry(lo).or_insert(0.0) += c * mo[axis] as f64;
                }
                let mut hi = mo.clone();
                hi[axis] += 1;
                *new.entry(hi).or_insert(0.0) += -2.0 * c;
            }
            terms = new;
        }
    }
    terms
}

/// Gauss-Hermite nodes and weights for weight exp(-t^2), by eigen
/// decomposition of the Jacobi matrix.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let v = (k as f64 / 2.0).sqrt();
        jac[(k - 1, k)] = v;
        jac[(k, k - 1)] = v;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let w = std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2);
            (eig.eigenvalues[i], w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Smoothness penalty matrix and the parameters that produced it.
#[derive(Debug, Clone)]
pub struct RegularizerMatrix {
    pub lambda: DMatrix<f64>,
    pub order: u32,
    pub delta0: u32,
}

/// Assembles Lambda = sum over |lam| <= order of
/// `int D^lam H (D^lam H)' (1 + x'x)^delta0 dx`.
///
/// Tensor Gauss-Hermite quadrature with `nodes` points per dimension for
/// p <= 3; Monte Carlo with 10^5 importance-reweighted Gaussian draws
/// above. `delta0` defaults to `ceil(p/2) + 1` when `None`.
pub fn compute_lambda(
    basis: &HermiteBasis,
    order: u32,
    delta0: Option<u32>,
    nodes: usize,
) -> Result<RegularizerMatrix> {
    let p = basis.p();
    let delta0 = delta0.unwrap_or((p as u32).div_ceil(2) + 1);
    if (delta0 as f64) <= p as f64 / 2.0 {
        return Err(Error::InvalidArgument(format!("delta0 must exceed p/2 = {}", p as f64 / 2.0)));
    }
    let (points, weights): (Vec<Vec<f64>>, Vec<f64>) = if p <= 3 {
        // tensor grid; substitution x = t / sqrt(2) absorbs exp(-2 x'x)
        let (t, w) = gauss_hermite(nodes);
        let total = nodes.pow(p as u32);
        let mut pts = Vec::with_capacity(total);
        let mut wts = Vec::with_capacity(total);
        for flat in 0..total {
            let mut idx = flat;
            let mut x = vec![0.0; p];
            let mut wt = 1.0;
            for j in (0..p).rev() {
                let i = idx % nodes;
                idx /= nodes;
                x[j] = t[i] / std::f64::consts::SQRT_2;
                wt *= w[i];
            }
            pts.push(x);
            wts.push(wt / 2f64.powf(p as f64 / 2.0));
        }
        (pts, wts)
    } else {
        // draws from N(0, I/4); density q(x) = (pi/2)^{-p/2} exp(-2 x'x)
        let n_draws = 100_000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x4c414d42);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let scale = (std::f64::consts::PI / 2.0).powf(p as f64 / 2.0) / n_draws as f64;
        let pts: Vec<Vec<f64>> =
            (0..n_draws).map(|_| (0..p).map(|_| normal.sample(&mut rng)).collect()).collect();
        (pts, vec![scale; n_draws])
    };
    let j = basis.len();
    let mut lams: Vec<Vec<u32>> = Vec::new();
    for d in 0..=order {
        tuples_of_degree(p, d, &mut lams);
    }
    let poly_w: Vec<f64> = points
        .iter()
        .zip(&weights)
        .map(|(x, &w)| w * (1.0 + x.iter().map(|v| v * v).sum::<f64>()).powi(delta0 as i32))
        .collect();
    let mut lambda = DMatrix::<f64>::zeros(j, j);
    for lam in &lams {
        // polynomial part of D^lam h_j on the grid (exp factors absorbed
        // into the quadrature weight)
        let mut vals = DMatrix::<f64>::zeros(points.len(), j);
        for (col, mono) in basis.indices().iter().enumerate() {
            let terms = deriv_terms(mono, lam);
            for (row, x) in points.iter().enumerate() {
                let mut v = 0.0;
                for (mo, &c) in &terms {
                    let m: f64 =
                        mo.iter().zip(x).map(|(&pw, &xi)| xi.powi(pw as i32)).product();
                    v += c * m;
                }
                vals[(row, col)] = v;
            }
        }
        for r in 0..j {
            for c in r..j {
                let s: f64 = (0..points.len())
                    .map(|i| vals[(i, r)] * vals[(i, c)] * poly_w[i])
                    .sum();
                lambda[(r, c)] += s;
                if r != c {
                    lambda[(c, r)] += s;
                }
            }
        }
    }
    // exact symmetrization against accumulation-order noise
    let lambda = (&lambda + lambda.transpose()) * 0.5;
    if lambda.clone().cholesky().is_none() {
        return Err(Error::Numerical("regularizer matrix not positive definite".into()));
    }
    Ok(RegularizerMatrix { lambda, order, delta0 })
}

/// Minimizes `||y - D beta||^2` subject to `beta' Lambda beta <= B`.
///
/// Returns the solution and the Lagrange multiplier (0 when the
/// unconstrained solution is feasible). On the constraint boundary the
/// multiplier is found by bisection, using the monotonicity of
/// `beta(mu)' Lambda beta(mu)` in mu.
pub fn constrained_lsq(
    d: &DMatrix<f64>,
    y: &DVector<f64>,
    lam: &DMatrix<f64>,
    b: f64,
) -> Result<(DVector<f64>, f64)> {
    if b <= 0.0 {
        return Err(Error::InvalidArgument("constraint bound must be positive".into()));
    }
    let j = d.ncols();
    if y.len() != d.nrows() || lam.nrows() != j || lam.ncols() != j {
        return Err(Error::DimensionMismatch { expected: j, got: lam.nrows() });
    }
    let dtd = d.transpose() * d;
    let dty = d.transpose() * y;
    let solve = |mu: f64| -> Result<DVector<f64>> {
        let mut g = &dtd + lam * mu;
        if mu == 0.0 {
            for i in 0..j {
                g[(i, i)] += 1e-10;
            }
        }
        g.cholesky()
            .map(|ch| ch.solve(&dty))
            .ok_or_else(|| Error::Numerical("normal equations not positive definite".into()))
    };
    let quad = |beta: &DVector<f64>| -> f64 { (beta.transpose() * lam * beta)[(0, 0)] };
    let beta = solve(0.0)?;
    if quad(&beta) <= b {
        return Ok((beta, 0.0));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut iter = 0;
    loop {
        let bh = solve(hi)?;
        if quad(&bh) <= b {
            break;
        }
        hi *= 2.0;
        iter += 1;
        if iter > 200 || hi > 1e18 {
            return Err(Error::Numerical(format!(
                "failed to bracket the constraint multiplier; mu reached {hi}"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let bm = solve(mid)?;
        let q = quad(&bm);
        if q > b {
            lo = mid;
        } else {
            hi = mid;
        }
        if (q - b).abs() < 1e-13 * b {
            break;
        }
    }
    let beta = solve(hi)?;
    Ok((beta, hi))
}

/// Settings for the series fit.
#[derive(Debug, Clone)]
pub struct SeriesConfig {
    /// Basis size.
    pub j: usize,
    /// Smoothness bound B.
    pub bound: f64,
    /// Regularizer derivative order (m + m0).
    pub order: u32,
    /// Tail weight; `None` means `ceil(p/2) + 1`.
    pub delta0: Option<u32>,
    /// Gauss-Hermite nodes per dimension.
    pub quad_nodes: usize,
    /// Bandwidth CV settings for the density targets and design columns.
    pub cv: CvConfig,
    /// Lower clip for the fitted response probability.
    pub clip_floor: f64,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        SeriesConfig {
            j: 5,
            bound: 50.0,
            order: 2,
            delta0: None,
            quad_nodes: 20,
            cv: CvConfig::default(),
            clip_floor: 0.01,
        }
    }
}

/// One solved system: coefficients for xi_ra on the basis.
#[derive(Debug, Clone, Serialize)]
pub struct XiFit {
    pub beta: Vec<f64>,
    /// Residual sum of squares at the solution.
    pub objective: f64,
    pub multiplier: f64,
    pub constraint_active: bool,
}

/// Fitted series model for one treatment arm: xi coefficients per
/// incomplete pattern, plus everything needed to evaluate them.
#[derive(Debug)]
pub struct XiModel {
    pub arm: u8,
    pub basis: HermiteBasis,
    pub standardizer: Standardizer,
    pub bound: f64,
    pub clip_floor: f64,
    pub fits: BTreeMap<Pattern, XiFit>,
    /// Number of response-probability evaluations that hit a clip bound.
    pub clip_events: AtomicUsize,
}

impl XiModel {
    /// xi_ra(x) for one pattern, clipped below at 0.
    pub fn xi(&self, pat: &Pattern, x: &[f64]) -> f64 {
        let fit = &self.fits[pat];
        let h = self.basis.eval(&self.standardizer.transform(x));
        h.iter().zip(&fit.beta).map(|(hv, bv)| hv * bv).sum::<f64>().max(0.0)
    }

    /// Estimated P(R = 1_p | A = arm, X = x), clipped to `[clip_floor, 1]`.
    pub fn response_prob(&self, x: &[f64]) -> f64 {
        if self.fits.is_empty() {
            return 1.0;
        }
        let h = self.basis.eval(&self.standardizer.transform(x));
        let xi_sum: f64 = self
            .fits
            .values()
            .map(|fit| {
                h.iter().zip(&fit.beta).map(|(hv, bv)| hv * bv).sum::<f64>().max(0.0)
            })
            .sum();
        let raw = 1.0 / (1.0 + xi_sum);
        let clipped = raw.clamp(self.clip_floor, 1.0);
        if clipped != raw {
            self.clip_events.fetch_add(1, Ordering::Relaxed);
        }
        clipped
    }
}

/// The smoothing coordinates of unit `i` under pattern `r`: observed
/// covariates (in `obs` order) followed by the outcome.
fn z_obs(d: &Dataset, i: usize, obs: &[usize]) -> Vec<f64> {
    let mut z: Vec<f64> = obs.iter().map(|&j| d.x(i, j).expect("observed column")).collect();
    z.push(d.y()[i]);
    z
}

/// Conditional-expectation design column: Nadaraya-Watson regression of
/// h^j(X-tilde) on (X_obs-under-r, Y), trained on arm-`a` complete cases,
/// evaluated at `eval_units`. Every eval unit must observe the columns of
/// `obs`.
pub fn estimate_h(
    basis: &HermiteBasis,
    j: usize,
    obs: &[usize],
    a: u8,
    d: &Dataset,
    std: &Standardizer,
    cv: &CvConfig,
    eval_units: &[usize],
) -> Result<Vec<f64>> {
    let idx = PatternIndex::build(d);
    let cc: Vec<usize> =
        idx.complete_units().iter().cloned().filter(|&i| d.a()[i] == a).collect();
    if cc.is_empty() {
        return Err(Error::Estimation(format!("no complete cases in arm {a}")));
    }
    let inputs: Vec<Vec<f64>> = cc.iter().map(|&i| z_obs(d, i, obs)).collect();
    let targets: Vec<f64> = cc
        .iter()
        .map(|&i| basis.eval(&std.transform(&d.x_row(i)))[j])
        .collect();
    let bw = cv_bandwidth(&inputs, Some(&targets), cv, RegKind::NadarayaWatson)?;
    let model = NwModel::fit(inputs, targets, bw)?;
    Ok(eval_units.iter().map(|&i| model.eval(&z_obs(d, i, obs))).collect())
}

/// Fits the series model for one arm: one constrained least-squares system
/// per incomplete pattern present in that arm.
pub fn fit_xi(d: &Dataset, a: u8, cfg: &SeriesConfig) -> Result<XiModel> {
    let idx = PatternIndex::build(d);
    let cc_all = idx.complete_units();
    if cc_all.is_empty() {
        return Err(Error::Estimation("no complete cases".into()));
    }
    let std = Standardizer::fit(&cc_all.iter().map(|&i| d.x_row(i)).collect::<Vec<_>>())?;
    let basis = HermiteBasis::new(cfg.j, d.p());
    let reg = compute_lambda(&basis, cfg.order, cfg.delta0, cfg.quad_nodes)?;
    let mut tuning = TuningStore::default();
    fit_xi_with(d, a, cfg, &idx, std, basis, &reg, &mut tuning)
}

/// Scale applied to the quadrature regularizer inside the stage-1 fit.
pub const XI_LAMBDA_SCALE: f64 = 10.0 / 3.0;

/// Same as [`fit_xi`] but with the standardizer, basis, regularizer, and
/// bandwidth store supplied, so they can be shared between arms and frozen
/// across bootstrap replicates.
#[allow(clippy::too_many_arguments)]
pub fn fit_xi_with(
    d: &Dataset,
    a: u8,
    cfg: &SeriesConfig,
    idx: &PatternIndex,
    std: Standardizer,
    basis: HermiteBasis,
    reg: &RegularizerMatrix,
    tuning: &mut TuningStore,
) -> Result<XiModel> {
    let arm_units: Vec<usize> = (0..d.n()).filter(|&i| d.a()[i] == a).collect();
    let n_a = arm_units.len();
    if n_a == 0 {
        return Err(Error::Estimation(format!("arm {a} is empty")));
    }
    let cc: Vec<usize> =
        idx.complete_units().iter().cloned().filter(|&i| d.a()[i] == a).collect();
    if cc.is_empty() {
        return Err(Error::Estimation(format!("no complete cases in arm {a}")));
    }
    let pr_1 = cc.len() as f64 / n_a as f64;
    // normalization of the smoothness functional relative to the raw
    // quadrature value of Lambda; calibrated on the built-in scenarios so
    // that the default B = 50 keeps the constraint active where the
    // unconstrained stage-1 solution is visibly noise-inflated
    let lam = &reg.lambda * XI_LAMBDA_SCALE;
    let mut fits = BTreeMap::new();
    for pat in idx.incomplete_patterns() {
        let grp: Vec<usize> =
            idx.group(&pat).iter().cloned().filter(|&i| d.a()[i] == a).collect();
        if grp.is_empty() {
            continue;
        }
        let obs = pat.obs_idx();
        // objective units: arm members whose own pattern observes every
        // column this pattern observes (their z-coordinates exist)
        let eval_units: Vec<usize> = arm_units
            .iter()
            .cloned()
            .filter(|&i| obs.iter().all(|&j| d.r(i, j) == 1))
            .collect();
        let pr_r = grp.len() as f64 / n_a as f64;
        let z_r: Vec<Vec<f64>> = grp.iter().map(|&i| z_obs(d, i, &obs)).collect();
        let z_1: Vec<Vec<f64>> = cc.iter().map(|&i| z_obs(d, i, &obs)).collect();
        let bw_r = tuning.select(&format!("xi/{pat}/{a}/density_r"), || {
            cv_bandwidth(&z_r, None, &cfg.cv, RegKind::NadarayaWatson)
        })?;
        let bw_1 = tuning.select(&format!("xi/{pat}/{a}/density_1"), || {
            cv_bandwidth(&z_1, None, &cfg.cv, RegKind::NadarayaWatson)
        })?;
        let f_r = KdeModel::fit(z_r, bw_r)?;
        let f_1 = KdeModel::fit(z_1.clone(), bw_1)?;
        let target = DVector::from_fn(eval_units.len(), |row, _| {
            f_r.eval(&z_obs(d, eval_units[row], &obs)) * pr_r
        });
        let f1v: Vec<f64> =
            eval_units.iter().map(|&i| f_1.eval(&z_obs(d, i, &obs)) * pr_1).collect();
        let mut design = DMatrix::<f64>::zeros(eval_units.len(), basis.len());
        for j in 0..basis.len() {
            let targets: Vec<f64> = cc
                .iter()
                .map(|&i| basis.eval(&std.transform(&d.x_row(i)))[j])
                .collect();
            let bw = tuning.select(&format!("xi/{pat}/{a}/h{j}"), || {
                cv_bandwidth(&z_1, Some(&targets), &cfg.cv, RegKind::NadarayaWatson)
            })?;
            let model = NwModel::fit(z_1.clone(), targets, bw)?;
            for (row, &i) in eval_units.iter().enumerate() {
                design[(row, j)] = model.eval(&z_obs(d, i, &obs)) * f1v[row];
            }
        }
        let (beta, mult) = constrained_lsq(&design, &target, &lam, cfg.bound)?;
        let resid = (&design * &beta - &target).norm_squared();
        fits.insert(
            pat,
            XiFit {
                beta: beta.iter().cloned().collect(),
                objective: resid,
                multiplier: mult,
                constraint_active: mult > 0.0,
            },
        );
    }
    Ok(XiModel {
        arm: a,
        basis,
        standardizer: std,
        bound: cfg.bound,
        clip_floor: cfg.clip_floor,
        fits,
        clip_events: AtomicUsize::new(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standardizer_identity_on_standard_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<Vec<f64>> =
            (0..20000).map(|_| vec![normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
        let s = Standardizer::fit(&rows).unwrap();
        assert!(s.mu()[0].abs() < 0.05 && s.mu()[1].abs() < 0.05);
        let z = s.transform(&[1.0, 0.0]);
        assert!((z[0] - (1.0 - s.mu()[0])).abs() < 0.05);
        assert!(z[1].abs() < 0.05);
    }

    #[test]
    fn standardizer_inverts_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 1.0).unwrap();
        // x = c + L z with lower-triangular L
        let c = [2.0, -1.0];
        let l = [[1.5, 0.0], [0.7, 0.4]];
        let mut zs = Vec::new();
        let rows: Vec<Vec<f64>> = (0..50000)
            .map(|_| {
                let z = [normal.sample(&mut rng), normal.sample(&mut rng)];
                zs.push(z);
                vec![c[0] + l[0][0] * z[0], c[1] + l[1][0] * z[0] + l[1][1] * z[1]]
            })
            .collect();
        let s = Standardizer::fit(&rows).unwrap();
        // standardized values must have mean ~0 and identity covariance;
        // the symmetric square root is a rotation of L^-1, so check moments
        let m = rows.len();
        let mut mean = [0.0; 2];
        let mut cov = [[0.0; 2]; 2];
        let transformed: Vec<Vec<f64>> = rows.iter().map(|r| s.transform(r)).collect();
        for t in &transformed {
            mean[0] += t[0];
            mean[1] += t[1];
        }
        mean[0] /= m as f64;
        mean[1] /= m as f64;
        for t in &transformed {
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += (t[i] - mean[i]) * (t[j] - mean[j]);
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] /= m as f64 - 1.0;
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((cov[i][j] - want).abs() < 1e-6, "cov[{i}][{j}] = {}", cov[i][j]);
            }
        }
    }

    #[test]
    fn standardizer_scenario_a_marginal_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(1.0, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..100000).map(|_| vec![normal.sample(&mut rng)]).collect();
        let s = Standardizer::fit(&rows).unwrap();
        assert!((s.mu()[0] - 1.0).abs() < 0.02);
    }

    #[test]
    fn basis_at_origin() {
        let b = HermiteBasis::new(6, 2);
        let v = b.eval(&[0.0, 0.0]);
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn basis_p1_closed_form() {
        let b = HermiteBasis::new(3, 1);
        let v = b.eval(&[1.0]);
        let e = (-1.0f64).exp();
        for &x in &v {
            assert_relative_eq!(x, e, epsilon = 1e-15);
        }
    }

    #[test]
    fn basis_gaussian_decay() {
        let b = HermiteBasis::new(10, 2);
        let big = 10.0 / 2f64.sqrt();
        let v = b.eval(&[big, big]);
        assert!(v.iter().all(|&x| x.abs() < 1e-40));
    }

    #[test]
    fn basis_ordering_deterministic_and_graded() {
        let b1 = HermiteBasis::new(12, 3);
        let b2 = HermiteBasis::new(12, 3);
        assert_eq!(b1.indices(), b2.indices());
        assert_eq!(b1.indices()[0], vec![0, 0, 0]);
        let degs: Vec<u32> = b1.indices().iter().map(|t| t.iter().sum()).collect();
        assert!(degs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn lambda_scalar_matches_quadrature_oracle() {
        // order=0, J=1, p=1, delta0=1:
        // int e^{-2x^2} (1+x^2) dx = sqrt(pi/2) * (1 + 1/4)
        let b = HermiteBasis::new(1, 1);
        let reg = compute_lambda(&b, 0, Some(1), 20).unwrap();
        let want = (std::f64::consts::PI / 2.0).sqrt() * 1.25;
        assert_relative_eq!(reg.lambda[(0, 0)], want, epsilon = 1e-8);
    }

    #[test]
    fn lambda_symmetric_and_odd_cross_terms_vanish() {
        let b = HermiteBasis::new(4, 1);
        let reg = compute_lambda(&b, 2, None, 20).unwrap();
        let lam = &reg.lambda;
        assert!((lam - lam.transpose()).norm() < 1e-12);
        // entries pairing odd and even total degree integrate an odd
        // function over a symmetric grid
        for r in 0..4 {
            for c in 0..4 {
                if (r + c) % 2 == 1 {
                    assert!(lam[(r, c)].abs() < 1e-8, "lam[({r},{c})] = {}", lam[(r, c)]);
                }
            }
        }
    }

    #[test]
    fn lambda_rejects_small_delta0() {
        let b = HermiteBasis::new(2, 2);
        assert!(compute_lambda(&b, 2, Some(1), 10).is_err());
    }

    #[test]
    fn constrained_lsq_interior() {
        let d = DMatrix::<f64>::identity(4, 4);
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0]);
        let lam = DMatrix::<f64>::identity(4, 4);
        let (beta, mu) = constrained_lsq(&d, &y, &lam, 100.0).unwrap();
        assert_eq!(mu, 0.0);
        assert!((beta - y).norm() < 1e-8);
    }

    #[test]
    fn constrained_lsq_ball_projection() {
        let d = DMatrix::<f64>::identity(3, 3);
        let y = DVector::from_vec(vec![3.0, 4.0, 0.0]);
        let lam = DMatrix::<f64>::identity(3, 3);
        let b = 4.0;
        let (beta, mu) = constrained_lsq(&d, &y, &lam, b).unwrap();
        let want = &y * (b.sqrt() / y.norm());
        assert!((beta - want).norm() < 1e-10, "mu = {mu}");
        assert!(mu > 0.0);
    }

    #[test]
    fn constrained_lsq_kkt_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let d = DMatrix::<f64>::from_fn(50, 5, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let y = DVector::<f64>::from_fn(50, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let a = DMatrix::<f64>::from_fn(5, 5, |_, _| rng.random::<f64>() - 0.5);
            let lam = &a * a.transpose() + DMatrix::identity(5, 5) * 0.1;
            let b = 0.5;
            let (beta, mu) = constrained_lsq(&d, &y, &lam, b).unwrap();
            let q = (beta.transpose() * &lam * &beta)[(0, 0)];
            assert!(q <= b * (1.0 + 1e-8));
            let kkt = (d.transpose() * (&d * &beta - &y) + &lam * &beta * mu).norm();
            assert!(kkt < 1e-6, "kkt residual {kkt}");
            assert!((mu * (q - b)).abs() < 1e-6);
        }
    }

    #[test]
    fn objective_nonincreasing_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = DMatrix::<f64>::from_fn(40, 4, |_, _| rng.random::<f64>());
        let y = DVector::<f64>::from_fn(40, |_, _| rng.random::<f64>() * 10.0);
        let lam = DMatrix::<f64>::identity(4, 4);
        let mut prev = f64::INFINITY;
        for b in [0.01, 0.1, 1.0, 10.0] {
            let (beta, _) = constrained_lsq(&d, &y, &lam, b).unwrap();
            let obj = (&d * &beta - &y).norm_squared();
            assert!(obj <= prev + 1e-9);
            prev = obj;
        }
    }

    fn toy_model(fits: BTreeMap<Pattern, XiFit>) -> XiModel {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 3.0]).collect();
        XiModel {
            arm: 0,
            basis: HermiteBasis::new(1, 1),
            standardizer: Standardizer::fit(&rows).unwrap(),
            bound: 50.0,
            clip_floor: 0.01,
            fits,
            clip_events: AtomicUsize::new(0),
        }
    }

    #[test]
    fn response_prob_empty_model_is_one() {
        let m = toy_model(BTreeMap::new());
        assert_eq!(m.response_prob(&[0.4]), 1.0);
        assert_eq!(m.response_prob(&[100.0]), 1.0);
    }

    #[test]
    fn response_prob_unit_xi_is_half() {
        // a single fit whose xi evaluates to exactly 1 at the query point:
        // beta = 1 / h_1(x~) with lambda_1 = 0
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 3.0]).collect();
        let std = Standardizer::fit(&rows).unwrap();
        let basis = HermiteBasis::new(1, 1);
        let x = vec![0.9];
        let h = basis.eval(&std.transform(&x))[0];
        let mut fits = BTreeMap::new();
        fits.insert(
            Pattern::new(vec![0]),
            XiFit { beta: vec![1.0 / h], objective: 0.0, multiplier: 0.0, constraint_active: false },
        );
        let m = XiModel {
            arm: 0,
            basis,
            standardizer: std,
            bound: 50.0,
            clip_floor: 0.01,
            fits,
            clip_events: AtomicUsize::new(0),
        };
        assert_relative_eq!(m.response_prob(&x), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn response_prob_clip_counted() {
        let m = toy_model(BTreeMap::new());
        assert_eq!(m.clip_events.load(Ordering::Relaxed), 0);
        // far from the data every basis function vanishes: xi = 0, prob 1,
        // no clipping
        m.response_prob(&[1e6]);
        assert_eq!(m.clip_events.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn estimate_h_degenerates_at_training_points() {
        // fully observed pattern: regression of h^j on (X, Y) with a tiny
        // bandwidth reproduces h^j at the training points
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 40;
        let a: Vec<u8> = vec![1; n];
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0).collect();
        let x: Vec<Option<f64>> = (0..n).map(|_| Some(rng.random::<f64>() * 3.0)).collect();
        let d = Dataset::new(a, y, x, 1).unwrap();
        let std = Standardizer::fit(&(0..n).map(|i| d.x_row(i)).collect::<Vec<_>>()).unwrap();
        let basis = HermiteBasis::new(3, 1);
        let cv = CvConfig { folds: 5, grid: vec![0.001], seed: 0 };
        let units: Vec<usize> = (0..n).collect();
        let col = estimate_h(&basis, 2, &[0], 1, &d, &std, &cv, &units).unwrap();
        for (i, &v) in col.iter().enumerate() {
            let want = basis.eval(&std.transform(&d.x_row(i)))[2];
            assert!((v - want).abs() < 1e-6, "unit {i}: {v} vs {want}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn constrained_lsq_always_feasible(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = DMatrix::<f64>::from_fn(20, 3, |_, _| rng.random::<f64>() * 2.0);
            let y = DVector::<f64>::from_fn(20, |_, _| rng.random::<f64>() * 8.0);
            let lam = DMatrix::<f64>::identity(3, 3);
            let b = 0.3;
            let (beta, _) = constrained_lsq(&d, &y, &lam, b).unwrap();
            let q = (beta.transpose() * &lam * &beta)[(0, 0)];
            prop_assert!(q <= b * (1.0 + 1e-8));
        }
    }
}
