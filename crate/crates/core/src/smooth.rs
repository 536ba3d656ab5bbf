//! Kernel smoothers: product-Gaussian density estimation, Nadaraya-Watson
//! regression, a local-linear variant, and cross-validated bandwidths.
//!
//! All weights go through log-sum-exp so distant query points degrade to a
//! nearest-neighbor answer instead of 0/0.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_74;

fn check_dims(rows: &[Vec<f64>], bw: &[f64]) -> Result<usize> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let d = bw.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: rows.iter().map(|r| r.len()).find(|&l| l != d).unwrap_or(0) });
    }
    if bw.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
        return Err(Error::InvalidArgument("bandwidths must be positive".into()));
    }
    Ok(d)
}

/// Normal-reference bandwidth per dimension: `1.06 sd m^(-1/(4+d))`.
///
/// Degenerate dimensions get the 1e-6 floor on the standard deviation.
pub fn reference_bandwidth(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = rows.len();
    let d = rows[0].len();
    let rate = (m as f64).powf(-1.0 / (4.0 + d as f64));
    (0..d)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / m as f64;
            let var = if m > 1 {
                rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0)
            } else {
                0.0
            };
            1.06 * var.sqrt().max(1e-6) * rate
        })
        .collect()
}

/// Product-Gaussian kernel density estimate.
#[derive(Debug, Clone)]
pub struct KdeModel {
    points: Vec<Vec<f64>>,
    bw: Vec<f64>,
    log_norm: f64,
}

impl KdeModel {
    pub fn fit(points: Vec<Vec<f64>>, bw: Vec<f64>) -> Result<KdeModel> {
        check_dims(&points, &bw)?;
        let log_norm: f64 = bw.iter().map(|h| -LN_SQRT_2PI - h.ln()).sum();
        Ok(KdeModel { points, bw, log_norm })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bw
    }

    /// Density at `q`; strictly positive.
    pub fn eval(&self, q: &[f64]) -> f64 {
        assert_eq!(q.len(), self.bw.len(), "query dimension mismatch");
        let logs: Vec<f64> = self
            .points
            .iter()
            .map(|x| {
                let e: f64 = x
                    .iter()
                    .zip(q)
                    .zip(&self.bw)
                    .map(|((xi, qi), h)| {
                        let z = (qi - xi) / h;
                        -0.5 * z * z
                    })
                    .sum();
                e + self.log_norm
            })
            .collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
        (mx + (s / self.points.len() as f64).ln()).exp()
    }
}

/// Nadaraya-Watson regression with a product-Gaussian kernel.
#[derive(Debug, Clone)]
pub struct NwModel {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    bw: Vec<f64>,
}

impl NwModel {
    pub fn fit(inputs: Vec<Vec<f64>>, targets: Vec<f64>, bw: Vec<f64>) -> Result<NwModel> {
        check_dims(&inputs, &bw)?;
        if targets.len() != inputs.len() {
            return Err(Error::DimensionMismatch { expected: inputs.len(), got: targets.len() });
        }
        Ok(NwModel { inputs, targets, bw })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bw
    }

    /// Kernel-weighted mean of the targets at `q`.
    ///
    /// The max log weight is subtracted first, so the nearest training
    /// point always carries weight 1: far queries reduce to its target.
    pub fn eval(&self, q: &[f64]) -> f64 {
        assert_eq!(q.len(), self.bw.len(), "query dimension mismatch");
        let logs: Vec<f64> = self
            .inputs
            .iter()
            .map(|x| {
                x.iter()
                    .zip(q)
                    .zip(&self.bw)
                    .map(|((xi, qi), h)| {
                        let z = (qi - xi) / h;
                        -0.5 * z * z
                    })
                    .sum()
            })
            .collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut num = 0.0;
        let mut den = 0.0;
        for (l, t) in logs.iter().zip(&self.targets) {
            let w = (l - mx).exp();
            num += w * t;
            den += w;
        }
        if den < 1e-300 {
            // all weights underflowed even after centering; nearest neighbor
            let k = logs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            return self.targets[k];
        }
        num / den
    }
}

/// Local-linear regression with a product-Gaussian kernel.
///
/// Solves a weighted least-squares fit of `target ~ 1 + (x - q)` at each
/// query; the intercept is the prediction. Falls back to the kernel-weighted
/// mean when the local design is singular.
#[derive(Debug, Clone)]
pub struct LocalLinearModel {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    bw: Vec<f64>,
}

impl LocalLinearModel {
    pub fn fit(inputs: Vec<Vec<f64>>, targets: Vec<f64>, bw: Vec<f64>) -> Result<LocalLinearModel> {
        check_dims(&inputs, &bw)?;
        if targets.len() != inputs.len() {
            return Err(Error::DimensionMismatch { expected: inputs.len(), got: targets.len() });
        }
        Ok(LocalLinearModel { inputs, targets, bw })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bw
    }

    pub fn eval(&self, q: &[f64]) -> f64 {
        let d = self.bw.len();
        assert_eq!(q.len(), d, "query dimension mismatch");
        let logs: Vec<f64> = self
            .inputs
            .iter()
            .map(|x| {
                x.iter()
                    .zip(q)
                    .zip(&self.bw)
                    .map(|((xi, qi), h)| {
                        let z = (qi - xi) / h;
                        -0.5 * z * z
                    })
                    .sum()
            })
            .collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let k = d + 1;
        let mut g = nalgebra::DMatrix::<f64>::zeros(k, k);
        let mut b = nalgebra::DVector::<f64>::zeros(k);
        let mut row = vec![0.0; k];
        let mut wsum = 0.0;
        let mut w2sum = 0.0;
        for (i, l) in logs.iter().enumerate() {
            let w = (l - mx).exp();
            if w == 0.0 {
                continue;
            }
            wsum += w;
            w2sum += w * w;
            row[0] = 1.0;
            for j in 0..d {
                row[j + 1] = self.inputs[i][j] - q[j];
            }
            for r in 0..k {
                for c in 0..k {
                    g[(r, c)] += w * row[r] * row[c];
                }
                b[r] += w * row[r] * self.targets[i];
            }
        }
        // the local line extrapolates wildly when the kernel mass sits on
        // a couple of points; use the local mean there instead
        let ess = if w2sum > 0.0 { wsum * wsum / w2sum } else { 0.0 };
        let solved = if ess < 4.0 {
            None
        } else {
            // ridge scaled to each coordinate's curvature mass
            g[(0, 0)] += 1e-8 * wsum;
            for j in 0..d {
                g[(j + 1, j + 1)] += 1e-8 * wsum * self.bw[j] * self.bw[j];
            }
            g.clone().cholesky()
        };
        match solved {
            Some(ch) => ch.solve(&b)[0],
            None => {
                // weighted mean fallback
                let mut num = 0.0;
                let mut den = 0.0;
                for (l, t) in logs.iter().zip(&self.targets) {
                    let w = (l - mx).exp();
                    num += w * t;
                    den += w;
                }
                if den < 1e-300 {
                    let k = logs
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap();
                    self.targets[k]
                } else {
                    num / den
                }
            }
        }
    }
}

/// Cross-validation settings for bandwidth selection.
#[derive(Debug, Clone)]
pub struct CvConfig {
    /// Number of folds for regression CV; must be at least 2.
    pub folds: usize,
    /// Scale multipliers applied to the normal-reference bandwidth.
    pub grid: Vec<f64>,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 10,
            grid: vec![0.08, 0.15, 0.25, 0.4, 0.65, 1.0, 1.6],
            seed: 0,
        }
    }
}

impl CvConfig {
    fn validate(&self, m: usize) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidArgument("empty bandwidth grid".into()));
        }
        if self.folds < 2 || self.folds > m {
            return Err(Error::InvalidArgument(format!(
                "folds must be in [2, m={m}], got {}",
                self.folds
            )));
        }
        Ok(())
    }
}

/// Records selected bandwidths by key, and replays them when frozen.
///
/// Bootstrap replicates must reuse the tuning chosen on the original data;
/// an estimator run with a frozen store skips cross-validation for every
/// key already present.
#[derive(Debug, Clone, Default)]
pub struct TuningStore {
    map: std::collections::BTreeMap<String, Vec<f64>>,
    frozen: bool,
}

impl TuningStore {
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn get(&self, key: &str) -> Option<&Vec<f64>> {
        self.map.get(key)
    }

    /// Returns the stored bandwidths when frozen, otherwise computes,
    /// records, and returns them.
    pub fn select(
        &mut self,
        key: &str,
        compute: impl FnOnce() -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        if self.frozen {
            if let Some(v) = self.map.get(key) {
                return Ok(v.clone());
            }
        }
        let v = compute()?;
        self.map.insert(key.to_string(), v.clone());
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegKind {
    NadarayaWatson,
    LocalLinear,
}

/// Selects bandwidths by cross-validation.
///
/// With targets, minimizes held-out squared prediction error over
/// `cfg.folds` folds. Without targets, minimizes the least-squares CV
/// criterion for the density (closed form for the product-Gaussian kernel).
/// Either way the result is `multiplier * reference_bandwidth`.
pub fn cv_bandwidth(
    inputs: &[Vec<f64>],
    targets: Option<&[f64]>,
    cfg: &CvConfig,
    kind: RegKind,
) -> Result<Vec<f64>> {
    let m = inputs.len();
    if m == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let reference = reference_bandwidth(inputs);
    if cfg.grid.len() == 1 {
        return Ok(reference.iter().map(|h| h * cfg.grid[0]).collect());
    }
    match targets {
        Some(y) => {
            cfg.validate(m)?;
            if y.len() != m {
                return Err(Error::DimensionMismatch { expected: m, got: y.len() });
            }
            let mut order: Vec<usize> = (0..m).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            order.shuffle(&mut rng);
            let mut best = f64::INFINITY;
            let mut best_h = reference.clone();
            for &g in &cfg.grid {
                let h: Vec<f64> = reference.iter().map(|r| r * g).collect();
                let mut mse = 0.0;
                for f in 0..cfg.folds {
                    let test: Vec<usize> = order.iter().skip(f).step_by(cfg.folds).cloned().collect();
                    let mut in_test = vec![false; m];
                    for &i in &test {
                        in_test[i] = true;
                    }
                    let tr_x: Vec<Vec<f64>> =
                        (0..m).filter(|&i| !in_test[i]).map(|i| inputs[i].clone()).collect();
                    let tr_y: Vec<f64> = (0..m).filter(|&i| !in_test[i]).map(|i| y[i]).collect();
                    if tr_x.is_empty() {
                        continue;
                    }
                    match kind {
                        RegKind::NadarayaWatson => {
                            let model = NwModel::fit(tr_x, tr_y, h.clone())?;
                            for &i in &test {
                                let e = model.eval(&inputs[i]) - y[i];
                                mse += e * e;
                            }
                        }
                        RegKind::LocalLinear => {
                            let model = LocalLinearModel::fit(tr_x, tr_y, h.clone())?;
                            for &i in &test {
                                let e = model.eval(&inputs[i]) - y[i];
                                mse += e * e;
                            }
                        }
                    }
                }
                if mse < best {
                    best = mse;
                    best_h = h;
                }
            }
            Ok(best_h)
        }
        None => {
            // least-squares CV with leave-one-out closed forms
            let d = inputs[0].len();
            let mut best = f64::INFINITY;
            let mut best_h = reference.clone();
            for &g in &cfg.grid {
                let h: Vec<f64> = reference.iter().map(|r| r * g).collect();
                // int fhat^2 = m^-2 sum_{i,i'} prod_j phi(d_j/(sqrt2 h_j))/(sqrt2 h_j)
                let c2: f64 = h.iter().map(|hj| 2.0 * std::f64::consts::PI.sqrt() * hj).product();
                let c1: f64 = h.iter().map(|hj| (2.0 * std::f64::consts::PI).sqrt() * hj).product();
                let mut term1 = 0.0;
                let mut loo = 0.0;
                for i in 0..m {
                    let mut row_k = 0.0;
                    for i2 in 0..m {
                        let s: f64 = (0..d)
                            .map(|j| {
                                let z = (inputs[i][j] - inputs[i2][j]) / h[j];
                                z * z
                            })
                            .sum();
                        term1 += (-0.25 * s).exp() / c2;
                        if i2 != i {
                            row_k += (-0.5 * s).exp() / c1;
                        }
                    }
                    if m > 1 {
                        loo += row_k / (m as f64 - 1.0);
                    }
                }
                let val = term1 / (m as f64 * m as f64) - 2.0 * loo / m as f64;
                if val < best {
                    best = val;
                    best_h = h;
                }
            }
            Ok(best_h)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn kde_single_point_closed_form() {
        let m = KdeModel::fit(vec![vec![0.0]], vec![1.0]).unwrap();
        assert_relative_eq!(m.eval(&[0.0]), 1.0 / (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn kde_integrates_to_one() {
        let pts = vec![vec![-1.0], vec![0.3], vec![2.0], vec![0.7]];
        let m = KdeModel::fit(pts, vec![0.5]).unwrap();
        let (lo, hi) = (-1.0 - 8.0 * 0.5, 2.0 + 8.0 * 0.5);
        let steps = 4000;
        let dx = (hi - lo) / steps as f64;
        let integral: f64 = (0..steps).map(|i| m.eval(&[lo + (i as f64 + 0.5) * dx]) * dx).sum();
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
    }

    #[test]
    fn kde_symmetric_points() {
        let m = KdeModel::fit(vec![vec![-1.5], vec![1.5]], vec![0.7]).unwrap();
        for q in [0.2, 0.9, 3.0] {
            assert!((m.eval(&[q]) - m.eval(&[-q])).abs() < 1e-12);
        }
    }

    #[test]
    fn kde_rejects_bad_bandwidth() {
        assert!(KdeModel::fit(vec![vec![0.0]], vec![0.0]).is_err());
        assert!(KdeModel::fit(vec![vec![0.0]], vec![-1.0]).is_err());
        assert!(KdeModel::fit(vec![vec![0.0, 1.0]], vec![1.0]).is_err());
    }

    #[test]
    fn nw_single_point_and_constant_targets() {
        let m = NwModel::fit(vec![vec![0.0]], vec![3.5], vec![1.0]).unwrap();
        for q in [-100.0, 0.0, 42.0] {
            assert_eq!(m.eval(&[q]), 3.5);
        }
        let m = NwModel::fit(
            vec![vec![0.0], vec![1.0], vec![2.0]],
            vec![7.0, 7.0, 7.0],
            vec![0.3],
        )
        .unwrap();
        assert_relative_eq!(m.eval(&[1.2]), 7.0, epsilon = 1e-12);
    }

    #[test]
    fn nw_interpolation_limit() {
        let inputs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 5.0]).collect();
        let targets: Vec<f64> = inputs.iter().map(|x| 2.0 * x[0] + 1.0).collect();
        let m = NwModel::fit(inputs.clone(), targets.clone(), vec![1e-3]).unwrap();
        for (x, t) in inputs.iter().zip(&targets) {
            assert!((m.eval(x) - t).abs() < 1e-6);
        }
    }

    #[test]
    fn nw_far_query_nearest_neighbor() {
        let m = NwModel::fit(vec![vec![0.0], vec![10.0]], vec![1.0, 2.0], vec![0.1]).unwrap();
        assert_relative_eq!(m.eval(&[1e6]), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn loclin_recovers_linear_exactly() {
        let inputs: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 / 10.0, (i % 7) as f64]).collect();
        let targets: Vec<f64> = inputs.iter().map(|x| 1.5 - 2.0 * x[0] + 0.5 * x[1]).collect();
        let m = LocalLinearModel::fit(inputs, targets, vec![0.5, 1.0]).unwrap();
        // local-linear fits are exact on linear targets regardless of bandwidth
        assert_relative_eq!(m.eval(&[0.33, 2.0]), 1.5 - 2.0 * 0.33 + 1.0, epsilon = 1e-6);
    }

    #[test]
    fn cv_single_multiplier_is_reference_scaled() {
        let inputs: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 10.0]).collect();
        let cfg = CvConfig { folds: 5, grid: vec![0.37], seed: 1 };
        let h = cv_bandwidth(&inputs, None, &cfg, RegKind::NadarayaWatson).unwrap();
        let reference = reference_bandwidth(&inputs);
        assert_relative_eq!(h[0], 0.37 * reference[0], epsilon = 1e-12);
    }

    #[test]
    fn cv_deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs: Vec<Vec<f64>> = (0..80).map(|_| vec![rng.random::<f64>() * 4.0]).collect();
        let targets: Vec<f64> = inputs.iter().map(|x| (x[0]).sin() + rng.random::<f64>() * 0.1).collect();
        let cfg = CvConfig { folds: 10, grid: vec![0.2, 0.5, 1.0], seed: 5 };
        let h1 = cv_bandwidth(&inputs, Some(&targets), &cfg, RegKind::NadarayaWatson).unwrap();
        let h2 = cv_bandwidth(&inputs, Some(&targets), &cfg, RegKind::NadarayaWatson).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn cv_density_envelope_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                let u1: f64 = rng.random();
                let u2: f64 = rng.random();
                vec![(-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()]
            })
            .collect();
        let cfg = CvConfig { folds: 10, grid: vec![0.25, 0.4, 0.65, 1.0, 1.5, 2.0], seed: 0 };
        let h = cv_bandwidth(&inputs, None, &cfg, RegKind::NadarayaWatson).unwrap();
        let reference = reference_bandwidth(&inputs);
        let ratio = h[0] / reference[0];
        assert!((0.3..=3.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn cv_rejects_bad_config() {
        let inputs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let y = vec![0.0; 5];
        let cfg = CvConfig { folds: 10, grid: vec![0.5, 1.0], seed: 0 };
        assert!(cv_bandwidth(&inputs, Some(&y), &cfg, RegKind::NadarayaWatson).is_err());
        let cfg = CvConfig { folds: 2, grid: vec![], seed: 0 };
        assert!(cv_bandwidth(&inputs, Some(&y), &cfg, RegKind::NadarayaWatson).is_err());
    }

    proptest! {
        #[test]
        fn kde_nonnegative(pts in prop::collection::vec(-5.0f64..5.0, 1..20), q in -10.0f64..10.0) {
            let rows: Vec<Vec<f64>> = pts.iter().map(|&v| vec![v]).collect();
            let m = KdeModel::fit(rows, vec![0.8]).unwrap();
            prop_assert!(m.eval(&[q]) >= 0.0);
        }

        #[test]
        fn nw_convex_combination(
            pts in prop::collection::vec((-5.0f64..5.0, -3.0f64..3.0), 1..20),
            q in -10.0f64..10.0,
        ) {
            let rows: Vec<Vec<f64>> = pts.iter().map(|&(x, _)| vec![x]).collect();
            let y: Vec<f64> = pts.iter().map(|&(_, t)| t).collect();
            let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let m = NwModel::fit(rows, y, vec![0.5]).unwrap();
            let v = m.eval(&[q]);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn smoothers_permutation_invariant(
            pts in prop::collection::vec((-5.0f64..5.0, -3.0f64..3.0), 2..15),
            q in -6.0f64..6.0,
        ) {
            let rows: Vec<Vec<f64>> = pts.iter().map(|&(x, _)| vec![x]).collect();
            let y: Vec<f64> = pts.iter().map(|&(_, t)| t).collect();
            let mut rev_rows = rows.clone(); rev_rows.reverse();
            let mut rev_y = y.clone(); rev_y.reverse();
            let k1 = KdeModel::fit(rows.clone(), vec![0.7]).unwrap();
            let k2 = KdeModel::fit(rev_rows.clone(), vec![0.7]).unwrap();
            prop_assert!((k1.eval(&[q]) - k2.eval(&[q])).abs() < 1e-12);
            let n1 = NwModel::fit(rows, y, vec![0.7]).unwrap();
            let n2 = NwModel::fit(rev_rows, rev_y, vec![0.7]).unwrap();
            prop_assert!((n1.eval(&[q]) - n2.eval(&[q])).abs() < 1e-10);
        }
    }
}
