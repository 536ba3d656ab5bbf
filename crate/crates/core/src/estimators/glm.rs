//! Weighted generalized linear model fits used by the weighting baseline
//! and the fractional-imputation M-step: logistic, multinomial logistic,
//! and weighted least squares.
//!
//! Newton steps are clipped in max-norm at 5 so a near-separable slice
//! cannot send coefficients to infinity in one iteration.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn expit(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn clip_step(step: &mut DVector<f64>) {
    let m = step.amax();
    if m > 5.0 {
        *step *= 5.0 / m;
    }
}

/// Weighted logistic regression by Newton iterations.
///
/// `x` is the design (including any intercept column), `y` in {0,1},
/// `w >= 0`. Starts from `init` when given.
pub fn logistic_fit(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    init: Option<&[f64]>,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n || w.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len().min(w.len()) });
    }
    let mut b = match init {
        Some(v) => DVector::from_column_slice(v),
        None => DVector::zeros(p),
    };
    // row-major design copy for the accumulation loops
    let mut xr = vec![0.0; n * p];
    for i in 0..n {
        for c in 0..p {
            xr[i * p + c] = x[(i, c)];
        }
    }
    for _ in 0..max_iter {
        let mut g = DVector::zeros(p);
        let mut hu = vec![0.0; p * p];
        for i in 0..n {
            let row = &xr[i * p..(i + 1) * p];
            let mut z = 0.0;
            for a in 0..p {
                z += b[a] * row[a];
            }
            let mu = expit(z);
            let wi = w[i];
            let r = wi * (y[i] - mu);
            let v = wi * mu * (1.0 - mu);
            for a in 0..p {
                g[a] += row[a] * r;
                let va = v * row[a];
                let dst = &mut hu[a * p..a * p + p];
                for c in a..p {
                    dst[c] += va * row[c];
                }
            }
        }
        for a in 0..p {
            for c in 0..a {
                hu[a * p + c] = hu[c * p + a];
            }
        }
        let mut h = DMatrix::from_row_slice(p, p, &hu);
        for a in 0..p {
            h[(a, a)] += 1e-8;
        }
        let mut step = h
            .cholesky()
            .map(|ch| ch.solve(&g))
            .ok_or_else(|| Error::Numerical("logistic Hessian not positive definite".into()))?;
        clip_step(&mut step);
        b += &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    Ok(b.iter().cloned().collect())
}

/// Weighted log-likelihood of a logistic model (for score checks).
pub fn logistic_loglik(x: &DMatrix<f64>, y: &[f64], w: &[f64], beta: &[f64]) -> f64 {
    let b = DVector::from_column_slice(beta);
    let eta = x * b;
    (0..x.nrows())
        .map(|i| {
            let z = eta[i];
            // log sigma(z) = -log(1+e^{-z}), numerically stable both tails
            let lp = -(1.0 + (-z).exp()).ln().min(f64::MAX);
            let lq = -(1.0 + z.exp()).ln().min(f64::MAX);
            w[i] * (y[i] * lp + (1.0 - y[i]) * lq)
        })
        .sum()
}

/// Weighted score of a logistic model at `beta`.
pub fn logistic_score(x: &DMatrix<f64>, y: &[f64], w: &[f64], beta: &[f64]) -> Vec<f64> {
    let b = DVector::from_column_slice(beta);
    let eta = x * b;
    let mut g = vec![0.0; x.ncols()];
    for i in 0..x.nrows() {
        let r = w[i] * (y[i] - expit(eta[i]));
        for a in 0..x.ncols() {
            g[a] += x[(i, a)] * r;
        }
    }
    g
}

/// Weighted multinomial logistic regression with class 0 as reference.
///
/// `cls` holds class labels in `0..k`. Returns the (k-1) x p coefficient
/// rows for classes 1..k.
pub fn multinomial_fit(
    x: &DMatrix<f64>,
    cls: &[usize],
    w: &[f64],
    k: usize,
    init: Option<&[Vec<f64>]>,
    max_iter: usize,
) -> Result<Vec<Vec<f64>>> {
    let (n, p) = (x.nrows(), x.ncols());
    if k < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    let km1 = k - 1;
    let mut b = DMatrix::<f64>::zeros(km1, p);
    if let Some(rows) = init {
        for (r, row) in rows.iter().enumerate() {
            for c in 0..p {
                b[(r, c)] = row[c];
            }
        }
    }
    // row-major design copy: the hot loops below touch whole rows
    let mut xr = vec![0.0; n * p];
    for i in 0..n {
        for c in 0..p {
            xr[i * p + c] = x[(i, c)];
        }
    }
    let dim = km1 * p;
    let npair = p * (p + 1) / 2;
    let nblk = km1 * (km1 + 1) / 2;
    let mut probs = vec![0.0; km1];
    let mut vblk = vec![0.0; nblk];
    let mut xx = vec![0.0; npair];
    for _ in 0..max_iter {
        let mut g = DVector::<f64>::zeros(dim);
        // every (r, l) block of the Hessian is vkl * x x', so accumulate
        // one packed upper-triangle buffer per r <= l block and scatter
        // into the full matrix once after the row loop
        let mut hblk = vec![0.0; nblk * npair];
        for i in 0..n {
            let row = &xr[i * p..(i + 1) * p];
            let mut mx = 0.0f64;
            for r in 0..km1 {
                let mut e = 0.0;
                for c in 0..p {
                    e += b[(r, c)] * row[c];
                }
                probs[r] = e;
                mx = mx.max(e);
            }
            let denom =
                (-mx).exp() + probs.iter().map(|&e| (e - mx).exp()).sum::<f64>();
            for pr in probs.iter_mut() {
                *pr = (*pr - mx).exp() / denom;
            }
            let wi = w[i];
            let mut t = 0;
            for c1 in 0..p {
                for c2 in c1..p {
                    xx[t] = row[c1] * row[c2];
                    t += 1;
                }
            }
            let mut blk = 0;
            for r in 0..km1 {
                let yr = if cls[i] == r + 1 { 1.0 } else { 0.0 };
                let res = wi * (yr - probs[r]);
                for c in 0..p {
                    g[r * p + c] += res * row[c];
                }
                for l in r..km1 {
                    vblk[blk] = wi * probs[r] * (if r == l { 1.0 } else { 0.0 } - probs[l]);
                    blk += 1;
                }
            }
            for (blk, &vkl) in vblk.iter().enumerate() {
                if vkl == 0.0 {
                    continue;
                }
                let dst = &mut hblk[blk * npair..(blk + 1) * npair];
                for (d, &xv) in dst.iter_mut().zip(xx.iter()) {
                    *d += vkl * xv;
                }
            }
        }
        let mut h = vec![0.0; dim * dim];
        let mut blk = 0;
        for r in 0..km1 {
            for l in r..km1 {
                let src = &hblk[blk * npair..(blk + 1) * npair];
                blk += 1;
                let mut t = 0;
                for c1 in 0..p {
                    for c2 in c1..p {
                        let v = src[t];
                        t += 1;
                        h[(r * p + c1) * dim + l * p + c2] = v;
                        h[(r * p + c2) * dim + l * p + c1] = v;
                        if l > r {
                            h[(l * p + c2) * dim + r * p + c1] = v;
                            h[(l * p + c1) * dim + r * p + c2] = v;
                        }
                    }
                }
            }
        }
        let mut h = DMatrix::from_row_slice(dim, dim, &h);
        for a in 0..dim {
            h[(a, a)] += 1e-8;
        }
        let mut step = h
            .cholesky()
            .map(|ch| ch.solve(&g))
            .ok_or_else(|| Error::Numerical("multinomial Hessian not positive definite".into()))?;
        clip_step(&mut step);
        for r in 0..km1 {
            for c in 0..p {
                b[(r, c)] += step[r * p + c];
            }
        }
        if step.amax() < 1e-7 {
            break;
        }
    }
    Ok((0..km1).map(|r| (0..p).map(|c| b[(r, c)]).collect()).collect())
}

/// Weighted multinomial log-likelihood (class 0 reference).
pub fn multinomial_loglik(x: &DMatrix<f64>, cls: &[usize], w: &[f64], beta: &[Vec<f64>]) -> f64 {
    let mut ll = 0.0;
    for i in 0..x.nrows() {
        let etas: Vec<f64> = beta
            .iter()
            .map(|row| row.iter().enumerate().map(|(c, &b)| b * x[(i, c)]).sum())
            .collect();
        let mx = etas.iter().cloned().fold(0.0f64, f64::max);
        let logden =
            mx + ((-mx).exp() + etas.iter().map(|&e| (e - mx).exp()).sum::<f64>()).ln();
        let num = if cls[i] == 0 { 0.0 } else { etas[cls[i] - 1] };
        ll += w[i] * (num - logden);
    }
    ll
}

/// Weighted multinomial score at `beta`, flattened row-major.
pub fn multinomial_score(
    x: &DMatrix<f64>,
    cls: &[usize],
    w: &[f64],
    beta: &[Vec<f64>],
) -> Vec<f64> {
    let km1 = beta.len();
    let p = x.ncols();
    let mut g = vec![0.0; km1 * p];
    for i in 0..x.nrows() {
        let etas: Vec<f64> = beta
            .iter()
            .map(|row| row.iter().enumerate().map(|(c, &b)| b * x[(i, c)]).sum())
            .collect();
        let mx = etas.iter().cloned().fold(0.0f64, f64::max);
        let denom = (-mx).exp() + etas.iter().map(|&e| (e - mx).exp()).sum::<f64>();
        for r in 0..km1 {
            let pr = (etas[r] - mx).exp() / denom;
            let yr = if cls[i] == r + 1 { 1.0 } else { 0.0 };
            let res = w[i] * (yr - pr);
            for c in 0..p {
                g[r * p + c] += res * x[(i, c)];
            }
        }
    }
    g
}

/// Weighted least squares with a tiny ridge; returns coefficients and the
/// weighted mean squared residual.
pub fn wls(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (n, p) = (x.nrows(), x.ncols());
    let mut xr = vec![0.0; n * p];
    for i in 0..n {
        for c in 0..p {
            xr[i * p + c] = x[(i, c)];
        }
    }
    let mut gu = vec![0.0; p * p];
    let mut b = DVector::<f64>::zeros(p);
    for i in 0..n {
        let row = &xr[i * p..(i + 1) * p];
        let wi = w[i];
        let wy = wi * y[i];
        for a in 0..p {
            let wa = wi * row[a];
            let dst = &mut gu[a * p..a * p + p];
            for c in a..p {
                dst[c] += wa * row[c];
            }
            b[a] += row[a] * wy;
        }
    }
    for a in 0..p {
        for c in 0..a {
            gu[a * p + c] = gu[c * p + a];
        }
    }
    let mut g = DMatrix::from_row_slice(p, p, &gu);
    for a in 0..p {
        g[(a, a)] += 1e-10;
    }
    let coef = g
        .cholesky()
        .map(|ch| ch.solve(&b))
        .ok_or_else(|| Error::Numerical("weighted normal equations singular".into()))?;
    let wsum: f64 = w.iter().sum();
    let mut rss = 0.0;
    for i in 0..n {
        let row = &xr[i * p..(i + 1) * p];
        let pred: f64 = (0..p).map(|a| coef[a] * row[a]).sum();
        rss += w[i] * (y[i] - pred).powi(2);
    }
    Ok((coef.iter().cloned().collect(), rss / wsum))
}
