//! Exact identification for finite-support data.
//!
//! The joint law of (A, X, Y, R) with finite covariate and outcome supports
//! is stored as the complete-pattern slice plus, for each incomplete
//! pattern, the observable margin over (A, X_obs, Y). A rank condition on
//! the complete-pattern matrices decides identifiability; when it holds,
//! linear systems recover the pattern-probability ratios, the missingness
//! mechanism, the full-data law, and exact causal effects.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{Dataset, Pattern};
use crate::error::{Error, Result};

/// Finite-support joint distribution of (A, X, Y, R).
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    levels: Vec<Vec<f64>>,
    y_levels: Vec<f64>,
    /// Complete-pattern slice f(a, x, y, R=1_p), indexed `[a][cell][k]`.
    complete: Vec<f64>,
    /// Observable margins f(a, x_obs, y, R=r), indexed `[a][obs_cell][k]`.
    margins: BTreeMap<Pattern, Vec<f64>>,
}

fn num_cells(levels: &[Vec<f64>]) -> usize {
    levels.iter().map(|l| l.len()).product()
}

/// Level indices of a cell, lexicographic with the first covariate most
/// significant.
fn unrank(levels: &[Vec<f64>], cell: usize) -> Vec<usize> {
    let mut idx = vec![0; levels.len()];
    let mut rem = cell;
    for j in (0..levels.len()).rev() {
        idx[j] = rem % levels[j].len();
        rem /= levels[j].len();
    }
    idx
}

fn rank_of(levels: &[Vec<f64>], idx: &[usize]) -> usize {
    let mut cell = 0;
    for j in 0..levels.len() {
        cell = cell * levels[j].len() + idx[j];
    }
    cell
}

impl DiscreteJoint {
    /// Builds a joint from a full-data law and a missingness mechanism.
    ///
    /// `f_axy` is indexed `[a][cell][k]` and must sum to 1. `mech` maps a
    /// pattern to `P(R=r | a, x)` indexed `[a][cell]`; it must include the
    /// complete pattern and the probabilities must sum to 1 at every
    /// `(a, cell)`.
    pub fn from_mechanism(
        levels: Vec<Vec<f64>>,
        y_levels: Vec<f64>,
        f_axy: &[f64],
        mech: &BTreeMap<Pattern, Vec<f64>>,
    ) -> Result<DiscreteJoint> {
        let p = levels.len();
        let q = num_cells(&levels);
        let k_levels = y_levels.len();
        if f_axy.len() != 2 * q * k_levels {
            return Err(Error::DimensionMismatch { expected: 2 * q * k_levels, got: f_axy.len() });
        }
        let complete_pat = Pattern::complete(p);
        if !mech.contains_key(&complete_pat) {
            return Err(Error::Validation("mechanism must include the complete pattern".into()));
        }
        for (pat, probs) in mech {
            if pat.len() != p {
                return Err(Error::DimensionMismatch { expected: p, got: pat.len() });
            }
            if probs.len() != 2 * q {
                return Err(Error::DimensionMismatch { expected: 2 * q, got: probs.len() });
            }
        }
        for a in 0..2 {
            for cell in 0..q {
                let total: f64 = mech.values().map(|pr| pr[a * q + cell]).sum();
                if (total - 1.0).abs() > 1e-10 {
                    return Err(Error::Validation(format!(
                        "mechanism rows must sum to 1; got {total} at a={a}, cell={cell}"
                    )));
                }
            }
        }
        let mut complete = vec![0.0; 2 * q * k_levels];
        let mut margins: BTreeMap<Pattern, Vec<f64>> = BTreeMap::new();
        for (pat, probs) in mech {
            if pat.is_complete() {
                for a in 0..2 {
                    for cell in 0..q {
                        for k in 0..k_levels {
                            let i = (a * q + cell) * k_levels + k;
                            complete[i] = f_axy[i] * probs[a * q + cell];
                        }
                    }
                }
                continue;
            }
            let obs = pat.obs_idx();
            let obs_levels: Vec<Vec<f64>> = obs.iter().map(|&j| levels[j].clone()).collect();
            let n_obs = num_cells(&obs_levels);
            let m = margins.entry(pat.clone()).or_insert_with(|| vec![0.0; 2 * n_obs * k_levels]);
            for a in 0..2 {
                for cell in 0..q {
                    let idx = unrank(&levels, cell);
                    let obs_idx: Vec<usize> = obs.iter().map(|&j| idx[j]).collect();
                    let oc = rank_of(&obs_levels, &obs_idx);
                    for k in 0..k_levels {
                        m[(a * n_obs + oc) * k_levels + k] +=
                            f_axy[(a * q + cell) * k_levels + k] * probs[a * q + cell];
                    }
                }
            }
        }
        let j = DiscreteJoint { levels, y_levels, complete, margins };
        j.validate()?;
        Ok(j)
    }

    /// Builds an empirical frequency table from a dataset with integer-coded
    /// covariates and outcome. Sampling noise makes downstream solutions
    /// approximate; no smoothing is applied.
    pub fn from_dataset(d: &Dataset) -> Result<DiscreteJoint> {
        let p = d.p();
        let mut levels: Vec<Vec<f64>> = vec![Vec::new(); p];
        for j in 0..p {
            let mut vals: Vec<f64> = (0..d.n()).filter_map(|i| d.x(i, j)).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            if vals.is_empty() {
                return Err(Error::Validation(format!("covariate x{} is never observed", j + 1)));
            }
            levels[j] = vals;
        }
        let mut y_levels: Vec<f64> = d.y().to_vec();
        y_levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        y_levels.dedup();
        let q = num_cells(&levels);
        let k_levels = y_levels.len();
        let find = |vals: &[f64], v: f64| -> Result<usize> {
            vals.iter()
                .position(|&u| u == v)
                .ok_or_else(|| Error::Validation(format!("value {v} not in support")))
        };
        let mut complete = vec![0.0; 2 * q * k_levels];
        let mut margins: BTreeMap<Pattern, Vec<f64>> = BTreeMap::new();
        let w = 1.0 / d.n() as f64;
        for i in 0..d.n() {
            let a = d.a()[i] as usize;
            let k = find(&y_levels, d.y()[i])?;
            let pat = d.pattern_of(i);
            if pat.is_complete() {
                let idx: Vec<usize> = (0..p)
                    .map(|j| find(&levels[j], d.x(i, j).unwrap()))
                    .collect::<Result<_>>()?;
                complete[(a * q + rank_of(&levels, &idx)) * k_levels + k] += w;
            } else {
                let obs = pat.obs_idx();
                let obs_levels: Vec<Vec<f64>> = obs.iter().map(|&j| levels[j].clone()).collect();
                let n_obs = num_cells(&obs_levels);
                let obs_idx: Vec<usize> = obs
                    .iter()
                    .map(|&j| find(&levels[j], d.x(i, j).unwrap()))
                    .collect::<Result<_>>()?;
                let oc = rank_of(&obs_levels, &obs_idx);
                let m =
                    margins.entry(pat).or_insert_with(|| vec![0.0; 2 * n_obs * k_levels]);
                m[(a * n_obs + oc) * k_levels + k] += w;
            }
        }
        let j = DiscreteJoint { levels, y_levels, complete, margins };
        j.validate()?;
        Ok(j)
    }

    fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.iter().any(|l| l.is_empty()) || self.y_levels.is_empty() {
            return Err(Error::Validation("empty support".into()));
        }
        let total: f64 =
            self.complete.iter().sum::<f64>() + self.margins.values().flatten().sum::<f64>();
        if self.complete.iter().chain(self.margins.values().flatten()).any(|&v| v < -1e-12) {
            return Err(Error::Validation("negative probability".into()));
        }
        if (total - 1.0).abs() > 1e-8 {
            return Err(Error::Validation(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.levels.len()
    }

    pub fn q(&self) -> usize {
        num_cells(&self.levels)
    }

    pub fn k(&self) -> usize {
        self.y_levels.len()
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn y_levels(&self) -> &[f64] {
        &self.y_levels
    }

    pub fn incomplete_patterns(&self) -> Vec<Pattern> {
        self.margins.keys().cloned().collect()
    }

    /// f(A=a, X=cell, Y=y_k, R=1_p).
    pub fn complete_prob(&self, a: usize, cell: usize, k: usize) -> f64 {
        self.complete[(a * self.q() + cell) * self.k() + k]
    }

    /// The values of X at a cell.
    pub fn cell_values(&self, cell: usize) -> Vec<f64> {
        unrank(&self.levels, cell)
            .iter()
            .enumerate()
            .map(|(j, &l)| self.levels[j][l])
            .collect()
    }

    fn obs_levels(&self, pat: &Pattern) -> Vec<Vec<f64>> {
        pat.obs_idx().iter().map(|&j| self.levels[j].clone()).collect()
    }

    /// Observed-sub-cell index of a full cell under a pattern.
    fn obs_cell_of(&self, pat: &Pattern, cell: usize) -> usize {
        let idx = unrank(&self.levels, cell);
        let obs = pat.obs_idx();
        let obs_levels = self.obs_levels(pat);
        let obs_idx: Vec<usize> = obs.iter().map(|&j| idx[j]).collect();
        rank_of(&obs_levels, &obs_idx)
    }
}

/// The K x q matrix with entry (k, cell) = f(A=a, X=cell, Y=y_k, R=1_p).
#[derive(Debug, Clone)]
pub struct ThetaMatrix {
    pub a: usize,
    pub m: DMatrix<f64>,
}

pub fn build_theta(j: &DiscreteJoint, a: usize) -> ThetaMatrix {
    let (q, k) = (j.q(), j.k());
    let m = DMatrix::from_fn(k, q, |row, col| j.complete_prob(a, col, row));
    ThetaMatrix { a, m }
}

/// Identifiability report: rank condition per arm.
#[derive(Debug, Clone, Serialize)]
pub struct IdentReport {
    pub identifiable: bool,
    pub q: usize,
    pub k: usize,
    pub ranks: [usize; 2],
    pub condition_numbers: [f64; 2],
    pub singular_values: [Vec<f64>; 2],
    pub reason: Option<String>,
}

/// Checks rank(Theta_a) = q for both arms; rank counts singular values
/// above `tol * sigma_max`.
pub fn check_identifiability(j: &DiscreteJoint, tol: f64) -> IdentReport {
    let (q, k) = (j.q(), j.k());
    if k < q {
        return IdentReport {
            identifiable: false,
            q,
            k,
            ranks: [0, 0],
            condition_numbers: [f64::INFINITY; 2],
            singular_values: [vec![], vec![]],
            reason: Some(format!("outcome support size {k} < covariate cell count {q}")),
        };
    }
    let mut ranks = [0usize; 2];
    let mut conds = [f64::INFINITY; 2];
    let mut svs: [Vec<f64>; 2] = [vec![], vec![]];
    for a in 0..2 {
        let theta = build_theta(j, a);
        let svd = theta.m.svd(false, false);
        let mut s: Vec<f64> = svd.singular_values.iter().cloned().collect();
        s.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let smax = s.first().cloned().unwrap_or(0.0);
        ranks[a] = s.iter().filter(|&&v| v > tol * smax).count();
        if ranks[a] == q && s[q - 1] > 0.0 {
            conds[a] = smax / s[q - 1];
        }
        svs[a] = s;
    }
    let identifiable = ranks[0] == q && ranks[1] == q;
    IdentReport {
        identifiable,
        q,
        k,
        ranks,
        condition_numbers: conds,
        singular_values: svs,
        reason: if identifiable {
            None
        } else {
            Some(format!("rank deficient: ranks {:?}, need {q} in both arms", [ranks[0], ranks[1]]))
        },
    }
}

/// Pattern-probability ratios xi_ra(x) = P(R=r|a,x) / P(R=1_p|a,x) on the
/// full covariate support, one table per (incomplete pattern, arm).
#[derive(Debug, Clone, Serialize)]
pub struct XiTable {
    /// Per pattern, indexed `[a][cell]`.
    pub xi: BTreeMap<Pattern, Vec<f64>>,
    /// Least-squares residual norm per (pattern, arm).
    pub residuals: BTreeMap<Pattern, [f64; 2]>,
    /// Count of solved values below -1e-8 (clipped to 0).
    pub negative_clips: usize,
}

/// Solves the observed-margin linear systems for every incomplete pattern.
///
/// Fully missing patterns give one K x q system per arm; partially missing
/// patterns one system per observed sub-cell. Overdetermined systems are
/// solved by least squares with the residual norm reported.
pub fn solve_xi(j: &DiscreteJoint, tol: f64) -> Result<XiTable> {
    let (q, k_levels) = (j.q(), j.k());
    let mut xi = BTreeMap::new();
    let mut residuals = BTreeMap::new();
    let mut negative_clips = 0usize;
    for pat in j.incomplete_patterns() {
        let margin = &j.margins[&pat];
        let obs_levels = j.obs_levels(&pat);
        let n_obs = num_cells(&obs_levels);
        // full cells grouped by observed sub-cell
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_obs];
        for cell in 0..q {
            groups[j.obs_cell_of(&pat, cell)].push(cell);
        }
        let mut table = vec![0.0; 2 * q];
        let mut res = [0.0f64; 2];
        for a in 0..2 {
            for (oc, cells) in groups.iter().enumerate() {
                let b = DVector::from_fn(k_levels, |k, _| {
                    margin[(a * n_obs + oc) * k_levels + k]
                });
                if b.iter().all(|&v| v == 0.0) {
                    // no observed mass at this sub-cell
                    continue;
                }
                let m = DMatrix::from_fn(k_levels, cells.len(), |k, col| {
                    j.complete_prob(a, cells[col], k)
                });
                let svd = m.clone().svd(true, true);
                let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
                let rank = svd.singular_values.iter().filter(|&&v| v > tol * smax).count();
                if rank < cells.len() {
                    return Err(Error::NotIdentifiable(format!(
                        "system for pattern {pat}, arm {a} has rank {rank} < {} unknowns",
                        cells.len()
                    )));
                }
                let sol = svd
                    .solve(&b, tol * smax)
                    .map_err(|e| Error::Numerical(format!("svd solve: {e}")))?;
                let r = (&m * &sol - &b).norm();
                res[a] = res[a].hypot(r);
                for (col, &cell) in cells.iter().enumerate() {
                    let mut v = sol[col];
                    if v < 0.0 {
                        if v < -1e-8 {
                            negative_clips += 1;
                        }
                        v = 0.0;
                    }
                    table[a * q + cell] = v;
                }
            }
        }
        xi.insert(pat.clone(), table);
        residuals.insert(pat, res);
    }
    Ok(XiTable { xi, residuals, negative_clips })
}

/// The recovered full-data law and missingness mechanism.
#[derive(Debug, Clone)]
pub struct RecoveredJoint {
    pub levels: Vec<Vec<f64>>,
    pub y_levels: Vec<f64>,
    /// f(A=a, X=cell, Y=y_k), indexed `[a][cell][k]`.
    pub f_axy: Vec<f64>,
    /// P(R=r | a, cell) per pattern (complete pattern included), `[a][cell]`.
    pub response: BTreeMap<Pattern, Vec<f64>>,
}

/// Recovers f(A,X,Y) and P(R|A,X) from the solved ratio tables.
pub fn recover_joint(j: &DiscreteJoint, xi: &XiTable) -> Result<RecoveredJoint> {
    let (q, k_levels, p) = (j.q(), j.k(), j.p());
    let mut denom = vec![1.0; 2 * q]; // 1 + sum_r xi_r, the complete pattern contributes 1
    for table in xi.xi.values() {
        for (d, &v) in denom.iter_mut().zip(table) {
            *d += v;
        }
    }
    let mut response: BTreeMap<Pattern, Vec<f64>> = BTreeMap::new();
    let complete_resp: Vec<f64> = denom.iter().map(|&d| 1.0 / d).collect();
    response.insert(Pattern::complete(p), complete_resp.clone());
    for (pat, table) in &xi.xi {
        response.insert(pat.clone(), table.iter().zip(&denom).map(|(&v, &d)| v / d).collect());
    }
    let mut f_axy = vec![0.0; 2 * q * k_levels];
    for a in 0..2 {
        for cell in 0..q {
            let pr = complete_resp[a * q + cell];
            let mass: f64 = (0..k_levels).map(|k| j.complete_prob(a, cell, k)).sum();
            if pr <= 0.0 && mass > 0.0 {
                return Err(Error::Positivity(format!(
                    "zero complete-pattern probability at a={a}, cell={cell} with positive mass"
                )));
            }
            for k in 0..k_levels {
                f_axy[(a * q + cell) * k_levels + k] = if mass > 0.0 {
                    j.complete_prob(a, cell, k) / pr
                } else {
                    0.0
                };
            }
        }
    }
    // population-exact inputs reproduce total = 1; empirical frequency
    // tables carry sampling noise, which we renormalize away. A large
    // deviation means the inputs were not a coherent joint at all.
    let total: f64 = f_axy.iter().sum();
    if !total.is_finite() || (total - 1.0).abs() > 0.1 {
        return Err(Error::Numerical(format!("recovered joint sums to {total}, expected 1")));
    }
    for v in f_axy.iter_mut() {
        *v /= total;
    }
    Ok(RecoveredJoint {
        levels: j.levels.clone(),
        y_levels: j.y_levels.clone(),
        f_axy,
        response,
    })
}

/// Exact average effects from a recovered full-data law.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DiscreteTau {
    pub tau: f64,
    pub tau_att: f64,
}

pub fn discrete_tau(r: &RecoveredJoint) -> Result<DiscreteTau> {
    let q = num_cells(&r.levels);
    let k_levels = r.y_levels.len();
    let arm_mass = |a: usize, cell: usize| -> f64 {
        (0..k_levels).map(|k| r.f_axy[(a * q + cell) * k_levels + k]).sum()
    };
    let arm_mean = |a: usize, cell: usize| -> f64 {
        let mass = arm_mass(a, cell);
        (0..k_levels)
            .map(|k| r.y_levels[k] * r.f_axy[(a * q + cell) * k_levels + k])
            .sum::<f64>()
            / mass
    };
    let p1: f64 = (0..q).map(|c| arm_mass(1, c)).sum();
    let mut tau = 0.0;
    let mut tau_att = 0.0;
    for cell in 0..q {
        let fx = arm_mass(0, cell) + arm_mass(1, cell);
        if fx == 0.0 {
            continue;
        }
        if arm_mass(0, cell) == 0.0 || arm_mass(1, cell) == 0.0 {
            return Err(Error::Overlap(format!(
                "cell {cell} has positive mass but an empty arm"
            )));
        }
        let tx = arm_mean(1, cell) - arm_mean(0, cell);
        tau += tx * fx;
        tau_att += tx * arm_mass(1, cell) / p1;
    }
    Ok(DiscreteTau { tau, tau_att })
}
