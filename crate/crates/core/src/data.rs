//! In-memory representation of partially observed causal data.
//!
//! A [`Dataset`] holds a binary treatment, a real outcome, and a covariate
//! table in which individual cells may be missing. Missingness is tracked by
//! an explicit presence mask rather than sentinel values, so downstream
//! kernel computations can never silently consume a placeholder.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Partially observed causal data: treatment, outcome, covariates, mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    p: usize,
    a: Vec<u8>,
    y: Vec<f64>,
    /// Row-major `n x p`; `None` marks a missing cell.
    x: Vec<Option<f64>>,
}

impl Dataset {
    /// Builds a dataset from columns, validating the invariants.
    pub fn new(a: Vec<u8>, y: Vec<f64>, x: Vec<Option<f64>>, p: usize) -> Result<Self> {
        let n = a.len();
        if n == 0 || p == 0 {
            return Err(Error::Validation("need n >= 1 and p >= 1".into()));
        }
        if y.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: y.len() });
        }
        if x.len() != n * p {
            return Err(Error::DimensionMismatch { expected: n * p, got: x.len() });
        }
        for (i, &ai) in a.iter().enumerate() {
            if ai > 1 {
                return Err(Error::Validation(format!("row {i}: treatment must be 0 or 1")));
            }
        }
        for (i, &yi) in y.iter().enumerate() {
            if !yi.is_finite() {
                return Err(Error::Validation(format!("row {i}: outcome not finite")));
            }
        }
        for (k, v) in x.iter().enumerate() {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "row {}: covariate x{} not finite",
                        k / p,
                        k % p + 1
                    )));
                }
            }
        }
        Ok(Dataset { n, p, a, y, x })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Covariate cell `(i, j)`; `None` if missing.
    pub fn x(&self, i: usize, j: usize) -> Option<f64> {
        self.x[i * self.p + j]
    }

    /// Missingness indicator: 1 when observed.
    pub fn r(&self, i: usize, j: usize) -> u8 {
        self.x[i * self.p + j].is_some() as u8
    }

    /// The missingness pattern of unit `i`.
    pub fn pattern_of(&self, i: usize) -> Pattern {
        Pattern::new((0..self.p).map(|j| self.r(i, j)).collect())
    }

    /// True when every covariate of unit `i` is observed.
    pub fn is_complete(&self, i: usize) -> bool {
        (0..self.p).all(|j| self.r(i, j) == 1)
    }

    /// Full covariate row of a complete unit.
    ///
    /// Panics if any cell of the row is missing.
    pub fn x_row(&self, i: usize) -> Vec<f64> {
        (0..self.p)
            .map(|j| self.x(i, j).expect("x_row requires a complete unit"))
            .collect()
    }

    /// Builds a dataset by resampling rows with replacement.
    pub fn resample(&self, idx: &[usize]) -> Dataset {
        let mut a = Vec::with_capacity(idx.len());
        let mut y = Vec::with_capacity(idx.len());
        let mut x = Vec::with_capacity(idx.len() * self.p);
        for &i in idx {
            a.push(self.a[i]);
            y.push(self.y[i]);
            x.extend_from_slice(&self.x[i * self.p..(i + 1) * self.p]);
        }
        Dataset { n: idx.len(), p: self.p, a, y, x }
    }

    /// Reads a dataset from CSV with header `a,y,x1,..,xp`.
    ///
    /// Empty cells and the literal `NA` in covariate columns parse as
    /// missing; `a` and `y` must always be present.
    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file)
    }

    /// Same as [`Dataset::load_csv`] but from any reader.
    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let cols: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
        if cols.len() < 3 {
            return Err(Error::Schema("need columns a, y, x1..xp".into()));
        }
        if cols[0] != "a" || cols[1] != "y" {
            return Err(Error::Schema(format!(
                "first two columns must be `a`, `y`; got `{}`, `{}`",
                cols[0], cols[1]
            )));
        }
        let p = cols.len() - 2;
        for (j, c) in cols[2..].iter().enumerate() {
            let want = format!("x{}", j + 1);
            if *c != want {
                return Err(Error::Schema(format!("column {} must be `{want}`; got `{c}`", j + 3)));
            }
        }
        let mut a = Vec::new();
        let mut y = Vec::new();
        let mut x = Vec::new();
        for (rec_idx, rec) in rdr.records().enumerate() {
            let line = rec_idx + 2; // 1-based, after the header
            let rec = rec?;
            if rec.len() != p + 2 {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} fields, got {}", p + 2, rec.len()),
                });
            }
            let a_str = rec[0].trim();
            let ai: u8 = match a_str {
                "0" => 0,
                "1" => 1,
                "" | "NA" => {
                    return Err(Error::Validation(format!("line {line}: treatment is missing")))
                }
                other => {
                    return Err(Error::Validation(format!(
                        "line {line}: treatment must be 0 or 1, got `{other}`"
                    )))
                }
            };
            let y_str = rec[1].trim();
            if y_str.is_empty() || y_str == "NA" {
                return Err(Error::Validation(format!("line {line}: outcome is missing")));
            }
            let yi: f64 = y_str
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("bad outcome `{y_str}`") })?;
            a.push(ai);
            y.push(yi);
            for j in 0..p {
                let cell = rec[j + 2].trim();
                if cell.is_empty() || cell == "NA" {
                    x.push(None);
                } else {
                    let v: f64 = cell.parse().map_err(|_| Error::Parse {
                        line,
                        msg: format!("bad value `{cell}` in column x{}", j + 1),
                    })?;
                    x.push(Some(v));
                }
            }
        }
        Dataset::new(a, y, x, p)
    }

    /// Writes the dataset as CSV, with missing cells left empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["a".to_string(), "y".to_string()];
        header.extend((1..=self.p).map(|j| format!("x{j}")));
        wtr.write_record(&header)?;
        for i in 0..self.n {
            let mut rec = vec![self.a[i].to_string(), format!("{}", self.y[i])];
            for j in 0..self.p {
                rec.push(match self.x(i, j) {
                    Some(v) => format!("{v}"),
                    None => String::new(),
                });
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// A missingness pattern: which covariate columns are observed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pattern {
    bits: Vec<u8>,
}

impl Pattern {
    pub fn new(bits: Vec<u8>) -> Self {
        debug_assert!(bits.iter().all(|&b| b <= 1));
        Pattern { bits }
    }

    /// The complete pattern `1_p`.
    pub fn complete(p: usize) -> Self {
        Pattern { bits: vec![1; p] }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.bits.iter().all(|&b| b == 1)
    }

    /// Indices of observed columns, ascending.
    pub fn obs_idx(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b == 1).map(|(j, _)| j).collect()
    }

    /// Indices of missing columns, ascending.
    pub fn mis_idx(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b == 0).map(|(j, _)| j).collect()
    }
}

impl serde::Serialize for Pattern {
    /// Serializes as the bit string, e.g. `"101"`, so patterns can key
    /// JSON maps.
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Units grouped by their exact missingness pattern.
#[derive(Debug, Clone)]
pub struct PatternIndex {
    groups: BTreeMap<Pattern, Vec<usize>>,
    p: usize,
}

impl PatternIndex {
    /// Groups every unit of `d` by its missingness row.
    pub fn build(d: &Dataset) -> PatternIndex {
        let mut groups: BTreeMap<Pattern, Vec<usize>> = BTreeMap::new();
        for i in 0..d.n() {
            groups.entry(d.pattern_of(i)).or_default().push(i);
        }
        PatternIndex { groups, p: d.p() }
    }

    /// All patterns present in the data, with their unit lists.
    pub fn groups(&self) -> impl Iterator<Item = (&Pattern, &Vec<usize>)> {
        self.groups.iter()
    }

    pub fn group(&self, pat: &Pattern) -> &[usize] {
        self.groups.get(pat).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Units with every covariate observed.
    pub fn complete_units(&self) -> &[usize] {
        self.group_owned(&Pattern::complete(self.p))
    }

    fn group_owned(&self, pat: &Pattern) -> &[usize] {
        self.groups.get(pat).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Patterns other than the complete one, ascending.
    pub fn incomplete_patterns(&self) -> Vec<Pattern> {
        self.groups.keys().filter(|p| !p.is_complete()).cloned().collect()
    }

    pub fn num_patterns(&self) -> usize {
        self.groups.len()
    }
}

/// Observed sub-columns for the units of one pattern group.
///
/// Returns `(rows, obs_idx)` where each row holds the observed covariate
/// values of one unit (in `obs_idx` order). Units are those of the pattern
/// group; the result is empty when the pattern is absent.
pub fn split_by_pattern(d: &Dataset, idx: &PatternIndex, pat: &Pattern) -> (Vec<Vec<f64>>, Vec<usize>) {
    let obs = pat.obs_idx();
    let rows = idx
        .group(pat)
        .iter()
        .map(|&i| obs.iter().map(|&j| d.x(i, j).expect("observed cell")).collect())
        .collect();
    (rows, obs)
}
