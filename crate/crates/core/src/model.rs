//! Clustered data layout, mean-model design expansion, link and variance
//! functions.
//!
//! A cluster is one participant. Its rows are kept in canonical order: sorted
//! by frequency, then by ear, so a complete cluster with `Q` frequencies reads
//! `(ear1,f1), (ear2,f1), (ear1,f2), ..., (ear2,fQ)`.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GeeError, Result};

/// Canonical position of an (ear, frequency) cell within a complete cluster.
pub(crate) fn cell_position(ear: usize, freq: usize) -> usize {
    (freq - 1) * 2 + (ear - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterData {
    participant_id: String,
    y: DVector<f64>,
    x: DMatrix<f64>,
    ear_index: Vec<usize>,
    freq_index: Vec<usize>,
}

impl ClusterData {
    /// Builds a cluster from rows given in any order. Rows are re-sorted into
    /// the canonical (frequency, ear) order.
    pub fn new(
        participant_id: impl Into<String>,
        y: Vec<f64>,
        x: DMatrix<f64>,
        ear_index: Vec<usize>,
        freq_index: Vec<usize>,
    ) -> Result<Self> {
        let participant_id = participant_id.into();
        let n = y.len();
        let invalid = |reason: String| GeeError::InvalidCluster {
            participant: participant_id.clone(),
            reason,
        };
        if n == 0 {
            return Err(invalid("cluster has no observations".into()));
        }
        if x.nrows() != n || ear_index.len() != n || freq_index.len() != n {
            return Err(invalid(format!(
                "length mismatch: y={}, x rows={}, ear={}, freq={}",
                n,
                x.nrows(),
                ear_index.len(),
                freq_index.len()
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for (row, (&e, &f)) in ear_index.iter().zip(&freq_index).enumerate() {
            if e != 1 && e != 2 {
                return Err(invalid(format!("row {row}: ear index {e} not in {{1,2}}")));
            }
            if f == 0 {
                return Err(invalid(format!("row {row}: frequency index must be >= 1")));
            }
            if !seen.insert((e, f)) {
                return Err(invalid(format!(
                    "row {row}: duplicate measurement for ear {e}, frequency {f}"
                )));
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&r| (freq_index[r], ear_index[r]));
        let y = DVector::from_iterator(n, order.iter().map(|&r| y[r]));
        let x = x.select_rows(order.iter());
        let ear_index = order.iter().map(|&r| ear_index[r]).collect();
        let freq_index = order.iter().map(|&r| freq_index[r]).collect();
        Ok(Self {
            participant_id,
            y,
            x,
            ear_index,
            freq_index,
        })
    }

    pub fn participant_id(&self) -> &str {
        &self.participant_id
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Raw covariates, one row per observation.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn ear_index(&self) -> &[usize] {
        &self.ear_index
    }

    pub fn freq_index(&self) -> &[usize] {
        &self.freq_index
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// True when both ears are observed at every frequency `1..=q`.
    pub fn is_complete(&self, q: usize) -> bool {
        self.len() == 2 * q && self.freq_index.iter().all(|&f| f <= q)
    }

    /// Returns a copy with the outcome replaced, keeping the layout.
    pub fn with_outcome(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.len() {
            return Err(GeeError::DimensionMismatch(format!(
                "outcome of length {} for cluster of size {}",
                y.len(),
                self.len()
            )));
        }
        Ok(Self { y, ..self.clone() })
    }

    /// Returns a copy with ear labels 1 and 2 exchanged (rows re-sorted).
    pub fn with_swapped_ears(&self) -> Self {
        let ears = self.ear_index.iter().map(|&e| 3 - e).collect();
        Self::new(
            self.participant_id.clone(),
            self.y.iter().copied().collect(),
            self.x.clone(),
            ears,
            self.freq_index.clone(),
        )
        .expect("swapping ear labels preserves cluster validity")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Identity,
    Logit,
}

impl Link {
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => logistic(eta),
        }
    }

    /// dμ/dη evaluated at η.
    pub fn derivative(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => {
                let mu = logistic(eta);
                mu * (1.0 - mu)
            }
        }
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Variance as a function of the mean, up to the dispersion φ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceFunction {
    /// Gaussian: v(μ) = 1.
    #[default]
    Constant,
    /// v(μ) = μ(1 − μ).
    Bernoulli,
}

impl VarianceFunction {
    pub fn value(self, mu: f64) -> f64 {
        match self {
            VarianceFunction::Constant => 1.0,
            VarianceFunction::Bernoulli => mu * (1.0 - mu),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateLevel {
    /// Constant across all rows of a cluster.
    Participant,
    /// May differ between ears and frequencies.
    Ear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub level: CovariateLevel,
    pub interact_with_frequency: bool,
}

impl Covariate {
    pub fn participant(name: impl Into<String>, interact: bool) -> Self {
        Self {
            name: name.into(),
            level: CovariateLevel::Participant,
            interact_with_frequency: interact,
        }
    }

    pub fn ear(name: impl Into<String>, interact: bool) -> Self {
        Self {
            name: name.into(),
            level: CovariateLevel::Ear,
            interact_with_frequency: interact,
        }
    }
}

/// Marginal mean model: `g(μ) = β0 + Σ_q βq·I(f=q) + xᵀβ⁽¹⁾ + Σ_q xᵀβ⁽²⁾_q·I(f=q)`.
///
/// Frequency 1 is the reference level. Raw covariate columns are declared in
/// `covariates`, in the same order as the columns of [`ClusterData::x`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanModelSpec {
    pub freq_levels: usize,
    pub covariates: Vec<Covariate>,
    #[serde(default)]
    pub link: Link,
    #[serde(default)]
    pub variance_function: VarianceFunction,
}

impl MeanModelSpec {
    pub fn new(freq_levels: usize, covariates: Vec<Covariate>) -> Self {
        Self {
            freq_levels,
            covariates,
            link: Link::Identity,
            variance_function: VarianceFunction::Constant,
        }
    }

    pub fn with_link(mut self, link: Link) -> Self {
        self.link = link;
        self.variance_function = match link {
            Link::Identity => VarianceFunction::Constant,
            Link::Logit => VarianceFunction::Bernoulli,
        };
        self
    }

    fn n_interacted(&self) -> usize {
        self.covariates
            .iter()
            .filter(|c| c.interact_with_frequency)
            .count()
    }

    /// Number of columns of the expanded design.
    pub fn n_coefficients(&self) -> usize {
        let extra = self.freq_levels.saturating_sub(1);
        1 + extra + self.covariates.len() + self.n_interacted() * extra
    }

    /// Column labels in expanded-design order.
    pub fn coefficient_names(&self) -> Vec<String> {
        let mut names = vec!["(Intercept)".to_string()];
        names.extend((2..=self.freq_levels).map(|q| format!("freq{q}")));
        names.extend(self.covariates.iter().map(|c| c.name.clone()));
        for c in self.covariates.iter().filter(|c| c.interact_with_frequency) {
            names.extend((2..=self.freq_levels).map(|q| format!("{}:freq{q}", c.name)));
        }
        names
    }
}

/// Expands raw covariates into the mean-model design.
///
/// Column order: intercept, frequency indicators for `q = 2..=Q`, raw
/// covariates, then for each flagged covariate (declaration order) its
/// interactions with frequencies `2..=Q`.
pub fn expand_design(
    raw_covariates: &DMatrix<f64>,
    freq_index: &[usize],
    spec: &MeanModelSpec,
) -> Result<DMatrix<f64>> {
    let n = raw_covariates.nrows();
    let p = spec.covariates.len();
    if freq_index.len() != n {
        return Err(GeeError::DimensionMismatch(format!(
            "{} covariate rows but {} frequency labels",
            n,
            freq_index.len()
        )));
    }
    if raw_covariates.ncols() != p {
        return Err(GeeError::DimensionMismatch(format!(
            "{} covariate columns but {} declared covariates",
            raw_covariates.ncols(),
            p
        )));
    }
    let q_levels = spec.freq_levels;
    if let Some((row, &freq)) = freq_index
        .iter()
        .enumerate()
        .find(|(_, &f)| f < 1 || f > q_levels)
    {
        return Err(GeeError::UnknownFrequency {
            row,
            freq,
            levels: q_levels,
        });
    }
    let extra = q_levels - 1;
    let interacted: Vec<usize> = spec
        .covariates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.interact_with_frequency)
        .map(|(j, _)| j)
        .collect();

    let k = spec.n_coefficients();
    let mut design = DMatrix::zeros(n, k);
    for (row, &freq) in freq_index.iter().enumerate() {
        design[(row, 0)] = 1.0;
        if freq >= 2 {
            design[(row, freq - 1)] = 1.0;
        }
        for j in 0..p {
            design[(row, 1 + extra + j)] = raw_covariates[(row, j)];
        }
        if freq >= 2 {
            for (slot, &j) in interacted.iter().enumerate() {
                let col = 1 + extra + p + slot * extra + (freq - 2);
                design[(row, col)] = raw_covariates[(row, j)];
            }
        }
    }
    Ok(design)
}

/// Mean and its gradient with respect to β for a single design row.
pub fn mean_and_derivative(
    design_row: &DVector<f64>,
    beta: &DVector<f64>,
    link: Link,
) -> Result<(f64, DVector<f64>)> {
    if design_row.len() != beta.len() {
        return Err(GeeError::DimensionMismatch(format!(
            "design row of length {} against {} coefficients",
            design_row.len(),
            beta.len()
        )));
    }
    let eta = design_row.dot(beta);
    Ok((link.inverse(eta), design_row * link.derivative(eta)))
}
