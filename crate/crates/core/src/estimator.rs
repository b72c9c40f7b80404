//! First-order GEE solving, the GEE1.5 procedure and robust covariance.
//!
//! The estimating function is
//!
//! ```text
//! U(β) = Σᵢ Dᵢᵀ Vᵢ⁻¹ (Yᵢ − μᵢ),   Vᵢ = Aᵢ^{1/2} Rᵢ Aᵢ^{1/2},   Aᵢ = diag(v(μᵢ))
//! ```
//!
//! with the variance function taken at unit dispersion. φ only enters the
//! Pearson residuals and the model-based covariance `φ̂·Σ₀⁻¹`.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::correlation::{
    materialize, moment_estimate, solve_alpha_from_residuals, AlphaSolution, AlphaSolverOptions,
    AlphaTransformed, CorrelationKind, CorrelationSpec, ResidualVector,
};
use crate::error::{GeeError, Result};
use crate::linalg::{cholesky_with_ridge, factor_information, symmetrize};
use crate::model::{expand_design, ClusterData, Link, MeanModelSpec, VarianceFunction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeeOptions {
    pub max_iter: usize,
    /// Convergence threshold on ‖U(β)‖∞.
    pub tolerance: f64,
}

impl Default for GeeOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeeFit {
    pub beta_hat: DVector<f64>,
    pub coefficient_names: Vec<String>,
    pub correlation: CorrelationSpec,
    pub dispersion_hat: f64,
    /// Model-based covariance `φ̂·Σ₀⁻¹`.
    pub naive_cov: DMatrix<f64>,
    /// Robust covariance `Σ₀⁻¹ Σ₁ Σ₀⁻¹`.
    pub sandwich_cov: DMatrix<f64>,
    pub n_clusters: usize,
    pub n_observations: usize,
    /// Scoring steps in the final mean-model solve.
    pub iterations: usize,
    pub converged: bool,
    pub final_score_norm: f64,
    /// Structured-correlation solve from the last GEE1.5 round, if any.
    pub alpha: Option<AlphaSolution>,
    /// Correlation/mean alternation rounds (GEE1 moment updates or GEE1.5
    /// steps 2–3); zero for a single solve at fixed correlation.
    pub rounds: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeKind {
    #[default]
    Sandwich,
    Naive,
}

impl GeeFit {
    pub fn sandwich_se(&self) -> DVector<f64> {
        self.sandwich_cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn naive_se(&self) -> DVector<f64> {
        self.naive_cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn se(&self, kind: SeKind) -> DVector<f64> {
        match kind {
            SeKind::Sandwich => self.sandwich_se(),
            SeKind::Naive => self.naive_se(),
        }
    }
}

struct Prepared {
    y: DVector<f64>,
    design: DMatrix<f64>,
    ear: Vec<usize>,
    freq: Vec<usize>,
}

fn prepare(clusters: &[ClusterData], model: &MeanModelSpec) -> Result<Vec<Prepared>> {
    clusters
        .iter()
        .map(|c| {
            Ok(Prepared {
                y: c.y().clone(),
                design: expand_design(c.x(), c.freq_index(), model)?,
                ear: c.ear_index().to_vec(),
                freq: c.freq_index().to_vec(),
            })
        })
        .collect()
}

/// Fitted means, dμ/dβ rows and unit-dispersion variances of one cluster.
fn cluster_mean(
    p: &Prepared,
    model: &MeanModelSpec,
    beta: &DVector<f64>,
    cluster: usize,
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    let eta = &p.design * beta;
    let mu = eta.map(|e| model.link.inverse(e));
    let mut d = p.design.clone();
    if model.link != Link::Identity {
        for (r, &e) in eta.iter().enumerate() {
            let g = model.link.derivative(e);
            d.row_mut(r).scale_mut(g);
        }
    }
    let v = mu.map(|m| model.variance_function.value(m));
    if let Some(row) = v.iter().position(|&x| x.is_nan() || x <= 0.0) {
        return Err(GeeError::NonPositiveVariance { cluster, row });
    }
    Ok((mu, d, v))
}

type Layout = (Vec<usize>, Vec<usize>);
type CachedCorrelation = (DMatrix<f64>, Option<Cholesky<f64, Dyn>>);

/// Materialized correlations per cell layout, plus their factors when the
/// variance function does not depend on μ.
struct LayoutCache<'a> {
    corr: &'a CorrelationSpec,
    constant_variance: bool,
    entries: BTreeMap<Layout, CachedCorrelation>,
}

impl<'a> LayoutCache<'a> {
    fn new(corr: &'a CorrelationSpec, model: &MeanModelSpec) -> Self {
        Self {
            corr,
            constant_variance: model.variance_function == VarianceFunction::Constant,
            entries: BTreeMap::new(),
        }
    }

    /// Cholesky factor of the working covariance for a cluster.
    fn factor(&mut self, p: &Prepared, v: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
        let key = (p.ear.clone(), p.freq.clone());
        if !self.entries.contains_key(&key) {
            let r = materialize(self.corr, &p.ear, &p.freq)?;
            let chol = if self.constant_variance {
                Some(self.factor_of(&r)?)
            } else {
                None
            };
            self.entries.insert(key.clone(), (r, chol));
        }
        let (r, chol) = &self.entries[&key];
        if let Some(c) = chol {
            return Ok(c.clone());
        }
        let s = v.map(f64::sqrt);
        let vmat = DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| s[i] * r[(i, j)] * s[j]);
        self.factor_of(&vmat)
    }

    fn factor_of(&self, m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
        cholesky_with_ridge(m).ok_or_else(|| GeeError::NotPositiveSemidefinite {
            spec: format!("{:?}", self.corr.kind()),
            min_eigenvalue: crate::linalg::min_eigenvalue(m),
        })
    }
}

struct Accumulated {
    /// Σ₀ = Σ DᵀV⁻¹D
    info: DMatrix<f64>,
    /// U = Σ DᵀV⁻¹(Y−μ)
    score: DVector<f64>,
    /// Σ₁ = Σ DᵀV⁻¹(Y−μ)(Y−μ)ᵀV⁻¹D
    meat: DMatrix<f64>,
    /// Σ (Y−μ)²/v(μ)
    pearson_ss: f64,
    n_obs: usize,
}

fn accumulate(
    preps: &[Prepared],
    model: &MeanModelSpec,
    corr: &CorrelationSpec,
    beta: &DVector<f64>,
) -> Result<Accumulated> {
    let k = beta.len();
    let mut cache = LayoutCache::new(corr, model);
    let mut acc = Accumulated {
        info: DMatrix::zeros(k, k),
        score: DVector::zeros(k),
        meat: DMatrix::zeros(k, k),
        pearson_ss: 0.0,
        n_obs: 0,
    };
    for (i, p) in preps.iter().enumerate() {
        let (mu, d, v) = cluster_mean(p, model, beta, i)?;
        let resid = &p.y - &mu;
        let chol = cache.factor(p, &v)?;
        let vinv_d = chol.solve(&d);
        let u_i = vinv_d.transpose() * &resid;
        acc.info += d.transpose() * &vinv_d;
        acc.meat += &u_i * u_i.transpose();
        acc.score += u_i;
        acc.pearson_ss += resid
            .iter()
            .zip(v.iter())
            .map(|(r, vv)| r * r / vv)
            .sum::<f64>();
        acc.n_obs += p.y.len();
    }
    symmetrize(&mut acc.info);
    symmetrize(&mut acc.meat);
    Ok(acc)
}

fn dispersion_from(pearson_ss: f64, n_obs: usize, k: usize) -> f64 {
    pearson_ss / n_obs.saturating_sub(k).max(1) as f64
}

/// φ̂ = Σ r²/v(μ) / (total observations − k).
pub fn estimate_dispersion(
    clusters: &[ClusterData],
    model: &MeanModelSpec,
    beta: &DVector<f64>,
) -> Result<f64> {
    let preps = prepare(clusters, model)?;
    let mut ss = 0.0;
    let mut n = 0;
    for (i, p) in preps.iter().enumerate() {
        let (mu, _, v) = cluster_mean(p, model, beta, i)?;
        ss +=
            p.y.iter()
                .zip(mu.iter())
                .zip(v.iter())
                .map(|((y, m), vv)| (y - m) * (y - m) / vv)
                .sum::<f64>();
        n += p.y.len();
    }
    Ok(dispersion_from(ss, n, beta.len()))
}

/// Pearson residuals `(Y − μ̂)/√(φ·v(μ̂))` per cluster.
pub fn pearson_residuals(
    clusters: &[ClusterData],
    model: &MeanModelSpec,
    beta: &DVector<f64>,
    dispersion: f64,
) -> Result<Vec<ResidualVector>> {
    let preps = prepare(clusters, model)?;
    preps
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (mu, _, v) = cluster_mean(p, model, beta, i)?;
            let mut values = Vec::with_capacity(p.y.len());
            for (row, ((y, m), vv)) in p.y.iter().zip(mu.iter()).zip(v.iter()).enumerate() {
                let var = dispersion * vv;
                if var.is_nan() || var <= 0.0 {
                    return Err(GeeError::NonPositiveVariance { cluster: i, row });
                }
                values.push((y - m) / var.sqrt());
            }
            Ok(ResidualVector {
                values,
                ear_index: p.ear.clone(),
                freq_index: p.freq.clone(),
            })
        })
        .collect()
}

/// The estimating function U(β) for a fixed working correlation.
pub fn score(
    clusters: &[ClusterData],
    model: &MeanModelSpec,
    corr: &CorrelationSpec,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let preps = prepare(clusters, model)?;
    Ok(accumulate(&preps, model, corr, beta)?.score)
}

fn initial_beta(preps: &[Prepared], model: &MeanModelSpec) -> Result<DVector<f64>> {
    let k = model.n_coefficients();
    if model.link != Link::Identity {
        return Ok(DVector::zeros(k));
    }
    let mut xtx = DMatrix::zeros(k, k);
    let mut xty = DVector::zeros(k);
    for p in preps {
        xtx += p.design.transpose() * &p.design;
        xty += p.design.transpose() * &p.y;
    }
    let chol = factor_information(&xtx, &model.coefficient_names())?;
    Ok(chol.solve(&xty))
}

fn covariances(
    acc: &Accumulated,
    model: &MeanModelSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let k = acc.score.len();
    let chol = factor_information(&acc.info, &model.coefficient_names())?;
    let bread = chol.inverse();
    let phi = dispersion_from(acc.pearson_ss, acc.n_obs, k);
    let mut naive = &bread * phi;
    let mut robust = &bread * &acc.meat * &bread;
    symmetrize(&mut naive);
    symmetrize(&mut robust);
    Ok((naive, robust, phi))
}

/// Solves `U(β) = 0` by Fisher scoring at a fixed working correlation.
///
/// Without `beta_init` the iteration starts from least squares (identity
/// link) or zero. A fit that exhausts `max_iter` is returned with
/// `converged = false`.
pub fn solve_gee(
    clusters: &[ClusterData],
    model: &MeanModelSpec,
    corr: &CorrelationSpec,
    beta_init: Option<&DVector<f64>>,
    options: &GeeOptions,
) -> Result<GeeFit> {
    if clusters.is_empty() {
        return Err(GeeError::InsufficientData("no clusters".into()));
    }
    let preps = prepare(clusters, model)?;
    let k = model.n_coefficients();
    let mut beta = match beta_init {
        Some(b) if b.len() != k => {
            return Err(GeeError::DimensionMismatch(format!(
                "initial beta of length {} for {} coefficients",
                b.len(),
                k
            )))
        }
        Some(b) => b.clone(),
        None => initial_beta(&preps, model)?,
    };

    let mut iterations = 0;
    let mut converged = false;
    let mut acc = accumulate(&preps, model, corr, &beta)?;
    loop {
        if acc.score.amax() < options.tolerance {
            converged = true;
            break;
        }
        if iterations == options.max_iter {
            break;
        }
        let chol = factor_information(&acc.info, &model.coefficient_names())?;
        let step = chol.solve(&acc.score);
        beta += &step;
        iterations += 1;
        acc = accumulate(&preps, model, corr, &beta)?;
        if step.amax() <= f64::EPSILON * beta.amax().max(1.0)
            && acc.score.amax() >= options.tolerance
        {
            // stalled at rounding level
            break;
        }
    }

    let (naive_cov, sandwich_cov, dispersion_hat) = covariances(&acc, model)?;
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!(
            "mean model did not converge after {iterations} iterations (|U|inf = {:.3e})",
            acc.score.amax()
        ));
    }
    Ok(GeeFit {
        beta_hat: beta,
        coefficient_names: model.coefficient_names(),
        correlation: corr.clone(),
        dispersion_hat,
        naive_cov,
        sandwich_cov,
        n_clusters: clusters.len(),
        n_observations: acc.n_obs,
        iterations,
        converged,
        final_score_norm: acc.score.amax(),
        alpha: None,
        rounds: 0,
        warnings,
    })
}

/// Model-based and sandwich covariance at a fitted β.
pub fn sandwich(
    clusters: &[ClusterData],
    model: &MeanModelSpec,
    fit: &GeeFit,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let preps = prepare(clusters, model)?;
    let acc = accumulate(&preps, model, &fit.correlation, &fit.beta_hat)?;
    let (naive, robust, _) = covariances(&acc, model)?;
    Ok((naive, robust))
}

const ROUND_TOLERANCE: f64 = 1e-8;

/// Standard GEE: alternate moment estimation of the working correlation with
/// the mean-model solve until β stabilizes.
pub fn fit_gee1(
    clusters: &[ClusterData],
    model: &MeanModelSpec,
    kind: CorrelationKind,
    options: &GeeOptions,
) -> Result<GeeFit> {
    let independent = solve_gee(
        clusters,
        model,
        &CorrelationSpec::Independence,
        None,
        options,
    )?;
    match kind {
        CorrelationKind::Independence => return Ok(independent),
        CorrelationKind::EarFreq => {
            return Err(GeeError::InvalidArgument(
                "the ear-frequency structure is fitted by fit_gee15".into(),
            ))
        }
        _ => {}
    }
    let k = model.n_coefficients();
    let mut fit = independent;
    let max_rounds = 50;
    let mut stable = false;
    for round in 1..=max_rounds {
        let phi = estimate_dispersion(clusters, model, &fit.beta_hat)?;
        let residuals = pearson_residuals(clusters, model, &fit.beta_hat, phi)?;
        let corr = moment_estimate(&residuals, kind, k)?;
        let next = solve_gee(clusters, model, &corr, Some(&fit.beta_hat), options)?;
        let change = (&next.beta_hat - &fit.beta_hat).amax();
        fit = next;
        fit.rounds = round;
        if change < ROUND_TOLERANCE {
            stable = true;
            break;
        }
    }
    if !stable {
        fit.converged = false;
        fit.warnings.push(format!(
            "correlation/mean alternation did not stabilize in {max_rounds} rounds"
        ));
    }
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gee15Options {
    pub gee: GeeOptions,
    pub alpha: AlphaSolverOptions,
    /// Cap on repetitions of steps 2–3 when iterating to a stable β.
    pub max_rounds: usize,
    /// Run exactly this many rounds of steps 2–3 instead.
    pub exact_rounds: Option<usize>,
}

impl Default for Gee15Options {
    fn default() -> Self {
        Self {
            gee: GeeOptions::default(),
            alpha: AlphaSolverOptions::default(),
            max_rounds: 20,
            exact_rounds: None,
        }
    }
}

/// GEE1.5 with the ear-frequency structured working correlation.
///
/// 1. solve the mean model under independence;
/// 2. solve the second-order equations for α at the current β;
/// 3. re-solve the mean model with `R(α̂)`.
///
/// Steps 2–3 repeat until β changes by less than 1e-8 (or for exactly
/// `exact_rounds`). If α fails to converge the fit falls back to a moment
/// estimated exchangeable correlation and records a warning.
pub fn fit_gee15(
    clusters: &[ClusterData],
    model: &MeanModelSpec,
    options: &Gee15Options,
) -> Result<GeeFit> {
    if clusters.len() < 2 {
        return Err(GeeError::InsufficientData(format!(
            "GEE1.5 needs at least 2 clusters, got {}",
            clusters.len()
        )));
    }
    let initial = solve_gee(
        clusters,
        model,
        &CorrelationSpec::Independence,
        None,
        &options.gee,
    )?;
    let mut beta = initial.beta_hat.clone();
    let mut eta = AlphaTransformed::default();
    let rounds = options.exact_rounds.unwrap_or(options.max_rounds).max(1);
    let mut fit = initial;
    let mut stable = options.exact_rounds.is_some();

    for round in 1..=rounds {
        let phi = estimate_dispersion(clusters, model, &beta)?;
        let residuals = pearson_residuals(clusters, model, &beta, phi)?;
        let solution = match solve_alpha_from_residuals(&residuals, eta, &options.alpha) {
            Ok(s) => s,
            Err(err @ GeeError::AlphaNotConverged { .. }) => {
                let mut fallback =
                    fit_gee1(clusters, model, CorrelationKind::Exchangeable, &options.gee)?;
                fallback.warnings.push(format!(
                    "{err}; fell back to exchangeable working correlation"
                ));
                return Ok(fallback);
            }
            Err(e) => return Err(e),
        };
        eta = solution.eta;
        let next = solve_gee(clusters, model, &solution.spec(), Some(&beta), &options.gee)?;
        let change = (&next.beta_hat - &beta).amax();
        beta = next.beta_hat.clone();
        fit = next;
        fit.alpha = Some(solution);
        fit.rounds = round;
        if options.exact_rounds.is_none() && change < ROUND_TOLERANCE {
            stable = true;
            break;
        }
    }
    if !stable {
        fit.converged = false;
        fit.warnings.push(format!(
            "GEE1.5 rounds did not stabilize within {rounds} rounds"
        ));
    }
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldInterval {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `β̂ ± z·SE` intervals from the sandwich covariance.
pub fn wald_intervals(fit: &GeeFit, level: f64) -> Result<Vec<WaldInterval>> {
    wald_intervals_using(fit, level, SeKind::Sandwich)
}

pub fn wald_intervals_using(fit: &GeeFit, level: f64, kind: SeKind) -> Result<Vec<WaldInterval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(GeeError::InvalidArgument(format!(
            "confidence level must lie in (0,1), got {level}"
        )));
    }
    let z = normal_quantile(0.5 * (1.0 + level));
    let se = fit.se(kind);
    Ok(fit
        .beta_hat
        .iter()
        .zip(se.iter())
        .zip(&fit.coefficient_names)
        .map(|((&b, &s), name)| WaldInterval {
            name: name.clone(),
            estimate: b,
            se: s,
            lower: b - z * s,
            upper: b + z * s,
        })
        .collect())
}
