//! Monte Carlo comparison of worse-ear, average-ear, both-ear and structured
//! GEE estimators on bilateral two-frequency data.
//!
//! Data-generating process for participant `i`, ear `j`, frequency `q ∈ {1,2}`:
//!
//! ```text
//! Y_ijq = β0 + β1·I(q=2) + β2·X_i + β3·X_i·I(q=2) + θ_ijq·Z_ijq + ε_ijq
//! θ_i ~ N(θ̄·1, A·R(α)·A),   ε_i ~ N(0, Σε)
//! ```
//!
//! Each replicate draws from its own ChaCha stream seeded with
//! `base_seed ^ replicate`, so every method sees identical data and results do
//! not depend on the thread schedule. Within a cluster the draw order is X,
//! then Z in row order, then θ, then ε.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{CorrelationKind, PSD_TOLERANCE};
use crate::error::{GeeError, Result};
use crate::estimator::{fit_gee1, fit_gee15, wald_intervals_using, Gee15Options, GeeFit, SeKind};
use crate::linalg::{min_eigenvalue, psd_sqrt};
use crate::model::{ClusterData, Covariate, MeanModelSpec};
use crate::reduction::{average_ear, worse_ear};

/// Frequency-specific parameters of the data-generating correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpAlpha {
    pub alpha0: f64,
    pub alpha_f1: f64,
    pub alpha_f2: f64,
    pub alpha_e: f64,
}

impl DgpAlpha {
    pub fn new(alpha0: f64, alpha_f1: f64, alpha_f2: f64, alpha_e: f64) -> Self {
        Self {
            alpha0,
            alpha_f1,
            alpha_f2,
            alpha_e,
        }
    }
}

/// Correlation of the random ear-level slopes, cells ordered
/// `(ear1,f1), (ear2,f1), (ear1,f2), (ear2,f2)`.
pub fn dgp_correlation(alpha: &DgpAlpha) -> Result<DMatrix<f64>> {
    let a = [alpha.alpha0, alpha.alpha_f1, alpha.alpha_f2, alpha.alpha_e];
    if !a.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(GeeError::InvalidArgument(format!(
            "data-generating alphas must lie in [0,1], got {a:?}"
        )));
    }
    let ears = [1, 2, 1, 2];
    let freqs = [1, 1, 2, 2];
    let r = DMatrix::from_fn(4, 4, |i, j| {
        if i == j {
            1.0
        } else if freqs[i] == freqs[j] {
            let af = if freqs[i] == 1 {
                alpha.alpha_f1
            } else {
                alpha.alpha_f2
            };
            1.0 - alpha.alpha0 * af
        } else if ears[i] == ears[j] {
            1.0 - alpha.alpha0 * alpha.alpha_e
        } else {
            1.0 - alpha.alpha0
        }
    });
    let min_eig = min_eigenvalue(&r);
    if min_eig < -PSD_TOLERANCE {
        return Err(GeeError::NotPositiveSemidefinite {
            spec: format!("dgp{a:?}"),
            min_eigenvalue: min_eig,
        });
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum CovariateLaw {
    Normal { mean: f64, sd: f64 },
}

impl Default for CovariateLaw {
    fn default() -> Self {
        CovariateLaw::Normal { mean: 0.0, sd: 1.0 }
    }
}

impl CovariateLaw {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            CovariateLaw::Normal { mean, sd } => {
                let u: f64 = rng.sample(StandardNormal);
                mean + sd * u
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScenario {
    pub name: String,
    /// (β0, β1, β2, β3)
    pub beta_true: [f64; 4],
    pub sigma_eps: [[f64; 4]; 4],
    /// Common mean of the ear-level slopes.
    pub theta_mean: f64,
    /// Diagonal of the slope scale matrix A.
    pub theta_scale: [f64; 4],
    pub alpha_dgp: DgpAlpha,
    pub n_participants: usize,
    pub n_replicates: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub x_law: CovariateLaw,
    #[serde(default)]
    pub z_law: CovariateLaw,
}

const SIGMA_EPS: [[f64; 4]; 4] = [
    [1.0, 0.5, 0.9, 0.6],
    [0.5, 1.0, 0.6, 0.9],
    [0.9, 0.6, 2.25, 1.35],
    [0.6, 0.9, 1.35, 2.25],
];

impl SimulationScenario {
    /// Scenarios 1–4, from very strong to weak slope correlation.
    pub fn preset(
        id: u8,
        n_participants: usize,
        n_replicates: usize,
        base_seed: u64,
    ) -> Result<Self> {
        let (name, alpha) = match id {
            1 => (
                "scenario-1 (very strong)",
                DgpAlpha::new(0.2, 0.3, 0.7, 0.55),
            ),
            2 => ("scenario-2 (strong)", DgpAlpha::new(0.4, 0.8, 0.9, 0.6)),
            3 => ("scenario-3 (moderate)", DgpAlpha::new(0.6, 0.8, 0.9, 0.65)),
            4 => ("scenario-4 (weak)", DgpAlpha::new(0.8, 0.8, 0.9, 0.8)),
            other => {
                return Err(GeeError::InvalidArgument(format!(
                    "scenario id must be 1..=4, got {other}"
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            beta_true: [2.0, -0.7, -1.2, 0.9],
            sigma_eps: SIGMA_EPS,
            theta_mean: -0.8,
            theta_scale: [0.8, 1.9, 0.6, 2.5],
            alpha_dgp: alpha,
            n_participants,
            n_replicates,
            base_seed,
            x_law: CovariateLaw::default(),
            z_law: CovariateLaw::default(),
        })
    }

    pub fn sigma_eps_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(4, 4, |i, j| self.sigma_eps[i][j])
    }

    /// Σθ = A·R(α)·A.
    pub fn theta_covariance(&self) -> Result<DMatrix<f64>> {
        let r = dgp_correlation(&self.alpha_dgp)?;
        let a = &self.theta_scale;
        Ok(DMatrix::from_fn(4, 4, |i, j| a[i] * r[(i, j)] * a[j]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_participants < 2 {
            return Err(GeeError::InvalidArgument(
                "a scenario needs at least 2 participants".into(),
            ));
        }
        if self.n_replicates == 0 {
            return Err(GeeError::InvalidArgument(
                "a scenario needs at least 1 replicate".into(),
            ));
        }
        let s = self.sigma_eps_matrix();
        if (&s - s.transpose()).amax() > 0.0 {
            return Err(GeeError::InvalidArgument(
                "sigma_eps must be symmetric".into(),
            ));
        }
        let min_eig = min_eigenvalue(&s);
        if min_eig < -PSD_TOLERANCE {
            return Err(GeeError::NotPositiveSemidefinite {
                spec: "sigma_eps".into(),
                min_eigenvalue: min_eig,
            });
        }
        self.theta_covariance().map(|_| ())
    }

    /// Mean model fitted by every method: intercept, frequency 2, X, Z and
    /// X×frequency 2.
    pub fn model() -> MeanModelSpec {
        MeanModelSpec::new(
            2,
            vec![
                Covariate::participant("X", true),
                Covariate::ear("Z", false),
            ],
        )
    }

    /// True coefficients in the column order of [`Self::model`].
    pub fn true_coefficients(&self) -> [f64; 5] {
        let b = self.beta_true;
        [b[0], b[1], b[2], self.theta_mean, b[3]]
    }
}

/// Display labels for the simulation coefficients, in model column order.
pub const COEFFICIENT_LABELS: [&str; 5] = ["beta0", "beta1", "beta2", "theta", "beta3"];

/// Precomputed square-root factors for drawing clusters of one scenario.
pub struct ScenarioSampler<'a> {
    scenario: &'a SimulationScenario,
    theta_root: DMatrix<f64>,
    eps_root: DMatrix<f64>,
}

impl<'a> ScenarioSampler<'a> {
    pub fn new(scenario: &'a SimulationScenario) -> Result<Self> {
        scenario.validate()?;
        Ok(Self {
            scenario,
            theta_root: psd_sqrt(&scenario.theta_covariance()?),
            eps_root: psd_sqrt(&scenario.sigma_eps_matrix()),
        })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R, participant: usize) -> ClusterData {
        let sc = self.scenario;
        let x = sc.x_law.draw(rng);
        let z: [f64; 4] = std::array::from_fn(|_| sc.z_law.draw(rng));
        let std4 = |rng: &mut R| DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let theta = DVector::from_element(4, sc.theta_mean) + &self.theta_root * std4(rng);
        let eps = &self.eps_root * std4(rng);

        let [b0, b1, b2, b3] = sc.beta_true;
        let freqs = [1usize, 1, 2, 2];
        let y: Vec<f64> = (0..4)
            .map(|p| {
                let q2 = if freqs[p] == 2 { 1.0 } else { 0.0 };
                b0 + b1 * q2 + b2 * x + b3 * x * q2 + theta[p] * z[p] + eps[p]
            })
            .collect();
        let raw = DMatrix::from_fn(4, 2, |p, c| if c == 0 { x } else { z[p] });
        ClusterData::new(
            format!("{participant}"),
            y,
            raw,
            vec![1, 2, 1, 2],
            freqs.to_vec(),
        )
        .expect("simulated clusters are complete and canonical")
    }
}

/// Draws one participant from the scenario's data-generating process.
pub fn simulate_cluster<R: Rng>(scenario: &SimulationScenario, rng: &mut R) -> Result<ClusterData> {
    Ok(ScenarioSampler::new(scenario)?.draw(rng, 0))
}

/// Random stream for replicate `s`.
pub fn replicate_rng(base_seed: u64, replicate: usize) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(base_seed ^ replicate as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "worse-ind")]
    WorseInd,
    #[serde(rename = "avg-ind")]
    AvgInd,
    #[serde(rename = "both-ind")]
    BothInd,
    #[serde(rename = "both-exch")]
    BothExch,
    #[serde(rename = "both-uns")]
    BothUns,
    #[serde(rename = "proposed")]
    Proposed,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::WorseInd,
        Method::AvgInd,
        Method::BothInd,
        Method::BothExch,
        Method::BothUns,
        Method::Proposed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::WorseInd => "worse-ind",
            Method::AvgInd => "avg-ind",
            Method::BothInd => "both-ind",
            Method::BothExch => "both-exch",
            Method::BothUns => "both-uns",
            Method::Proposed => "proposed",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::WorseInd => "Worse-ear (ind.)",
            Method::AvgInd => "Average-ear (ind.)",
            Method::BothInd => "Both-ear (ind.)",
            Method::BothExch => "Both-ear (exch.)",
            Method::BothUns => "Both-ear (uns.)",
            Method::Proposed => "Proposed",
        }
    }

    /// Fits this method to complete bilateral clusters.
    pub fn fit(
        self,
        clusters: &[ClusterData],
        model: &MeanModelSpec,
        options: &Gee15Options,
    ) -> Result<GeeFit> {
        let reduced = |f: fn(&ClusterData) -> Result<crate::reduction::ReducedCluster>| {
            clusters
                .iter()
                .map(|c| f(c).map(|r| r.to_cluster()))
                .collect::<Result<Vec<_>>>()
        };
        match self {
            Method::WorseInd => fit_gee1(
                &reduced(worse_ear)?,
                model,
                CorrelationKind::Independence,
                &options.gee,
            ),
            Method::AvgInd => fit_gee1(
                &reduced(average_ear)?,
                model,
                CorrelationKind::Independence,
                &options.gee,
            ),
            Method::BothInd => {
                fit_gee1(clusters, model, CorrelationKind::Independence, &options.gee)
            }
            Method::BothExch => {
                fit_gee1(clusters, model, CorrelationKind::Exchangeable, &options.gee)
            }
            Method::BothUns => {
                fit_gee1(clusters, model, CorrelationKind::Unstructured, &options.gee)
            }
            Method::Proposed => fit_gee15(clusters, model, options),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = GeeError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| GeeError::InvalidArgument(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Worker threads; `None` uses the available parallelism.
    pub threads: Option<usize>,
    pub ci_level: f64,
    pub ci_se: SeKind,
    pub gee15: Gee15Options,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            threads: None,
            ci_level: 0.95,
            ci_se: SeKind::Sandwich,
            gee15: Gee15Options::default(),
        }
    }
}

/// One method's estimates in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEstimate {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    /// Parallel to the report's method list; `Err` holds the failure category.
    pub outcomes: Vec<std::result::Result<MethodEstimate, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientCharacteristics {
    pub name: String,
    pub label: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub relative_bias_pct: f64,
    pub ese: f64,
    pub mean_se: f64,
    pub coverage_rate_pct: f64,
    /// ESE of the proposed method divided by this method's ESE.
    pub relative_efficiency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingCharacteristics {
    pub method: Method,
    pub n_used: usize,
    pub n_failed: usize,
    pub failures: BTreeMap<String, usize>,
    pub coefficients: Vec<CoefficientCharacteristics>,
}

impl OperatingCharacteristics {
    pub fn coefficient(&self, label: &str) -> Option<&CoefficientCharacteristics> {
        self.coefficients
            .iter()
            .find(|c| c.label == label || c.name == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: SimulationScenario,
    pub methods: Vec<Method>,
    pub characteristics: Vec<OperatingCharacteristics>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub replicates: Vec<ReplicateRecord>,
}

impl ScenarioReport {
    pub fn method(&self, m: Method) -> Option<&OperatingCharacteristics> {
        self.characteristics.iter().find(|c| c.method == m)
    }
}

fn failure_category(err: &GeeError) -> String {
    match err {
        GeeError::NotPositiveSemidefinite { .. } => "working correlation not PSD",
        GeeError::RankDeficient { .. } | GeeError::Singular(_) => "singular information",
        GeeError::InsufficientData(_) => "insufficient data",
        GeeError::NonPositiveVariance { .. } => "non-positive variance",
        GeeError::AlphaNotConverged { .. } => "alpha not converged",
        _ => "invalid input",
    }
    .to_string()
}

fn fit_one(
    method: Method,
    clusters: &[ClusterData],
    model: &MeanModelSpec,
    options: &RunOptions,
) -> std::result::Result<MethodEstimate, String> {
    let fit = method
        .fit(clusters, model, &options.gee15)
        .map_err(|e| failure_category(&e))?;
    if !fit.converged {
        return Err("not converged".into());
    }
    let ci = wald_intervals_using(&fit, options.ci_level, options.ci_se)
        .map_err(|e| failure_category(&e))?;
    Ok(MethodEstimate {
        beta: ci.iter().map(|c| c.estimate).collect(),
        se: ci.iter().map(|c| c.se).collect(),
        lower: ci.iter().map(|c| c.lower).collect(),
        upper: ci.iter().map(|c| c.upper).collect(),
    })
}

/// Simulates and fits replicate `s` with every method.
pub fn run_replicate(
    scenario: &SimulationScenario,
    sampler: &ScenarioSampler<'_>,
    methods: &[Method],
    options: &RunOptions,
    replicate: usize,
) -> ReplicateRecord {
    let mut rng = replicate_rng(scenario.base_seed, replicate);
    let clusters: Vec<ClusterData> = (0..scenario.n_participants)
        .map(|i| sampler.draw(&mut rng, i))
        .collect();
    let model = SimulationScenario::model();
    ReplicateRecord {
        replicate,
        outcomes: methods
            .iter()
            .map(|&m| fit_one(m, &clusters, &model, options))
            .collect(),
    }
}

/// Relative bias, ESE, mean SE and coverage for each coefficient.
///
/// ESE uses the `S − 1` denominator and is 0 for a single replicate.
pub fn summarize(
    estimates: &[&MethodEstimate],
    truth: &[f64],
    names: &[String],
    labels: &[String],
) -> Vec<CoefficientCharacteristics> {
    let s = estimates.len() as f64;
    (0..truth.len())
        .map(|j| {
            let beta = truth[j];
            let values: Vec<f64> = estimates.iter().map(|e| e.beta[j]).collect();
            let mean = values.iter().sum::<f64>() / s;
            let rel_bias = values.iter().map(|b| (b - beta) / beta).sum::<f64>() / s * 100.0;
            let ese = if estimates.len() > 1 {
                (values.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (s - 1.0)).sqrt()
            } else {
                0.0
            };
            let mean_se = estimates.iter().map(|e| e.se[j]).sum::<f64>() / s;
            let covered = estimates
                .iter()
                .filter(|e| e.lower[j] <= beta && beta <= e.upper[j])
                .count();
            CoefficientCharacteristics {
                name: names[j].clone(),
                label: labels[j].clone(),
                truth: beta,
                mean_estimate: mean,
                relative_bias_pct: rel_bias,
                ese,
                mean_se,
                coverage_rate_pct: covered as f64 / s * 100.0,
                relative_efficiency: None,
            }
        })
        .collect()
}

/// Runs every replicate of a scenario and aggregates operating
/// characteristics per method. Replicates run in parallel; records are reduced
/// in replicate order.
pub fn run_scenario(
    scenario: &SimulationScenario,
    methods: &[Method],
    options: &RunOptions,
) -> Result<ScenarioReport> {
    if methods.is_empty() {
        return Err(GeeError::InvalidArgument("no methods requested".into()));
    }
    if !(options.ci_level > 0.0 && options.ci_level < 1.0) {
        return Err(GeeError::InvalidArgument(format!(
            "confidence level must lie in (0,1), got {}",
            options.ci_level
        )));
    }
    let sampler = ScenarioSampler::new(scenario)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = options.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| GeeError::InvalidArgument(format!("thread pool: {e}")))?;
    let replicates: Vec<ReplicateRecord> = pool.install(|| {
        (0..scenario.n_replicates)
            .into_par_iter()
            .map(|s| run_replicate(scenario, &sampler, methods, options, s))
            .collect()
    });
    Ok(aggregate(scenario, methods, replicates))
}

/// Reduces replicate records into a report.
pub fn aggregate(
    scenario: &SimulationScenario,
    methods: &[Method],
    replicates: Vec<ReplicateRecord>,
) -> ScenarioReport {
    let truth = scenario.true_coefficients();
    let names = SimulationScenario::model().coefficient_names();
    let labels: Vec<String> = COEFFICIENT_LABELS.iter().map(|s| s.to_string()).collect();
    let mut warnings = Vec::new();
    if scenario.n_replicates == 1 {
        warnings
            .push("only one replicate: empirical standard errors are reported as 0".to_string());
    }

    let mut characteristics: Vec<OperatingCharacteristics> = methods
        .iter()
        .enumerate()
        .map(|(m_idx, &method)| {
            let mut failures = BTreeMap::new();
            let mut ok = Vec::new();
            for rec in &replicates {
                match &rec.outcomes[m_idx] {
                    Ok(e) => ok.push(e),
                    Err(reason) => *failures.entry(reason.clone()).or_insert(0) += 1,
                }
            }
            let n_failed = replicates.len() - ok.len();
            if ok.is_empty() {
                warnings.push(format!("{} failed on every replicate", method.as_str()));
            } else if n_failed > 0 {
                warnings.push(format!(
                    "{} failed on {n_failed} of {} replicates; excluded from its summaries",
                    method.as_str(),
                    replicates.len()
                ));
            }
            let coefficients = if ok.is_empty() {
                Vec::new()
            } else {
                summarize(&ok, &truth, &names, &labels)
            };
            OperatingCharacteristics {
                method,
                n_used: ok.len(),
                n_failed,
                failures,
                coefficients,
            }
        })
        .collect();

    let reference: Option<Vec<f64>> = characteristics
        .iter()
        .find(|c| c.method == Method::Proposed && !c.coefficients.is_empty())
        .map(|c| c.coefficients.iter().map(|k| k.ese).collect());
    if let Some(reference) = reference {
        for oc in characteristics.iter_mut() {
            for (coef, &ref_ese) in oc.coefficients.iter_mut().zip(&reference) {
                if coef.ese > 0.0 && ref_ese > 0.0 {
                    coef.relative_efficiency = Some(ref_ese / coef.ese);
                }
            }
        }
    }

    ScenarioReport {
        scenario: scenario.clone(),
        methods: methods.to_vec(),
        characteristics,
        warnings,
        replicates,
    }
}
