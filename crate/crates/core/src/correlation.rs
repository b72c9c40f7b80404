//! Working correlation structures and their estimators.
//!
//! The ear-by-frequency structure has three parameters `(α0, αe, αf)` in
//! `[0, 1]`. Correlations are
//!
//! | pair                          | ρ           |
//! |-------------------------------|-------------|
//! | different ear, same frequency | 1 − α0·αf   |
//! | same ear, different frequency | 1 − α0·αe   |
//! | different ear and frequency   | 1 − α0      |
//!
//! Estimation works on the logit scale `η = log(α / (1 − α))` so that the
//! constraints hold automatically.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GeeError, Result};
use crate::estimator::{estimate_dispersion, pearson_residuals};
use crate::linalg::{min_eigenvalue, spd_inverse};
use crate::model::{cell_position, logistic, ClusterData, MeanModelSpec};

/// Tolerance on the minimum eigenvalue of a materialized correlation matrix.
pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationKind {
    Independence,
    Exchangeable,
    Unstructured,
    EarFreq,
}

impl CorrelationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CorrelationKind::Independence => "independence",
            CorrelationKind::Exchangeable => "exchangeable",
            CorrelationKind::Unstructured => "unstructured",
            CorrelationKind::EarFreq => "ear-freq",
        }
    }
}

impl std::str::FromStr for CorrelationKind {
    type Err = GeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independence" | "ind" => Ok(CorrelationKind::Independence),
            "exchangeable" | "exch" => Ok(CorrelationKind::Exchangeable),
            "unstructured" | "uns" => Ok(CorrelationKind::Unstructured),
            "ear-freq" | "ear_freq" | "structured" => Ok(CorrelationKind::EarFreq),
            other => Err(GeeError::InvalidArgument(format!(
                "unknown correlation structure '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarFreqAlpha {
    pub alpha0: f64,
    pub alpha_ear: f64,
    pub alpha_freq: f64,
}

impl EarFreqAlpha {
    pub fn new(alpha0: f64, alpha_ear: f64, alpha_freq: f64) -> Self {
        Self {
            alpha0,
            alpha_ear,
            alpha_freq,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha0, self.alpha_ear, self.alpha_freq]
    }

    fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|a| (0.0..=1.0).contains(a)) {
            Ok(())
        } else {
            Err(GeeError::InvalidArgument(format!(
                "ear-frequency parameters must lie in [0,1], got {:?}",
                self.as_array()
            )))
        }
    }

    /// Correlation between two distinct cells.
    pub fn rho(&self, same_ear: bool, same_freq: bool) -> f64 {
        let mut prod = self.alpha0;
        if same_ear {
            prod *= self.alpha_ear;
        }
        if same_freq {
            prod *= self.alpha_freq;
        }
        1.0 - prod
    }
}

/// Unconstrained parameterization of [`EarFreqAlpha`]: `α = logistic(η)`
/// componentwise, ordered `(α0, αe, αf)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlphaTransformed {
    pub eta: [f64; 3],
}

impl AlphaTransformed {
    pub fn new(eta: [f64; 3]) -> Self {
        Self { eta }
    }

    /// Inverse transform; defined only for α strictly inside (0, 1).
    pub fn from_alpha(alpha: &EarFreqAlpha) -> Result<Self> {
        let mut eta = [0.0; 3];
        for (e, a) in eta.iter_mut().zip(alpha.as_array()) {
            if !(a > 0.0 && a < 1.0) {
                return Err(GeeError::InvalidArgument(format!(
                    "alpha component {a} has no logit-scale representation"
                )));
            }
            *e = (a / (1.0 - a)).ln();
        }
        Ok(Self { eta })
    }

    pub fn alpha(&self) -> EarFreqAlpha {
        EarFreqAlpha::new(
            logistic(self.eta[0]),
            logistic(self.eta[1]),
            logistic(self.eta[2]),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CorrelationSpec {
    Independence,
    Exchangeable {
        rho: f64,
    },
    /// Full matrix over the canonical cell positions of a complete cluster
    /// (`2Q × 2Q`); clusters use the sub-matrix of the cells they contain.
    Unstructured {
        matrix: DMatrix<f64>,
    },
    EarFreq(EarFreqAlpha),
}

impl CorrelationSpec {
    pub fn kind(&self) -> CorrelationKind {
        match self {
            CorrelationSpec::Independence => CorrelationKind::Independence,
            CorrelationSpec::Exchangeable { .. } => CorrelationKind::Exchangeable,
            CorrelationSpec::Unstructured { .. } => CorrelationKind::Unstructured,
            CorrelationSpec::EarFreq(_) => CorrelationKind::EarFreq,
        }
    }

    fn describe(&self) -> String {
        match self {
            CorrelationSpec::Independence => "independence".into(),
            CorrelationSpec::Exchangeable { rho } => format!("exchangeable(rho={rho:.4})"),
            CorrelationSpec::Unstructured { matrix } => {
                format!("unstructured({}x{})", matrix.nrows(), matrix.ncols())
            }
            CorrelationSpec::EarFreq(a) => format!(
                "ear-freq(alpha0={:.4}, alpha_ear={:.4}, alpha_freq={:.4})",
                a.alpha0, a.alpha_ear, a.alpha_freq
            ),
        }
    }
}

/// Working correlation matrix for a cluster with the given cell labels.
pub fn materialize(
    spec: &CorrelationSpec,
    ear_index: &[usize],
    freq_index: &[usize],
) -> Result<DMatrix<f64>> {
    let n = ear_index.len();
    if freq_index.len() != n {
        return Err(GeeError::DimensionMismatch(format!(
            "{} ear labels but {} frequency labels",
            n,
            freq_index.len()
        )));
    }
    let r = match spec {
        CorrelationSpec::Independence => return Ok(DMatrix::identity(n, n)),
        CorrelationSpec::Exchangeable { rho } => {
            DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { *rho })
        }
        CorrelationSpec::Unstructured { matrix } => {
            let pos: Vec<usize> = ear_index
                .iter()
                .zip(freq_index)
                .map(|(&e, &f)| cell_position(e, f))
                .collect();
            if let Some(&p) = pos.iter().find(|&&p| p >= matrix.nrows()) {
                return Err(GeeError::DimensionMismatch(format!(
                    "cell position {p} outside {}x{} unstructured matrix",
                    matrix.nrows(),
                    matrix.ncols()
                )));
            }
            DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    1.0
                } else {
                    matrix[(pos[i], pos[j])]
                }
            })
        }
        CorrelationSpec::EarFreq(alpha) => {
            alpha.validate()?;
            DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    1.0
                } else {
                    alpha.rho(ear_index[i] == ear_index[j], freq_index[i] == freq_index[j])
                }
            })
        }
    };
    let min_eig = min_eigenvalue(&r);
    if min_eig < -PSD_TOLERANCE {
        return Err(GeeError::NotPositiveSemidefinite {
            spec: spec.describe(),
            min_eigenvalue: min_eig,
        });
    }
    Ok(r)
}

/// Pearson residuals of one cluster together with their cell labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVector {
    pub values: Vec<f64>,
    pub ear_index: Vec<usize>,
    pub freq_index: Vec<usize>,
}

impl ResidualVector {
    /// Labels values with the canonical complete-cluster layout
    /// `(1,1), (2,1), (1,2), (2,2), ...`.
    pub fn canonical(values: Vec<f64>) -> Self {
        let ear_index = (0..values.len()).map(|p| p % 2 + 1).collect();
        let freq_index = (0..values.len()).map(|p| p / 2 + 1).collect();
        Self {
            values,
            ear_index,
            freq_index,
        }
    }
}

/// Method-of-moments correlation estimate from Pearson residuals.
///
/// `k` is the number of mean-model coefficients. The exchangeable estimate
/// pools all within-cluster pairs; the unstructured estimate is computed per
/// pair of cell positions.
pub fn moment_estimate(
    residuals: &[ResidualVector],
    kind: CorrelationKind,
    k: usize,
) -> Result<CorrelationSpec> {
    match kind {
        CorrelationKind::Exchangeable => {
            let mut total = 0.0;
            let mut n_pairs = 0usize;
            for r in residuals {
                let v = &r.values;
                for a in 0..v.len() {
                    for b in (a + 1)..v.len() {
                        total += v[a] * v[b];
                    }
                }
                n_pairs += v.len() * v.len().saturating_sub(1) / 2;
            }
            if n_pairs <= k {
                return Err(GeeError::InsufficientData(format!(
                    "{n_pairs} within-cluster pairs for {k} mean parameters"
                )));
            }
            Ok(CorrelationSpec::Exchangeable {
                rho: total / (n_pairs - k) as f64,
            })
        }
        CorrelationKind::Unstructured => {
            let dim = residuals
                .iter()
                .flat_map(|r| r.freq_index.iter())
                .max()
                .map(|&q| 2 * q)
                .unwrap_or(0);
            let mut sums = DMatrix::<f64>::zeros(dim, dim);
            let mut counts = DMatrix::<usize>::zeros(dim, dim);
            for r in residuals {
                let pos: Vec<usize> = r
                    .ear_index
                    .iter()
                    .zip(&r.freq_index)
                    .map(|(&e, &f)| cell_position(e, f))
                    .collect();
                for a in 0..pos.len() {
                    for b in (a + 1)..pos.len() {
                        let (i, j) = (pos[a].min(pos[b]), pos[a].max(pos[b]));
                        sums[(i, j)] += r.values[a] * r.values[b];
                        counts[(i, j)] += 1;
                    }
                }
            }
            let mut matrix = DMatrix::identity(dim, dim);
            for i in 0..dim {
                for j in (i + 1)..dim {
                    let c = counts[(i, j)];
                    if c == 0 {
                        matrix[(i, j)] = 0.0;
                    } else if c <= k {
                        return Err(GeeError::InsufficientData(format!(
                            "{c} clusters observe cell pair ({i},{j}) for {k} mean parameters"
                        )));
                    } else {
                        matrix[(i, j)] = sums[(i, j)] / (c - k) as f64;
                    }
                    matrix[(j, i)] = matrix[(i, j)];
                }
            }
            Ok(CorrelationSpec::Unstructured { matrix })
        }
        other => Err(GeeError::InvalidArgument(format!(
            "moment estimator is defined for exchangeable and unstructured, not {}",
            other.as_str()
        ))),
    }
}

/// Within-cluster pairs `(p1, p2)` with `p1 < p2`, in lexicographic order.
pub(crate) fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |a| ((a + 1)..n).map(move |b| (a, b)))
}

/// Structured correlations for every within-cluster pair and their Jacobian
/// with respect to η (columns ordered `α0, αe, αf`).
pub fn rho_vector_and_jacobian(
    alpha: &AlphaTransformed,
    ear_index: &[usize],
    freq_index: &[usize],
) -> (DVector<f64>, DMatrix<f64>) {
    let a = alpha.alpha();
    let dlogistic = [
        a.alpha0 * (1.0 - a.alpha0),
        a.alpha_ear * (1.0 - a.alpha_ear),
        a.alpha_freq * (1.0 - a.alpha_freq),
    ];
    let n = ear_index.len().min(freq_index.len());
    let m = n * n.saturating_sub(1) / 2;
    let mut rho = DVector::zeros(m);
    let mut jac = DMatrix::zeros(m, 3);
    for (row, (p1, p2)) in pairs(n).enumerate() {
        let same_ear = ear_index[p1] == ear_index[p2];
        let same_freq = freq_index[p1] == freq_index[p2];
        let fe = if same_ear { a.alpha_ear } else { 1.0 };
        let ff = if same_freq { a.alpha_freq } else { 1.0 };
        rho[row] = 1.0 - a.alpha0 * fe * ff;
        jac[(row, 0)] = -fe * ff * dlogistic[0];
        if same_ear {
            jac[(row, 1)] = -a.alpha0 * ff * dlogistic[1];
        }
        if same_freq {
            jac[(row, 2)] = -a.alpha0 * fe * dlogistic[2];
        }
    }
    (rho, jac)
}

/// Working covariance of the cross-product vector in the second-order
/// equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZCovariance {
    #[default]
    Identity,
    /// Inverse of the empirical covariance of the cross-products, pooled over
    /// clusters sharing a cell layout and held fixed during the solve.
    EmpiricalPooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSolverOptions {
    pub max_iter: usize,
    /// Convergence threshold on the sup-norm of the applied η update.
    pub tolerance: f64,
    /// |η| is confined to this bound, i.e. α to `[logistic(-b), logistic(b)]`.
    pub eta_bound: f64,
    pub z_covariance: ZCovariance,
}

impl Default for AlphaSolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tolerance: 1e-10,
            eta_bound: 30.0,
            z_covariance: ZCovariance::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSolution {
    pub alpha: EarFreqAlpha,
    pub eta: AlphaTransformed,
    pub iterations: usize,
    /// `sqrt(Σ (Z−ρ)ᵀ W (Z−ρ))` at the solution.
    pub residual_norm: f64,
    /// Sup-norm of the estimating function `Σ Jᵀ W (Z − ρ)`.
    pub score_norm: f64,
}

impl AlphaSolution {
    pub fn spec(&self) -> CorrelationSpec {
        CorrelationSpec::EarFreq(self.alpha)
    }
}

/// Clusters sharing a cell layout, with sufficient statistics of their
/// cross-products.
/// (ear, frequency) labels of a cluster's rows.
type CellLabels = (Vec<usize>, Vec<usize>);

struct LayoutGroup {
    ear: Vec<usize>,
    freq: Vec<usize>,
    count: f64,
    z_sum: DVector<f64>,
    /// Σ zᵢᵀ W zᵢ
    z_quad: f64,
    weight: Option<DMatrix<f64>>,
}

struct Evaluation {
    objective: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
}

fn cross_products(values: &[f64]) -> DVector<f64> {
    let n = values.len();
    DVector::from_iterator(
        n * n.saturating_sub(1) / 2,
        pairs(n).map(|(a, b)| values[a] * values[b]),
    )
}

fn group_residuals(
    residuals: &[ResidualVector],
    z_covariance: ZCovariance,
) -> Result<Vec<LayoutGroup>> {
    let mut layouts: BTreeMap<CellLabels, Vec<DVector<f64>>> = BTreeMap::new();
    for r in residuals.iter().filter(|r| r.values.len() >= 2) {
        layouts
            .entry((r.ear_index.clone(), r.freq_index.clone()))
            .or_default()
            .push(cross_products(&r.values));
    }
    let mut groups = Vec::with_capacity(layouts.len());
    for ((ear, freq), zs) in layouts {
        let m = zs[0].len();
        let count = zs.len() as f64;
        let z_sum = zs.iter().fold(DVector::zeros(m), |acc, z| acc + z);
        let weight = match z_covariance {
            ZCovariance::Identity => None,
            ZCovariance::EmpiricalPooled => {
                if zs.len() <= m {
                    return Err(GeeError::InsufficientData(format!(
                        "{} clusters cannot support a {m}x{m} cross-product covariance",
                        zs.len()
                    )));
                }
                let mean = &z_sum / count;
                let mut cov = DMatrix::zeros(m, m);
                for z in &zs {
                    let d = z - &mean;
                    cov += &d * d.transpose();
                }
                cov /= count - 1.0;
                Some(spd_inverse(&cov, "cross-product covariance")?)
            }
        };
        let z_quad = zs
            .iter()
            .map(|z| match &weight {
                None => z.norm_squared(),
                Some(w) => (z.transpose() * w * z)[(0, 0)],
            })
            .sum();
        groups.push(LayoutGroup {
            ear,
            freq,
            count,
            z_sum,
            z_quad,
            weight,
        });
    }
    Ok(groups)
}

fn evaluate(groups: &[LayoutGroup], eta: &AlphaTransformed) -> Evaluation {
    let mut objective = 0.0;
    let mut score = DVector::zeros(3);
    let mut info = DMatrix::zeros(3, 3);
    for g in groups {
        let (rho, jac) = rho_vector_and_jacobian(eta, &g.ear, &g.freq);
        let resid_sum = &g.z_sum - &rho * g.count;
        match &g.weight {
            None => {
                objective +=
                    0.5 * (g.z_quad - 2.0 * rho.dot(&g.z_sum) + g.count * rho.norm_squared());
                score += jac.transpose() * resid_sum;
                info += jac.transpose() * &jac * g.count;
            }
            Some(w) => {
                let w_rho = w * &rho;
                objective +=
                    0.5 * (g.z_quad - 2.0 * w_rho.dot(&g.z_sum) + g.count * rho.dot(&w_rho));
                let jt_w = jac.transpose() * w;
                score += &jt_w * resid_sum;
                info += jt_w * &jac * g.count;
            }
        }
    }
    Evaluation {
        objective: objective.max(0.0),
        score,
        info,
    }
}

/// Solves the second-order estimating equations `Σ Jᵢᵀ W (Zᵢ − ρᵢ) = 0` for the
/// structured parameters, given Pearson residuals.
///
/// Scoring iterations on η with step halving on the residual norm. Components
/// pushed against the η bound are held there.
pub fn solve_alpha_from_residuals(
    residuals: &[ResidualVector],
    init: AlphaTransformed,
    options: &AlphaSolverOptions,
) -> Result<AlphaSolution> {
    let groups = group_residuals(residuals, options.z_covariance)?;
    if groups.is_empty() {
        return Err(GeeError::InsufficientData(
            "no cluster has two or more observations".into(),
        ));
    }
    let bound = options.eta_bound;
    let clamp = |mut e: [f64; 3]| {
        for v in e.iter_mut() {
            *v = v.clamp(-bound, bound);
        }
        AlphaTransformed::new(e)
    };

    let mut eta = clamp(init.eta);
    let mut current = evaluate(&groups, &eta);
    for iteration in 1..=options.max_iter {
        let free: Vec<usize> = (0..3)
            .filter(|&c| {
                let pinned_high = eta.eta[c] >= bound && current.score[c] > 0.0;
                let pinned_low = eta.eta[c] <= -bound && current.score[c] < 0.0;
                !(pinned_high || pinned_low)
            })
            .collect();
        let mut step = [0.0; 3];
        if !free.is_empty() {
            let h = current
                .info
                .select_rows(free.iter())
                .select_columns(free.iter());
            let s = current.score.select_rows(free.iter());
            let delta = h
                .clone()
                .svd(true, true)
                .solve(&s, 1e-14 * h.amax().max(f64::MIN_POSITIVE))
                .map_err(|e| GeeError::Singular(format!("alpha information: {e}")))?;
            for (slot, &c) in free.iter().enumerate() {
                step[c] = delta[slot];
            }
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = clamp([
                eta.eta[0] + t * step[0],
                eta.eta[1] + t * step[1],
                eta.eta[2] + t * step[2],
            ]);
            let eval = evaluate(&groups, &cand);
            if eval.objective <= current.objective {
                accepted = Some((cand, eval));
                break;
            }
            t *= 0.5;
        }
        let Some((next, eval)) = accepted else {
            // no descent left at floating-point resolution
            return Ok(solution(eta, &current, iteration));
        };
        let applied = (0..3)
            .map(|c| (next.eta[c] - eta.eta[c]).abs())
            .fold(0.0, f64::max);
        eta = next;
        current = eval;
        if applied < options.tolerance {
            return Ok(solution(eta, &current, iteration));
        }
    }
    Err(GeeError::AlphaNotConverged {
        iterations: options.max_iter,
        residual_norm: (2.0 * current.objective).sqrt(),
    })
}

fn solution(eta: AlphaTransformed, eval: &Evaluation, iterations: usize) -> AlphaSolution {
    AlphaSolution {
        alpha: eta.alpha(),
        eta,
        iterations,
        residual_norm: (2.0 * eval.objective).sqrt(),
        score_norm: eval.score.amax(),
    }
}

/// Estimates the structured correlation at a fixed mean-model fit.
///
/// Cross-products use Pearson residuals that include the estimated
/// dispersion, so they are on the correlation scale.
pub fn solve_alpha(
    clusters: &[ClusterData],
    beta_hat: &DVector<f64>,
    model: &MeanModelSpec,
    init: AlphaTransformed,
    options: &AlphaSolverOptions,
) -> Result<AlphaSolution> {
    let phi = estimate_dispersion(clusters, model, beta_hat)?;
    let residuals = pearson_residuals(clusters, model, beta_hat, phi)?;
    solve_alpha_from_residuals(&residuals, init, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EARS: [usize; 4] = [1, 2, 1, 2];
    const FREQS: [usize; 4] = [1, 1, 2, 2];

    fn structured(a0: f64, ae: f64, af: f64) -> CorrelationSpec {
        CorrelationSpec::EarFreq(EarFreqAlpha::new(a0, ae, af))
    }

    fn round2(v: f64) -> f64 {
        (v * 100.0).round() / 100.0
    }

    #[test]
    fn strong_correlation_entries() {
        let r = materialize(&structured(0.4, 0.6, 0.8), &EARS, &FREQS).unwrap();
        assert_eq!(round2(r[(0, 1)]), 0.68);
        assert_eq!(round2(r[(0, 2)]), 0.76);
        assert_eq!(round2(r[(0, 3)]), 0.60);
        assert_eq!(round2(r[(1, 2)]), 0.60);
    }

    #[test]
    fn very_strong_single_freq_alpha_is_not_psd() {
        let a = EarFreqAlpha::new(0.2, 0.55, 0.3);
        let row = [a.rho(false, true), a.rho(true, false), a.rho(false, false)].map(round2);
        assert_eq!(row, [0.94, 0.89, 0.80]);
        // 1 - 0.94 - 0.89 + 0.80 < 0 along the ear-by-frequency contrast
        assert!(matches!(
            materialize(&structured(0.2, 0.55, 0.3), &EARS, &FREQS),
            Err(GeeError::NotPositiveSemidefinite { .. })
        ));
    }

    #[test]
    fn unit_alphas_give_identity() {
        let r = materialize(&structured(1.0, 1.0, 1.0), &EARS, &FREQS).unwrap();
        assert_eq!(r, DMatrix::identity(4, 4));
    }

    #[test]
    fn non_psd_structure_rejected() {
        // same-ear and same-frequency pairs perfectly correlated, diagonal pairs not
        let err = materialize(&structured(1.0, 0.0, 0.0), &EARS, &FREQS).unwrap_err();
        assert!(
            matches!(err, GeeError::NotPositiveSemidefinite { .. }),
            "{err}"
        );
        assert!(err.to_string().contains("ear-freq"));
    }

    #[test]
    fn out_of_range_alpha_rejected() {
        assert!(materialize(&structured(1.2, 0.5, 0.5), &EARS, &FREQS).is_err());
    }

    #[test]
    fn unstructured_selects_sub_matrix() {
        let m = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.1 * (i + j) as f64 });
        let spec = CorrelationSpec::Unstructured { matrix: m };
        let r = materialize(&spec, &[2, 2], &[1, 2]).unwrap();
        assert_eq!(r[(0, 1)], 0.1 * 4.0);
    }

    #[test]
    fn exchangeable_cancellation() {
        let res = vec![
            ResidualVector::canonical(vec![1.0, 1.0]),
            ResidualVector::canonical(vec![1.0, -1.0]),
        ];
        let spec = moment_estimate(&res, CorrelationKind::Exchangeable, 0).unwrap();
        assert_eq!(spec, CorrelationSpec::Exchangeable { rho: 0.0 });
    }

    #[test]
    fn exchangeable_single_cluster_zero_product() {
        let res = vec![ResidualVector::canonical(vec![2.0, 0.0])];
        let spec = moment_estimate(&res, CorrelationKind::Exchangeable, 0).unwrap();
        assert_eq!(spec, CorrelationSpec::Exchangeable { rho: 0.0 });
    }

    #[test]
    fn exchangeable_insufficient_pairs() {
        let res = vec![ResidualVector::canonical(vec![2.0, 1.0])];
        let err = moment_estimate(&res, CorrelationKind::Exchangeable, 1).unwrap_err();
        assert!(matches!(err, GeeError::InsufficientData(_)));
    }

    /// Direct double loop over clusters and position pairs.
    fn unstructured_oracle(res: &[Vec<f64>], k: usize) -> DMatrix<f64> {
        let dim = res[0].len();
        let n = res.len();
        DMatrix::from_fn(dim, dim, |i, j| {
            if i == j {
                1.0
            } else {
                res.iter().map(|r| r[i] * r[j]).sum::<f64>() / (n - k) as f64
            }
        })
    }

    #[test]
    fn unstructured_constant_residuals() {
        let c = 0.7;
        let n = 6;
        let k = 2;
        let raw: Vec<Vec<f64>> = vec![vec![c; 4]; n];
        let res: Vec<ResidualVector> = raw.iter().cloned().map(ResidualVector::canonical).collect();
        let CorrelationSpec::Unstructured { matrix } =
            moment_estimate(&res, CorrelationKind::Unstructured, k).unwrap()
        else {
            panic!("wrong kind")
        };
        let expected = c * c * n as f64 / (n - k) as f64;
        for (i, j) in pairs(4) {
            assert!((matrix[(i, j)] - expected).abs() < 1e-12);
            assert_eq!(matrix[(i, j)], matrix[(j, i)]);
        }
        assert!((matrix - unstructured_oracle(&raw, k)).amax() < 1e-12);
    }

    #[test]
    fn unstructured_replicated_cluster_is_scaled_outer_product() {
        let v = vec![0.3, -1.2, 0.8, 0.5];
        let n = 9;
        let k = 3;
        let res: Vec<ResidualVector> = (0..n)
            .map(|_| ResidualVector::canonical(v.clone()))
            .collect();
        let CorrelationSpec::Unstructured { matrix } =
            moment_estimate(&res, CorrelationKind::Unstructured, k).unwrap()
        else {
            panic!("wrong kind")
        };
        let scale = n as f64 / (n - k) as f64;
        for (i, j) in pairs(4) {
            assert!((matrix[(i, j)] - v[i] * v[j] * scale).abs() < 1e-12);
        }
        assert!((0..4).all(|i| matrix[(i, i)] == 1.0));
    }

    #[test]
    fn jacobian_zero_pattern() {
        let eta = AlphaTransformed::from_alpha(&EarFreqAlpha::new(0.3, 0.6, 0.8)).unwrap();
        let (rho, jac) = rho_vector_and_jacobian(&eta, &EARS, &FREQS);
        // pair (0,3): different ear, different frequency
        let row = 2;
        assert!((rho[row] - 0.7).abs() < 1e-12);
        assert_eq!(jac[(row, 1)], 0.0);
        assert_eq!(jac[(row, 2)], 0.0);
        // pair (0,2): same ear; undo the logistic chain factor
        let row = 1;
        let a = eta.alpha();
        let d0 = jac[(row, 0)] / (a.alpha0 * (1.0 - a.alpha0));
        let de = jac[(row, 1)] / (a.alpha_ear * (1.0 - a.alpha_ear));
        assert!((d0 + a.alpha_ear).abs() < 1e-12);
        assert!((de + a.alpha0).abs() < 1e-12);
        assert_eq!(jac[(row, 2)], 0.0);
    }

    #[test]
    fn zero_eta_is_half() {
        let a = AlphaTransformed::default().alpha();
        assert_eq!(a.as_array(), [0.5, 0.5, 0.5]);
        assert!(materialize(&CorrelationSpec::EarFreq(a), &EARS, &FREQS).is_ok());
    }

    #[test]
    fn boundary_alpha_has_no_eta() {
        assert!(AlphaTransformed::from_alpha(&EarFreqAlpha::new(1.0, 0.5, 0.5)).is_err());
        assert!(AlphaTransformed::from_alpha(&EarFreqAlpha::new(0.5, 0.0, 0.5)).is_err());
    }

    /// Closed form for two frequencies with identity weighting: each pair type
    /// is fitted by the mean of its cross-products.
    #[test]
    fn two_frequency_solution_matches_pair_type_means() {
        let raw: Vec<Vec<f64>> = vec![
            vec![1.0, 0.9, 0.6, 0.5],
            vec![-0.5, -0.7, -0.2, -0.3],
            vec![1.4, 1.0, 1.1, 0.8],
            vec![-1.1, -0.6, -0.9, -0.3],
            vec![0.2, 0.4, -0.3, 0.1],
        ];
        let mean_of = |pp: &[(usize, usize)]| {
            raw.iter()
                .map(|r| pp.iter().map(|&(a, b)| r[a] * r[b]).sum::<f64>() / pp.len() as f64)
                .sum::<f64>()
                / raw.len() as f64
        };
        let same_freq = mean_of(&[(0, 1), (2, 3)]);
        let same_ear = mean_of(&[(0, 2), (1, 3)]);
        let diff = mean_of(&[(0, 3), (1, 2)]);
        let a0 = 1.0 - diff;
        let expected = [a0, (1.0 - same_ear) / a0, (1.0 - same_freq) / a0];
        assert!(expected.iter().all(|&a| a > 0.0 && a < 1.0), "{expected:?}");

        let res: Vec<ResidualVector> = raw.into_iter().map(ResidualVector::canonical).collect();
        let sol =
            solve_alpha_from_residuals(&res, AlphaTransformed::default(), &Default::default())
                .unwrap();
        for (got, want) in sol.alpha.as_array().iter().zip(expected) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        assert!(sol.score_norm < 1e-9);
    }

    #[test]
    fn pooled_weighting_gives_nearby_root() {
        let mut state = 17u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let res: Vec<ResidualVector> = (0..200)
            .map(|_| {
                let common = 2.0 * next();
                ResidualVector::canonical((0..4).map(|_| common + next()).collect())
            })
            .collect();
        let ident =
            solve_alpha_from_residuals(&res, AlphaTransformed::default(), &Default::default())
                .unwrap();
        let opts = AlphaSolverOptions {
            z_covariance: ZCovariance::EmpiricalPooled,
            ..Default::default()
        };
        let pooled = solve_alpha_from_residuals(&res, AlphaTransformed::default(), &opts).unwrap();
        assert!(ident.score_norm < 1e-8);
        assert!(pooled.score_norm < 1e-8);
        for (a, b) in ident.alpha.as_array().iter().zip(pooled.alpha.as_array()) {
            assert!((a - b).abs() < 0.1, "{a} vs {b}");
        }
    }

    #[test]
    fn negative_moments_drive_alpha0_to_bound() {
        let res: Vec<ResidualVector> = (0..50)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                ResidualVector::canonical(vec![s, -s, s, -s])
            })
            .collect();
        let sol =
            solve_alpha_from_residuals(&res, AlphaTransformed::default(), &Default::default())
                .unwrap();
        assert!(sol.alpha.alpha0 > 1.0 - 1e-9);
        assert!(sol.alpha.as_array().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    proptest! {
        #[test]
        fn jacobian_matches_central_differences(
            e0 in -3.0f64..3.0, e1 in -3.0f64..3.0, e2 in -3.0f64..3.0,
        ) {
            let ears = [1, 2, 1, 2, 1, 2];
            let freqs = [1, 1, 2, 2, 3, 3];
            let eta = AlphaTransformed::new([e0, e1, e2]);
            let (_, jac) = rho_vector_and_jacobian(&eta, &ears, &freqs);
            let h = 1e-6;
            for c in 0..3 {
                let mut up = eta;
                let mut dn = eta;
                up.eta[c] += h;
                dn.eta[c] -= h;
                let fd = (rho_vector_and_jacobian(&up, &ears, &freqs).0
                    - rho_vector_and_jacobian(&dn, &ears, &freqs).0) / (2.0 * h);
                for r in 0..fd.len() {
                    let an = jac[(r, c)];
                    let err = (fd[r] - an).abs() / an.abs().max(1e-8);
                    prop_assert!(an == 0.0 && fd[r].abs() < 1e-12 || err < 1e-6,
                        "row {} col {}: fd {} analytic {}", r, c, fd[r], an);
                }
            }
        }

        #[test]
        fn structured_matrix_properties(
            a0 in 0.0f64..=1.0, ae in 0.0f64..=1.0, af in 0.0f64..=1.0,
        ) {
            let spec = structured(a0, ae, af);
            let ears = [1, 2, 1, 2, 1, 2];
            let freqs = [1, 1, 2, 2, 3, 3];
            match materialize(&spec, &ears, &freqs) {
                Ok(r) => {
                    prop_assert_eq!(&r, &r.transpose());
                    for i in 0..6 {
                        prop_assert_eq!(r[(i, i)], 1.0);
                        for j in 0..6 {
                            if i != j {
                                prop_assert!(r[(i, j)] >= 1.0 - a0 - 1e-15 && r[(i, j)] <= 1.0);
                            }
                        }
                    }
                    // ear relabeling permutes rows and columns simultaneously
                    let swapped: Vec<usize> = ears.iter().map(|&e| 3 - e).collect();
                    let rs = materialize(&spec, &swapped, &freqs).unwrap();
                    let perm = [1, 0, 3, 2, 5, 4];
                    let permuted = DMatrix::from_fn(6, 6, |i, j| r[(perm[i], perm[j])]);
                    prop_assert_eq!(rs, permuted);
                }
                Err(e) => {
                    let not_psd = matches!(e, GeeError::NotPositiveSemidefinite { .. });
                    prop_assert!(not_psd);
                }
            }
        }
    }
}
