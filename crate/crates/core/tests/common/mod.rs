#![allow(dead_code)]

use bilateral_gee::{ClusterData, Covariate, MeanModelSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub struct Dataset {
    pub clusters: Vec<ClusterData>,
    pub model: MeanModelSpec,
}

pub fn random_model(q: usize, p: usize) -> MeanModelSpec {
    let covs = (0..p)
        .map(|j| {
            let name = format!("x{j}");
            if j == 0 {
                Covariate::participant(name, q > 1 && j % 2 == 1)
            } else {
                Covariate::ear(name, q > 1 && j % 2 == 1)
            }
        })
        .collect();
    MeanModelSpec::new(q, covs)
}

/// Random bilateral data set with `p` covariates and possibly incomplete
/// clusters. Covariate 0 is per participant, the rest per ear; odd covariates
/// interact with frequency.
pub fn random_dataset(
    rng: &mut ChaCha8Rng,
    n: usize,
    q: usize,
    p: usize,
    complete: bool,
) -> Dataset {
    let model = random_model(q, p);
    let mut clusters = Vec::with_capacity(n);
    for i in 0..n {
        let base: Vec<f64> = (0..p).map(|_| normal(rng)).collect();
        let mut cells: Vec<(usize, usize)> = Vec::new();
        for f in 1..=q {
            for e in 1..=2 {
                if complete || rng.random_bool(0.8) {
                    cells.push((e, f));
                }
            }
        }
        if cells.is_empty() {
            cells.push((1, 1 + i % q));
        }
        let m = cells.len();
        let x = DMatrix::from_fn(m, p, |_, j| {
            if j == 0 {
                base[0]
            } else {
                base[j] + normal(rng)
            }
        });
        let shared = normal(rng);
        let y: Vec<f64> = (0..m).map(|_| 1.0 + shared + normal(rng)).collect();
        let (ears, freqs): (Vec<usize>, Vec<usize>) = cells.into_iter().unzip();
        // rows handed over in reverse to exercise canonical sorting
        let rev = |v: Vec<usize>| v.into_iter().rev().collect::<Vec<_>>();
        let x_rev = DMatrix::from_fn(m, p, |r, c| x[(m - 1 - r, c)]);
        let y_rev: Vec<f64> = y.into_iter().rev().collect();
        clusters
            .push(ClusterData::new(format!("p{i}"), y_rev, x_rev, rev(ears), rev(freqs)).unwrap());
    }
    Dataset { clusters, model }
}

/// Design matrix built directly from the column recipe: intercept, frequency
/// dummies, covariates, then covariate-by-frequency products.
pub fn oracle_design(clusters: &[ClusterData], model: &MeanModelSpec) -> DMatrix<f64> {
    let q = model.freq_levels;
    let rows: Vec<Vec<f64>> = clusters
        .iter()
        .flat_map(|c| {
            (0..c.len()).map(move |r| {
                let f = c.freq_index()[r];
                let mut row = vec![1.0];
                row.extend((2..=q).map(|k| if f == k { 1.0 } else { 0.0 }));
                row.extend(c.x().row(r).iter().copied());
                for (j, cov) in model.covariates.iter().enumerate() {
                    if cov.interact_with_frequency {
                        row.extend((2..=q).map(|k| if f == k { c.x()[(r, j)] } else { 0.0 }));
                    }
                }
                row
            })
        })
        .collect();
    let k = rows[0].len();
    DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j])
}

pub fn stacked_y(clusters: &[ClusterData]) -> DVector<f64> {
    DVector::from_iterator(
        clusters.iter().map(|c| c.len()).sum(),
        clusters.iter().flat_map(|c| c.y().iter().copied()),
    )
}

/// Least squares through a QR factorisation.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * y;
    qr.r().solve_upper_triangular(&qty).expect("full rank")
}

/// HC0 covariance `(XᵀX)⁻¹ Σ xᵢxᵢᵀeᵢ² (XᵀX)⁻¹`.
pub fn hc0(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> DMatrix<f64> {
    let e = y - x * beta;
    let bread = (x.transpose() * x).try_inverse().unwrap();
    let mut meat = DMatrix::zeros(x.ncols(), x.ncols());
    for i in 0..x.nrows() {
        let xi = x.row(i).transpose();
        meat += &xi * xi.transpose() * (e[i] * e[i]);
    }
    &bread * meat * &bread
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}
