//! Single-outcome reductions of bilateral clusters: worse-ear (per-frequency
//! maximum) and average-ear (per-frequency mean).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GeeError, Result};
use crate::model::ClusterData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionKind {
    Worse,
    Average,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedCluster {
    pub participant_id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub freq_index: Vec<usize>,
    pub kind: ReductionKind,
    /// Ear whose row was kept at each frequency (worse-ear only).
    pub selected_ear: Vec<Option<usize>>,
}

impl ReducedCluster {
    /// A one-ear cluster (all rows labelled ear 1) for fitting.
    pub fn to_cluster(&self) -> ClusterData {
        ClusterData::new(
            self.participant_id.clone(),
            self.y.iter().copied().collect(),
            self.x.clone(),
            vec![1; self.y.len()],
            self.freq_index.clone(),
        )
        .expect("reduced clusters have one row per frequency")
    }
}

/// Row indices of ear 1 and ear 2 for each observed frequency, in ascending
/// frequency order.
fn ear_pairs(cluster: &ClusterData) -> Result<Vec<(usize, usize, usize)>> {
    let mut freqs: Vec<usize> = cluster.freq_index().to_vec();
    freqs.dedup();
    freqs
        .into_iter()
        .map(|f| {
            let find = |ear: usize| {
                cluster
                    .ear_index()
                    .iter()
                    .zip(cluster.freq_index())
                    .position(|(&e, &q)| e == ear && q == f)
                    .ok_or_else(|| GeeError::MissingEar {
                        participant: cluster.participant_id().to_string(),
                        ear,
                        freq: f,
                    })
            };
            Ok((f, find(1)?, find(2)?))
        })
        .collect()
}

/// Per frequency keeps the row with the larger outcome; ties keep ear 1.
pub fn worse_ear(cluster: &ClusterData) -> Result<ReducedCluster> {
    let pairs = ear_pairs(cluster)?;
    let y = cluster.y();
    let mut rows = Vec::with_capacity(pairs.len());
    let mut selected = Vec::with_capacity(pairs.len());
    for &(_, r1, r2) in &pairs {
        if y[r2] > y[r1] {
            rows.push(r2);
            selected.push(Some(2));
        } else {
            rows.push(r1);
            selected.push(Some(1));
        }
    }
    Ok(ReducedCluster {
        participant_id: cluster.participant_id().to_string(),
        y: DVector::from_iterator(rows.len(), rows.iter().map(|&r| y[r])),
        x: cluster.x().select_rows(rows.iter()),
        freq_index: pairs.iter().map(|p| p.0).collect(),
        kind: ReductionKind::Worse,
        selected_ear: selected,
    })
}

/// Per frequency averages the two ears' outcomes and covariates.
pub fn average_ear(cluster: &ClusterData) -> Result<ReducedCluster> {
    let pairs = ear_pairs(cluster)?;
    let y = cluster.y();
    let x = cluster.x();
    let q = pairs.len();
    Ok(ReducedCluster {
        participant_id: cluster.participant_id().to_string(),
        y: DVector::from_iterator(q, pairs.iter().map(|&(_, a, b)| 0.5 * (y[a] + y[b]))),
        x: DMatrix::from_fn(q, x.ncols(), |i, j| {
            let (_, a, b) = pairs[i];
            0.5 * (x[(a, j)] + x[(b, j)])
        }),
        freq_index: pairs.iter().map(|p| p.0).collect(),
        kind: ReductionKind::Average,
        selected_ear: vec![None; q],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cluster(y: [f64; 4], z: [f64; 4]) -> ClusterData {
        let x = DMatrix::from_fn(4, 2, |i, j| if j == 0 { 0.7 } else { z[i] });
        ClusterData::new("p", y.to_vec(), x, vec![1, 2, 1, 2], vec![1, 1, 2, 2]).unwrap()
    }

    #[test]
    fn worse_picks_max_and_its_covariates() {
        let c = cluster([3.0, 5.0, 4.0, 4.0], [10.0, 20.0, 30.0, 40.0]);
        let w = worse_ear(&c).unwrap();
        assert_eq!(w.y.as_slice(), &[5.0, 4.0]);
        assert_eq!(w.x[(0, 1)], 20.0);
        // tie goes to ear 1
        assert_eq!(w.x[(1, 1)], 30.0);
        assert_eq!(w.selected_ear, vec![Some(2), Some(1)]);
        assert_eq!(w.x.column(0).as_slice(), &[0.7, 0.7]);
    }

    #[test]
    fn worse_equals_ear_one_when_dominant() {
        let c = cluster([9.0, 1.0, 8.0, 2.0], [1.0, 2.0, 3.0, 4.0]);
        let w = worse_ear(&c).unwrap();
        // componentwise oracle: rows of ear 1
        let ear1: Vec<usize> = (0..4).filter(|&r| c.ear_index()[r] == 1).collect();
        assert_eq!(w.y.as_slice(), &[c.y()[ear1[0]], c.y()[ear1[1]]]);
        assert_eq!(w.x, c.x().select_rows(ear1.iter()));
    }

    #[test]
    fn average_examples() {
        let c = cluster([3.0, 5.0, 2.0, 2.0], [1.0, 3.0, 6.0, 6.0]);
        let a = average_ear(&c).unwrap();
        assert_eq!(a.y.as_slice(), &[4.0, 2.0]);
        assert_eq!(a.x.column(1).as_slice(), &[2.0, 6.0]);
        assert_eq!(a.x.column(0).as_slice(), &[0.7, 0.7]);
    }

    #[test]
    fn missing_ear_rejected() {
        let c = ClusterData::new(
            "m",
            vec![1.0, 2.0, 3.0],
            DMatrix::zeros(3, 0),
            vec![1, 2, 1],
            vec![1, 1, 2],
        )
        .unwrap();
        assert_eq!(
            worse_ear(&c).unwrap_err(),
            GeeError::MissingEar {
                participant: "m".into(),
                ear: 2,
                freq: 2
            }
        );
        assert!(average_ear(&c).is_err());
    }

    proptest! {
        #[test]
        fn worse_dominates_average_and_ignores_labels(
            y in prop::array::uniform4(-10.0f64..10.0),
            z in prop::array::uniform4(-3.0f64..3.0),
        ) {
            let c = cluster(y, z);
            let w = worse_ear(&c).unwrap();
            let a = average_ear(&c).unwrap();
            for q in 0..2 {
                prop_assert!(w.y[q] >= a.y[q]);
            }
            let s = c.with_swapped_ears();
            let ws = worse_ear(&s).unwrap();
            let as_ = average_ear(&s).unwrap();
            prop_assert_eq!(&ws.y, &w.y);
            prop_assert_eq!(&as_.y, &a.y);
            // covariates follow the winning value unless the ears tie
            for q in 0..2 {
                if y[2 * q] != y[2 * q + 1] {
                    prop_assert_eq!(ws.x[(q, 1)], w.x[(q, 1)]);
                }
            }
        }
    }
}
