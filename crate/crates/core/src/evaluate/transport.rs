use ndarray::Array2;
use rayon::prelude::*;

use super::EvalError;
use crate::datagen::Dataset;

/// Optimal pairing of two equal-size samples under uniform weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `assignment[i]` is the synthetic row matched to ground-truth row `i`.
    pub assignment: Vec<usize>,
    /// Sum of the matched Euclidean distances.
    pub total_cost: f64,
}

/// Minimum-cost perfect matching on a square cost matrix by shortest augmenting
/// paths with dual potentials, O(n^3). Returns the column assigned to each row.
pub fn assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // 1-based internally; index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=n {
        out[row_of[j] - 1] = j - 1;
    }
    out
}

pub fn euclidean_cost(a: &[Vec<f64>], b: &[Vec<f64>]) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = a
        .par_iter()
        .map(|x| {
            b.iter()
                .map(|y| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    let mut c = Array2::zeros((a.len(), b.len()));
    for (i, r) in rows.into_iter().enumerate() {
        for (j, v) in r.into_iter().enumerate() {
            c[[i, j]] = v;
        }
    }
    c
}

/// Exact W1 between two equal-size point clouds: the mean matched distance of the
/// optimal assignment.
pub fn wasserstein1_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(f64, TransportPlan), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::SizeMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    let w = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|r| r.len() != w) {
        return Err(EvalError::Width {
            expected: w,
            got: bad.len(),
        });
    }
    let cost = euclidean_cost(a, b);
    let assign = assignment(&cost);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok((
        total / a.len() as f64,
        TransportPlan {
            assignment: assign,
            total_cost: total,
        },
    ))
}

/// W1 on flattened p.u./radian records; both datasets must have the same size.
pub fn wasserstein1(real: &Dataset, synthetic: &Dataset) -> Result<(f64, TransportPlan), EvalError> {
    if real.width() != synthetic.width() {
        return Err(EvalError::Width {
            expected: real.width(),
            got: synthetic.width(),
        });
    }
    wasserstein1_rows(&real.flat_rows(), &synthetic.flat_rows())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_known_assignment() {
        let c = Array2::from_shape_vec((3, 3), vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]).unwrap();
        let a = assignment(&c);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
        assert_eq!(total, 5.0);
        let mut seen = a.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]];
        let (w, plan) = wasserstein1_rows(&a, &a).unwrap();
        assert_eq!(w, 0.0);
        assert_eq!(plan.assignment, vec![0, 1, 2]);
    }

    #[test]
    fn singletons() {
        let (w, _) = wasserstein1_rows(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap();
        assert_eq!(w, 5.0);
    }

    #[test]
    fn size_and_width_errors() {
        let a = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            wasserstein1_rows(&a, &a[..1]),
            Err(EvalError::SizeMismatch { left: 2, right: 1 })
        ));
        assert!(matches!(
            wasserstein1_rows(&a, &[vec![0.0], vec![1.0, 2.0]]),
            Err(EvalError::Width { .. })
        ));
        assert!(matches!(wasserstein1_rows(&[], &[]), Err(EvalError::Empty)));
    }
}
