//! Dense tableau simplex for packing LPs: `max cᵀy s.t. A y ≤ b, y ≥ 0` with `b ≥ 0`.
//!
//! The origin is feasible, so no phase one is needed. Pivoting follows Bland's
//! rule (lowest eligible index for both entering and leaving variable), which
//! rules out cycling on degenerate vertices.

use crate::error::{Error, Result};

const PIVOT_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub(crate) struct Solution {
    #[allow(dead_code)]
    pub primal: Vec<f64>,
    /// Shadow prices of the `A y ≤ b` rows.
    pub dual: Vec<f64>,
    #[allow(dead_code)]
    pub objective: f64,
}

pub(crate) fn maximize(a: &[Vec<f64>], b: &[f64], c: &[f64], max_pivots: usize) -> Result<Solution> {
    let rows = a.len();
    let cols = c.len();
    if b.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: b.len(),
        });
    }
    if b.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("packing LP needs b >= 0"));
    }
    let width = cols + rows + 1;
    let rhs = width - 1;
    let mut t = vec![0.0; (rows + 1) * width];
    for (i, row) in a.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                got: row.len(),
            });
        }
        t[i * width..i * width + cols].copy_from_slice(row);
        t[i * width + cols + i] = 1.0;
        t[i * width + rhs] = b[i];
    }
    let obj = rows * width;
    for (j, &cj) in c.iter().enumerate() {
        t[obj + j] = -cj;
    }
    let mut basis: Vec<usize> = (cols..cols + rows).collect();

    let mut pivots = 0;
    while let Some(enter) = (0..width - 1).find(|&j| t[obj + j] < -PIVOT_EPS) {
        let mut leave: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for i in 0..rows {
            let coef = t[i * width + enter];
            if coef <= PIVOT_EPS {
                continue;
            }
            let ratio = t[i * width + rhs] / coef;
            let better = match leave {
                None => true,
                Some(l) => {
                    ratio < best_ratio - PIVOT_EPS
                        || (ratio <= best_ratio + PIVOT_EPS && basis[i] < basis[l])
                }
            };
            if better {
                leave = Some(i);
                best_ratio = ratio;
            }
        }
        let Some(leave) = leave else {
            return Err(Error::invalid("LP is unbounded"));
        };
        if pivots == max_pivots {
            return Err(Error::SolverDidNotConverge(pivots));
        }
        pivot(&mut t, width, rows, leave, enter);
        basis[leave] = enter;
        pivots += 1;
    }

    let mut primal = vec![0.0; cols];
    for (i, &var) in basis.iter().enumerate() {
        if var < cols {
            primal[var] = t[i * width + rhs];
        }
    }
    let dual = (0..rows).map(|i| t[obj + cols + i]).collect();
    Ok(Solution {
        primal,
        dual,
        objective: t[obj + rhs],
    })
}

fn pivot(t: &mut [f64], width: usize, rows: usize, r: usize, c: usize) {
    let inv = 1.0 / t[r * width + c];
    for v in &mut t[r * width..(r + 1) * width] {
        *v *= inv;
    }
    t[r * width + c] = 1.0;
    let pivot_row: Vec<f64> = t[r * width..(r + 1) * width].to_vec();
    for i in 0..=rows {
        if i == r {
            continue;
        }
        let factor = t[i * width + c];
        if factor == 0.0 {
            continue;
        }
        for (v, p) in t[i * width..(i + 1) * width].iter_mut().zip(&pivot_row) {
            *v -= factor * p;
        }
        t[i * width + c] = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_problem() {
        // max 3x + 5y, x <= 4, 2y <= 12, 3x + 2y <= 18 -> (2, 6), 36
        let a = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 2.0]];
        let s = maximize(&a, &[4.0, 12.0, 18.0], &[3.0, 5.0], 100).unwrap();
        assert!((s.objective - 36.0).abs() < 1e-12);
        assert!((s.primal[0] - 2.0).abs() < 1e-12);
        assert!((s.primal[1] - 6.0).abs() < 1e-12);
        // duals (0, 1.5, 1) give the same objective
        let dual_obj: f64 = s.dual.iter().zip([4.0, 12.0, 18.0]).map(|(y, b)| y * b).sum();
        assert!((dual_obj - 36.0).abs() < 1e-12);
    }

    #[test]
    fn unbounded_detected() {
        let a = vec![vec![-1.0, 1.0]];
        assert!(maximize(&a, &[1.0], &[1.0, 0.0], 100).is_err());
    }

    #[test]
    fn pivot_cap_enforced() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 2.0]];
        assert!(matches!(
            maximize(&a, &[4.0, 12.0, 18.0], &[3.0, 5.0], 1),
            Err(Error::SolverDidNotConverge(1))
        ));
    }
}
