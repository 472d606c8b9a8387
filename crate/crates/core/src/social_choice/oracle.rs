//! Support-enumeration equilibrium finder for tiny games, used as an independent
//! check on the simplex solver.
//!
//! Every vertex of the maximal-lottery polytope `{p ∈ Δ : pᵀm ≥ 0}` is the
//! unique solution of `Σ_{i∈S} p_i = 1` plus `|S|-1` tight columns
//! `(pᵀm)_j = 0`, `j ∈ T`, for some support `S`. Enumerating all `(S, T)` pairs
//! therefore finds every vertex, degenerate games included.

use super::{verify_maximal, Lottery, MarginMatrix};
use crate::error::{Error, Result};

const MAX_ALTERNATIVES: usize = 4;
const SINGULAR_EPS: f64 = 1e-12;
const ACCEPT_TOL: f64 = 1e-9;

/// First equilibrium found by support enumeration (smallest support first).
pub fn brute_force_maximal(m: &MarginMatrix) -> Result<Lottery> {
    equilibrium_vertices(m)?
        .into_iter()
        .next()
        .ok_or(Error::NoEquilibrium)
}

/// All distinct vertices of the set of maximal lotteries, smallest support first.
pub fn equilibrium_vertices(m: &MarginMatrix) -> Result<Vec<Lottery>> {
    let n = m.len();
    if n > MAX_ALTERNATIVES {
        return Err(Error::OracleTooLarge(n));
    }
    let mut supports: Vec<u32> = (1..(1u32 << n)).collect();
    supports.sort_by_key(|s| (s.count_ones(), *s));

    let mut found: Vec<Lottery> = Vec::new();
    for &support in &supports {
        let members: Vec<usize> = (0..n).filter(|i| support & (1 << i) != 0).collect();
        let k = members.len();
        for tight in 0..(1u32 << n) {
            if tight.count_ones() as usize != k - 1 {
                continue;
            }
            let cols: Vec<usize> = (0..n).filter(|j| tight & (1 << j) != 0).collect();
            let mut sys = vec![vec![0.0; k + 1]; k];
            for (c, _) in members.iter().enumerate() {
                sys[0][c] = 1.0;
            }
            sys[0][k] = 1.0;
            for (r, &j) in cols.iter().enumerate() {
                for (c, &i) in members.iter().enumerate() {
                    sys[r + 1][c] = m.get(i, j);
                }
            }
            let Some(x) = solve(sys) else { continue };
            if x.iter().any(|&v| v < -ACCEPT_TOL) {
                continue;
            }
            let mut p = vec![0.0; n];
            for (c, &i) in members.iter().enumerate() {
                p[i] = x[c].max(0.0);
            }
            let Ok(lottery) = Lottery::from_weights(&p) else {
                continue;
            };
            if !verify_maximal(m, &lottery, ACCEPT_TOL)? {
                continue;
            }
            if found.iter().all(|f| f.linf(&lottery) > 1e-9) {
                found.push(lottery);
            }
        }
    }
    Ok(found)
}

/// Gaussian elimination with partial pivoting on an augmented `k × (k+1)` system.
fn solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let k = a.len();
    for col in 0..k {
        let pivot = (col..k).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() < SINGULAR_EPS {
            return None;
        }
        a.swap(col, pivot);
        for r in (col + 1)..k {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..=k {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; k];
    for r in (0..k).rev() {
        let mut acc = a[r][k];
        for c in (r + 1)..k {
            acc -= a[r][c] * x[c];
        }
        x[r] = acc / a[r][r];
    }
    Some(x)
}
