//! Preference-profile primitives and exact solvers.
//!
//! A profile is summarized by its [`MarginMatrix`]: `m[i][j]` is the share of
//! voters preferring `i` to `j` minus the share preferring `j` to `i`. The
//! maximal lottery is the equilibrium strategy of the symmetric zero-sum game
//! with payoff `m`; it is computed with an in-repo dense simplex solver
//! ([`maximal_lottery`]) and cross-checked by support enumeration
//! ([`brute_force_maximal`]) on small instances.

mod lp;
mod oracle;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use oracle::{brute_force_maximal, equilibrium_vertices};

/// Tolerance on the simplex sum of a [`Lottery`].
pub const LOTTERY_SUM_TOL: f64 = 1e-9;

const SKEW_TOL: f64 = 1e-12;

/// Dense index of an alternative, stable for the lifetime of an experiment.
#[derive(
    Copy, Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct AlternativeId(pub usize);

impl AlternativeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for AlternativeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

/// Strict outcome of a pairwise query.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    First,
    Second,
}

impl Choice {
    /// Returns `(winner, loser)` for the queried pair `(first, second)`.
    pub fn resolve(self, first: AlternativeId, second: AlternativeId) -> (AlternativeId, AlternativeId) {
        match self {
            Choice::First => (first, second),
            Choice::Second => (second, first),
        }
    }

    pub fn flipped(self) -> Choice {
        match self {
            Choice::First => Choice::Second,
            Choice::Second => Choice::First,
        }
    }
}

/// Answers pairwise queries for a user. Callers never ask about `first == second`.
pub trait PreferenceOracle<U: ?Sized> {
    fn prefer(&self, user: &U, first: AlternativeId, second: AlternativeId) -> Choice;
}

impl<U: ?Sized, F> PreferenceOracle<U> for F
where
    F: Fn(&U, AlternativeId, AlternativeId) -> Choice,
{
    fn prefer(&self, user: &U, first: AlternativeId, second: AlternativeId) -> Choice {
        self(user, first, second)
    }
}

/// Skew-symmetric matrix of pairwise majority margins, entries in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct MarginMatrix {
    n: usize,
    data: Vec<f64>,
}

impl MarginMatrix {
    /// Builds a margin matrix from rows, checking shape, skew-symmetry and range.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("margin matrix needs at least one alternative"));
        }
        let mut data = Vec::with_capacity(n * n);
        for row in &rows {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        let m = MarginMatrix { n, data };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            for j in 0..self.n {
                let v = self.get(i, j);
                if !v.is_finite() || v.abs() > 1.0 + SKEW_TOL {
                    return Err(Error::invalid(format!("margin m[{i}][{j}] = {v} outside [-1, 1]")));
                }
                if (v + self.get(j, i)).abs() > SKEW_TOL {
                    return Err(Error::invalid(format!("margin matrix not skew-symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    /// Exact margins from antisymmetric pairwise tallies, `wins[i][j]` counting voters with `i ≻ j`.
    pub fn from_tallies(wins: &[Vec<u64>], voters: u64) -> Result<Self> {
        if voters == 0 {
            return Err(Error::EmptyElectorate);
        }
        let n = wins.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = wins[i][j] as f64 - wins[j][i] as f64;
                let v = d / voters as f64;
                data[i * n + j] = v;
                data[j * n + i] = -v;
            }
        }
        let m = MarginMatrix { n, data };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    /// `c · m` for `0 < c`; fails if the result leaves `[-1, 1]`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::invalid("scale must be positive"));
        }
        let m = MarginMatrix {
            n: self.n,
            data: self.data.iter().map(|v| v * c).collect(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Row vector `pᵀ m`: entry `j` is the expected margin of `p` against `j`.
    pub fn payoff_against_columns(&self, p: &Lottery) -> Result<Vec<f64>> {
        if p.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: p.len(),
            });
        }
        let mut out = vec![0.0; self.n];
        for (i, &pi) in p.probs().iter().enumerate() {
            if pi == 0.0 {
                continue;
            }
            for (o, &mij) in out.iter_mut().zip(self.row(i)) {
                *o += pi * mij;
            }
        }
        Ok(out)
    }

    /// Weighted average of same-sized matrices; weights need not be normalized.
    pub fn weighted_average(parts: &[(f64, &MarginMatrix)]) -> Result<Self> {
        let Some((_, first)) = parts.first() else {
            return Err(Error::invalid("no matrices to average"));
        };
        let n = first.n;
        let total: f64 = parts.iter().map(|(w, _)| w).sum();
        if !(total > 0.0) {
            return Err(Error::invalid("weights must sum to a positive value"));
        }
        let mut data = vec![0.0; n * n];
        for (w, m) in parts {
            if m.n != n {
                return Err(Error::DimensionMismatch { expected: n, got: m.n });
            }
            for (d, v) in data.iter_mut().zip(&m.data) {
                *d += w * v;
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let v = data[i * n + j] / total;
                data[i * n + j] = v;
                data[j * n + i] = -v;
            }
            data[i * n + i] = 0.0;
        }
        let m = MarginMatrix { n, data };
        m.validate()?;
        Ok(m)
    }
}

impl TryFrom<Vec<Vec<f64>>> for MarginMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        MarginMatrix::from_rows(rows)
    }
}

impl From<MarginMatrix> for Vec<Vec<f64>> {
    fn from(m: MarginMatrix) -> Self {
        m.rows()
    }
}

/// Probability distribution over alternatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Lottery(Vec<f64>);

impl Lottery {
    /// Validates nonnegativity and `|Σp − 1| ≤ 1e-9`.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidLottery("empty".into()));
        }
        if let Some(bad) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidLottery(format!("component {bad}")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > LOTTERY_SUM_TOL {
            return Err(Error::InvalidLottery(format!("sums to {sum}")));
        }
        Ok(Lottery(p))
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        let mut total = 0.0;
        for &v in w {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidLottery(format!("weight {v}")));
            }
            total += v;
        }
        if !(total > 0.0) {
            return Err(Error::InvalidLottery("weights sum to zero".into()));
        }
        Lottery::new(w.iter().map(|v| v / total).collect())
    }

    pub fn point_mass(n: usize, winner: AlternativeId) -> Self {
        let mut p = vec![0.0; n];
        p[winner.0] = 1.0;
        Lottery(p)
    }

    pub fn uniform(n: usize) -> Self {
        Lottery(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn prob(&self, a: AlternativeId) -> f64 {
        self.0[a.0]
    }

    /// Inverse-CDF draw from a uniform `u ∈ [0, 1)`; zero-probability entries are never returned.
    pub fn sample_with(&self, u: f64) -> AlternativeId {
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return AlternativeId(i);
            }
        }
        AlternativeId(last)
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> AlternativeId {
        self.sample_with(rng.random::<f64>())
    }

    /// L∞ distance.
    pub fn linf(&self, other: &Lottery) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<f64>> for Lottery {
    type Error = Error;

    fn try_from(p: Vec<f64>) -> Result<Self> {
        Lottery::new(p)
    }
}

impl From<Lottery> for Vec<f64> {
    fn from(l: Lottery) -> Self {
        l.0
    }
}

/// Empirical margin matrix of `users` under `oracle`.
pub fn margin_matrix<U, O>(n_alternatives: usize, users: &[U], oracle: &O) -> Result<MarginMatrix>
where
    O: PreferenceOracle<U> + ?Sized,
{
    if users.is_empty() {
        return Err(Error::EmptyElectorate);
    }
    if n_alternatives == 0 {
        return Err(Error::invalid("no alternatives"));
    }
    let mut wins = vec![vec![0u64; n_alternatives]; n_alternatives];
    for user in users {
        for i in 0..n_alternatives {
            for j in (i + 1)..n_alternatives {
                match oracle.prefer(user, AlternativeId(i), AlternativeId(j)) {
                    Choice::First => wins[i][j] += 1,
                    Choice::Second => wins[j][i] += 1,
                }
            }
        }
    }
    MarginMatrix::from_tallies(&wins, users.len() as u64)
}

/// Strict Condorcet winner: beats every other alternative by a positive margin.
pub fn condorcet_winner(m: &MarginMatrix) -> Option<AlternativeId> {
    (0..m.len())
        .find(|&i| (0..m.len()).all(|j| j == i || m.get(i, j) > 0.0))
        .map(AlternativeId)
}

/// Tournament Borda scores: row sums of the margin matrix.
pub fn borda_scores(m: &MarginMatrix) -> Vec<f64> {
    (0..m.len()).map(|i| m.row(i).iter().sum()).collect()
}

/// Highest Borda score; ties go to the lowest index.
pub fn borda_winner(m: &MarginMatrix) -> AlternativeId {
    let scores = borda_scores(m);
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    AlternativeId(best)
}

/// `true` iff `min_j (pᵀm)_j ≥ −tol`.
pub fn verify_maximal(m: &MarginMatrix, p: &Lottery, tol: f64) -> Result<bool> {
    let payoff = m.payoff_against_columns(p)?;
    Ok(payoff.iter().all(|&v| v >= -tol))
}

/// Maximal lottery of `m` by linear programming.
///
/// Solves the row player's problem of the shifted game `m + 2` (all entries
/// positive, value 2) in the normalized form `min Σx s.t. (m + 2)ᵀx ≥ 1`,
/// reading `x` off the dual of the equivalent packing LP.
pub fn maximal_lottery(m: &MarginMatrix) -> Result<Lottery> {
    let n = m.len();
    const SHIFT: f64 = 2.0;
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| m.row(i).iter().map(|v| v + SHIFT).collect())
        .collect();
    let solution = lp::maximize(&a, &vec![1.0; n], &vec![1.0; n], 10 * n * n)?;
    let mut x = solution.dual;
    for v in &mut x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Lottery::from_weights(&x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rps(c: f64) -> MarginMatrix {
        MarginMatrix::from_rows(vec![
            vec![0.0, c, -c],
            vec![-c, 0.0, c],
            vec![c, -c, 0.0],
        ])
        .unwrap()
    }

    fn two() -> MarginMatrix {
        MarginMatrix::from_rows(vec![vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap()
    }

    #[test]
    fn single_voter_margin() {
        let oracle = |_: &(), a: AlternativeId, b: AlternativeId| {
            if a.0 < b.0 {
                Choice::First
            } else {
                Choice::Second
            }
        };
        let m = margin_matrix(2, &[()], &oracle).unwrap();
        assert_eq!(m, two());
    }

    #[test]
    fn empty_electorate_rejected() {
        let oracle = |_: &(), _: AlternativeId, _: AlternativeId| Choice::First;
        let users: [(); 0] = [];
        assert!(matches!(margin_matrix(3, &users, &oracle), Err(Error::EmptyElectorate)));
    }

    #[test]
    fn unanimous_margins_are_extreme() {
        let ranking = [2usize, 0, 3, 1];
        let oracle = move |_: &u8, a: AlternativeId, b: AlternativeId| {
            let pa = ranking.iter().position(|&r| r == a.0).unwrap();
            let pb = ranking.iter().position(|&r| r == b.0).unwrap();
            if pa < pb {
                Choice::First
            } else {
                Choice::Second
            }
        };
        let m = margin_matrix(4, &[0u8; 7], &oracle).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(m.get(i, j) == 1.0 || m.get(i, j) == -1.0);
                }
            }
        }
        assert_eq!(condorcet_winner(&m), Some(AlternativeId(2)));
    }

    #[test]
    fn rejects_non_skew() {
        assert!(MarginMatrix::from_rows(vec![vec![0.0, 0.5], vec![0.4, 0.0]]).is_err());
        assert!(MarginMatrix::from_rows(vec![vec![0.1, 0.0], vec![0.0, 0.0]]).is_err());
        assert!(MarginMatrix::from_rows(vec![vec![0.0, 1.5], vec![-1.5, 0.0]]).is_err());
    }

    #[test]
    fn condorcet_cases() {
        assert_eq!(condorcet_winner(&two()), Some(AlternativeId(0)));
        assert_eq!(condorcet_winner(&rps(1.0 / 3.0)), None);
        // weak winner (tie against a1) is not reported
        let weak = MarginMatrix::from_rows(vec![
            vec![0.0, 0.0, 0.5],
            vec![0.0, 0.0, 0.5],
            vec![-0.5, -0.5, 0.0],
        ])
        .unwrap();
        assert_eq!(condorcet_winner(&weak), None);
    }

    #[test]
    fn borda_cases() {
        assert_eq!(borda_scores(&two()), vec![1.0, -1.0]);
        assert_eq!(borda_winner(&two()), AlternativeId(0));
        let s = borda_scores(&rps(0.4));
        assert!(s.iter().all(|&v| v == s[0]));
        assert_eq!(borda_winner(&rps(0.4)), AlternativeId(0));
    }

    #[test]
    fn maximal_lottery_small_cases() {
        let p = maximal_lottery(&two()).unwrap();
        assert!(p.linf(&Lottery::point_mass(2, AlternativeId(0))) < 1e-12);

        let p = maximal_lottery(&rps(0.2)).unwrap();
        assert!(p.linf(&Lottery::uniform(3)) < 1e-12);

        let single = MarginMatrix::from_rows(vec![vec![0.0]]).unwrap();
        assert_eq!(maximal_lottery(&single).unwrap().probs(), &[1.0]);
    }

    #[test]
    fn verify_cases() {
        assert!(verify_maximal(&rps(1.0), &Lottery::uniform(3), 1e-9).unwrap());
        let dominated = Lottery::point_mass(2, AlternativeId(1));
        assert!(!verify_maximal(&two(), &dominated, 1e-9).unwrap());
        assert!(verify_maximal(&two(), &Lottery::uniform(3), 1e-9).is_err());
    }

    #[test]
    fn lottery_validation() {
        assert!(Lottery::new(vec![0.5, 0.5]).is_ok());
        assert!(Lottery::new(vec![0.5, 0.6]).is_err());
        assert!(Lottery::new(vec![1.1, -0.1]).is_err());
        assert!(Lottery::from_weights(&[0.0, 0.0]).is_err());
        let l = Lottery::from_weights(&[1.0, 3.0]).unwrap();
        assert_eq!(l.probs(), &[0.25, 0.75]);
    }

    #[test]
    fn sampling_skips_zero_mass() {
        let l = Lottery::new(vec![0.0, 1.0, 0.0]).unwrap();
        for u in [0.0, 0.3, 0.999_999] {
            assert_eq!(l.sample_with(u), AlternativeId(1));
        }
        let l = Lottery::new(vec![0.25, 0.0, 0.75]).unwrap();
        assert_eq!(l.sample_with(0.1), AlternativeId(0));
        assert_eq!(l.sample_with(0.25), AlternativeId(2));
    }

    #[test]
    fn weighted_average_matches_pooled_tallies() {
        let a = MarginMatrix::from_tallies(&[vec![0, 3], vec![1, 0]], 4).unwrap();
        let b = MarginMatrix::from_tallies(&[vec![0, 0], vec![2, 0]], 2).unwrap();
        let pooled = MarginMatrix::from_tallies(&[vec![0, 3], vec![3, 0]], 6).unwrap();
        let avg = MarginMatrix::weighted_average(&[(4.0, &a), (2.0, &b)]).unwrap();
        assert!((avg.get(0, 1) - pooled.get(0, 1)).abs() < 1e-15);
    }

    #[test]
    fn serde_roundtrip_validates() {
        let json = serde_json::to_string(&rps(0.5)).unwrap();
        let back: MarginMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rps(0.5));
        assert!(serde_json::from_str::<MarginMatrix>("[[0,1],[1,0]]").is_err());
        assert!(serde_json::from_str::<Lottery>("[0.2,0.2]").is_err());
    }
}
