//! Tabular urn process.
//!
//! An urn of `N` balls, each labelled with an alternative. Each step draws two
//! balls uniformly with replacement and a random voter; the loser's ball is
//! relabelled with the winner. With probability `ε` one uniformly drawn ball is
//! then relabelled to a uniformly drawn alternative. The time-averaged urn
//! composition approximates the maximal lottery of the electorate.
//!
//! The urn is stored as a count vector; drawing a ball is a categorical draw
//! proportional to counts.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::social_choice::{AlternativeId, Lottery, PreferenceOracle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UrnConfig {
    /// Number of balls `N`.
    pub capacity: u32,
    /// Mutation rate `ε`.
    pub mutation_rate: f64,
    pub steps: u64,
    pub burn_in: u64,
    /// Record every k-th state; time averages need `burn_in` on this grid.
    pub snapshot_every: u64,
    pub seed: u64,
}

impl Default for UrnConfig {
    fn default() -> Self {
        UrnConfig {
            capacity: 100,
            mutation_rate: 0.01,
            steps: 200_000,
            burn_in: 10_000,
            snapshot_every: 1,
            seed: 0,
        }
    }
}

impl UrnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::invalid("urn capacity must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::invalid("mutation rate must lie in [0, 1]"));
        }
        if self.snapshot_every == 0 {
            return Err(Error::invalid("snapshot_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UrnState {
    counts: Vec<u32>,
    capacity: u32,
}

impl UrnState {
    pub fn from_counts(counts: Vec<u32>) -> Result<Self> {
        let capacity: u32 = counts.iter().sum();
        if capacity == 0 {
            return Err(Error::invalid("urn must hold at least one ball"));
        }
        Ok(UrnState { counts, capacity })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn proportions(&self) -> Lottery {
        Lottery::from_weights(&self.counts.iter().map(|&c| c as f64).collect::<Vec<_>>())
            .expect("urn holds at least one ball")
    }

    /// Alternative carrying the ball at `index ∈ [0, N)`.
    pub fn ball(&self, index: u32) -> AlternativeId {
        let mut acc = 0;
        for (a, &c) in self.counts.iter().enumerate() {
            acc += c;
            if index < acc {
                return AlternativeId(a);
            }
        }
        panic!("ball index {index} out of range for capacity {}", self.capacity)
    }

    /// Relabels one ball of `loser` as `winner`.
    pub fn apply_duel(&mut self, winner: AlternativeId, loser: AlternativeId) {
        if winner == loser || self.counts[loser.0] == 0 {
            return;
        }
        self.counts[loser.0] -= 1;
        self.counts[winner.0] += 1;
    }

    fn draw_ball<R: Rng + ?Sized>(&self, rng: &mut R) -> (u32, AlternativeId) {
        let i = rng.random_range(0..self.capacity);
        (i, self.ball(i))
    }
}

/// Fills an urn of `capacity` balls with uniformly random labels.
pub fn urn_init<R: Rng + ?Sized>(capacity: u32, n_alternatives: usize, rng: &mut R) -> Result<UrnState> {
    if capacity == 0 {
        return Err(Error::invalid("urn capacity must be positive"));
    }
    if n_alternatives == 0 {
        return Err(Error::invalid("no alternatives"));
    }
    let mut counts = vec![0u32; n_alternatives];
    for _ in 0..capacity {
        counts[rng.random_range(0..n_alternatives)] += 1;
    }
    Ok(UrnState { counts, capacity })
}

/// One duel followed by an optional mutation. Users are drawn uniformly from `users`.
pub fn urn_step<U, O, R>(state: &mut UrnState, oracle: &O, users: &[U], mutation_rate: f64, rng: &mut R)
where
    O: PreferenceOracle<U> + ?Sized,
    R: Rng + ?Sized,
{
    let (i, a) = state.draw_ball(rng);
    let (j, b) = state.draw_ball(rng);
    let user = &users[rng.random_range(0..users.len())];
    if i != j && a != b {
        let (winner, loser) = oracle.prefer(user, a, b).resolve(a, b);
        state.apply_duel(winner, loser);
    }
    if rng.random_bool(mutation_rate) {
        let (_, old) = state.draw_ball(rng);
        let new = AlternativeId(rng.random_range(0..state.counts.len()));
        state.apply_duel(new, old);
    }
}

/// Recorded run of the urn: sparse snapshots plus exact running sums.
#[derive(Clone, Debug)]
pub struct UrnTrajectory {
    capacity: u32,
    steps: u64,
    snapshot_every: u64,
    /// State after step `k · snapshot_every`, `k ≥ 1`.
    snapshots: Vec<Vec<u32>>,
    /// Σ of counts over steps `1..=k · snapshot_every`.
    prefix_sums: Vec<Vec<u64>>,
}

impl UrnTrajectory {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn snapshot_every(&self) -> u64 {
        self.snapshot_every
    }

    /// `(step, counts)` pairs.
    pub fn snapshots(&self) -> impl Iterator<Item = (u64, &[u32])> {
        self.snapshots
            .iter()
            .enumerate()
            .map(|(k, c)| ((k as u64 + 1) * self.snapshot_every, c.as_slice()))
    }

    pub fn final_state(&self) -> Option<UrnState> {
        self.snapshots.last().map(|c| UrnState {
            counts: c.clone(),
            capacity: self.capacity,
        })
    }

    /// Number of times the recorded count of `alternative` crosses `level`
    /// (strictly from one side to the other) among snapshots after `from_step`.
    pub fn crossings(&self, alternative: AlternativeId, level: f64, from_step: u64) -> usize {
        let mut side: Option<bool> = None;
        let mut n = 0;
        for (step, counts) in self.snapshots() {
            if step <= from_step {
                continue;
            }
            let c = counts[alternative.0] as f64;
            if c == level {
                continue;
            }
            let above = c > level;
            if side.is_some_and(|s| s != above) {
                n += 1;
            }
            side = Some(above);
        }
        n
    }

    /// Step-indexed CSV: `step,count_0,…,count_{|A|-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let n = self.snapshots.first().map_or(0, Vec::len);
        let mut header = vec!["step".to_string()];
        header.extend((0..n).map(|a| format!("count_{a}")));
        out.write_record(&header)?;
        for (step, counts) in self.snapshots() {
            let mut row = vec![step.to_string()];
            row.extend(counts.iter().map(u32::to_string));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs `steps` urn steps from a random initial urn seeded by `cfg.seed`.
pub fn urn_run<U, O>(
    cfg: &UrnConfig,
    n_alternatives: usize,
    users: &[U],
    oracle: &O,
    steps: u64,
) -> Result<UrnTrajectory>
where
    O: PreferenceOracle<U> + ?Sized,
{
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::invalid("urn run needs at least one step"));
    }
    if steps % cfg.snapshot_every != 0 {
        return Err(Error::invalid("steps must be a multiple of snapshot_every"));
    }
    if users.is_empty() {
        return Err(Error::EmptyElectorate);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = urn_init(cfg.capacity, n_alternatives, &mut rng)?;
    let mut running = vec![0u64; n_alternatives];
    let mut traj = UrnTrajectory {
        capacity: cfg.capacity,
        steps,
        snapshot_every: cfg.snapshot_every,
        snapshots: Vec::with_capacity((steps / cfg.snapshot_every) as usize),
        prefix_sums: Vec::with_capacity((steps / cfg.snapshot_every) as usize),
    };
    for t in 1..=steps {
        urn_step(&mut state, oracle, users, cfg.mutation_rate, &mut rng);
        for (r, &c) in running.iter_mut().zip(&state.counts) {
            *r += c as u64;
        }
        if t % cfg.snapshot_every == 0 {
            traj.snapshots.push(state.counts.clone());
            traj.prefix_sums.push(running.clone());
        }
    }
    Ok(traj)
}

/// Mean urn proportions over steps `burn_in + 1 ..= steps`.
pub fn time_average(traj: &UrnTrajectory, burn_in: u64) -> Result<Lottery> {
    if burn_in >= traj.steps {
        return Err(Error::invalid(format!(
            "burn-in {burn_in} must be below the {} recorded steps",
            traj.steps
        )));
    }
    if burn_in % traj.snapshot_every != 0 {
        return Err(Error::invalid(format!(
            "burn-in {burn_in} is not on the snapshot grid (every {})",
            traj.snapshot_every
        )));
    }
    let end = traj.prefix_sums.last().expect("nonempty trajectory");
    let k = (burn_in / traj.snapshot_every) as usize;
    let weights: Vec<f64> = end
        .iter()
        .enumerate()
        .map(|(a, &e)| {
            let start = if k == 0 { 0 } else { traj.prefix_sums[k - 1][a] };
            (e - start) as f64
        })
        .collect();
    Lottery::from_weights(&weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::social_choice::Choice;

    fn prefers_lowest(_: &(), a: AlternativeId, b: AlternativeId) -> Choice {
        if a < b {
            Choice::First
        } else {
            Choice::Second
        }
    }

    #[test]
    fn init_conserves_and_reproduces() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = urn_init(6, 3, &mut r1).unwrap();
        let b = urn_init(6, 3, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counts().iter().sum::<u32>(), 6);

        let one = urn_init(1, 4, &mut r1).unwrap();
        assert_eq!(one.counts().iter().filter(|&&c| c == 1).count(), 1);
        assert!(urn_init(0, 3, &mut r1).is_err());
    }

    #[test]
    fn init_labels_are_uniform() {
        // χ² over 3 alternatives, 2 dof; 13.8 is the 0.999 quantile.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut totals = [0u64; 3];
        for _ in 0..2000 {
            let s = urn_init(30, 3, &mut rng).unwrap();
            for (t, &c) in totals.iter_mut().zip(s.counts()) {
                *t += c as u64;
            }
        }
        let expected = 2000.0 * 30.0 / 3.0;
        let chi2: f64 = totals
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 13.8, "chi2 = {chi2}");
    }

    #[test]
    fn duel_mechanics() {
        let mut s = UrnState::from_counts(vec![3, 2, 1]).unwrap();
        s.apply_duel(AlternativeId(1), AlternativeId(0));
        assert_eq!(s.counts(), &[2, 3, 1]);
        s.apply_duel(AlternativeId(0), AlternativeId(0));
        assert_eq!(s.counts(), &[2, 3, 1]);
    }

    #[test]
    fn same_label_pair_is_noop_without_mutation() {
        let oracle = prefers_lowest;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = UrnState::from_counts(vec![5, 0, 0]).unwrap();
        for _ in 0..100 {
            urn_step(&mut s, &oracle, &[()], 0.0, &mut rng);
        }
        assert_eq!(s.counts(), &[5, 0, 0]);
    }

    #[test]
    fn full_mutation_moves_at_most_one_ball() {
        // All balls share a label, so only the mutation can move one.
        let oracle = prefers_lowest;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut s = UrnState::from_counts(vec![4, 0, 0]).unwrap();
            let before = s.clone();
            urn_step(&mut s, &oracle, &[()], 1.0, &mut rng);
            let moved: u32 = s
                .counts()
                .iter()
                .zip(before.counts())
                .map(|(a, b)| a.abs_diff(*b))
                .sum();
            assert!(moved == 0 || moved == 2);
            assert_eq!(s.counts().iter().sum::<u32>(), 4);
        }
    }

    #[test]
    fn unanimous_electorate_absorbs() {
        let cfg = UrnConfig {
            capacity: 20,
            mutation_rate: 0.0,
            seed: 9,
            ..UrnConfig::default()
        };
        let traj = urn_run(&cfg, 3, &[(); 4], &prefers_lowest, 5000).unwrap();
        let absorbed = traj
            .snapshots()
            .position(|(_, c)| c == [20, 0, 0])
            .expect("reaches the absorbing state");
        assert!(traj.snapshots().skip(absorbed).all(|(_, c)| c == [20, 0, 0]));
        let avg = time_average(&traj, 4000).unwrap();
        assert_eq!(avg.probs(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn single_step_and_tail_average() {
        let cfg = UrnConfig {
            capacity: 10,
            seed: 1,
            ..UrnConfig::default()
        };
        assert!(urn_run(&cfg, 3, &[()], &prefers_lowest, 0).is_err());
        let traj = urn_run(&cfg, 3, &[()], &prefers_lowest, 1).unwrap();
        assert_eq!(traj.snapshots().count(), 1);

        let traj = urn_run(&cfg, 3, &[()], &prefers_lowest, 50).unwrap();
        let last = time_average(&traj, 49).unwrap();
        assert_eq!(last, traj.final_state().unwrap().proportions());
        assert!(time_average(&traj, 50).is_err());
    }

    #[test]
    fn sparse_snapshots_require_grid_burn_in() {
        let cfg = UrnConfig {
            capacity: 10,
            snapshot_every: 10,
            seed: 1,
            ..UrnConfig::default()
        };
        let traj = urn_run(&cfg, 3, &[()], &prefers_lowest, 100).unwrap();
        assert_eq!(traj.snapshots().count(), 10);
        assert!(time_average(&traj, 20).is_ok());
        assert!(time_average(&traj, 25).is_err());
    }

    #[test]
    fn csv_layout() {
        let cfg = UrnConfig {
            capacity: 4,
            seed: 2,
            ..UrnConfig::default()
        };
        let traj = urn_run(&cfg, 2, &[()], &prefers_lowest, 3).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,count_0,count_1");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("3,"));
    }
}
