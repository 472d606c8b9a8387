//! Head-to-head win rates between policies on simulated users.
//!
//! Every round draws a user and two uniforms `u_x`, `u_y`, and scores the
//! antithetic pair `½[s(π(u_x), π'(u_y)) + s(π(u_y), π'(u_x))]`, where `s` is 1
//! for a strictly closer alternative, 0 for a strictly farther one, and ½ for
//! identical alternatives or an exact distance tie. Swapping the roles of `π`
//! and `π'` under the same random stream turns every round score `x` into
//! `1 − x`, so the two rates sum to one exactly.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::apa::{Policy, Transcript};
use crate::environment::{atom_margin_matrix, global_margin_matrix, EmbeddingMode, Environment, UserPoint};
use crate::error::{Error, Result};
use crate::social_choice::{borda_winner, maximal_lottery, AlternativeId, Lottery, MarginMatrix};

pub const ADAPTIVE_MAXIMAL_LOTTERY: &str = "adaptive_maximal_lottery";
pub const ADAPTIVE_BORDA: &str = "adaptive_borda";
pub const GLOBAL_BORDA: &str = "global_borda";
pub const GLOBAL_MAXIMAL_LOTTERY: &str = "global_maximal_lottery";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn users(self, env: &Environment) -> &[UserPoint] {
        match self {
            Split::Train => &env.train,
            Split::Validation => &env.validation,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    pub opponent: String,
    pub split: Split,
    pub rounds: u64,
    pub win_rate: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rounds: u64,
    /// Transcript steps per point of the online curve.
    pub curve_window: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rounds: 50_000,
            curve_window: 5_000,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.curve_window == 0 {
            return Err(Error::invalid("rounds and curve window must be positive"));
        }
        Ok(())
    }
}

/// Score of `a` against `b` for `user`, in halves (0, 1 or 2).
pub fn duel_halves(env: &Environment, user: &UserPoint, a: AlternativeId, b: AlternativeId) -> u64 {
    if a == b {
        return 1;
    }
    let dist = |id: AlternativeId| {
        let p = env.alternatives[id.0].position;
        (p[0] - user.position[0]).hypot(p[1] - user.position[1])
    };
    let (da, db) = (dist(a), dist(b));
    if da < db {
        2
    } else if da > db {
        0
    } else {
        1
    }
}

fn margins_by_atom(env: &Environment) -> Result<(MarginMatrix, Vec<Option<MarginMatrix>>)> {
    let global = global_margin_matrix(env)?;
    let atoms = (0..env.grid.n_atoms())
        .map(|a| match atom_margin_matrix(env, a) {
            Ok(m) => Ok(Some(m)),
            Err(Error::EmptyAtom(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((global, atoms))
}

fn table(env: &Environment, lotteries: Vec<Lottery>) -> Policy {
    Policy::Table {
        grid: env.grid.clone(),
        mode: EmbeddingMode::OneHot,
        lotteries,
    }
}

/// Per-atom maximal lottery of the training users; empty atoms use the global one.
pub fn adaptive_maximal_lottery_policy(env: &Environment) -> Result<Policy> {
    let (global, atoms) = margins_by_atom(env)?;
    let fallback = maximal_lottery(&global)?;
    let lotteries = atoms
        .iter()
        .map(|m| match m {
            Some(m) => maximal_lottery(m),
            None => Ok(fallback.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(table(env, lotteries))
}

/// The global maximal lottery in every atom.
pub fn global_maximal_lottery_policy(env: &Environment) -> Result<Policy> {
    let p = maximal_lottery(&global_margin_matrix(env)?)?;
    Ok(table(env, vec![p; env.grid.n_atoms()]))
}

/// Point mass on each atom's Borda winner; empty atoms use the global winner.
pub fn adaptive_borda_policy(env: &Environment) -> Result<Policy> {
    let (global, atoms) = margins_by_atom(env)?;
    let n = env.n_alternatives();
    let fallback = borda_winner(&global);
    let lotteries = atoms
        .iter()
        .map(|m| Lottery::point_mass(n, m.as_ref().map_or(fallback, borda_winner)))
        .collect();
    Ok(table(env, lotteries))
}

/// Point mass on the Borda winner of all training users, in every atom.
pub fn global_borda_policy(env: &Environment) -> Result<Policy> {
    let w = borda_winner(&global_margin_matrix(env)?);
    Ok(table(env, vec![Lottery::point_mass(env.n_alternatives(), w); env.grid.n_atoms()]))
}

/// Opponent policy by its report name.
pub fn named_policy(env: &Environment, name: &str) -> Result<Policy> {
    match name {
        ADAPTIVE_MAXIMAL_LOTTERY => adaptive_maximal_lottery_policy(env),
        ADAPTIVE_BORDA => adaptive_borda_policy(env),
        GLOBAL_BORDA => global_borda_policy(env),
        GLOBAL_MAXIMAL_LOTTERY => global_maximal_lottery_policy(env),
        other => Err(Error::invalid(format!("unknown opponent {other:?}"))),
    }
}

fn tally_to_report(opponent: &str, split: Split, rounds: u64, quarters: u64) -> WinRateReport {
    let win_rate = quarters as f64 / (4 * rounds) as f64;
    WinRateReport {
        opponent: opponent.to_string(),
        split,
        rounds,
        win_rate,
        std_error: (win_rate * (1.0 - win_rate) / rounds as f64).sqrt(),
    }
}

fn antithetic_quarters(
    env: &Environment,
    user: &UserPoint,
    p: &Lottery,
    q: &Lottery,
    ux: f64,
    uy: f64,
) -> u64 {
    duel_halves(env, user, p.sample_with(ux), q.sample_with(uy)) + duel_halves(env, user, p.sample_with(uy), q.sample_with(ux))
}

/// Sampled win rate of `pi` against `opponent` over `users`.
pub fn win_rate<R: Rng + ?Sized>(
    pi: &Policy,
    opponent: &Policy,
    opponent_name: &str,
    split: Split,
    env: &Environment,
    rounds: u64,
    rng: &mut R,
) -> Result<WinRateReport> {
    let users = split.users(env);
    if users.is_empty() {
        return Err(Error::EmptyElectorate);
    }
    if rounds == 0 {
        return Err(Error::invalid("need at least one round"));
    }
    let p = pi.tabulate(&env.grid)?;
    let q = opponent.tabulate(&env.grid)?;
    let atoms: Vec<usize> = users.iter().map(|u| env.atom_of(u)).collect();
    let mut quarters = 0u64;
    for _ in 0..rounds {
        let i = rng.random_range(0..users.len());
        let (ux, uy): (f64, f64) = (rng.random(), rng.random());
        quarters += antithetic_quarters(env, &users[i], &p[atoms[i]], &q[atoms[i]], ux, uy);
    }
    Ok(tally_to_report(opponent_name, split, rounds, quarters))
}

/// Exact expected win rate of per-atom tables `p` against `q`, averaged over `users`.
pub fn expected_win_rate(env: &Environment, users: &[UserPoint], p: &[Lottery], q: &[Lottery]) -> Result<f64> {
    if users.is_empty() {
        return Err(Error::EmptyElectorate);
    }
    let n = env.n_alternatives();
    let mut total = 0.0;
    for u in users {
        let atom = env.atom_of(u);
        let (pa, qa) = (&p[atom], &q[atom]);
        for i in 0..n {
            if pa.prob(AlternativeId(i)) == 0.0 {
                continue;
            }
            for j in 0..n {
                let w = pa.prob(AlternativeId(i)) * qa.prob(AlternativeId(j));
                total += w * duel_halves(env, u, AlternativeId(i), AlternativeId(j)) as f64 / 2.0;
            }
        }
    }
    Ok(total / users.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Last transcript step of the window.
    pub t: u64,
    pub win_rate: f64,
}

/// Win rate of the urn lotteries `p_t` recorded in `transcript` against
/// `skyline(φ(u_t))`, one antithetic round per step, aggregated over
/// consecutive windows of `window` steps. A trailing partial window is dropped.
pub fn online_win_rate_curve<R: Rng + ?Sized>(
    transcript: &Transcript,
    skyline: &Policy,
    env: &Environment,
    window: usize,
    rng: &mut R,
) -> Result<Vec<CurvePoint>> {
    if window == 0 || window > transcript.len() {
        return Err(Error::invalid(format!(
            "window {window} must lie in 1..={}",
            transcript.len()
        )));
    }
    let sky = skyline.tabulate(&env.grid)?;
    transcript
        .records
        .chunks_exact(window)
        .map(|chunk| {
            let mut quarters = 0u64;
            for r in chunk {
                let user = env
                    .user(r.user_id)
                    .ok_or_else(|| Error::invalid(format!("transcript names unknown user {}", r.user_id)))?;
                let (ux, uy): (f64, f64) = (rng.random(), rng.random());
                quarters += antithetic_quarters(env, user, &r.lottery, &sky[r.atom], ux, uy);
            }
            Ok(CurvePoint {
                t: chunk.last().expect("nonempty window").t,
                win_rate: quarters as f64 / (4 * chunk.len()) as f64,
            })
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for p in curve {
        out.serialize(p)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_curve_csv<R: Read>(r: R) -> Result<Vec<CurvePoint>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub environment: String,
    pub env_seed: u64,
    pub eval_seed: u64,
    pub opponent: String,
    pub split: Split,
    pub rounds: u64,
    pub win_rate: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TableReport {
    pub rows: Vec<ReportRow>,
}

impl TableReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<TableReport> {
        let rows = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        Ok(TableReport { rows })
    }

    /// One line per environment, one `rate ± se` column per (opponent, split).
    pub fn to_text(&self) -> String {
        let mut columns: Vec<(String, Split)> = Vec::new();
        let mut envs: Vec<String> = Vec::new();
        for r in &self.rows {
            if !columns.contains(&(r.opponent.clone(), r.split)) {
                columns.push((r.opponent.clone(), r.split));
            }
            if !envs.contains(&r.environment) {
                envs.push(r.environment.clone());
            }
        }
        let headers: Vec<String> = columns.iter().map(|(o, s)| format!("{o} ({s})")).collect();
        let widths: Vec<usize> = headers.iter().map(|h| h.len().max(15)).collect();
        let env_width = envs.iter().map(String::len).max().unwrap_or(0).max("environment".len());
        let mut out = format!("{:<env_width$}", "environment");
        for (h, w) in headers.iter().zip(&widths) {
            out.push_str(&format!("  {h:>w$}"));
        }
        out.push('\n');
        for e in &envs {
            out.push_str(&format!("{e:<env_width$}"));
            for ((o, s), w) in columns.iter().zip(&widths) {
                let cell = self
                    .rows
                    .iter()
                    .find(|r| &r.environment == e && &r.opponent == o && r.split == *s)
                    .map(|r| format!("{:.3} ± {:.3}", r.win_rate, r.std_error))
                    .unwrap_or_else(|| "-".to_string());
                out.push_str(&format!("  {cell:>w$}"));
            }
            out.push('\n');
        }
        if let Some(r) = self.rows.first() {
            out.push_str(&format!("rounds per cell: {}\n", r.rounds));
        }
        out
    }
}

/// Win rates of `policy` against each named opponent on both splits.
/// Every matchup restarts the stream from `seed`, so rows are reproducible
/// individually.
pub fn table_report(
    label: &str,
    env: &Environment,
    policy: &Policy,
    opponents: &[&str],
    rounds: u64,
    seed: u64,
) -> Result<TableReport> {
    use rand::SeedableRng;
    let mut rows = Vec::new();
    for name in opponents {
        let opponent = named_policy(env, name)?;
        for split in [Split::Train, Split::Validation] {
            if split.users(env).is_empty() {
                continue;
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let r = win_rate(policy, &opponent, name, split, env, rounds, &mut rng)?;
            rows.push(ReportRow {
                environment: label.to_string(),
                env_seed: env.seed,
                eval_seed: seed,
                opponent: r.opponent,
                split,
                rounds,
                win_rate: r.win_rate,
                std_error: r.std_error,
            });
        }
    }
    Ok(TableReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{gen_environment, EnvConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_env() -> Environment {
        gen_environment(&EnvConfig {
            n_train: 300,
            n_validation: 100,
            ..EnvConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn self_play_is_exactly_half() {
        let env = small_env();
        let sky = adaptive_maximal_lottery_policy(&env).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = win_rate(&sky, &sky, "self", Split::Train, &env, 2000, &mut rng).unwrap();
        assert_eq!(r.win_rate, 0.5);
    }

    #[test]
    fn swapped_roles_sum_to_one() {
        let env = small_env();
        let a = global_borda_policy(&env).unwrap();
        let b = adaptive_maximal_lottery_policy(&env).unwrap();
        let ab = win_rate(&a, &b, "b", Split::Validation, &env, 3000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let ba = win_rate(&b, &a, "a", Split::Validation, &env, 3000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(ab.win_rate + ba.win_rate, 1.0);
    }

    #[test]
    fn sampled_rate_matches_exact_expectation() {
        let env = small_env();
        let sky = adaptive_maximal_lottery_policy(&env).unwrap();
        let borda = global_borda_policy(&env).unwrap();
        let exact = expected_win_rate(&env, &env.train, &sky.tabulate(&env.grid).unwrap(), &borda.tabulate(&env.grid).unwrap()).unwrap();
        let r = win_rate(&sky, &borda, "g", Split::Train, &env, 50_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((r.win_rate - exact).abs() < 4.0 * r.std_error.max(1e-3), "{} vs {exact}", r.win_rate);
    }

    #[test]
    fn empty_users_are_rejected() {
        let mut env = small_env();
        env.validation.clear();
        let sky = adaptive_maximal_lottery_policy(&env).unwrap();
        let err = win_rate(&sky, &sky, "s", Split::Validation, &env, 10, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::EmptyElectorate)));
    }

    #[test]
    fn report_round_trips_through_csv() {
        let env = small_env();
        let sky = adaptive_maximal_lottery_policy(&env).unwrap();
        let report = table_report("env-0", &env, &sky, &[ADAPTIVE_BORDA, GLOBAL_BORDA], 500, 3).unwrap();
        assert_eq!(report.rows.len(), 4);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(TableReport::read_csv(buf.as_slice()).unwrap(), report);
        let text = report.to_text();
        assert!(text.contains("adaptive_borda (validation)"));
        assert!(text.contains('±'));
    }
}
