//! Online neural-urn learning and distillation.
//!
//! A ReLU-headed network maps a user embedding to nonnegative ball masses `n`.
//! Each step samples a user, draws a pair of distinct alternatives from
//! `p = n / Σn`, asks the user, and takes one SGD step pulling the network
//! output toward the urn update `max(n + e_winner − e_loser, 0)`. With
//! probability `r` a mutation update follows (loser drawn from `p`, winner
//! uniform). Because the urn oscillates on non-transitive profiles, the final
//! policy is a softmax network distilled from the transcript of `p_t`.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::environment::{EmbeddingMode, Environment, Grid, UserPoint};
use crate::error::{Error, Result};
use crate::neural::{Gradients, HeadKind, LossKind, Mlp};
use crate::social_choice::{AlternativeId, Lottery, PreferenceOracle};

/// Urn mass at or below this is treated as a collapsed urn.
pub const COLLAPSE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApaConfig {
    /// Urn scale `N`: expected total ball mass after warm start.
    pub urn_scale: f64,
    /// Mutation rate `r`.
    pub mutation_rate: f64,
    pub learning_rate: f64,
    pub steps: u64,
    pub warm_start_iters: usize,
    /// Step size used during warm start; `None` reuses `learning_rate`.
    pub warm_start_learning_rate: Option<f64>,
    pub warm_start_targets: WarmStartTargets,
    pub hidden: Vec<usize>,
    /// Output nonlinearity of the urn network.
    pub head: HeadKind,
    pub embedding: EmbeddingMode,
    pub seed: u64,
}

impl Default for ApaConfig {
    fn default() -> Self {
        ApaConfig {
            urn_scale: 100.0,
            mutation_rate: 0.3,
            learning_rate: 5e-4,
            steps: 200_000,
            warm_start_iters: 2000,
            warm_start_learning_rate: None,
            warm_start_targets: WarmStartTargets::Resampled,
            hidden: vec![32, 32],
            head: HeadKind::Softplus,
            embedding: EmbeddingMode::OneHot,
            seed: 0,
        }
    }
}

impl ApaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.urn_scale > 0.0) || !self.urn_scale.is_finite() {
            return Err(Error::invalid("urn scale must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::invalid("mutation rate must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if let Some(lr) = self.warm_start_learning_rate {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::invalid("warm-start learning rate must be positive"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("need at least one nonempty hidden layer"));
        }
        if self.head == HeadKind::Softmax {
            return Err(Error::HeadLossMismatch("the urn network needs a nonnegative head"));
        }
        Ok(())
    }

    pub fn warm_start_lr(&self) -> f64 {
        self.warm_start_learning_rate.unwrap_or(self.learning_rate)
    }

    /// Fresh urn network for `input_dim`-dimensional embeddings.
    pub fn init_network<R: Rng + ?Sized>(&self, input_dim: usize, n_alternatives: usize, rng: &mut R) -> Result<Mlp> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(n_alternatives);
        Mlp::new(&sizes, self.head, rng)
    }
}

/// How warm-start targets are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStartTargets {
    /// Fresh targets at every iteration.
    #[default]
    Resampled,
    /// One fixed random target per distinct embedding, a random initial urn
    /// for every input.
    PerEmbedding,
}

/// One online step: what was shown to whom and what they chose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub t: u64,
    pub user_id: usize,
    pub atom: usize,
    /// Normalized urn the pair was drawn from (before this step's update).
    pub lottery: Lottery,
    pub first: AlternativeId,
    pub second: AlternativeId,
    pub winner: AlternativeId,
}

/// Records of a run together with what is needed to rebuild each embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Transcript {
    pub grid: Grid,
    pub mode: EmbeddingMode,
    pub n_alternatives: usize,
    pub records: Vec<TranscriptRecord>,
}

impl Transcript {
    pub fn new(grid: Grid, mode: EmbeddingMode, n_alternatives: usize) -> Self {
        Transcript {
            grid,
            mode,
            n_alternatives,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn embedding(&self, record: &TranscriptRecord) -> Vec<f64> {
        self.grid.atom_embedding(record.atom, self.mode)
    }

    /// CSV with columns `t,user_id,atom,p_0..p_{|A|-1},a1,a2,winner`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["t", "user_id", "atom"].iter().map(|s| s.to_string()).collect();
        header.extend((0..self.n_alternatives).map(|a| format!("p_{a}")));
        header.extend(["a1", "a2", "winner"].iter().map(|s| s.to_string()));
        out.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.t.to_string(), r.user_id.to_string(), r.atom.to_string()];
            row.extend(r.lottery.probs().iter().map(|p| format!("{p:e}")));
            row.extend([r.first.0, r.second.0, r.winner.0].iter().map(usize::to_string));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, grid: Grid, mode: EmbeddingMode) -> Result<Transcript> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let n_alternatives = header.iter().filter(|h| h.starts_with("p_")).count();
        let expected = 3 + n_alternatives + 3;
        if header.len() != expected || n_alternatives < 2 {
            return Err(Error::Format(format!("unexpected transcript header {header:?}")));
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let field = |i: usize| -> Result<&str> {
                row.get(i)
                    .ok_or_else(|| Error::Format(format!("short transcript row {row:?}")))
            };
            let int = |i: usize| -> Result<usize> {
                field(i)?
                    .parse::<usize>()
                    .map_err(|e| Error::Format(format!("column {i}: {e}")))
            };
            let probs = (0..n_alternatives)
                .map(|a| {
                    field(3 + a)?
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("p_{a}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let base = 3 + n_alternatives;
            let record = TranscriptRecord {
                t: int(0)? as u64,
                user_id: int(1)?,
                atom: int(2)?,
                lottery: Lottery::new(probs)?,
                first: AlternativeId(int(base)?),
                second: AlternativeId(int(base + 1)?),
                winner: AlternativeId(int(base + 2)?),
            };
            if record.first == record.second || record.atom >= grid.n_atoms() {
                return Err(Error::Format(format!("invalid transcript record at t={}", record.t)));
            }
            records.push(record);
        }
        Ok(Transcript {
            grid,
            mode,
            n_alternatives,
            records,
        })
    }
}

/// A pair drawn from the neural urn at one embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub masses: Vec<f64>,
    pub lottery: Lottery,
    pub first: AlternativeId,
    pub second: AlternativeId,
}

/// Normalized urn; fails on a collapsed urn.
pub fn urn_lottery(masses: &[f64]) -> Result<Lottery> {
    let total: f64 = masses.iter().sum();
    if !(total > COLLAPSE_EPS) {
        return Err(Error::CollapsedUrn(total));
    }
    Lottery::from_weights(masses)
}

/// Draws two distinct alternatives from `p`: the first from `p`, the second
/// from `p` conditioned on differing. With a single-alternative support the
/// second is uniform over the rest.
pub fn sample_pair<R: Rng + ?Sized>(p: &Lottery, rng: &mut R) -> (AlternativeId, AlternativeId) {
    let first = p.sample(rng);
    let rest = 1.0 - p.prob(first);
    let n = p.len();
    let second = if rest > 1e-12 {
        let mut u = rng.random::<f64>() * rest;
        let mut pick = None;
        for (i, &pi) in p.probs().iter().enumerate() {
            if i == first.0 || pi <= 0.0 {
                continue;
            }
            pick = Some(i);
            if u < pi {
                break;
            }
            u -= pi;
        }
        AlternativeId(pick.expect("positive residual mass"))
    } else {
        let k = rng.random_range(0..n - 1);
        AlternativeId(if k >= first.0 { k + 1 } else { k })
    };
    (first, second)
}

/// Samples a query for embedding `x`.
pub fn propose<R: Rng + ?Sized>(net: &Mlp, x: &[f64], rng: &mut R) -> Result<Query> {
    let masses = net.forward(x)?;
    let lottery = urn_lottery(&masses)?;
    let (first, second) = sample_pair(&lottery, rng);
    Ok(Query {
        masses,
        lottery,
        first,
        second,
    })
}

/// `max(n + e_winner − e_loser, 0)`.
pub fn urn_target(masses: &[f64], winner: AlternativeId, loser: AlternativeId) -> Vec<f64> {
    let mut t = masses.to_vec();
    t[winner.0] += 1.0;
    t[loser.0] -= 1.0;
    for v in &mut t {
        *v = v.max(0.0);
    }
    t
}

/// One SGD step on `‖f(x) − max(n + e_winner − e_loser, 0)‖²`.
pub fn urn_update(net: &mut Mlp, x: &[f64], masses: &[f64], winner: AlternativeId, loser: AlternativeId, lr: f64) -> Result<()> {
    let target = urn_target(masses, winner, loser);
    net.train_step(x, &target, LossKind::SquaredError, lr)?;
    Ok(())
}

/// Mutation update: loser drawn from the urn `n`, winner uniform.
pub fn mutation_update<R: Rng + ?Sized>(net: &mut Mlp, x: &[f64], masses: &[f64], lr: f64, rng: &mut R) -> Result<()> {
    let loser = urn_lottery(masses)?.sample(rng);
    let winner = AlternativeId(rng.random_range(0..masses.len()));
    urn_update(net, x, masses, winner, loser, lr)
}

/// Fits the urn network to random nonnegative targets of expected total mass
/// `N` (components uniform on `[0, 2N/|A|]`) at sampled embeddings.
pub fn warm_start<R, S>(net: &mut Mlp, cfg: &ApaConfig, mut sample_embedding: S, rng: &mut R) -> Result<()>
where
    R: Rng + ?Sized,
    S: FnMut(&mut R) -> Vec<f64>,
{
    if net.head() == HeadKind::Softmax {
        return Err(Error::HeadLossMismatch("warm start needs a nonnegative head"));
    }
    let k = net.output_dim();
    let amplitude = 2.0 * cfg.urn_scale / k as f64;
    let mut target = vec![0.0; k];
    for _ in 0..cfg.warm_start_iters {
        let x = sample_embedding(rng);
        match cfg.warm_start_targets {
            WarmStartTargets::Resampled => target.iter_mut().for_each(|t| *t = rng.random::<f64>() * amplitude),
            WarmStartTargets::PerEmbedding => {
                let mut local = ChaCha8Rng::seed_from_u64(embedding_seed(cfg.seed, &x));
                target.iter_mut().for_each(|t| *t = local.random::<f64>() * amplitude);
            }
        }
        net.train_step(&x, &target, LossKind::SquaredError, cfg.warm_start_lr())?;
    }
    Ok(())
}

fn embedding_seed(seed: u64, x: &[f64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for v in x {
        h.update(v.to_bits().to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// One step of the online loop against a simulated electorate.
pub fn apa_step<O, R>(
    net: &mut Mlp,
    cfg: &ApaConfig,
    env: &Environment,
    users: &[UserPoint],
    oracle: &O,
    t: u64,
    rng: &mut R,
) -> Result<TranscriptRecord>
where
    O: PreferenceOracle<UserPoint> + ?Sized,
    R: Rng + ?Sized,
{
    let user = &users[rng.random_range(0..users.len())];
    let atom = env.atom_of(user);
    let x = env.grid.atom_embedding(atom, cfg.embedding);
    let q = propose(net, &x, rng)?;
    let choice = oracle.prefer(user, q.first, q.second);
    let (winner, loser) = choice.resolve(q.first, q.second);
    urn_update(net, &x, &q.masses, winner, loser, cfg.learning_rate)?;
    if rng.random_bool(cfg.mutation_rate) {
        mutation_update(net, &x, &q.masses, cfg.learning_rate, rng)?;
    }
    Ok(TranscriptRecord {
        t,
        user_id: user.id,
        atom,
        lottery: q.lottery,
        first: q.first,
        second: q.second,
        winner,
    })
}

/// Warm start followed by `cfg.steps` online steps on the training users.
pub fn apa_train(cfg: &ApaConfig, env: &Environment) -> Result<(Mlp, Transcript)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = env.grid.embedding_dim(cfg.embedding);
    let mut net = cfg.init_network(dim, env.n_alternatives(), &mut rng)?;
    let users = &env.train;
    warm_start(
        &mut net,
        cfg,
        |r: &mut ChaCha8Rng| env.embed(&users[r.random_range(0..users.len())], cfg.embedding),
        &mut rng,
    )?;
    let mut transcript = Transcript::new(env.grid.clone(), cfg.embedding, env.n_alternatives());
    transcript.records.reserve(cfg.steps as usize);
    for t in 0..cfg.steps {
        let record = apa_step(&mut net, cfg, env, users, env, t, &mut rng)?;
        transcript.records.push(record);
    }
    Ok((net, transcript))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Leading share of the transcript left out of training.
    pub burn_in_fraction: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            hidden: vec![32, 32],
            epochs: 3,
            learning_rate: 0.05,
            batch_size: 16,
            burn_in_fraction: 0.25,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("need at least one nonempty hidden layer"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::invalid("burn-in fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Trains a fresh softmax network to predict `p_t` from `φ(u_t)` by minibatch
/// SGD on cross-entropy over shuffled transcript records.
pub fn distill(transcript: &Transcript, cfg: &DistillConfig) -> Result<Mlp> {
    cfg.validate()?;
    if transcript.is_empty() {
        return Err(Error::invalid("cannot distill an empty transcript"));
    }
    let skip = (transcript.len() as f64 * cfg.burn_in_fraction).floor() as usize;
    let records = &transcript.records[skip.min(transcript.len() - 1)..];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = transcript.grid.embedding_dim(transcript.mode);
    let mut sizes = vec![dim];
    sizes.extend(&cfg.hidden);
    sizes.push(transcript.n_alternatives);
    let mut net = Mlp::new(&sizes, HeadKind::Softmax, &mut rng)?;

    let embeddings: Vec<Vec<f64>> = (0..transcript.grid.n_atoms())
        .map(|a| transcript.grid.atom_embedding(a, transcript.mode))
        .collect();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut batch: Option<Gradients> = None;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let r = &records[i];
                let (_, g) = net.grad_loss(&embeddings[r.atom], r.lottery.probs(), LossKind::CrossEntropy)?;
                match batch.as_mut() {
                    None => {
                        let mut first = g.clone();
                        first.add_scaled(&g, scale - 1.0);
                        batch = Some(first);
                    }
                    Some(acc) => acc.add_scaled(&g, scale),
                }
            }
            let g = batch.take().expect("nonempty chunk");
            net.apply_sgd(&g, cfg.learning_rate)?;
        }
    }
    Ok(net)
}

/// Mapping from embeddings to lotteries. Each variant records the embedding
/// mode its inputs are expressed in.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    /// Normalized output of an urn network.
    NeuralUrn { net: Mlp, mode: EmbeddingMode },
    /// Softmax output of a distilled network.
    Softmax { net: Mlp, mode: EmbeddingMode },
    /// One stored lottery per atom.
    Table {
        grid: Grid,
        mode: EmbeddingMode,
        lotteries: Vec<Lottery>,
    },
}

/// Policy realized by a trained network, chosen by its head.
pub fn policy_of(net: Mlp, mode: EmbeddingMode) -> Policy {
    match net.head() {
        HeadKind::ReluNonneg | HeadKind::Softplus => Policy::NeuralUrn { net, mode },
        HeadKind::Softmax => Policy::Softmax { net, mode },
    }
}

impl Policy {
    pub fn mode(&self) -> EmbeddingMode {
        match self {
            Policy::NeuralUrn { mode, .. } | Policy::Softmax { mode, .. } | Policy::Table { mode, .. } => *mode,
        }
    }

    pub fn lottery(&self, embedding: &[f64]) -> Result<Lottery> {
        match self {
            Policy::NeuralUrn { net, .. } => urn_lottery(&net.forward(embedding)?),
            // renormalize away rounding in the last ulp
            Policy::Softmax { net, .. } => Lottery::from_weights(&net.forward(embedding)?),
            Policy::Table { grid, mode, lotteries } => {
                let atom = grid.atom_of_embedding(embedding, *mode)?;
                Ok(lotteries[atom].clone())
            }
        }
    }

    /// Lottery for every atom of `grid`, each queried in the policy's own mode.
    pub fn tabulate(&self, grid: &Grid) -> Result<Vec<Lottery>> {
        let mode = self.mode();
        (0..grid.n_atoms())
            .map(|a| self.lottery(&grid.atom_embedding(a, mode)))
            .collect()
    }
}
