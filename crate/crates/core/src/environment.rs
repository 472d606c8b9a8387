//! Synthetic planar preference world.
//!
//! Users and alternatives live in the plane and every user prefers the closer
//! alternative. The learner does not see user positions: it sees a coarse
//! embedding given by the cell of a `k × k` grid containing the user.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::social_choice::{margin_matrix, AlternativeId, Choice, MarginMatrix, PreferenceOracle};

pub const ENVIRONMENT_FORMAT: &str = "apa-environment";
pub const ENVIRONMENT_VERSION: u32 = 1;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            min: [0.0, 0.0],
            max: [1.0, 1.0],
        }
    }
}

impl Bounds {
    fn validate(&self) -> Result<()> {
        let ok = (0..2).all(|d| self.min[d].is_finite() && self.max[d].is_finite() && self.min[d] < self.max[d]);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("empty bounding box"))
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..2).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }

    fn clamp(&self, p: Point) -> Point {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
        ]
    }

    fn uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        [
            rng.random_range(self.min[0]..self.max[0]),
            rng.random_range(self.min[1]..self.max[1]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cluster {
    pub center: Point,
    pub weight: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UserModel {
    Uniform,
    /// Isotropic Gaussian mixture truncated to the box. With `balanced`, users
    /// are dealt to clusters in proportion to the weights instead of sampled.
    Mixture {
        clusters: Vec<Cluster>,
        #[serde(default)]
        balanced: bool,
    },
    /// `count` equally weighted clusters with centers drawn uniformly in the box.
    RandomClusters { count: usize, sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlternativePlacement {
    Uniform,
    Fixed { positions: Vec<Point> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub n_alternatives: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub grid_k: usize,
    pub bounds: Bounds,
    pub users: UserModel,
    pub alternatives: AlternativePlacement,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            n_alternatives: 8,
            n_train: 2000,
            n_validation: 500,
            grid_k: 4,
            bounds: Bounds::default(),
            users: UserModel::RandomClusters { count: 6, sigma: 0.1 },
            alternatives: AlternativePlacement::Uniform,
            seed: 0,
        }
    }
}

impl EnvConfig {
    /// Three alternatives on a triangle and three equal user clusters, each
    /// rotated toward the next vertex so pairwise majorities form a cycle
    /// `a0 ≻ a1 ≻ a2 ≻ a0`, every margin exactly 1/3.
    pub fn rock_paper_scissors(users_per_cluster: usize) -> EnvConfig {
        let on_circle = |deg: f64, r: f64| -> Point {
            let t = deg.to_radians();
            [r * t.cos(), r * t.sin()]
        };
        let clusters = [120.0, 240.0, 0.0]
            .iter()
            .map(|&deg| Cluster {
                center: on_circle(deg, 0.6),
                weight: 1.0,
                sigma: 0.05,
            })
            .collect();
        EnvConfig {
            n_alternatives: 3,
            n_train: 3 * users_per_cluster,
            n_validation: 0,
            grid_k: 1,
            bounds: Bounds {
                min: [-1.0, -1.0],
                max: [1.0, 1.0],
            },
            users: UserModel::Mixture {
                clusters,
                balanced: true,
            },
            alternatives: AlternativePlacement::Fixed {
                positions: vec![on_circle(90.0, 0.8), on_circle(210.0, 0.8), on_circle(330.0, 0.8)],
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.n_alternatives < 2 {
            return Err(Error::invalid("need at least two alternatives"));
        }
        if self.n_train == 0 {
            return Err(Error::invalid("need at least one training user"));
        }
        if self.grid_k == 0 {
            return Err(Error::invalid("grid resolution must be positive"));
        }
        match &self.users {
            UserModel::Uniform => {}
            UserModel::Mixture { clusters, .. } => {
                if clusters.is_empty() {
                    return Err(Error::invalid("mixture needs at least one cluster"));
                }
                if clusters.iter().any(|c| !(c.weight > 0.0) || !(c.sigma > 0.0)) {
                    return Err(Error::invalid("cluster weights and sigmas must be positive"));
                }
            }
            UserModel::RandomClusters { count, sigma } => {
                if *count == 0 || !(*sigma > 0.0) {
                    return Err(Error::invalid("random clusters need count > 0 and sigma > 0"));
                }
            }
        }
        if let AlternativePlacement::Fixed { positions } = &self.alternatives {
            if positions.len() != self.n_alternatives {
                return Err(Error::DimensionMismatch {
                    expected: self.n_alternatives,
                    got: positions.len(),
                });
            }
            for (i, p) in positions.iter().enumerate() {
                if !p.iter().all(|v| v.is_finite()) {
                    return Err(Error::invalid("alternative positions must be finite"));
                }
                if positions[..i].contains(p) {
                    return Err(Error::invalid("alternative positions must be distinct"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserPoint {
    pub id: usize,
    pub position: Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlternativePoint {
    pub id: AlternativeId,
    pub position: Point,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    #[default]
    OneHot,
    Coordinates,
}

/// `k × k` partition of the bounding box into cells `(lo, hi]`, the first
/// row/column also closed on its lower edge. Atom index = `row · k + col`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub bounds: Bounds,
    pub k: usize,
}

impl Grid {
    pub fn n_atoms(&self) -> usize {
        self.k * self.k
    }

    fn axis_cell(&self, v: f64, d: usize) -> usize {
        let span = self.bounds.max[d] - self.bounds.min[d];
        let scaled = (v - self.bounds.min[d]) / span * self.k as f64;
        let cell = scaled.ceil() as i64 - 1;
        cell.clamp(0, self.k as i64 - 1) as usize
    }

    /// Cell containing `p`; points outside the box go to the nearest boundary cell.
    pub fn atom(&self, p: &Point) -> usize {
        self.axis_cell(p[1], 1) * self.k + self.axis_cell(p[0], 0)
    }

    pub fn embedding_dim(&self, mode: EmbeddingMode) -> usize {
        match mode {
            EmbeddingMode::OneHot => self.n_atoms(),
            EmbeddingMode::Coordinates => 2,
        }
    }

    /// Embedding of an atom: a basis vector, or the cell center normalized to `[0, 1]²`.
    pub fn atom_embedding(&self, atom: usize, mode: EmbeddingMode) -> Vec<f64> {
        match mode {
            EmbeddingMode::OneHot => {
                let mut v = vec![0.0; self.n_atoms()];
                v[atom] = 1.0;
                v
            }
            EmbeddingMode::Coordinates => {
                let (row, col) = (atom / self.k, atom % self.k);
                let k = self.k as f64;
                vec![(col as f64 + 0.5) / k, (row as f64 + 0.5) / k]
            }
        }
    }

    /// Inverse of [`Grid::atom_embedding`].
    pub fn atom_of_embedding(&self, embedding: &[f64], mode: EmbeddingMode) -> Result<usize> {
        let expected = self.embedding_dim(mode);
        if embedding.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: embedding.len(),
            });
        }
        Ok(match mode {
            EmbeddingMode::OneHot => embedding
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0),
            EmbeddingMode::Coordinates => {
                let axis = |v: f64| ((v * self.k as f64).floor().max(0.0) as usize).min(self.k - 1);
                axis(embedding[1]) * self.k + axis(embedding[0])
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    pub format: String,
    pub version: u32,
    pub config: EnvConfig,
    pub alternatives: Vec<AlternativePoint>,
    /// Cluster law the users were drawn from (empty for uniform users).
    pub clusters: Vec<Cluster>,
    pub train: Vec<UserPoint>,
    pub validation: Vec<UserPoint>,
    pub grid: Grid,
    pub seed: u64,
}

/// `First` iff `first` is strictly closer to `user`; exact ties go to the lower id.
pub fn prefer(user: &UserPoint, first: &AlternativePoint, second: &AlternativePoint) -> Result<Choice> {
    if first.id == second.id {
        return Err(Error::invalid(format!("cannot compare {} with itself", first.id)));
    }
    Ok(distance_choice(&user.position, first, second))
}

fn distance_choice(u: &Point, first: &AlternativePoint, second: &AlternativePoint) -> Choice {
    let d1 = dist2(u, &first.position);
    let d2 = dist2(u, &second.position);
    if d1 < d2 || (d1 == d2 && first.id < second.id) {
        Choice::First
    } else {
        Choice::Second
    }
}

fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Generates an environment; fully determined by `cfg` (including `cfg.seed`).
pub fn gen_environment(cfg: &EnvConfig) -> Result<Environment> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bounds = cfg.bounds;

    let positions: Vec<Point> = match &cfg.alternatives {
        AlternativePlacement::Fixed { positions } => positions.clone(),
        AlternativePlacement::Uniform => {
            let mut out: Vec<Point> = Vec::with_capacity(cfg.n_alternatives);
            while out.len() < cfg.n_alternatives {
                let p = bounds.uniform(&mut rng);
                if !out.contains(&p) {
                    out.push(p);
                }
            }
            out
        }
    };
    let alternatives = positions
        .into_iter()
        .enumerate()
        .map(|(i, position)| AlternativePoint {
            id: AlternativeId(i),
            position,
        })
        .collect();

    let (clusters, balanced) = match &cfg.users {
        UserModel::Uniform => (Vec::new(), false),
        UserModel::Mixture { clusters, balanced } => (clusters.clone(), *balanced),
        UserModel::RandomClusters { count, sigma } => {
            let clusters = (0..*count)
                .map(|_| Cluster {
                    center: bounds.uniform(&mut rng),
                    weight: 1.0,
                    sigma: *sigma,
                })
                .collect();
            (clusters, false)
        }
    };

    let total = cfg.n_train + cfg.n_validation;
    let assignment = cluster_assignment(&clusters, balanced, total, &mut rng);
    let mut users = Vec::with_capacity(total);
    for (id, cluster) in assignment.into_iter().enumerate() {
        let position = match cluster {
            None => bounds.uniform(&mut rng),
            Some(c) => sample_truncated(&clusters[c], &bounds, &mut rng),
        };
        users.push(UserPoint { id, position });
    }
    let validation = users.split_off(cfg.n_train);

    Ok(Environment {
        format: ENVIRONMENT_FORMAT.to_string(),
        version: ENVIRONMENT_VERSION,
        config: cfg.clone(),
        alternatives,
        clusters,
        train: users,
        validation,
        grid: Grid {
            bounds,
            k: cfg.grid_k,
        },
        seed: cfg.seed,
    })
}

fn cluster_assignment<R: Rng + ?Sized>(
    clusters: &[Cluster],
    balanced: bool,
    total: usize,
    rng: &mut R,
) -> Vec<Option<usize>> {
    if clusters.is_empty() {
        return vec![None; total];
    }
    let weight_sum: f64 = clusters.iter().map(|c| c.weight).sum();
    if balanced {
        // deal users round-robin against the cumulative quota of each cluster
        let mut dealt = vec![0usize; clusters.len()];
        (0..total)
            .map(|t| {
                let c = (0..clusters.len())
                    .max_by(|&a, &b| {
                        let deficit = |i: usize| clusters[i].weight / weight_sum * (t + 1) as f64 - dealt[i] as f64;
                        deficit(a).total_cmp(&deficit(b)).then(b.cmp(&a))
                    })
                    .expect("nonempty clusters");
                dealt[c] += 1;
                Some(c)
            })
            .collect()
    } else {
        (0..total)
            .map(|_| {
                let mut u = rng.random::<f64>() * weight_sum;
                let mut pick = clusters.len() - 1;
                for (i, c) in clusters.iter().enumerate() {
                    if u < c.weight {
                        pick = i;
                        break;
                    }
                    u -= c.weight;
                }
                Some(pick)
            })
            .collect()
    }
}

fn sample_truncated<R: Rng + ?Sized>(c: &Cluster, bounds: &Bounds, rng: &mut R) -> Point {
    let normal = Normal::new(0.0, c.sigma).expect("validated sigma");
    let mut p = c.center;
    for _ in 0..1000 {
        p = [c.center[0] + normal.sample(rng), c.center[1] + normal.sample(rng)];
        if bounds.contains(&p) {
            return p;
        }
    }
    bounds.clamp(p)
}

impl PreferenceOracle<UserPoint> for Environment {
    fn prefer(&self, user: &UserPoint, first: AlternativeId, second: AlternativeId) -> Choice {
        distance_choice(&user.position, &self.alternatives[first.0], &self.alternatives[second.0])
    }
}

impl Environment {
    pub fn n_alternatives(&self) -> usize {
        self.alternatives.len()
    }

    pub fn atom_of(&self, user: &UserPoint) -> usize {
        self.grid.atom(&user.position)
    }

    pub fn embed(&self, user: &UserPoint, mode: EmbeddingMode) -> Vec<f64> {
        embed(user, &self.grid, mode)
    }

    /// Training users grouped by atom, indexed by atom.
    pub fn train_by_atom(&self) -> Vec<Vec<UserPoint>> {
        let mut groups = vec![Vec::new(); self.grid.n_atoms()];
        for u in &self.train {
            groups[self.atom_of(u)].push(*u);
        }
        groups
    }

    /// Looks a user up by id across both splits.
    pub fn user(&self, id: usize) -> Option<&UserPoint> {
        if id < self.train.len() {
            self.train.get(id)
        } else {
            self.validation.get(id - self.train.len())
        }
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Environment> {
        let env: Environment = serde_json::from_reader(r)?;
        if env.format != ENVIRONMENT_FORMAT || env.version != ENVIRONMENT_VERSION {
            return Err(Error::Format(format!(
                "unsupported environment {} v{}",
                env.format, env.version
            )));
        }
        env.config.validate()?;
        Ok(env)
    }
}

pub fn embed(user: &UserPoint, grid: &Grid, mode: EmbeddingMode) -> Vec<f64> {
    grid.atom_embedding(grid.atom(&user.position), mode)
}

/// Margin matrix of the training users in `atom`.
pub fn atom_margin_matrix(env: &Environment, atom: usize) -> Result<MarginMatrix> {
    let users: Vec<UserPoint> = env.train.iter().filter(|u| env.atom_of(u) == atom).copied().collect();
    if users.is_empty() {
        return Err(Error::EmptyAtom(atom));
    }
    margin_matrix(env.n_alternatives(), &users, env)
}

/// Margin matrix of all training users.
pub fn global_margin_matrix(env: &Environment) -> Result<MarginMatrix> {
    margin_matrix(env.n_alternatives(), &env.train, env)
}
