//! Live annotation sessions: a neural urn queried by a human instead of a
//! simulated oracle. The HTTP layer lives in the command-line crate; this
//! module owns the state machine so it can be tested without a server.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apa::{mutation_update, propose, urn_lottery, urn_update, warm_start, ApaConfig, Query, Transcript, TranscriptRecord};
use crate::environment::Environment;
use crate::error::Error;
use crate::neural::Mlp;
use crate::social_choice::AlternativeId;

use super::derive_seed;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown session {0}")]
    NotFound(u64),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Internal(#[from] Error),
}

/// Where a session's embedding comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SessionMode {
    /// Every query uses the embedding of one atom.
    Fixed { atom: usize },
    /// Each query names its atom, so one network serves many annotators.
    PerRequest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub mode: SessionMode,
    /// Overrides the service's default mutation rate.
    #[serde(default)]
    pub mutation_rate: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub id: u64,
    pub mode: SessionMode,
    pub n_alternatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlternativeView {
    pub id: usize,
    pub label: String,
    pub position: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub session: u64,
    pub atom: usize,
    pub pair: [AlternativeView; 2],
    pub lottery: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRequest {
    pub winner: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerView {
    pub session: u64,
    pub atom: usize,
    pub lottery: Vec<f64>,
    pub answers: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub session: u64,
    pub mode: SessionMode,
    pub atom: usize,
    pub lottery: Vec<f64>,
    pub answers: u64,
    pub history_len: usize,
    pub pending: Option<[usize; 2]>,
    pub created_unix_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletedView {
    pub session: u64,
    pub answers: u64,
    pub transcript: Option<String>,
}

struct Pending {
    atom: usize,
    query: Query,
}

struct Session {
    mode: SessionMode,
    cfg: ApaConfig,
    net: Mlp,
    rng: ChaCha8Rng,
    pending: Option<Pending>,
    last_atom: usize,
    answers: u64,
    transcript: Transcript,
    created_unix_ms: u64,
}

/// All live sessions of a service over one environment.
pub struct SessionStore {
    env: Environment,
    defaults: ApaConfig,
    seed: u64,
    transcript_dir: Option<PathBuf>,
    next_id: u64,
    sessions: BTreeMap<u64, Session>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl SessionStore {
    /// `defaults` configures every new session's network; `seed` feeds the
    /// per-session seed derivation.
    pub fn new(env: Environment, defaults: ApaConfig, seed: u64, transcript_dir: Option<PathBuf>) -> crate::Result<Self> {
        defaults.validate()?;
        Ok(SessionStore {
            env,
            defaults,
            seed,
            transcript_dir,
            next_id: 1,
            sessions: BTreeMap::new(),
        })
    }

    /// Session defaults for human annotators: no mutation, and a small urn
    /// with a step size that lets a consistent annotator move it within a
    /// few hundred answers.
    pub fn human_defaults() -> ApaConfig {
        ApaConfig {
            urn_scale: 10.0,
            mutation_rate: 0.0,
            learning_rate: 1e-2,
            warm_start_iters: 500,
            ..ApaConfig::default()
        }
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    fn check_atom(&self, atom: usize) -> Result<(), SessionError> {
        if atom >= self.env.grid.n_atoms() {
            return Err(SessionError::BadRequest(format!(
                "atom {atom} out of range (grid has {})",
                self.env.grid.n_atoms()
            )));
        }
        Ok(())
    }

    pub fn create(&mut self, req: &CreateSession) -> Result<CreatedSession, SessionError> {
        if let SessionMode::Fixed { atom } = req.mode {
            self.check_atom(atom)?;
        }
        let id = self.next_id;
        let mut cfg = self.defaults.clone();
        if let Some(r) = req.mutation_rate {
            cfg.mutation_rate = r;
        }
        cfg.seed = req.seed.unwrap_or_else(|| derive_seed(self.seed, &format!("session-{id}")));
        cfg.validate().map_err(|e| SessionError::BadRequest(e.to_string()))?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let grid = &self.env.grid;
        let mut net = cfg.init_network(grid.embedding_dim(cfg.embedding), self.env.n_alternatives(), &mut rng)?;
        let mode = cfg.embedding;
        let fixed = match req.mode {
            SessionMode::Fixed { atom } => Some(atom),
            SessionMode::PerRequest => None,
        };
        let n_atoms = grid.n_atoms();
        warm_start(
            &mut net,
            &cfg,
            |r: &mut ChaCha8Rng| grid.atom_embedding(fixed.unwrap_or_else(|| r.random_range(0..n_atoms)), mode),
            &mut rng,
        )?;
        let transcript = Transcript::new(grid.clone(), mode, self.env.n_alternatives());
        self.sessions.insert(
            id,
            Session {
                mode: req.mode,
                cfg,
                net,
                rng,
                pending: None,
                last_atom: fixed.unwrap_or(0),
                answers: 0,
                transcript,
                created_unix_ms: now_ms(),
            },
        );
        self.next_id += 1;
        Ok(CreatedSession {
            id,
            mode: req.mode,
            n_alternatives: self.env.n_alternatives(),
        })
    }

    fn alternative_view(&self, id: AlternativeId) -> AlternativeView {
        AlternativeView {
            id: id.0,
            label: id.to_string(),
            position: self.env.alternatives[id.0].position,
        }
    }

    /// The pending pair, sampling a new one if none is pending. In per-request
    /// mode `atom` is required for a new pair and ignored while one is pending.
    pub fn query(&mut self, id: u64, atom: Option<usize>) -> Result<QueryView, SessionError> {
        if let Some(a) = atom {
            self.check_atom(a)?;
        }
        let session = self.sessions.get_mut(&id).ok_or(SessionError::NotFound(id))?;
        if session.pending.is_none() {
            let atom = match session.mode {
                SessionMode::Fixed { atom } => atom,
                SessionMode::PerRequest => atom.ok_or_else(|| {
                    SessionError::BadRequest("per-request sessions need an atom query parameter".into())
                })?,
            };
            let x = self.env.grid.atom_embedding(atom, session.cfg.embedding);
            let query = propose(&session.net, &x, &mut session.rng)?;
            session.pending = Some(Pending { atom, query });
            session.last_atom = atom;
        }
        let pending = session.pending.as_ref().expect("pending set above");
        let (first, second, atom, lottery) = (
            pending.query.first,
            pending.query.second,
            pending.atom,
            pending.query.lottery.probs().to_vec(),
        );
        Ok(QueryView {
            session: id,
            atom,
            pair: [self.alternative_view(first), self.alternative_view(second)],
            lottery,
        })
    }

    /// Applies the annotator's choice as one urn update and clears the pair.
    pub fn answer(&mut self, id: u64, req: &AnswerRequest) -> Result<AnswerView, SessionError> {
        let session = self.sessions.get_mut(&id).ok_or(SessionError::NotFound(id))?;
        let pending = session
            .pending
            .as_ref()
            .ok_or_else(|| SessionError::Conflict("no pending query".into()))?;
        let winner = AlternativeId(req.winner);
        let (first, second) = (pending.query.first, pending.query.second);
        let loser = if winner == first {
            second
        } else if winner == second {
            first
        } else {
            return Err(SessionError::Unprocessable(format!(
                "winner {winner} is not in the pending pair ({first}, {second})"
            )));
        };
        let pending = session.pending.take().expect("checked above");
        let x = self.env.grid.atom_embedding(pending.atom, session.cfg.embedding);
        let lr = session.cfg.learning_rate;
        urn_update(&mut session.net, &x, &pending.query.masses, winner, loser, lr)?;
        if session.cfg.mutation_rate > 0.0 && session.rng.random_bool(session.cfg.mutation_rate) {
            mutation_update(&mut session.net, &x, &pending.query.masses, lr, &mut session.rng)?;
        }
        session.transcript.records.push(TranscriptRecord {
            t: session.answers,
            user_id: id as usize,
            atom: pending.atom,
            lottery: pending.query.lottery,
            first,
            second,
            winner,
        });
        session.answers += 1;
        let lottery = urn_lottery(&session.net.forward(&x)?)?;
        Ok(AnswerView {
            session: id,
            atom: pending.atom,
            lottery: lottery.into_vec(),
            answers: session.answers,
        })
    }

    /// Current lottery at `atom`, or at the session's most recent atom.
    pub fn state(&self, id: u64, atom: Option<usize>) -> Result<StateView, SessionError> {
        if let Some(a) = atom {
            self.check_atom(a)?;
        }
        let session = self.sessions.get(&id).ok_or(SessionError::NotFound(id))?;
        let atom = atom.unwrap_or(session.last_atom);
        let x = self.env.grid.atom_embedding(atom, session.cfg.embedding);
        let lottery = urn_lottery(&session.net.forward(&x)?)?;
        Ok(StateView {
            session: id,
            mode: session.mode,
            atom,
            lottery: lottery.into_vec(),
            answers: session.answers,
            history_len: session.transcript.len(),
            pending: session.pending.as_ref().map(|p| [p.query.first.0, p.query.second.0]),
            created_unix_ms: session.created_unix_ms,
        })
    }

    fn persist(&self, id: u64, session: &Session) -> Result<Option<String>, SessionError> {
        let Some(dir) = &self.transcript_dir else {
            return Ok(None);
        };
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        let path = dir.join(format!("session-{id}.csv"));
        super::save_transcript(&session.transcript, &path)?;
        Ok(Some(path.display().to_string()))
    }

    /// Persists the session's transcript (when a directory is configured) and frees it.
    pub fn delete(&mut self, id: u64) -> Result<DeletedView, SessionError> {
        let session = self.sessions.remove(&id).ok_or(SessionError::NotFound(id))?;
        let transcript = self.persist(id, &session)?;
        Ok(DeletedView {
            session: id,
            answers: session.answers,
            transcript,
        })
    }

    /// Persists every live session; used on shutdown.
    pub fn flush_all(&self) -> Result<Vec<String>, SessionError> {
        let mut out = Vec::new();
        for (id, s) in &self.sessions {
            if let Some(p) = self.persist(*id, s)? {
                out.push(p);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{gen_environment, EnvConfig};

    fn store() -> SessionStore {
        let env = gen_environment(&EnvConfig {
            n_train: 50,
            n_validation: 10,
            ..EnvConfig::default()
        })
        .unwrap();
        SessionStore::new(env, SessionStore::human_defaults(), 1, None).unwrap()
    }

    #[test]
    fn protocol_errors() {
        let mut s = store();
        let id = s
            .create(&CreateSession {
                mode: SessionMode::Fixed { atom: 3 },
                mutation_rate: None,
                seed: None,
            })
            .unwrap()
            .id;
        assert!(matches!(s.answer(id, &AnswerRequest { winner: 0 }), Err(SessionError::Conflict(_))));
        let q = s.query(id, None).unwrap();
        assert_eq!(s.query(id, None).unwrap(), q, "pending pair is stable");
        let outsider = (0..8).find(|a| *a != q.pair[0].id && *a != q.pair[1].id).unwrap();
        assert!(matches!(
            s.answer(id, &AnswerRequest { winner: outsider }),
            Err(SessionError::Unprocessable(_))
        ));
        s.answer(id, &AnswerRequest { winner: q.pair[1].id }).unwrap();
        assert!(matches!(
            s.answer(id, &AnswerRequest { winner: q.pair[1].id }),
            Err(SessionError::Conflict(_))
        ));
        assert!(matches!(s.query(99, None), Err(SessionError::NotFound(99))));
        s.delete(id).unwrap();
        assert!(matches!(s.state(id, None), Err(SessionError::NotFound(_))));
    }

    #[test]
    fn per_request_needs_an_atom() {
        let mut s = store();
        let id = s
            .create(&CreateSession {
                mode: SessionMode::PerRequest,
                mutation_rate: None,
                seed: Some(4),
            })
            .unwrap()
            .id;
        assert!(matches!(s.query(id, None), Err(SessionError::BadRequest(_))));
        assert!(matches!(s.query(id, Some(16)), Err(SessionError::BadRequest(_))));
        assert_eq!(s.query(id, Some(5)).unwrap().atom, 5);
    }
}
