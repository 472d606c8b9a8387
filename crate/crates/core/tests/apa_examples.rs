use apa_core::apa::{
    apa_train, distill, policy_of, warm_start, ApaConfig, DistillConfig, Transcript, TranscriptRecord,
};
use apa_core::environment::{
    gen_environment, AlternativePlacement, Bounds, Cluster, EmbeddingMode, EnvConfig, Grid, UserModel,
};
use apa_core::social_choice::{AlternativeId, Lottery};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn single_cell() -> Grid {
    Grid {
        bounds: Bounds::default(),
        k: 1,
    }
}

fn synthetic(grid: Grid, n_alternatives: usize, rows: impl IntoIterator<Item = (usize, Lottery)>) -> Transcript {
    let mut tr = Transcript::new(grid, EmbeddingMode::OneHot, n_alternatives);
    for (t, (atom, lottery)) in rows.into_iter().enumerate() {
        tr.records.push(TranscriptRecord {
            t: t as u64,
            user_id: 0,
            atom,
            lottery,
            first: AlternativeId(0),
            second: AlternativeId(1),
            winner: AlternativeId(0),
        });
    }
    tr
}

fn whole_run() -> DistillConfig {
    DistillConfig {
        burn_in_fraction: 0.0,
        ..DistillConfig::default()
    }
}

#[test]
fn unanimous_electorate_concentrates_the_urn() {
    // Every user sits on alternative 0, so it beats everything.
    let env = gen_environment(&EnvConfig {
        n_alternatives: 4,
        n_train: 100,
        n_validation: 0,
        grid_k: 1,
        users: UserModel::Mixture {
            clusters: vec![Cluster {
                center: [0.0, 0.0],
                weight: 1.0,
                sigma: 0.01,
            }],
            balanced: true,
        },
        alternatives: AlternativePlacement::Fixed {
            positions: vec![[0.0, 0.0], [0.8, 0.8], [-0.8, 0.8], [0.0, -0.9]],
        },
        ..EnvConfig::default()
    })
    .unwrap();
    let cfg = ApaConfig {
        mutation_rate: 0.0,
        steps: 5000,
        seed: 3,
        ..ApaConfig::default()
    };
    let (net, tr) = apa_train(&cfg, &env).unwrap();
    let p = policy_of(net, cfg.embedding)
        .lottery(&env.grid.atom_embedding(0, cfg.embedding))
        .unwrap();
    assert!(p.prob(AlternativeId(0)) >= 0.9, "{p:?}");
    assert!(tr.records.iter().all(|r| r.winner == AlternativeId(0) || (r.first != AlternativeId(0) && r.second != AlternativeId(0))));
}

#[test]
fn warm_start_mass_is_near_the_urn_scale() {
    let cfg = ApaConfig::default();
    let grid = Grid {
        bounds: Bounds::default(),
        k: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = cfg.init_network(grid.embedding_dim(cfg.embedding), 8, &mut rng).unwrap();
    warm_start(
        &mut net,
        &cfg,
        |r: &mut ChaCha8Rng| grid.atom_embedding(r.random_range(0..16), cfg.embedding),
        &mut rng,
    )
    .unwrap();
    let masses: Vec<f64> = (0..16)
        .map(|a| net.forward(&grid.atom_embedding(a, cfg.embedding)).unwrap().iter().sum())
        .collect();
    assert!(masses.iter().all(|m| *m > 0.0));
    let mean = masses.iter().sum::<f64>() / masses.len() as f64;
    assert!((0.5 * cfg.urn_scale..=2.0 * cfg.urn_scale).contains(&mean), "mean mass {mean}");
}

#[test]
fn distilling_a_constant_transcript_recovers_it() {
    let q = Lottery::new(vec![0.5, 0.3, 0.2]).unwrap();
    let tr = synthetic(single_cell(), 3, (0..3000).map(|_| (0, q.clone())));
    let net = distill(&tr, &whole_run()).unwrap();
    let p = policy_of(net, EmbeddingMode::OneHot).lottery(&[1.0]).unwrap();
    assert!(p.linf(&q) <= 0.02, "{p:?}");
}

#[test]
fn distilling_an_oscillation_averages_it() {
    let phases: Vec<Lottery> = (0..3).map(|a| Lottery::point_mass(3, AlternativeId(a))).collect();
    let tr = synthetic(single_cell(), 3, (0..3000).map(|t| (0, phases[(t / 50) % 3].clone())));
    let net = distill(&tr, &whole_run()).unwrap();
    let p = policy_of(net, EmbeddingMode::OneHot).lottery(&[1.0]).unwrap();
    assert!(p.linf(&Lottery::uniform(3)) <= 0.05, "{p:?}");
}

#[test]
fn distilled_atoms_match_transcript_means() {
    let grid = Grid {
        bounds: Bounds::default(),
        k: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows: Vec<(usize, Lottery)> = (0..8000)
        .map(|_| {
            let atom = rng.random_range(0..4);
            let w: Vec<f64> = (0..4).map(|a| if a == atom { 3.0 } else { rng.random::<f64>() }).collect();
            (atom, Lottery::from_weights(&w).unwrap())
        })
        .collect();
    let mut means = vec![vec![0.0; 4]; 4];
    let mut counts = [0usize; 4];
    for (atom, p) in &rows {
        counts[*atom] += 1;
        for (m, v) in means[*atom].iter_mut().zip(p.probs()) {
            *m += v;
        }
    }
    let tr = synthetic(grid.clone(), 4, rows);
    let policy = policy_of(distill(&tr, &whole_run()).unwrap(), EmbeddingMode::OneHot);
    for atom in 0..4 {
        let mean = Lottery::from_weights(&means[atom]).unwrap();
        let got = policy.lottery(&grid.atom_embedding(atom, EmbeddingMode::OneHot)).unwrap();
        assert!(got.linf(&mean) <= 0.05, "atom {atom} (n={}): {got:?} vs {mean:?}", counts[atom]);
    }
}

#[test]
fn transcript_round_trips_through_csv() {
    let env = gen_environment(&EnvConfig {
        n_train: 100,
        n_validation: 0,
        ..EnvConfig::default()
    })
    .unwrap();
    let cfg = ApaConfig {
        steps: 300,
        warm_start_iters: 100,
        ..ApaConfig::default()
    };
    let (_, tr) = apa_train(&cfg, &env).unwrap();
    let mut buf = Vec::new();
    tr.write_csv(&mut buf).unwrap();
    let back = Transcript::read_csv(buf.as_slice(), env.grid.clone(), cfg.embedding).unwrap();
    assert_eq!(back, tr);
}
