//! Central finite differences against the analytic backward pass.

use apa_core::neural::{HeadKind, LossKind, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn loss_at(net: &Mlp, flat: &[f64], x: &[f64], target: &[f64], loss: LossKind) -> f64 {
    let perturbed = net.with_flat_params(flat).unwrap();
    let y = perturbed.forward(x).unwrap();
    match loss {
        LossKind::SquaredError => y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum(),
        LossKind::CrossEntropy => -y.iter().zip(target).map(|(p, t)| t * p.ln()).sum::<f64>(),
    }
}

fn max_relative_error(net: &Mlp, x: &[f64], target: &[f64], loss: LossKind) -> f64 {
    let (_, grads) = net.grad_loss(x, target, loss).unwrap();
    let analytic = grads.flat();
    let mut flat = net.flat_params();
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + STEP;
        let up = loss_at(net, &flat, x, target, loss);
        flat[i] = orig - STEP;
        let down = loss_at(net, &flat, x, target, loss);
        flat[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

fn random_instance(rng: &mut ChaCha8Rng, head: HeadKind) -> (Mlp, Vec<f64>, Vec<f64>) {
    let input = rng.random_range(1..6);
    let hidden1 = rng.random_range(2..9);
    let hidden2 = rng.random_range(2..9);
    let output = rng.random_range(2..6);
    let net = Mlp::new(&[input, hidden1, hidden2, output], head, rng).unwrap();
    // Fresh networks have zero biases, which can park a logit exactly on the
    // ReLU kink; jitter every parameter off it.
    let jittered: Vec<f64> = net
        .flat_params()
        .iter()
        .map(|v| v + rng.random_range(-0.1..0.1))
        .collect();
    let net = net.with_flat_params(&jittered).unwrap();
    let x: Vec<f64> = (0..input).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target = match head {
        HeadKind::ReluNonneg | HeadKind::Softplus => (0..output).map(|_| rng.random_range(0.0..3.0)).collect(),
        HeadKind::Softmax => {
            let w: Vec<f64> = (0..output).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        }
    };
    (net, x, target)
}

#[test]
fn squared_error_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let (net, x, t) = random_instance(&mut rng, HeadKind::ReluNonneg);
        let err = max_relative_error(&net, &x, &t, LossKind::SquaredError);
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    for _ in 0..50 {
        let (net, x, t) = random_instance(&mut rng, HeadKind::Softmax);
        let err = max_relative_error(&net, &x, &t, LossKind::CrossEntropy);
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn full_size_network_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for head in [HeadKind::ReluNonneg, HeadKind::Softplus, HeadKind::Softmax] {
        let net = Mlp::new(&[16, 32, 32, 8], head, &mut rng).unwrap();
        let mut x = vec![0.0; 16];
        x[5] = 1.0;
        let (target, loss) = match head {
            HeadKind::ReluNonneg | HeadKind::Softplus => (vec![12.5; 8], LossKind::SquaredError),
            HeadKind::Softmax => (vec![0.125; 8], LossKind::CrossEntropy),
        };
        let err = max_relative_error(&net, &x, &target, loss);
        assert!(err < 1e-4, "{head}: relative error {err}");
    }
}

#[test]
fn softplus_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2026);
    for _ in 0..50 {
        let (net, x, t) = random_instance(&mut rng, HeadKind::Softplus);
        let err = max_relative_error(&net, &x, &t, LossKind::SquaredError);
        assert!(err < 1e-4, "relative error {err}");
    }
}
