//! Standard games and random generators.

use rand::Rng;

use crate::game::{GameSpec, Policy, PreferenceMatrix};
use crate::math::sigmoid;

/// The three-action cyclic example with `τ = 0.1` and a uniform reference.
/// The printed matrix is not anti-symmetric (`p(0≻1) + p(1≻0) = 0.9`).
pub const THREE_ACTION_EXAMPLE: [[f64; 3]; 3] = [[0.5, 0.8, 0.1], [0.1, 0.5, 0.8], [0.9, 0.1, 0.5]];

pub const THREE_ACTION_TAU: f64 = 0.1;

pub fn three_action_example() -> GameSpec {
    let prefs = PreferenceMatrix::general(THREE_ACTION_EXAMPLE.iter().map(|r| r.to_vec()).collect())
        .expect("static matrix is well formed");
    GameSpec::new(prefs, Policy::uniform(3), THREE_ACTION_TAU).expect("static game is valid")
}

pub fn rock_paper_scissors_matrix() -> PreferenceMatrix {
    PreferenceMatrix::new(vec![vec![0.5, 1.0, 0.0], vec![0.0, 0.5, 1.0], vec![1.0, 0.0, 0.5]])
        .expect("static matrix is valid")
}

/// Rock-paper-scissors, uniform reference, `τ = 1`.
pub fn rock_paper_scissors() -> GameSpec {
    GameSpec::new(rock_paper_scissors_matrix(), Policy::uniform(3), 1.0).expect("valid")
}

/// Two actions with `p(0 ≻ 1) = p`.
pub fn two_action_matrix(p: f64) -> crate::Result<PreferenceMatrix> {
    PreferenceMatrix::new(vec![vec![0.5, p], vec![1.0 - p, 0.5]])
}

/// `p(y ≻ y') = σ(r(y) − r(y'))`.
pub fn bradley_terry_matrix(rewards: &[f64]) -> crate::Result<PreferenceMatrix> {
    let n = rewards.len();
    let mut rows = vec![vec![0.5; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let p = sigmoid(rewards[i] - rewards[j]);
            rows[i][j] = p;
            rows[j][i] = 1.0 - p;
        }
    }
    PreferenceMatrix::new(rows)
}

/// Random anti-symmetric matrix with upper-triangle entries uniform on `[0, 1]`.
pub fn random_preference_matrix<R: Rng + ?Sized>(rng: &mut R, n: usize) -> PreferenceMatrix {
    let mut rows = vec![vec![0.5; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let p: f64 = rng.random();
            rows[i][j] = p;
            rows[j][i] = 1.0 - p;
        }
    }
    PreferenceMatrix::new(rows).expect("constructed anti-symmetric")
}

/// Softmax of logits uniform on `[-1, 1]`: interior, with no entry below
/// roughly `e^{-2}/n`.
pub fn random_interior_policy<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Policy {
    let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Policy::from_log_weights(&logits).expect("finite logits")
}

/// Random anti-symmetric game with a random interior reference policy.
pub fn random_game<R: Rng + ?Sized>(rng: &mut R, n: usize, tau: f64) -> GameSpec {
    let prefs = random_preference_matrix(rng, n);
    let r = random_interior_policy(rng, n);
    GameSpec::new(prefs, r, tau).expect("valid random game")
}
