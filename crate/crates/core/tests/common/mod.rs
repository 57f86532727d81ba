//! Independent reference computations for the integration tests.
//!
//! Nothing here calls the library's energy, drive, Jacobian or gradient
//! code: the global coupling matrix is rebuilt from the raw blocks and every
//! quantity is evaluated with plain loops.

#![allow(dead_code)]

use ebm_lab::bridge;
use ebm_lab::dynamics::{DynamicsConfig, NoiseRng};
use ebm_lab::model::{HardSigmoid, LayeredTopology, NetworkParams, StateVector, WeightScale};
use rand::{Rng, SeedableRng};

pub const B1: f64 = -0.5;
pub const B2: f64 = 0.5;

pub fn rho(s: f64) -> f64 {
    if s < B1 {
        0.0
    } else if s > B2 {
        1.0
    } else {
        s - B1
    }
}

pub fn rho_prime(s: f64) -> f64 {
    if (B1..=B2).contains(&s) {
        1.0
    } else {
        0.0
    }
}

/// Start offset of every layer plus the total, from the layer sizes alone.
pub fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut out = vec![0];
    for s in sizes {
        out.push(out.last().unwrap() + s);
    }
    out
}

/// Dense symmetric `W` rebuilt from the stored blocks.
pub fn dense(params: &NetworkParams) -> Vec<Vec<f64>> {
    let sizes = params.topology().layer_sizes();
    let off = offsets(sizes);
    let n = off[sizes.len()];
    let mut w = vec![vec![0.0; n]; n];
    for k in 0..sizes.len() - 1 {
        let block = params.block(k);
        for a in 0..sizes[k] {
            for b in 0..sizes[k + 1] {
                w[off[k] + a][off[k + 1] + b] = block[(a, b)];
                w[off[k + 1] + b][off[k] + a] = block[(a, b)];
            }
        }
    }
    w
}

pub fn drive(w: &[Vec<f64>], bias: &[f64], s: &[f64]) -> Vec<f64> {
    (0..s.len())
        .map(|i| {
            let net: f64 = bias[i] + (0..s.len()).map(|j| w[i][j] * rho(s[j])).sum::<f64>();
            rho_prime(s[i]) * net
        })
        .collect()
}

pub fn energy(w: &[Vec<f64>], bias: &[f64], s: &[f64]) -> f64 {
    let mut e = 0.0;
    for i in 0..s.len() {
        e += 0.5 * s[i] * s[i] - bias[i] * rho(s[i]);
        for j in 0..s.len() {
            if i != j {
                e -= 0.5 * w[i][j] * rho(s[i]) * rho(s[j]);
            }
        }
    }
    e
}

/// `dC/dh_k` for every layer `k < L - 1` (index 0 is the output layer) by an
/// explicit chain rule over the dense matrix.
pub fn backprop(params: &NetworkParams, s: &[f64], y: &[f64]) -> Vec<Vec<f64>> {
    let sizes = params.topology().layer_sizes();
    let off = offsets(sizes);
    let w = dense(params);
    let mut grads = vec![(0..sizes[0]).map(|a| s[a] - y[a]).collect::<Vec<f64>>()];
    for k in 1..sizes.len() - 1 {
        let prev = &grads[k - 1];
        let g = (0..sizes[k])
            .map(|b| {
                let j = off[k] + b;
                (0..sizes[k - 1])
                    .map(|a| {
                        let i = off[k - 1] + a;
                        prev[a] * rho_prime(s[i]) * w[i][j] * rho_prime(s[j])
                    })
                    .sum()
            })
            .collect();
        grads.push(g);
    }
    grads
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        d / n
    } else {
        d
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

pub fn uniform(n: usize, r: f64, rng: &mut NoiseRng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..=r)).collect()
}

/// 2 to 4 hidden layers, every layer size in 2..=8.
pub fn random_sizes(rng: &mut NoiseRng) -> Vec<usize> {
    let hidden = rng.random_range(2..=4);
    (0..hidden + 2).map(|_| rng.random_range(2..=8)).collect()
}

pub fn random_net(sizes: &[usize], rng: &mut NoiseRng) -> NetworkParams {
    let topology = LayeredTopology::new(sizes.to_vec()).unwrap();
    NetworkParams::random(topology, HardSigmoid::default(), WeightScale::FanIn, rng).unwrap()
}

/// A settled net with every unit at least `1e-3` from a kink.
pub struct Case {
    pub params: NetworkParams,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub fixed: StateVector,
}

pub fn linear_regime_cases(count: usize, seed: u64) -> Vec<Case> {
    let mut rng = NoiseRng::seed_from_u64(seed);
    let cfg = DynamicsConfig::default();
    let mut cases = Vec::new();
    while cases.len() < count {
        let sizes = random_sizes(&mut rng);
        let params = random_net(&sizes, &mut rng);
        let x = uniform(sizes[sizes.len() - 1], 0.4, &mut rng);
        let y = uniform(sizes[0], 0.4, &mut rng);
        let Ok(fixed) = bridge::settle(&params, &x, &cfg) else {
            continue;
        };
        let far = fixed
            .values()
            .iter()
            .all(|&s| (s - B1).abs() >= 1e-3 && (s - B2).abs() >= 1e-3);
        if far {
            cases.push(Case { params, x, y, fixed });
        }
    }
    cases
}

/// Prints the one-line verdict for a criterion and returns whether it passed.
pub fn report(id: &str, passed: bool, detail: &str, elapsed: std::time::Duration) -> bool {
    println!(
        "[{}] criterion {id}: {detail} ({:.2} s)",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    passed
}
