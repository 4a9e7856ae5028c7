#![allow(dead_code)]

use causal_xmap::embedding::{embed, EmbeddingConfig, Manifold};
use causal_xmap::timeseries::TimeSeries;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Noiseless logistic map `x(t+1) = r·x(t)(1 − x(t))`.
pub fn logistic(n: usize, r: f64, x0: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(n);
    let mut x = x0;
    for _ in 0..n {
        v.push(x);
        x = r * x * (1.0 - x);
    }
    v
}

/// Driver X and a response Y forced by X with a lag of `lag` steps.
pub fn driven_pair(n: usize, lag: usize, coupling: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let burn = 200;
    let mut x = vec![r.random_range(0.2..0.8)];
    let mut y = vec![r.random_range(0.2..0.8)];
    for t in 1..n + burn {
        let xp = x[t - 1];
        x.push(xp * (3.8 - 3.8 * xp));
        let forced = if t > lag { x[t - 1 - lag] } else { 0.0 };
        let yp = y[t - 1];
        y.push(yp * (3.5 - 3.5 * yp - coupling * forced));
    }
    (x[burn..].to_vec(), y[burn..].to_vec())
}

pub fn series(name: &str, v: Vec<f64>) -> TimeSeries {
    TimeSeries::new(name, v).unwrap()
}

pub fn manifold(v: &[f64], e: usize, tau: usize) -> Manifold {
    embed(&series("m", v.to_vec()), EmbeddingConfig::new(e, tau).unwrap()).unwrap()
}
