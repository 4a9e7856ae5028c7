//! Coupled logistic-map benchmarks with known delayed causal structure.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), which is specified
//! bit-for-bit and therefore portable. Stream 0 of the seed draws initial
//! conditions; stream `i + 1` draws the measurement noise of variable `i`.
//! Noise draws never depend on how the trajectory was iterated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::{Dataset, TimeSeries};

const MAX_RETRIES: u64 = 100;
const ESCAPE_LOW: f64 = -0.5;
const ESCAPE_HIGH: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Chain,
    Fork,
}

/// One delayed coupling `source(t - delay)` entering `target`'s update with
/// coefficient `strength`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub source: usize,
    pub target: usize,
    pub delay: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub topology: Topology,
    pub alphas: Vec<f64>,
    pub couplings: Vec<Coupling>,
    pub noise_std: f64,
    pub length: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Use `y2(t-1)` in place of `y3(t-1)` as the third variable's self term.
    #[serde(default)]
    pub literal_eq: bool,
}

impl SystemSpec {
    /// Four-variable chain `Y1 →1 Y2 →5 Y3 →2 Y4`, all α = 3.6, all λ = 0.5.
    pub fn chain(seed: u64) -> Self {
        Self {
            topology: Topology::Chain,
            alphas: vec![3.6; 4],
            couplings: vec![
                Coupling { source: 0, target: 1, delay: 1, strength: 0.5 },
                Coupling { source: 1, target: 2, delay: 5, strength: 0.5 },
                Coupling { source: 2, target: 3, delay: 2, strength: 0.5 },
            ],
            noise_std: 0.01,
            length: 2000,
            burn_in: 500,
            seed,
            literal_eq: false,
        }
    }

    /// Three-variable fork `Y1 →1 Y3 ←3 Y2` with α = (4, 4, 2.2),
    /// λ13 = 0.6, λ23 = 0.7.
    pub fn fork(seed: u64) -> Self {
        Self {
            topology: Topology::Fork,
            alphas: vec![4.0, 4.0, 2.2],
            couplings: vec![
                Coupling { source: 0, target: 2, delay: 1, strength: 0.6 },
                Coupling { source: 1, target: 2, delay: 3, strength: 0.7 },
            ],
            noise_std: 0.001,
            length: 2000,
            burn_in: 500,
            seed,
            literal_eq: false,
        }
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn with_length(mut self, length: usize) -> Self {
        self.length = length;
        self
    }

    /// Sets the coefficient of the coupling `source → target`.
    pub fn with_coupling(mut self, source: usize, target: usize, strength: f64) -> Self {
        for c in &mut self.couplings {
            if c.source == source && c.target == target {
                c.strength = strength;
            }
        }
        self
    }

    pub fn n_vars(&self) -> usize {
        self.alphas.len()
    }

    /// Name of the sink variable, used as KPI.
    pub fn kpi_name(&self) -> String {
        format!("Y{}", self.n_vars())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        let expected = match self.topology {
            Topology::Chain => 4,
            Topology::Fork => 3,
        };
        if n != expected {
            return Err(Error::Config(format!(
                "{:?} system has {expected} variables, got {n} alphas",
                self.topology
            )));
        }
        if self.length < 1 {
            return Err(Error::Config("length must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        if self.alphas.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("alphas must be finite".into()));
        }
        for c in &self.couplings {
            if c.source >= n || c.target >= n || !c.strength.is_finite() || c.delay == 0 {
                return Err(Error::Config(format!("invalid coupling {c:?}")));
            }
        }
        Ok(())
    }

    fn max_delay(&self) -> usize {
        self.couplings.iter().map(|c| c.delay).max().unwrap_or(1).max(1)
    }

    // Index of the variable whose previous value forms the quadratic self term.
    fn self_term(&self, i: usize) -> usize {
        if self.literal_eq && i == 2 {
            1
        } else {
            i
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub cause: String,
    pub effect: String,
    pub delay: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub edges: Vec<Edge>,
}

impl GroundTruth {
    pub fn delay_of(&self, cause: &str, effect: &str) -> Option<usize> {
        self.edges
            .iter()
            .find(|e| e.cause == cause && e.effect == effect)
            .map(|e| e.delay)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub truth: GroundTruth,
    pub spec: SystemSpec,
    /// Seed actually used after divergence retries.
    pub effective_seed: u64,
}

pub fn gen_chain(spec: &SystemSpec) -> Result<SyntheticData> {
    if spec.topology != Topology::Chain {
        return Err(Error::Config("gen_chain needs a chain spec".into()));
    }
    generate(spec)
}

pub fn gen_fork(spec: &SystemSpec) -> Result<SyntheticData> {
    if spec.topology != Topology::Fork {
        return Err(Error::Config("gen_fork needs a fork spec".into()));
    }
    generate(spec)
}

/// Generates either topology.
pub fn generate(spec: &SystemSpec) -> Result<SyntheticData> {
    spec.validate()?;
    for retry in 0..=MAX_RETRIES {
        let seed = spec.seed.wrapping_add(retry.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        match iterate(spec, seed) {
            Some(clean) => {
                if retry > 0 {
                    log::info!("trajectory diverged; regenerated with seed {seed} after {retry} retries");
                }
                let noisy = add_noise(spec, seed, clean);
                let columns = noisy
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| TimeSeries::new(format!("Y{}", i + 1), v))
                    .collect::<Result<Vec<_>>>()?;
                let dataset = Dataset::from_columns(columns, &spec.kpi_name())?;
                return Ok(SyntheticData {
                    dataset,
                    truth: ground_truth(spec),
                    spec: spec.clone(),
                    effective_seed: seed,
                });
            }
            None => log::debug!("seed {seed} escaped [{ESCAPE_LOW}, {ESCAPE_HIGH}]"),
        }
    }
    Err(Error::Numerical(format!(
        "trajectory diverged for {MAX_RETRIES} consecutive seeds starting at {}",
        spec.seed
    )))
}

fn ground_truth(spec: &SystemSpec) -> GroundTruth {
    GroundTruth {
        edges: spec
            .couplings
            .iter()
            .filter(|c| c.strength != 0.0)
            .map(|c| Edge {
                cause: format!("Y{}", c.source + 1),
                effect: format!("Y{}", c.target + 1),
                delay: c.delay,
            })
            .collect(),
    }
}

// Noise-free trajectory after burn-in, or None if it escapes the guard band.
fn iterate(spec: &SystemSpec, seed: u64) -> Option<Vec<Vec<f64>>> {
    let n = spec.n_vars();
    let warm = spec.max_delay();
    let total = warm + spec.burn_in + spec.length;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut y: Vec<Vec<f64>> = (0..n).map(|_| Vec::with_capacity(total)).collect();
    for _ in 0..warm {
        for col in y.iter_mut() {
            col.push(rng.random_range(0.1..0.9));
        }
    }
    for t in warm..total {
        for i in 0..n {
            let prev = y[i][t - 1];
            let s = y[spec.self_term(i)][t - 1];
            let mut bracket = spec.alphas[i] - spec.alphas[i] * s;
            for c in spec.couplings.iter().filter(|c| c.target == i) {
                bracket -= c.strength * y[c.source][t - c.delay];
            }
            let next = prev * bracket;
            if !next.is_finite() || !(ESCAPE_LOW..=ESCAPE_HIGH).contains(&next) {
                return None;
            }
            y[i].push(next);
        }
    }
    Some(y.into_iter().map(|col| col[warm + spec.burn_in..].to_vec()).collect())
}

fn add_noise(spec: &SystemSpec, seed: u64, mut clean: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    if spec.noise_std == 0.0 {
        return clean;
    }
    let normal = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
    for (i, col) in clean.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        for v in col.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    clean
}
