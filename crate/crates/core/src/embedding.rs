//! Delay-coordinate (Takens) reconstruction and false-nearest-neighbour
//! selection of the embedding dimension.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::{Dataset, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub tau: usize,
}

impl EmbeddingConfig {
    pub fn new(dim: usize, tau: usize) -> Result<Self> {
        if dim == 0 || tau == 0 {
            return Err(Error::Config(format!(
                "embedding needs dim >= 1 and tau >= 1, got dim={dim} tau={tau}"
            )));
        }
        Ok(Self { dim, tau })
    }

    /// Span of one delay vector, `(E-1)·τ`.
    pub fn span(&self) -> usize {
        (self.dim - 1) * self.tau
    }

    /// First label with a full delay vector, `1 + (E-1)·τ`.
    pub fn t_min(&self) -> usize {
        1 + self.span()
    }
}

/// Trajectory matrix of one series. Point `i` carries label `t_min + i` and
/// coordinates `[v(l), v(l-τ), …, v(l-(E-1)τ)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifold {
    name: String,
    config: EmbeddingConfig,
    series_len: usize,
    coords: Vec<f64>,
}

impl Manifold {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> EmbeddingConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn t_min(&self) -> usize {
        self.config.t_min()
    }

    /// Length L of the source series.
    pub fn series_len(&self) -> usize {
        self.series_len
    }

    pub fn n_points(&self) -> usize {
        self.coords.len() / self.config.dim
    }

    /// Labels `t_min..=L`.
    pub fn labels(&self) -> std::ops::RangeInclusive<usize> {
        self.t_min()..=self.series_len
    }

    /// Coordinates of the point at time label `l`.
    pub fn point(&self, l: usize) -> &[f64] {
        let i = l - self.t_min();
        let e = self.config.dim;
        &self.coords[i * e..(i + 1) * e]
    }

    pub(crate) fn point_at(&self, index: usize) -> &[f64] {
        let e = self.config.dim;
        &self.coords[index * e..(index + 1) * e]
    }
}

pub fn embed(series: &TimeSeries, cfg: EmbeddingConfig) -> Result<Manifold> {
    let len = series.len();
    if len <= cfg.span() {
        return Err(Error::TooShort {
            name: series.name().to_string(),
            len,
            reason: format!(
                "embedding with E={} tau={} needs more than {} points",
                cfg.dim,
                cfg.tau,
                cfg.span()
            ),
        });
    }
    let values = series.values();
    let mut coords = Vec::with_capacity((len - cfg.span()) * cfg.dim);
    for l in cfg.t_min()..=len {
        for k in 0..cfg.dim {
            coords.push(values[l - 1 - k * cfg.tau]);
        }
    }
    Ok(Manifold {
        name: series.name().to_string(),
        config: cfg,
        series_len: len,
        coords,
    })
}

/// Kennel et al. false-nearest-neighbour settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnnConfig {
    pub tau: usize,
    pub e_max: usize,
    /// Distance-ratio tolerance.
    pub r_tol: f64,
    /// Attractor-size tolerance.
    pub a_tol: f64,
}

impl Default for FnnConfig {
    fn default() -> Self {
        Self {
            tau: 1,
            e_max: 10,
            r_tol: 15.0,
            a_tol: 2.0,
        }
    }
}

/// Fraction of false nearest neighbours for `E = 1..=e_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnnProfile {
    pub name: String,
    pub tau: usize,
    pub fractions: Vec<f64>,
}

impl FnnProfile {
    /// Fraction at embedding dimension `dim` (1-based).
    pub fn fraction(&self, dim: usize) -> f64 {
        self.fractions[dim - 1]
    }

    pub fn e_max(&self) -> usize {
        self.fractions.len()
    }

    /// First dimension whose fraction is below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<usize> {
        self.fractions.iter().position(|&f| f < threshold).map(|i| i + 1)
    }
}

pub fn fnn_profile(series: &TimeSeries, cfg: FnnConfig) -> Result<FnnProfile> {
    if cfg.e_max < 2 {
        return Err(Error::Config("FNN needs e_max >= 2".into()));
    }
    if cfg.tau == 0 {
        return Err(Error::Config("FNN needs tau >= 1".into()));
    }
    if series.is_constant() {
        return Err(Error::ConstantSeries(series.name().to_string()));
    }
    let v = series.values();
    let len = v.len();
    if len <= cfg.e_max * cfg.tau + 1 {
        return Err(Error::TooShort {
            name: series.name().to_string(),
            len,
            reason: format!("FNN up to E={} needs more points", cfg.e_max),
        });
    }
    let mean = v.iter().sum::<f64>() / len as f64;
    let r_a = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / len as f64).sqrt();

    let fractions = (1..=cfg.e_max)
        .map(|e| fnn_fraction(v, e, cfg.tau, cfg.r_tol, cfg.a_tol, r_a))
        .collect();
    Ok(FnnProfile {
        name: series.name().to_string(),
        tau: cfg.tau,
        fractions,
    })
}

// Points are indexed by 0-based position `p`; coordinate k of point p is
// v[p - k·tau]. Only positions with a (dim+1)-th coordinate take part.
fn fnn_fraction(v: &[f64], dim: usize, tau: usize, r_tol: f64, a_tol: f64, r_a: f64) -> f64 {
    let first = dim * tau;
    let positions: Vec<usize> = (first..v.len()).collect();
    let dist2 = |p: usize, q: usize| -> f64 {
        (0..dim)
            .map(|k| {
                let d = v[p - k * tau] - v[q - k * tau];
                d * d
            })
            .sum()
    };
    let false_count: usize = positions
        .par_iter()
        .map(|&p| {
            let mut best = (f64::INFINITY, usize::MAX);
            for &q in &positions {
                if q == p {
                    continue;
                }
                let d = dist2(p, q);
                if d < best.0 {
                    best = (d, q);
                }
            }
            let (r2, q) = best;
            let extra = (v[p - dim * tau] - v[q - dim * tau]).abs();
            let r = r2.sqrt();
            let ratio_false = if r > 0.0 { extra / r > r_tol } else { extra > 0.0 };
            let size_false = (r2 + extra * extra).sqrt() / r_a > a_tol;
            usize::from(ratio_false || size_false)
        })
        .sum();
    false_count as f64 / positions.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingSelection {
    pub dim: usize,
    pub threshold: f64,
    pub profiles: Vec<FnnProfile>,
    /// Constant columns left out of the decision.
    pub skipped: Vec<String>,
}

/// Smallest E at which every non-constant column's FNN fraction is below
/// `threshold`.
pub fn select_embedding_dim(ds: &Dataset, cfg: FnnConfig, threshold: f64) -> Result<EmbeddingSelection> {
    let mut skipped = Vec::new();
    let usable: Vec<&TimeSeries> = ds
        .columns()
        .iter()
        .filter(|c| {
            let constant = c.is_constant();
            if constant {
                log::warn!("skipping constant column {:?} in FNN selection", c.name());
                skipped.push(c.name().to_string());
            }
            !constant
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Data("every column is constant".into()));
    }
    let profiles = usable
        .par_iter()
        .map(|c| fnn_profile(c, cfg))
        .collect::<Result<Vec<_>>>()?;
    let dim = (1..=cfg.e_max)
        .find(|&e| profiles.iter().all(|p| p.fraction(e) < threshold))
        .ok_or(Error::NoEmbeddingDim {
            e_max: cfg.e_max,
            threshold,
        })?;
    Ok(EmbeddingSelection {
        dim,
        threshold,
        profiles,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(v: Vec<f64>) -> TimeSeries {
        TimeSeries::new("s", v).unwrap()
    }

    #[test]
    fn embed_small() {
        let s = series((1..=6).map(f64::from).collect());
        let m = embed(&s, EmbeddingConfig::new(2, 1).unwrap()).unwrap();
        assert_eq!(m.n_points(), 5);
        assert_eq!(m.t_min(), 2);
        assert_eq!(m.point(2), &[2.0, 1.0]);
        assert_eq!(m.point(6), &[6.0, 5.0]);
    }

    #[test]
    fn embed_full_size() {
        let s = series((0..1596).map(|i| (i as f64 * 0.1).sin()).collect());
        let m = embed(&s, EmbeddingConfig::new(4, 1).unwrap()).unwrap();
        assert_eq!(m.n_points(), 1593);
        assert_eq!(m.t_min(), 4);
    }

    #[test]
    fn embed_dim_one_is_raw() {
        let vals = vec![0.3, 0.1, 0.7];
        let m = embed(&series(vals.clone()), EmbeddingConfig::new(1, 1).unwrap()).unwrap();
        assert_eq!(m.t_min(), 1);
        for (i, v) in vals.iter().enumerate() {
            assert_eq!(m.point(i + 1), &[*v]);
        }
    }

    #[test]
    fn embed_too_short() {
        let s = series(vec![1.0, 2.0, 3.0]);
        assert!(embed(&s, EmbeddingConfig::new(2, 3).unwrap()).is_err());
        assert!(embed(&s, EmbeddingConfig::new(2, 2).unwrap()).is_ok());
        assert!(embed(&s, EmbeddingConfig::new(2, 1).unwrap()).is_ok());
    }

    #[test]
    fn fnn_rejects_constant() {
        let s = series(vec![2.0; 100]);
        assert!(matches!(
            fnn_profile(&s, FnnConfig::default()),
            Err(Error::ConstantSeries(_))
        ));
    }

    #[test]
    fn single_column_selection() {
        let vals: Vec<f64> = (0..600).map(|i| (0.3 * i as f64).sin()).collect();
        let ds = Dataset::new(vec![series(vals)], 0).unwrap();
        let cfg = FnnConfig {
            e_max: 5,
            ..Default::default()
        };
        let sel = select_embedding_dim(&ds, cfg, 0.05).unwrap();
        assert_eq!(Some(sel.dim), sel.profiles[0].first_below(0.05));
    }
}
