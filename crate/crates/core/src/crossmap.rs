//! Simplex cross mapping, CCM strength, and the time-delayed strength curve.
//!
//! Convention: the strength of `cause → effect` is measured by predicting the
//! cause series from the effect's manifold. A [`CrossMapper`] wraps the
//! effect manifold together with its nearest-neighbour table, so every delay
//! reuses the same neighbours and weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::Manifold;
use crate::error::{Error, Result};
use crate::stats::pearson;
use crate::timeseries::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub label: usize,
    pub distance: f64,
}

/// The `E+1` nearest library points of one query, sorted by distance then
/// by label.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub query: usize,
    pub neighbors: Vec<Neighbor>,
}

/// Library restrictions for neighbour search.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborOptions {
    /// Temporal exclusion radius: candidates with `|t - l| <= radius` are
    /// skipped. 0 excludes only the query itself.
    pub exclusion_radius: usize,
    /// Only labels `<= library_end` may serve as neighbours.
    pub library_end: Option<usize>,
}

pub fn knn_query(m: &Manifold, l: usize) -> Result<NeighborSet> {
    knn_query_with(m, l, NeighborOptions::default())
}

pub fn knn_query_with(m: &Manifold, l: usize, opts: NeighborOptions) -> Result<NeighborSet> {
    if !m.labels().contains(&l) {
        return Err(Error::Config(format!(
            "query label {l} outside manifold labels {:?}",
            m.labels()
        )));
    }
    let k = m.dim() + 1;
    let lib_end = opts.library_end.unwrap_or(m.series_len()).min(m.series_len());
    if lib_end + 1 < m.t_min() + k + 1 {
        return Err(Error::TooShort {
            name: m.name().to_string(),
            len: m.n_points(),
            reason: format!("neighbour library needs at least {} points", k + 1),
        });
    }
    let query = m.point(l);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for t in m.t_min()..=lib_end {
        if t.abs_diff(l) <= opts.exclusion_radius {
            continue;
        }
        let d2 = sq_dist(query, m.point_at(t - m.t_min()));
        if best.len() == k && d2 >= best[k - 1].0 {
            continue;
        }
        // Candidates arrive in label order, so equal distances keep the
        // earlier label in front.
        let pos = best.partition_point(|&(bd, _)| bd <= d2);
        best.insert(pos, (d2, t));
        best.truncate(k);
    }
    if best.len() < k {
        return Err(Error::TooShort {
            name: m.name().to_string(),
            len: m.n_points(),
            reason: format!("only {} neighbour candidates, need {k}", best.len()),
        });
    }
    Ok(NeighborSet {
        query: l,
        neighbors: best
            .into_iter()
            .map(|(d2, label)| Neighbor {
                label,
                distance: d2.sqrt(),
            })
            .collect(),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Normalised simplex weights, aligned with a [`NeighborSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(pub Vec<f64>);

impl Weights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `v_i = exp(-d_i / d_1)`, normalised. When the nearest distance is zero all
/// zero-distance neighbours share the weight equally.
pub fn simplex_weights(ns: &NeighborSet) -> Weights {
    let d1 = ns.neighbors[0].distance;
    let raw: Vec<f64> = if d1 == 0.0 {
        ns.neighbors
            .iter()
            .map(|n| if n.distance == 0.0 { 1.0 } else { 0.0 })
            .collect()
    } else {
        ns.neighbors.iter().map(|n| (-n.distance / d1).exp()).collect()
    };
    let total: f64 = raw.iter().sum();
    Weights(raw.into_iter().map(|v| v / total).collect())
}

/// Cross-map predictions of a target series at consecutive labels starting
/// at `first_label`. A value is NaN when every neighbour's shifted label fell
/// outside the series.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub first_label: usize,
    pub values: Vec<f64>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last_label(&self) -> usize {
        self.first_label + self.values.len() - 1
    }

    /// Predicted value at label `l`.
    pub fn at(&self, l: usize) -> f64 {
        self.values[l - self.first_label]
    }
}

/// The effect manifold plus its precomputed neighbours and weights.
#[derive(Debug, Clone)]
pub struct CrossMapper {
    manifold: Manifold,
    options: NeighborOptions,
    // Flattened per query: (E+1) labels and weights for each manifold point.
    labels: Vec<usize>,
    weights: Vec<f64>,
}

impl CrossMapper {
    pub fn new(manifold: Manifold) -> Result<Self> {
        Self::with_options(manifold, NeighborOptions::default())
    }

    pub fn with_options(manifold: Manifold, options: NeighborOptions) -> Result<Self> {
        let sets = manifold
            .labels()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&l| knn_query_with(&manifold, l, options))
            .collect::<Result<Vec<_>>>()?;
        let k = manifold.dim() + 1;
        let mut labels = Vec::with_capacity(sets.len() * k);
        let mut weights = Vec::with_capacity(sets.len() * k);
        for ns in &sets {
            labels.extend(ns.neighbors.iter().map(|n| n.label));
            weights.extend(simplex_weights(ns).0);
        }
        Ok(Self {
            manifold,
            options,
            labels,
            weights,
        })
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn options(&self) -> NeighborOptions {
        self.options
    }

    fn k(&self) -> usize {
        self.manifold.dim() + 1
    }

    fn neighbors_of(&self, l: usize) -> (&[usize], &[f64]) {
        let i = (l - self.manifold.t_min()) * self.k();
        (&self.labels[i..i + self.k()], &self.weights[i..i + self.k()])
    }

    /// Predicts `target(l - delay)` from the neighbours of manifold point `l`
    /// for every admissible `l`. Negative delays predict `target(l + |delay|)`.
    /// Neighbours whose shifted label leaves `1..=L` are dropped and the
    /// remaining weights renormalised.
    pub fn predict(&self, target: &[f64], delay: isize) -> Result<Prediction> {
        let len = self.manifold.series_len();
        if target.len() != len {
            return Err(Error::Data(format!(
                "target has length {}, manifold {:?} has {len}",
                target.len(),
                self.manifold.name()
            )));
        }
        let t_min = self.manifold.t_min();
        let shift = delay.unsigned_abs();
        if len < shift + t_min + self.k() + 1 {
            return Err(Error::TooShort {
                name: self.manifold.name().to_string(),
                len,
                reason: format!("not enough overlap for delay {delay}"),
            });
        }
        let (first_query, last_query) = if delay >= 0 {
            (t_min + shift, len)
        } else {
            (t_min, len - shift)
        };
        let values = (first_query..=last_query)
            .map(|l| {
                let (labels, weights) = self.neighbors_of(l);
                let mut acc = 0.0;
                let mut kept = 0.0;
                let mut dropped = false;
                for (&t, &w) in labels.iter().zip(weights) {
                    let shifted = t as isize - delay;
                    if shifted < 1 || shifted > len as isize {
                        dropped = true;
                        continue;
                    }
                    acc += w * target[shifted as usize - 1];
                    kept += w;
                }
                if !dropped {
                    acc
                } else if kept > 0.0 {
                    acc / kept
                } else {
                    f64::NAN
                }
            })
            .collect();
        Ok(Prediction {
            first_label: (first_query as isize - delay) as usize,
            values,
        })
    }

    /// Correlation between the prediction at `delay` and the truth over the
    /// same labels.
    pub fn strength(&self, target: &[f64], delay: isize) -> Result<Option<f64>> {
        let pred = self.predict(target, delay)?;
        Ok(prediction_skill(&pred, target))
    }
}

/// Pearson correlation of a prediction against `truth` on its label range,
/// skipping undefined (NaN) predictions.
pub fn prediction_skill(pred: &Prediction, truth: &[f64]) -> Option<f64> {
    let truth = &truth[pred.first_label - 1..pred.last_label()];
    if pred.values.iter().all(|v| !v.is_nan()) {
        return pearson(&pred.values, truth);
    }
    let (p, t): (Vec<f64>, Vec<f64>) = pred
        .values
        .iter()
        .zip(truth)
        .filter(|(p, _)| !p.is_nan())
        .map(|(&p, &t)| (p, t))
        .unzip();
    pearson(&p, &t)
}

/// Cross-map prediction of `target` from `mapper`'s manifold at delay `delay`.
pub fn cross_map_predict(mapper: &CrossMapper, target: &TimeSeries, delay: isize) -> Result<Prediction> {
    mapper.predict(target.values(), delay)
}

/// Plain CCM strength of `cause → effect`, with `mapper` built on the effect.
pub fn ccm_rho(mapper: &CrossMapper, cause: &TimeSeries) -> Result<Option<f64>> {
    mapper.strength(cause.values(), 0)
}

/// Strength as a function of integer delay over a contiguous range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalCurve {
    pub cause: String,
    pub effect: String,
    pub first_delay: isize,
    /// One entry per delay; `None` marks an undefined strength.
    pub strengths: Vec<Option<f64>>,
    pub dim: usize,
    pub tau: usize,
    pub series_len: usize,
}

impl CausalCurve {
    pub fn last_delay(&self) -> isize {
        self.first_delay + self.strengths.len() as isize - 1
    }

    pub fn len(&self) -> usize {
        self.strengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strengths.is_empty()
    }

    pub fn delays(&self) -> impl Iterator<Item = isize> + '_ {
        self.first_delay..=self.last_delay()
    }

    /// Strength at `delay`, `None` when outside the range or undefined.
    pub fn at(&self, delay: isize) -> Option<f64> {
        if delay < self.first_delay || delay > self.last_delay() {
            return None;
        }
        self.strengths[(delay - self.first_delay) as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = (isize, Option<f64>)> + '_ {
        self.delays().zip(self.strengths.iter().copied())
    }

    /// Copy of the curve restricted to `from..=to` (clipped to the range).
    pub fn window(&self, from: isize, to: isize) -> CausalCurve {
        let from = from.max(self.first_delay);
        let to = to.min(self.last_delay());
        let strengths = if from > to {
            Vec::new()
        } else {
            self.strengths[(from - self.first_delay) as usize..=(to - self.first_delay) as usize].to_vec()
        };
        CausalCurve {
            first_delay: from,
            strengths,
            ..self.clone()
        }
    }

    /// Largest defined strength over `from..=to`, with its delay; earlier
    /// delays win ties.
    pub fn peak_in(&self, from: isize, to: isize) -> Option<(isize, f64)> {
        self.iter()
            .filter(|&(d, _)| d >= from && d <= to)
            .filter_map(|(d, s)| s.map(|s| (d, s)))
            .fold(None, |best, (d, s)| match best {
                Some((_, bs)) if bs >= s => best,
                _ => Some((d, s)),
            })
    }

    /// Largest defined strength over the whole curve.
    pub fn peak(&self) -> Option<(isize, f64)> {
        self.peak_in(self.first_delay, self.last_delay())
    }
}

/// TDCCM curve of `cause → effect` for delays `-neg_window..=max_delay`.
pub fn tdccm_curve(
    mapper: &CrossMapper,
    cause: &TimeSeries,
    max_delay: usize,
    neg_window: usize,
) -> Result<CausalCurve> {
    let delays: Vec<isize> = (-(neg_window as isize)..=max_delay as isize).collect();
    let strengths = delays
        .par_iter()
        .map(|&d| mapper.strength(cause.values(), d))
        .collect::<Result<Vec<_>>>()?;
    let m = mapper.manifold();
    Ok(CausalCurve {
        cause: cause.name().to_string(),
        effect: m.name().to_string(),
        first_delay: -(neg_window as isize),
        strengths,
        dim: m.dim(),
        tau: m.config().tau,
        series_len: m.series_len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub library_size: usize,
    pub strength: Option<f64>,
}

/// Strength at a fixed delay as the neighbour library grows. Library size `n`
/// admits manifold points with labels `<= n`; predictions still cover every
/// admissible query label.
pub fn convergence_scan(
    manifold: &Manifold,
    cause: &TimeSeries,
    delay: isize,
    library_sizes: &[usize],
    options: NeighborOptions,
) -> Result<Vec<ConvergencePoint>> {
    if library_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("library sizes must be strictly ascending".into()));
    }
    library_sizes
        .par_iter()
        .map(|&n| {
            let opts = NeighborOptions {
                library_end: Some(n),
                ..options
            };
            let mapper = CrossMapper::with_options(manifold.clone(), opts)?;
            Ok(ConvergencePoint {
                library_size: n,
                strength: mapper.strength(cause.values(), delay)?,
            })
        })
        .collect()
}
