//! Delay resolution over strength curves and time-delayed partial cross
//! mapping (TDPCM).
//!
//! TDPCM measures `cause → effect` at delay γ as the partial correlation of
//! the cross-mapped cause and the true cause, conditioned on cross-mapped
//! copies of the cause taken from each disturber's manifold. The partial
//! correlation comes from the precision matrix of the stacked columns.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossmap::{CausalCurve, CrossMapper, Prediction};
use crate::error::{Error, Result};
use crate::stats::pearson;
use crate::timeseries::TimeSeries;

/// Delays where the curve strictly exceeds both neighbours. Boundary delays
/// and undefined neighbours never qualify.
pub fn local_maxima(curve: &CausalCurve) -> Vec<isize> {
    curve
        .strengths
        .windows(3)
        .enumerate()
        .filter_map(|(i, w)| match (w[0], w[1], w[2]) {
            (Some(a), Some(b), Some(c)) if b > a && b > c => Some(curve.first_delay + i as isize + 1),
            _ => None,
        })
        .collect()
}

/// Among the local maxima inside `from..=to`, the one with the largest
/// strength (smaller delay on ties).
fn best_local_max(curve: &CausalCurve, from: isize, to: isize) -> Option<(isize, f64)> {
    local_maxima(curve)
        .into_iter()
        .filter(|&d| d >= from && d <= to)
        .filter_map(|d| curve.at(d).map(|s| (d, s)))
        .fold(None, |best, (d, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((d, s)),
        })
}

/// Resolved delay of one cause-effect pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayChoice {
    /// `None` when no nonnegative local maximum exists (non-causal pair).
    pub delay: Option<usize>,
    pub strength: Option<f64>,
    /// The global peak of the full curve sits at a negative delay.
    pub synchrony: bool,
}

impl DelayChoice {
    pub fn is_causal(&self) -> bool {
        self.delay.is_some()
    }
}

/// Arg-max over nonnegative local maxima, plus the synchrony flag.
pub fn optimal_delay(curve: &CausalCurve) -> DelayChoice {
    let synchrony = matches!(curve.peak(), Some((d, _)) if d < 0);
    match best_local_max(curve, 0, curve.last_delay()) {
        Some((d, s)) => DelayChoice {
            delay: Some(d as usize),
            strength: Some(s),
            synchrony,
        },
        None => DelayChoice {
            delay: None,
            strength: None,
            synchrony,
        },
    }
}

/// Delay used when the synchrony screen is switched off: the plain arg-max
/// over lags `1..=max`, ignoring the local-maximum requirement.
pub fn unscreened_delay(curve: &CausalCurve) -> DelayChoice {
    match curve.peak_in(1, curve.last_delay()) {
        Some((d, s)) => DelayChoice {
            delay: Some(d as usize),
            strength: Some(s),
            synchrony: false,
        },
        None => DelayChoice {
            delay: None,
            strength: None,
            synchrony: false,
        },
    }
}

/// Delay of `cause → disturber` along the path to the effect: the strongest
/// local maximum of the cause→disturber curve in `0..=cause_delay`.
pub fn path_delay(cause_to_disturber: &CausalCurve, cause_delay: usize) -> Option<usize> {
    best_local_max(cause_to_disturber, 0, cause_delay as isize).map(|(d, _)| d as usize)
}

/// Arg-max over nonnegative local maxima of a TDPCM curve.
pub fn tdpcm_optimal_delay(curve: &CausalCurve) -> Option<usize> {
    best_local_max(curve, 0, curve.last_delay()).map(|(d, _)| d as usize)
}

/// Covariance and its inverse. `ridge` is the diagonal loading that was
/// needed to invert (0 when none).
#[derive(Debug, Clone)]
pub struct PrecisionResult {
    pub covariance: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub ridge: f64,
}

/// Sample covariance (n − 1 denominator) of equal-length columns.
pub fn covariance(columns: &[&[f64]]) -> DMatrix<f64> {
    let k = columns.len();
    let n = columns[0].len();
    let means: Vec<f64> = columns.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let s: f64 = columns[i]
                .iter()
                .zip(columns[j])
                .map(|(a, b)| (a - means[i]) * (b - means[j]))
                .sum();
            let v = s / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// Inverts a covariance matrix, adding `λ·I` with
/// `λ = 1e-10·trace/dim` (doubling) until the Cholesky factorisation succeeds.
pub fn precision_matrix(covariance: DMatrix<f64>) -> Result<PrecisionResult> {
    let (chol, ridge) = ridged_cholesky(&covariance)?;
    Ok(PrecisionResult {
        precision: chol.inverse(),
        covariance,
        ridge,
    })
}

fn ridged_cholesky(cov: &DMatrix<f64>) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    if let Some(c) = cov.clone().cholesky() {
        return Ok((c, 0.0));
    }
    let dim = cov.nrows();
    let trace = cov.trace();
    if !(trace > 0.0 && trace.is_finite()) {
        return Err(Error::Numerical("covariance has no positive variance".into()));
    }
    let mut lambda = 1e-10 * trace / dim as f64;
    for _ in 0..200 {
        let loaded = cov + DMatrix::identity(dim, dim) * lambda;
        if let Some(c) = loaded.cholesky() {
            return Ok((c, lambda));
        }
        lambda *= 2.0;
    }
    Err(Error::Numerical("covariance could not be regularised".into()))
}

// Relative residual variance below which a column counts as fully explained.
const DEGENERATE_RATIO: f64 = 1e-8;

/// Variance of column `target` left after regressing on `given`, read from
/// the last Cholesky pivot of the reordered sub-covariance.
fn residual_variance(cov: &DMatrix<f64>, target: usize, given: &[usize]) -> f64 {
    if given.is_empty() {
        return cov[(target, target)];
    }
    let order: Vec<usize> = given.iter().copied().chain(std::iter::once(target)).collect();
    let sub = DMatrix::from_fn(order.len(), order.len(), |i, j| cov[(order[i], order[j])]);
    match ridged_cholesky(&sub) {
        Ok((c, ridge)) => {
            let last = order.len() - 1;
            let pivot = c.l_dirty()[(last, last)];
            (pivot * pivot - ridge).max(0.0)
        }
        Err(_) => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialCorrelation {
    /// `None` when either vector has no variance left given the
    /// conditioning set.
    pub value: Option<f64>,
    pub ridge: f64,
}

/// Partial correlation of `a` and `b` given `conditioning`, computed as
/// `-Ω₁₂ / √(Ω₁₁ Ω₂₂)` from the precision matrix of `[a, b, C…]`.
/// With no conditioning vectors this is the Pearson correlation.
pub fn partial_pcc(a: &[f64], b: &[f64], conditioning: &[&[f64]]) -> Result<PartialCorrelation> {
    let n = a.len();
    if b.len() != n || conditioning.iter().any(|c| c.len() != n) {
        return Err(Error::Data("partial correlation needs equal-length vectors".into()));
    }
    if conditioning.is_empty() {
        return Ok(PartialCorrelation {
            value: pearson(a, b),
            ridge: 0.0,
        });
    }
    if n < conditioning.len() + 3 {
        return Err(Error::TooShort {
            name: "partial correlation".into(),
            len: n,
            reason: format!("need at least {} samples", conditioning.len() + 3),
        });
    }
    let mut cols: Vec<&[f64]> = vec![a, b];
    cols.extend_from_slice(conditioning);
    let cov = covariance(&cols);
    let given: Vec<usize> = (2..cols.len()).collect();
    for idx in [0, 1] {
        let var = cov[(idx, idx)];
        if !(var > 0.0) || residual_variance(&cov, idx, &given) <= DEGENERATE_RATIO * var {
            return Ok(PartialCorrelation {
                value: None,
                ridge: 0.0,
            });
        }
    }
    let p = precision_matrix(cov)?;
    let om = &p.precision;
    let denom = (om[(0, 0)] * om[(1, 1)]).sqrt();
    let value = (denom > 0.0 && denom.is_finite()).then(|| (-om[(0, 1)] / denom).clamp(-1.0, 1.0));
    Ok(PartialCorrelation {
        value,
        ridge: p.ridge,
    })
}

/// Columns of the stacked vector at one delay γ, aligned on labels
/// `first_label..` : cross-mapped cause, true cause, then one conditioning
/// prediction per disturber in input order.
#[derive(Debug, Clone)]
pub struct StackedVector {
    pub gamma: usize,
    pub first_label: usize,
    pub columns: Vec<Vec<f64>>,
}

impl StackedVector {
    pub fn len(&self) -> usize {
        self.columns[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns[0].is_empty()
    }
}

/// A conditioning variable for one cause: the disturber's cross mapper and
/// the path delay `ξ^X_YZ` resolved for it.
#[derive(Debug, Clone, Copy)]
pub struct Disturber<'a> {
    pub mapper: &'a CrossMapper,
    pub path_delay: usize,
}

/// TDPCM curve with per-delay bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TdpcmCurve {
    pub curve: CausalCurve,
    /// Ridge applied at each γ.
    pub ridge: Vec<f64>,
    /// Number of disturbers whose conditioning delay was clamped to 0, per γ.
    pub clamped: Vec<usize>,
    pub conditioned_on: Vec<String>,
}

/// Builds the stacked vector for delay `gamma`.
pub fn stacked_vector(
    effect: &CrossMapper,
    cause: &TimeSeries,
    disturbers: &[Disturber<'_>],
    cause_delay: usize,
    gamma: usize,
) -> Result<(StackedVector, usize)> {
    let y = cause.values();
    let own = effect.predict(y, gamma as isize)?;
    let first = own.first_label;
    let last = own.last_label();
    let mut clamped = 0;
    let mut preds: Vec<Prediction> = Vec::with_capacity(disturbers.len());
    for z in disturbers {
        let raw = z.path_delay as isize - cause_delay as isize + gamma as isize;
        if raw < 0 {
            clamped += 1;
        }
        let p = z.mapper.predict(y, raw.max(0))?;
        if p.first_label > first || p.last_label() < last {
            return Err(Error::Data(format!(
                "conditioning prediction from {:?} does not cover labels {first}..={last}",
                z.mapper.manifold().name()
            )));
        }
        preds.push(p);
    }
    let keep: Vec<usize> = (first..=last)
        .filter(|&l| !own.at(l).is_nan() && preds.iter().all(|p| !p.at(l).is_nan()))
        .collect();
    let mut columns = vec![
        keep.iter().map(|&l| own.at(l)).collect::<Vec<_>>(),
        keep.iter().map(|&l| y[l - 1]).collect(),
    ];
    columns.extend(preds.iter().map(|p| keep.iter().map(|&l| p.at(l)).collect()));
    Ok((
        StackedVector {
            gamma,
            first_label: first,
            columns,
        },
        clamped,
    ))
}

/// TDPCM of `cause → effect` for γ in `0..=max_delay`, conditioned on the
/// given disturbers. `cause_delay` is the TDCCM optimal delay `ξ_YX`.
pub fn tdpcm_curve(
    effect: &CrossMapper,
    cause: &TimeSeries,
    disturbers: &[Disturber<'_>],
    cause_delay: usize,
    max_delay: usize,
) -> Result<TdpcmCurve> {
    let cells = (0..=max_delay)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&gamma| {
            let (sv, clamped) = stacked_vector(effect, cause, disturbers, cause_delay, gamma)?;
            let cond: Vec<&[f64]> = sv.columns[2..].iter().map(Vec::as_slice).collect();
            let pc = partial_pcc(&sv.columns[0], &sv.columns[1], &cond)?;
            Ok((pc, clamped))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = effect.manifold();
    Ok(TdpcmCurve {
        curve: CausalCurve {
            cause: cause.name().to_string(),
            effect: m.name().to_string(),
            first_delay: 0,
            strengths: cells.iter().map(|(pc, _)| pc.value).collect(),
            dim: m.dim(),
            tau: m.config().tau,
            series_len: m.series_len(),
        },
        ridge: cells.iter().map(|(pc, _)| pc.ridge).collect(),
        clamped: cells.iter().map(|&(_, c)| c).collect(),
        conditioned_on: disturbers
            .iter()
            .map(|z| z.mapper.manifold().name().to_string())
            .collect(),
    })
}
