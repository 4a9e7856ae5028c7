//! PLS soft sensor, evaluation metrics, the training-size stability sweep and
//! the Wilcoxon signed-rank comparison.

use std::ops::RangeInclusive;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::timeseries::{build_supervised, Dataset, FeatureId, FeatureSet, NormalizationParams};

const NIPALS_TOL: f64 = 1e-10;
const NIPALS_MAX_ITER: usize = 500;

/// Fitted PLS1 regressor. Predictions are `x·coefficients + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlsModel {
    pub n_components: usize,
    pub x_mean: Vec<f64>,
    pub y_mean: f64,
    /// Columns of W, one per component.
    pub weights: Vec<Vec<f64>>,
    /// Columns of P, one per component.
    pub loadings: Vec<Vec<f64>>,
    pub y_loadings: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub features: Vec<FeatureId>,
}

fn center(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = x.nrows() as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    (xc, mean)
}

/// NIPALS PLS1 with deflation of X and y. `features` labels the columns of
/// `x`; pass an empty vector for anonymous inputs.
pub fn pls_fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    n_components: usize,
    features: Vec<FeatureId>,
) -> Result<PlsModel> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::Data(format!("{n} input rows but {} targets", y.len())));
    }
    if !features.is_empty() && features.len() != p {
        return Err(Error::Data(format!("{p} input columns but {} feature ids", features.len())));
    }
    if n_components == 0 {
        return Err(Error::Config("n_components must be at least 1".into()));
    }
    if n < 2 || p == 0 {
        return Err(Error::Data(format!("cannot fit PLS on a {n}x{p} matrix")));
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(Error::Data("PLS target is constant".into()));
    }
    let cap = (n - 1).min(p);
    let requested = if n_components > cap {
        log::info!("n_components={n_components} exceeds min(n-1, p)={cap}; using {cap}");
        cap
    } else {
        n_components
    };

    let (mut xr, x_mean) = center(x);
    let y_mean = y.mean();
    let mut yr = y.add_scalar(-y_mean);
    let scale = (xr.transpose() * &yr).norm().max(f64::MIN_POSITIVE);

    let mut w_cols = Vec::new();
    let mut p_cols = Vec::new();
    let mut q_vals = Vec::new();
    for a in 0..requested {
        let mut u = yr.clone();
        let mut t_old: Option<DVector<f64>> = None;
        let mut found = None;
        for _ in 0..NIPALS_MAX_ITER {
            let mut w = xr.transpose() * &u;
            let wn = w.norm();
            if wn <= 1e-12 * scale {
                break;
            }
            w /= wn;
            let t = &xr * &w;
            let tt = t.dot(&t);
            if tt <= f64::EPSILON * f64::EPSILON {
                break;
            }
            let q = yr.dot(&t) / tt;
            let done = t_old
                .as_ref()
                .is_some_and(|o| (&t - o).norm() <= NIPALS_TOL * t.norm());
            u = &yr * (q / (q * q).max(f64::MIN_POSITIVE));
            found = Some((w, t.clone(), q, tt));
            if done {
                break;
            }
            t_old = Some(t);
        }
        let Some((w, t, q, tt)) = found else {
            log::warn!("PLS stopped after {a} of {requested} components: no remaining covariance");
            break;
        };
        let pl = xr.transpose() * &t / tt;
        xr -= &t * pl.transpose();
        yr -= &t * q;
        w_cols.push(w);
        p_cols.push(pl);
        q_vals.push(q);
    }

    let k = w_cols.len();
    let coefficients = if k == 0 {
        DVector::zeros(p)
    } else {
        let w = DMatrix::from_columns(&w_cols);
        let pm = DMatrix::from_columns(&p_cols);
        let q = DVector::from_vec(q_vals.clone());
        let ptw = pm.transpose() * &w;
        let inv = ptw
            .try_inverse()
            .ok_or_else(|| Error::Numerical("P'W is singular in PLS fit".into()))?;
        w * (inv * q)
    };
    let intercept = y_mean - x_mean.dot(&coefficients);
    Ok(PlsModel {
        n_components: k,
        x_mean: x_mean.iter().copied().collect(),
        y_mean,
        weights: w_cols.iter().map(|c| c.iter().copied().collect()).collect(),
        loadings: p_cols.iter().map(|c| c.iter().copied().collect()).collect(),
        y_loadings: q_vals,
        coefficients: coefficients.iter().copied().collect(),
        intercept,
        features,
    })
}

pub fn pls_predict(model: &PlsModel, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() != model.coefficients.len() {
        return Err(Error::Data(format!(
            "model expects {} inputs, got {}",
            model.coefficients.len(),
            x.ncols()
        )));
    }
    let b = DVector::from_column_slice(&model.coefficients);
    Ok((x * b).add_scalar(model.intercept))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` when the reference values are constant.
    pub r2: Option<f64>,
    pub rmse: f64,
    pub mae: f64,
}

pub fn metrics_eval(y: &[f64], y_hat: &[f64]) -> Result<Metrics> {
    if y.len() != y_hat.len() {
        return Err(Error::Data(format!(
            "{} targets but {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    if y.len() < 2 {
        return Err(Error::Data("metrics need at least two points".into()));
    }
    let n = y.len() as f64;
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    let mae = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let m = stats::mean(y);
    let sst: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
    Ok(Metrics {
        r2: (sst > 0.0).then(|| 1.0 - sse / sst),
        rmse: (sse / n).sqrt(),
        mae,
    })
}

/// A PLS model together with the scaling it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftSensor {
    pub model: PlsModel,
    pub normalization: NormalizationParams,
    pub max_delay: usize,
    /// Supervised rows (1-based, row `r` has KPI label `max_delay + r`)
    /// used for training.
    pub trained_rows: RangeInclusive<usize>,
}

impl SoftSensor {
    /// Fits on supervised rows `rows` of `ds`. Scaling is fitted on the time
    /// labels those rows touch, `1..=max_delay + rows.end()`.
    pub fn fit(
        ds: &Dataset,
        features: &FeatureSet,
        max_delay: usize,
        rows: RangeInclusive<usize>,
        n_components: usize,
    ) -> Result<Self> {
        let (start, end) = (*rows.start(), *rows.end());
        if start == 0 || end < start || max_delay + end > ds.len() {
            return Err(Error::Config(format!(
                "training rows {start}..={end} do not fit a series of length {} with max delay {max_delay}",
                ds.len()
            )));
        }
        let normalization = NormalizationParams::fit(&ds.slice_rows(1..=max_delay + end)?);
        let scaled = normalization.apply(ds)?;
        let m = build_supervised(&scaled, features, max_delay)?;
        let train = m.rows(start - 1, end - start + 1);
        let model = pls_fit(&train.inputs, &train.target, n_components, train.features)?;
        Ok(Self {
            model,
            normalization,
            max_delay,
            trained_rows: rows,
        })
    }

    /// Predicts the scaled KPI at each label of `labels`; returns
    /// `(label, actual, predicted)` rows in scaled units.
    pub fn predict_labels(&self, ds: &Dataset, labels: RangeInclusive<usize>) -> Result<Vec<PredictionRow>> {
        let first = *labels.start();
        if first <= self.max_delay || *labels.end() > ds.len() {
            return Err(Error::Config(format!(
                "labels {first}..={} outside {}..={}",
                labels.end(),
                self.max_delay + 1,
                ds.len()
            )));
        }
        let scaled = self.normalization.apply(ds)?;
        let features: FeatureSet = self.model.features.iter().copied().collect();
        let m = build_supervised(&scaled, &features, self.max_delay)?;
        let count = labels.end() - first + 1;
        let part = m.rows(first - self.max_delay - 1, count);
        let pred = pls_predict(&self.model, &part.inputs)?;
        Ok(part
            .labels
            .iter()
            .zip(part.target.iter().zip(pred.iter()))
            .map(|(&label, (&actual, &predicted))| PredictionRow {
                label,
                actual,
                predicted,
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub label: usize,
    pub actual: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<PredictionRow>,
}

/// Test segment whose targets are only reachable through [`score`], which
/// counts every access.
///
/// [`score`]: HeldOutSet::score
#[derive(Debug)]
pub struct HeldOutSet {
    data: Dataset,
    labels: RangeInclusive<usize>,
    reads: AtomicUsize,
}

impl HeldOutSet {
    /// Holds out labels `first_label..=L` of `data`. Earlier rows stay
    /// available as lag inputs.
    pub fn new(data: Dataset, first_label: usize) -> Result<Self> {
        if first_label < 2 || first_label > data.len() {
            return Err(Error::Config(format!(
                "test segment must start within 2..={}, got {first_label}",
                data.len()
            )));
        }
        let labels = first_label..=data.len();
        Ok(Self {
            data,
            labels,
            reads: AtomicUsize::new(0),
        })
    }

    pub fn labels(&self) -> RangeInclusive<usize> {
        self.labels.clone()
    }

    pub fn len(&self) -> usize {
        self.labels.end() - self.labels.start() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Rows before the test segment, safe to use for inference and selection.
    pub fn history(&self) -> Result<Dataset> {
        self.data.slice_rows(1..=self.labels.start() - 1)
    }

    pub fn score(&self, sensor: &SoftSensor) -> Result<Evaluation> {
        self.reads.fetch_add(1, Ordering::SeqCst);
        let predictions = sensor.predict_labels(&self.data, self.labels.clone())?;
        let y: Vec<f64> = predictions.iter().map(|r| r.actual).collect();
        let y_hat: Vec<f64> = predictions.iter().map(|r| r.predicted).collect();
        Ok(Evaluation {
            metrics: metrics_eval(&y, &y_hat)?,
            predictions,
        })
    }

    /// Number of times the test targets have been read.
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            mean: stats::mean(values),
            std: if values.len() > 1 { stats::std_dev(values) } else { 0.0 },
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub train_size: usize,
    pub metrics: Metrics,
    pub n_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySweep {
    pub points: Vec<SweepPoint>,
    pub rmse: Summary,
    pub mae: Summary,
    /// Over points where R² is defined.
    pub r2: Option<Summary>,
}

/// Trains one sensor per training size with `train` and scores each once on
/// the held-out set.
pub fn stability_sweep<F>(sizes: &[usize], held_out: &HeldOutSet, train: F) -> Result<StabilitySweep>
where
    F: Fn(usize) -> Result<SoftSensor> + Sync,
{
    if sizes.is_empty() {
        return Err(Error::Config("stability sweep needs at least one size".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sweep sizes must be strictly increasing".into()));
    }
    let points = sizes
        .par_iter()
        .map(|&n| {
            let sensor = train(n)?;
            let eval = held_out.score(&sensor)?;
            Ok(SweepPoint {
                train_size: n,
                metrics: eval.metrics,
                n_features: sensor.model.features.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&Metrics) -> f64| -> Vec<f64> { points.iter().map(|p| f(&p.metrics)).collect() };
    let r2: Vec<f64> = points.iter().filter_map(|p| p.metrics.r2).collect();
    Ok(StabilitySweep {
        rmse: Summary::of(&col(|m| m.rmse)).expect("non-empty"),
        mae: Summary::of(&col(|m| m.mae)).expect("non-empty"),
        r2: Summary::of(&r2),
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Nonzero differences.
    pub n: usize,
    pub r_plus: f64,
    pub r_minus: f64,
    /// Two-sided.
    pub p_value: f64,
    pub median_delta: f64,
    pub exact: bool,
}

/// Largest sample handled by exact enumeration of the null distribution.
pub const WILCOXON_EXACT_MAX: usize = 12;

/// Midranks of `|d|` (1-based), ties averaged.
pub fn signed_ranks(diffs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    let mut ranks = vec![0.0; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided exact p-value of `R+` given the (doubled, hence integral)
/// ranks, counting all `2^n` sign assignments.
pub fn wilcoxon_exact_p(doubled_ranks: &[u64], r_plus_doubled: u64) -> f64 {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let obs = r_plus_doubled as usize;
    let le: u64 = counts[..=obs].iter().sum();
    let ge: u64 = counts[obs..].iter().sum();
    let all = 2f64.powi(doubled_ranks.len() as i32);
    (2.0 * le.min(ge) as f64 / all).min(1.0)
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let all: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if all.iter().any(|d| !d.is_finite()) {
        return Err(Error::Data("non-finite paired difference".into()));
    }
    let diffs: Vec<f64> = all.iter().copied().filter(|&d| d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::Data("all paired differences are zero".into()));
    }
    let n = diffs.len();
    if n < 5 {
        return Err(Error::Data(format!(
            "signed-rank test needs at least 5 nonzero differences, got {n}"
        )));
    }
    let ranks = signed_ranks(&diffs);
    let r_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let nf = n as f64;
    let r_minus = nf * (nf + 1.0) / 2.0 - r_plus;
    let exact = n <= WILCOXON_EXACT_MAX;
    let p_value = if exact {
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        wilcoxon_exact_p(&doubled, (2.0 * r_plus).round() as u64)
    } else {
        wilcoxon_normal_p(&ranks, r_plus)
    };
    Ok(WilcoxonResult {
        n,
        r_plus,
        r_minus,
        p_value,
        median_delta: stats::median(&all),
        exact,
    })
}

/// Normal approximation with tie and continuity corrections.
pub fn wilcoxon_normal_p(ranks: &[f64], r_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((r_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    statrs::function::erf::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_linear_fit() {
        let x = DMatrix::from_fn(20, 1, |r, _| r as f64 * 0.3);
        let y = DVector::from_iterator(20, x.iter().map(|v| 2.0 * v + 1.0));
        let m = pls_fit(&x, &y, 1, vec![]).unwrap();
        let pred = pls_predict(&m, &x).unwrap();
        let met = metrics_eval(y.as_slice(), pred.as_slice()).unwrap();
        assert!((met.r2.unwrap() - 1.0).abs() < 1e-10);
        assert!((m.coefficients[0] - 2.0).abs() < 1e-12);
        assert!((m.intercept - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_target_rejected() {
        let x = DMatrix::from_fn(10, 2, |r, c| (r * (c + 1)) as f64);
        let y = DVector::from_element(10, 3.0);
        assert!(pls_fit(&x, &y, 1, vec![]).is_err());
    }

    #[test]
    fn zero_variance_column_gets_zero_weight() {
        let x = DMatrix::from_fn(30, 2, |r, c| if c == 0 { (r as f64).sin() } else { 4.0 });
        let y = DVector::from_iterator(30, (0..30).map(|r| 3.0 * (r as f64).sin()));
        let m = pls_fit(&x, &y, 2, vec![]).unwrap();
        assert_eq!(m.n_components, 1);
        assert_eq!(m.coefficients[1], 0.0);
        let one = pls_predict(&m, &x.rows(3, 1).clone_owned()).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0] - y[3]).abs() < 1e-10);
    }

    #[test]
    fn predict_shape_mismatch() {
        let x = DMatrix::from_fn(10, 2, |r, c| ((r + 1) * (c + 2)) as f64 + (r as f64).cos());
        let y = DVector::from_iterator(10, (0..10).map(|r| r as f64));
        let m = pls_fit(&x, &y, 1, vec![]).unwrap();
        assert!(pls_predict(&m, &DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = metrics_eval(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((m.rmse - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((m.mae - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.r2.unwrap() - 0.5).abs() < 1e-15);
        let p = metrics_eval(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((p.r2, p.rmse, p.mae), (Some(1.0), 0.0, 0.0));
        let mean = metrics_eval(&[1.0, 2.0, 3.0], &[2.0; 3]).unwrap();
        assert_eq!(mean.r2, Some(0.0));
        assert_eq!(metrics_eval(&[1.0, 1.0], &[1.0, 2.0]).unwrap().r2, None);
    }

    #[test]
    fn midranks() {
        assert_eq!(signed_ranks(&[1.0, -2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn wilcoxon_identities() {
        let a = [1.0, 2.5, 3.0, 4.2, 5.0, 6.1];
        let b = [1.5, 2.0, 3.2, 3.9, 5.7, 5.0];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(r.exact);
        assert_eq!(r.r_plus + r.r_minus, 21.0);
        assert!(wilcoxon_signed_rank(&a, &a).is_err());
    }

    #[test]
    fn wilcoxon_all_positive_n6() {
        // Only one assignment has R+ = 21: p = 2/64.
        let a = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let b = [1.0; 6];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.p_value, 2.0 / 64.0);
        assert_eq!(r.median_delta, 3.5);
    }

    #[test]
    fn held_out_counts_reads() {
        let n = 60;
        let y1: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7).sin()).collect();
        let x: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { 2.0 * y1[i - 1] }).collect();
        let ds = Dataset::from_columns(
            vec![
                crate::timeseries::TimeSeries::new("y1", y1).unwrap(),
                crate::timeseries::TimeSeries::new("x", x).unwrap(),
            ],
            "x",
        )
        .unwrap();
        let held = HeldOutSet::new(ds.clone(), 41).unwrap();
        let hist = held.history().unwrap();
        assert_eq!(hist.len(), 40);
        let fs: FeatureSet = [FeatureId::new(0, 1)].into_iter().collect();
        let sensor = SoftSensor::fit(&hist, &fs, 2, 1..=38, 1).unwrap();
        assert_eq!(held.reads(), 0);
        let ev = held.score(&sensor).unwrap();
        assert_eq!(held.reads(), 1);
        assert_eq!(ev.predictions.len(), 20);
        assert_eq!(ev.predictions[0].label, 41);
        assert!(ev.metrics.rmse < 1e-9);
    }
}
