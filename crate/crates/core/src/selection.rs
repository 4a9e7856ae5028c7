//! Threshold-driven causal feature selection: candidate thresholds, the
//! contiguous lag window per variable, and validation-scored optimisation of
//! the threshold.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossmap::CausalCurve;
use crate::error::{Error, Result};
use crate::inference::CausalAnalysis;
use crate::soft_sensor::{metrics_eval, pls_fit, pls_predict};
use crate::timeseries::{build_supervised, Dataset, FeatureId, FeatureSet, NormalizationParams, SplitSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Tdccm,
    Tdpcm,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tdccm" => Ok(Mode::Tdccm),
            "tdpcm" => Ok(Mode::Tdpcm),
            _ => Err(Error::Config(format!("unknown mode {s:?}; expected tdccm or tdpcm"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Tdccm => "tdccm",
            Mode::Tdpcm => "tdpcm",
        })
    }
}

/// One auxiliary variable's strength curve and its causal influence delay
/// `δ` (`None` for non-causal variables).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableCurve {
    /// Column index in the dataset.
    pub var: usize,
    pub name: String,
    pub curve: CausalCurve,
    pub delay: Option<usize>,
}

/// Curves and delays driving selection in the given mode.
pub fn selection_curves(analysis: &CausalAnalysis, mode: Mode) -> Vec<VariableCurve> {
    (0..analysis.aux_names.len())
        .map(|j| {
            let (curve, delay) = match mode {
                Mode::Tdccm => (&analysis.tdccm[j], analysis.resolution.to_kpi[j].choice.delay),
                Mode::Tdpcm => (&analysis.tdpcm[j].curve, analysis.resolution.direct[j].choice.delay),
            };
            VariableCurve {
                var: analysis.aux_vars[j],
                name: analysis.aux_names[j].clone(),
                curve: curve.clone(),
                delay,
            }
        })
        .collect()
}

/// Sorted, deduplicated candidate thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThresholdCandidates(pub Vec<f64>);

impl ThresholdCandidates {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

const DEDUP_TOL: f64 = 1e-12;

fn lag_strengths(curve: &CausalCurve, d: usize) -> impl Iterator<Item = f64> + '_ {
    (1..=d as isize).filter_map(|g| curve.at(g))
}

/// `count` evenly spaced values from the lowest to the highest strength over
/// lags `1..=d`, plus each variable's own maximum.
pub fn build_threshold_candidates(curves: &[VariableCurve], d: usize, count: usize) -> Result<ThresholdCandidates> {
    if count < 2 {
        return Err(Error::Config(format!("need at least 2 threshold candidates, got {count}")));
    }
    let maxima: Vec<f64> = curves
        .iter()
        .filter_map(|c| lag_strengths(&c.curve, d).reduce(f64::max))
        .collect();
    let lo = curves
        .iter()
        .flat_map(|c| lag_strengths(&c.curve, d))
        .reduce(f64::min)
        .ok_or_else(|| Error::Data("every causal strength is undefined".into()))?;
    let hi = maxima.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let step = (hi - lo) / (count - 1) as f64;
    let mut values: Vec<f64> = (0..count)
        .map(|i| if i + 1 == count { hi } else { lo + step * i as f64 })
        .chain(maxima)
        .collect();
    values.sort_by(f64::total_cmp);
    values.dedup_by(|b, a| (*b - *a).abs() <= DEDUP_TOL);
    Ok(ThresholdCandidates(values))
}

/// Lags of one variable: contiguous from `max(δ, 1)` while the strength stays
/// at or above `threshold`, plus up to `extension` lags just before `δ` when
/// that window is non-empty.
pub fn lag_window(vc: &VariableCurve, threshold: f64, d: usize, extension: usize) -> Vec<usize> {
    let Some(delta) = vc.delay else {
        return Vec::new();
    };
    let start = delta.max(1);
    let mut lags: Vec<usize> = (start..=d)
        .take_while(|&g| vc.curve.at(g as isize).is_some_and(|s| s >= threshold))
        .collect();
    if !lags.is_empty() && extension > 0 && delta > 1 {
        let pre = delta.saturating_sub(extension).max(1)..delta;
        lags.splice(0..0, pre);
    }
    lags
}

pub fn select_features_for_threshold(curves: &[VariableCurve], threshold: f64, d: usize, extension: usize) -> FeatureSet {
    curves
        .iter()
        .flat_map(|vc| {
            lag_window(vc, threshold, d, extension)
                .into_iter()
                .map(move |lag| FeatureId::new(vc.var, lag))
        })
        .collect()
}

/// Checks `F(c_high) ⊆ F(c_low)`.
pub fn monotonicity_check(curves: &[VariableCurve], c_low: f64, c_high: f64, d: usize, extension: usize) -> Result<()> {
    if c_low > c_high {
        return Err(Error::Config(format!("c_low {c_low} exceeds c_high {c_high}")));
    }
    let low = select_features_for_threshold(curves, c_low, d, extension);
    let high = select_features_for_threshold(curves, c_high, d, extension);
    if high.is_subset(&low) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "feature set at {c_high} is not contained in the set at {c_low}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub max_delay: usize,
    pub n_components: usize,
    pub pre_delay_extension: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub threshold: f64,
    /// Validation RMSE; `None` stands for +∞ (empty feature set).
    pub rmse: Option<f64>,
    pub n_features: usize,
}

impl CandidateScore {
    pub fn score(&self) -> f64 {
        self.rmse.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableDelay {
    pub name: String,
    pub var: usize,
    pub delay: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub mode: Mode,
    pub c_best: f64,
    pub scores: Vec<CandidateScore>,
    pub features: FeatureSet,
    pub delays: Vec<VariableDelay>,
    pub split: SplitSpec,
}

/// Scores every candidate threshold by validation RMSE of a PLS model trained
/// on the training rows. `ds` must exclude the test segment; `split` indexes
/// supervised rows (row `r` predicts label `max_delay + r`). Scaling is fitted
/// on the labels the training rows touch.
pub fn optimize_threshold(
    ds: &Dataset,
    curves: &[VariableCurve],
    candidates: &ThresholdCandidates,
    split: SplitSpec,
    mode: Mode,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    let d = cfg.max_delay;
    if ds.len() <= d {
        return Err(Error::TooShort {
            name: ds.kpi().name().to_string(),
            len: ds.len(),
            reason: format!("need more than max delay {d} points"),
        });
    }
    split.validate(ds.len() - d)?;
    if candidates.is_empty() {
        return Err(Error::Config("no threshold candidates".into()));
    }
    let params = NormalizationParams::fit(&ds.slice_rows(1..=d + split.train_end)?);
    let scaled = params.apply(ds)?;
    let sets: Vec<FeatureSet> = candidates
        .values()
        .iter()
        .map(|&c| select_features_for_threshold(curves, c, d, cfg.pre_delay_extension))
        .collect();

    // Identical feature sets share one fit.
    let mut unique: Vec<&FeatureSet> = Vec::new();
    let mut slot: HashMap<&FeatureSet, usize> = HashMap::new();
    for s in sets.iter().filter(|s| !s.is_empty()) {
        slot.entry(s).or_insert_with(|| {
            unique.push(s);
            unique.len() - 1
        });
    }
    let train_rows = split.train_end;
    let val_rows = split.validation_end - split.train_end;
    let rmses = unique
        .par_iter()
        .map(|fs| {
            let m = build_supervised(&scaled, fs, d)?;
            let train = m.rows(0, train_rows);
            let val = m.rows(train_rows, val_rows);
            let model = pls_fit(&train.inputs, &train.target, cfg.n_components, train.features)?;
            let pred = pls_predict(&model, &val.inputs)?;
            Ok(metrics_eval(val.target.as_slice(), pred.as_slice())?.rmse)
        })
        .collect::<Result<Vec<f64>>>()?;

    let scores: Vec<CandidateScore> = candidates
        .values()
        .iter()
        .zip(&sets)
        .map(|(&threshold, s)| CandidateScore {
            threshold,
            rmse: slot.get(s).map(|&i| rmses[i]),
            n_features: s.len(),
        })
        .collect();
    // Ascending thresholds: `<=` keeps the larger one on ties.
    let best = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.rmse.is_some())
        .fold(None::<usize>, |acc, (i, s)| match acc {
            Some(a) if scores[a].score() < s.score() => Some(a),
            _ => Some(i),
        })
        .ok_or_else(|| Error::Data("every threshold candidate selects an empty feature set".into()))?;

    Ok(SelectionResult {
        mode,
        c_best: scores[best].threshold,
        features: sets[best].clone(),
        scores,
        delays: curves
            .iter()
            .map(|c| VariableDelay {
                name: c.name.clone(),
                var: c.var,
                delay: c.delay,
            })
            .collect(),
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vc(var: usize, first: isize, vals: &[f64], delay: Option<usize>) -> VariableCurve {
        VariableCurve {
            var,
            name: format!("v{var}"),
            curve: CausalCurve {
                cause: format!("v{var}"),
                effect: "x".into(),
                first_delay: first,
                strengths: vals.iter().map(|&v| Some(v)).collect(),
                dim: 2,
                tau: 1,
                series_len: 100,
            },
            delay,
        }
    }

    #[test]
    fn candidates_example() {
        // Var 0 spans [0.2, 0.8]; var 1 peaks at 0.5.
        let a = vc(0, 0, &[0.9, 0.2, 0.8, 0.4], Some(2));
        let b = vc(1, 0, &[0.1, 0.3, 0.5, 0.4], Some(2));
        let c = build_threshold_candidates(&[a, b], 3, 4).unwrap();
        let want = [0.2, 0.4, 0.5, 0.6, 0.8];
        assert_eq!(c.len(), want.len());
        for (x, y) in c.values().iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(*c.values().last().unwrap(), 0.8);
    }

    #[test]
    fn constant_curve_collapses() {
        let a = vc(0, 0, &[0.7; 6], None);
        assert_eq!(build_threshold_candidates(&[a], 5, 20).unwrap().0, vec![0.7]);
    }

    #[test]
    fn undefined_everywhere_is_an_error() {
        let mut a = vc(0, 0, &[0.7; 3], None);
        a.curve.strengths = vec![None; 3];
        assert!(build_threshold_candidates(&[a], 2, 4).is_err());
    }

    #[test]
    fn plateau_window() {
        let vals: Vec<f64> = (0..=20).map(|g| if (3..=10).contains(&g) { 0.9 } else { 0.1 }).collect();
        let a = vc(0, 0, &vals, Some(3));
        assert_eq!(lag_window(&a, 0.5, 20, 0), (3..=10).collect::<Vec<_>>());
        assert_eq!(lag_window(&a, 0.95, 20, 0), Vec::<usize>::new());
        assert_eq!(lag_window(&a, 0.5, 20, 5), (1..=10).collect::<Vec<_>>());
        assert_eq!(lag_window(&a, 0.5, 20, 1), (2..=10).collect::<Vec<_>>());
        assert_eq!(lag_window(&a, 0.5, 6, 0), (3..=6).collect::<Vec<_>>());
    }

    #[test]
    fn stops_at_first_dip_and_skips_lag_zero() {
        let a = vc(0, 0, &[0.9, 0.9, 0.9, 0.2, 0.9, 0.9], Some(0));
        assert_eq!(lag_window(&a, 0.5, 5, 0), vec![1, 2]);
        let none = vc(1, 0, &[0.9; 6], None);
        assert!(lag_window(&none, 0.1, 5, 3).is_empty());
    }

    #[test]
    fn nested_sets() {
        let a = vc(0, 0, &[0.1, 0.6, 0.5, 0.3, 0.7, 0.2], Some(1));
        let b = vc(2, 0, &[0.0, 0.1, 0.8, 0.75, 0.4, 0.3], Some(2));
        let cs = [a, b];
        monotonicity_check(&cs, 0.3, 0.6, 5, 0).unwrap();
        monotonicity_check(&cs, 0.4, 0.4, 5, 2).unwrap();
        assert!(monotonicity_check(&cs, 0.6, 0.3, 5, 0).is_err());
    }
}
