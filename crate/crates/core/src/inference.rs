//! The causal-inference stage: TDCCM for every ordered pair, delay
//! resolution, then TDPCM of every auxiliary variable on the KPI conditioned
//! on the other auxiliaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossmap::{tdccm_curve, CausalCurve, CrossMapper, NeighborOptions};
use crate::embedding::{embed, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::partial::{
    optimal_delay, path_delay, tdpcm_curve, tdpcm_optimal_delay, unscreened_delay, DelayChoice,
    Disturber, TdpcmCurve,
};
use crate::timeseries::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub embedding: EmbeddingConfig,
    /// Largest nonnegative delay `d`.
    pub max_delay: usize,
    /// Number of negative delays scanned for synchrony.
    pub neg_window: usize,
    /// When false, synchrony-flagged pairs take the plain arg-max delay from
    /// lag 1 and synchrony-flagged disturbers stay in the conditioning set.
    pub synchrony_filter: bool,
    #[serde(default)]
    pub neighbors: NeighborOptions,
}

impl InferenceConfig {
    pub fn new(embedding: EmbeddingConfig, max_delay: usize, neg_window: usize) -> Self {
        Self {
            embedding,
            max_delay,
            neg_window,
            synchrony_filter: true,
            neighbors: NeighborOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDelay {
    pub cause: String,
    pub effect: String,
    #[serde(flatten)]
    pub choice: DelayChoice,
}

/// `ξ^X_YZ`: delay of `cause → disturber` along the path to `effect`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathDelay {
    pub cause: String,
    pub disturber: String,
    pub effect: String,
    pub delay: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub cause: String,
    pub disturber: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayResolution {
    /// TDCCM delays of each auxiliary on the KPI, in column order.
    pub to_kpi: Vec<PairDelay>,
    pub paths: Vec<PathDelay>,
    /// TDPCM delays `γ_YX` of each auxiliary on the KPI.
    pub direct: Vec<PairDelay>,
}

/// Everything computed by the inference stage. Auxiliary entries follow
/// the dataset's column order (KPI omitted).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalAnalysis {
    pub config: InferenceConfig,
    pub kpi: String,
    pub aux_vars: Vec<usize>,
    pub aux_names: Vec<String>,
    pub tdccm: Vec<CausalCurve>,
    /// `pair_curves[j][k]` is the curve of aux j → aux k (`None` on the
    /// diagonal).
    pub pair_curves: Vec<Vec<Option<CausalCurve>>>,
    pub tdpcm: Vec<TdpcmCurve>,
    pub resolution: DelayResolution,
    pub exclusions: Vec<Exclusion>,
}

fn undefined_curve(cause: &str, effect: &str, cfg: &InferenceConfig, len: usize, first: isize) -> CausalCurve {
    let count = (cfg.max_delay as isize - first + 1) as usize;
    CausalCurve {
        cause: cause.to_string(),
        effect: effect.to_string(),
        first_delay: first,
        strengths: vec![None; count],
        dim: cfg.embedding.dim,
        tau: cfg.embedding.tau,
        series_len: len,
    }
}

pub fn analyze(ds: &Dataset, cfg: &InferenceConfig) -> Result<CausalAnalysis> {
    if ds.kpi().is_constant() {
        return Err(Error::ConstantSeries(ds.kpi().name().to_string()));
    }
    let len = ds.len();
    let kpi = ds.kpi_index();
    let kpi_name = ds.kpi().name().to_string();
    let aux: Vec<usize> = ds.aux_indices().collect();
    let names: Vec<String> = aux.iter().map(|&i| ds.column(i).name().to_string()).collect();
    let constant: Vec<bool> = aux.iter().map(|&i| ds.column(i).is_constant()).collect();
    for (n, _) in names.iter().zip(&constant).filter(|(_, c)| **c) {
        log::warn!("auxiliary {n:?} is constant; its causal strengths are undefined");
    }

    // One mapper per column (None for constants).
    let mappers: Vec<Option<CrossMapper>> = ds
        .columns()
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            if i != kpi && c.is_constant() {
                return Ok(None);
            }
            let m = embed(c, cfg.embedding)?;
            CrossMapper::with_options(m, cfg.neighbors).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    let kpi_mapper = mappers[kpi].as_ref().expect("KPI is not constant");
    let first = -(cfg.neg_window as isize);

    let tdccm = aux
        .par_iter()
        .enumerate()
        .map(|(j, &col)| {
            if constant[j] {
                return Ok(undefined_curve(&names[j], &kpi_name, cfg, len, first));
            }
            tdccm_curve(kpi_mapper, ds.column(col), cfg.max_delay, cfg.neg_window)
        })
        .collect::<Result<Vec<_>>>()?;

    let pairs: Vec<(usize, usize)> = (0..aux.len())
        .flat_map(|j| (0..aux.len()).filter(move |&k| k != j).map(move |k| (j, k)))
        .collect();
    let pair_results = pairs
        .par_iter()
        .map(|&(j, k)| {
            if constant[j] || constant[k] {
                return Ok(undefined_curve(&names[j], &names[k], cfg, len, first));
            }
            let mapper = mappers[aux[k]].as_ref().expect("non-constant");
            tdccm_curve(mapper, ds.column(aux[j]), cfg.max_delay, cfg.neg_window)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pair_curves: Vec<Vec<Option<CausalCurve>>> = vec![vec![None; aux.len()]; aux.len()];
    for ((j, k), c) in pairs.into_iter().zip(pair_results) {
        pair_curves[j][k] = Some(c);
    }

    let to_kpi: Vec<PairDelay> = tdccm
        .iter()
        .map(|c| {
            let screened = optimal_delay(c);
            let choice = if !cfg.synchrony_filter && screened.synchrony {
                DelayChoice {
                    synchrony: true,
                    ..unscreened_delay(c)
                }
            } else {
                screened
            };
            PairDelay {
                cause: c.cause.clone(),
                effect: c.effect.clone(),
                choice,
            }
        })
        .collect();

    let mut paths = Vec::new();
    let mut exclusions = Vec::new();
    let mut plans: Vec<Vec<(usize, usize)>> = Vec::with_capacity(aux.len());
    for j in 0..aux.len() {
        let mut plan = Vec::new();
        for k in (0..aux.len()).filter(|&k| k != j) {
            let reason = if constant[j] {
                Some("cause is constant".to_string())
            } else if constant[k] {
                Some("disturber is constant".to_string())
            } else if to_kpi[j].choice.delay.is_none() {
                Some("cause has no nonnegative local maximum on the KPI".to_string())
            } else if cfg.synchrony_filter && to_kpi[k].choice.synchrony {
                Some("disturber's strength on the KPI peaks at a negative delay".to_string())
            } else {
                None
            };
            if let Some(reason) = reason {
                exclusions.push(Exclusion {
                    cause: names[j].clone(),
                    disturber: names[k].clone(),
                    reason,
                });
                continue;
            }
            let xi = to_kpi[j].choice.delay.expect("checked above");
            let curve = pair_curves[j][k].as_ref().expect("off-diagonal");
            match path_delay(curve, xi) {
                Some(delay) => {
                    paths.push(PathDelay {
                        cause: names[j].clone(),
                        disturber: names[k].clone(),
                        effect: kpi_name.clone(),
                        delay,
                    });
                    plan.push((k, delay));
                }
                None => exclusions.push(Exclusion {
                    cause: names[j].clone(),
                    disturber: names[k].clone(),
                    reason: format!("no local maximum of the cause→disturber curve within 0..={xi}"),
                }),
            }
        }
        plans.push(plan);
    }
    for e in &exclusions {
        log::debug!("{} | excluding {}: {}", e.cause, e.disturber, e.reason);
    }

    let tdpcm = (0..aux.len())
        .into_par_iter()
        .map(|j| {
            if constant[j] {
                let curve = undefined_curve(&names[j], &kpi_name, cfg, len, 0);
                let n = curve.len();
                return Ok(TdpcmCurve {
                    curve,
                    ridge: vec![0.0; n],
                    clamped: vec![0; n],
                    conditioned_on: Vec::new(),
                });
            }
            let disturbers: Vec<Disturber<'_>> = plans[j]
                .iter()
                .map(|&(k, delay)| Disturber {
                    mapper: mappers[aux[k]].as_ref().expect("non-constant"),
                    path_delay: delay,
                })
                .collect();
            let xi = to_kpi[j].choice.delay.unwrap_or(0);
            tdpcm_curve(kpi_mapper, ds.column(aux[j]), &disturbers, xi, cfg.max_delay)
        })
        .collect::<Result<Vec<_>>>()?;

    let direct = tdpcm
        .iter()
        .zip(&to_kpi)
        .map(|(t, pair)| {
            let choice = if !cfg.synchrony_filter && pair.choice.synchrony {
                DelayChoice {
                    synchrony: true,
                    ..unscreened_delay(&t.curve)
                }
            } else {
                let delay = tdpcm_optimal_delay(&t.curve);
                DelayChoice {
                    delay,
                    strength: delay.and_then(|d| t.curve.at(d as isize)),
                    synchrony: pair.choice.synchrony,
                }
            };
            PairDelay {
                cause: t.curve.cause.clone(),
                effect: t.curve.effect.clone(),
                choice,
            }
        })
        .collect();

    Ok(CausalAnalysis {
        config: *cfg,
        kpi: kpi_name,
        aux_vars: aux,
        aux_names: names,
        tdccm,
        pair_curves,
        tdpcm,
        resolution: DelayResolution {
            to_kpi,
            paths,
            direct,
        },
        exclusions,
    })
}

impl CausalAnalysis {
    /// Position of an auxiliary variable by name.
    pub fn aux_position(&self, name: &str) -> Option<usize> {
        self.aux_names.iter().position(|n| n == name)
    }

    pub fn tdccm_of(&self, name: &str) -> Option<&CausalCurve> {
        self.aux_position(name).map(|j| &self.tdccm[j])
    }

    pub fn tdpcm_of(&self, name: &str) -> Option<&CausalCurve> {
        self.aux_position(name).map(|j| &self.tdpcm[j].curve)
    }
}
