//! Posterior predictive checks on study residuals.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_data::{AgeGroup, Coverage};
use crate::inference::ols_slope;
use crate::model::ModelData;
use crate::sampler::PosteriorDraws;

use super::predictive_row_mean;

/// Residuals are `y` minus the row mean with the study effect set to zero, so
/// each statistic sees study-effect, residual and sampling variation together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpcStatistic {
    /// Mean squared residual within each coverage class.
    ClassResidualVariance,
    /// Mean residual within each age band.
    AgeGroupMeanResidual,
    /// Mean residual within each subregion.
    SubregionMeanResidual,
    /// OLS slope of residuals on year within each age band.
    AgeGroupTimeTrend,
}

impl PpcStatistic {
    pub const ALL: [PpcStatistic; 4] = [
        PpcStatistic::ClassResidualVariance,
        PpcStatistic::AgeGroupMeanResidual,
        PpcStatistic::SubregionMeanResidual,
        PpcStatistic::AgeGroupTimeTrend,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PpcStatistic::ClassResidualVariance => "class_residual_variance",
            PpcStatistic::AgeGroupMeanResidual => "age_group_mean_residual",
            PpcStatistic::SubregionMeanResidual => "subregion_mean_residual",
            PpcStatistic::AgeGroupTimeTrend => "age_group_time_trend",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcResult {
    pub statistic: PpcStatistic,
    /// Class, age band or subregion the value refers to.
    pub group: String,
    /// Posterior mean of the observed statistic.
    pub observed: f64,
    pub replicated: f64,
    /// Fraction of draws where the replicated statistic exceeds the observed one.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcReport {
    pub n_draws: usize,
    pub results: Vec<PpcResult>,
}

impl PpcReport {
    pub fn all_within(&self, lo: f64, hi: f64) -> bool {
        self.results.iter().all(|r| r.p_value > lo && r.p_value < hi)
    }

    pub fn min_p(&self, statistic: PpcStatistic) -> Option<f64> {
        self.results
            .iter()
            .filter(|r| r.statistic == statistic)
            .map(|r| r.p_value)
            .min_by(f64::total_cmp)
    }

    pub fn summary_text(&self) -> String {
        let mut s = format!("{:<26} {:<22} {:>10} {:>10} {:>7}\n", "statistic", "group", "observed", "replicated", "p");
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<26} {:<22} {:>10.4} {:>10.4} {:>7.3}",
                r.statistic.name(),
                r.group,
                r.observed,
                r.replicated,
                r.p_value
            );
        }
        s
    }
}

/// Index of the band whose midpoint is nearest to `z`.
fn band_of(bands: &[AgeGroup], z: f64) -> usize {
    bands
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1.midpoint() - z).abs().total_cmp(&(b.1.midpoint() - z).abs()))
        .map(|(i, _)| i)
        .expect("non-empty bands")
}

struct Layout {
    class: Vec<usize>,
    band: Vec<usize>,
    subregion: Vec<usize>,
    tc: Vec<f64>,
}

/// One group's statistic per entry; `None` for groups without rows.
fn evaluate(stat: PpcStatistic, lay: &Layout, r: &[f64], n_bands: usize, n_sub: usize) -> Vec<Option<f64>> {
    let grouped = |key: &[usize], n: usize, f: &dyn Fn(&[usize]) -> Option<f64>| -> Vec<Option<f64>> {
        let mut idx = vec![Vec::new(); n];
        for (i, &k) in key.iter().enumerate() {
            idx[k].push(i);
        }
        idx.iter().map(|rows| if rows.is_empty() { None } else { f(rows) }).collect()
    };
    let mean = |rows: &[usize]| Some(rows.iter().map(|&i| r[i]).sum::<f64>() / rows.len() as f64);
    match stat {
        PpcStatistic::ClassResidualVariance => grouped(&lay.class, 4, &|rows| {
            Some(rows.iter().map(|&i| r[i] * r[i]).sum::<f64>() / rows.len() as f64)
        }),
        PpcStatistic::AgeGroupMeanResidual => grouped(&lay.band, n_bands, &mean),
        PpcStatistic::SubregionMeanResidual => grouped(&lay.subregion, n_sub, &mean),
        PpcStatistic::AgeGroupTimeTrend => grouped(&lay.band, n_bands, &|rows| {
            let x: Vec<f64> = rows.iter().map(|&i| lay.tc[i]).collect();
            let y: Vec<f64> = rows.iter().map(|&i| r[i]).collect();
            ols_slope(&x, &y)
        }),
    }
}

fn group_label(stat: PpcStatistic, g: usize, bands: &[AgeGroup]) -> String {
    match stat {
        PpcStatistic::ClassResidualVariance => Coverage::ALL[g].as_str().to_string(),
        PpcStatistic::AgeGroupMeanResidual | PpcStatistic::AgeGroupTimeTrend => bands[g].label(),
        PpcStatistic::SubregionMeanResidual => format!("subregion {g}"),
    }
}

/// Posterior predictive p-values. Replicates reuse every study's design row,
/// age rows and sampling variance, drawing a fresh study effect and residual
/// per draw; draw `d` uses substream `d` of `seed`. Age rows are assigned to
/// the band with the nearest midpoint.
pub fn posterior_predictive_check(
    data: &ModelData,
    draws: &PosteriorDraws,
    statistics: &[PpcStatistic],
    bands: &[AgeGroup],
    seed: u64,
) -> Result<PpcReport> {
    if statistics.is_empty() {
        return Ok(PpcReport {
            n_draws: draws.n_draws(),
            results: Vec::new(),
        });
    }
    if draws.n_draws() == 0 {
        return Err(Error::InvalidArgument("posterior predictive check needs draws".into()));
    }
    if bands.is_empty() {
        return Err(Error::InvalidArgument("no age bands for the age statistics".into()));
    }
    if data.n_rows() == 0 {
        return Err(Error::InvalidArgument("no observed rows to check".into()));
    }
    let mut lay = Layout {
        class: Vec::new(),
        band: Vec::new(),
        subregion: Vec::new(),
        tc: Vec::new(),
    };
    let mut y = Vec::new();
    for s in &data.studies {
        for row in &s.rows {
            lay.class.push(s.class.index());
            lay.band.push(band_of(bands, row.z));
            lay.subregion.push(s.subregion);
            lay.tc.push(s.tc);
            y.push(row.y);
        }
    }
    let n_sub = data.dims.subregions;
    let all: Vec<_> = draws.iter().collect();
    // per draw, per statistic: (observed, replicated) per group
    type Pairs = Vec<Vec<Option<(f64, f64)>>>;
    let per_draw: Vec<Pairs> = all
        .par_iter()
        .enumerate()
        .map(|(d, draw)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d as u64);
            let mut obs = Vec::with_capacity(y.len());
            let mut rep = Vec::with_capacity(y.len());
            for s in &data.studies {
                let cls = s.class.index();
                let z: f64 = StandardNormal.sample(&mut rng);
                let e = draw.hypers.nu[cls].sqrt() * z;
                for (h, row) in s.rows.iter().enumerate() {
                    let base = predictive_row_mean(&draw.state, s, h, 0.0);
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let y_rep = predictive_row_mean(&draw.state, s, h, e)
                        + (draw.hypers.tau2[cls] + row.sampling_var).sqrt() * noise;
                    obs.push(row.y - base);
                    rep.push(y_rep - base);
                }
            }
            statistics
                .iter()
                .map(|&st| {
                    let o = evaluate(st, &lay, &obs, bands.len(), n_sub);
                    let r = evaluate(st, &lay, &rep, bands.len(), n_sub);
                    o.into_iter().zip(r).map(|(a, b)| a.zip(b)).collect()
                })
                .collect()
        })
        .collect();
    let n = all.len() as f64;
    let mut results = Vec::new();
    for (si, &st) in statistics.iter().enumerate() {
        for g in 0..per_draw[0][si].len() {
            if per_draw[0][si][g].is_none() {
                continue;
            }
            let pairs: Vec<(f64, f64)> = per_draw.iter().filter_map(|p| p[si][g]).collect();
            results.push(PpcResult {
                statistic: st,
                group: group_label(st, g, bands),
                observed: pairs.iter().map(|p| p.0).sum::<f64>() / n,
                replicated: pairs.iter().map(|p| p.1).sum::<f64>() / n,
                p_value: pairs.iter().filter(|p| p.1 > p.0).count() as f64 / n,
            });
        }
    }
    Ok(PpcReport {
        n_draws: all.len(),
        results,
    })
}
