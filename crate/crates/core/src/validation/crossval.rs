//! Masked-study cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_data::{Coverage, Dataset};
use crate::inference::quantile_sorted;
use crate::model::ModelData;
use crate::sampler::{run_chains, PosteriorDraws, SamplerConfig};

use super::predictive_row_mean;

pub const DEFAULT_MASK_FRACTION: f64 = 0.2;

/// Picks `round(fraction · n)` whole studies to hold out, deterministically in
/// `seed`. Unless `allow_empty_levels`, a study is skipped when removing it
/// would leave a subregion that had data with none.
pub fn mask_studies(dataset: &Dataset, fraction: f64, seed: u64, allow_empty_levels: bool) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::InvalidArgument(format!("mask fraction {fraction} outside (0, 0.5]")));
    }
    let n = dataset.studies.len();
    let target = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let h = &dataset.hierarchy;
    let mut left = vec![0usize; h.n_subregions()];
    for s in &dataset.studies {
        left[h.subregion_of(s.country)] += 1;
    }
    let mut masked = vec![false; n];
    let mut count = 0;
    for i in order {
        if count == target {
            break;
        }
        let k = h.subregion_of(dataset.studies[i].country);
        if !allow_empty_levels && left[k] == 1 {
            continue;
        }
        left[k] -= 1;
        masked[i] = true;
        count += 1;
    }
    Ok(masked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedPrediction {
    pub study_id: String,
    pub coverage: Coverage,
    pub age_lo: f64,
    pub age_hi: f64,
    pub observed: f64,
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub mask_fraction: f64,
    pub seed: u64,
    pub n_masked_studies: usize,
    pub n_masked_rows: usize,
    /// Likelihood rows used by the refit.
    pub n_fit_rows: usize,
    pub coverage: f64,
    pub mean_width: f64,
    pub predictions: Vec<MaskedPrediction>,
}

impl CrossValidationReport {
    fn empty(mask_fraction: f64, seed: u64, n_fit_rows: usize) -> Self {
        Self {
            mask_fraction,
            seed,
            n_masked_studies: 0,
            n_masked_rows: 0,
            n_fit_rows,
            coverage: f64::NAN,
            mean_width: f64::NAN,
            predictions: Vec::new(),
        }
    }

    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.coverage >= lo && self.coverage <= hi
    }

    pub fn summary_text(&self) -> String {
        format!(
            "masked studies: {}\nmasked rows: {}\nrows used in refit: {}\n95% interval coverage: {:.3}\nmean interval width: {:.3}\n",
            self.n_masked_studies, self.n_masked_rows, self.n_fit_rows, self.coverage, self.mean_width
        )
    }
}

/// 95% predictive intervals for every row of `masked` studies: a fresh study
/// effect for the study's class, then the class residual variance plus the
/// row's sampling variance.
pub fn predict_masked(held: &Dataset, draws: &PosteriorDraws, seed: u64) -> Result<Vec<MaskedPrediction>> {
    let masked = ModelData::new(held)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, s) in masked.studies.iter().enumerate() {
        let cls = s.class.index();
        // one study effect per draw, shared by the study's rows
        let per_draw: Vec<Vec<f64>> = draws
            .iter()
            .map(|d| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let e = d.hypers.nu[cls].sqrt() * z;
                (0..s.rows.len())
                    .map(|h| {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        predictive_row_mean(&d.state, s, h, e)
                            + (d.hypers.tau2[cls] + s.rows[h].sampling_var).sqrt() * noise
                    })
                    .collect()
            })
            .collect();
        for (h, row) in s.rows.iter().enumerate() {
            let mut v: Vec<f64> = per_draw.iter().map(|r| r[h]).collect();
            v.sort_by(f64::total_cmp);
            let lo = quantile_sorted(&v, 0.025);
            let hi = quantile_sorted(&v, 0.975);
            let rec = &held.studies[i];
            out.push(MaskedPrediction {
                study_id: rec.study_id.clone(),
                coverage: s.class,
                age_lo: rec.rows[h].age_lo,
                age_hi: rec.rows[h].age_hi,
                observed: row.y,
                mean: v.iter().sum::<f64>() / v.len() as f64,
                lo95: lo,
                hi95: hi,
                covered: lo <= row.y && row.y <= hi,
            });
        }
    }
    Ok(out)
}

/// Holds out a random `mask_fraction` of whole studies, refits on the rest and
/// scores the held-out age-row means against 95% predictive intervals.
pub fn cross_validate(dataset: &Dataset, config: &SamplerConfig, mask_fraction: f64, allow_empty_levels: bool) -> Result<CrossValidationReport> {
    if mask_fraction == 0.0 {
        return Ok(CrossValidationReport::empty(mask_fraction, config.seed, 0));
    }
    let mask = mask_studies(dataset, mask_fraction, config.seed, allow_empty_levels)?;
    let n_masked = mask.iter().filter(|m| **m).count();
    if n_masked == 0 {
        return Ok(CrossValidationReport::empty(mask_fraction, config.seed, 0));
    }
    let keep: Vec<bool> = mask.iter().map(|m| !m).collect();
    let train = ModelData::new(&dataset.subset(&keep))?;
    let draws = run_chains(&train, config)?;
    let predictions = predict_masked(&dataset.subset(&mask), &draws, config.seed ^ 0x5eed)?;
    let n = predictions.len() as f64;
    Ok(CrossValidationReport {
        mask_fraction,
        seed: config.seed,
        n_masked_studies: n_masked,
        n_masked_rows: predictions.len(),
        n_fit_rows: train.n_rows(),
        coverage: predictions.iter().filter(|p| p.covered).count() as f64 / n,
        mean_width: predictions.iter().map(|p| p.hi95 - p.lo95).sum::<f64>() / n,
        predictions,
    })
}
