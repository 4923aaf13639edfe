//! Synthetic data with known truth, posterior predictive checks, masked
//! cross-validation and parameter-recovery studies.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_data::{
    AgeGroup, AgeRow, Coverage, CovariateTable, CovariateValues, Dataset, GeoHierarchy, InputPaths, PopulationTable,
    StudyRecord, Window, N_DESIGN, SMOOTHING_WIDTH,
};
use crate::model::{mean_function, HyperParams, ModelData, ParamState, StudyObs, N_AGE_BASIS};
use crate::sampler::blocks::u_conditional;

pub mod crossval;
pub mod ppc;
pub mod recovery;

pub use crossval::{cross_validate, mask_studies, CrossValidationReport, MaskedPrediction, DEFAULT_MASK_FRACTION};
pub use ppc::{posterior_predictive_check, PpcReport, PpcResult, PpcStatistic};
pub use recovery::{recover_parameters, RecoveryReport, RecoveryTarget, TargetRecovery};

/// Mean of row `h` of study `s` with study effect `e` in place of the sampled one.
pub fn predictive_row_mean(state: &ParamState, s: &StudyObs, h: usize, e: f64) -> f64 {
    let mu = state.level(s.country, s.subregion, s.region, s.t, s.tc, &s.x) + e;
    let gamma = state.gamma(s.country, mu);
    mu + s.rows[h].basis.iter().zip(&gamma).map(|(b, g)| b * g).sum::<f64>()
}

/// Effects whose priors are flat or nearly so; the simulator takes them as given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedTruth {
    pub a_g: f64,
    pub b_g: f64,
    pub beta: [f64; N_DESIGN],
    pub psi: [f64; N_AGE_BASIS],
    pub phi: [f64; N_AGE_BASIS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_countries: usize,
    pub n_subregions: usize,
    pub n_regions: usize,
    pub window: Window,
    /// Age groups used for population counts and standardization.
    pub age_groups: Vec<AgeGroup>,
    pub standard_weights: Vec<f64>,
    /// Age-row layouts a study may report; each study picks one at random.
    pub age_schemes: Vec<Vec<AgeGroup>>,
    /// Number of studies per coverage class, in coverage order.
    pub studies_per_class: [usize; 4],
    /// Fraction of countries that receive no studies.
    pub dataless_fraction: f64,
    /// Range of the within-study individual standard deviation.
    pub sd_range: (f64, f64),
    /// Range of per-row sample sizes.
    pub n_range: (u32, u32),
    pub hypers: HyperParams,
    pub fixed: FixedTruth,
    pub seed: u64,
}

fn groups(bounds: &[(f64, f64)]) -> Vec<AgeGroup> {
    bounds.iter().map(|&(lo, hi)| AgeGroup::new(lo, hi)).collect()
}

impl SyntheticSpec {
    /// Twelve countries in four subregions and two regions, ten years, about
    /// two hundred studies, one third of the countries without data.
    pub fn standard(seed: u64) -> Self {
        Self {
            n_countries: 12,
            n_subregions: 4,
            n_regions: 2,
            window: Window { t_min: 2000, t_max: 2009 },
            age_groups: groups(&[(25.0, 34.0), (35.0, 44.0), (45.0, 54.0), (55.0, 64.0), (65.0, 74.0)]),
            standard_weights: vec![0.24, 0.22, 0.2, 0.18, 0.16],
            age_schemes: vec![
                groups(&[(25.0, 34.0), (35.0, 44.0), (45.0, 54.0), (55.0, 64.0), (65.0, 74.0)]),
                groups(&[(20.0, 34.0), (35.0, 49.0), (50.0, 64.0), (65.0, 79.0)]),
                groups(&[(30.0, 39.0), (40.0, 49.0), (50.0, 59.0), (60.0, 69.0)]),
                groups(&[(18.0, 39.0), (40.0, 59.0), (60.0, 79.0)]),
            ],
            studies_per_class: [40, 50, 50, 60],
            dataless_fraction: 1.0 / 3.0,
            sd_range: (12.0, 20.0),
            n_range: (80, 400),
            hypers: HyperParams {
                kappa_a: [9.0, 4.0, 4.0],
                kappa_b: [0.01, 0.004, 0.004],
                lambda: [2.0, 4.0, 4.0, 8.0],
                nu: [1.0, 2.0, 4.0, 8.0],
                tau2: [1.0, 2.0, 4.0, 8.0],
                sigma2: [2.5e-3, 1e-6, 1e-9, 4e-10, 2.5e-9],
            },
            fixed: FixedTruth {
                a_g: 125.0,
                b_g: -0.3,
                beta: [1.0, 2.0, 0.05, -0.1, 0.8, -0.5, 0.3, 0.2, 1.5, 0.05, 3.0],
                psi: [0.5, 0.004, 0.0, 0.0, 0.0],
                phi: [0.002, 0.0, 0.0, 0.0, 0.0],
            },
            seed,
        }
    }

    pub fn n_studies(&self) -> usize {
        self.studies_per_class.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_countries == 0 || self.n_subregions == 0 || self.n_regions == 0 {
            return bad("hierarchy sizes must be >= 1");
        }
        if self.n_subregions > self.n_countries || self.n_regions > self.n_subregions {
            return bad("need countries >= subregions >= regions");
        }
        if self.window.t_max < self.window.t_min + 2 {
            return bad("window must span at least three years");
        }
        if !(0.0..1.0).contains(&self.dataless_fraction) {
            return bad("dataless_fraction must be in [0, 1)");
        }
        if self.age_groups.is_empty() || self.age_groups.len() != self.standard_weights.len() {
            return bad("one standard weight per age group is required");
        }
        if self.age_schemes.is_empty() || self.age_schemes.iter().any(Vec::is_empty) {
            return bad("at least one non-empty age scheme is required");
        }
        if !(self.sd_range.0 > 0.0 && self.sd_range.0 <= self.sd_range.1) {
            return bad("sd_range must be positive and ordered");
        }
        if !(self.n_range.0 >= 1 && self.n_range.0 <= self.n_range.1) {
            return bad("n_range must be >= 1 and ordered");
        }
        if self.fixed.a_g < crate::model::A_G_BOUNDS.0 || self.fixed.a_g > crate::model::A_G_BOUNDS.1 {
            return bad("a_g outside its prior support");
        }
        self.hypers
            .check()
            .map_err(|v| Error::Config(format!("true hyperparameters invalid: {v:?}")))
    }

    fn hierarchy(&self) -> Result<GeoHierarchy> {
        let (j, k, l) = (self.n_countries, self.n_subregions, self.n_regions);
        GeoHierarchy::from_indices((0..j).map(|c| c * k / j).collect(), (0..k).map(|s| s * l / k).collect())
    }
}

/// The full generating state of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: SyntheticSpec,
    pub state: ParamState,
    pub hypers: HyperParams,
    pub dataless_countries: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset,
    pub population: PopulationTable,
    pub truth: Truth,
}

impl Simulated {
    /// Writes the five input files plus `truth.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let p = InputPaths::in_dir(dir);
        let h = &self.dataset.hierarchy;
        h.write_csv(&p.hierarchy)?;
        crate::geo_data::write_studies(&p.studies, h, &self.dataset.studies)?;
        self.dataset.covariates.write_csv(&p.covariates)?;
        self.population.write_csv(&p.population, &p.standard_pop, h)?;
        crate::geo_data::write_atomic(&dir.join("truth.json"), &serde_json::to_vec_pretty(&self.truth)?)
    }
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn normal<R: Rng + ?Sized>(rng: &mut R, var: f64) -> f64 {
    var.sqrt() * std_normal(rng)
}

fn rw2_prior_draw<R: Rng + ?Sized>(data: &ModelData, lambda: f64, rng: &mut R) -> Result<Vec<f64>> {
    let zeros = vec![0.0; data.dims.years];
    Ok(u_conditional(data, lambda, &zeros, &zeros)?.sample(rng))
}

/// Picks dataless countries spread across subregions, never emptying one.
fn choose_dataless<R: Rng + ?Sized>(h: &GeoHierarchy, count: usize, rng: &mut R) -> Vec<usize> {
    let mut pools: Vec<Vec<usize>> = (0..h.n_subregions()).map(|k| h.countries_in_subregion(k)).collect();
    for p in &mut pools {
        p.shuffle(rng);
    }
    let mut out = Vec::new();
    let mut progressed = true;
    while out.len() < count && progressed {
        progressed = false;
        for p in &mut pools {
            if out.len() < count && p.len() > 1 {
                out.push(p.pop().expect("non-empty"));
                progressed = true;
            }
        }
    }
    out.sort_unstable();
    out
}

fn covariate_series<R: Rng + ?Sized>(window: Window, rng: &mut R) -> (i32, Vec<CovariateValues>) {
    let first = window.t_min - SMOOTHING_WIDTH as i32 + 1;
    let n = (window.t_max - first + 1) as usize;
    let mut income = std_normal(rng);
    let urban0 = rng.random_range(0.25..0.65);
    let mut food: [f64; 4] = std::array::from_fn(|_| std_normal(rng));
    let series = (0..n)
        .map(|t| {
            income += 0.03 + 0.15 * std_normal(rng);
            for f in &mut food {
                *f += 0.2 * std_normal(rng);
            }
            let urban: f64 = (urban0 + 0.006 * t as f64 + 0.01 * std_normal(rng)).clamp(0.0, 1.0);
            [income, urban, food[0], food[1], food[2], food[3]]
        })
        .collect();
    (first, series)
}

/// Draws a dataset from the model: effects from their priors under the true
/// hyperparameters (trend vectors constrained), then every age-row mean from
/// the likelihood.
pub fn simulate_dataset(spec: &SyntheticSpec) -> Result<Simulated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let h = spec.hierarchy()?;
    let window = spec.window;
    let j_n = h.n_countries();

    let series = (0..j_n).map(|_| covariate_series(window, &mut rng)).collect();
    let covariates = CovariateTable::from_series(&h, window, series).map_err(|k| Error::Config(k.to_string()))?;

    let n_dataless = (spec.dataless_fraction * j_n as f64).round() as usize;
    let dataless = choose_dataless(&h, n_dataless, &mut rng);
    let with_data: Vec<usize> = (0..j_n).filter(|j| !dataless.contains(j)).collect();

    let mut studies = Vec::with_capacity(spec.n_studies());
    for cls in Coverage::ALL {
        for _ in 0..spec.studies_per_class[cls.index()] {
            let country = with_data[rng.random_range(0..with_data.len())];
            let year = rng.random_range(window.t_min..=window.t_max);
            let raw_urban = covariates.raw(country, year)?[1];
            let spread = if cls.is_national() { 0.02 } else { 0.12 };
            let study_urbanization = (raw_urban + spread * std_normal(&mut rng)).clamp(0.0, 1.0);
            let scheme = &spec.age_schemes[rng.random_range(0..spec.age_schemes.len())];
            let rows = scheme
                .iter()
                .map(|g| {
                    let s = rng.random_range(spec.sd_range.0..=spec.sd_range.1);
                    let n = rng.random_range(spec.n_range.0..=spec.n_range.1);
                    AgeRow::new(g.lo, g.hi, 0.0, s, n).map_err(|k| Error::Config(k.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            studies.push(StudyRecord {
                study_id: format!("study{:04}", studies.len()),
                country,
                year,
                coverage: cls,
                study_urbanization,
                rows,
            });
        }
    }

    let mut dataset = Dataset::new(h.clone(), window, studies, covariates)?;
    let data = ModelData::new(&dataset)?;
    let d = data.dims;
    let hy = &spec.hypers;
    let mut st = ParamState::zeros(d);
    st.a_g = spec.fixed.a_g;
    st.b_g = spec.fixed.b_g;
    st.beta = spec.fixed.beta;
    st.psi = spec.fixed.psi;
    st.phi = spec.fixed.phi;
    for (level, a, b, n) in [
        (0, &mut st.a_c, &mut st.b_c, d.countries),
        (1, &mut st.a_s, &mut st.b_s, d.subregions),
        (2, &mut st.a_r, &mut st.b_r, d.regions),
    ] {
        *a = (0..n).map(|_| normal(&mut rng, hy.kappa_a[level])).collect();
        *b = (0..n).map(|_| normal(&mut rng, hy.kappa_b[level])).collect();
    }
    st.u_c = (0..d.countries).map(|_| rw2_prior_draw(&data, hy.lambda[0], &mut rng)).collect::<Result<_>>()?;
    st.u_s = (0..d.subregions).map(|_| rw2_prior_draw(&data, hy.lambda[1], &mut rng)).collect::<Result<_>>()?;
    st.u_r = (0..d.regions).map(|_| rw2_prior_draw(&data, hy.lambda[2], &mut rng)).collect::<Result<_>>()?;
    st.u_g = rw2_prior_draw(&data, hy.lambda[3], &mut rng)?;
    st.c = (0..d.countries)
        .map(|_| std::array::from_fn(|s| normal(&mut rng, hy.sigma2[s])))
        .collect();
    st.e = data
        .studies
        .iter()
        .map(|s| normal(&mut rng, hy.nu[s.class.index()]))
        .collect();

    for (i, study) in dataset.studies.iter_mut().enumerate() {
        let tau2 = hy.tau2[study.coverage.index()];
        for (hh, row) in study.rows.iter_mut().enumerate() {
            let var = row.sampling_variance() + tau2;
            row.y = mean_function(&data, i, hh, &st) + normal(&mut rng, var);
        }
    }

    let mut population = PopulationTable::new(spec.age_groups.clone(), spec.standard_weights.clone())
        .map_err(|k| Error::Config(k.to_string()))?;
    let age_profile: Vec<f64> = (0..spec.age_groups.len()).map(|a| 1.0 - 0.12 * a as f64).collect();
    for j in 0..j_n {
        let size = 1e6 * (1.5 * std_normal(&mut rng)).exp();
        let growth = Normal::new(0.015, 0.005).expect("valid").sample(&mut rng);
        for year in window.years() {
            let t = (year - window.t_min) as f64;
            for (a, p) in age_profile.iter().enumerate() {
                let count = (size * p.max(0.05) * (growth * t).exp()).round();
                population.insert(j, year, a, count).map_err(|k| Error::Config(k.to_string()))?;
            }
        }
    }

    Ok(Simulated {
        dataset,
        population,
        truth: Truth {
            spec: spec.clone(),
            state: st,
            hypers: spec.hypers.clone(),
            dataless_countries: dataless,
        },
    })
}
