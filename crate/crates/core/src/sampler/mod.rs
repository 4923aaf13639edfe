//! MCMC fitting: Gibbs sweeps over the Gaussian blocks, joint
//! variance-and-effect Metropolis–Hastings updates, chain management.

pub mod blocks;
pub mod hyper;
pub mod storage;
mod truncnorm;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{rank_normalized_split_rhat, split_rhat};
use crate::error::{Error, Result};
use crate::geo_data::Coverage;
use crate::model::{
    log_posterior, Dims, HyperId, HyperParams, Level, ModelData, ParamState, A_G_BOUNDS, N_AGE_BASIS, N_HYPER,
};

pub use blocks::Block;
pub use truncnorm::{norm_cdf, norm_quantile, sample_truncated_normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    MethodOfMoments,
    /// Method-of-moments values with lognormal jitter on the variances and the
    /// global intercept, for convergence diagnostics across chains.
    Overdispersed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_burnin: usize,
    /// Post-burn-in iterations per chain.
    pub n_iter: usize,
    pub thin: usize,
    pub seed: u64,
    /// Initial log-scale random-walk step for every hyperparameter.
    pub proposal_scale: f64,
    /// Iterations per adaptation batch during burn-in.
    pub adapt_interval: usize,
    pub target_acceptance: f64,
    pub init: InitMode,
    pub frozen_blocks: BTreeSet<Block>,
    pub frozen_hypers: BTreeSet<HyperId>,
    /// Holds τ² at these values for the whole run.
    pub fixed_tau2: Option<[f64; 4]>,
    /// Where a state dump goes when the log posterior turns non-finite.
    pub dump_dir: Option<PathBuf>,
    #[serde(skip)]
    pub initial: Option<Box<(ParamState, HyperParams)>>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_burnin: 500,
            n_iter: 2000,
            thin: 1,
            seed: 1,
            proposal_scale: 0.5,
            adapt_interval: 50,
            target_acceptance: 0.35,
            init: InitMode::Overdispersed,
            frozen_blocks: BTreeSet::new(),
            frozen_hypers: BTreeSet::new(),
            fixed_tau2: None,
            dump_dir: None,
            initial: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.n_iter == 0 || self.thin == 0 || self.adapt_interval == 0 {
            return Err(Error::Config("n_chains, n_iter, thin and adapt_interval must be >= 1".into()));
        }
        if !(self.proposal_scale > 0.0) || !(0.0..1.0).contains(&self.target_acceptance) {
            return Err(Error::Config("proposal_scale must be > 0 and target_acceptance in (0, 1)".into()));
        }
        if let Some(t) = self.fixed_tau2 {
            if t.iter().any(|v| !(*v > 0.0)) || !t.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Config("fixed_tau2 must be positive and increasing".into()));
            }
        }
        Ok(())
    }

    pub fn block_active(&self, b: Block) -> bool {
        !self.frozen_blocks.contains(&b)
    }

    pub fn hyper_active(&self, h: HyperId) -> bool {
        !self.frozen_hypers.contains(&h) && !(self.fixed_tau2.is_some() && matches!(h, HyperId::Tau2(_)))
    }

    /// Freezes every block and hyperparameter except those listed.
    pub fn only(mut self, blocks: &[Block], hypers: &[HyperId]) -> Self {
        self.frozen_blocks = Block::ALL.iter().copied().filter(|b| !blocks.contains(b)).collect();
        self.frozen_hypers = HyperId::all().iter().copied().filter(|h| !hypers.contains(h)).collect();
        self
    }
}

/// One stored snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub iteration: usize,
    pub log_posterior: f64,
    pub state: ParamState,
    pub hypers: HyperParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    pub stream: u64,
    pub draws: Vec<Draw>,
    /// Post-burn-in acceptance rate per hyperparameter name.
    pub acceptance: BTreeMap<String, f64>,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhatRow {
    pub name: String,
    pub split: f64,
    pub rank_normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub dims: Dims,
    pub seed: u64,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Draw> {
        self.chains.iter().flat_map(|c| &c.draws)
    }

    /// Per-chain series of a scalar summary.
    pub fn series(&self, f: impl Fn(&Draw) -> f64) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.draws.iter().map(&f).collect()).collect()
    }

    pub fn pooled(&self, f: impl Fn(&Draw) -> f64) -> Vec<f64> {
        self.iter().map(f).collect()
    }

    /// Split and rank-normalized split R̂ for the 23 hyperparameters, `a_g` and `b_g`.
    pub fn rhat_table(&self) -> Vec<RhatRow> {
        let mut rows: Vec<RhatRow> = HyperId::all()
            .iter()
            .map(|&h| self.rhat_row(h.name(), |d| d.hypers.get(h)))
            .collect();
        rows.push(self.rhat_row("a_g".into(), |d| d.state.a_g));
        rows.push(self.rhat_row("b_g".into(), |d| d.state.b_g));
        rows
    }

    fn rhat_row(&self, name: String, f: impl Fn(&Draw) -> f64) -> RhatRow {
        let s = self.series(f);
        RhatRow {
            name,
            split: split_rhat(&s),
            rank_normalized: rank_normalized_split_rhat(&s),
        }
    }
}

// ---------------------------------------------------------------------------
// initialization

fn clip(id: HyperId, v: f64) -> f64 {
    let (lo, hi) = id.bounds();
    v.clamp(lo.max(1e-12), hi * 0.999)
}

fn sort_ordered(h: &mut HyperParams) {
    for arr in [&mut h.nu, &mut h.tau2] {
        arr.sort_by(f64::total_cmp);
        for c in 1..4 {
            if arr[c] <= arr[c - 1] {
                arr[c] = arr[c - 1] * 1.01;
            }
        }
    }
}

/// Rough moment-based starting point: intercepts at the grand mean, every
/// other effect zero, variances scaled from the spread of the data.
pub fn initial_state<R: rand::Rng + ?Sized>(data: &ModelData, mode: InitMode, rng: &mut R) -> (ParamState, HyperParams) {
    let ys: Vec<f64> = data.studies.iter().flat_map(|s| s.rows.iter().map(|r| r.y)).collect();
    let (mean, var) = if ys.len() >= 2 {
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (ys.len() - 1) as f64;
        (m, v.max(1e-2))
    } else {
        (ys.first().copied().unwrap_or(0.5 * A_G_BOUNDS.1), 100.0)
    };
    let mut state = ParamState::zeros(data.dims);
    state.a_g = mean.clamp(A_G_BOUNDS.0, A_G_BOUNDS.1);
    let years = data.dims.years as f64;
    let mut rms_basis = [0.0; N_AGE_BASIS];
    let n_rows = data.n_rows().max(1) as f64;
    for s in &data.studies {
        for r in &s.rows {
            for a in 0..N_AGE_BASIS {
                rms_basis[a] += r.basis[a] * r.basis[a] / n_rows;
            }
        }
    }
    let mut h = HyperParams {
        kappa_a: [var / 4.0; 3],
        kappa_b: [var / (years * years); 3],
        lambda: [1.0; 4],
        nu: [0.05 * var, 0.1 * var, 0.2 * var, 0.4 * var],
        tau2: [0.025 * var, 0.05 * var, 0.1 * var, 0.2 * var],
        sigma2: std::array::from_fn(|a| {
            let rms = rms_basis[a].sqrt();
            if rms > 0.0 {
                (0.05 * var.sqrt() / rms).powi(2)
            } else {
                1.0
            }
        }),
    };
    if mode == InitMode::Overdispersed {
        for id in HyperId::all() {
            let z: f64 = StandardNormal.sample(rng);
            h.set(id, h.get(id) * z.exp());
        }
        let z: f64 = StandardNormal.sample(rng);
        state.a_g = (state.a_g + z * var.sqrt()).clamp(A_G_BOUNDS.0, A_G_BOUNDS.1);
    }
    for id in HyperId::all() {
        h.set(id, clip(id, h.get(id)));
    }
    sort_ordered(&mut h);
    (state, h)
}

// ---------------------------------------------------------------------------
// chain

struct Adapter {
    scale: [f64; N_HYPER],
    batch_acc: [u32; N_HYPER],
    batch_tries: [u32; N_HYPER],
    acc: [u64; N_HYPER],
    tries: [u64; N_HYPER],
    batches: usize,
}

impl Adapter {
    fn new(scale: f64) -> Self {
        Self {
            scale: [scale; N_HYPER],
            batch_acc: [0; N_HYPER],
            batch_tries: [0; N_HYPER],
            acc: [0; N_HYPER],
            tries: [0; N_HYPER],
            batches: 0,
        }
    }

    fn record(&mut self, id: HyperId, accepted: bool, burnin: bool) {
        let k = id.index();
        if burnin {
            self.batch_tries[k] += 1;
            self.batch_acc[k] += accepted as u32;
        } else {
            self.tries[k] += 1;
            self.acc[k] += accepted as u64;
        }
    }

    fn adapt(&mut self, target: f64) {
        self.batches += 1;
        let step = (2.0 / (self.batches as f64).sqrt()).min(1.0);
        for k in 0..N_HYPER {
            if self.batch_tries[k] > 0 {
                let rate = self.batch_acc[k] as f64 / self.batch_tries[k] as f64;
                self.scale[k] = (self.scale[k] * (step * (rate - target)).exp()).clamp(1e-3, 20.0);
            }
            self.batch_acc[k] = 0;
            self.batch_tries[k] = 0;
        }
    }
}

/// One chain's state and random stream.
pub struct Chain<'a> {
    data: &'a ModelData,
    cfg: &'a SamplerConfig,
    pub state: ParamState,
    pub hypers: HyperParams,
    rng: ChaCha8Rng,
    adapter: Adapter,
}

impl<'a> Chain<'a> {
    pub fn new(data: &'a ModelData, cfg: &'a SamplerConfig, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        let (state, mut hypers) = match &cfg.initial {
            Some(init) => (init.0.clone(), init.1.clone()),
            None => initial_state(data, cfg.init, &mut rng),
        };
        if let Some(t) = cfg.fixed_tau2 {
            hypers.tau2 = t;
        }
        Self {
            data,
            cfg,
            state,
            hypers,
            rng,
            adapter: Adapter::new(cfg.proposal_scale),
        }
    }

    /// One full sweep over every unfrozen block and hyperparameter.
    pub fn sweep(&mut self, burnin: bool) -> Result<()> {
        let (data, cfg) = (self.data, self.cfg);
        let active = |b: Block| cfg.block_active(b);
        blocks::update_linear_mean(data, &mut self.state, &self.hypers, &active, &mut self.rng)?;
        for level in [Level::Globe, Level::Region, Level::Subregion, Level::Country] {
            if active(Block::trend(level)) {
                blocks::update_u_level(data, &mut self.state, &self.hypers, level, &mut self.rng)?;
            }
        }
        blocks::update_psi_phi(data, &mut self.state, &self.hypers, active(Block::Psi), active(Block::Phi), &mut self.rng)?;
        if active(Block::C) {
            blocks::update_c(data, &mut self.state, &self.hypers, &mut self.rng)?;
        }
        if active(Block::E) {
            blocks::update_e(data, &mut self.state, &self.hypers, &mut self.rng)?;
        }
        for id in HyperId::all() {
            if !cfg.hyper_active(id) {
                continue;
            }
            let scale = self.adapter.scale[id.index()];
            let accepted = match id {
                HyperId::Lambda(level) => hyper::update_lambda(
                    data,
                    &mut self.state,
                    &mut self.hypers,
                    level,
                    !active(Block::trend(level)),
                    scale,
                    &mut self.rng,
                )?,
                HyperId::Tau2(cls) => hyper::update_tau2(data, &self.state, &mut self.hypers, cls, scale, &mut self.rng),
                _ => {
                    let frozen = !active(hyper::EffectGroup::of(id).expect("scalar variance").block());
                    hyper::update_scalar_variance(data, &mut self.state, &mut self.hypers, id, frozen, scale, &mut self.rng)
                }
            };
            self.adapter.record(id, accepted, burnin);
        }
        Ok(())
    }

    fn dump(&self, iteration: usize, stream: u64) -> String {
        let dir = self.cfg.dump_dir.clone().unwrap_or_else(std::env::temp_dir);
        let path = dir.join(format!("nonfinite_chain{stream}_iter{iteration}.json"));
        let body = serde_json::json!({ "state": self.state, "hypers": self.hypers });
        match serde_json::to_vec_pretty(&body)
            .map_err(Error::from)
            .and_then(|b| crate::geo_data::write_atomic(&path, &b))
        {
            Ok(()) => path.display().to_string(),
            Err(e) => format!("<dump failed: {e}>"),
        }
    }

    pub fn run(mut self, stream: u64) -> Result<ChainDraws> {
        let start = Instant::now();
        let cfg = self.cfg;
        let total = cfg.n_burnin + cfg.n_iter;
        let mut draws = Vec::with_capacity(cfg.n_iter / cfg.thin);
        for it in 0..total {
            let burnin = it < cfg.n_burnin;
            self.sweep(burnin)?;
            if burnin && (it + 1) % cfg.adapt_interval == 0 {
                self.adapter.adapt(cfg.target_acceptance);
            }
            let lp = log_posterior(self.data, &self.state, &self.hypers);
            if !lp.is_finite() || !self.state.is_finite() {
                return Err(Error::NonFinite {
                    chain: stream as usize,
                    iteration: it,
                    dump: self.dump(it, stream),
                });
            }
            if !burnin && (it - cfg.n_burnin + 1) % cfg.thin == 0 {
                draws.push(Draw {
                    iteration: it - cfg.n_burnin,
                    log_posterior: lp,
                    state: self.state.clone(),
                    hypers: self.hypers.clone(),
                });
            }
        }
        let acceptance = HyperId::all()
            .iter()
            .filter(|h| self.adapter.tries[h.index()] > 0)
            .map(|h| {
                let k = h.index();
                (h.name(), self.adapter.acc[k] as f64 / self.adapter.tries[k] as f64)
            })
            .collect();
        Ok(ChainDraws {
            stream,
            draws,
            acceptance,
            runtime_secs: start.elapsed().as_secs_f64(),
        })
    }
}

/// Runs a single chain on random substream `stream` of the master seed.
pub fn run_chain(data: &ModelData, cfg: &SamplerConfig, stream: u64) -> Result<ChainDraws> {
    cfg.validate()?;
    Chain::new(data, cfg, stream).run(stream)
}

/// Runs `cfg.n_chains` chains concurrently on substreams `0..n_chains`.
pub fn run_chains(data: &ModelData, cfg: &SamplerConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let chains = (0..cfg.n_chains as u64)
        .into_par_iter()
        .map(|s| run_chain(data, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws {
        dims: data.dims,
        seed: cfg.seed,
        chains,
    })
}

/// Appends one chain on the next unused substream.
pub fn extend_chains(data: &ModelData, cfg: &SamplerConfig, draws: &mut PosteriorDraws) -> Result<()> {
    let stream = draws.chains.iter().map(|c| c.stream + 1).max().unwrap_or(0);
    let chain = run_chain(data, cfg, stream)?;
    draws.chains.push(chain);
    Ok(())
}

/// Classes listed in coverage order, for reports.
pub fn coverage_names() -> Vec<&'static str> {
    Coverage::ALL.iter().map(|c| c.as_str()).collect()
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::geo_data::{AgeRow, Coverage, CovariateTable, Dataset, GeoHierarchy, StudyRecord, Window};
    use crate::gmrf::ConstraintSet;
    use crate::model::{HyperParams, ModelData, ParamState};

    /// Five countries over three subregions and two regions, a dozen multi-row studies.
    pub fn small_dataset() -> Dataset {
        let h = GeoHierarchy::from_indices(vec![0, 0, 1, 2, 2], vec![0, 0, 1]).unwrap();
        let w = Window::new(2000, 2005).unwrap();
        let series = (0..5)
            .map(|j| {
                let v = (0..15)
                    .map(|t| {
                        let t = t as f64;
                        [8.0 + 0.05 * t + 0.3 * j as f64, 0.3 + 0.01 * t, 0.2 * j as f64, -0.1, 0.05 * t, 0.1]
                    })
                    .collect();
                (1991, v)
            })
            .collect();
        let cov = CovariateTable::from_series(&h, w, series).unwrap();
        let mut studies = Vec::new();
        for i in 0..14 {
            let j = i % 4;
            let lo = [25.0, 30.0, 35.0];
            let rows = (0..3)
                .map(|r| {
                    let a = lo[i % 3] + 10.0 * r as f64;
                    AgeRow::new(a, a + 9.0, 115.0 + 0.4 * a + (i as f64).sin() * 3.0, 14.0 + r as f64, 150 + 30 * i as u32).unwrap()
                })
                .collect();
            studies.push(StudyRecord {
                study_id: format!("s{i}"),
                country: j,
                year: 2000 + (i % 6) as i32,
                coverage: Coverage::ALL[i % 4],
                study_urbanization: 0.2 + 0.05 * i as f64,
                rows,
            });
        }
        Dataset::new(h, w, studies, cov).unwrap()
    }

    pub fn small_data() -> ModelData {
        ModelData::new(&small_dataset()).unwrap()
    }

    pub fn small_hypers() -> HyperParams {
        HyperParams {
            kappa_a: [4.0, 2.0, 3.0],
            kappa_b: [0.05, 0.02, 0.01],
            lambda: [2.0, 3.0, 4.0, 5.0],
            nu: [1.0, 2.0, 4.0, 8.0],
            tau2: [0.5, 1.0, 2.0, 3.0],
            sigma2: [1e-3, 1e-5, 1e-7, 1e-8, 1e-8],
        }
    }

    pub fn small_state(data: &ModelData) -> ParamState {
        let d = data.dims;
        let mut st = ParamState::zeros(d);
        st.a_g = 118.0;
        st.b_g = -0.15;
        for j in 0..d.countries {
            st.a_c[j] = 0.4 * j as f64 - 0.8;
            st.b_c[j] = 0.02 * j as f64 - 0.03;
            st.c[j] = [2e-3 * j as f64, -1e-4, 2e-5, 1e-5 * j as f64, -3e-6];
        }
        st.a_s = vec![0.6, -0.4, 0.2];
        st.b_s = vec![0.01, -0.02, 0.03];
        st.a_r = vec![1.1, -0.9];
        st.b_r = vec![0.04, -0.01];
        let cs = ConstraintSet::<f64>::new(d.years);
        let mk = |seed: f64| {
            let mut u: Vec<f64> = (0..d.years).map(|t| ((t as f64 + seed) * 1.3).sin()).collect();
            cs.apply_projection(&mut u);
            u
        };
        st.u_c = (0..d.countries).map(|j| mk(j as f64)).collect();
        st.u_s = (0..d.subregions).map(|k| mk(7.0 + k as f64)).collect();
        st.u_r = (0..d.regions).map(|l| mk(13.0 + l as f64)).collect();
        st.u_g = mk(19.0);
        st.beta = [0.4, 1.5, 0.02, -0.03, 0.2, -0.2, 0.1, 0.05, 1.2, 0.04, 2.0];
        st.psi = [0.45, 0.005, 1e-4, -2e-4, 1e-4];
        st.phi = [0.002, 2e-5, 0.0, 1e-6, 0.0];
        st.e = (0..d.studies).map(|i| 0.9 * (i as f64 * 0.7).cos()).collect();
        st
    }
}
