//! Metropolis–Hastings updates of the hyperparameters.
//!
//! A variance and the random effects it governs are proposed together: a
//! log-scale random walk for the variance, then a fresh draw of the effects
//! from their full conditional under the proposed value. The acceptance ratio
//! then only involves the effects-integrated marginal.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::geo_data::Coverage;
use crate::gmrf::{rw2_log_density_kernel, ConstrainedGaussian};
use crate::model::{
    hyper_log_prior, normal_log_pdf, HyperId, HyperParams, Level, ModelData, ParamState, N_AGE_BASIS,
};

use super::blocks::{
    current_mu, level_size, pseudo_observations, u_conditional, u_data_terms, u_vector, u_vector_mut, Block,
};

/// Effects governed by a scalar variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EffectGroup {
    Intercept(Level),
    Slope(Level),
    Spline(usize),
    Study(Coverage),
}

impl EffectGroup {
    pub fn of(id: HyperId) -> Option<EffectGroup> {
        match id {
            HyperId::KappaA(l) => Some(EffectGroup::Intercept(l)),
            HyperId::KappaB(l) => Some(EffectGroup::Slope(l)),
            HyperId::Sigma2(s) => Some(EffectGroup::Spline(s)),
            HyperId::Nu(c) => Some(EffectGroup::Study(c)),
            _ => None,
        }
    }

    pub fn block(self) -> Block {
        match self {
            EffectGroup::Intercept(l) => Block::intercept(l),
            EffectGroup::Slope(l) => Block::slope(l),
            EffectGroup::Spline(_) => Block::C,
            EffectGroup::Study(_) => Block::E,
        }
    }
}

fn effect_values(data: &ModelData, state: &ParamState, g: EffectGroup) -> Vec<f64> {
    match g {
        EffectGroup::Intercept(Level::Country) => state.a_c.clone(),
        EffectGroup::Intercept(Level::Subregion) => state.a_s.clone(),
        EffectGroup::Intercept(Level::Region) => state.a_r.clone(),
        EffectGroup::Slope(Level::Country) => state.b_c.clone(),
        EffectGroup::Slope(Level::Subregion) => state.b_s.clone(),
        EffectGroup::Slope(Level::Region) => state.b_r.clone(),
        EffectGroup::Spline(s) => state.c.iter().map(|c| c[s]).collect(),
        EffectGroup::Study(cls) => study_indices(data, cls).map(|i| state.e[i]).collect(),
        _ => unreachable!("global terms carry no variance"),
    }
}

fn set_effect_values(data: &ModelData, state: &mut ParamState, g: EffectGroup, vals: &[f64]) {
    match g {
        EffectGroup::Intercept(Level::Country) => state.a_c.copy_from_slice(vals),
        EffectGroup::Intercept(Level::Subregion) => state.a_s.copy_from_slice(vals),
        EffectGroup::Intercept(Level::Region) => state.a_r.copy_from_slice(vals),
        EffectGroup::Slope(Level::Country) => state.b_c.copy_from_slice(vals),
        EffectGroup::Slope(Level::Subregion) => state.b_s.copy_from_slice(vals),
        EffectGroup::Slope(Level::Region) => state.b_r.copy_from_slice(vals),
        EffectGroup::Spline(s) => {
            for (c, &v) in state.c.iter_mut().zip(vals) {
                c[s] = v;
            }
        }
        EffectGroup::Study(cls) => {
            let idx: Vec<usize> = study_indices(data, cls).collect();
            for (i, &v) in idx.into_iter().zip(vals) {
                state.e[i] = v;
            }
        }
        _ => unreachable!("global terms carry no variance"),
    }
}

fn study_indices(data: &ModelData, cls: Coverage) -> impl Iterator<Item = usize> + '_ {
    data.studies
        .iter()
        .enumerate()
        .filter(move |(_, s)| s.class == cls)
        .map(|(i, _)| i)
}

/// Data precision `P_m` and linear term `L_m` for each effect of the group, so
/// that the likelihood in effect `h_m` is `exp(−½P_m h_m² + L_m h_m)`.
pub fn effect_data_terms(data: &ModelData, state: &ParamState, hypers: &HyperParams, g: EffectGroup) -> Vec<(f64, f64)> {
    match g {
        EffectGroup::Intercept(level) | EffectGroup::Slope(level) => {
            let pseudo = pseudo_observations(data, state, hypers);
            let mu = current_mu(data, state);
            let vals = effect_values(data, state, g);
            let mut out = vec![(0.0, 0.0); vals.len()];
            for (i, s) in data.studies.iter().enumerate() {
                let m = super::blocks::member_of(level, s);
                let coef = if matches!(g, EffectGroup::Slope(_)) { s.tc } else { 1.0 };
                let rest = mu[i] - coef * vals[m];
                out[m].0 += pseudo.w[i] * coef * coef;
                out[m].1 += coef * (pseudo.r[i] - pseudo.w[i] * rest);
            }
            out
        }
        EffectGroup::Spline(sp) => {
            let mut out = vec![(0.0, 0.0); data.dims.countries];
            for (i, s) in data.studies.iter().enumerate() {
                let mu = crate::model::baseline_level(data, i, state);
                let tau2 = hypers.tau2[s.class.index()];
                let c = &state.c[s.country];
                for row in &s.rows {
                    let v = row.sampling_var + tau2;
                    let b = &row.basis;
                    let g: f64 = 1.0 + (0..N_AGE_BASIS).map(|a| state.phi[a] * b[a]).sum::<f64>();
                    let others: f64 = (0..N_AGE_BASIS)
                        .filter(|&a| a != sp)
                        .map(|a| (state.psi[a] + c[a]) * b[a])
                        .sum::<f64>()
                        + state.psi[sp] * b[sp];
                    let target = row.y - g * mu - others;
                    out[s.country].0 += b[sp] * b[sp] / v;
                    out[s.country].1 += b[sp] * target / v;
                }
            }
            out
        }
        EffectGroup::Study(cls) => {
            let pseudo = pseudo_observations(data, state, hypers);
            study_indices(data, cls)
                .map(|i| {
                    let rest = crate::model::baseline_level(data, i, state) - state.e[i];
                    (pseudo.w[i], pseudo.r[i] - pseudo.w[i] * rest)
                })
                .collect()
        }
    }
}

/// `ln ∫ Π_m N(h_m; 0, v) exp(−½P_m h_m² + L_m h_m) dh`.
pub fn scalar_log_marginal(terms: &[(f64, f64)], v: f64) -> f64 {
    terms
        .iter()
        .map(|&(p, l)| {
            let prec = p + 1.0 / v;
            -0.5 * v.ln() - 0.5 * prec.ln() + 0.5 * l * l / prec
        })
        .sum()
}

/// Log target of a hyperparameter on the log scale, given its conditional
/// data term `f(value)`.
fn log_scale_target(id: HyperId, value: f64, term: f64) -> f64 {
    let lp = hyper_log_prior(id, value);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    lp + value.ln() + term
}

fn propose<R: Rng + ?Sized>(current: f64, scale: f64, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    current * (scale * z).exp()
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

/// Proposed value admissible: bounds and orderings.
fn admissible(hypers: &HyperParams, id: HyperId, value: f64) -> bool {
    let mut h = hypers.clone();
    h.set(id, value);
    hyper_log_prior(id, value) > f64::NEG_INFINITY && h.check().is_ok()
}

/// Joint update of a variance with its scalar effects. Returns whether accepted.
pub fn update_scalar_variance<R: Rng + ?Sized>(
    data: &ModelData,
    state: &mut ParamState,
    hypers: &mut HyperParams,
    id: HyperId,
    effects_frozen: bool,
    scale: f64,
    rng: &mut R,
) -> bool {
    let group = EffectGroup::of(id).expect("scalar variance");
    let current = hypers.get(id);
    let proposal = propose(current, scale, rng);
    if !admissible(hypers, id, proposal) {
        return false;
    }
    if effects_frozen {
        let vals = effect_values(data, state, group);
        let term = |v: f64| vals.iter().map(|&h| normal_log_pdf(h, 0.0, v)).sum::<f64>();
        let ratio = log_scale_target(id, proposal, term(proposal)) - log_scale_target(id, current, term(current));
        if accept(ratio, rng) {
            hypers.set(id, proposal);
            return true;
        }
        return false;
    }
    let terms = effect_data_terms(data, state, hypers, group);
    let ratio = log_scale_target(id, proposal, scalar_log_marginal(&terms, proposal))
        - log_scale_target(id, current, scalar_log_marginal(&terms, current));
    if !accept(ratio, rng) {
        return false;
    }
    hypers.set(id, proposal);
    let draws: Vec<f64> = terms
        .iter()
        .map(|&(p, l)| {
            let prec = p + 1.0 / proposal;
            let z: f64 = StandardNormal.sample(rng);
            l / prec + z / prec.sqrt()
        })
        .collect();
    set_effect_values(data, state, group, &draws);
    true
}

/// Joint update of an RW2 precision with every trend vector at its level.
pub fn update_lambda<R: Rng + ?Sized>(
    data: &ModelData,
    state: &mut ParamState,
    hypers: &mut HyperParams,
    level: Level,
    effects_frozen: bool,
    scale: f64,
    rng: &mut R,
) -> Result<bool> {
    let id = HyperId::Lambda(level);
    let current = hypers.get(id);
    let proposal = propose(current, scale, rng);
    if !admissible(hypers, id, proposal) {
        return Ok(false);
    }
    let n_vec = level_size(data.dims, level);
    if effects_frozen {
        let term = |lam: f64| {
            (0..n_vec)
                .map(|m| rw2_log_density_kernel(u_vector(state, level, m), lam, &data.rw2))
                .sum::<f64>()
        };
        let ratio = log_scale_target(id, proposal, term(proposal)) - log_scale_target(id, current, term(current));
        if accept(ratio, rng) {
            hypers.set(id, proposal);
            return Ok(true);
        }
        return Ok(false);
    }
    let pseudo = pseudo_observations(data, state, hypers);
    let mu = current_mu(data, state);
    let terms = u_data_terms(data, state, level, &pseudo, &mu);
    let half_rank = 0.5 * data.rw2.rank() as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let marginal = |lam: f64| -> Result<(f64, Vec<ConstrainedGaussian<f64>>)> {
        let mut total = 0.0;
        let mut conds = Vec::with_capacity(n_vec);
        for (d, l) in &terms {
            let cg = u_conditional(data, lam, d, l)?;
            total += half_rank * lam.ln() - half_rank * ln_2pi + cg.log_integral();
            conds.push(cg);
        }
        Ok((total, conds))
    };
    let (m_cur, _) = marginal(current)?;
    let (m_prop, conds) = marginal(proposal)?;
    let ratio = log_scale_target(id, proposal, m_prop) - log_scale_target(id, current, m_cur);
    if !accept(ratio, rng) {
        return Ok(false);
    }
    hypers.set(id, proposal);
    for (m, cg) in conds.iter().enumerate() {
        *u_vector_mut(state, level, m) = cg.sample(rng);
    }
    Ok(true)
}

/// Log likelihood of all rows in one coverage class at residual variance `tau2`.
fn class_log_likelihood(data: &ModelData, state: &ParamState, cls: Coverage, tau2: f64) -> f64 {
    study_indices(data, cls)
        .map(|i| {
            let s = &data.studies[i];
            (0..s.rows.len())
                .map(|h| {
                    let m = crate::model::mean_function(data, i, h, state);
                    normal_log_pdf(s.rows[h].y, m, s.rows[h].sampling_var + tau2)
                })
                .sum::<f64>()
        })
        .sum()
}

/// Random-walk MH on `ln τ²` for one class, rejecting order violations.
pub fn update_tau2<R: Rng + ?Sized>(
    data: &ModelData,
    state: &ParamState,
    hypers: &mut HyperParams,
    cls: Coverage,
    scale: f64,
    rng: &mut R,
) -> bool {
    let id = HyperId::Tau2(cls);
    let current = hypers.get(id);
    let proposal = propose(current, scale, rng);
    if !admissible(hypers, id, proposal) {
        return false;
    }
    let ratio = log_scale_target(id, proposal, class_log_likelihood(data, state, cls, proposal))
        - log_scale_target(id, current, class_log_likelihood(data, state, cls, current));
    if accept(ratio, rng) {
        hypers.set(id, proposal);
        true
    } else {
        false
    }
}
