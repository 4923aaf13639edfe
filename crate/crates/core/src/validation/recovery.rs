//! Simulation-based recovery of known parameters.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_data::Coverage;
use crate::inference::summarize_draws;
use crate::model::{HyperId, HyperParams, ModelData, ParamState};
use crate::sampler::{run_chains, Draw, SamplerConfig};

use super::{simulate_dataset, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecoveryTarget {
    AGlobal,
    BGlobal,
    /// Covariate coefficient by design column.
    Beta(usize),
    Hyper(HyperId),
}

impl RecoveryTarget {
    /// `a^g`, `b^g`, `β₁`, `ν_c` and `τ²_w`.
    pub fn standard() -> Vec<RecoveryTarget> {
        vec![
            RecoveryTarget::AGlobal,
            RecoveryTarget::BGlobal,
            RecoveryTarget::Beta(0),
            RecoveryTarget::Hyper(HyperId::Nu(Coverage::Community)),
            RecoveryTarget::Hyper(HyperId::Tau2(Coverage::WeightedNational)),
        ]
    }

    pub fn name(self) -> String {
        match self {
            RecoveryTarget::AGlobal => "a_g".into(),
            RecoveryTarget::BGlobal => "b_g".into(),
            RecoveryTarget::Beta(i) => format!("beta_{}", i + 1),
            RecoveryTarget::Hyper(h) => h.name(),
        }
    }

    pub fn value(self, state: &ParamState, hypers: &HyperParams) -> f64 {
        match self {
            RecoveryTarget::AGlobal => state.a_g,
            RecoveryTarget::BGlobal => state.b_g,
            RecoveryTarget::Beta(i) => state.beta[i],
            RecoveryTarget::Hyper(h) => hypers.get(h),
        }
    }

    fn of_draw(self, d: &Draw) -> f64 {
        self.value(&d.state, &d.hypers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimate {
    pub target: String,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub covered: bool,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub seed: u64,
    pub estimates: Vec<ReplicateEstimate>,
    /// Posterior probability that `ν_w < ν_c`.
    pub p_nu_order: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecovery {
    pub target: String,
    pub coverage: f64,
    pub mean_z: f64,
    pub sd_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub replicates: Vec<Replicate>,
    pub targets: Vec<TargetRecovery>,
}

impl RecoveryReport {
    pub fn target(&self, name: &str) -> Option<&TargetRecovery> {
        self.targets.iter().find(|t| t.target == name)
    }

    pub fn summary_text(&self) -> String {
        let mut s = format!("replicates: {}\n{:<12} {:>9} {:>8} {:>8}\n", self.replicates.len(), "target", "coverage", "mean z", "sd z");
        for t in &self.targets {
            let _ = writeln!(s, "{:<12} {:>9.3} {:>8.3} {:>8.3}", t.target, t.coverage, t.mean_z, t.sd_z);
        }
        s
    }
}

/// Posterior summary of each target against its true value for one fit.
pub fn score_fit(targets: &[RecoveryTarget], draws: &[&Draw], truth: (&ParamState, &HyperParams)) -> Vec<ReplicateEstimate> {
    targets
        .iter()
        .map(|&t| {
            let v: Vec<f64> = draws.iter().map(|d| t.of_draw(d)).collect();
            let s = summarize_draws(&v);
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
            let tv = t.value(truth.0, truth.1);
            ReplicateEstimate {
                target: t.name(),
                truth: tv,
                mean,
                sd,
                lo95: s.lo,
                hi95: s.hi,
                covered: s.lo <= tv && tv <= s.hi,
                z: (mean - tv) / sd,
            }
        })
        .collect()
}

/// Simulates `replicates` datasets from `spec` (seeds `spec.seed + r`), fits
/// each with `config` reseeded the same way, and scores the targets.
pub fn recover_parameters(
    spec: &SyntheticSpec,
    config: &SamplerConfig,
    targets: &[RecoveryTarget],
    replicates: usize,
) -> Result<RecoveryReport> {
    if spec.n_studies() < 150 {
        return Err(Error::Config(format!("recovery needs at least 150 studies, spec has {}", spec.n_studies())));
    }
    if replicates == 0 {
        return Err(Error::InvalidArgument("at least one replicate required".into()));
    }
    let reps = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let seed = spec.seed.wrapping_add(r);
            let sim = simulate_dataset(&SyntheticSpec { seed, ..spec.clone() })?;
            let data = ModelData::new(&sim.dataset)?;
            let cfg = SamplerConfig { seed, ..config.clone() };
            let draws = run_chains(&data, &cfg)?;
            let all: Vec<&Draw> = draws.iter().collect();
            let order = all
                .iter()
                .filter(|d| d.hypers.nu[Coverage::WeightedNational.index()] < d.hypers.nu[Coverage::Community.index()])
                .count() as f64
                / all.len() as f64;
            Ok(Replicate {
                seed,
                estimates: score_fit(targets, &all, (&sim.truth.state, &sim.truth.hypers)),
                p_nu_order: order,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = reps.len() as f64;
    let summary = targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let zs: Vec<f64> = reps.iter().map(|r| r.estimates[i].z).collect();
            let mean_z = zs.iter().sum::<f64>() / n;
            let sd_z = if reps.len() > 1 {
                (zs.iter().map(|z| (z - mean_z) * (z - mean_z)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                f64::NAN
            };
            TargetRecovery {
                target: t.name(),
                coverage: reps.iter().filter(|r| r.estimates[i].covered).count() as f64 / n,
                mean_z,
                sd_z,
            }
        })
        .collect();
    Ok(RecoveryReport {
        replicates: reps,
        targets: summary,
    })
}
