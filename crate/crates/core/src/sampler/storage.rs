//! Draw files (one CSV per chain) and the JSON run sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IngestError, IngestErrorKind, Result};
use crate::geo_data::write_atomic;
use crate::model::{Dims, HyperParams, ParamState, N_HYPER};

use super::{ChainDraws, Draw, PosteriorDraws, RhatRow, SamplerConfig};

pub fn chain_file_name(stream: u64) -> String {
    format!("draws_chain{stream}.csv")
}

pub const SIDECAR_NAME: &str = "fit.json";

fn header(dims: Dims) -> Vec<String> {
    let mut h = vec!["iteration".to_string(), "log_posterior".to_string()];
    h.extend(HyperParams::names());
    h.extend(ParamState::column_names(dims));
    h
}

/// Serializes one chain. Numbers use the shortest representation that
/// round-trips, so identical draws give identical bytes.
pub fn chain_csv_bytes(dims: Dims, chain: &ChainDraws) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(dims))?;
    for d in &chain.draws {
        let mut rec = Vec::with_capacity(2 + N_HYPER);
        rec.push(d.iteration.to_string());
        rec.push(d.log_posterior.to_string());
        rec.extend(d.hypers.to_vec().iter().map(f64::to_string));
        rec.extend(d.state.to_flat().iter().map(f64::to_string));
        w.write_record(rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

pub fn write_chain_csv(path: &Path, dims: Dims, chain: &ChainDraws) -> Result<()> {
    write_atomic(path, &chain_csv_bytes(dims, chain)?)
}

pub fn read_chain_csv(path: &Path, dims: Dims, stream: u64) -> Result<ChainDraws> {
    let err = |line: Option<u64>, kind| Error::from(IngestError::new(path, line, kind));
    let mut rdr = csv::Reader::from_path(path)?;
    let expected = header(dims);
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if found != expected {
        return Err(err(Some(1), IngestErrorKind::Header {
            expected: format!("{} columns", expected.len()),
            found: format!("{} columns", found.len()),
        }));
    }
    let mut draws = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line());
        let bad = |field: &str, v: &str| {
            err(line, IngestErrorKind::InvalidValue {
                field: field.to_string(),
                value: v.to_string(),
            })
        };
        let iteration: usize = rec[0].parse().map_err(|_| bad("iteration", &rec[0]))?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|_| bad("value", s)))
            .collect::<Result<Vec<f64>>>()?;
        let hypers = HyperParams::from_slice(&vals[1..1 + N_HYPER]);
        let state = ParamState::from_flat(dims, &vals[1 + N_HYPER..]).ok_or_else(|| bad("row", "wrong length"))?;
        draws.push(Draw {
            iteration,
            log_posterior: vals[0],
            state,
            hypers,
        });
    }
    Ok(ChainDraws {
        stream,
        draws,
        acceptance: Default::default(),
        runtime_secs: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub stream: u64,
    pub file: String,
    pub n_draws: usize,
    pub acceptance: std::collections::BTreeMap<String, f64>,
    pub runtime_secs: f64,
}

/// Run metadata written beside the draw files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSidecar {
    pub seed: u64,
    pub dims: Dims,
    pub config: SamplerConfig,
    pub chains: Vec<ChainRecord>,
    pub rhat: Vec<RhatRow>,
    /// Largest split R̂ among the hyperparameters; gates `converged`.
    pub max_rhat: f64,
    /// Largest rank-normalized split R̂ among the hyperparameters, for reference.
    pub max_rank_rhat: f64,
    pub converged: bool,
    pub runtime_secs: f64,
}

pub const RHAT_THRESHOLD: f64 = 1.05;

impl FitSidecar {
    pub fn new(config: &SamplerConfig, draws: &PosteriorDraws, runtime_secs: f64) -> Self {
        let rhat = if draws.chains.len() >= 2 { draws.rhat_table() } else { Vec::new() };
        let max_of = |f: fn(&RhatRow) -> f64| {
            rhat.iter()
                .take(N_HYPER)
                .map(f)
                .filter(|v| !v.is_nan())
                .fold(f64::NAN, f64::max)
        };
        let max_rhat = max_of(|r| r.split);
        let max_rank_rhat = max_of(|r| r.rank_normalized);
        Self {
            seed: draws.seed,
            dims: draws.dims,
            config: config.clone(),
            chains: draws
                .chains
                .iter()
                .map(|c| ChainRecord {
                    stream: c.stream,
                    file: chain_file_name(c.stream),
                    n_draws: c.draws.len(),
                    acceptance: c.acceptance.clone(),
                    runtime_secs: c.runtime_secs,
                })
                .collect(),
            rhat,
            max_rhat,
            max_rank_rhat,
            converged: max_rhat < RHAT_THRESHOLD,
            runtime_secs,
        }
    }
}

/// Writes every chain file and the sidecar into `dir`.
pub fn write_fit(dir: &Path, config: &SamplerConfig, draws: &PosteriorDraws, runtime_secs: f64) -> Result<FitSidecar> {
    std::fs::create_dir_all(dir)?;
    for c in &draws.chains {
        write_chain_csv(&dir.join(chain_file_name(c.stream)), draws.dims, c)?;
    }
    let sidecar = FitSidecar::new(config, draws, runtime_secs);
    write_atomic(&dir.join(SIDECAR_NAME), &serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(sidecar)
}

/// Reads a fit directory back: sidecar plus every chain it lists.
pub fn read_fit(dir: &Path) -> Result<(FitSidecar, PosteriorDraws)> {
    let side_path: PathBuf = dir.join(SIDECAR_NAME);
    let bytes = std::fs::read(&side_path)
        .map_err(|e| IngestError::new(&side_path, None, IngestErrorKind::Io(e.to_string())))?;
    let sidecar: FitSidecar = serde_json::from_slice(&bytes)?;
    let mut chains = Vec::new();
    for rec in &sidecar.chains {
        let mut c = read_chain_csv(&dir.join(&rec.file), sidecar.dims, rec.stream)?;
        c.acceptance = rec.acceptance.clone();
        c.runtime_secs = rec.runtime_secs;
        chains.push(c);
    }
    let draws = PosteriorDraws {
        dims: sidecar.dims,
        seed: sidecar.seed,
        chains,
    };
    Ok((sidecar, draws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::testutil::small_data;
    use crate::sampler::run_chains;

    #[test]
    fn round_trip_is_exact() {
        let data = small_data();
        let cfg = SamplerConfig {
            n_chains: 2,
            n_burnin: 5,
            n_iter: 6,
            ..Default::default()
        };
        let draws = run_chains(&data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let side = write_fit(dir.path(), &cfg, &draws, 0.0).unwrap();
        assert_eq!(side.chains.len(), 2);
        let (_, back) = read_fit(dir.path()).unwrap();
        assert_eq!(back.chains[0].draws, draws.chains[0].draws);
        assert_eq!(back.chains[1].draws, draws.chains[1].draws);
        let again = chain_csv_bytes(draws.dims, &back.chains[0]).unwrap();
        assert_eq!(again, std::fs::read(dir.path().join(chain_file_name(0))).unwrap());
    }
}
