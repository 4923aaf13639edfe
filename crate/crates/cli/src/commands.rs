use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use trendfuse::geo_data::{write_atomic, AgeGroup, Dataset, GeoHierarchy, PopulationTable};
use trendfuse::inference::{
    age_standardize, aggregate, predict_grid, slopes_csv, summaries_csv, summarize, trend_svg, variance_decomposition, GeoGrid,
    TrendSummary,
};
use trendfuse::model::{Level, ModelData};
use trendfuse::sampler::storage::{read_fit, write_fit, FitSidecar, RHAT_THRESHOLD};
use trendfuse::sampler::{extend_chains, run_chains, PosteriorDraws};
use trendfuse::validation::recovery::RecoveryTarget;
use trendfuse::validation::{cross_validate, posterior_predictive_check, recover_parameters, simulate_dataset, PpcStatistic};

use crate::config::{RunConfig, WindowSection};
use crate::{CliError, Status};

const CONFIG_ECHO: &str = "config.toml";

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(CONFIG_ECHO), cfg.to_toml()?.as_bytes())?;
    Ok(())
}

fn json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    Ok(serde_json::to_vec_pretty(value).map_err(trendfuse::Error::from)?)
}

fn load_inputs(cfg: &RunConfig) -> Result<(Dataset, PopulationTable), CliError> {
    let paths = cfg.input_paths()?;
    let window = cfg.window()?;
    let ds = Dataset::load(&paths, window)?;
    let pop = PopulationTable::load(&paths.population, &paths.standard_pop, &ds.hierarchy)?;
    Ok((ds, pop))
}

pub fn simulate(cfg: &RunConfig) -> Result<Status, CliError> {
    let spec = cfg.spec();
    let sim = simulate_dataset(&spec)?;
    sim.write(&cfg.out)?;
    let mut echo = cfg.clone();
    echo.simulate = Some(spec.clone());
    echo.window = Some(WindowSection {
        start: spec.window.t_min,
        end: spec.window.t_max,
    });
    if echo.input == Default::default() {
        echo.input.dir = Some(cfg.out.clone());
    }
    echo_config(&echo, &cfg.out)?;
    println!(
        "wrote {} studies for {} countries ({} without data) to {}",
        sim.dataset.studies.len(),
        sim.dataset.hierarchy.n_countries(),
        sim.truth.dataless_countries.len(),
        cfg.out.display()
    );
    Ok(Status::Ok)
}

fn print_rhat(side: &FitSidecar) {
    println!("{:<16} {:>8} {:>8}", "parameter", "split", "rank");
    for r in &side.rhat {
        println!("{:<16} {:>8.4} {:>8.4}", r.name, r.split, r.rank_normalized);
    }
    println!("max split R-hat {:.4} (rank-normalized {:.4})", side.max_rhat, side.max_rank_rhat);
}

pub fn fit(cfg: &RunConfig, resume: bool) -> Result<Status, CliError> {
    let (ds, _) = load_inputs(cfg)?;
    let data = ModelData::new(&ds)?;
    let start = Instant::now();
    let mut sampler = cfg.sampler.clone();
    let draws = if resume {
        let (side, mut draws) = read_fit(&cfg.out)?;
        if side.dims != data.dims {
            return Err(CliError::Usage(format!(
                "existing fit in {} was made on different data",
                cfg.out.display()
            )));
        }
        sampler.seed = side.seed;
        extend_chains(&data, &sampler, &mut draws)?;
        sampler.n_chains = draws.chains.len();
        draws
    } else {
        run_chains(&data, &sampler)?
    };
    let side = write_fit(&cfg.out, &sampler, &draws, start.elapsed().as_secs_f64())?;
    let mut echo = cfg.clone();
    echo.sampler = sampler;
    echo_config(&echo, &cfg.out)?;
    print_rhat(&side);
    if !side.converged {
        eprintln!(
            "warning: max split R-hat {:.4} is above {RHAT_THRESHOLD}; chains may not have converged",
            side.max_rhat
        );
    }
    println!("{} chains, {} draws in {:.1}s", draws.chains.len(), draws.n_draws(), side.runtime_secs);
    Ok(Status::Ok)
}

fn check_dims(draws: &PosteriorDraws, h: &GeoHierarchy, years: usize) -> Result<(), CliError> {
    let d = draws.dims;
    if d.countries != h.n_countries() || d.subregions != h.n_subregions() || d.regions != h.n_regions() || d.years != years {
        return Err(CliError::Usage(format!(
            "draws cover {} countries, {} subregions, {} regions and {} years; inputs have {}, {}, {} and {}",
            d.countries,
            d.subregions,
            d.regions,
            d.years,
            h.n_countries(),
            h.n_subregions(),
            h.n_regions(),
            years
        )));
    }
    Ok(())
}

fn level_name(level: Level) -> &'static str {
    match level {
        Level::Country => "country",
        Level::Subregion => "subregion",
        Level::Region => "region",
        Level::Globe => "globe",
    }
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

pub fn report(cfg: &RunConfig) -> Result<Status, CliError> {
    let (ds, pop) = load_inputs(cfg)?;
    let fit_dir: PathBuf = cfg.report.draws.clone().unwrap_or_else(|| cfg.out.clone());
    let (_, draws) = read_fit(&fit_dir)?;
    check_dims(&draws, &ds.hierarchy, ds.window.len())?;
    let ages = cfg.ages().unwrap_or_else(|| pop.age_groups().to_vec());
    let seed = cfg.report.prediction_seed;
    let include = cfg.report.include_study_effect;
    let grid = predict_grid(&draws, &ds.hierarchy, &ds.covariates, ds.window, &ages, include, seed)?.grid;
    let standard = ages.as_slice() == pop.age_groups();

    // everything is computed before the first file is written
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    let mut plots: Vec<(String, TrendSummary)> = Vec::new();
    for level in Level::ALL {
        let name = level_name(level);
        let g: GeoGrid = aggregate(&grid, &ds.hierarchy, &pop, level)?;
        let by_age = summarize(&g)?;
        files.push((cfg.out.join(format!("predictions_{name}.csv")), summaries_csv(&by_age)?));
        let slopes = if standard {
            let s = summarize(&age_standardize(&g, pop.standard_weights())?)?;
            files.push((cfg.out.join(format!("standardized_{name}.csv")), summaries_csv(&s)?));
            for t in &s {
                plots.push((format!("{name}_{}", file_safe(&t.geography)), t.clone()));
            }
            s
        } else {
            by_age
        };
        files.push((cfg.out.join(format!("slopes_{name}.csv")), slopes_csv(&slopes)?));
    }
    let r = cfg.report.reference_age;
    let reference = AgeGroup::new(r - 5.0, r + 5.0);
    let ref_grid = predict_grid(&draws, &ds.hierarchy, &ds.covariates, ds.window, &[reference], include, seed)?.grid;
    let table = variance_decomposition(&ref_grid, &ds.hierarchy, 0)?;
    files.push((cfg.out.join("decomposition.csv"), table.to_csv()?));
    files.push((cfg.out.join("decomposition_long.csv"), table.to_long_csv()?));
    if cfg.report.svg {
        for (stem, s) in &plots {
            files.push((cfg.out.join("plots").join(format!("{stem}.svg")), trend_svg(s).into_bytes()));
        }
    }

    std::fs::create_dir_all(&cfg.out)?;
    if cfg.report.svg {
        std::fs::create_dir_all(cfg.out.join("plots"))?;
    }
    for (path, bytes) in &files {
        write_atomic(path, bytes)?;
    }
    echo_config(cfg, &cfg.out)?;
    println!("wrote {} files to {}", files.len(), cfg.out.display());
    Ok(Status::Ok)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Check {
    CrossVal,
    Ppc,
    Recovery,
}

fn parse_checks(names: &[String]) -> Result<Vec<Check>, CliError> {
    let mut out = Vec::new();
    for n in names {
        let c = match n.trim() {
            "crossval" => Check::CrossVal,
            "ppc" => Check::Ppc,
            "recovery" => Check::Recovery,
            "none" => return Err(CliError::Usage("`--checks none` leaves nothing to validate".into())),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown check `{other}`; expected crossval, ppc or recovery"
                )))
            }
        };
        if !out.contains(&c) {
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("no checks requested".into()));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct GateSummary {
    check: &'static str,
    passed: bool,
    detail: String,
}

pub fn validate(cfg: &RunConfig) -> Result<Status, CliError> {
    let checks = parse_checks(&cfg.validate.checks)?;
    let v = &cfg.validate;
    let needs_data = checks.iter().any(|c| *c != Check::Recovery);
    let inputs = if needs_data { Some(load_inputs(cfg)?) } else { None };
    let mut gates = Vec::new();
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    for check in checks {
        match check {
            Check::CrossVal => {
                let (ds, _) = inputs.as_ref().expect("loaded");
                let rep = cross_validate(ds, &cfg.sampler, v.mask_fraction, v.allow_empty_levels)?;
                let passed = rep.n_masked_studies == 0 || rep.within(v.coverage_bounds[0], v.coverage_bounds[1]);
                gates.push(GateSummary {
                    check: "crossval",
                    passed,
                    detail: format!(
                        "coverage {:.3} over {} rows, bounds [{}, {}]",
                        rep.coverage, rep.n_masked_rows, v.coverage_bounds[0], v.coverage_bounds[1]
                    ),
                });
                files.push((cfg.out.join("crossval.json"), json(&rep)?));
                files.push((cfg.out.join("crossval.txt"), rep.summary_text().into_bytes()));
            }
            Check::Ppc => {
                let (ds, pop) = inputs.as_ref().expect("loaded");
                let data = ModelData::new(ds)?;
                let draws = run_chains(&data, &cfg.sampler)?;
                let rep = posterior_predictive_check(&data, &draws, &PpcStatistic::ALL, pop.age_groups(), cfg.seed)?;
                let passed = rep.all_within(v.ppc_bounds[0], v.ppc_bounds[1]);
                let worst = rep
                    .results
                    .iter()
                    .map(|r| r.p_value)
                    .fold((1.0f64, 0.0f64), |(lo, hi), p| (lo.min(p), hi.max(p)));
                gates.push(GateSummary {
                    check: "ppc",
                    passed,
                    detail: format!(
                        "p-values in [{:.3}, {:.3}], bounds ({}, {})",
                        worst.0, worst.1, v.ppc_bounds[0], v.ppc_bounds[1]
                    ),
                });
                files.push((cfg.out.join("ppc.json"), json(&rep)?));
                files.push((cfg.out.join("ppc.txt"), rep.summary_text().into_bytes()));
            }
            Check::Recovery => {
                let rep = recover_parameters(&cfg.spec(), &cfg.sampler, &RecoveryTarget::standard(), v.replicates)?;
                let passed = rep
                    .targets
                    .iter()
                    .all(|t| t.coverage >= 0.90 && t.mean_z.abs() < v.max_abs_mean_z);
                gates.push(GateSummary {
                    check: "recovery",
                    passed,
                    detail: format!("{} replicates, {} targets", rep.replicates.len(), rep.targets.len()),
                });
                files.push((cfg.out.join("recovery.json"), json(&rep)?));
                files.push((cfg.out.join("recovery.txt"), rep.summary_text().into_bytes()));
            }
        }
    }
    files.push((cfg.out.join("validate.json"), json(&gates)?));
    std::fs::create_dir_all(&cfg.out)?;
    for (path, bytes) in &files {
        write_atomic(path, bytes)?;
    }
    echo_config(cfg, &cfg.out)?;
    for g in &gates {
        println!("{}: {} ({})", g.check, if g.passed { "pass" } else { "FAIL" }, g.detail);
    }
    Ok(if gates.iter().all(|g| g.passed) {
        Status::Ok
    } else {
        Status::CalibrationFailed
    })
}
