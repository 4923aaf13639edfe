//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints a single PASS/FAIL line even when output is captured.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use trendfuse::diagnostics::split_rhat;
use trendfuse::geo_data::{AgeGroup, AgeRow, Coverage, CovariateTable, Dataset, GeoHierarchy, PopulationTable, StudyRecord, Window};
use trendfuse::gmrf::build_rw2_precision;
use trendfuse::inference::{
    aggregate, age_standardize, decompose_draw, linearize_trend, predict_grid, variance_decomposition, DecompositionTable,
    GeoGrid,
};
use trendfuse::model::{age_basis, HyperId, HyperParams, Level, ModelData, ParamState};
use trendfuse::sampler::storage::{chain_file_name, write_fit};
use trendfuse::sampler::{run_chains, Block, SamplerConfig};
use trendfuse::validation::recovery::RecoveryTarget;
use trendfuse::validation::{cross_validate, recover_parameters, simulate_dataset, SyntheticSpec};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn fixture_config(seed: u64) -> SamplerConfig {
    SamplerConfig {
        n_chains: 4,
        n_burnin: 500,
        n_iter: 2000,
        seed,
        ..Default::default()
    }
}

// 1 ---------------------------------------------------------------------------

fn conjugate_oracle() -> Outcome {
    let h = GeoHierarchy::from_indices(vec![0], vec![0]).unwrap();
    let w = Window::new(2000, 2004).unwrap();
    let cov = CovariateTable::from_series(&h, w, vec![(1990, vec![[1.0, 0.5, 0.0, 0.0, 0.0, 0.0]; 15])]).unwrap();
    // one row at age 45-55: midpoint 50, so the age terms vanish with ψ = φ = c = 0
    let (y, s, n) = (3.0, 10.0, 100);
    let row = AgeRow::new(45.0, 55.0, y, s, n).unwrap();
    let study = StudyRecord {
        study_id: "only".into(),
        country: 0,
        year: 2002,
        coverage: Coverage::WeightedNational,
        study_urbanization: 0.5,
        rows: vec![row],
    };
    let ds = Dataset::new(h, w, vec![study], cov).unwrap();
    let data = ModelData::new(&ds).unwrap();
    let kappa = 4.0;
    let tau2 = 1.0;
    let hypers = HyperParams {
        kappa_a: [kappa, 1.0, 1.0],
        kappa_b: [0.01, 0.01, 0.01],
        lambda: [1.0, 1.0, 1.0, 1.0],
        nu: [1.0, 2.0, 3.0, 4.0],
        tau2: [tau2, 2.0, 3.0, 4.0],
        sigma2: [1e-3, 1e-4, 1e-5, 1e-6, 1e-7],
    };
    let state = ParamState::zeros(data.dims);
    let draws_n = 10_000;
    let cfg = SamplerConfig {
        n_chains: 1,
        n_burnin: 10,
        n_iter: draws_n,
        seed: 17,
        initial: Some(Box::new((state, hypers))),
        ..Default::default()
    }
    .only(&[Block::AC], &[]);
    let draws = run_chains(&data, &cfg).map_err(|e| e.to_string())?;
    let a: Vec<f64> = draws.pooled(|d| d.state.a_c[0]);
    let v = (s * s) / n as f64 + tau2;
    let post_var = 1.0 / (1.0 / kappa + 1.0 / v);
    let post_mean = post_var * y / v;
    let m = a.iter().sum::<f64>() / a.len() as f64;
    let var = a.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (a.len() - 1) as f64;
    let se_mean = (post_var / a.len() as f64).sqrt();
    let se_var = post_var * (2.0 / (a.len() - 1) as f64).sqrt();
    let zm = (m - post_mean) / se_mean;
    let zv = (var - post_var) / se_var;
    check(
        a.len() == draws_n && zm.abs() < 4.0 && zv.abs() < 4.0,
        format!("mean {m:.4} vs {post_mean:.4} ({zm:+.2} SE), var {var:.4} vs {post_var:.4} ({zv:+.2} SE)"),
    )
}

// 2 ---------------------------------------------------------------------------

fn rw2_structure() -> Outcome {
    let mut worst_null = 0.0f64;
    let mut band_ok = true;
    let mut sym_ok = true;
    for t in [3usize, 5, 29, 100] {
        let p = build_rw2_precision::<f64>(t).map_err(|e| e.to_string())?;
        let m = p.matrix();
        for i in 0..t {
            let (mut c, mut l) = (0.0, 0.0);
            for j in 0..t {
                c += m[(i, j)];
                l += m[(i, j)] * j as f64;
                if i.abs_diff(j) > 2 && m[(i, j)] != 0.0 {
                    band_ok = false;
                }
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 {
                    sym_ok = false;
                }
            }
            worst_null = worst_null.max(c.abs()).max(l.abs());
        }
    }
    let sim = simulate_dataset(&SyntheticSpec::standard(2)).unwrap();
    let data = ModelData::new(&sim.dataset).unwrap();
    let cfg = SamplerConfig {
        n_chains: 2,
        n_burnin: 200,
        n_iter: 500,
        seed: 2,
        ..Default::default()
    };
    let draws = run_chains(&data, &cfg).map_err(|e| e.to_string())?;
    let worst_u = draws.iter().map(|d| d.state.max_constraint_violation()).fold(0.0, f64::max);
    check(
        worst_null < 1e-10 && band_ok && sym_ok && worst_u < 1e-8,
        format!(
            "null-space residual {worst_null:.1e}, banded {band_ok}, symmetric {sym_ok}, max u constraint violation {worst_u:.1e} over {} draws",
            draws.n_draws()
        ),
    )
}

// 3 ---------------------------------------------------------------------------

fn ks_uniform(x: &[f64], lo: f64, hi: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, v)| {
            let f = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn prior_reproduction() -> Outcome {
    let sim = simulate_dataset(&SyntheticSpec::standard(5)).unwrap();
    let empty = sim.dataset.without_studies();
    let data = ModelData::new(&empty).unwrap();
    let cfg = SamplerConfig {
        n_chains: 4,
        n_burnin: 500,
        n_iter: 10_000,
        seed: 5,
        ..Default::default()
    };
    let draws = run_chains(&data, &cfg).map_err(|e| e.to_string())?;
    let ordered = draws.iter().all(|d| d.hypers.is_valid());
    let mut worst = (String::new(), 0.0f64);
    for l in Level::RANDOM {
        for id in [HyperId::KappaA(l), HyperId::KappaB(l)] {
            let sd: Vec<f64> = draws.pooled(|d| d.hypers.get(id).sqrt());
            let ks = ks_uniform(&sd, 0.0, 1000.0);
            if ks > worst.1 {
                worst = (id.name(), ks);
            }
        }
    }
    check(
        worst.1 < 0.05 && ordered,
        format!("largest KS distance {:.4} ({}), ordering held in all {} draws: {ordered}", worst.1, worst.0, draws.n_draws()),
    )
}

// 4 ---------------------------------------------------------------------------

fn parameter_recovery() -> Outcome {
    let spec = SyntheticSpec::standard(1000);
    let cfg = SamplerConfig {
        n_chains: 2,
        n_burnin: 500,
        n_iter: 2000,
        ..Default::default()
    };
    let rep = recover_parameters(&spec, &cfg, &RecoveryTarget::standard(), 50).map_err(|e| e.to_string())?;
    let ok = rep
        .targets
        .iter()
        .all(|t| (0.90..=1.0).contains(&t.coverage) && t.mean_z.abs() < 0.5);
    let detail = rep
        .targets
        .iter()
        .map(|t| format!("{} cov {:.2} z {:+.2}", t.target, t.coverage, t.mean_z))
        .collect::<Vec<_>>()
        .join(", ");
    check(ok, format!("{} replicates: {detail}", rep.replicates.len()))
}

// 5 ---------------------------------------------------------------------------

fn cross_validation() -> Outcome {
    let sim = simulate_dataset(&SyntheticSpec::standard(7)).unwrap();
    let rep = cross_validate(&sim.dataset, &fixture_config(7), 0.2, false).map_err(|e| e.to_string())?;
    check(
        rep.within(0.90, 0.99),
        format!(
            "coverage {:.3} over {} rows of {} masked studies, mean width {:.2}",
            rep.coverage, rep.n_masked_rows, rep.n_masked_studies, rep.mean_width
        ),
    )
}

// 6 ---------------------------------------------------------------------------

fn decomposition() -> Outcome {
    let pm = decompose_draw(&[vec![1.0; 6], vec![-1.0; 6]], &[0, 1], &[0, 1]).map_err(|e| e.to_string())?;
    let others: f64 = pm.iter().flatten().sum::<f64>() - pm[0][2];
    let constructed = (pm[0][2] - 100.0).abs() < 1e-12 && others.abs() < 1e-12;

    let sim = simulate_dataset(&SyntheticSpec::standard(6)).unwrap();
    let ds = &sim.dataset;
    let data = ModelData::new(ds).unwrap();
    let cfg = SamplerConfig {
        n_chains: 2,
        n_burnin: 200,
        n_iter: 500,
        seed: 6,
        ..Default::default()
    };
    let draws = run_chains(&data, &cfg).map_err(|e| e.to_string())?;
    let grid = predict_grid(&draws, &ds.hierarchy, &ds.covariates, ds.window, &[AgeGroup::new(45.0, 55.0)], false, 6)
        .map_err(|e| e.to_string())?
        .grid;
    let table = variance_decomposition(&grid, &ds.hierarchy, 0).map_err(|e| e.to_string())?;
    let worst = table
        .draws
        .iter()
        .map(|s| (s.iter().flatten().sum::<f64>() - 100.0).abs())
        .fold(0.0, f64::max);
    let csv = String::from_utf8(table.to_csv().map_err(|e| e.to_string())?).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    let rows: Vec<&str> = lines.iter().skip(1).map(|l| l.split(',').next().unwrap_or("")).collect();
    let layout = lines.first() == Some(&",Country,Subregion,Region,Globe,Total")
        && rows == DecompositionTable::ROWS
        && table.cells[0][3].is_none()
        && table.cells[3][4].is_none();
    check(
        constructed && worst < 1e-9 && layout,
        format!("two-region case Mean x Region {:.6}%, worst per-draw sum error {worst:.1e}, table layout ok: {layout}", pm[0][2]),
    )
}

// 7 ---------------------------------------------------------------------------

fn functionals() -> Outcome {
    let years: Vec<i32> = (1980..2009).collect();
    let lin: Vec<f64> = years.iter().map(|&y| 100.0 + 0.5 * (y - 1980) as f64).collect();
    let slope = linearize_trend(&years, &[lin]).map_err(|e| e.to_string())?[0];

    let h = GeoHierarchy::from_indices(vec![0, 0, 1], vec![0, 0]).unwrap();
    let ages = vec![AgeGroup::new(30.0, 44.0), AgeGroup::new(45.0, 59.0), AgeGroup::new(60.0, 74.0)];
    let mut pop = PopulationTable::new(ages.clone(), vec![0.5, 0.3, 0.2]).unwrap();
    let counts = [[3.0, 2.0, 1.0], [1.0, 4.0, 2.5], [7.0, 1.0, 1.0]];
    let mut g = GeoGrid::zeros(vec!["C0".into(), "C1".into(), "C2".into()], vec![2000], ages.clone(), 1);
    let vals = [[121.3, 128.9, 140.2], [118.7, 126.1, 137.5], [124.4, 131.0, 139.9]];
    for j in 0..3 {
        for a in 0..3 {
            pop.insert(j, 2000, a, counts[j][a]).unwrap();
            g.set(0, j, 0, a, vals[j][a]);
        }
    }
    let agg = aggregate(&g, &h, &pop, Level::Globe).map_err(|e| e.to_string())?;
    let mut agg_err = 0.0f64;
    for a in 0..3 {
        let total: f64 = (0..3).map(|j| counts[j][a]).sum();
        let hand: f64 = (0..3).map(|j| counts[j][a] / total * vals[j][a]).sum();
        agg_err = agg_err.max((agg.get(0, 0, 0, a) - hand).abs());
    }
    let w = [0.5, 0.3, 0.2];
    let std = age_standardize(&g, &w).map_err(|e| e.to_string())?;
    let mut std_err = 0.0f64;
    for j in 0..3 {
        let dot: f64 = (0..3).map(|a| w[a] * vals[j][a]).sum();
        std_err = std_err.max((std.get(0, j, 0, 0) - dot).abs());
    }
    check(
        (slope - 0.5).abs() < 1e-12 && agg_err < 1e-12 && std_err < 1e-12,
        format!("slope {slope}, aggregation error {agg_err:.1e}, standardization error {std_err:.1e}"),
    )
}

// 8 ---------------------------------------------------------------------------

fn convergence() -> Outcome {
    let sim = simulate_dataset(&SyntheticSpec::standard(8)).unwrap();
    let data = ModelData::new(&sim.dataset).unwrap();
    let draws = run_chains(&data, &fixture_config(8)).map_err(|e| e.to_string())?;
    let table = draws.rhat_table();
    let hyper: Vec<_> = table.iter().take(HyperId::all().len()).collect();
    let worst = hyper.iter().max_by(|a, b| a.split.total_cmp(&b.split)).unwrap();
    let worst_rank = hyper.iter().map(|r| r.rank_normalized).fold(0.0, f64::max);
    // recompute one entry directly as a cross-check on the table
    let direct = split_rhat(&draws.series(|d| d.hypers.get(HyperId::all()[0])));
    check(
        hyper.len() == 23 && hyper.iter().all(|r| r.split < 1.05) && (direct - hyper[0].split).abs() < 1e-12,
        format!(
            "max split R-hat {:.4} ({}) over 23 hyperparameters; max rank-normalized {:.4}",
            worst.split, worst.name, worst_rank
        ),
    )
}

// 9 ---------------------------------------------------------------------------

fn determinism() -> Outcome {
    let sim = simulate_dataset(&SyntheticSpec::standard(9)).unwrap();
    let data = ModelData::new(&sim.dataset).unwrap();
    let cfg = fixture_config(9);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let draws = run_chains(&data, &cfg).map_err(|e| e.to_string())?;
        write_fit(d.path(), &cfg, &draws, 0.0).map_err(|e| e.to_string())?;
    }
    let mut same = true;
    let mut bytes = 0;
    for c in 0..cfg.n_chains as u64 {
        let a = std::fs::read(dirs[0].path().join(chain_file_name(c))).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(chain_file_name(c))).map_err(|e| e.to_string())?;
        bytes += a.len();
        same &= a == b;
    }
    check(same, format!("{} chain files, {bytes} bytes, identical: {same}", cfg.n_chains))
}

// 10 --------------------------------------------------------------------------

fn spline() -> Outcome {
    let values = age_basis(45.0) == [-5.0, 25.0, -125.0, 0.0, 0.0]
        && age_basis(50.0) == [0.0, 0.0, 0.0, 125.0, 0.0]
        && age_basis(60.0) == [10.0, 100.0, 1000.0, 3375.0, 0.0];
    // step large enough that rounding in the second difference stays below 1e-7
    let h = 1e-2;
    let delta = 1e-12;
    let mut worst = 0.0f64;
    for knot in [45.0, 60.0] {
        for s in 0..5 {
            let f = |z: f64| age_basis(z)[s];
            let d1 = |z: f64| (f(z + h) - f(z - h)) / (2.0 * h);
            let d2 = |z: f64| (f(z + h) - 2.0 * f(z) + f(z - h)) / (h * h);
            worst = worst
                .max((f(knot - delta) - f(knot + delta)).abs())
                .max((d1(knot - delta) - d1(knot + delta)).abs())
                .max((d2(knot - delta) - d2(knot + delta)).abs());
        }
    }
    check(values && worst < 1e-6, format!("basis vectors match: {values}, largest jump in value/d1/d2 at knots {worst:.1e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("conjugate oracle", conjugate_oracle, Duration::from_secs(10)),
        ("RW2 structure", rw2_structure, Duration::from_secs(5)),
        ("prior reproduction", prior_reproduction, Duration::from_secs(120)),
        ("parameter recovery", parameter_recovery, Duration::from_secs(7200)),
        ("cross-validation calibration", cross_validation, Duration::from_secs(1200)),
        ("decomposition exactness", decomposition, Duration::from_secs(60)),
        ("functional correctness", functionals, Duration::from_secs(1)),
        ("convergence gate", convergence, Duration::from_secs(1800)),
        ("determinism", determinism, Duration::from_secs(300)),
        ("spline checks", spline, Duration::from_secs(1)),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if elapsed <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {}s budget", budget.as_secs())),
            Err(d) => (false, d),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {name}: {} ({detail}; {:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
