use trendfuse::model::ModelData;
use trendfuse::sampler::{run_chains, SamplerConfig};
use trendfuse::validation::crossval::predict_masked;
use trendfuse::validation::recovery::RecoveryTarget;
use trendfuse::validation::{
    cross_validate, mask_studies, posterior_predictive_check, recover_parameters, simulate_dataset, PpcStatistic,
    SyntheticSpec,
};

fn short(seed: u64) -> SamplerConfig {
    SamplerConfig {
        n_chains: 2,
        n_burnin: 300,
        n_iter: 700,
        seed,
        ..Default::default()
    }
}

#[test]
fn masking_is_deterministic_and_keeps_every_subregion() {
    let sim = simulate_dataset(&SyntheticSpec::standard(8)).unwrap();
    let ds = &sim.dataset;
    let a = mask_studies(ds, 0.2, 42, false).unwrap();
    let b = mask_studies(ds, 0.2, 42, false).unwrap();
    let c = mask_studies(ds, 0.2, 43, false).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let n = a.iter().filter(|m| **m).count();
    assert_eq!(n, (0.2 * ds.studies.len() as f64).round() as usize);
    for k in 0..ds.hierarchy.n_subregions() {
        let had = ds.studies.iter().any(|s| ds.hierarchy.subregion_of(s.country) == k);
        let kept = ds
            .studies
            .iter()
            .zip(&a)
            .any(|(s, m)| !m && ds.hierarchy.subregion_of(s.country) == k);
        assert_eq!(had, kept);
    }
    assert!(mask_studies(ds, 0.0, 1, false).is_err());
    assert!(mask_studies(ds, 0.6, 1, false).is_err());
}

#[test]
fn zero_masking_gives_empty_report() {
    let sim = simulate_dataset(&SyntheticSpec::standard(8)).unwrap();
    let rep = cross_validate(&sim.dataset, &short(1), 0.0, false).unwrap();
    assert_eq!(rep.n_masked_studies, 0);
    assert!(rep.predictions.is_empty());
}

#[test]
fn masked_studies_never_reach_the_likelihood() {
    let mut spec = SyntheticSpec::standard(9);
    spec.studies_per_class = [40, 40, 40, 40];
    let sim = simulate_dataset(&spec).unwrap();
    let ds = &sim.dataset;
    let cfg = SamplerConfig {
        n_chains: 1,
        n_burnin: 20,
        n_iter: 30,
        seed: 5,
        ..Default::default()
    };
    let rep = cross_validate(ds, &cfg, 0.25, false).unwrap();
    let mask = mask_studies(ds, 0.25, cfg.seed, false).unwrap();
    let masked_rows: usize = ds.studies.iter().zip(&mask).filter(|(_, m)| **m).map(|(s, _)| s.rows.len()).sum();
    let total: usize = ds.studies.iter().map(|s| s.rows.len()).sum();
    assert_eq!(rep.n_masked_rows, masked_rows);
    assert_eq!(rep.n_fit_rows, total - masked_rows);
    assert_eq!(rep.predictions.len(), masked_rows);
    for p in &rep.predictions {
        assert!(p.lo95 <= p.mean && p.mean <= p.hi95);
    }
}

#[test]
fn predictive_intervals_widen_with_class_variance() {
    let sim = simulate_dataset(&SyntheticSpec::standard(12)).unwrap();
    let ds = &sim.dataset;
    let data = ModelData::new(ds).unwrap();
    let draws = run_chains(&data, &short(12)).unwrap();
    let preds = predict_masked(ds, &draws, 3).unwrap();
    let width = |cls: &str| {
        let w: Vec<f64> = preds
            .iter()
            .filter(|p| p.coverage.as_str() == cls)
            .map(|p| p.hi95 - p.lo95)
            .collect();
        w.iter().sum::<f64>() / w.len() as f64
    };
    // truth has ν and τ² doubling from class to class
    assert!(width("weighted_national") < width("subnational"));
    assert!(width("subnational") < width("community"));
}

#[test]
fn ppc_on_model_generated_data_is_unremarkable() {
    let sim = simulate_dataset(&SyntheticSpec::standard(2)).unwrap();
    let data = ModelData::new(&sim.dataset).unwrap();
    let draws = run_chains(&data, &short(2)).unwrap();
    let bands = &sim.truth.spec.age_groups;
    let rep = posterior_predictive_check(&data, &draws, &PpcStatistic::ALL, bands, 2).unwrap();
    // 4 classes, 5 bands twice, 4 subregions
    assert_eq!(rep.results.len(), 18);
    assert!(rep.all_within(0.01, 0.99), "{}", rep.summary_text());
    assert!(posterior_predictive_check(&data, &draws, &[], bands, 2).unwrap().results.is_empty());
}

#[test]
fn ppc_detects_unmodeled_age_by_time_interaction() {
    let mut sim = simulate_dataset(&SyntheticSpec::standard(2)).unwrap();
    let window = sim.dataset.window;
    for s in &mut sim.dataset.studies {
        let tc = window.centered(s.year);
        for row in &mut s.rows {
            row.y += 0.3 * (row.z - 50.0) * tc;
        }
    }
    let data = ModelData::new(&sim.dataset).unwrap();
    let draws = run_chains(&data, &short(2)).unwrap();
    let rep = posterior_predictive_check(
        &data,
        &draws,
        &[PpcStatistic::AgeGroupTimeTrend],
        &sim.truth.spec.age_groups,
        2,
    )
    .unwrap();
    let p = rep.min_p(PpcStatistic::AgeGroupTimeTrend).unwrap();
    assert!(p < 0.01, "{}", rep.summary_text());
}

#[test]
fn recovery_report_shape_and_nu_ordering() {
    let spec = SyntheticSpec::standard(30);
    let rep = recover_parameters(&spec, &short(0), &RecoveryTarget::standard(), 2).unwrap();
    assert_eq!(rep.replicates.len(), 2);
    let names: Vec<&str> = rep.targets.iter().map(|t| t.target.as_str()).collect();
    assert_eq!(names, ["a_g", "b_g", "beta_1", "nu_c", "tau2_w"]);
    assert_eq!(rep.replicates.iter().map(|r| r.seed).collect::<Vec<_>>(), [30, 31]);
    for r in &rep.replicates {
        // ν_c is eight times ν_w in the fixture truth
        assert!(r.p_nu_order > 0.99, "P(nu_w < nu_c) = {}", r.p_nu_order);
        for e in &r.estimates {
            assert!(e.sd > 0.0 && e.lo95 <= e.hi95);
        }
    }
    let mut tiny = spec.clone();
    tiny.studies_per_class = [10, 10, 10, 10];
    assert!(recover_parameters(&tiny, &short(0), &RecoveryTarget::standard(), 1).is_err());
}
