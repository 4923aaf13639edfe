//! Posterior functionals: predictive grids, population-weighted aggregates,
//! age standardization, linearized trends and the variance decomposition.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_data::{design_row, write_atomic, AgeGroup, CovariateTable, DesignRow, GeoHierarchy, PopulationTable, Window};
use crate::model::{age_basis, Level};
use crate::sampler::PosteriorDraws;
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// generic kernels

/// `Σ wᵢ xᵢ / Σ wᵢ`, or `None` when the weights sum to zero.
pub fn weighted_mean<T: Scalar>(values: &[T], weights: &[T]) -> Option<T> {
    let total: T = weights.iter().copied().sum();
    if total == T::zero() {
        return None;
    }
    Some(values.iter().zip(weights).map(|(&v, &w)| v * w).sum::<T>() / total)
}

/// Ordinary least squares slope of `y` on `x`; `None` when `x` is constant.
pub fn ols_slope<T: Scalar>(x: &[T], y: &[T]) -> Option<T> {
    assert_eq!(x.len(), y.len());
    let n = T::from_count(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let sxx: T = x.iter().map(|&a| (a - mx) * (a - mx)).sum();
    if sxx == T::zero() {
        return None;
    }
    let sxy: T = x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    Some(sxy / sxx)
}

/// Linear interpolation quantile of sorted data (Hyndman–Fan type 7).
pub fn quantile_sorted<T: Scalar>(sorted: &[T], p: T) -> T {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    let h = (T::from_count(n - 1)) * p;
    let lo = h.floor();
    let i = lo.to_usize().unwrap_or(0).min(n - 1);
    let j = (i + 1).min(n - 1);
    sorted[i] + (h - lo) * (sorted[j] - sorted[i])
}

/// Posterior mean with an equal-tailed 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary<T = f64> {
    pub mean: T,
    pub lo: T,
    pub hi: T,
}

pub fn summarize_draws<T: Scalar>(values: &[T]) -> Summary<T> {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
    let mean = s.iter().copied().sum::<T>() / T::from_count(s.len());
    Summary {
        // clamp so rounding in the mean never falls outside the interval
        mean: mean.max(s[0]).min(s[s.len() - 1]),
        lo: quantile_sorted(&s, T::lit(0.025)),
        hi: quantile_sorted(&s, T::lit(0.975)),
    }
}

// ---------------------------------------------------------------------------
// grids

/// Draws × geography × year × age array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoGrid {
    pub geographies: Vec<String>,
    pub years: Vec<i32>,
    pub ages: Vec<AgeGroup>,
    /// True once ages have been collapsed by standardization.
    pub standardized: bool,
    pub n_draws: usize,
    values: Vec<f64>,
}

impl GeoGrid {
    pub fn zeros(geographies: Vec<String>, years: Vec<i32>, ages: Vec<AgeGroup>, n_draws: usize) -> Self {
        let n = n_draws * geographies.len() * years.len() * ages.len();
        Self {
            geographies,
            years,
            ages,
            standardized: false,
            n_draws,
            values: vec![0.0; n],
        }
    }

    pub fn n_geographies(&self) -> usize {
        self.geographies.len()
    }

    fn draw_len(&self) -> usize {
        self.geographies.len() * self.years.len() * self.ages.len()
    }

    fn index(&self, d: usize, g: usize, t: usize, a: usize) -> usize {
        ((d * self.geographies.len() + g) * self.years.len() + t) * self.ages.len() + a
    }

    pub fn get(&self, d: usize, g: usize, t: usize, a: usize) -> f64 {
        self.values[self.index(d, g, t, a)]
    }

    pub fn set(&mut self, d: usize, g: usize, t: usize, a: usize, v: f64) {
        let i = self.index(d, g, t, a);
        self.values[i] = v;
    }

    /// All draws of one cell.
    pub fn cell(&self, g: usize, t: usize, a: usize) -> Vec<f64> {
        (0..self.n_draws).map(|d| self.get(d, g, t, a)).collect()
    }

    /// One draw of one geography's series over years.
    pub fn series(&self, d: usize, g: usize, a: usize) -> Vec<f64> {
        (0..self.years.len()).map(|t| self.get(d, g, t, a)).collect()
    }

    pub fn age_label(&self, a: usize) -> String {
        if self.standardized {
            "age_standardized".into()
        } else {
            self.ages[a].label()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Covariate setting used for predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub nonnational: bool,
    pub urbanization_difference: f64,
    pub include_study_effect: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionGrid {
    pub grid: GeoGrid,
    pub setting: Counterfactual,
}

/// Predicted mean level for every draw, country, window year and age group
/// under a weighted national study setting. With `include_study_effect` each
/// cell gets a fresh `N(0, ν_w)` study offset; the stream for draw `d` is
/// substream `d` of `seed`.
pub fn predict_grid(
    draws: &PosteriorDraws,
    hierarchy: &GeoHierarchy,
    covariates: &CovariateTable,
    window: Window,
    ages: &[AgeGroup],
    include_study_effect: bool,
    seed: u64,
) -> Result<PredictionGrid> {
    let nj = hierarchy.n_countries();
    if draws.dims.countries != nj || draws.dims.years != window.len() {
        return Err(Error::InvalidArgument(format!(
            "draws have {} countries and {} years, hierarchy/window have {} and {}",
            draws.dims.countries,
            draws.dims.years,
            nj,
            window.len()
        )));
    }
    if ages.is_empty() {
        return Err(Error::InvalidArgument("no age groups requested".into()));
    }
    let years: Vec<i32> = window.years().collect();
    let mut design: Vec<Vec<DesignRow>> = Vec::with_capacity(nj);
    for j in 0..nj {
        design.push(
            years
                .iter()
                .map(|&y| {
                    design_row(covariates, &window, j, y, false, None).map_err(|_| Error::MissingCovariate {
                        country: hierarchy.country_label(j).to_string(),
                        year: y,
                    })
                })
                .collect::<Result<_>>()?,
        );
    }
    let bases: Vec<_> = ages.iter().map(|g| age_basis(g.midpoint())).collect();
    let all: Vec<&crate::sampler::Draw> = draws.iter().collect();
    let mut grid = GeoGrid::zeros(
        (0..nj).map(|j| hierarchy.country_label(j).to_string()).collect(),
        years.clone(),
        ages.to_vec(),
        all.len(),
    );
    let per_draw = grid.draw_len();
    let (ny, na) = (years.len(), ages.len());
    grid.values
        .par_chunks_mut(per_draw.max(1))
        .zip(all.par_iter())
        .enumerate()
        .for_each(|(d, (out, draw))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d as u64);
            let st = &draw.state;
            let nu_w = draw.hypers.nu[0];
            for j in 0..nj {
                let k = hierarchy.subregion_of(j);
                let l = hierarchy.region_of(j);
                for t in 0..ny {
                    let mut mu = st.level(j, k, l, t, window.centered(years[t]), &design[j][t]);
                    if include_study_effect {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mu += nu_w.sqrt() * z;
                    }
                    let gamma = st.gamma(j, mu);
                    for (a, b) in bases.iter().enumerate() {
                        out[(j * ny + t) * na + a] = mu + b.iter().zip(&gamma).map(|(x, g)| x * g).sum::<f64>();
                    }
                }
            }
        });
    Ok(PredictionGrid {
        grid,
        setting: Counterfactual {
            nonnational: false,
            urbanization_difference: 0.0,
            include_study_effect,
        },
    })
}

/// Population-weighted mean of member countries at `level`. `Country`
/// returns the grid unchanged.
pub fn aggregate(grid: &GeoGrid, hierarchy: &GeoHierarchy, population: &PopulationTable, level: Level) -> Result<GeoGrid> {
    if grid.n_geographies() != hierarchy.n_countries() || grid.standardized {
        return Err(Error::InvalidArgument("aggregation needs a country-level, age-specific grid".into()));
    }
    let (labels, members): (Vec<String>, Vec<Vec<usize>>) = match level {
        Level::Country => return Ok(grid.clone()),
        Level::Subregion => (0..hierarchy.n_subregions())
            .map(|k| (hierarchy.subregion_label(k).to_string(), hierarchy.countries_in_subregion(k)))
            .unzip(),
        Level::Region => (0..hierarchy.n_regions())
            .map(|l| (hierarchy.region_label(l).to_string(), hierarchy.countries_in_region(l)))
            .unzip(),
        Level::Globe => (vec!["globe".to_string()], vec![(0..hierarchy.n_countries()).collect()]),
    };
    let age_idx: Vec<usize> = grid
        .ages
        .iter()
        .map(|g| {
            population.age_index(g.lo, g.hi).ok_or_else(|| Error::MissingPopulation {
                country: "*".into(),
                year: grid.years[0],
                age: g.label(),
            })
        })
        .collect::<Result<_>>()?;
    // weights[g][t][a] over members
    let mut weights = Vec::with_capacity(labels.len());
    for (gi, m) in members.iter().enumerate() {
        let mut per_t = Vec::with_capacity(grid.years.len());
        for &year in &grid.years {
            let mut per_a = Vec::with_capacity(grid.ages.len());
            for (a, &pa) in age_idx.iter().enumerate() {
                let w = m
                    .iter()
                    .map(|&j| {
                        population.count(j, year, pa).ok_or_else(|| Error::MissingPopulation {
                            country: hierarchy.country_label(j).to_string(),
                            year,
                            age: grid.ages[a].label(),
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                if w.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::Degenerate(format!(
                        "zero total population in `{}` for {year}, age {}",
                        labels[gi],
                        grid.ages[a].label()
                    )));
                }
                per_a.push(w);
            }
            per_t.push(per_a);
        }
        weights.push(per_t);
    }
    let mut out = GeoGrid::zeros(labels, grid.years.clone(), grid.ages.clone(), grid.n_draws);
    let per_draw = out.draw_len();
    let (ng, ny, na) = (out.n_geographies(), grid.years.len(), grid.ages.len());
    out.values
        .par_chunks_mut(per_draw.max(1))
        .enumerate()
        .for_each(|(d, chunk)| {
            for g in 0..ng {
                for t in 0..ny {
                    for a in 0..na {
                        let vals: Vec<f64> = members[g].iter().map(|&j| grid.get(d, j, t, a)).collect();
                        chunk[(g * ny + t) * na + a] = weighted_mean(&vals, &weights[g][t][a]).expect("positive total");
                    }
                }
            }
        });
    Ok(out)
}

/// Collapses ages with fixed standard weights (`Σ weight · value`).
pub fn age_standardize(grid: &GeoGrid, weights: &[f64]) -> Result<GeoGrid> {
    if grid.standardized || weights.len() != grid.ages.len() {
        return Err(Error::InvalidArgument(format!(
            "{} standard weights for {} age groups",
            weights.len(),
            grid.ages.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument(format!("standard weights sum to {total}, expected 1")));
    }
    let span = AgeGroup::new(
        grid.ages.iter().map(|g| g.lo).fold(f64::INFINITY, f64::min),
        grid.ages.iter().map(|g| g.hi).fold(f64::NEG_INFINITY, f64::max),
    );
    let mut out = GeoGrid::zeros(grid.geographies.clone(), grid.years.clone(), vec![span], grid.n_draws);
    out.standardized = true;
    for d in 0..grid.n_draws {
        for g in 0..grid.n_geographies() {
            for t in 0..grid.years.len() {
                let v: f64 = weights.iter().enumerate().map(|(a, w)| w * grid.get(d, g, t, a)).sum();
                out.set(d, g, t, 0, v);
            }
        }
    }
    Ok(out)
}

/// OLS slope on calendar year, one per draw.
pub fn linearize_trend(years: &[i32], series: &[Vec<f64>]) -> Result<Vec<f64>> {
    if years.len() < 2 {
        return Err(Error::InvalidArgument("need at least two years to linearize".into()));
    }
    let x: Vec<f64> = years.iter().map(|&y| y as f64).collect();
    series
        .iter()
        .map(|s| {
            if s.len() != years.len() {
                return Err(Error::InvalidArgument("series and year vector differ in length".into()));
            }
            ols_slope(&x, s).ok_or_else(|| Error::Degenerate("constant year vector".into()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSummary {
    pub geography: String,
    pub age_group: String,
    pub years: Vec<i32>,
    pub cells: Vec<Summary>,
    /// Linearized slope per year.
    pub slope: Summary,
}

/// Pointwise summaries and the slope distribution for every geography and age.
pub fn summarize(grid: &GeoGrid) -> Result<Vec<TrendSummary>> {
    if grid.n_draws < 2 {
        return Err(Error::InvalidArgument("summaries need at least two draws".into()));
    }
    let mut out = Vec::new();
    for g in 0..grid.n_geographies() {
        for a in 0..grid.ages.len() {
            let cells = (0..grid.years.len()).map(|t| summarize_draws(&grid.cell(g, t, a))).collect();
            let series: Vec<Vec<f64>> = (0..grid.n_draws).map(|d| grid.series(d, g, a)).collect();
            let slopes = linearize_trend(&grid.years, &series)?;
            out.push(TrendSummary {
                geography: grid.geographies[g].clone(),
                age_group: grid.age_label(a),
                years: grid.years.clone(),
                cells,
                slope: summarize_draws(&slopes),
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// variance decomposition

pub const COMPONENTS: [&str; 3] = ["Mean", "Lin. trend", "Nonlin. trend"];
pub const LEVEL_COLUMNS: [&str; 4] = ["Country", "Subregion", "Region", "Globe"];

/// Country series split into mean, OLS-linear and residual parts.
pub fn split_series<T: Scalar>(series: &[T]) -> [Vec<T>; 3] {
    let n = T::from_count(series.len());
    let x: Vec<T> = (0..series.len()).map(T::from_count).collect();
    let xm = x.iter().copied().sum::<T>() / n;
    let mean = series.iter().copied().sum::<T>() / n;
    let slope = ols_slope(&x, series).unwrap_or(T::zero());
    let lin: Vec<T> = x.iter().map(|&t| slope * (t - xm)).collect();
    let non: Vec<T> = series.iter().zip(&lin).map(|(&v, &l)| v - mean - l).collect();
    [vec![mean; series.len()], lin, non]
}

/// Percent share of each (component, level) cell for one draw. `series[j]`
/// is country `j`'s series; levels follow `subregion_of` and
/// `region_of_subregion`.
pub fn decompose_draw<T: Scalar>(
    series: &[Vec<T>],
    subregion_of: &[usize],
    region_of_subregion: &[usize],
) -> Result<[[T; 4]; 3]> {
    let nj = series.len();
    let nt = series.first().map_or(0, Vec::len);
    if nj == 0 || nt < 2 || series.iter().any(|s| s.len() != nt) || subregion_of.len() != nj {
        return Err(Error::InvalidArgument("decomposition needs equal-length series for every country".into()));
    }
    let nk = region_of_subregion.len();
    let nl = region_of_subregion.iter().max().map_or(0, |m| m + 1);
    let parts: Vec<[Vec<T>; 3]> = series.iter().map(|s| split_series(s)).collect();
    let avg = |members: &dyn Fn(usize) -> bool, c: usize, t: usize| {
        let (mut s, mut n) = (T::zero(), 0usize);
        for (j, p) in parts.iter().enumerate() {
            if members(j) {
                s += p[c][t];
                n += 1;
            }
        }
        s / T::from_count(n.max(1))
    };
    let mut var = [[T::zero(); 4]; 3];
    for (c, row) in var.iter_mut().enumerate() {
        for t in 0..nt {
            let globe = avg(&|_| true, c, t);
            let reg: Vec<T> = (0..nl).map(|l| avg(&|j| region_of_subregion[subregion_of[j]] == l, c, t)).collect();
            let sub: Vec<T> = (0..nk).map(|k| avg(&|j| subregion_of[j] == k, c, t)).collect();
            for (j, p) in parts.iter().enumerate() {
                let k = subregion_of[j];
                let l = region_of_subregion[k];
                let pieces = [p[c][t] - sub[k], sub[k] - reg[l], reg[l] - globe, globe];
                for (lv, &x) in pieces.iter().enumerate() {
                    row[lv] += x * x;
                }
            }
        }
    }
    // every piece averages to zero over units, except the global mean, which is
    // constant over units and so carries no variance
    var[0][3] = T::zero();
    let units = T::from_count(nj * nt);
    for row in var.iter_mut() {
        for v in row.iter_mut() {
            *v /= units;
        }
    }
    let total: T = var.iter().flat_map(|r| r.iter().copied()).sum();
    if !(total > T::zero()) {
        return Err(Error::Degenerate("total variance across country-time units is zero".into()));
    }
    let hundred = T::lit(100.0);
    Ok(var.map(|r| r.map(|v| hundred * v / total)))
}

/// Table of shares: rows Mean, Lin. trend, Nonlin. trend, Total; columns
/// Country, Subregion, Region, Globe, Total. Mean×Globe and Total×Total are blank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionTable {
    pub reference_age: AgeGroup,
    pub cells: [[Option<Summary>; 5]; 4],
    /// Per-draw shares, `[draw][component][level]`.
    pub draws: Vec<[[f64; 4]; 3]>,
}

pub fn variance_decomposition(grid: &GeoGrid, hierarchy: &GeoHierarchy, age_index: usize) -> Result<DecompositionTable> {
    if grid.n_geographies() != hierarchy.n_countries() || age_index >= grid.ages.len() {
        return Err(Error::InvalidArgument("decomposition needs a country grid containing the reference age".into()));
    }
    let sub: Vec<usize> = (0..hierarchy.n_countries()).map(|j| hierarchy.subregion_of(j)).collect();
    let reg: Vec<usize> = (0..hierarchy.n_subregions()).map(|k| hierarchy.region_of_subregion(k)).collect();
    let shares = (0..grid.n_draws)
        .into_par_iter()
        .map(|d| {
            let series: Vec<Vec<f64>> = (0..grid.n_geographies()).map(|j| grid.series(d, j, age_index)).collect();
            decompose_draw(&series, &sub, &reg)
        })
        .collect::<Result<Vec<_>>>()?;
    let summ = |f: &dyn Fn(&[[f64; 4]; 3]) -> f64| Some(summarize_draws(&shares.iter().map(f).collect::<Vec<_>>()));
    let mut cells = [[None; 5]; 4];
    for c in 0..3 {
        for lv in 0..4 {
            if !(c == 0 && lv == 3) {
                cells[c][lv] = summ(&|s| s[c][lv]);
            }
        }
        cells[c][4] = summ(&|s| s[c].iter().sum());
    }
    for lv in 0..4 {
        cells[3][lv] = summ(&|s| (0..3).map(|c| s[c][lv]).sum());
    }
    Ok(DecompositionTable {
        reference_age: grid.ages[age_index],
        cells,
        draws: shares,
    })
}

impl DecompositionTable {
    pub const ROWS: [&'static str; 4] = ["Mean", "Lin. trend", "Nonlin. trend", "Total"];
    pub const COLUMNS: [&'static str; 5] = ["Country", "Subregion", "Region", "Globe", "Total"];

    /// Layout CSV: one row per component, cells as `mean (lo-hi)`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![""];
        header.extend(Self::COLUMNS);
        w.write_record(header)?;
        for (r, name) in Self::ROWS.iter().enumerate() {
            let mut rec = vec![name.to_string()];
            rec.extend(self.cells[r].iter().map(|c| match c {
                Some(s) => format!("{:.1} ({:.1}-{:.1})", s.mean, s.lo, s.hi),
                None => String::new(),
            }));
            w.write_record(rec)?;
        }
        finish(w)
    }

    /// Long CSV: `component,level,mean,lo95,hi95`.
    pub fn to_long_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["component", "level", "mean", "lo95", "hi95"])?;
        for (r, name) in Self::ROWS.iter().enumerate() {
            for (c, col) in Self::COLUMNS.iter().enumerate() {
                if let Some(s) = self.cells[r][c] {
                    w.write_record([name.to_string(), col.to_string(), s.mean.to_string(), s.lo.to_string(), s.hi.to_string()])?;
                }
            }
        }
        finish(w)
    }
}

// ---------------------------------------------------------------------------
// output

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Tidy CSV `geography,year,age_group,mean,lo95,hi95`.
pub fn summaries_csv(summaries: &[TrendSummary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["geography", "year", "age_group", "mean", "lo95", "hi95"])?;
    for s in summaries {
        for (y, c) in s.years.iter().zip(&s.cells) {
            w.write_record([
                s.geography.clone(),
                y.to_string(),
                s.age_group.clone(),
                c.mean.to_string(),
                c.lo.to_string(),
                c.hi.to_string(),
            ])?;
        }
    }
    finish(w)
}

/// `geography,age_group,mean,lo95,hi95` for the linearized slopes.
pub fn slopes_csv(summaries: &[TrendSummary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["geography", "age_group", "mean", "lo95", "hi95"])?;
    for s in summaries {
        w.write_record([
            s.geography.clone(),
            s.age_group.clone(),
            s.slope.mean.to_string(),
            s.slope.lo.to_string(),
            s.slope.hi.to_string(),
        ])?;
    }
    finish(w)
}

pub fn write_summaries(path: &Path, summaries: &[TrendSummary]) -> Result<()> {
    write_atomic(path, &summaries_csv(summaries)?)
}

/// Line plot of the posterior mean with a shaded 95% band.
pub fn trend_svg(s: &TrendSummary) -> String {
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let lo = s.cells.iter().map(|c| c.lo).fold(f64::INFINITY, f64::min);
    let hi = s.cells.iter().map(|c| c.hi).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = s.years.len().max(2) as f64 - 1.0;
    let px = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n;
    let py = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / span;
    let mut band = String::new();
    for (i, c) in s.cells.iter().enumerate() {
        let _ = write!(band, "{:.2},{:.2} ", px(i), py(c.hi));
    }
    for (i, c) in s.cells.iter().enumerate().rev() {
        let _ = write!(band, "{:.2},{:.2} ", px(i), py(c.lo));
    }
    let line: String = s
        .cells
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{:.2},{:.2} ", px(i), py(c.mean)))
        .collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    let _ = writeln!(svg, "<title>{} {}</title>", s.geography, s.age_group);
    let _ = writeln!(svg, "<polygon points=\"{}\" fill=\"#9ecae1\" fill-opacity=\"0.6\"/>", band.trim_end());
    let _ = writeln!(svg, "<polyline points=\"{}\" fill=\"none\" stroke=\"#08519c\" stroke-width=\"2\"/>", line.trim_end());
    let _ = writeln!(
        svg,
        "<text x=\"{pad}\" y=\"{}\" font-size=\"12\">{}</text>",
        h - 10.0,
        s.years.first().map(|y| y.to_string()).unwrap_or_default()
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{}</text>",
        w - pad,
        h - 10.0,
        s.years.last().map(|y| y.to_string()).unwrap_or_default()
    );
    let _ = writeln!(svg, "<text x=\"4\" y=\"{:.2}\" font-size=\"12\">{hi:.1}</text>", pad);
    let _ = writeln!(svg, "<text x=\"4\" y=\"{:.2}\" font-size=\"12\">{lo:.1}</text>", h - pad);
    svg.push_str("</svg>\n");
    svg
}
