//! Parameter state, age spline basis, mean function and log posterior.
//!
//! Hyperparameters are stored as variances (κ, ν, τ², σ²) and precisions (λ).
//! The flat prior on the standard-deviation scale becomes `p(v) ∝ v^{-1/2}`
//! for a variance and `p(λ) ∝ λ^{-3/2}` for a precision.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geo_data::{Coverage, Dataset, DesignRow, N_DESIGN};
use crate::gmrf::{ConstraintSet, Rw2Precision};
use crate::scalar::Scalar;

pub const N_AGE_BASIS: usize = 5;
pub const AGE_CENTER: f64 = 50.0;
/// Knot locations on the centered age scale (raw ages 45 and 60).
pub const AGE_KNOTS: [f64; 2] = [-5.0, 10.0];

pub const SD_MAX: f64 = 1000.0;
pub const VARIANCE_MAX: f64 = SD_MAX * SD_MAX;
pub const LOG_LAMBDA_MAX: f64 = 15.0;
/// Precision whose implied SD equals [`SD_MAX`].
pub const LAMBDA_MIN: f64 = 1.0 / VARIANCE_MAX;
/// Prior variance of β, ψ and φ.
pub const FIXED_PRIOR_VARIANCE: f64 = 1e6;
pub const A_G_BOUNDS: (f64, f64) = (0.0, SD_MAX);
pub const B_G_BOUNDS: (f64, f64) = (-SD_MAX, SD_MAX);

pub const N_HYPER: usize = 23;

/// Cubic spline basis in centered age with knots at centered −5 and +10.
pub fn age_basis<T: Scalar>(z: T) -> [T; N_AGE_BASIS] {
    let zc = z - T::lit(AGE_CENTER);
    let pos3 = |x: T| if x > T::zero() { x * x * x } else { T::zero() };
    [
        zc,
        zc * zc,
        zc * zc * zc,
        pos3(zc - T::lit(AGE_KNOTS[0])),
        pos3(zc - T::lit(AGE_KNOTS[1])),
    ]
}

/// Age effect `Σ_s γ_s B_s(z)`.
pub fn age_effect<T: Scalar>(gamma: &[T; N_AGE_BASIS], z: T) -> T {
    age_basis(z).iter().zip(gamma).map(|(&b, &g)| b * g).sum()
}

// ---------------------------------------------------------------------------
// hyperparameters

/// Hierarchy level of a random intercept, slope or nonlinear trend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Country,
    Subregion,
    Region,
    Globe,
}

impl Level {
    pub const RANDOM: [Level; 3] = [Level::Country, Level::Subregion, Level::Region];
    pub const ALL: [Level; 4] = [Level::Country, Level::Subregion, Level::Region, Level::Globe];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Level::Country => "c",
            Level::Subregion => "s",
            Level::Region => "r",
            Level::Globe => "g",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HyperId {
    KappaA(Level),
    KappaB(Level),
    Lambda(Level),
    Nu(Coverage),
    Tau2(Coverage),
    Sigma2(usize),
}

impl HyperId {
    pub fn all() -> [HyperId; N_HYPER] {
        let mut out = [HyperId::Sigma2(0); N_HYPER];
        let mut n = 0;
        for l in Level::RANDOM {
            out[n] = HyperId::KappaA(l);
            n += 1;
        }
        for l in Level::RANDOM {
            out[n] = HyperId::KappaB(l);
            n += 1;
        }
        for l in Level::ALL {
            out[n] = HyperId::Lambda(l);
            n += 1;
        }
        for c in Coverage::ALL {
            out[n] = HyperId::Nu(c);
            n += 1;
        }
        for c in Coverage::ALL {
            out[n] = HyperId::Tau2(c);
            n += 1;
        }
        for s in 0..N_AGE_BASIS {
            out[n] = HyperId::Sigma2(s);
            n += 1;
        }
        out
    }

    pub fn index(self) -> usize {
        match self {
            HyperId::KappaA(l) => l.index(),
            HyperId::KappaB(l) => 3 + l.index(),
            HyperId::Lambda(l) => 6 + l.index(),
            HyperId::Nu(c) => 10 + c.index(),
            HyperId::Tau2(c) => 14 + c.index(),
            HyperId::Sigma2(s) => 18 + s,
        }
    }

    pub fn name(self) -> String {
        match self {
            HyperId::KappaA(l) => format!("kappa_a_{}", l.suffix()),
            HyperId::KappaB(l) => format!("kappa_b_{}", l.suffix()),
            HyperId::Lambda(l) => format!("lambda_{}", l.suffix()),
            HyperId::Nu(c) => format!("nu_{}", c.suffix()),
            HyperId::Tau2(c) => format!("tau2_{}", c.suffix()),
            HyperId::Sigma2(s) => format!("sigma2_{}", s + 1),
        }
    }

    pub fn from_name(name: &str) -> Option<HyperId> {
        HyperId::all().into_iter().find(|h| h.name() == name)
    }

    pub fn is_precision(self) -> bool {
        matches!(self, HyperId::Lambda(_))
    }

    /// Admissible closed range of the stored value.
    pub fn bounds(self) -> (f64, f64) {
        if self.is_precision() {
            (LAMBDA_MIN, LOG_LAMBDA_MAX.exp())
        } else {
            (0.0, VARIANCE_MAX)
        }
    }
}

impl fmt::Display for HyperId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// The 23 variance and precision hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Intercept variances at country, subregion, region level.
    pub kappa_a: [f64; 3],
    pub kappa_b: [f64; 3],
    /// RW2 precisions at country, subregion, region, globe level.
    pub lambda: [f64; 4],
    /// Study-effect variances by coverage class.
    pub nu: [f64; 4],
    /// Within-study residual variances by coverage class.
    pub tau2: [f64; 4],
    /// Spline random-effect variances.
    pub sigma2: [f64; N_AGE_BASIS],
}

#[derive(Debug, Clone, PartialEq)]
pub enum HyperViolation {
    NonPositive(HyperId),
    OutOfBounds(HyperId),
    Ordering(HyperId),
}

impl HyperParams {
    pub fn get(&self, id: HyperId) -> f64 {
        match id {
            HyperId::KappaA(l) => self.kappa_a[l.index()],
            HyperId::KappaB(l) => self.kappa_b[l.index()],
            HyperId::Lambda(l) => self.lambda[l.index()],
            HyperId::Nu(c) => self.nu[c.index()],
            HyperId::Tau2(c) => self.tau2[c.index()],
            HyperId::Sigma2(s) => self.sigma2[s],
        }
    }

    pub fn set(&mut self, id: HyperId, value: f64) {
        match id {
            HyperId::KappaA(l) => self.kappa_a[l.index()] = value,
            HyperId::KappaB(l) => self.kappa_b[l.index()] = value,
            HyperId::Lambda(l) => self.lambda[l.index()] = value,
            HyperId::Nu(c) => self.nu[c.index()] = value,
            HyperId::Tau2(c) => self.tau2[c.index()] = value,
            HyperId::Sigma2(s) => self.sigma2[s] = value,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        HyperId::all().iter().map(|&h| self.get(h)).collect()
    }

    pub fn from_slice(values: &[f64]) -> Self {
        assert_eq!(values.len(), N_HYPER);
        let mut out = Self {
            kappa_a: [0.0; 3],
            kappa_b: [0.0; 3],
            lambda: [0.0; 4],
            nu: [0.0; 4],
            tau2: [0.0; 4],
            sigma2: [0.0; N_AGE_BASIS],
        };
        for (h, &v) in HyperId::all().iter().zip(values) {
            out.set(*h, v);
        }
        out
    }

    pub fn names() -> Vec<String> {
        HyperId::all().iter().map(|h| h.name()).collect()
    }

    pub fn check(&self) -> Result<(), HyperViolation> {
        for h in HyperId::all() {
            let v = self.get(h);
            if !(v > 0.0) || !v.is_finite() {
                return Err(HyperViolation::NonPositive(h));
            }
            let (lo, hi) = h.bounds();
            if v < lo || v > hi {
                return Err(HyperViolation::OutOfBounds(h));
            }
        }
        for c in 1..4 {
            if !(self.nu[c - 1] < self.nu[c]) {
                return Err(HyperViolation::Ordering(HyperId::Nu(Coverage::ALL[c])));
            }
            if !(self.tau2[c - 1] < self.tau2[c]) {
                return Err(HyperViolation::Ordering(HyperId::Tau2(Coverage::ALL[c])));
            }
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.check().is_ok()
    }

    /// Log prior density of all hyperparameters, `-∞` outside the support.
    pub fn log_prior(&self) -> f64 {
        if !self.is_valid() {
            return f64::NEG_INFINITY;
        }
        HyperId::all().iter().map(|&h| hyper_log_prior(h, self.get(h))).sum()
    }
}

/// Unnormalized log prior of a single hyperparameter value, ignoring ordering.
pub fn hyper_log_prior(id: HyperId, value: f64) -> f64 {
    let (lo, hi) = id.bounds();
    if !(value > 0.0) || value < lo || value > hi {
        return f64::NEG_INFINITY;
    }
    if id.is_precision() {
        -1.5 * value.ln()
    } else {
        -0.5 * value.ln()
    }
}

// ---------------------------------------------------------------------------
// parameter state

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub countries: usize,
    pub subregions: usize,
    pub regions: usize,
    pub years: usize,
    pub studies: usize,
}

/// One full draw of every non-hyper parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    pub a_c: Vec<f64>,
    pub a_s: Vec<f64>,
    pub a_r: Vec<f64>,
    pub a_g: f64,
    pub b_c: Vec<f64>,
    pub b_s: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_g: f64,
    pub u_c: Vec<Vec<f64>>,
    pub u_s: Vec<Vec<f64>>,
    pub u_r: Vec<Vec<f64>>,
    pub u_g: Vec<f64>,
    pub beta: [f64; N_DESIGN],
    pub psi: [f64; N_AGE_BASIS],
    pub phi: [f64; N_AGE_BASIS],
    /// Country spline effects, `c[j][s]`.
    pub c: Vec<[f64; N_AGE_BASIS]>,
    pub e: Vec<f64>,
}

impl ParamState {
    pub fn zeros(d: Dims) -> Self {
        Self {
            a_c: vec![0.0; d.countries],
            a_s: vec![0.0; d.subregions],
            a_r: vec![0.0; d.regions],
            a_g: 0.0,
            b_c: vec![0.0; d.countries],
            b_s: vec![0.0; d.subregions],
            b_r: vec![0.0; d.regions],
            b_g: 0.0,
            u_c: vec![vec![0.0; d.years]; d.countries],
            u_s: vec![vec![0.0; d.years]; d.subregions],
            u_r: vec![vec![0.0; d.years]; d.regions],
            u_g: vec![0.0; d.years],
            beta: [0.0; N_DESIGN],
            psi: [0.0; N_AGE_BASIS],
            phi: [0.0; N_AGE_BASIS],
            c: vec![[0.0; N_AGE_BASIS]; d.countries],
            e: vec![0.0; d.studies],
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            countries: self.a_c.len(),
            subregions: self.a_s.len(),
            regions: self.a_r.len(),
            years: self.u_g.len(),
            studies: self.e.len(),
        }
    }

    /// Composite intercept `a_j = a^c_j + a^s_k + a^r_l + a^g`.
    pub fn intercept(&self, j: usize, k: usize, l: usize) -> f64 {
        self.a_c[j] + self.a_s[k] + self.a_r[l] + self.a_g
    }

    pub fn slope(&self, j: usize, k: usize, l: usize) -> f64 {
        self.b_c[j] + self.b_s[k] + self.b_r[l] + self.b_g
    }

    pub fn u_total(&self, j: usize, k: usize, l: usize, t: usize) -> f64 {
        self.u_c[j][t] + self.u_s[k][t] + self.u_r[l][t] + self.u_g[t]
    }

    /// Level at age 50 equivalent for a (country, year, design row) cell, excluding `e`.
    pub fn level(&self, j: usize, k: usize, l: usize, t: usize, tc: f64, x: &DesignRow) -> f64 {
        self.intercept(j, k, l)
            + self.slope(j, k, l) * tc
            + x.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>()
            + self.u_total(j, k, l, t)
    }

    /// Spline coefficients `γ_s = ψ_s + φ_s μ + c_{s,j}`.
    pub fn gamma(&self, j: usize, mu: f64) -> [f64; N_AGE_BASIS] {
        std::array::from_fn(|s| self.psi[s] + self.phi[s] * mu + self.c[j][s])
    }

    /// Largest mean/slope violation over all nonlinear-trend vectors.
    pub fn max_constraint_violation(&self) -> f64 {
        let cs = ConstraintSet::<f64>::new(self.u_g.len());
        self.u_vectors().map(|u| cs.violation(u)).fold(0.0, f64::max)
    }

    pub fn u_vectors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.u_c
            .iter()
            .chain(&self.u_s)
            .chain(&self.u_r)
            .chain(std::iter::once(&self.u_g))
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    /// Column names matching [`ParamState::to_flat`].
    pub fn column_names(d: Dims) -> Vec<String> {
        let mut out = vec!["a_g".to_string(), "b_g".to_string()];
        let idx = |p: &str, n: usize, out: &mut Vec<String>| out.extend((0..n).map(|i| format!("{p}[{i}]")));
        idx("a_c", d.countries, &mut out);
        idx("a_s", d.subregions, &mut out);
        idx("a_r", d.regions, &mut out);
        idx("b_c", d.countries, &mut out);
        idx("b_s", d.subregions, &mut out);
        idx("b_r", d.regions, &mut out);
        idx("beta", N_DESIGN, &mut out);
        idx("psi", N_AGE_BASIS, &mut out);
        idx("phi", N_AGE_BASIS, &mut out);
        for j in 0..d.countries {
            out.extend((0..N_AGE_BASIS).map(|s| format!("c[{j},{s}]")));
        }
        let grid = |p: &str, n: usize, out: &mut Vec<String>| {
            for a in 0..n {
                out.extend((0..d.years).map(|t| format!("{p}[{a},{t}]")));
            }
        };
        grid("u_c", d.countries, &mut out);
        grid("u_s", d.subregions, &mut out);
        grid("u_r", d.regions, &mut out);
        idx("u_g", d.years, &mut out);
        idx("e", d.studies, &mut out);
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![self.a_g, self.b_g];
        for v in [&self.a_c, &self.a_s, &self.a_r, &self.b_c, &self.b_s, &self.b_r] {
            out.extend_from_slice(v);
        }
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.psi);
        out.extend_from_slice(&self.phi);
        for c in &self.c {
            out.extend_from_slice(c);
        }
        for u in self.u_vectors() {
            out.extend_from_slice(u);
        }
        out.extend_from_slice(&self.e);
        out
    }

    pub fn from_flat(d: Dims, values: &[f64]) -> Option<Self> {
        let mut it = values.iter().copied();
        let mut take = |n: usize| -> Option<Vec<f64>> {
            let v: Vec<f64> = it.by_ref().take(n).collect();
            (v.len() == n).then_some(v)
        };
        let head = take(2)?;
        let mut s = ParamState::zeros(d);
        s.a_g = head[0];
        s.b_g = head[1];
        s.a_c = take(d.countries)?;
        s.a_s = take(d.subregions)?;
        s.a_r = take(d.regions)?;
        s.b_c = take(d.countries)?;
        s.b_s = take(d.subregions)?;
        s.b_r = take(d.regions)?;
        s.beta.copy_from_slice(&take(N_DESIGN)?);
        s.psi.copy_from_slice(&take(N_AGE_BASIS)?);
        s.phi.copy_from_slice(&take(N_AGE_BASIS)?);
        for j in 0..d.countries {
            s.c[j].copy_from_slice(&take(N_AGE_BASIS)?);
        }
        for j in 0..d.countries {
            s.u_c[j] = take(d.years)?;
        }
        for k in 0..d.subregions {
            s.u_s[k] = take(d.years)?;
        }
        for l in 0..d.regions {
            s.u_r[l] = take(d.years)?;
        }
        s.u_g = take(d.years)?;
        s.e = take(d.studies)?;
        let rest: Vec<f64> = it.collect();
        rest.is_empty().then_some(s)
    }
}

// ---------------------------------------------------------------------------
// data prepared for evaluation

#[derive(Debug, Clone, PartialEq)]
pub struct ObsRow {
    pub y: f64,
    /// Known sampling variance `s²/n`.
    pub sampling_var: f64,
    pub z: f64,
    pub basis: [f64; N_AGE_BASIS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyObs {
    pub country: usize,
    pub subregion: usize,
    pub region: usize,
    /// Year offset into the window.
    pub t: usize,
    /// Centered year.
    pub tc: f64,
    pub class: Coverage,
    pub x: DesignRow,
    pub rows: Vec<ObsRow>,
}

/// Index-resolved view of a [`Dataset`] used by the model and sampler.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub dims: Dims,
    pub subregion_of: Vec<usize>,
    pub region_of_subregion: Vec<usize>,
    pub studies: Vec<StudyObs>,
    pub rw2: Rw2Precision<f64>,
    pub constraints: ConstraintSet<f64>,
}

impl ModelData {
    pub fn new(ds: &Dataset) -> crate::Result<Self> {
        let h = &ds.hierarchy;
        let studies = ds
            .studies
            .iter()
            .zip(&ds.design)
            .map(|(s, x)| StudyObs {
                country: s.country,
                subregion: h.subregion_of(s.country),
                region: h.region_of(s.country),
                t: ds.window.offset(s.year),
                tc: ds.window.centered(s.year),
                class: s.coverage,
                x: *x,
                rows: s
                    .rows
                    .iter()
                    .map(|r| ObsRow {
                        y: r.y,
                        sampling_var: r.sampling_variance(),
                        z: r.z,
                        basis: age_basis(r.z),
                    })
                    .collect(),
            })
            .collect();
        Ok(Self {
            dims: Dims {
                countries: h.n_countries(),
                subregions: h.n_subregions(),
                regions: h.n_regions(),
                years: ds.window.len(),
                studies: ds.studies.len(),
            },
            subregion_of: (0..h.n_countries()).map(|j| h.subregion_of(j)).collect(),
            region_of_subregion: (0..h.n_subregions()).map(|k| h.region_of_subregion(k)).collect(),
            studies,
            rw2: Rw2Precision::new(ds.window.len())?,
            constraints: ConstraintSet::new(ds.window.len()),
        })
    }

    pub fn region_of(&self, j: usize) -> usize {
        self.region_of_subregion[self.subregion_of[j]]
    }

    pub fn n_rows(&self) -> usize {
        self.studies.iter().map(|s| s.rows.len()).sum()
    }
}

/// `μ_i = a_j + b_j t + x_iᵀβ + u_{j,t} + e_i`.
pub fn baseline_level(data: &ModelData, i: usize, state: &ParamState) -> f64 {
    let s = &data.studies[i];
    state.level(s.country, s.subregion, s.region, s.t, s.tc, &s.x) + state.e[i]
}

/// Expected value of row `h` of study `i`.
pub fn mean_function(data: &ModelData, i: usize, h: usize, state: &ParamState) -> f64 {
    let s = &data.studies[i];
    let mu = baseline_level(data, i, state);
    let gamma = state.gamma(s.country, mu);
    mu + s.rows[h]
        .basis
        .iter()
        .zip(&gamma)
        .map(|(b, g)| b * g)
        .sum::<f64>()
}

pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * var).ln() - 0.5 * d * d / var
}

pub fn log_likelihood(data: &ModelData, state: &ParamState, hypers: &HyperParams) -> f64 {
    data.studies
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let tau2 = hypers.tau2[s.class.index()];
            let mu = baseline_level(data, i, state);
            let gamma = state.gamma(s.country, mu);
            s.rows
                .iter()
                .map(|r| {
                    let m = mu + r.basis.iter().zip(&gamma).map(|(b, g)| b * g).sum::<f64>();
                    normal_log_pdf(r.y, m, r.sampling_var + tau2)
                })
                .sum::<f64>()
        })
        .sum()
}

/// Log prior density of every non-hyper parameter given the hyperparameters.
pub fn log_prior_effects(data: &ModelData, state: &ParamState, hypers: &HyperParams) -> f64 {
    let (ag_lo, ag_hi) = A_G_BOUNDS;
    let (bg_lo, bg_hi) = B_G_BOUNDS;
    if !(ag_lo..=ag_hi).contains(&state.a_g) || !(bg_lo..=bg_hi).contains(&state.b_g) {
        return f64::NEG_INFINITY;
    }
    let gauss = |v: &[f64], var: f64| v.iter().map(|&x| normal_log_pdf(x, 0.0, var)).sum::<f64>();
    let mut lp = 0.0;
    lp += gauss(&state.a_c, hypers.kappa_a[0]);
    lp += gauss(&state.a_s, hypers.kappa_a[1]);
    lp += gauss(&state.a_r, hypers.kappa_a[2]);
    lp += gauss(&state.b_c, hypers.kappa_b[0]);
    lp += gauss(&state.b_s, hypers.kappa_b[1]);
    lp += gauss(&state.b_r, hypers.kappa_b[2]);
    lp += gauss(&state.beta, FIXED_PRIOR_VARIANCE);
    lp += gauss(&state.psi, FIXED_PRIOR_VARIANCE);
    lp += gauss(&state.phi, FIXED_PRIOR_VARIANCE);
    for cj in &state.c {
        lp += cj
            .iter()
            .zip(&hypers.sigma2)
            .map(|(&x, &v)| normal_log_pdf(x, 0.0, v))
            .sum::<f64>();
    }
    for (i, s) in data.studies.iter().enumerate() {
        lp += normal_log_pdf(state.e[i], 0.0, hypers.nu[s.class.index()]);
    }
    let rw2 = |u: &Vec<f64>, lambda: f64| crate::gmrf::rw2_log_density_kernel(u, lambda, &data.rw2);
    lp += state.u_c.iter().map(|u| rw2(u, hypers.lambda[0])).sum::<f64>();
    lp += state.u_s.iter().map(|u| rw2(u, hypers.lambda[1])).sum::<f64>();
    lp += state.u_r.iter().map(|u| rw2(u, hypers.lambda[2])).sum::<f64>();
    lp += rw2(&state.u_g, hypers.lambda[3]);
    lp
}

/// Joint log posterior up to an additive constant; `-∞` on any violated hard constraint.
pub fn log_posterior(data: &ModelData, state: &ParamState, hypers: &HyperParams) -> f64 {
    let hp = hypers.log_prior();
    if hp == f64::NEG_INFINITY {
        return hp;
    }
    let ep = log_prior_effects(data, state, hypers);
    if ep == f64::NEG_INFINITY {
        return ep;
    }
    hp + ep + log_likelihood(data, state, hypers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo_data::{AgeRow, CovariateTable, GeoHierarchy, StudyRecord, Window};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn basis_examples() {
        assert_eq!(age_basis(50.0f64), [0.0, 0.0, 0.0, 125.0, 0.0]);
        assert_eq!(age_basis(45.0f64), [-5.0, 25.0, -125.0, 0.0, 0.0]);
        // direct evaluation: zc = 10, (10 + 5)^3, (10 - 10)^3 clipped
        let zc: f64 = 10.0;
        assert_eq!(age_basis(60.0f64), [zc, zc * zc, zc * zc * zc, (zc + 5.0).powi(3), 0.0]);
        assert_eq!(age_basis(60.0f64), [10.0, 100.0, 1000.0, 3375.0, 0.0]);
        assert_eq!(age_basis(50.0f32)[3], 125.0f32);
    }

    fn gamma_fixture() -> [f64; 5] {
        [0.3, -0.02, 0.004, -0.003, 0.002]
    }

    #[test]
    fn spline_smooth_at_knots() {
        let g = gamma_fixture();
        let f = |z: f64| age_effect(&g, z);
        let h = 1e-3;
        for knot in [45.0, 60.0] {
            let d1 = |z: f64| (f(z + h) - f(z - h)) / (2.0 * h);
            let d2 = |z: f64| (f(z + h) - 2.0 * f(z) + f(z - h)) / (h * h);
            let eps = 1e-7;
            assert!((f(knot - eps) - f(knot + eps)).abs() < 1e-6);
            // one-sided stencils kept entirely on either side of the knot
            let left1 = (f(knot - 2.0 * h) - f(knot - 4.0 * h)) / (2.0 * h);
            let right1 = (f(knot + 4.0 * h) - f(knot + 2.0 * h)) / (2.0 * h);
            assert!((d1(knot) - 0.5 * (left1 + right1)).abs() < 1e-4);
            assert!((d1(knot - 1e-6) - d1(knot + 1e-6)).abs() < 1e-6);
            assert!((d2(knot - 1e-6) - d2(knot + 1e-6)).abs() < 1e-6);
        }
    }

    fn tiny_dataset(ys: &[(usize, i32, Coverage, f64, f64, f64, u32)]) -> Dataset {
        let h = GeoHierarchy::from_indices(vec![0, 0, 1], vec![0, 0]).unwrap();
        let w = Window::new(2000, 2004).unwrap();
        let series = (0..3)
            .map(|j| {
                let v: Vec<[f64; 6]> = (0..14)
                    .map(|t| [1.0 + 0.1 * t as f64 + j as f64, 0.5, 0.1, 0.2, -0.1, 0.0])
                    .collect();
                (1991, v)
            })
            .collect();
        let cov = CovariateTable::from_series(&h, w, series).unwrap();
        let studies = ys
            .iter()
            .enumerate()
            .map(|(i, &(j, year, cls, z, y, s, n))| StudyRecord {
                study_id: format!("s{i}"),
                country: j,
                year,
                coverage: cls,
                study_urbanization: 0.4,
                rows: vec![AgeRow::new(z - 4.5, z + 4.5, y, s, n).unwrap()],
            })
            .collect();
        Dataset::new(h, w, studies, cov).unwrap()
    }

    fn hypers() -> HyperParams {
        HyperParams {
            kappa_a: [4.0, 2.0, 1.0],
            kappa_b: [0.1, 0.05, 0.02],
            lambda: [2.0, 3.0, 4.0, 5.0],
            nu: [1.0, 2.0, 3.0, 4.0],
            tau2: [0.5, 1.0, 2.0, 3.0],
            sigma2: [1e-2, 1e-4, 1e-6, 1e-7, 1e-8],
        }
    }

    #[test]
    fn hyper_names_and_layout() {
        let names = HyperParams::names();
        assert_eq!(names.len(), 23);
        assert_eq!(names[0], "kappa_a_c");
        assert_eq!(names[9], "lambda_g");
        assert_eq!(names[22], "sigma2_5");
        for (i, h) in HyperId::all().iter().enumerate() {
            assert_eq!(h.index(), i);
            assert_eq!(HyperId::from_name(&h.name()), Some(*h));
        }
        let hp = hypers();
        assert_eq!(HyperParams::from_slice(&hp.to_vec()), hp);
    }

    #[test]
    fn ordering_violation_is_neg_infinity() {
        let ds = tiny_dataset(&[(0, 2001, Coverage::Community, 50.0, 120.0, 10.0, 100)]);
        let data = ModelData::new(&ds).unwrap();
        let state = ParamState::zeros(data.dims);
        let mut hp = hypers();
        assert!(log_posterior(&data, &state, &hp).is_finite());
        hp.nu[1] = 0.5;
        assert_eq!(log_posterior(&data, &state, &hp), f64::NEG_INFINITY);
        let mut hp = hypers();
        hp.lambda[0] = (LOG_LAMBDA_MAX + 0.1).exp();
        assert_eq!(log_posterior(&data, &state, &hp), f64::NEG_INFINITY);
    }

    #[test]
    fn baseline_composition() {
        let ds = tiny_dataset(&[(2, 2002, Coverage::WeightedNational, 50.0, 120.0, 10.0, 100)]);
        let data = ModelData::new(&ds).unwrap();
        let mut st = ParamState::zeros(data.dims);
        assert_eq!(baseline_level(&data, 0, &st), 0.0);
        st.a_g = 120.0;
        assert_eq!(baseline_level(&data, 0, &st), 120.0);
        st.a_g = 4.0;
        st.a_c[2] = 1.0;
        st.a_s[1] = 2.0;
        st.a_r[0] = 3.0;
        assert_eq!(baseline_level(&data, 0, &st), 10.0);
        assert_eq!(st.intercept(2, 1, 0), 10.0);
    }

    #[test]
    fn mean_function_terms() {
        let ds = tiny_dataset(&[
            (0, 2001, Coverage::Community, 50.0, 120.0, 10.0, 100),
            (1, 2001, Coverage::Community, 50.0, 120.0, 10.0, 100),
        ]);
        let data = ModelData::new(&ds).unwrap();
        let mut st = ParamState::zeros(data.dims);
        st.a_g = 118.0;
        st.a_c[0] = 1.5;
        assert_eq!(mean_function(&data, 0, 0, &st), baseline_level(&data, 0, &st));
        st.psi = [0.1, 0.01, 0.001, 0.02, 0.003];
        st.phi = [0.0, 0.0, 0.0, 0.0004, 0.0];
        st.c[0] = [0.0, 0.0, 0.0, 0.001, 0.0];
        let mu = baseline_level(&data, 0, &st);
        // at age 50 only the first knot column is active
        let oracle = mu + 125.0 * (st.psi[3] + st.phi[3] * mu + st.c[0][3]);
        assert_relative_eq!(mean_function(&data, 0, 0, &st), oracle, epsilon = 1e-12);

        let mut flat = st.clone();
        flat.phi = [0.0; 5];
        flat.c = vec![[0.0; 5]; 3];
        let diff = mean_function(&data, 0, 0, &flat) - mean_function(&data, 1, 0, &flat);
        assert_relative_eq!(diff, baseline_level(&data, 0, &flat) - baseline_level(&data, 1, &flat), epsilon = 1e-12);
    }

    #[test]
    fn single_row_likelihood() {
        // s²/n + τ² = 1 with the mean matched exactly
        let ds = tiny_dataset(&[(0, 2000, Coverage::WeightedNational, 50.0, 0.0, 5.0, 50)]);
        let data = ModelData::new(&ds).unwrap();
        let st = ParamState::zeros(data.dims);
        let mut hp = hypers();
        hp.tau2[0] = 0.5;
        assert_relative_eq!(log_likelihood(&data, &st, &hp), -0.5 * (2.0 * PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn doubling_n_halves_sampling_variance() {
        let a = AgeRow::new(40.0, 49.0, 120.0, 12.0, 100).unwrap();
        let b = AgeRow::new(40.0, 49.0, 120.0, 12.0, 200).unwrap();
        assert_relative_eq!(b.sampling_variance(), 0.5 * a.sampling_variance());
    }

    fn rich_state(data: &ModelData) -> ParamState {
        let mut st = ParamState::zeros(data.dims);
        let d = data.dims;
        st.a_g = 121.0;
        st.b_g = -0.1;
        for j in 0..d.countries {
            st.a_c[j] = 0.3 * j as f64 - 0.2;
            st.b_c[j] = 0.01 * j as f64;
            st.c[j] = [1e-3 * j as f64, -1e-4, 1e-5, 2e-6 * j as f64, -1e-6];
        }
        st.a_s = vec![0.5, -0.5];
        st.b_s = vec![0.02, -0.01];
        st.a_r = vec![1.0];
        st.b_r = vec![0.03];
        let cs = ConstraintSet::<f64>::new(d.years);
        let mk = |seed: f64| {
            let mut u: Vec<f64> = (0..d.years).map(|t| ((t as f64 + seed) * 1.7).sin()).collect();
            cs.apply_projection(&mut u);
            u
        };
        st.u_c = (0..d.countries).map(|j| mk(j as f64)).collect();
        st.u_s = (0..d.subregions).map(|k| mk(10.0 + k as f64)).collect();
        st.u_r = vec![mk(20.0)];
        st.u_g = mk(30.0);
        st.beta = [0.5, 2.0, 0.01, -0.02, 0.3, -0.3, 0.1, 0.0, 1.5, 0.05, 2.5];
        st.psi = [0.5, 0.004, 1e-4, -1e-4, 5e-5];
        st.phi = [0.002, 1e-5, 0.0, 0.0, 0.0];
        st.e = (0..d.studies).map(|i| 0.7 * (i as f64).cos()).collect();
        st
    }

    fn many_studies() -> Dataset {
        let mut rows = Vec::new();
        for i in 0..12 {
            let cls = Coverage::ALL[i % 4];
            rows.push((i % 3, 2000 + (i % 5) as i32, cls, 30.0 + 3.0 * i as f64, 110.0 + i as f64, 12.0 + (i % 3) as f64, 80 + 10 * i as u32));
        }
        tiny_dataset(&rows)
    }

    #[test]
    fn likelihood_matches_row_sum_oracle() {
        let ds = many_studies();
        let data = ModelData::new(&ds).unwrap();
        let st = rich_state(&data);
        let hp = hypers();
        // independent evaluation straight from the dataset records
        let mut oracle = 0.0;
        for (i, s) in ds.studies.iter().enumerate() {
            let j = s.country;
            let k = ds.hierarchy.subregion_of(j);
            let l = ds.hierarchy.region_of(j);
            let t = (s.year - 2000) as usize;
            let tc = s.year as f64 - 2002.0;
            let x = ds.design[i];
            let mut mu = st.a_c[j] + st.a_s[k] + st.a_r[l] + st.a_g;
            mu += (st.b_c[j] + st.b_s[k] + st.b_r[l] + st.b_g) * tc;
            for m in 0..11 {
                mu += x[m] * st.beta[m];
            }
            mu += st.u_c[j][t] + st.u_s[k][t] + st.u_r[l][t] + st.u_g[t];
            mu += st.e[i];
            for r in &s.rows {
                let zc = r.z - 50.0;
                let basis = [
                    zc,
                    zc.powi(2),
                    zc.powi(3),
                    (zc + 5.0).max(0.0).powi(3),
                    (zc - 10.0).max(0.0).powi(3),
                ];
                let mut m = mu;
                for q in 0..5 {
                    m += (st.psi[q] + st.phi[q] * mu + st.c[j][q]) * basis[q];
                }
                let v = r.s * r.s / r.n as f64 + hp.tau2[s.coverage.index()];
                oracle += -0.5 * (2.0 * PI * v).ln() - (r.y - m).powi(2) / (2.0 * v);
            }
        }
        assert_relative_eq!(log_likelihood(&data, &st, &hp), oracle, epsilon = 1e-9);
    }

    #[test]
    fn prior_only_matches_components() {
        let ds = many_studies().without_studies();
        let data = ModelData::new(&ds).unwrap();
        let mut st = rich_state(&data);
        st.e.clear();
        let hp = hypers();
        assert_eq!(log_likelihood(&data, &st, &hp), 0.0);
        let p = Rw2Precision::<f64>::new(5).unwrap();
        let norm = |x: f64, v: f64| -0.5 * (2.0 * PI * v).ln() - x * x / (2.0 * v);
        let rw2 = |u: &[f64], lam: f64| 1.5 * lam.ln() - 0.5 * lam * p.matrix().quad_form(u);
        let mut oracle = 0.0;
        for (vals, var) in [
            (&st.a_c, hp.kappa_a[0]),
            (&st.a_s, hp.kappa_a[1]),
            (&st.a_r, hp.kappa_a[2]),
            (&st.b_c, hp.kappa_b[0]),
            (&st.b_s, hp.kappa_b[1]),
            (&st.b_r, hp.kappa_b[2]),
        ] {
            oracle += vals.iter().map(|&x| norm(x, var)).sum::<f64>();
        }
        for x in st.beta.iter().chain(&st.psi).chain(&st.phi) {
            oracle += norm(*x, 1e6);
        }
        for cj in &st.c {
            for s in 0..5 {
                oracle += norm(cj[s], hp.sigma2[s]);
            }
        }
        oracle += st.u_c.iter().map(|u| rw2(u, hp.lambda[0])).sum::<f64>();
        oracle += st.u_s.iter().map(|u| rw2(u, hp.lambda[1])).sum::<f64>();
        oracle += st.u_r.iter().map(|u| rw2(u, hp.lambda[2])).sum::<f64>();
        oracle += rw2(&st.u_g, hp.lambda[3]);
        let mut hyper_oracle = 0.0;
        for v in hp.kappa_a.iter().chain(&hp.kappa_b).chain(&hp.nu).chain(&hp.tau2).chain(&hp.sigma2) {
            hyper_oracle -= 0.5 * v.ln();
        }
        for l in hp.lambda {
            hyper_oracle -= 1.5 * l.ln();
        }
        assert_relative_eq!(log_posterior(&data, &st, &hp), oracle + hyper_oracle, epsilon = 1e-9);
    }

    #[test]
    fn translation_equivariance() {
        let ds = many_studies();
        let data = ModelData::new(&ds).unwrap();
        let mut st = rich_state(&data);
        st.phi = [0.0; 5];
        let hp = hypers();
        let base = log_likelihood(&data, &st, &hp);
        let mut shifted = data.clone();
        for s in &mut shifted.studies {
            for r in &mut s.rows {
                r.y += 7.25;
            }
        }
        st.a_g += 7.25;
        assert_relative_eq!(log_likelihood(&shifted, &st, &hp), base, epsilon = 1e-9);
    }

    #[test]
    fn flat_round_trip() {
        let ds = many_studies();
        let data = ModelData::new(&ds).unwrap();
        let st = rich_state(&data);
        let flat = st.to_flat();
        assert_eq!(flat.len(), ParamState::column_names(data.dims).len());
        assert_eq!(ParamState::from_flat(data.dims, &flat), Some(st));
    }

    proptest! {
        #[test]
        fn mean_superposition(
            a1 in -5.0f64..5.0, a2 in -5.0f64..5.0,
            b1 in proptest::collection::vec(-1.0f64..1.0, 11),
            b2 in proptest::collection::vec(-1.0f64..1.0, 11),
            p1 in proptest::collection::vec(-0.01f64..0.01, 5),
            p2 in proptest::collection::vec(-0.01f64..0.01, 5),
            e1 in -2.0f64..2.0, e2 in -2.0f64..2.0,
        ) {
            let ds = many_studies();
            let data = ModelData::new(&ds).unwrap();
            let base = rich_state(&data);
            let zero = {
                let mut z = base.clone();
                z.a_c[1] = 0.0; z.beta = [0.0; 11]; z.psi = [0.0; 5]; z.e[1] = 0.0;
                z
            };
            let mk = |a: f64, b: &[f64], p: &[f64], e: f64| {
                let mut s = zero.clone();
                s.a_c[1] = a; s.beta.copy_from_slice(b); s.psi.copy_from_slice(p); s.e[1] = e;
                s
            };
            let s1 = mk(a1, &b1, &p1, e1);
            let s2 = mk(a2, &b2, &p2, e2);
            let sum: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| x + y).collect();
            let ps: Vec<f64> = p1.iter().zip(&p2).map(|(x, y)| x + y).collect();
            let s12 = mk(a1 + a2, &sum, &ps, e1 + e2);
            // φ ≠ 0 makes μ enter multiplicatively; superposition holds with φ fixed at zero
            let lin = |s: &ParamState| { let mut t = s.clone(); t.phi = [0.0; 5]; t };
            let m = |s: &ParamState| mean_function(&data, 1, 0, &lin(s));
            prop_assert!((m(&s12) - (m(&s1) + m(&s2) - m(&zero))).abs() < 1e-8);
        }
    }
}
