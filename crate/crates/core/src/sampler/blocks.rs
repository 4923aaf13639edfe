//! Gibbs updates for the Gaussian parameter blocks.
//!
//! Given `ψ`, `φ`, `c` and `τ²`, every row of study `i` is linear in `μ_i`
//! with slope `g = 1 + φ·B(z)` and offset `o = (ψ + c_j)·B(z)`. Summing rows
//! gives per-study pseudo observations `(W_i, r_i)` with likelihood
//! `exp(−½ W_i μ_i² + r_i μ_i)`, which every μ-linear block reuses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gmrf::ConstrainedGaussian;
use crate::linalg::{dot, standard_normals, DenseMatrix, ScaledCholesky};
use crate::model::{
    baseline_level, Dims, HyperParams, Level, ModelData, ParamState, StudyObs, A_G_BOUNDS, B_G_BOUNDS,
    FIXED_PRIOR_VARIANCE, N_AGE_BASIS,
};
use crate::geo_data::N_DESIGN;
use crate::Matrix;

use super::truncnorm::sample_truncated_normal;

/// Parameter blocks that the sampler can update or hold fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    AC,
    AS,
    AR,
    AG,
    BC,
    BS,
    BR,
    BG,
    Beta,
    Psi,
    Phi,
    C,
    E,
    UC,
    US,
    UR,
    UG,
}

impl Block {
    pub const ALL: [Block; 17] = [
        Block::AC,
        Block::AS,
        Block::AR,
        Block::AG,
        Block::BC,
        Block::BS,
        Block::BR,
        Block::BG,
        Block::Beta,
        Block::Psi,
        Block::Phi,
        Block::C,
        Block::E,
        Block::UC,
        Block::US,
        Block::UR,
        Block::UG,
    ];

    pub fn intercept(level: Level) -> Block {
        [Block::AC, Block::AS, Block::AR, Block::AG][level.index()]
    }

    pub fn slope(level: Level) -> Block {
        [Block::BC, Block::BS, Block::BR, Block::BG][level.index()]
    }

    pub fn trend(level: Level) -> Block {
        [Block::UC, Block::US, Block::UR, Block::UG][level.index()]
    }
}

/// Blocks drawn jointly in the linear-mean update.
pub const LINEAR_MEAN_BLOCKS: [Block; 10] = [
    Block::AC,
    Block::AS,
    Block::AR,
    Block::AG,
    Block::BC,
    Block::BS,
    Block::BR,
    Block::BG,
    Block::Beta,
    Block::Psi,
];

// ---------------------------------------------------------------------------
// shared per-study quantities

#[derive(Debug, Clone)]
pub struct Pseudo {
    pub w: Vec<f64>,
    pub r: Vec<f64>,
}

fn row_slope(state: &ParamState, basis: &[f64; N_AGE_BASIS]) -> f64 {
    1.0 + dot(&state.phi, basis)
}

fn row_offset(state: &ParamState, j: usize, basis: &[f64; N_AGE_BASIS], include_psi: bool) -> f64 {
    let c = dot(&state.c[j], basis);
    if include_psi {
        c + dot(&state.psi, basis)
    } else {
        c
    }
}

pub fn pseudo_observations(data: &ModelData, state: &ParamState, hypers: &HyperParams) -> Pseudo {
    let mut w = Vec::with_capacity(data.studies.len());
    let mut r = Vec::with_capacity(data.studies.len());
    for s in &data.studies {
        let tau2 = hypers.tau2[s.class.index()];
        let (mut wi, mut ri) = (0.0, 0.0);
        for row in &s.rows {
            let g = row_slope(state, &row.basis);
            let o = row_offset(state, s.country, &row.basis, true);
            let v = row.sampling_var + tau2;
            wi += g * g / v;
            ri += g * (row.y - o) / v;
        }
        w.push(wi);
        r.push(ri);
    }
    Pseudo { w, r }
}

pub fn current_mu(data: &ModelData, state: &ParamState) -> Vec<f64> {
    (0..data.studies.len()).map(|i| baseline_level(data, i, state)).collect()
}

// ---------------------------------------------------------------------------
// linear mean block

/// One scalar coordinate of the linear-mean block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    AC(usize),
    AS(usize),
    AR(usize),
    AG,
    BC(usize),
    BS(usize),
    BR(usize),
    BG,
    Beta(usize),
    Psi(usize),
}

impl Slot {
    pub fn get(self, s: &ParamState) -> f64 {
        match self {
            Slot::AC(j) => s.a_c[j],
            Slot::AS(k) => s.a_s[k],
            Slot::AR(l) => s.a_r[l],
            Slot::AG => s.a_g,
            Slot::BC(j) => s.b_c[j],
            Slot::BS(k) => s.b_s[k],
            Slot::BR(l) => s.b_r[l],
            Slot::BG => s.b_g,
            Slot::Beta(m) => s.beta[m],
            Slot::Psi(q) => s.psi[q],
        }
    }

    pub fn set(self, s: &mut ParamState, v: f64) {
        match self {
            Slot::AC(j) => s.a_c[j] = v,
            Slot::AS(k) => s.a_s[k] = v,
            Slot::AR(l) => s.a_r[l] = v,
            Slot::AG => s.a_g = v,
            Slot::BC(j) => s.b_c[j] = v,
            Slot::BS(k) => s.b_s[k] = v,
            Slot::BR(l) => s.b_r[l] = v,
            Slot::BG => s.b_g = v,
            Slot::Beta(m) => s.beta[m] = v,
            Slot::Psi(q) => s.psi[q] = v,
        }
    }

    /// Bounds of the flat-prior coordinates.
    pub fn flat_bounds(self) -> Option<(f64, f64)> {
        match self {
            Slot::AG => Some(A_G_BOUNDS),
            Slot::BG => Some(B_G_BOUNDS),
            _ => None,
        }
    }
}

/// Canonical Gaussian `exp(−½θᵀQθ + bᵀθ)` over the listed slots.
#[derive(Debug, Clone)]
pub struct GaussianSystem {
    pub q: Matrix,
    pub b: Vec<f64>,
    pub slots: Vec<Slot>,
}

struct Layout {
    offsets: [Option<usize>; 10],
    slots: Vec<Slot>,
}

impl Layout {
    fn new(d: Dims, active: &dyn Fn(Block) -> bool) -> Self {
        let mut offsets = [None; 10];
        let mut slots = Vec::new();
        for (n, &blk) in LINEAR_MEAN_BLOCKS.iter().enumerate() {
            if !active(blk) {
                continue;
            }
            offsets[n] = Some(slots.len());
            match blk {
                Block::AC => slots.extend((0..d.countries).map(Slot::AC)),
                Block::AS => slots.extend((0..d.subregions).map(Slot::AS)),
                Block::AR => slots.extend((0..d.regions).map(Slot::AR)),
                Block::AG => slots.push(Slot::AG),
                Block::BC => slots.extend((0..d.countries).map(Slot::BC)),
                Block::BS => slots.extend((0..d.subregions).map(Slot::BS)),
                Block::BR => slots.extend((0..d.regions).map(Slot::BR)),
                Block::BG => slots.push(Slot::BG),
                Block::Beta => slots.extend((0..N_DESIGN).map(Slot::Beta)),
                Block::Psi => slots.extend((0..N_AGE_BASIS).map(Slot::Psi)),
                _ => unreachable!(),
            }
        }
        Self { offsets, slots }
    }

    /// Sparse coefficients of the active μ coordinates for one study.
    fn mu_design(&self, s: &StudyObs) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(24);
        let o = &self.offsets;
        let idx = [s.country, s.subregion, s.region, 0];
        for n in 0..4 {
            if let Some(off) = o[n] {
                out.push((off + idx[n], 1.0));
            }
            if let Some(off) = o[4 + n] {
                out.push((off + idx[n], s.tc));
            }
        }
        if let Some(off) = o[8] {
            for (m, &x) in s.x.iter().enumerate() {
                if x != 0.0 {
                    out.push((off + m, x));
                }
            }
        }
        out
    }

    fn psi_offset(&self) -> Option<usize> {
        self.offsets[9]
    }
}

fn prior_precision(slot: Slot, hypers: &HyperParams) -> f64 {
    match slot {
        Slot::AC(_) => 1.0 / hypers.kappa_a[0],
        Slot::AS(_) => 1.0 / hypers.kappa_a[1],
        Slot::AR(_) => 1.0 / hypers.kappa_a[2],
        Slot::BC(_) => 1.0 / hypers.kappa_b[0],
        Slot::BS(_) => 1.0 / hypers.kappa_b[1],
        Slot::BR(_) => 1.0 / hypers.kappa_b[2],
        Slot::AG | Slot::BG => 0.0,
        Slot::Beta(_) | Slot::Psi(_) => 1.0 / FIXED_PRIOR_VARIANCE,
    }
}

/// Full conditional of the active linear-mean coordinates in canonical form.
pub fn linear_mean_system(
    data: &ModelData,
    state: &ParamState,
    hypers: &HyperParams,
    active: &dyn Fn(Block) -> bool,
) -> GaussianSystem {
    let layout = Layout::new(data.dims, active);
    let n = layout.slots.len();
    let mut q = DenseMatrix::zeros(n, n);
    let mut b = vec![0.0; n];
    let theta: Vec<f64> = layout.slots.iter().map(|s| s.get(state)).collect();
    let psi_off = layout.psi_offset();
    for (i, s) in data.studies.iter().enumerate() {
        let d = layout.mu_design(s);
        let mu_fixed = baseline_level(data, i, state) - d.iter().map(|&(k, c)| c * theta[k]).sum::<f64>();
        let tau2 = hypers.tau2[s.class.index()];
        let (mut w, mut r_mu) = (0.0, 0.0);
        let mut w_psi = [0.0; N_AGE_BASIS];
        let mut r_psi = [0.0; N_AGE_BASIS];
        let mut q_psi = [[0.0; N_AGE_BASIS]; N_AGE_BASIS];
        for row in &s.rows {
            let v = row.sampling_var + tau2;
            let g = row_slope(state, &row.basis);
            let target = row.y - row_offset(state, s.country, &row.basis, psi_off.is_none()) - g * mu_fixed;
            w += g * g / v;
            r_mu += g * target / v;
            if psi_off.is_some() {
                for a in 0..N_AGE_BASIS {
                    let ba = row.basis[a] / v;
                    w_psi[a] += g * ba;
                    r_psi[a] += ba * target;
                    for c in 0..N_AGE_BASIS {
                        q_psi[a][c] += ba * row.basis[c];
                    }
                }
            }
        }
        q.add_sparse_outer(&d, w);
        for &(k, c) in &d {
            b[k] += c * r_mu;
        }
        if let Some(off) = psi_off {
            for a in 0..N_AGE_BASIS {
                b[off + a] += r_psi[a];
                for c in 0..N_AGE_BASIS {
                    q[(off + a, off + c)] += q_psi[a][c];
                }
                for &(k, coef) in &d {
                    q[(k, off + a)] += coef * w_psi[a];
                    q[(off + a, k)] += coef * w_psi[a];
                }
            }
        }
    }
    for (k, &slot) in layout.slots.iter().enumerate() {
        q[(k, k)] += prior_precision(slot, hypers);
    }
    GaussianSystem { q, b, slots: layout.slots }
}

/// Draws the system's coordinates. Flat bounded coordinates are drawn one at a
/// time from their truncated marginal with all unbounded coordinates integrated
/// out; the unbounded ones are then drawn given them.
pub fn sample_partially_collapsed<R: Rng + ?Sized>(
    sys: &GaussianSystem,
    current: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = sys.slots.len();
    let flat: Vec<(usize, (f64, f64))> = sys
        .slots
        .iter()
        .enumerate()
        .filter_map(|(k, s)| s.flat_bounds().map(|bd| (k, bd)))
        .collect();
    let rest: Vec<usize> = (0..n).filter(|k| !flat.iter().any(|(f, _)| f == k)).collect();
    let mut out = current.to_vec();

    let q_rr = DenseMatrix::from_fn(rest.len(), rest.len(), |a, c| sys.q[(rest[a], rest[c])]);
    let b_r: Vec<f64> = rest.iter().map(|&k| sys.b[k]).collect();
    let chol = if rest.is_empty() {
        None
    } else {
        Some(ScaledCholesky::factor(&q_rr)?)
    };
    let solve = |v: &[f64]| chol.as_ref().map_or_else(Vec::new, |c| c.solve(v));
    let z_b = solve(&b_r);
    let cross: Vec<Vec<f64>> = flat
        .iter()
        .map(|&(f, _)| rest.iter().map(|&k| sys.q[(k, f)]).collect())
        .collect();
    let z_f: Vec<Vec<f64>> = cross.iter().map(|c| solve(c)).collect();

    for (a, &(f, (lo, hi))) in flat.iter().enumerate() {
        let mut zb = z_b.clone();
        let mut bf = sys.b[f];
        for (c, &(g, _)) in flat.iter().enumerate() {
            if c == a {
                continue;
            }
            let xg = out[g];
            bf -= sys.q[(f, g)] * xg;
            for (z, &zg) in zb.iter_mut().zip(&z_f[c]) {
                *z -= zg * xg;
            }
        }
        let s = sys.q[(f, f)] - dot(&cross[a], &z_f[a]);
        let lin = bf - dot(&cross[a], &zb);
        out[f] = if s > 1e-300 {
            sample_truncated_normal(lin / s, 1.0 / s.sqrt(), lo, hi, rng)
        } else {
            lo + rng.random::<f64>() * (hi - lo)
        };
    }

    if let Some(chol) = &chol {
        let mut mean = z_b.clone();
        for (c, &(f, _)) in flat.iter().enumerate() {
            for (m, &zf) in mean.iter_mut().zip(&z_f[c]) {
                *m -= zf * out[f];
            }
        }
        let noise = chol.correlate(&standard_normals(rest.len(), rng));
        for (a, &k) in rest.iter().enumerate() {
            out[k] = mean[a] + noise[a];
        }
    }
    Ok(out)
}

pub fn update_linear_mean<R: Rng + ?Sized>(
    data: &ModelData,
    state: &mut ParamState,
    hypers: &HyperParams,
    active: &dyn Fn(Block) -> bool,
    rng: &mut R,
) -> Result<()> {
    let sys = linear_mean_system(data, state, hypers, active);
    if sys.slots.is_empty() {
        return Ok(());
    }
    let current: Vec<f64> = sys.slots.iter().map(|s| s.get(state)).collect();
    let draw = sample_partially_collapsed(&sys, &current, rng)?;
    for (slot, v) in sys.slots.iter().zip(draw) {
        slot.set(state, v);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// nonlinear trends

pub fn level_size(d: Dims, level: Level) -> usize {
    match level {
        Level::Country => d.countries,
        Level::Subregion => d.subregions,
        Level::Region => d.regions,
        Level::Globe => 1,
    }
}

pub fn member_of(level: Level, s: &StudyObs) -> usize {
    match level {
        Level::Country => s.country,
        Level::Subregion => s.subregion,
        Level::Region => s.region,
        Level::Globe => 0,
    }
}

pub fn u_vector(state: &ParamState, level: Level, idx: usize) -> &Vec<f64> {
    match level {
        Level::Country => &state.u_c[idx],
        Level::Subregion => &state.u_s[idx],
        Level::Region => &state.u_r[idx],
        Level::Globe => &state.u_g,
    }
}

pub fn u_vector_mut(state: &mut ParamState, level: Level, idx: usize) -> &mut Vec<f64> {
    match level {
        Level::Country => &mut state.u_c[idx],
        Level::Subregion => &mut state.u_s[idx],
        Level::Region => &mut state.u_r[idx],
        Level::Globe => &mut state.u_g,
    }
}

/// Data precision and linear term for every vector at `level`, one entry per vector.
pub fn u_data_terms(
    data: &ModelData,
    state: &ParamState,
    level: Level,
    pseudo: &Pseudo,
    mu: &[f64],
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let t_len = data.dims.years;
    let mut out = vec![(vec![0.0; t_len], vec![0.0; t_len]); level_size(data.dims, level)];
    for (i, s) in data.studies.iter().enumerate() {
        let m = member_of(level, s);
        let u = u_vector(state, level, m)[s.t];
        let (d, l) = &mut out[m];
        d[s.t] += pseudo.w[i];
        l[s.t] += pseudo.r[i] - pseudo.w[i] * (mu[i] - u);
    }
    out
}

/// Conditional of one trend vector under precision `lambda`, made proper on the
/// constrained subspace by adding `(λ + mean(d))·AᵀA`.
pub fn u_conditional(data: &ModelData, lambda: f64, diag: &[f64], linear: &[f64]) -> Result<ConstrainedGaussian<f64>> {
    let p = data.rw2.matrix();
    let n = diag.len();
    let mut q = DenseMatrix::from_fn(n, n, |a, c| lambda * p[(a, c)]);
    for (t, &d) in diag.iter().enumerate() {
        q[(t, t)] += d;
    }
    let aug = lambda + diag.iter().sum::<f64>() / n as f64;
    data.constraints.augment(&mut q, aug);
    ConstrainedGaussian::new(&q, linear, &data.constraints)
}

pub fn update_u_level<R: Rng + ?Sized>(
    data: &ModelData,
    state: &mut ParamState,
    hypers: &HyperParams,
    level: Level,
    rng: &mut R,
) -> Result<()> {
    let pseudo = pseudo_observations(data, state, hypers);
    let mu = current_mu(data, state);
    let terms = u_data_terms(data, state, level, &pseudo, &mu);
    let lambda = hypers.lambda[level.index()];
    for (m, (d, l)) in terms.iter().enumerate() {
        let cg = u_conditional(data, lambda, d, l)?;
        *u_vector_mut(state, level, m) = cg.sample(rng);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// spline population effects, country spline effects, study effects

/// Joint conditional of the active subset of `(ψ, φ)`.
pub fn psi_phi_system(
    data: &ModelData,
    state: &ParamState,
    hypers: &HyperParams,
    psi_active: bool,
    phi_active: bool,
) -> Option<(Matrix, Vec<f64>)> {
    let n = N_AGE_BASIS * (psi_active as usize + phi_active as usize);
    if n == 0 {
        return None;
    }
    let mut q = DenseMatrix::zeros(n, n);
    let mut b = vec![0.0; n];
    let mut x = vec![0.0; n];
    for (i, s) in data.studies.iter().enumerate() {
        let mu = baseline_level(data, i, state);
        let tau2 = hypers.tau2[s.class.index()];
        for row in &s.rows {
            let v = row.sampling_var + tau2;
            let mut target = row.y - mu - dot(&state.c[s.country], &row.basis);
            if !psi_active {
                target -= dot(&state.psi, &row.basis);
            }
            if !phi_active {
                target -= mu * dot(&state.phi, &row.basis);
            }
            let mut n_fill = 0;
            if psi_active {
                x[..N_AGE_BASIS].copy_from_slice(&row.basis);
                n_fill = N_AGE_BASIS;
            }
            if phi_active {
                for a in 0..N_AGE_BASIS {
                    x[n_fill + a] = mu * row.basis[a];
                }
            }
            for a in 0..n {
                let xa = x[a] / v;
                b[a] += xa * target;
                for c in 0..n {
                    q[(a, c)] += xa * x[c];
                }
            }
        }
    }
    for a in 0..n {
        q[(a, a)] += 1.0 / FIXED_PRIOR_VARIANCE;
    }
    Some((q, b))
}

pub fn update_psi_phi<R: Rng + ?Sized>(
    data: &ModelData,
    state: &mut ParamState,
    hypers: &HyperParams,
    psi_active: bool,
    phi_active: bool,
    rng: &mut R,
) -> Result<()> {
    let Some((q, b)) = psi_phi_system(data, state, hypers, psi_active, phi_active) else {
        return Ok(());
    };
    let draw = crate::linalg::sample_canonical(&q, &b, rng)?;
    let mut it = draw.into_iter();
    if psi_active {
        for a in 0..N_AGE_BASIS {
            state.psi[a] = it.next().expect("draw length");
        }
    }
    if phi_active {
        for a in 0..N_AGE_BASIS {
            state.phi[a] = it.next().expect("draw length");
        }
    }
    Ok(())
}

/// Conditional of `c_j` (5-vector) for every country.
pub fn c_systems(data: &ModelData, state: &ParamState, hypers: &HyperParams) -> Vec<(Matrix, Vec<f64>)> {
    let mut out: Vec<(Matrix, Vec<f64>)> = (0..data.dims.countries)
        .map(|_| {
            let mut q = DenseMatrix::zeros(N_AGE_BASIS, N_AGE_BASIS);
            for a in 0..N_AGE_BASIS {
                q[(a, a)] = 1.0 / hypers.sigma2[a];
            }
            (q, vec![0.0; N_AGE_BASIS])
        })
        .collect();
    for (i, s) in data.studies.iter().enumerate() {
        let mu = baseline_level(data, i, state);
        let tau2 = hypers.tau2[s.class.index()];
        let (q, b) = &mut out[s.country];
        for row in &s.rows {
            let v = row.sampling_var + tau2;
            let g = row_slope(state, &row.basis);
            let target = row.y - g * mu - dot(&state.psi, &row.basis);
            for a in 0..N_AGE_BASIS {
                let ba = row.basis[a] / v;
                b[a] += ba * target;
                for c in 0..N_AGE_BASIS {
                    q[(a, c)] += ba * row.basis[c];
                }
            }
        }
    }
    out
}

pub fn update_c<R: Rng + ?Sized>(
    data: &ModelData,
    state: &mut ParamState,
    hypers: &HyperParams,
    rng: &mut R,
) -> Result<()> {
    for (j, (q, b)) in c_systems(data, state, hypers).into_iter().enumerate() {
        let draw = crate::linalg::sample_canonical(&q, &b, rng)?;
        state.c[j].copy_from_slice(&draw);
    }
    Ok(())
}

/// `(precision, linear)` of each study effect's full conditional.
pub fn e_conditionals(data: &ModelData, state: &ParamState, hypers: &HyperParams) -> Vec<(f64, f64)> {
    let pseudo = pseudo_observations(data, state, hypers);
    data.studies
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mu_rest = baseline_level(data, i, state) - state.e[i];
            let prec = pseudo.w[i] + 1.0 / hypers.nu[s.class.index()];
            (prec, pseudo.r[i] - pseudo.w[i] * mu_rest)
        })
        .collect()
}

pub fn update_e<R: Rng + ?Sized>(
    data: &ModelData,
    state: &mut ParamState,
    hypers: &HyperParams,
    rng: &mut R,
) -> Result<()> {
    for (i, (prec, lin)) in e_conditionals(data, state, hypers).into_iter().enumerate() {
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        state.e[i] = lin / prec + z / prec.sqrt();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::log_posterior;
    use crate::sampler::testutil::{small_data, small_hypers, small_state};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all_active(_: Block) -> bool {
        true
    }

    /// The gradient of a quadratic log density is `b − Qθ`.
    fn check_gradient(sys: &GaussianSystem, state: &ParamState, f: &dyn Fn(&ParamState) -> f64) {
        let theta: Vec<f64> = sys.slots.iter().map(|s| s.get(state)).collect();
        let qt = sys.q.mul_vec(&theta);
        for (k, slot) in sys.slots.iter().enumerate() {
            let analytic = sys.b[k] - qt[k];
            let h = 1e-4 * (1.0 + theta[k].abs());
            let mut plus = state.clone();
            let mut minus = state.clone();
            slot.set(&mut plus, theta[k] + h);
            slot.set(&mut minus, theta[k] - h);
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let scale = analytic.abs().max(fd.abs()).max(1e-2);
            assert!(
                (analytic - fd).abs() / scale < 1e-4,
                "{slot:?}: analytic {analytic} vs finite difference {fd}"
            );
        }
    }

    #[test]
    fn linear_mean_gradient_matches_log_posterior() {
        let data = small_data();
        let mut state = small_state(&data);
        state.phi = [0.0; N_AGE_BASIS];
        let hp = small_hypers();
        // ψ enters quadratically only when φ = 0, so test it with φ fixed at zero
        let sys = linear_mean_system(&data, &state, &hp, &all_active);
        check_gradient(&sys, &state, &|s| log_posterior(&data, s, &hp));

        let mut state = small_state(&data);
        state.phi = [0.002, 1e-5, 0.0, 0.0, 0.0];
        let sys = linear_mean_system(&data, &state, &hp, &|b| b != Block::Psi);
        check_gradient(&sys, &state, &|s| log_posterior(&data, s, &hp));
    }

    #[test]
    fn e_and_c_conditionals_match_gradient() {
        let data = small_data();
        let state = small_state(&data);
        let hp = small_hypers();
        let lp = |s: &ParamState| log_posterior(&data, s, &hp);
        for (i, (prec, lin)) in e_conditionals(&data, &state, &hp).into_iter().enumerate().take(6) {
            let h = 1e-4;
            let mut p = state.clone();
            let mut m = state.clone();
            p.e[i] += h;
            m.e[i] -= h;
            let fd = (lp(&p) - lp(&m)) / (2.0 * h);
            let analytic = lin - prec * state.e[i];
            assert!((fd - analytic).abs() / analytic.abs().max(1e-2) < 1e-4, "{i}: {fd} {analytic}");
        }
        for (j, (q, b)) in c_systems(&data, &state, &hp).into_iter().enumerate() {
            let qc = q.mul_vec(&state.c[j]);
            for a in 0..N_AGE_BASIS {
                let h = 1e-4 * state.c[j][a].abs().max(1e-6);
                let mut p = state.clone();
                let mut m = state.clone();
                p.c[j][a] += h;
                m.c[j][a] -= h;
                let fd = (lp(&p) - lp(&m)) / (2.0 * h);
                let analytic = b[a] - qc[a];
                assert!((fd - analytic).abs() / analytic.abs().max(1.0) < 1e-4, "c[{j},{a}]: {fd} {analytic}");
            }
        }
    }

    #[test]
    fn u_conditional_matches_gradient_on_subspace() {
        let data = small_data();
        let state = small_state(&data);
        let hp = small_hypers();
        let pseudo = pseudo_observations(&data, &state, &hp);
        let mu = current_mu(&data, &state);
        let terms = u_data_terms(&data, &state, Level::Country, &pseudo, &mu);
        let (d, l) = &terms[0];
        let lam = hp.lambda[0];
        let u = &state.u_c[0];
        let p = data.rw2.matrix();
        // directional derivative along a constraint-preserving direction
        let mut dir: Vec<f64> = (0..u.len()).map(|t| ((t * t) as f64 * 0.37).cos()).collect();
        data.constraints.apply_projection(&mut dir);
        let pu = p.mul_vec(u);
        let analytic: f64 = (0..u.len()).map(|t| dir[t] * (l[t] - d[t] * u[t] - lam * pu[t])).sum();
        let h = 1e-5;
        let shift = |sgn: f64| {
            let mut s = state.clone();
            for t in 0..u.len() {
                s.u_c[0][t] += sgn * h * dir[t];
            }
            log_posterior(&data, &s, &hp)
        };
        let fd = (shift(1.0) - shift(-1.0)) / (2.0 * h);
        assert!((fd - analytic).abs() / analytic.abs().max(1.0) < 1e-4, "{fd} vs {analytic}");
    }

    #[test]
    fn flat_coordinate_without_data_is_uniform() {
        let sys = GaussianSystem {
            q: DenseMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]),
            b: vec![0.0, 0.0],
            slots: vec![Slot::AG, Slot::AC(0)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| sample_partially_collapsed(&sys, &[1.0, 0.0], &mut rng).unwrap())
            .collect();
        let mean_ag = draws.iter().map(|d| d[0]).sum::<f64>() / n as f64;
        let var_ac = draws.iter().map(|d| d[1] * d[1]).sum::<f64>() / n as f64;
        assert!((mean_ag - 500.0).abs() < 8.0, "{mean_ag}");
        assert!(draws.iter().all(|d| (0.0..=1000.0).contains(&d[0])));
        assert!((var_ac - 0.5).abs() < 0.03, "{var_ac}");
    }

    #[test]
    fn collapsed_draw_matches_joint_gaussian_when_bounds_inactive() {
        // joint canonical form over (a_g, a_c); bounds far from the mass
        let q = DenseMatrix::from_row_slice(2, 2, &[3.0, 1.2, 1.2, 2.0]);
        let b = vec![300.0, 100.0];
        let sys = GaussianSystem {
            q: q.clone(),
            b: b.clone(),
            slots: vec![Slot::AG, Slot::AC(0)],
        };
        let chol = crate::linalg::Cholesky::factor(&q).unwrap();
        let mean = chol.solve(&b);
        let det = 3.0 * 2.0 - 1.2 * 1.2;
        let cov = [2.0 / det, -1.2 / det, 3.0 / det];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 40_000;
        let mut s = [0.0; 5];
        let mut cur = vec![100.0, 0.0];
        for _ in 0..n {
            cur = sample_partially_collapsed(&sys, &cur, &mut rng).unwrap();
            s[0] += cur[0];
            s[1] += cur[1];
            s[2] += cur[0] * cur[0];
            s[3] += cur[0] * cur[1];
            s[4] += cur[1] * cur[1];
        }
        let nf = n as f64;
        let m0 = s[0] / nf;
        let m1 = s[1] / nf;
        assert!((m0 - mean[0]).abs() < 4.0 * (cov[0] / nf).sqrt() * 1.5);
        assert!((m1 - mean[1]).abs() < 4.0 * (cov[2] / nf).sqrt() * 1.5);
        assert!((s[2] / nf - m0 * m0 - cov[0]).abs() < 0.03);
        assert!((s[3] / nf - m0 * m1 - cov[1]).abs() < 0.03);
        assert!((s[4] / nf - m1 * m1 - cov[2]).abs() < 0.03);
    }

    #[test]
    fn e_with_uninformative_data_returns_prior() {
        let mut data = small_data();
        for s in &mut data.studies {
            for r in &mut s.rows {
                r.sampling_var = 1e14;
            }
        }
        let mut state = small_state(&data);
        let hp = small_hypers();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let i = 0;
        let nu = hp.nu[data.studies[i].class.index()];
        let n = 10_000;
        let (mut m, mut v) = (0.0, 0.0);
        for _ in 0..n {
            update_e(&data, &mut state, &hp, &mut rng).unwrap();
            m += state.e[i];
            v += state.e[i] * state.e[i];
        }
        let m = m / n as f64;
        let v = v / n as f64 - m * m;
        assert!(m.abs() < 4.0 * (nu / n as f64).sqrt());
        // sd of a sample variance ≈ v·sqrt(2/n)
        assert!((v - nu).abs() < 4.0 * nu * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn beta_orthonormal_design_matches_per_coordinate_posterior() {
        use crate::geo_data::{AgeRow, Coverage, CovariateTable, Dataset, GeoHierarchy, StudyRecord, Window};
        // eleven single-row studies with design rows equal to unit vectors
        let h = GeoHierarchy::from_indices(vec![0], vec![0]).unwrap();
        let w = Window::new(2000, 2002).unwrap();
        let cov = CovariateTable::from_series(&h, w, vec![(2000, vec![[0.0, 0.5, 0.0, 0.0, 0.0, 0.0]; 3])]).unwrap();
        let studies: Vec<StudyRecord> = (0..N_DESIGN)
            .map(|m| StudyRecord {
                study_id: format!("s{m}"),
                country: 0,
                year: 2001,
                coverage: Coverage::WeightedNational,
                study_urbanization: 0.5,
                rows: vec![AgeRow::new(45.5, 54.5, 1.0 + m as f64, 1.0, 1).unwrap()],
            })
            .collect();
        let mut ds = Dataset::new(h, w, studies, cov).unwrap();
        for (m, x) in ds.design.iter_mut().enumerate() {
            *x = [0.0; N_DESIGN];
            x[m] = 1.0;
        }
        let data = ModelData::new(&ds).unwrap();
        let state = ParamState::zeros(data.dims);
        let mut hp = small_hypers();
        hp.tau2 = [1e-9, 2e-9, 3e-9, 4e-9];
        let only_beta = |b: Block| b == Block::Beta;
        let sys = linear_mean_system(&data, &state, &hp, &only_beta);
        let chol = crate::linalg::Cholesky::factor(&sys.q).unwrap();
        let mean = chol.solve(&sys.b);
        for m in 0..N_DESIGN {
            // unit-variance observation y_m of β_m with N(0, 1e6) prior
            let v = 1.0 + 1e-9;
            let prec = 1.0 / v + 1e-6;
            assert!((mean[m] - (1.0 + m as f64) / v / prec).abs() < 1e-9);
            for c in 0..N_DESIGN {
                let expect = if c == m { prec } else { 0.0 };
                assert!((sys.q[(m, c)] - expect).abs() < 1e-12);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut st = state.clone();
        let n = 10_000;
        let mut acc = [0.0; N_DESIGN];
        for _ in 0..n {
            update_linear_mean(&data, &mut st, &hp, &only_beta, &mut rng).unwrap();
            for m in 0..N_DESIGN {
                acc[m] += st.beta[m] / n as f64;
            }
        }
        for m in 0..N_DESIGN {
            assert!((acc[m] - mean[m]).abs() < 4.0 * (1.0 / n as f64).sqrt());
        }
    }
}
