//! Second-order random-walk (RW2) precision structure and Gaussian draws under
//! the zero-mean / zero-slope constraints.
//!
//! The RW2 precision `P = D₂ᵀ D₂` is intrinsic with rank `T - 2`; its null space
//! is spanned by the constant and linear vectors, which is exactly what the two
//! constraints remove. Constrained draws use conditioning by kriging:
//! draw `x ~ N(Q⁻¹b, Q⁻¹)`, then `u = x - Q⁻¹Aᵀ (A Q⁻¹ Aᵀ)⁻¹ A x`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{dot, standard_normals, DenseMatrix, ScaledCholesky};
use crate::scalar::Scalar;

/// `P = D₂ᵀ D₂` for a grid of length `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rw2Precision<T> {
    matrix: DenseMatrix<T>,
}

impl<T: Scalar> Rw2Precision<T> {
    pub fn new(t_len: usize) -> Result<Self> {
        if t_len < 3 {
            return Err(Error::InvalidArgument(format!(
                "RW2 precision needs a grid of length >= 3, got {t_len}"
            )));
        }
        let mut matrix = DenseMatrix::zeros(t_len, t_len);
        let stencil = [T::one(), T::lit(-2.0), T::one()];
        for r in 0..t_len - 2 {
            for (a, &da) in stencil.iter().enumerate() {
                for (b, &db) in stencil.iter().enumerate() {
                    matrix[(r + a, r + b)] += da * db;
                }
            }
        }
        Ok(Self { matrix })
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rank(&self) -> usize {
        self.len() - 2
    }

    pub fn matrix(&self) -> &DenseMatrix<T> {
        &self.matrix
    }

    /// `uᵀ P u`, evaluated as the sum of squared second differences.
    pub fn quad_form(&self, u: &[T]) -> T {
        debug_assert_eq!(u.len(), self.len());
        u.windows(3)
            .map(|w| {
                let d = w[0] - T::lit(2.0) * w[1] + w[2];
                d * d
            })
            .sum()
    }
}

pub fn build_rw2_precision<T: Scalar>(t_len: usize) -> Result<Rw2Precision<T>> {
    Rw2Precision::new(t_len)
}

/// Zero-mean and zero-slope contrasts, stored with unit-norm orthogonal rows
/// (`1/sqrt(T)` and the centered index vector divided by its norm). They span
/// the same space as the plain mean contrast `(1/T, …, 1/T)` and the OLS slope.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet<T> {
    mean_row: Vec<T>,
    slope_row: Vec<T>,
}

impl<T: Scalar> ConstraintSet<T> {
    pub fn new(t_len: usize) -> Self {
        assert!(t_len >= 2, "constraints need at least two grid points");
        let n = T::from_count(t_len);
        let mean_row = vec![T::one() / n.sqrt(); t_len];
        let center = (n - T::one()) / T::lit(2.0);
        let centered: Vec<T> = (0..t_len).map(|i| T::from_count(i) - center).collect();
        let norm = dot(&centered, &centered).sqrt();
        let slope_row = centered.into_iter().map(|c| c / norm).collect();
        Self {
            mean_row,
            slope_row,
        }
    }

    pub fn len(&self) -> usize {
        self.mean_row.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_row.is_empty()
    }

    pub fn rows(&self) -> [&[T]; 2] {
        [&self.mean_row, &self.slope_row]
    }

    /// `A u` with the orthonormal rows.
    pub fn apply(&self, u: &[T]) -> [T; 2] {
        [dot(&self.mean_row, u), dot(&self.slope_row, u)]
    }

    /// Orthogonal projection of `u` onto `A u = 0`, in place.
    pub fn apply_projection(&self, u: &mut [T]) {
        let [m, s] = self.apply(u);
        for ((x, &a), &b) in u.iter_mut().zip(&self.mean_row).zip(&self.slope_row) {
            *x -= m * a + s * b;
        }
    }

    /// Largest absolute value among the plain mean and the OLS slope of `u` on its index.
    pub fn violation(&self, u: &[T]) -> T {
        let mean = u.iter().copied().sum::<T>() / T::from_count(u.len());
        mean.abs().max(ols_slope_on_index(u).abs())
    }

    /// Adds `scale · AᵀA` to `q`. On the constraint subspace the quadratic form
    /// is unchanged, while the constant/linear directions become proper.
    pub fn augment(&self, q: &mut DenseMatrix<T>, scale: T) {
        let n = self.len();
        for i in 0..n {
            for j in 0..n {
                q[(i, j)] += scale
                    * (self.mean_row[i] * self.mean_row[j] + self.slope_row[i] * self.slope_row[j]);
            }
        }
    }
}

pub(crate) fn ols_slope_on_index<T: Scalar>(u: &[T]) -> T {
    let n = u.len();
    let center = (T::from_count(n) - T::one()) / T::lit(2.0);
    let mean = u.iter().copied().sum::<T>() / T::from_count(n);
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    for (i, &v) in u.iter().enumerate() {
        let dx = T::from_count(i) - center;
        sxy += dx * (v - mean);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// `((T-2)/2)·ln λ − (λ/2)·uᵀPu`, the RW2 log kernel on the constrained subspace.
pub fn rw2_log_density_kernel<T: Scalar>(u: &[T], lambda: T, precision: &Rw2Precision<T>) -> T {
    let half = T::lit(0.5);
    half * T::from_count(precision.rank()) * lambda.ln() - half * lambda * precision.quad_form(u)
}

/// The Gaussian with canonical parameters `(Q, b)` restricted to `A u = 0`.
///
/// `Q` must be positive definite. Intrinsic precisions should first be made
/// proper with [`ConstraintSet::augment`].
#[derive(Debug, Clone)]
pub struct ConstrainedGaussian<T> {
    chol: ScaledCholesky<T>,
    linear: Vec<T>,
    /// `Q⁻¹ Aᵀ`, one column per constraint.
    q_inv_at: [Vec<T>; 2],
    /// `(A Q⁻¹ Aᵀ)⁻¹`
    s_inv: [[T; 2]; 2],
    log_det_s: T,
    mean: Vec<T>,
    constraints: ConstraintSet<T>,
}

impl<T: Scalar> ConstrainedGaussian<T> {
    pub fn new(q: &DenseMatrix<T>, linear: &[T], constraints: &ConstraintSet<T>) -> Result<Self> {
        let n = q.rows();
        if linear.len() != n || constraints.len() != n {
            return Err(Error::InvalidArgument(format!(
                "dimension mismatch: Q is {n}x{n}, b has {}, constraints {}",
                linear.len(),
                constraints.len()
            )));
        }
        let chol = ScaledCholesky::factor(q)?;
        let [r0, r1] = constraints.rows();
        let q_inv_at = [chol.solve(r0), chol.solve(r1)];
        let s00 = dot(r0, &q_inv_at[0]);
        let s01 = dot(r0, &q_inv_at[1]);
        let s11 = dot(r1, &q_inv_at[1]);
        let det = s00 * s11 - s01 * s01;
        if !(det > T::zero()) {
            return Err(Error::Linalg(crate::error::LinalgError::NotPositiveDefinite {
                pivot: n,
            }));
        }
        let s_inv = [[s11 / det, -s01 / det], [-s01 / det, s00 / det]];
        let unconstrained = chol.solve(linear);
        let mut g = Self {
            chol,
            linear: linear.to_vec(),
            q_inv_at,
            s_inv,
            log_det_s: det.ln(),
            mean: Vec::new(),
            constraints: constraints.clone(),
        };
        g.mean = g.krige(unconstrained);
        Ok(g)
    }

    fn krige(&self, mut x: Vec<T>) -> Vec<T> {
        let ax = self.constraints.apply(&x);
        let w0 = self.s_inv[0][0] * ax[0] + self.s_inv[0][1] * ax[1];
        let w1 = self.s_inv[1][0] * ax[0] + self.s_inv[1][1] * ax[1];
        for (i, xi) in x.iter_mut().enumerate() {
            *xi -= self.q_inv_at[0][i] * w0 + self.q_inv_at[1][i] * w1;
        }
        x
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn sample<R>(&self, rng: &mut R) -> Vec<T>
    where
        R: Rng + ?Sized,
        StandardNormal: Distribution<T>,
    {
        let n = self.dim();
        let noise = self.chol.correlate(&standard_normals(n, rng));
        let unconstrained = self.chol.solve(&self.linear);
        let x: Vec<T> = unconstrained
            .into_iter()
            .zip(noise)
            .map(|(m, e)| m + e)
            .collect();
        self.krige(x)
    }

    /// `ln det(Vᵀ Q V)` for an orthonormal basis `V` of the constraint subspace,
    /// via `det(VᵀQV) = det(Q) · det(A Q⁻¹ Aᵀ)`.
    pub fn log_det_on_subspace(&self) -> T {
        self.chol.log_det() + self.log_det_s
    }

    /// `ln ∫_{Au=0} exp(−½uᵀQu + bᵀu) du`.
    pub fn log_integral(&self) -> T {
        let half = T::lit(0.5);
        let dim = T::from_count(self.dim() - 2);
        half * dim * T::lit(std::f64::consts::TAU).ln() - half * self.log_det_on_subspace()
            + half * dot(&self.linear, &self.mean)
    }
}

/// One draw from `N(Q⁻¹b, Q⁻¹)` conditioned on `A u = 0`.
pub fn sample_constrained_gaussian<T, R>(
    q: &DenseMatrix<T>,
    linear: &[T],
    constraints: &ConstraintSet<T>,
    rng: &mut R,
) -> Result<Vec<T>>
where
    T: Scalar,
    R: Rng + ?Sized,
    StandardNormal: Distribution<T>,
{
    Ok(ConstrainedGaussian::new(q, linear, constraints)?.sample(rng))
}
