//! Small dense linear algebra: row-major matrices, Cholesky factorization and
//! Gaussian draws in canonical (precision, linear term) form.

use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::LinalgError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_slice(rows: usize, cols: usize, values: &[T]) -> Self {
        assert_eq!(values.len(), rows * cols, "row slice length");
        Self {
            rows,
            cols,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self += alpha * x xᵀ` restricted to the listed sparse entries of `x`.
    pub fn add_sparse_outer(&mut self, entries: &[(usize, T)], alpha: T) {
        for &(i, xi) in entries {
            let s = alpha * xi;
            for &(j, xj) in entries {
                self[(i, j)] += s * xj;
            }
        }
    }

    /// xᵀ M x
    pub fn quad_form(&self, x: &[T]) -> T {
        x.iter().zip(self.mul_vec(x)).map(|(&a, b)| a * b).sum()
    }
}

impl<T> Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: DenseMatrix<T>,
}

impl<T: Scalar> Cholesky<T> {
    pub fn factor(a: &DenseMatrix<T>) -> Result<Self, LinalgError> {
        let n = a.rows();
        if a.cols() != n {
            return Err(LinalgError::DimensionMismatch {
                expected: n,
                found: a.cols(),
            });
        }
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite { pivot: j });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn factor_matrix(&self) -> &DenseMatrix<T> {
        &self.l
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[(i, k)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn log_det(&self) -> T {
        let two = T::lit(2.0);
        (0..self.dim()).map(|i| two * self.l[(i, i)].ln()).sum()
    }
}

/// Cholesky of a Jacobi-rescaled matrix: `A = S⁻¹ (L Lᵀ) S⁻¹` with
/// `S = diag(1/sqrt(A_ii))`. Keeps badly scaled precisions (spline columns span
/// ten orders of magnitude) factorable.
#[derive(Debug, Clone)]
pub struct ScaledCholesky<T> {
    scale: Vec<T>,
    inner: Cholesky<T>,
}

impl<T: Scalar> ScaledCholesky<T> {
    pub fn factor(a: &DenseMatrix<T>) -> Result<Self, LinalgError> {
        let n = a.rows();
        let mut scale = Vec::with_capacity(n);
        for i in 0..n {
            let d = a[(i, i)];
            if !(d > T::zero()) || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite { pivot: i });
            }
            scale.push(T::one() / d.sqrt());
        }
        let scaled = DenseMatrix::from_fn(n, n, |i, j| a[(i, j)] * scale[i] * scale[j]);
        let inner = Cholesky::factor(&scaled)?;
        Ok(Self { scale, inner })
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let sb: Vec<T> = b.iter().zip(&self.scale).map(|(&x, &s)| x * s).collect();
        let y = self.inner.solve(&sb);
        y.iter().zip(&self.scale).map(|(&x, &s)| x * s).collect()
    }

    /// Maps iid standard normals `z` to a draw with covariance `A⁻¹`.
    pub fn correlate(&self, z: &[T]) -> Vec<T> {
        let y = self.inner.solve_upper(z);
        y.iter().zip(&self.scale).map(|(&x, &s)| x * s).collect()
    }

    pub fn log_det(&self) -> T {
        let two = T::lit(2.0);
        self.inner.log_det() - two * self.scale.iter().map(|s| s.ln()).sum::<T>()
    }
}

pub fn standard_normals<T, R>(n: usize, rng: &mut R) -> Vec<T>
where
    T: Scalar,
    R: Rng + ?Sized,
    StandardNormal: Distribution<T>,
{
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws `x ~ N(Q⁻¹ b, Q⁻¹)`.
pub fn sample_canonical<T, R>(q: &DenseMatrix<T>, b: &[T], rng: &mut R) -> Result<Vec<T>, LinalgError>
where
    T: Scalar,
    R: Rng + ?Sized,
    StandardNormal: Distribution<T>,
{
    let chol = ScaledCholesky::factor(q)?;
    let mean = chol.solve(b);
    let noise = chol.correlate(&standard_normals(q.rows(), rng));
    Ok(mean.iter().zip(noise).map(|(&m, e)| m + e).collect())
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spd3() -> DenseMatrix<f64> {
        DenseMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0])
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = spd3();
        let c = Cholesky::factor(&a).unwrap();
        let l = c.factor_matrix();
        let back = l.matmul(&l.transpose());
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(back[(i, j)], a[(i, j)], epsilon = 1e-12);
            }
        }
        let x = c.solve(&[1.0, 2.0, 3.0]);
        let ax = a.mul_vec(&x);
        assert_relative_eq!(ax[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(ax[2], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn scaled_matches_plain() {
        let a = spd3();
        let c = Cholesky::factor(&a).unwrap();
        let s = ScaledCholesky::factor(&a).unwrap();
        assert_relative_eq!(c.log_det(), s.log_det(), epsilon = 1e-12);
        let b = [0.3, -1.0, 2.0];
        for (x, y) in c.solve(&b).iter().zip(s.solve(&b)) {
            assert_relative_eq!(*x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let a = DenseMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            Cholesky::factor(&a),
            Err(LinalgError::NotPositiveDefinite { pivot: 1 })
        ));
    }

    #[test]
    fn canonical_draw_moments() {
        let q = spd3();
        let b = [1.0, 0.0, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40_000;
        let mut mean = [0.0; 3];
        for _ in 0..n {
            let x = sample_canonical(&q, &b, &mut rng).unwrap();
            for k in 0..3 {
                mean[k] += x[k] / n as f64;
            }
        }
        let target = Cholesky::factor(&q).unwrap().solve(&b);
        for k in 0..3 {
            assert!((mean[k] - target[k]).abs() < 0.02, "{k}: {} vs {}", mean[k], target[k]);
        }
    }

    #[test]
    fn works_in_f32() {
        let a = DenseMatrix::<f32>::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let x = ScaledCholesky::factor(&a).unwrap().solve(&[1.0, 1.0]);
        let ax = a.mul_vec(&x);
        assert!((ax[0] - 1.0).abs() < 1e-5 && (ax[1] - 1.0).abs() < 1e-5);
    }
}
