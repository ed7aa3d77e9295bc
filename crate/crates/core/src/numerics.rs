//! Dense symmetric linear algebra and a finite-difference gradient oracle.
//!
//! Factorizations are delegated to `nalgebra`; this module owns the symmetry
//! invariant, the jitter policy and the ascending-order eigen contract.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative jitter added to the diagonal when a factorization fails.
pub const JITTER_SCALE: f64 = 1e-8;
/// Number of times the jitter is doubled before giving up.
pub const JITTER_DOUBLINGS: usize = 3;

/// Square matrix whose entries are exactly symmetric and finite.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    inner: DMatrix<f64>,
}

impl SymMatrix {
    /// Builds the matrix by evaluating `f(i, j)` for `j >= i` and mirroring.
    pub fn from_fn(order: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut m = DMatrix::zeros(order, order);
        for i in 0..order {
            for j in i..order {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self::checked(m)
    }

    /// Symmetrizes `(A + Aᵀ) / 2`.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        let t = m.transpose();
        Self::checked((m + t) * 0.5)
    }

    /// Row-major entries, as in the serialized layout.
    pub fn from_entries(order: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != order * order {
            return Err(Error::DimensionMismatch {
                expected: order * order,
                found: entries.len(),
            });
        }
        Self::from_matrix(DMatrix::from_row_slice(order, order, entries))
    }

    fn checked(m: DMatrix<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("symmetric matrix has non-finite entries"));
        }
        Ok(SymMatrix { inner: m })
    }

    pub fn identity(order: usize) -> Self {
        SymMatrix {
            inner: DMatrix::identity(order, order),
        }
    }

    pub fn zeros(order: usize) -> Self {
        SymMatrix {
            inner: DMatrix::zeros(order, order),
        }
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        Self::checked(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
    }

    pub fn order(&self) -> usize {
        self.inner.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.inner
    }

    pub fn entries(&self) -> Vec<f64> {
        let n = self.order();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.inner[(i, j)]);
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        self.inner.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.inner.norm()
    }

    pub fn add_diagonal(&self, value: f64) -> SymMatrix {
        let mut m = self.inner.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += value;
        }
        SymMatrix { inner: m }
    }

    pub fn scale(&self, factor: f64) -> SymMatrix {
        SymMatrix {
            inner: &self.inner * factor,
        }
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<SymMatrix> {
        self.same_order(other)?;
        Ok(SymMatrix {
            inner: &self.inner - &other.inner,
        })
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        self.same_order(other)?;
        Ok(SymMatrix {
            inner: &self.inner + &other.inner,
        })
    }

    fn same_order(&self, other: &SymMatrix) -> Result<()> {
        if self.order() != other.order() {
            return Err(Error::OrderMismatch {
                left: self.order(),
                right: other.order(),
            });
        }
        Ok(())
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.inner * v
    }
}

/// Cholesky factor of a positive definite matrix, possibly after jitter.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl CholeskyFactor {
    /// Factorizes `a`, retrying with diagonal jitter `1e-8 * trace / n`
    /// doubled up to three times.
    pub fn new(a: &SymMatrix) -> Result<Self> {
        if let Some(chol) = Cholesky::new(a.inner.clone()) {
            return Ok(CholeskyFactor { chol, jitter: 0.0 });
        }
        let n = a.order().max(1);
        let base = JITTER_SCALE * (a.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
        let mut jitter = base;
        for _ in 0..=JITTER_DOUBLINGS {
            if let Some(chol) = Cholesky::new(a.add_diagonal(jitter).inner) {
                return Ok(CholeskyFactor { chol, jitter });
            }
            jitter *= 2.0;
        }
        Err(Error::NotPositiveDefinite {
            attempts: JITTER_DOUBLINGS + 2,
        })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular `L` with `LLᵀ` equal to the (jittered) input.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn order(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `log |A|` of the (jittered) factorized matrix.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// `vᵀ A⁻¹ v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.solve(v))
    }
}

/// Solves `A x = b` for positive definite `A` under the jitter policy.
pub fn cholesky_solve(a: &SymMatrix, b: &DVector<f64>) -> Result<DVector<f64>> {
    if b.len() != a.order() {
        return Err(Error::DimensionMismatch {
            expected: a.order(),
            found: b.len(),
        });
    }
    Ok(CholeskyFactor::new(a)?.solve(b))
}

/// Eigenvalues in ascending order with matching orthonormal eigenvectors
/// stored as columns.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    /// Largest absolute eigenvalue.
    pub fn spectral_norm(&self) -> f64 {
        self.min().abs().max(self.max().abs())
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        v * DMatrix::from_diagonal(&self.eigenvalues) * v.transpose()
    }
}

const EIGEN_SWEEPS_PER_ORDER: usize = 1000;

pub fn sym_eigen(a: &SymMatrix) -> Result<EigenDecomposition> {
    let n = a.order();
    if n == 0 {
        return Err(Error::invalid("empty matrix has no eigenvalues"));
    }
    let max_iterations = EIGEN_SWEEPS_PER_ORDER * n;
    let eig = SymmetricEigen::try_new(a.inner.clone(), f64::EPSILON, max_iterations)
        .ok_or(Error::ConvergenceFailure { max_iterations })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Central-difference gradient. With `step = None` each coordinate uses
/// `h = 1e-5 * max(1, |x_i|)`.
pub fn fd_gradient<F>(mut f: F, x: &[f64], step: Option<f64>) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = step.unwrap_or_else(|| 1e-5 * x[i].abs().max(1.0));
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteEvaluation { coordinate: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest relative deviation between two gradient vectors, measured against
/// the larger of the two norms (with an absolute floor of `floor`).
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
