//! Dense row-major matrices over any [`Scalar`], sized for control work
//! (state dimension 12, horizon 10, KKT systems of a few hundred rows).
//! Shape mismatches panic; numerical failures return [`MathError`].

use super::{MathError, Scalar};

/// Pivots smaller than this are treated as singular during elimination.
const PIVOT_MIN: f64 = 1e-12;

/// Dense row-major matrix.
#[derive(Clone, Debug)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Build from nested row slices; rows must be equal length.
    pub fn from_rows(rows: &[&[S]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
        }
        Matrix {
            rows: r,
            cols: c,
            data: rows.iter().flat_map(|row| row.iter().cloned()).collect(),
        }
    }

    pub fn diagonal(diag: &[S]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = d.clone();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn transpose(&self) -> Self {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)].clone())
    }

    pub fn matmul(&self, rhs: &Matrix<S>) -> Matrix<S> {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out: Matrix<S> = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)].clone();
                for j in 0..rhs.cols {
                    out[(i, j)] = out[(i, j)].clone() + a.clone() * rhs[(k, j)].clone();
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| {
                let mut acc = S::zero();
                for j in 0..self.cols {
                    acc = acc + self[(i, j)].clone() * v[j].clone();
                }
                acc
            })
            .collect()
    }

    pub fn add(&self, rhs: &Matrix<S>) -> Matrix<S> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "add shape mismatch");
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            self[(i, j)].clone() + rhs[(i, j)].clone()
        })
    }

    pub fn sub(&self, rhs: &Matrix<S>) -> Matrix<S> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "sub shape mismatch");
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            self[(i, j)].clone() - rhs[(i, j)].clone()
        })
    }

    pub fn scale(&self, c: f64) -> Matrix<S> {
        Matrix::from_fn(self.rows, self.cols, |i, j| self[(i, j)].scale(c))
    }

    /// Add `c` to every diagonal entry (Levenberg-style regularization).
    pub fn add_diag(&self, c: f64) -> Matrix<S> {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m[(i, i)] = m[(i, i)].shift(c);
        }
        m
    }

    /// Largest absolute entry value.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.value().abs()).fold(0.0, f64::max)
    }

    /// Copy with every entry reduced to its plain value.
    pub fn values(&self) -> Matrix<f64> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.value()).collect(),
        }
    }
}

impl<S> std::ops::Index<(usize, usize)> for Matrix<S> {
    type Output = S;
    fn index(&self, (i, j): (usize, usize)) -> &S {
        debug_assert!(i < self.rows && j < self.cols, "index out of bounds");
        &self.data[i * self.cols + j]
    }
}

impl<S> std::ops::IndexMut<(usize, usize)> for Matrix<S> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        debug_assert!(i < self.rows && j < self.cols, "index out of bounds");
        &mut self.data[i * self.cols + j]
    }
}

/// Solve `A x = b` by LU factorization with partial pivoting.
///
/// Pivot rows are chosen by largest absolute value; an elimination column
/// whose best pivot falls below `1e-12` reports the matrix as singular at
/// that row. For tape-backed scalars the pivot choice compares values only,
/// so the recorded arithmetic stays differentiable.
pub fn solve_linear<S: Scalar>(a: &Matrix<S>, b: &[S]) -> Result<Vec<S>, MathError> {
    let rhs = Matrix::from_fn(b.len(), 1, |i, _| b[i].clone());
    let x = solve_linear_mat(a, &rhs)?;
    Ok((0..b.len()).map(|i| x[(i, 0)].clone()).collect())
}

/// Multi-right-hand-side variant of [`solve_linear`]: solves `A X = B`.
pub fn solve_linear_mat<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<Matrix<S>, MathError> {
    let n = a.rows();
    assert_eq!(a.cols(), n, "solve_linear needs a square matrix");
    assert_eq!(b.rows(), n, "right-hand side height mismatch");
    let m = b.cols();
    let mut lu = a.clone();
    let mut x = b.clone();

    for k in 0..n {
        // Partial pivoting on the numeric value of the column.
        let mut best = k;
        let mut best_abs = lu[(k, k)].value().abs();
        for r in (k + 1)..n {
            let cand = lu[(r, k)].value().abs();
            if cand > best_abs {
                best = r;
                best_abs = cand;
            }
        }
        if best_abs < PIVOT_MIN {
            return Err(MathError::Singular {
                row: k,
                pivot: best_abs,
            });
        }
        if best != k {
            for j in 0..n {
                lu.data.swap(k * n + j, best * n + j);
            }
            for j in 0..m {
                x.data.swap(k * m + j, best * m + j);
            }
        }
        let pivot_inv = lu[(k, k)].recip();
        for r in (k + 1)..n {
            if lu[(r, k)].value() == 0.0 {
                continue;
            }
            let factor = lu[(r, k)].clone() * pivot_inv.clone();
            for j in (k + 1)..n {
                lu[(r, j)] = lu[(r, j)].clone() - factor.clone() * lu[(k, j)].clone();
            }
            for j in 0..m {
                x[(r, j)] = x[(r, j)].clone() - factor.clone() * x[(k, j)].clone();
            }
        }
    }

    // Back substitution on the upper triangle.
    for k in (0..n).rev() {
        let pivot_inv = lu[(k, k)].recip();
        for j in 0..m {
            let mut acc = x[(k, j)].clone();
            for c in (k + 1)..n {
                acc = acc - lu[(k, c)].clone() * x[(c, j)].clone();
            }
            x[(k, j)] = acc * pivot_inv.clone();
        }
    }
    Ok(x)
}

/// Cholesky factor of a symmetric matrix, used as a positive
/// semidefiniteness check for cost weights. Diagonal entries may touch
/// zero within `tol` (semidefinite case); anything more negative fails.
pub fn cholesky(a: &Matrix<f64>, tol: f64) -> Result<Matrix<f64>, MathError> {
    let n = a.rows();
    assert_eq!(a.cols(), n, "cholesky needs a square matrix");
    let mut l = Matrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum < -tol {
                    return Err(MathError::NotPsd { row: i, value: sum });
                }
                l[(i, i)] = sum.max(0.0).sqrt();
            } else if l[(j, j)] > tol {
                l[(i, j)] = sum / l[(j, j)];
            } else {
                // Semidefinite pivot: column is only consistent if the
                // remaining entry vanishes too.
                if sum.abs() > tol {
                    return Err(MathError::NotPsd { row: i, value: sum });
                }
            }
        }
    }
    Ok(l)
}
