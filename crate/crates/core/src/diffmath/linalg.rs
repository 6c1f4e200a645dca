//! Dense LU factorization with partial pivoting.
//!
//! The factors are kept around so that both `A X = B` and the transposed
//! system `Aᵀ Y = G` (needed when back-propagating through a solve) can be
//! answered without refactoring.

use ndarray::Array2;

use super::MathError;

/// Pivots whose magnitude falls below this are treated as singular.
pub const PIVOT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LuFactors {
    /// Unit-lower `L` below the diagonal, `U` on and above it.
    lu: Array2<f64>,
    /// Row `i` of `PA` is row `perm[i]` of `A`.
    perm: Vec<usize>,
}

impl LuFactors {
    pub fn factor(a: &Array2<f64>) -> Result<Self, MathError> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(MathError::Shape {
                op: "linear_solve",
                detail: format!("expected a non-empty square matrix, got {}x{}", n, a.ncols()),
            });
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (mut p, mut best) = (k, lu[[k, k]].abs());
            for i in (k + 1)..n {
                let v = lu[[i, k]].abs();
                if v > best {
                    p = i;
                    best = v;
                }
            }
            if best.is_nan() || best < PIVOT_FLOOR {
                return Err(MathError::Singular { pivot: best, column: k });
            }
            if p != k {
                for j in 0..n {
                    lu.swap([k, j], [p, j]);
                }
                perm.swap(k, p);
            }
            let pivot = lu[[k, k]];
            for i in (k + 1)..n {
                let f = lu[[i, k]] / pivot;
                lu[[i, k]] = f;
                if f != 0.0 {
                    for j in (k + 1)..n {
                        lu[[i, j]] -= f * lu[[k, j]];
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &Array2<f64>) -> Array2<f64> {
        let n = self.dim();
        let m = b.ncols();
        let mut x = Array2::<f64>::zeros((n, m));
        for i in 0..n {
            x.row_mut(i).assign(&b.row(self.perm[i]));
        }
        // forward: L y = P b
        for i in 0..n {
            for k in 0..i {
                let f = self.lu[[i, k]];
                if f != 0.0 {
                    for j in 0..m {
                        x[[i, j]] -= f * x[[k, j]];
                    }
                }
            }
        }
        // backward: U x = y
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let f = self.lu[[i, k]];
                if f != 0.0 {
                    for j in 0..m {
                        x[[i, j]] -= f * x[[k, j]];
                    }
                }
            }
            let d = self.lu[[i, i]];
            for j in 0..m {
                x[[i, j]] /= d;
            }
        }
        x
    }

    /// Solves `Aᵀ Y = G`, using `Aᵀ = Uᵀ Lᵀ P`.
    pub fn solve_transposed(&self, g: &Array2<f64>) -> Array2<f64> {
        let n = self.dim();
        let m = g.ncols();
        let mut w = g.to_owned();
        // Uᵀ w = g (lower triangular)
        for i in 0..n {
            for k in 0..i {
                let f = self.lu[[k, i]];
                if f != 0.0 {
                    for j in 0..m {
                        w[[i, j]] -= f * w[[k, j]];
                    }
                }
            }
            let d = self.lu[[i, i]];
            for j in 0..m {
                w[[i, j]] /= d;
            }
        }
        // Lᵀ v = w (unit upper triangular)
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let f = self.lu[[k, i]];
                if f != 0.0 {
                    for j in 0..m {
                        w[[i, j]] -= f * w[[k, j]];
                    }
                }
            }
        }
        // y = Pᵀ v
        let mut y = Array2::<f64>::zeros((n, m));
        for i in 0..n {
            y.row_mut(self.perm[i]).assign(&w.row(i));
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn needs_pivoting() {
        let a = array![[0.0, 1.0], [2.0, 3.0]];
        let b = array![[1.0], [5.0]];
        let x = LuFactors::factor(&a).unwrap().solve(&b);
        assert!((x[[0, 0]] - 1.0).abs() < 1e-14);
        assert!((x[[1, 0]] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn transposed_solve_matches_explicit_transpose() {
        let a = array![[4.0, 1.0, 0.5], [0.3, 3.0, 1.0], [2.0, 0.1, 5.0]];
        let g = array![[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]];
        let via_t = LuFactors::factor(&a).unwrap().solve_transposed(&g);
        let direct = LuFactors::factor(&a.t().to_owned()).unwrap().solve(&g);
        for (p, q) in via_t.iter().zip(direct.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_is_reported() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(matches!(LuFactors::factor(&a), Err(MathError::Singular { .. })));
    }
}
