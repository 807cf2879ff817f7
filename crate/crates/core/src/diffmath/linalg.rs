use ndarray::{Array1, Array2, ArrayView2};

use super::Tensor;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-12;

fn check_symmetric(a: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::contract(format!("{what}: matrix is {}x{}", n, a.ncols())));
    }
    let scale = a.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (a[[i, j]] - a[[j, i]]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::contract(format!("{what}: matrix is not symmetric")));
            }
        }
    }
    Ok(())
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub(crate) fn cholesky(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_symmetric(a, "cholesky")?;
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > PIVOT_TOL * a[[j, j]].abs()) || !diag.is_finite() {
            return Err(Error::Singular(format!(
                "matrix is not positive definite (pivot {j} = {diag:e})"
            )));
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` given the lower factor `L`.
pub(crate) fn cholesky_solve(l: &Array2<f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

/// Solves `A X = B` for symmetric positive definite `A` (`K x K`) and `B` (`K x N`).
pub fn symmetric_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let a2 = as_matrix(a, "symmetric_solve A")?;
    let b2 = as_matrix(b, "symmetric_solve B")?;
    if b2.nrows() != a2.nrows() {
        return Err(Error::contract(format!(
            "symmetric_solve: A is {:?}, B is {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let l = cholesky(a2)?;
    Ok(Tensor::from_array_unchecked(cholesky_solve(&l, b2).into_dyn()))
}

fn as_matrix<'a>(t: &'a Tensor, what: &str) -> Result<ArrayView2<'a, f64>> {
    t.array()
        .view()
        .into_dimensionality()
        .map_err(|_| Error::contract(format!("{what}: expected a matrix, got {:?}", t.shape())))
}

/// Top eigenpairs of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct EigenPairs {
    /// Eigenvalues in descending order.
    pub values: Array1<f64>,
    /// Unit eigenvectors as columns (`N x K`), largest-magnitude entry positive.
    pub vectors: Array2<f64>,
}

/// Eigendecomposition of a symmetric matrix, keeping the `top_k` largest eigenvalues.
pub fn symmetric_eigendecomposition(s: ArrayView2<'_, f64>, top_k: usize) -> Result<EigenPairs> {
    check_symmetric(s, "symmetric_eigendecomposition")?;
    let n = s.nrows();
    if top_k == 0 || top_k > n {
        return Err(Error::contract(format!(
            "top_k must be in 1..={n}, got {top_k}"
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigendecomposition input".into()));
    }
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (s[[i, j]] + s[[j, i]]));
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut values = Array1::zeros(top_k);
    let mut vectors = Array2::zeros((n, top_k));
    for (c, &idx) in order.iter().take(top_k).enumerate() {
        values[c] = eig.eigenvalues[idx];
        let col = eig.eigenvectors.column(idx);
        let pivot = (0..n)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()))
            .expect("n >= 1");
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        let norm = col.norm();
        for r in 0..n {
            vectors[[r, c]] = sign * col[r] / norm;
        }
    }
    Ok(EigenPairs { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_solve_returns_rhs() {
        let a = Tensor::from_array(Array2::<f64>::eye(3)).unwrap();
        let b = Tensor::from_array(array![[1.0, -2.0], [0.5, 3.0], [4.0, 0.0]]).unwrap();
        let x = symmetric_solve(&a, &b).unwrap();
        assert!(x.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn diagonal_solve() {
        let a = Tensor::from_array(array![[2.0, 0.0], [0.0, 4.0]]).unwrap();
        let b = Tensor::from_array(array![[2.0], [8.0]]).unwrap();
        let x = symmetric_solve(&a, &b).unwrap();
        assert!((x.values()[0] - 1.0).abs() < 1e-14);
        assert!((x.values()[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn indefinite_matrix_is_singular() {
        let a = Tensor::from_array(array![[1.0, 2.0], [2.0, 1.0]]).unwrap();
        let b = Tensor::from_array(array![[1.0], [1.0]]).unwrap();
        assert!(matches!(symmetric_solve(&a, &b), Err(Error::Singular(_))));
    }

    #[test]
    fn diagonal_eigen() {
        let s = array![[3.0, 0.0], [0.0, 1.0]];
        let e = symmetric_eigendecomposition(s.view(), 2).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12 && (e.values[1] - 1.0).abs() < 1e-12);
        assert!((e.vectors[[0, 0]] - 1.0).abs() < 1e-12 && e.vectors[[1, 0]].abs() < 1e-12);
        assert!((e.vectors[[1, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_eigen() {
        let s = array![[2.0, 1.0], [1.0, 2.0]];
        let e = symmetric_eigendecomposition(s.view(), 1).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.vectors[[0, 0]] - r).abs() < 1e-12);
        assert!((e.vectors[[1, 0]] - r).abs() < 1e-12);
    }

    #[test]
    fn non_symmetric_rejected() {
        let s = array![[1.0, 2.0], [0.0, 1.0]];
        assert!(matches!(
            symmetric_eigendecomposition(s.view(), 1),
            Err(Error::Contract(_))
        ));
    }
}
