//! Ridge regression with an unpenalized intercept.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel<T: Scalar = f64> {
    pub coef: Array1<T>,
    pub intercept: T,
}

impl<T: Scalar> RidgeModel<T> {
    /// Minimizes `|y - b0 - X b|^2 + penalty |b|^2`.
    pub fn fit(x: ArrayView2<'_, T>, y: ArrayView1<'_, T>, penalty: T) -> Result<Self> {
        if x.nrows() != y.len() || x.nrows() == 0 {
            return Err(Error::Schema(format!("ridge: {} feature rows vs {} targets", x.nrows(), y.len())));
        }
        if penalty < T::zero() {
            return Err(Error::Config("ridge penalty must be nonnegative".into()));
        }
        let x_mean = x.mean_axis(Axis(0)).expect("nonempty");
        let y_mean = y.sum() / T::from_usize_lossy(y.len());
        let xc = &x - &x_mean;
        let yc = y.mapv(|v| v - y_mean);
        let mut gram = xc.t().dot(&xc);
        for i in 0..gram.nrows() {
            gram[[i, i]] = gram[[i, i]] + penalty;
        }
        let rhs = xc.t().dot(&yc);
        let coef = cholesky_solve(gram, rhs)?;
        let intercept = y_mean - x_mean.dot(&coef);
        Ok(Self { coef, intercept })
    }

    pub fn predict(&self, x: ArrayView2<'_, T>) -> Array1<T> {
        x.dot(&self.coef).mapv(|v| v + self.intercept)
    }
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub(crate) fn cholesky_solve<T: Scalar>(mut a: Array2<T>, b: Array1<T>) -> Result<Array1<T>> {
    let n = a.nrows();
    // In-place lower factor.
    for j in 0..n {
        let original = a[[j, j]];
        let mut diag = original;
        for k in 0..j {
            diag = diag - a[[j, k]] * a[[j, k]];
        }
        // A pivot at rounding level relative to its starting value means a singular system.
        let floor = original * T::epsilon() * T::from_usize_lossy(4 * n);
        if !(diag > floor) || !(diag > T::zero()) {
            return Err(Error::Numerical("ridge system is not positive definite; add a penalty".into()));
        }
        let l_jj = diag.sqrt();
        a[[j, j]] = l_jj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s = s - a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = s / l_jj;
        }
    }
    let mut z = b;
    for i in 0..n {
        let mut s = z[i];
        for k in 0..i {
            s = s - a[[i, k]] * z[k];
        }
        z[i] = s / a[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s = s - a[[k, i]] * z[k];
        }
        z[i] = s / a[[i, i]];
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn zero_penalty_is_least_squares() {
        let x = array![[1.0, 0.5], [2.0, -1.0], [0.0, 3.0], [1.5, 1.5], [-1.0, 0.0]];
        let y = array![1.0, 2.0, -0.5, 0.7, 3.0];
        let fit = RidgeModel::fit(x.view(), y.view(), 0.0).unwrap();
        // Normal equations on [1, X].
        let mut design = Array2::<f64>::ones((5, 3));
        design.slice_mut(ndarray::s![.., 1..]).assign(&x);
        let beta = cholesky_solve(design.t().dot(&design), design.t().dot(&y)).unwrap();
        let expected = design.dot(&beta);
        let got = fit.predict(x.view());
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn predictions_scale_with_outcome() {
        let x = array![[1.0, 0.5], [2.0, -1.0], [0.0, 3.0], [1.5, 1.5]];
        let y: Array1<f64> = array![1.0, 2.0, -0.5, 0.7];
        let base = RidgeModel::fit(x.view(), y.view(), 0.3).unwrap().predict(x.view());
        let scaled = RidgeModel::fit(x.view(), (&y * 4.0).view(), 0.3).unwrap().predict(x.view());
        for (a, b) in base.iter().zip(scaled.iter()) {
            assert!((4.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_design_without_penalty_fails() {
        let x = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let y = array![1.0, 2.0, 3.0];
        assert!(RidgeModel::fit(x.view(), y.view(), 0.0).is_err());
        assert!(RidgeModel::fit(x.view(), y.view(), 1e-3).is_ok());
        assert!(RidgeModel::fit(x.view(), y.view(), -1.0).is_err());
    }
}
