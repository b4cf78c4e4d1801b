use ndarray::ArrayView1;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stats::{cov_pop, mean, var_pop};

/// `1 - sum (v - v_hat)^2 / sum (v - mean v)^2`.
pub fn r_squared<T: Scalar>(v: ArrayView1<'_, T>, v_hat: ArrayView1<'_, T>) -> Result<T> {
    if v.len() != v_hat.len() {
        return Err(Error::Schema(format!("r_squared: lengths {} and {}", v.len(), v_hat.len())));
    }
    if v.len() < 2 {
        return Err(Error::Numerical("r_squared needs at least two observations".into()));
    }
    let m = mean(v);
    let mut ssr = T::zero();
    let mut sst = T::zero();
    for (&a, &b) in v.iter().zip(v_hat.iter()) {
        ssr = ssr + (a - b) * (a - b);
        sst = sst + (a - m) * (a - m);
    }
    if !(sst > T::zero()) {
        return Err(Error::Numerical("r_squared: target has zero variance".into()));
    }
    Ok(T::one() - ssr / sst)
}

/// R^2 of a prediction relative to the oracle R^2 on the same rows.
///
/// Not clamped: finite-sample values slightly above one are legitimate.
pub fn relative_r2<T: Scalar>(v: ArrayView1<'_, T>, v_hat: ArrayView1<'_, T>, oracle_r2: T) -> Result<T> {
    if !(oracle_r2 > T::zero()) {
        return Err(Error::Numerical(format!("relative r2: oracle R^2 {oracle_r2} is not positive")));
    }
    Ok(r_squared(v, v_hat)? / oracle_r2)
}

/// Slope of the least-squares fit of `y` on `d` with an intercept.
pub fn ols_baseline<T: Scalar>(y: ArrayView1<'_, T>, d: ArrayView1<'_, T>) -> Result<T> {
    if y.len() != d.len() || y.len() < 2 {
        return Err(Error::Schema("ols_baseline: need equal lengths of at least 2".into()));
    }
    let vd = var_pop(d);
    if !(vd > T::zero()) {
        return Err(Error::Numerical("ols_baseline: treatment has zero variance".into()));
    }
    Ok(cov_pop(y, d) / vd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    #[test]
    fn r_squared_examples() {
        let v = array![0.0, 1.0, 2.0];
        assert_eq!(r_squared(v.view(), v.view()).unwrap(), 1.0);
        assert_eq!(r_squared(v.view(), array![1.0, 1.0, 1.0].view()).unwrap(), 0.0);
        assert_eq!(r_squared(v.view(), array![0.0, 0.0, 0.0].view()).unwrap(), -1.5);
        assert!(r_squared(array![2.0, 2.0].view(), array![1.0, 2.0].view()).is_err());
    }

    #[test]
    fn relative_r2_of_oracle_is_one() {
        let v = array![0.3, -1.0, 2.0, 0.7];
        let o = array![0.1, -0.8, 1.5, 0.9];
        let bound = r_squared(v.view(), o.view()).unwrap();
        assert_eq!(relative_r2(v.view(), o.view(), bound).unwrap(), 1.0);
        assert!(relative_r2(v.view(), o.view(), 0.0).is_err());
    }

    #[test]
    fn ols_examples() {
        let d: Array1<f64> = array![1.0, 2.0, -1.0, 0.5];
        assert!((ols_baseline((&d * 2.0).view(), d.view()).unwrap() - 2.0).abs() < 1e-15);
        assert!(ols_baseline(d.view(), array![1.0, 1.0, 1.0, 1.0].view()).is_err());
        let y = array![1.0, -1.0, 1.0, -1.0];
        let d = array![1.0, 1.0, -1.0, -1.0];
        assert_eq!(ols_baseline(y.view(), d.view()).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn r_squared_is_affine_invariant(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
            scale in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
            shift in -10.0f64..10.0,
        ) {
            let v: Array1<f64> = pairs.iter().map(|p| p.0).collect();
            let vh: Array1<f64> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(var_pop(v.view()) > 1e-3);
            let base = r_squared(v.view(), vh.view()).unwrap();
            let t = |a: &Array1<f64>| a.mapv(|x| scale * x + shift);
            let moved = r_squared(t(&v).view(), t(&vh).view()).unwrap();
            prop_assert!((base - moved).abs() <= 1e-9 * base.abs().max(1.0));
            prop_assert!(base <= 1.0);
        }
    }
}
