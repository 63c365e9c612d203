//! Central finite-difference oracle for tape gradients.

use crate::error::{Error, Result};
use crate::ndcore::matrix::Matrix;
use crate::ndcore::tape::{Tape, Var};
use crate::scalar::Scalar;

/// Max over coordinates of `|analytic − fd| / max(1, |analytic|)`, where `fd`
/// is the central difference of `value` at `theta` with step `eps`.
pub fn compare_gradient<T, F>(mut value: F, theta: &Matrix<T>, analytic: &Matrix<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: FnMut(&Matrix<T>) -> Result<T>,
{
    if eps <= T::zero() {
        return Err(Error::InvalidParameter("finite-difference step must be > 0".into()));
    }
    if analytic.shape() != theta.shape() {
        return Err(Error::ShapeMismatch {
            op: "compare_gradient",
            left: theta.shape(),
            right: analytic.shape(),
        });
    }
    let mut probe = theta.clone();
    let mut worst = T::zero();
    for k in 0..theta.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let plus = value(&probe)?;
        probe.data_mut()[k] = orig - eps;
        let minus = value(&probe)?;
        probe.data_mut()[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite_diff_check"));
        }
        let fd = (plus - minus) / (eps + eps);
        let a = analytic.data()[k];
        let err = (a - fd).abs() / a.abs().max(T::one());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Builds `f` on a fresh tape with `theta` as the only trainable leaf, takes
/// the analytic gradient by [`Tape::backward`], and compares it against
/// central differences.
pub fn finite_diff_check<T, F>(mut f: F, theta: &Matrix<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.param(theta.clone());
    let loss = f(&mut tape, leaf)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(theta.rows(), theta.cols()));
    compare_gradient(
        |th| {
            let mut t = Tape::new();
            let leaf = t.constant(th.clone());
            let out = f(&mut t, leaf)?;
            Ok(t.value(out).item())
        },
        theta,
        &analytic,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = finite_diff_check(
            |t, th| Ok(t.square(th)),
            &Matrix::scalar(3.0f64),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn corrupted_gradient_detected() {
        let theta = Matrix::row_vector(&[0.3f64, -0.7]);
        let analytic = theta.map(|v| 2.0 * v * 1.01);
        let err = compare_gradient(|th| Ok(th.data().iter().map(|v| v * v).sum()), &theta, &analytic, 1e-5)
            .unwrap();
        assert!(err > 1e-4);
    }

    #[test]
    fn nan_probe_is_an_error() {
        let err = compare_gradient(
            |_| Ok(f64::NAN),
            &Matrix::scalar(1.0),
            &Matrix::scalar(0.0),
            1e-5,
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn primitive_ops_match_finite_differences() {
        let theta = Matrix::from_rows(&[[0.3, -1.2, 0.8], [1.1, 0.4, -0.6]]).unwrap();
        let other = Matrix::from_rows(&[[0.5, 0.1], [-0.3, 0.9], [1.4, -0.2]]).unwrap();
        let checks: Vec<Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>> = vec![
            Box::new(|t, th| { let s = t.row_softmax(th)?; let w = t.square(s); Ok(t.sum(w)) }),
            Box::new(|t, th| { let s = t.row_log_softmax(th)?; let p = t.pick(s, &[2, 0])?; Ok(t.sum(p)) }),
            Box::new(move |t, th| { let o = t.constant(other.clone()); let m = t.matmul(th, o)?; let r = t.relu(m); let e = t.exp(r)?; Ok(t.mean(e)) }),
            Box::new(|t, th| { let n = t.row_l2_norm(th); let l = t.ln(n)?; Ok(t.sum(l)) }),
            Box::new(|t, th| { let g = t.gather_rows(th, &[1, 1, 0, 1])?; let s = t.group_sum_rows(g, 2)?; let q = t.square(s); Ok(t.sum(q)) }),
            Box::new(|t, th| { let tr = t.transpose(th); let m = t.matmul_t(tr, tr)?; let s = t.sum_cols(m); let q = t.square(s); Ok(t.sum(q)) }),
            Box::new(|t, th| { let a = t.slice_cols(th, 1, 3)?; let b = t.slice_cols(th, 0, 1)?; let d = t.safe_div(a, b)?; Ok(t.sum(d)) }),
            Box::new(|t, th| { let r = t.sum_rows(th); let sq = t.square(r); let s = t.sqrt(sq)?; let m = t.mul(th, s)?; Ok(t.sum(m)) }),
            Box::new(|t, th| { let r = t.reshape(th, 3, 2)?; let c = t.slice_cols(r, 0, 1)?; let time = [3.0, 1.0, 1.0]; let ev = [true, true, false]; t.cox_nll(c, &time, &ev) }),
        ];
        for (i, f) in checks.iter().enumerate() {
            let err = finite_diff_check(|t, th| f(t, th), &theta, 1e-5).unwrap();
            assert!(err <= 1e-6, "check {i}: {err}");
        }
    }
}
