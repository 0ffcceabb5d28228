use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Numerically stable softmax along `axis`.
///
/// ```
/// use sevex::numerics::{softmax, Tensor};
/// let p = softmax(&Tensor::vector(vec![0.0, 3f64.ln()]), 0).unwrap();
/// assert!((p.data()[1] - 0.75).abs() < 1e-12);
/// ```
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if shape.is_empty() {
        x.ensure_finite("softmax input")?;
        return Ok(Tensor::scalar(1.0));
    }
    if axis >= shape.len() {
        return Err(Error::contract(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    x.ensure_finite("softmax input")?;
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for k in 0..len {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                denom += e;
            }
            for k in 0..len {
                out[at(k)] /= denom;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Mean over elements of `0.5·x²/δ` for `|x| < δ`, else `|x| − 0.5·δ`,
/// with `x = pred − target`.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, delta: f64) -> Result<f64> {
    if pred.shape() != target.shape() && pred.len() != target.len() {
        return Err(Error::contract(format!(
            "smooth_l1: shapes {:?} and {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::contract(format!("smooth_l1: delta must be > 0, got {delta}")));
    }
    if pred.is_empty() {
        return Err(Error::contract("smooth_l1 of empty tensors"));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let x = p - t;
            if x.abs() < delta {
                0.5 * x * x / delta
            } else {
                x.abs() - 0.5 * delta
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

pub(crate) fn smooth_l1_derivative(x: f64, delta: f64) -> f64 {
    if x.abs() < delta {
        x / delta
    } else {
        x.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&Tensor::vector(vec![0.0; 4]), 0).unwrap();
        assert_eq!(p.data(), &[0.25; 4]);
        let p = softmax(&Tensor::vector(vec![-17.0]), 0).unwrap();
        assert_eq!(p.data(), &[1.0]);
        // exp(ln 1) = 1, exp(ln 3) = 3, normalized by 4
        let p = softmax(&Tensor::vector(vec![0.0, 3f64.ln()]), 0).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let r = softmax(&Tensor::vector(vec![0.0, f64::NAN]), 0);
        assert!(matches!(r, Err(Error::NumericDomain(_))));
        assert!(softmax(&Tensor::vector(vec![0.0]), 1).is_err());
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = Tensor::matrix(2, 2, vec![0.0, 5.0, 0.0, 5.0]).unwrap();
        let p = softmax(&x, 0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn smooth_l1_examples() {
        let z = Tensor::vector(vec![1.0, -2.0]);
        assert_eq!(smooth_l1(&z, &z, 1.0).unwrap(), 0.0);
        let zero = Tensor::vector(vec![0.0]);
        assert_eq!(smooth_l1(&Tensor::vector(vec![0.5]), &zero, 1.0).unwrap(), 0.125);
        assert_eq!(smooth_l1(&Tensor::vector(vec![2.0]), &zero, 1.0).unwrap(), 1.5);
        assert!(smooth_l1(&Tensor::vector(vec![1.0, 2.0]), &zero, 1.0).is_err());
    }

    #[test]
    fn smooth_l1_derivative_is_continuous_at_delta() {
        for delta in [0.5, 1.0, 2.0] {
            let left = smooth_l1_derivative(delta - 1e-12, delta);
            let right = smooth_l1_derivative(delta, delta);
            assert!((left - right).abs() < 1e-9);
            assert_eq!(right, 1.0);
        }
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            xs in prop::collection::vec(-30.0f64..30.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let p = softmax(&Tensor::vector(xs.clone()), 0).unwrap();
            let s: f64 = p.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.data().iter().all(|v| *v > 0.0 && *v <= 1.0));
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let q = softmax(&Tensor::vector(shifted), 0).unwrap();
            prop_assert!(p.max_abs_diff(&q) < 1e-9);
        }

        #[test]
        fn smooth_l1_non_negative(
            a in prop::collection::vec(-5.0f64..5.0, 1..8),
            delta in 0.1f64..3.0,
        ) {
            let b: Vec<f64> = a.iter().map(|x| x * 0.5 - 0.3).collect();
            let l = smooth_l1(&Tensor::vector(a.clone()), &Tensor::vector(b), delta).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(smooth_l1(&Tensor::vector(a.clone()), &Tensor::vector(a), delta).unwrap(), 0.0);
        }
    }
}
