//! Central finite-difference verification of analytic gradients.

use crate::autograd::Var;
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor in the relative error, above the f64 roundoff of a
/// central difference on an O(1) loss.
pub const REL_FLOOR: f64 = 1e-6;

/// Max over components of `|g_analytic - g_fd| / (|g_fd| + REL_FLOOR)` for a
/// scalar function of one tensor.
pub fn finite_diff_check(f: impl Fn(&Var<f64>) -> Result<Var<f64>>, x: &Tensor<f64>, h: f64) -> Result<f64> {
    finite_diff_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), h, None)
}

/// As [`finite_diff_check`] over several inputs. With `max_coords`, only an
/// evenly strided subset of at most that many coordinates per input is
/// perturbed (the analytic side is always computed in full).
pub fn finite_diff_check_many(
    f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>,
    xs: &[Tensor<f64>],
    h: f64,
    max_coords: Option<usize>,
) -> Result<f64> {
    let leaves: Vec<Var<f64>> = xs.iter().map(|x| Var::leaf(x.clone(), true)).collect();
    let loss = f(&leaves)?;
    let analytic: Vec<Tensor<f64>> = if loss.requires_grad() {
        loss.backward()?;
        leaves
            .iter()
            .zip(xs)
            .map(|(l, x)| l.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    } else {
        xs.iter().map(|x| Tensor::zeros(x.shape())).collect()
    };

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let vars: Vec<Var<f64>> = inputs.iter().map(|x| Var::constant(x.clone())).collect();
        Ok(f(&vars)?.value().item())
    };

    let mut worst = 0.0f64;
    let mut inputs: Vec<Tensor<f64>> = xs.to_vec();
    for (i, x) in xs.iter().enumerate() {
        let n = x.numel();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = x.data()[j];
            inputs[i].data_mut()[j] = orig + h;
            let up = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig - h;
            let down = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (analytic[i].data()[j] - fd).abs() / (fd.abs() + REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_sum_of_squares() {
        let x = Tensor::from_f64(&[4], &[0.5, -1.0, 2.0, 3.0]).unwrap();
        let e = finite_diff_check(|v| v.sum_sq()?.scale(0.5), &x, 1e-5).unwrap();
        assert!(e < 1e-7, "{e}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let e = finite_diff_check(
            |v| v.scale(0.0)?.sum()?.add(&Var::constant(Tensor::scalar(7.0))),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn cubic() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let e = finite_diff_check(|v| v.mul(v)?.mul(v)?.sum(), &x, 1e-5).unwrap();
        assert!(e < 1e-6, "{e}");
    }
}
