use super::{no_grad, Real, Tensor};
use crate::error::{Error, Result};

/// Outcome of comparing autodiff gradients against central differences.
///
/// The numeric derivative is the five-point central stencil at the given
/// step, accurate to `O(step⁴)`, so elements whose gradient happens to be
/// tiny are not swamped by the `O(step²)` error of the three-point rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// (input index, element index) where the maximum occurred.
    pub worst: (usize, usize),
    pub elements: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        let worst = if other.max_rel_error > self.max_rel_error { other } else { self };
        GradCheck {
            elements: self.elements + other.elements,
            ..worst
        }
    }
}

const DENOM_FLOOR: f64 = 1e-8;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Max relative error between the autodiff gradient of scalar `f` at `x` and
/// its central-difference estimate with the given `step`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let report = GradCheck::run(|xs| f(&xs[0]), std::slice::from_ref(x), step)?;
    Ok(report.max_rel_error)
}

impl GradCheck {
    /// Checks the gradient of scalar `f` with respect to every element of
    /// every tensor in `inputs`. The inputs are re-created as trainable leaves,
    /// so constants can be passed in.
    pub fn run<T, F>(f: F, inputs: &[Tensor<T>], step: f64) -> Result<GradCheck>
    where
        T: Real,
        F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
    {
        if !(step > 0.0) {
            return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
        }
        let leaves: Vec<Tensor<T>> = inputs.iter().map(|t| t.with_requires_grad(true)).collect();
        let loss = f(&leaves)?;
        loss.backward()?;
        let analytic: Vec<Vec<T>> = leaves
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| vec![T::zero(); l.len()]))
            .collect();

        let mut out = GradCheck {
            max_rel_error: 0.0,
            worst: (0, 0),
            elements: 0,
        };
        let h = T::of(step);
        let mut probe: Vec<Tensor<T>> = leaves.iter().map(Tensor::detach).collect();
        for (ti, base) in leaves.iter().enumerate() {
            for ei in 0..base.len() {
                let x0 = base.data()[ei];
                let mut eval = |v: T| -> Result<f64> {
                    let mut data = base.data().to_vec();
                    data[ei] = v;
                    probe[ti] = Tensor::new(base.shape(), data)?;
                    let y = no_grad(|| f(&probe))?;
                    Ok(y.item().to_f64().unwrap_or(f64::NAN))
                };
                // Central differences at h and 2h, each divided by the
                // representable span actually taken, combined to cancel the
                // h² truncation term (the five-point stencil).
                let mut central = |h: T| -> Result<f64> {
                    let (xp, xm) = (x0 + h, x0 - h);
                    let span = (xp - xm).to_f64().unwrap_or(f64::NAN);
                    Ok((eval(xp)? - eval(xm)?) / span)
                };
                let d1 = central(h)?;
                let d2 = central(h + h)?;
                probe[ti] = base.detach();
                let numeric = (4.0 * d1 - d2) / 3.0;
                let a = analytic[ti][ei].to_f64().unwrap_or(f64::NAN);
                let err = rel_error(a, numeric);
                if err > out.max_rel_error || err.is_nan() {
                    out.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                    out.worst = (ti, ei);
                }
                out.elements += 1;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_unit_gradient() {
        let x = Tensor::<f64>::new(&[5], vec![0.3, -0.2, 0.9, 0.0, -0.7]).unwrap();
        let err = finite_diff_check(|x| Ok(x.sum()), &x, 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sum_of_squares_agrees_at_two_steps() {
        let x = Tensor::<f64>::new(&[4], vec![0.5, -0.25, 0.75, -1.0]).unwrap();
        let f = |x: &Tensor<f64>| Ok(x.mul(x)?.sum());
        let e1 = finite_diff_check(f, &x, 1e-3).unwrap();
        let e2 = finite_diff_check(f, &x, 1e-4).unwrap();
        assert!(e1 < 1e-3 && e2 < 1e-3, "{e1} {e2}");
    }

    #[test]
    fn softmax_pick_first() {
        let x = Tensor::<f64>::new(&[4], vec![0.1, -0.6, 0.4, 0.8]).unwrap();
        let err = finite_diff_check(|x| x.softmax(0)?.slice(0, 0, 1), &x, 1e-3).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn wrong_derivative_is_caught() {
        let x = Tensor::<f64>::new(&[3], vec![0.2, -0.5, 0.9]).unwrap();
        let bad = |x: &Tensor<f64>| Ok(x.map_unary("bad_square", |v| v * v, |v| -2.0 * v).sum());
        assert!(finite_diff_check(bad, &x, 1e-3).unwrap() > 0.5);
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let x = Tensor::<f64>::new(&[1], vec![1.0]).unwrap();
        assert!(finite_diff_check(|x| Ok(x.sum()), &x, 0.0).is_err());
    }
}
