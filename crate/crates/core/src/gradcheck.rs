//! Central-difference gradient checking.

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// One-sided finite differences for a coordinate sitting on a kink
/// candidate, where the central difference is not meaningful.
#[derive(Clone, Debug)]
pub struct BoundaryCheck {
    pub index: usize,
    pub analytic: f64,
    pub left: f64,
    pub right: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over non-boundary coordinates of
    /// `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub boundary: Vec<BoundaryCheck>,
}

fn eval<F>(f: &F, x: &Tensor, requires_grad: bool) -> Result<(f64, Option<Vec<f64>>)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), requires_grad);
    let y = f(&mut g, xv)?;
    let out = g.value(y);
    if out.len() != 1 {
        return Err(invalid(format!("grad_check needs a scalar function, got {:?}", out.shape())));
    }
    let value = out.item();
    if !value.is_finite() {
        return Err(Error::NonFinite("function value during grad_check".into()));
    }
    if !requires_grad {
        return Ok((value, None));
    }
    let grads = g.backward(y)?;
    Ok((value, Some(grads.get_or_zeros(xv, x.len()))))
}

/// Maximum relative error between the analytic gradient of `f` at `x` and
/// central differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    Ok(grad_check_report(f, x, h, &[])?.max_rel_error)
}

/// Like [`grad_check`], but coordinates listed in `boundary` get one-sided
/// differences reported separately instead of entering the maximum.
pub fn grad_check_report<F>(f: F, x: &Tensor, h: f64, boundary: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(invalid("grad_check step must be positive"));
    }
    let (f0, analytic) = eval(&f, x, true)?;
    let analytic = analytic.unwrap_or_default();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        boundary: Vec::new(),
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, _) = eval(&f, &probe, false)?;
        probe.data_mut()[i] = orig - h;
        let (fm, _) = eval(&f, &probe, false)?;
        probe.data_mut()[i] = orig;
        let a = analytic[i];
        if boundary.contains(&i) {
            report.boundary.push(BoundaryCheck {
                index: i,
                analytic: a,
                left: (f0 - fm) / h,
                right: (fp - f0) / h,
            });
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5, 7.0]);
        let err = grad_check(|g, x| Ok(g.sum_squares(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn smooth_l1_kink_is_reported_one_sided() {
        // d = x - 0 with |d| = beta on coordinate 0
        let beta = 2.0;
        let x = Tensor::from_vec(vec![2.0, 0.5, -3.0]);
        let target = Tensor::zeros(&[3]);
        let rep = grad_check_report(
            |g, x| g.smooth_l1(x, &target, beta),
            &x,
            1e-6,
            &[0],
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6);
        let b = &rep.boundary[0];
        // derivative is continuous: both one-sided slopes match d/beta = 1 (over 3 elements)
        assert!((b.analytic - 1.0 / 3.0).abs() < 1e-12);
        assert!((b.left - b.analytic).abs() < 1e-5);
        assert!((b.right - b.analytic).abs() < 1e-5);
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(grad_check(|_, x| Ok(x), &x, 1e-5).is_err());
    }
}
