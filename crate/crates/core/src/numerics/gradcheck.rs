use super::ParamSet;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Checks every coordinate of `params`.
///
/// `f` must zero nothing itself: it evaluates the loss at the current values
/// and accumulates its gradient into the (pre-zeroed) gradient buffers.
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn grad_check<F>(params: &mut ParamSet, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamSet) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Domain(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    params.zero_grad();
    let base = f(params);
    if !base.is_finite() {
        return Err(Error::GradCheck(format!("loss is not finite: {base}")));
    }
    let ids: Vec<_> = params.ids().collect();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| params.grad(id).to_vec()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (k, &id) in ids.iter().enumerate() {
        for j in 0..analytic[k].len() {
            let orig = params.value(id)[j];
            params.value_mut(id)[j] = orig + eps;
            params.zero_grad();
            let plus = f(params);
            params.value_mut(id)[j] = orig - eps;
            params.zero_grad();
            let minus = f(params);
            params.value_mut(id)[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::GradCheck(format!(
                    "loss not finite when perturbing {}[{j}]",
                    params.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), j));
            }
        }
    }
    // Leave the analytic gradient in place for callers that inspect it.
    params.zero_grad();
    f(params);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut params = ParamSet::new(2);
        let id = params.add_uniform("x", &[6], 1);
        let report = grad_check(&mut params, 1e-5, |p| {
            let x = p.value(id).to_vec();
            p.grad_mut(id).iter_mut().zip(&x).for_each(|(g, v)| *g += 2.0 * v);
            x.iter().map(|v| v * v).sum()
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.coordinates, 6);
    }

    #[test]
    fn constant_has_zero_gradients() {
        let mut params = ParamSet::new(2);
        let id = params.add_uniform("x", &[4], 1);
        let report = grad_check(&mut params, 1e-5, |_| 3.0).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(params.grad(id).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let mut params = ParamSet::new(2);
        let id = params.add_uniform("x", &[3], 1);
        let report = grad_check(&mut params, 1e-5, |p| {
            let x = p.value(id).to_vec();
            p.grad_mut(id).iter_mut().for_each(|g| *g += 1.0);
            x.iter().map(|v| 3.0 * v).sum()
        })
        .unwrap();
        assert!(report.max_rel_error > 0.5);
    }

    #[test]
    fn non_finite_loss_is_diagnosed() {
        let mut params = ParamSet::new(2);
        let id = params.add_tensor("x", crate::numerics::Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let err = grad_check(&mut params, 1e-5, |p| {
            let x = p.value(id)[0];
            if x < 0.0 {
                f64::NAN
            } else {
                x
            }
        });
        assert!(matches!(err, Err(Error::GradCheck(_))));
    }

    #[test]
    fn eps_range_is_enforced() {
        let mut params = ParamSet::new(2);
        assert!(grad_check(&mut params, 1e-2, |_| 0.0).is_err());
    }
}
