//! Central finite-difference verification of analytic gradients.

use super::{Graph, ParamSet, Real, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |analytic − numeric| / (|analytic| + |numeric| + 1e-12)
    pub max_rel_error: f64,
    /// Parameter name, flat index, analytic and numeric values at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    /// max over entries of |analytic − numeric|
    pub max_abs_error: f64,
    pub entries_checked: usize,
}

fn evaluate<T: Real, F>(params: &ParamSet<T>, loss: &F) -> Result<f64, TensorError>
where
    F: for<'g> Fn(&mut Graph<'g, T>) -> Result<Var, TensorError>,
{
    let mut g = Graph::new(params);
    let l = loss(&mut g)?;
    Ok(g.scalar_value(l).as_f64())
}

/// Compares the backward pass of `loss` against central differences with step
/// `h` over every entry of every parameter. `loss` must be deterministic.
pub fn grad_check<T: Real, F>(
    params: &mut ParamSet<T>,
    h: f64,
    loss: F,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'g> Fn(&mut Graph<'g, T>) -> Result<Var, TensorError>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        g.backward(l)?;
        g.into_param_grads()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        max_abs_error: 0.0,
        entries_checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let dense = analytic.dense(id, params);
        for k in 0..dense.len() {
            let orig = params.get(id).data()[k];
            let step = T::lit(h);
            params.get_mut(id).data_mut()[k] = orig + step;
            let plus = evaluate(params, &loss);
            params.get_mut(id).data_mut()[k] = orig - step;
            let minus = evaluate(params, &loss);
            params.get_mut(id).data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFiniteProbe {
                    name: params.name(id).to_string(),
                    index: k,
                });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = dense[k].as_f64();
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), k, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut ps = ParamSet::<f64>::new();
        let x = ps.insert("x", Tensor::scalar(3.0));
        let r = grad_check(&mut ps, 1e-5, |g| {
            let v = g.param(x);
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.entries_checked, 1);
    }

    #[test]
    fn tanh_at_zero_has_unit_slope() {
        let mut ps = ParamSet::<f64>::new();
        let x = ps.insert("x", Tensor::zeros(vec![1, 4]));
        let r = grad_check(&mut ps, 1e-5, |g| {
            let v = g.param(x);
            let t = g.tanh(v);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let (_, _, analytic, _) = r.worst.unwrap();
        assert_eq!(analytic, 1.0);
    }

    #[test]
    fn non_finite_probe_names_parameter() {
        let mut ps = ParamSet::<f64>::new();
        let x = ps.insert("x", Tensor::scalar(0.0));
        let err = grad_check(&mut ps, 1e-5, |g| {
            let v = g.param(x);
            let l = g.log(v);
            Ok(g.sum(l))
        })
        .unwrap_err();
        assert_eq!(
            err,
            TensorError::NonFiniteProbe {
                name: "x".into(),
                index: 0
            }
        );
    }
}
