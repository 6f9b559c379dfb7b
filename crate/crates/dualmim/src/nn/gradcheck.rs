//! Central finite-difference gradient verification.
//!
//! Loss functions are checked against `(f(θ+ε) − f(θ−ε)) / 2ε` for every
//! scalar parameter, with relative error
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
//! The loss runs at the parameter scalar type (f64 for tight bounds, f32 to
//! validate the training precision); error bookkeeping is always f64.

use super::params::ParamSet;
use super::tensor::Scalar;
use super::NnError;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter name, flat element index) of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients against central differences over every
/// scalar in `params`.
///
/// `loss` evaluates the loss only; `loss_with_grad` evaluates it once and
/// returns gradients for all parameters. Both must be pure functions of the
/// parameter values.
pub fn grad_check<T: Scalar>(
    params: &ParamSet<T>,
    eps: f64,
    loss: impl Fn(&ParamSet<T>) -> Result<T, NnError>,
    loss_with_grad: impl Fn(&ParamSet<T>) -> Result<(T, ParamSet<T>), NnError>,
) -> Result<GradCheckReport, NnError> {
    if eps <= 0.0 {
        return Err(NnError::Config(format!("grad_check eps {eps} must be > 0")));
    }
    let (base, grads) = loss_with_grad(params)?;
    if !base.to_f64().is_finite() {
        return Err(NnError::NonFinite("loss at base point".to_string()));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let len = params.get(name)?.len();
        let analytic = grads.get(name)?.clone();
        for i in 0..len {
            let orig = params.get(name)?.data()[i].to_f64();

            let mut perturbed = params.clone();
            perturbed.get_mut(name)?.data_mut()[i] = T::from_f64(orig + eps);
            let up = loss(&perturbed)?.to_f64();
            perturbed.get_mut(name)?.data_mut()[i] = T::from_f64(orig - eps);
            let down = loss(&perturbed)?.to_f64();
            if !up.is_finite() || !down.is_finite() {
                return Err(NnError::NonFinite(format!(
                    "loss under perturbation of {name:?}[{i}]"
                )));
            }

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i].to_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn quadratic_gradient_matches_to_machine_precision() {
        // f(w) = Σ w², df/dw = 2w: finite differences of a quadratic are
        // exact up to rounding, so the relative error is ~1e-11 or better.
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.insert(
            "w",
            Tensor::from_vec(&[3], vec![1.5, -2.0, 0.25]).unwrap(),
        )
        .unwrap();
        let f = |p: &ParamSet<f64>| -> Result<f64, NnError> {
            Ok(p.get("w")?.data().iter().map(|v| v * v).sum())
        };
        let fg = |p: &ParamSet<f64>| -> Result<(f64, ParamSet<f64>), NnError> {
            let mut g = p.zeros_like();
            for (o, &w) in g
                .get_mut("w")?
                .data_mut()
                .iter_mut()
                .zip(p.get("w")?.data())
            {
                *o = 2.0 * w;
            }
            Ok((f(p)?, g))
        };
        let report = grad_check(&ps, 1e-5, f, fg).unwrap();
        assert_eq!(report.checked, 3);
        assert!(
            report.max_rel_err < 1e-9,
            "rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.insert("w", Tensor::scalar(1.0)).unwrap();
        let f = |p: &ParamSet<f64>| -> Result<f64, NnError> {
            let w = p.get("w")?.data()[0];
            Ok(w * w)
        };
        let fg = |p: &ParamSet<f64>| -> Result<(f64, ParamSet<f64>), NnError> {
            let mut g = p.zeros_like();
            g.get_mut("w")?.data_mut()[0] = 3.0; // wrong: true gradient is 2.0
            Ok((f(p)?, g))
        };
        let report = grad_check(&ps, 1e-5, f, fg).unwrap();
        assert!(report.max_rel_err > 0.3);
        assert_eq!(report.worst.unwrap().0, "w");
    }

    #[test]
    fn zero_eps_is_rejected() {
        let ps: ParamSet<f64> = ParamSet::new();
        let f = |_: &ParamSet<f64>| Ok(0.0);
        let fg = |p: &ParamSet<f64>| Ok((0.0, p.zeros_like()));
        assert!(grad_check(&ps, 0.0, f, fg).is_err());
    }
}
