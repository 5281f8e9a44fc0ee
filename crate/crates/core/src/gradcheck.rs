//! Central finite-difference check of the model's analytic gradients.

use serde::Serialize;

use crate::error::Result;
use crate::model::{backward, forward, ModelParams};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively:
/// round-off in a central difference is about `1e-16 / ε ≈ 1e-11`, so a
/// relative error on a gradient component near zero is meaningless.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Tensor name and flat index of the worst component.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares every component of the BPTT gradient with
/// `(L(θ + ε) − L(θ − ε)) / 2ε`.
pub fn check_model_gradients(
    params: &ModelParams,
    feature: &[f64],
    caption: &[usize],
    l2_lambda: f64,
    eps: f64,
) -> Result<GradCheckReport> {
    let (_, trace) = forward(params, feature, caption, l2_lambda)?;
    let grads = backward(params, &trace, l2_lambda)?;
    let analytic: Vec<Vec<f64>> = grads.tensor_data().iter().map(|t| t.to_vec()).collect();
    let names: Vec<String> = params.tensor_specs().into_iter().map(|s| s.name).collect();

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (t, name) in names.iter().enumerate() {
        for (k, &a) in analytic[t].iter().enumerate() {
            let orig = probe.tensor_data()[t][k];
            probe.tensor_data_mut()[t][k] = orig + eps;
            let (plus, _) = forward(&probe, feature, caption, l2_lambda)?;
            probe.tensor_data_mut()[t][k] = orig - eps;
            let (minus, _) = forward(&probe, feature, caption, l2_lambda)?;
            probe.tensor_data_mut()[t][k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), k));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gru::StackKind;
    use crate::linalg::Rng;
    use crate::model::ModelDims;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn small_single_layer_model_passes() {
        let dims = ModelDims {
            feature_dim: 3,
            hidden: 4,
            vocab_size: 6,
            stack: StackKind::Single,
        };
        let p = ModelParams::init(dims, 0.5, &mut Rng::new(5)).unwrap();
        let r = check_model_gradients(&p, &[0.2, -0.7, 1.1], &[0, 3, 5, 1], 1e-3, DEFAULT_EPSILON).unwrap();
        assert_eq!(r.checked, p.param_count());
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }
}
