//! Central finite-difference checks of parameter gradients.

use hdrcm_core::SeededRng;

use crate::tensor::ParamSet;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over checked entries.
    pub max_rel: f64,
    /// Tensor name, index, analytic and numeric value of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Relative error with an absolute floor for entries that are both tiny.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares `analytic` with central differences of `loss` at `params` on
/// `per_tensor` randomly chosen entries of every tensor.
pub fn check_params(
    loss: impl Fn(&ParamSet<f64>) -> f64,
    params: &ParamSet<f64>,
    analytic: &ParamSet<f64>,
    per_tensor: usize,
    step: f64,
    rng: &mut SeededRng,
) -> GradCheck {
    let mut report = GradCheck::default();
    let mut probe = params.clone();
    for (k, p) in params.params.iter().enumerate() {
        let n = p.data.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.index(n)).collect()
        };
        for i in picks {
            let orig = p.data[i];
            probe.params[k].data[i] = orig + step;
            let up = loss(&probe);
            probe.params[k].data[i] = orig - step;
            let down = loss(&probe);
            probe.params[k].data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.params[k].data[i];
            let err = rel_error(a, numeric, 1e-9);
            report.checked += 1;
            if err > report.max_rel || report.worst.is_none() {
                report.max_rel = report.max_rel.max(err);
                report.worst = Some((p.name.clone(), i, a, numeric));
            }
        }
    }
    report
}

/// Central-difference gradient of a scalar function of a vector.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}
