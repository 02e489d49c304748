//! Central finite-difference comparison for any [`Parameters`] container.

use crate::nn::Parameters;

/// Entries where both gradients fall below this are skipped (0/0 guard).
pub const GRAD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares `analytic` against `(L(θ+ε) − L(θ−ε)) / 2ε` for every entry of
/// every tensor of `params`.
pub fn finite_difference_check<P, F>(params: &P, analytic: &P, mut loss: F, eps: f64) -> GradCheckReport
where
    P: Parameters + Clone,
    F: FnMut(&P) -> f64,
{
    let mut probe = params.clone();
    let grads: Vec<(&'static str, Vec<f64>)> = analytic
        .tensors()
        .iter()
        .map(|t| (t.name, t.data.to_vec()))
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for (k, (name, g)) in grads.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let orig = probe.tensors()[k].data[i];
            probe.tensors_mut()[k][i] = orig + eps;
            let lp = loss(&probe);
            probe.tensors_mut()[k][i] = orig - eps;
            let lm = loss(&probe);
            probe.tensors_mut()[k][i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            if a.abs() < GRAD_FLOOR && fd.abs() < GRAD_FLOOR {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let rel = (a - fd).abs() / a.abs().max(fd.abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.to_string(), i));
            }
        }
    }
    report
}
