//! Central finite-difference gradient checks.

use crate::weights::ParamSet;

/// Default step for `f64` checks.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than relatively.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` at the chosen coordinates.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// At most `max` indices spread evenly over `0..len`.
pub fn spread_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|k| k * len / max).collect()
}

/// Compares `analytic` against central differences of `f` on up to
/// `max_checked` coordinates.
pub fn check_vector(
    name: &str,
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    max_checked: usize,
    h: f64,
    floor: f64,
) -> GradCheckReport {
    let idx = spread_indices(x.len(), max_checked);
    let numeric = central_difference(f, x, &idx, h);
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: idx.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (&i, n) in idx.iter().zip(numeric) {
        let e = rel_error(analytic[i], n, floor);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = n;
        }
    }
    report
}

fn tensor_values<P: ParamSet<f64>>(p: &P) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, _, v| out.push((name.to_string(), v.to_vec())));
    out
}

fn set_tensor<P: ParamSet<f64>>(p: &mut P, target: &str, values: &[f64]) {
    p.visit_mut("", &mut |name, _, v| {
        if name == target {
            v.copy_from_slice(values);
        }
    });
}

/// Checks every tensor of a parameter set, at most `max_per_tensor`
/// coordinates each. `grads` must mirror `params`.
pub fn check_params<P: ParamSet<f64> + Clone>(
    params: &P,
    grads: &P,
    mut loss: impl FnMut(&P) -> f64,
    max_per_tensor: usize,
    h: f64,
    floor: f64,
) -> Vec<GradCheckReport> {
    let analytic = tensor_values(grads);
    let mut probe = params.clone();
    tensor_values(params)
        .into_iter()
        .zip(analytic)
        .map(|((name, x), (_, g))| {
            let report = check_vector(
                &name,
                |v| {
                    set_tensor(&mut probe, &name, v);
                    loss(&probe)
                },
                &x,
                &g,
                max_per_tensor,
                h,
                floor,
            );
            set_tensor(&mut probe, &name, &x);
            report
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes() {
        let x = [1.0, -2.0, 0.5];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let r = check_vector("sq", |v| v.iter().map(|a| a * a).sum(), &x, &g, 100, DEFAULT_STEP, DEFAULT_FLOOR);
        assert!(r.passes(1e-6), "{r:?}");
        let bad: Vec<f64> = g.iter().map(|v| v * 1.01).collect();
        let r = check_vector("sq", |v| v.iter().map(|a| a * a).sum(), &x, &bad, 100, DEFAULT_STEP, DEFAULT_FLOOR);
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn spread_caps_count() {
        assert_eq!(spread_indices(5, 100), vec![0, 1, 2, 3, 4]);
        let s = spread_indices(1000, 100);
        assert_eq!(s.len(), 100);
        assert_eq!(s[1], 10);
    }
}
