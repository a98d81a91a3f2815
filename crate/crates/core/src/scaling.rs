//! Log-log regressions for scaling laws.

use serde::Serialize;

/// Least-squares line through `(ln x, ln y)`. Returns `(slope, intercept)`,
/// or `None` when fewer than two points have positive finite coordinates.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 || pts.len() != x.len() {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Default slope tolerance for a sweep: ±0.3, tightened to ±0.2 once the
/// sweep reaches `m = 128`.
pub fn default_tolerance(m_list: &[usize]) -> f64 {
    if m_list.iter().copied().max().unwrap_or(0) >= 128 {
        0.2
    } else {
        0.3
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub quantity: String,
    pub m: Vec<usize>,
    pub values: Vec<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub expected: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ScalingReport {
    pub fn new(quantity: &str, m: &[usize], values: &[f64], expected: f64, tolerance: f64) -> Self {
        let x: Vec<f64> = m.iter().map(|&v| v as f64).collect();
        let fit = loglog_fit(&x, values);
        let pass = fit.is_some_and(|(s, _)| (s - expected).abs() <= tolerance);
        Self {
            quantity: quantity.to_string(),
            m: m.to_vec(),
            values: values.to_vec(),
            slope: fit.map(|f| f.0),
            intercept: fit.map(|f| f.1),
            expected,
            tolerance,
            pass,
        }
    }
}
