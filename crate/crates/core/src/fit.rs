//! Least-squares power-law fits for convergence scans.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct PowerFit {
    /// Exponent `p` in `value ~ C eps^p`.
    pub slope: f64,
    /// Prefactor `C`.
    pub constant: f64,
    /// Standard error of the slope.
    pub slope_stderr: f64,
    /// Half-width of the 95% confidence interval of the slope.
    pub slope_ci95: f64,
    /// Root-mean-square residual in `ln(value)`.
    pub rms_residual: f64,
}

// two-sided 97.5% Student t quantiles for 1..=10 degrees of freedom
const T975: [f64; 10] = [12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228];

/// Fit `ln v = ln C + p ln x` by ordinary least squares. Non-positive values
/// are clamped to `1e-300`.
pub fn fit_power_law(x: &[f64], v: &[f64]) -> PowerFit {
    assert_eq!(x.len(), v.len());
    assert!(x.len() >= 2, "need at least two points");
    let lx: Vec<f64> = x.iter().map(|a| a.ln()).collect();
    let lv: Vec<f64> = v.iter().map(|a| a.max(1e-300).ln()).collect();
    let n = x.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let mv = lv.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let sxv: f64 = lx.iter().zip(&lv).map(|(a, b)| (a - mx) * (b - mv)).sum();
    let slope = sxv / sxx;
    let icpt = mv - slope * mx;
    let ss: f64 = lx.iter().zip(&lv).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    let dof = x.len() - 2;
    let (stderr, ci) = if dof == 0 {
        (0.0, 0.0)
    } else {
        let se = (ss / dof as f64 / sxx).sqrt();
        let t = if dof <= 10 { T975[dof - 1] } else { 1.96 };
        (se, t * se)
    };
    PowerFit {
        slope,
        constant: icpt.exp(),
        slope_stderr: stderr,
        slope_ci95: ci,
        rms_residual: (ss / n).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn recovers_exact_power_laws(p in -3.0f64..3.0, c in 0.01f64..100.0) {
            let x = [0.125, 0.0625, 0.03125, 0.015625];
            let v: Vec<f64> = x.iter().map(|e: &f64| c * e.powf(p)).collect();
            let f = fit_power_law(&x, &v);
            prop_assert!((f.slope - p).abs() < 1e-10);
            prop_assert!((f.constant / c - 1.0).abs() < 1e-9);
            prop_assert!(f.rms_residual < 1e-10);
        }
    }
}
