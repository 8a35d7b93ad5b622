//! Dormand–Prince 5(4) integrator with dense output.

use crate::error::{BlochError, Result};

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

#[derive(Clone, Copy, Debug)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: Option<f64>,
    pub h_max: f64,
    pub max_steps: usize,
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        OdeOptions { rtol: tol, atol: tol, h_init: None, h_max: f64::INFINITY, max_steps: 200_000 }
    }
}

#[derive(Clone, Debug)]
struct Segment {
    t0: f64,
    h: f64,
    r: [Vec<f64>; 5],
}

impl Segment {
    fn eval(&self, t: f64) -> Vec<f64> {
        let th = (t - self.t0) / self.h;
        let th1 = 1.0 - th;
        let [r1, r2, r3, r4, r5] = &self.r;
        (0..r1.len()).map(|i| r1[i] + th * (r2[i] + th1 * (r3[i] + th * (r4[i] + th1 * r5[i])))).collect()
    }
}

/// Accepted steps with a continuous extension of order 4.
#[derive(Clone, Debug)]
pub struct DenseSolution {
    pub t: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub rejected: usize,
    segs: Vec<Segment>,
}

impl DenseSolution {
    pub fn last(&self) -> &[f64] {
        self.y.last().unwrap()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        if self.segs.is_empty() {
            return self.y[0].clone();
        }
        let dir = self.segs[0].h.signum();
        let i = self.t[1..].partition_point(|&tt| (tt - t) * dir < 0.0).min(self.segs.len() - 1);
        self.segs[i].eval(t)
    }

    pub fn steps(&self) -> usize {
        self.segs.len()
    }
}

struct Stages {
    k: [Vec<f64>; 7],
    y_new: Vec<f64>,
}

fn stages<F>(f: &mut F, t: f64, y: &[f64], k1: &[f64], h: f64) -> Result<Stages>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let n = y.len();
    let mut k: [Vec<f64>; 7] = Default::default();
    k[0] = k1.to_vec();
    let mut tmp = vec![0.0; n];
    for s in 1..7 {
        for i in 0..n {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate().take(s) {
                acc += A[s][j] * kj[i];
            }
            tmp[i] = y[i] + h * acc;
        }
        k[s] = f(t + C[s] * h, &tmp)?;
    }
    // stage 7 is evaluated at the 5th-order solution (FSAL)
    Ok(Stages { k, y_new: tmp })
}

fn segment(t: f64, h: f64, y: &[f64], st: &Stages) -> Segment {
    let n = y.len();
    let ydiff: Vec<f64> = (0..n).map(|i| st.y_new[i] - y[i]).collect();
    let bspl: Vec<f64> = (0..n).map(|i| h * st.k[0][i] - ydiff[i]).collect();
    let r4: Vec<f64> = (0..n).map(|i| ydiff[i] - h * st.k[6][i] - bspl[i]).collect();
    let r5: Vec<f64> = (0..n)
        .map(|i| h * D.iter().zip(&st.k).map(|(d, k)| d * k[i]).sum::<f64>())
        .collect();
    Segment { t0: t, h, r: [y.to_vec(), ydiff, bspl, r4, r5] }
}

/// Adaptive integration of `y' = f(t, y)` from `t0` to `t_end`.
pub fn integrate<F>(mut f: F, t0: f64, y0: &[f64], t_end: f64, opts: &OdeOptions) -> Result<DenseSolution>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let n = y0.len();
    let mut sol = DenseSolution { t: vec![t0], y: vec![y0.to_vec()], rejected: 0, segs: Vec::new() };
    let span = t_end - t0;
    if span == 0.0 {
        return Ok(sol);
    }
    let dir = span.signum();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = f(t, &y)?;
    let mut h = opts.h_init.unwrap_or_else(|| {
        let sc: f64 = (0..n).map(|i| (k1[i] / (opts.atol + opts.rtol * y[i].abs())).powi(2)).sum::<f64>() / n as f64;
        let guess = 0.01 / sc.sqrt().max(1e-10);
        guess.min(span.abs()).min(opts.h_max)
    }) * dir;
    let mut steps = 0;
    while (t_end - t) * dir > 1e-14 * span.abs().max(1.0) {
        steps += 1;
        if steps > opts.max_steps {
            return Err(BlochError::StepFailure { s: t, reason: "step budget exhausted".into() });
        }
        if (t + h - t_end) * dir > 0.0 {
            h = t_end - t;
        }
        if h.abs() < 1e-14 * t.abs().max(1.0) {
            return Err(BlochError::StepFailure { s: t, reason: "step size underflow".into() });
        }
        let st = stages(&mut f, t, &y, &k1, h)?;
        let mut err = 0.0;
        for i in 0..n {
            let e: f64 = h * E.iter().zip(&st.k).map(|(c, k)| c * k[i]).sum::<f64>();
            let sc = opts.atol + opts.rtol * y[i].abs().max(st.y_new[i].abs());
            err += (e / sc).powi(2);
        }
        let err = (err / n as f64).sqrt();
        if !err.is_finite() {
            h *= 0.2;
            sol.rejected += 1;
            continue;
        }
        if err <= 1.0 {
            sol.segs.push(segment(t, h, &y, &st));
            t += h;
            y = st.y_new;
            k1 = st.k[6].clone();
            sol.t.push(t);
            sol.y.push(y.clone());
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * fac).abs().min(opts.h_max) * dir;
        } else {
            sol.rejected += 1;
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
        }
    }
    Ok(sol)
}

/// Fixed-step Dormand–Prince on the given time grid (5th-order solution).
pub fn integrate_on_grid<F>(mut f: F, ts: &[f64], y0: &[f64]) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let mut out = vec![y0.to_vec()];
    let mut y = y0.to_vec();
    for w in ts.windows(2) {
        let k1 = f(w[0], &y)?;
        y = stages(&mut f, w[0], &y, &k1, w[1] - w[0])?.y_new;
        out.push(y.clone());
    }
    Ok(out)
}

/// Step sequence with every step split in two.
pub fn halved(ts: &[f64]) -> Vec<f64> {
    let mut out = vec![ts[0]];
    for w in ts.windows(2) {
        out.push(0.5 * (w[0] + w[1]));
        out.push(w[1]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator() {
        let f = |_t: f64, y: &[f64]| Ok(vec![y[1], -y[0]]);
        let sol = integrate(f, 0.0, &[1.0, 0.0], 10.0, &OdeOptions::with_tol(1e-10)).unwrap();
        let y = sol.last();
        assert!((y[0] - 10f64.cos()).abs() < 1e-8);
        assert!((y[1] + 10f64.sin()).abs() < 1e-8);
        for t in [0.3, 2.71, 7.5] {
            let v = sol.eval(t);
            assert!((v[0] - t.cos()).abs() < 1e-7, "dense output at {t}");
        }
        let back = integrate(f, 10.0, y, 0.0, &OdeOptions::with_tol(1e-10)).unwrap();
        assert!((back.last()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn fixed_grid_is_fifth_order() {
        let f = |t: f64, y: &[f64]| Ok(vec![y[0] * t.cos()]);
        let exact = 1f64.sin().exp();
        let err = |n: usize| {
            let ts: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
            (integrate_on_grid(f, &ts, &[1.0]).unwrap().last().unwrap()[0] - exact).abs()
        };
        let ratio = err(8) / err(16);
        assert!(ratio > 25.0 && ratio < 40.0, "ratio {ratio}");
        assert_eq!(halved(&[0.0, 1.0, 3.0]), vec![0.0, 0.5, 1.0, 2.0, 3.0]);
    }
}
