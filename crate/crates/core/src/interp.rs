//! Trigonometric interpolation of lattice-periodic functions of `k`.
//!
//! Samples live on the nodes `k = sum_j (i_j / n) e*_j`. The interpolant is
//! `f(k) = sum_R c(R) exp(i k . R)` over lattice vectors `R` with index range
//! `-n/2 ..= n/2`; for even `n` the Nyquist coefficient is split evenly between
//! `+n/2` and `-n/2`, which keeps real data real and reproduces the samples.
//! Values may be vectors (one interpolant per component, shared modes).

use std::f64::consts::TAU;

use crate::linalg::{cis, C64};

#[derive(Clone, Debug)]
pub struct PeriodicInterp {
    pub dim: usize,
    pub n: usize,
    pub width: usize,
    /// Lattice vectors `R`.
    modes: Vec<[f64; 2]>,
    /// `coef[m * width + c]`.
    coef: Vec<C64>,
}

fn axis_modes(n: usize) -> Vec<(i64, i64, f64)> {
    // (dft index, lattice index, weight)
    let half = n as i64 / 2;
    let mut out = Vec::new();
    let lo = -(n as i64) / 2;
    for r in lo..lo + n as i64 {
        if n % 2 == 0 && r == -half {
            out.push((r, -half, 0.5));
            out.push((r, half, 0.5));
        } else {
            out.push((r, r, 1.0));
        }
    }
    out
}

impl PeriodicInterp {
    /// `samples[node]` with node index `i1 + n * i2`.
    pub fn new(dim: usize, n: usize, lengths: [f64; 2], samples: &[Vec<C64>]) -> Self {
        let nodes = n.pow(dim as u32);
        assert_eq!(samples.len(), nodes);
        let width = samples[0].len();
        let am = axis_modes(n);
        let mut list: Vec<([i64; 2], [i64; 2], f64)> = Vec::new();
        if dim == 1 {
            for &(d, r, w) in &am {
                list.push(([d, 0], [r, 0], w));
            }
        } else {
            for &(d2, r2, w2) in &am {
                for &(d1, r1, w1) in &am {
                    list.push(([d1, d2], [r1, r2], w1 * w2));
                }
            }
        }
        let mut modes = Vec::with_capacity(list.len());
        let mut coef = vec![C64::new(0.0, 0.0); list.len() * width];
        let inv = 1.0 / nodes as f64;
        for (mi, (d, r, w)) in list.iter().enumerate() {
            modes.push([r[0] as f64 * lengths[0], r[1] as f64 * lengths[1]]);
            let out = &mut coef[mi * width..(mi + 1) * width];
            for node in 0..nodes {
                let (i1, i2) = (node % n, node / n);
                let t =
                    (d[0] * i1 as i64 + d[1] * i2 as i64).rem_euclid(n as i64) as f64 / n as f64;
                let ph = cis(-TAU * t) * (w * inv);
                for (o, s) in out.iter_mut().zip(&samples[node]) {
                    *o += ph * s;
                }
            }
        }
        PeriodicInterp {
            dim,
            n,
            width,
            modes,
            coef,
        }
    }

    pub fn from_real(dim: usize, n: usize, lengths: [f64; 2], samples: &[f64]) -> Self {
        let v: Vec<Vec<C64>> = samples.iter().map(|&x| vec![C64::new(x, 0.0)]).collect();
        Self::new(dim, n, lengths, &v)
    }

    pub fn eval(&self, k: [f64; 2]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.width];
        for (m, r) in self.modes.iter().enumerate() {
            let ph = cis(k[0] * r[0] + k[1] * r[1]);
            for (o, c) in out
                .iter_mut()
                .zip(&self.coef[m * self.width..(m + 1) * self.width])
            {
                *o += ph * c;
            }
        }
        out
    }

    /// Value and first derivatives `d/dk_j`.
    pub fn eval_grad(&self, k: [f64; 2]) -> (Vec<C64>, [Vec<C64>; 2]) {
        let z = vec![C64::new(0.0, 0.0); self.width];
        let mut v = z.clone();
        let mut g = [z.clone(), z];
        for (m, r) in self.modes.iter().enumerate() {
            let ph = cis(k[0] * r[0] + k[1] * r[1]);
            let d = [ph * C64::new(0.0, r[0]), ph * C64::new(0.0, r[1])];
            for (c_i, c) in self.coef[m * self.width..(m + 1) * self.width]
                .iter()
                .enumerate()
            {
                v[c_i] += ph * c;
                g[0][c_i] += d[0] * c;
                g[1][c_i] += d[1] * c;
            }
        }
        (v, g)
    }

    /// Scalar (component 0) real part with gradient and Hessian.
    pub fn eval_real_d2(&self, k: [f64; 2]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        let mut v = 0.0;
        let mut g = [0.0; 2];
        let mut h = [[0.0; 2]; 2];
        for (m, r) in self.modes.iter().enumerate() {
            let z = cis(k[0] * r[0] + k[1] * r[1]) * self.coef[m * self.width];
            v += z.re;
            // d/dk_j of z = i r_j z
            for i in 0..2 {
                g[i] += -r[i] * z.im;
                for j in 0..2 {
                    h[i][j] += -r[i] * r[j] * z.re;
                }
            }
        }
        (v, g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_nodes_and_smooth_functions() {
        for n in [16usize, 17] {
            let a = 2.0;
            let b = TAU / a;
            let f =
                |k: f64| (k * a).cos() * 0.3 + (2.0 * k * a).sin() + 1.0 / (2.0 + (k * a).cos());
            let samples: Vec<f64> = (0..n).map(|i| f(i as f64 / n as f64 * b)).collect();
            let it = PeriodicInterp::from_real(1, n, [a, 1.0], &samples);
            for i in 0..n {
                let k = i as f64 / n as f64 * b;
                assert!((it.eval([k, 0.0])[0].re - samples[i]).abs() < 1e-12);
            }
            let (v, _, _) = it.eval_real_d2([0.123, 0.0]);
            assert!((v - f(0.123)).abs() < 1e-3);
        }
    }

    #[test]
    fn nyquist_real_and_derivative() {
        let n = 16;
        let lengths = [1.0, 1.5];
        let b = [TAU, TAU / 1.5];
        let f = |k: [f64; 2]| (k[0] + 2.0 * k[1] * 1.5).cos() + (8.0 * k[0]).cos();
        let samples: Vec<f64> = (0..n * n)
            .map(|s| {
                f([
                    (s % n) as f64 / n as f64 * b[0],
                    (s / n) as f64 / n as f64 * b[1],
                ])
            })
            .collect();
        let it = PeriodicInterp::from_real(2, n, lengths, &samples);
        let k = [0.31, -0.7];
        let (v, g, h) = it.eval_real_d2(k);
        assert!((v - f(k)).abs() < 1e-12);
        let dx = -(k[0] + 3.0 * k[1]).sin() - 8.0 * (8.0 * k[0]).sin();
        assert!((g[0] - dx).abs() < 1e-11);
        let dyy = -9.0 * (k[0] + 3.0 * k[1]).cos();
        assert!((h[1][1] - dyy).abs() < 1e-10);
        assert!(it.eval(k)[0].im.abs() < 1e-12);
    }
}
