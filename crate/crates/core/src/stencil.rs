//! One-dimensional derivative kernels shared by the grid operators.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Half-stencil (offsets 1..=p) of the centered first-derivative formula of
/// the given order. The full stencil is antisymmetric.
pub fn central_half_stencil(order: usize) -> &'static [f64] {
    match order {
        2 => &[0.5],
        4 => &[2.0 / 3.0, -1.0 / 12.0],
        6 => &[3.0 / 4.0, -3.0 / 20.0, 1.0 / 60.0],
        8 => &[4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0],
        _ => panic!("unsupported stencil order {order}"),
    }
}

/// Weights of the first derivative at `x0` from samples at `nodes`
/// (Fornberg's recursion restricted to m = 1).
pub fn fd_weights(x0: f64, nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    let mut c = vec![[0.0f64; 2]; n];
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(1);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.iter().map(|w| w[1]).collect()
}

/// Lagrange interpolation weights at `x` for the given nodes.
pub fn lagrange_weights(x: f64, nodes: &[f64]) -> Vec<f64> {
    nodes
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            nodes
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &xj)| (x - xj) / (xi - xj))
                .product()
        })
        .collect()
}

/// Forward/inverse plans for one periodic direction.
#[derive(Clone)]
pub struct PeriodicFft {
    pub n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PeriodicFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeriodicFft").field("n", &self.n).finish()
    }
}

impl PeriodicFft {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    /// Signed wavenumber of FFT bin `k`.
    pub fn wavenumber(&self, k: usize) -> i64 {
        let n = self.n as i64;
        let k = k as i64;
        if k <= n / 2 {
            k
        } else {
            k - n
        }
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.fwd.process(data);
    }

    /// Inverse transform including the 1/n normalization.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.inv.process(data);
        let s = 1.0 / self.n as f64;
        for v in data.iter_mut() {
            *v *= s;
        }
    }

    /// Spectral derivative of one line with the given period, in place.
    /// The Nyquist mode is dropped for even `n`.
    pub fn differentiate(&self, data: &mut [Complex64], period: f64) {
        self.forward(data);
        self.apply_symbol(data, period);
        self.inverse(data);
    }

    /// Removes the Nyquist coefficient (even lengths only), the one mode the
    /// spectral derivative cannot see.
    pub fn drop_nyquist(&self, data: &mut [Complex64]) {
        if self.n % 2 != 0 {
            return;
        }
        self.forward(data);
        data[self.n / 2] = Complex64::new(0.0, 0.0);
        self.inverse(data);
    }

    /// Multiplies Fourier coefficients by i·k·2π/period.
    pub fn apply_symbol(&self, data: &mut [Complex64], period: f64) {
        let n = self.n;
        for (k, v) in data.iter_mut().enumerate() {
            let kk = self.wavenumber(k);
            if n % 2 == 0 && kk as usize == n / 2 {
                *v = Complex64::new(0.0, 0.0);
            } else {
                *v *= Complex64::new(0.0, 2.0 * PI * kk as f64 / period);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fornberg_matches_central_stencils() {
        for order in [2usize, 4, 6, 8] {
            let p = order / 2;
            let nodes: Vec<f64> = (-(p as i64)..=p as i64).map(|k| k as f64).collect();
            let w = fd_weights(0.0, &nodes);
            let half = central_half_stencil(order);
            for (j, &c) in half.iter().enumerate() {
                assert!((w[p + j + 1] - c).abs() < 1e-13);
                assert!((w[p - j - 1] + c).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn lagrange_rows_sum_to_one() {
        let nodes = [-1.0, 0.0, 1.0, 2.0];
        for x in [0.1, 0.5, 0.93] {
            let s: f64 = lagrange_weights(x, &nodes).iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn spectral_derivative_of_sine() {
        let n = 32;
        let fft = PeriodicFft::new(n);
        let mut d: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new((2.0 * PI * i as f64 / n as f64).sin(), 0.0))
            .collect();
        fft.differentiate(&mut d, 1.0);
        for (i, v) in d.iter().enumerate() {
            let exact = 2.0 * PI * (2.0 * PI * i as f64 / n as f64).cos();
            assert!((v.re - exact).abs() < 1e-11);
        }
    }
}
