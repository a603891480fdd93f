//! Operators on the base slice of the torus-base structure.
//!
//! The base is `ℂ/(ℓℤ + ℓτℤ)` with lattice coordinates `(x, y) ∈ [0,1)²`,
//! `z = ℓ(x + τy)`. Sections of the degree-`m` line bundle are stored in the
//! unitary Landau frame, where the gluing reads
//! `s(x+1, y) = e^{2πimy} s(x, y)`, `s(x, y+1) = s(x, y)` and the reference
//! connection is `d − 2πi m x dy`. The reference curvature is then
//! `(πm/A) dz∧dz̄` with `A` the base area.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::stencil::{central_half_stencil, PeriodicFft};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Clone, Debug)]
pub struct TorusOps {
    pub nx: usize,
    pub ny: usize,
    pub ell: f64,
    pub tau: Complex64,
    pub area: f64,
    pub fd_order: usize,
    fft_x: PeriodicFft,
    fft_y: PeriodicFft,
}

impl TorusOps {
    pub fn new(nx: usize, ny: usize, tau: Complex64, area: f64, fd_order: usize) -> Self {
        let ell = (area / tau.im).sqrt();
        Self {
            nx,
            ny,
            ell,
            tau,
            area,
            fd_order,
            fft_x: PeriodicFft::new(nx),
            fft_y: PeriodicFft::new(ny),
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, ix: usize, iy: usize) -> usize {
        ix * self.ny + iy
    }

    #[inline]
    pub fn x(&self, ix: usize) -> f64 {
        ix as f64 / self.nx as f64
    }

    #[inline]
    pub fn y(&self, iy: usize) -> f64 {
        iy as f64 / self.ny as f64
    }

    /// Complex coordinate of a lattice point.
    pub fn z(&self, x: f64, y: f64) -> Complex64 {
        self.ell * (Complex64::new(x, 0.0) + self.tau * y)
    }

    pub fn from_fn(&self, f: impl Fn(f64, f64) -> Complex64) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.len());
        for ix in 0..self.nx {
            for iy in 0..self.ny {
                out.push(f(self.x(ix), self.y(iy)));
            }
        }
        out
    }

    /// Coordinate derivative along x of a twist-`m` section, spectral in
    /// both cases: on the row at height `y`, `e^{−2πimxy}s` is periodic in
    /// `x`, so `∂_x s = e^{2πimxy}∂_x(e^{−2πimxy}s) + 2πimy·s`.
    pub fn dx(&self, f: &[Complex64], m: i64) -> Vec<Complex64> {
        let (nx, ny) = (self.nx, self.ny);
        let mut out = vec![Complex64::new(0.0, 0.0); nx * ny];
        let mut line = vec![Complex64::new(0.0, 0.0); nx];
        let mut phase = vec![Complex64::new(1.0, 0.0); nx];
        for iy in 0..ny {
            let y = self.y(iy);
            let k = 2.0 * PI * m as f64 * y;
            for ix in 0..nx {
                phase[ix] = Complex64::from_polar(1.0, k * self.x(ix));
                line[ix] = f[ix * ny + iy] * phase[ix].conj();
            }
            self.fft_x.differentiate(&mut line, 1.0);
            for ix in 0..nx {
                let v = f[ix * ny + iy];
                out[ix * ny + iy] = line[ix] * phase[ix] + I * k * v;
            }
        }
        out
    }

    /// Centered-difference x-derivative of order `fd_order` with ghost cells
    /// filled from the gluing rule. Kept as an independent check of [`dx`].
    pub fn dx_fd(&self, f: &[Complex64], m: i64) -> Vec<Complex64> {
        let (nx, ny) = (self.nx, self.ny);
        let mut out = vec![Complex64::new(0.0, 0.0); nx * ny];
        let half = central_half_stencil(self.fd_order);
        let inv_h = nx as f64;
        for iy in 0..ny {
            let y = self.y(iy);
            let fwd = Complex64::from_polar(1.0, 2.0 * PI * m as f64 * y);
            let bwd = fwd.conj();
            let sample = |j: i64| -> Complex64 {
                if j >= nx as i64 {
                    f[(j - nx as i64) as usize * ny + iy] * fwd
                } else if j < 0 {
                    f[(j + nx as i64) as usize * ny + iy] * bwd
                } else {
                    f[j as usize * ny + iy]
                }
            };
            for ix in 0..nx {
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, &c) in half.iter().enumerate() {
                    let o = (k + 1) as i64;
                    acc += c * (sample(ix as i64 + o) - sample(ix as i64 - o));
                }
                out[ix * ny + iy] = acc * inv_h;
            }
        }
        out
    }

    /// Projects a twist-`m` section off the Nyquist modes in both
    /// directions, using the same row gauge as [`dx`](Self::dx). A no-op on
    /// odd grids.
    pub fn drop_nyquist(&self, f: &mut [Complex64], m: i64) {
        let (nx, ny) = (self.nx, self.ny);
        if nx % 2 == 0 {
            let mut line = vec![Complex64::new(0.0, 0.0); nx];
            for iy in 0..ny {
                let k = 2.0 * PI * m as f64 * self.y(iy);
                for ix in 0..nx {
                    line[ix] = f[ix * ny + iy] * Complex64::from_polar(1.0, -k * self.x(ix));
                }
                self.fft_x.drop_nyquist(&mut line);
                for ix in 0..nx {
                    f[ix * ny + iy] = line[ix] * Complex64::from_polar(1.0, k * self.x(ix));
                }
            }
        }
        if ny % 2 == 0 {
            for ix in 0..nx {
                self.fft_y.drop_nyquist(&mut f[ix * ny..(ix + 1) * ny]);
            }
        }
    }

    /// Coordinate derivative along y (always periodic, spectral).
    pub fn dy(&self, f: &[Complex64]) -> Vec<Complex64> {
        let ny = self.ny;
        let mut out = f.to_vec();
        for ix in 0..self.nx {
            self.fft_y.differentiate(&mut out[ix * ny..(ix + 1) * ny], 1.0);
        }
        out
    }

    /// Covariant derivative along y in the Landau frame.
    pub fn cov_y(&self, f: &[Complex64], m: i64) -> Vec<Complex64> {
        let mut out = self.dy(f);
        if m != 0 {
            for ix in 0..self.nx {
                let a = -I * (2.0 * PI * m as f64 * self.x(ix));
                for iy in 0..self.ny {
                    let k = ix * self.ny + iy;
                    out[k] += a * f[k];
                }
            }
        }
        out
    }

    /// `∇_z` and `∇_z̄` of a twist-`m` section, computed together.
    pub fn d_z_zbar(&self, f: &[Complex64], m: i64) -> (Vec<Complex64>, Vec<Complex64>) {
        let gx = self.dx(f, m);
        let gy = self.cov_y(f, m);
        let c = 1.0 / (2.0 * self.ell * self.tau.im);
        let tb = self.tau.conj();
        let t = self.tau;
        let dz = gx
            .iter()
            .zip(&gy)
            .map(|(&a, &b)| -I * c * (b - tb * a))
            .collect();
        let dzb = gx
            .iter()
            .zip(&gy)
            .map(|(&a, &b)| I * c * (b - t * a))
            .collect();
        (dz, dzb)
    }

    pub fn d_z(&self, f: &[Complex64], m: i64) -> Vec<Complex64> {
        self.d_z_zbar(f, m).0
    }

    pub fn d_zbar(&self, f: &[Complex64], m: i64) -> Vec<Complex64> {
        self.d_z_zbar(f, m).1
    }

    /// Integral over the base against the Kähler area form.
    pub fn integrate(&self, f: &[Complex64]) -> Complex64 {
        let s: Complex64 = f.iter().sum();
        s * (self.area / self.len() as f64)
    }

    pub fn integrate_re(&self, f: impl Iterator<Item = f64>) -> f64 {
        f.sum::<f64>() * self.area / self.len() as f64
    }

    /// Holomorphic section of the degree-one bundle in the Landau frame,
    /// `Σ_n exp(−πi(x−n)²/τ) e^{2πiny}`.
    pub fn theta_section(&self, x: f64, y: f64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for n in -12i64..=12 {
            let u = x - n as f64;
            acc += (-I * PI * u * u / self.tau).exp() * Complex64::from_polar(1.0, 2.0 * PI * n as f64 * y);
        }
        acc
    }

    /// A smooth section of twist `m`: `σ^m` for `m > 0`, `conj(σ)^{|m|}` for
    /// `m < 0`, and 1 for `m = 0`.
    pub fn base_section(&self, m: i64, x: f64, y: f64) -> Complex64 {
        match m {
            0 => Complex64::new(1.0, 0.0),
            m if m > 0 => self.theta_section(x, y).powi(m as i32),
            m => self.theta_section(x, y).conj().powi((-m) as i32),
        }
    }

    /// Largest symbol of the untwisted spectral `∂_z∂_z̄`, attained at a
    /// corner of the resolved wavenumber box.
    pub fn laplacian_symbol_max(&self) -> f64 {
        let c = 2.0 * PI / (2.0 * self.ell * self.tau.im);
        let ax = (self.nx / 2) as f64;
        let by = (self.ny / 2) as f64;
        [(ax, by), (ax, -by)]
            .iter()
            .map(|&(a, b)| c * c * (Complex64::new(b, 0.0) - self.tau * a).norm_sqr())
            .fold(0.0, f64::max)
    }

    /// Largest eigenvalue magnitude of the discrete `∇_z∇_z̄` on twist-`m`
    /// sections, by power iteration.
    pub fn laplacian_norm(&self, m: i64, iters: usize) -> f64 {
        let mut v = self.from_fn(|x, y| {
            Complex64::new(
                (7.3 * x + 3.1 * y).sin() + 0.3 * (13.0 * x * y).cos(),
                (5.7 * y - 2.2 * x).cos(),
            )
        });
        let mut est = 0.0;
        for _ in 0..iters {
            let w = self.d_z(&self.d_zbar(&v, m), m);
            let norm = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            let vnorm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            if norm == 0.0 || vnorm == 0.0 {
                return 0.0;
            }
            est = norm / vnorm;
            v = w.into_iter().map(|c| c / norm).collect();
        }
        est
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ops(n: usize) -> TorusOps {
        TorusOps::new(n, n, Complex64::new(0.0, 1.0), PI, 6)
    }

    #[test]
    fn commutator_of_covariant_derivatives_is_reference_curvature() {
        let t = ops(32);
        let m = 1;
        let f: Vec<Complex64> = t.from_fn(|x, y| t.theta_section(x, y) * (1.0 + 0.2 * (2.0 * PI * y).sin()));
        let a = t.d_z(&t.d_zbar(&f, m), m);
        let b = t.d_zbar(&t.d_z(&f, m), m);
        let k = PI * m as f64 / t.area;
        let err = a
            .iter()
            .zip(&b)
            .zip(&f)
            .map(|((a, b), f)| (a - b - k * f).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn theta_section_is_holomorphic_and_twisted() {
        let t = ops(32);
        let f = t.from_fn(|x, y| t.theta_section(x, y));
        let d = t.d_zbar(&f, 1);
        let err = d.iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        for y in [0.1, 0.37, 0.8] {
            let lhs = t.theta_section(1.3, y);
            let rhs = Complex64::from_polar(1.0, 2.0 * PI * y) * t.theta_section(0.3, y);
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }
}
