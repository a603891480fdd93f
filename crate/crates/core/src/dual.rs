//! Forward-mode dual numbers in three variables, used to take exact first
//! derivatives of closed-form metric coefficients.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual3 {
    pub v: f64,
    pub d: [f64; 3],
}

impl Dual3 {
    pub const fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 3] }
    }

    /// The `k`-th coordinate variable at value `v`.
    pub fn var(v: f64, k: usize) -> Self {
        let mut d = [0.0; 3];
        d[k] = 1.0;
        Self { v, d }
    }

    pub fn sq(self) -> Self {
        self * self
    }

    pub fn recip(self) -> Self {
        let inv = 1.0 / self.v;
        Self {
            v: inv,
            d: self.d.map(|x| -x * inv * inv),
        }
    }
}

impl From<f64> for Dual3 {
    fn from(v: f64) -> Self {
        Self::constant(v)
    }
}

impl Add for Dual3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}

impl Sub for Dual3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]],
        }
    }
}

impl Mul for Dual3 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
            ],
        }
    }
}

impl Div for Dual3 {
    type Output = Self;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, o: Self) -> Self {
        self * o.recip()
    }
}

impl Neg for Dual3 {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl Mul<f64> for Dual3 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self {
            v: self.v * s,
            d: self.d.map(|x| x * s),
        }
    }
}

impl Add<f64> for Dual3 {
    type Output = Self;
    fn add(self, s: f64) -> Self {
        Self { v: self.v + s, d: self.d }
    }
}

impl Dual3 {
    pub fn sin(self) -> Self {
        let c = self.v.cos();
        Self {
            v: self.v.sin(),
            d: self.d.map(|x| x * c),
        }
    }

    pub fn cos(self) -> Self {
        let s = -self.v.sin();
        Self {
            v: self.v.cos(),
            d: self.d.map(|x| x * s),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotient_rule() {
        let x = Dual3::var(0.7, 0);
        let y = Dual3::var(-0.3, 1);
        let f = x * y / (Dual3::constant(1.0) + x.sq() + y.sq());
        let h = 1e-6;
        let g = |a: f64, b: f64| a * b / (1.0 + a * a + b * b);
        let fx = (g(0.7 + h, -0.3) - g(0.7 - h, -0.3)) / (2.0 * h);
        let fy = (g(0.7, -0.3 + h) - g(0.7, -0.3 - h)) / (2.0 * h);
        assert!((f.d[0] - fx).abs() < 1e-9);
        assert!((f.d[1] - fy).abs() < 1e-9);
        assert_eq!(f.d[2], 0.0);
    }
}
