//! Double-double numbers (~106-bit significand) for reference values.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DD {
    pub hi: f64,
    pub lo: f64,
}

const LN2: DD = DD {
    hi: 0.693_147_180_559_945_3,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DD {
    pub const ZERO: DD = DD { hi: 0.0, lo: 0.0 };
    pub const ONE: DD = DD { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        DD { hi: x, lo: 0.0 }
    }

    pub fn from_usize(n: usize) -> Self {
        DD::new(n as f64)
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn norm(hi: f64, lo: f64) -> Self {
        let (h, l) = quick_two_sum(hi, lo);
        DD { hi: h, lo: l }
    }

    /// Multiplication by an exact power of two.
    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        DD {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn exp(self) -> Self {
        if self.hi < -700.0 {
            return DD::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * DD::new(k)).ldexp(-10);
        // Taylor series on |r| < 2^-10 * ln2.
        let mut term = DD::ONE;
        let mut sum = DD::ONE;
        for i in 1..=24 {
            term = term * r / DD::new(i as f64);
            sum = sum + term;
            if term.hi.abs() < 1e-40 {
                break;
            }
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.ldexp(k as i32)
    }

    pub fn ln(self) -> Self {
        assert!(self.hi > 0.0, "ln of non-positive");
        let mut y = DD::new(self.hi.ln());
        for _ in 0..3 {
            y = y + self * (-y).exp() - DD::ONE;
        }
        y
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return DD::ZERO;
        }
        let mut y = DD::new(self.hi.sqrt());
        for _ in 0..2 {
            y = y + (self - y * y) / (y + y);
        }
        y
    }

    pub fn sum<I: IntoIterator<Item = DD>>(it: I) -> DD {
        it.into_iter().fold(DD::ZERO, |a, b| a + b)
    }
}

impl Add for DD {
    type Output = DD;
    fn add(self, o: DD) -> DD {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        DD::norm(s, e + f)
    }
}

impl Neg for DD {
    type Output = DD;
    fn neg(self) -> DD {
        DD {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for DD {
    type Output = DD;
    fn sub(self, o: DD) -> DD {
        self + (-o)
    }
}

impl Mul for DD {
    type Output = DD;
    fn mul(self, o: DD) -> DD {
        let (p, e) = two_prod(self.hi, o.hi);
        DD::norm(p, e + self.hi * o.lo + self.lo * o.hi)
    }
}

impl Div for DD {
    type Output = DD;
    fn div(self, o: DD) -> DD {
        let q1 = self.hi / o.hi;
        let r = self - o * DD::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * DD::new(q2);
        let q3 = r.hi / o.hi;
        let (h, l) = quick_two_sum(q1, q2);
        DD { hi: h, lo: l } + DD::new(q3)
    }
}

/// Softmax of `z / t` evaluated entirely in double-double.
pub fn softmax(z: &[f64], t: f64) -> Vec<f64> {
    let t = DD::new(t);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<DD> = z.iter().map(|&v| ((DD::new(v) - DD::new(max)) / t).exp()).collect();
    let s = DD::sum(e.iter().copied());
    e.into_iter().map(|x| (x / s).to_f64()).collect()
}

#[cfg(test)]
mod tests {
    // Also compiled into harness-less targets, where the tests vanish.
    #[allow(unused_imports)]
    use super::*;

    #[test]
    fn known_constants() {
        let e = DD::ONE.exp();
        assert_eq!(e.hi, std::f64::consts::E);
        assert!((e.lo - 1.445_646_891_729_250_2e-16).abs() < 1e-28);
        let l = DD::new(2.0).ln();
        assert_eq!(l.hi, LN2.hi);
        assert!((l.lo - LN2.lo).abs() < 1e-28);
        let s = DD::new(2.0).sqrt();
        assert_eq!(s.hi, std::f64::consts::SQRT_2);
        assert!(((s * s) - DD::new(2.0)).abs().hi < 1e-28);
    }
}
