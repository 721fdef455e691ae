//! Scalar types a [`Graph`](super::Graph) can evaluate in.
//!
//! Training runs in `f64`. The gradient check re-evaluates the same tape in
//! double-double arithmetic ([`Dd`], about 32 significant digits), so a
//! central difference over a step of `1e-5` is not swamped by `f64`
//! rounding of the loss.

use std::cmp::Ordering;
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Double-double scalar: the unevaluated sum `hi + lo` with
/// `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    Dd { hi: s, lo: e }
}

fn fast_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd { hi: p, lo: a.mul_add(b, -p) }
}

impl Dd {
    pub const fn new(hi: f64, lo: f64) -> Self {
        Dd { hi, lo }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn renorm(self) -> Self {
        if !self.hi.is_finite() {
            return Dd { hi: self.hi, lo: 0.0 };
        }
        fast_two_sum(self.hi, self.lo)
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&o.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&o.lo),
            ord => Some(ord),
        }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let s = two_sum(self.hi, b.hi);
        let t = two_sum(self.lo, b.lo);
        let v = fast_two_sum(s.hi, s.lo + t.hi);
        Dd { hi: v.hi, lo: v.lo + t.lo }.renorm()
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + -b
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let p = two_prod(self.hi, b.hi);
        let lo = p.lo + (self.hi * b.lo + self.lo * b.hi);
        Dd { hi: p.hi, lo }.renorm()
    }
}

impl Div for Dd {
    type Output = Dd;
    // long division, one f64 quotient digit at a time
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        if !q1.is_finite() {
            return Dd::from(q1);
        }
        let r = self - b * Dd::from(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::from(q2);
        let q3 = r.hi / b.hi;
        let q = fast_two_sum(q1, q2);
        q + Dd::from(q3)
    }
}

impl AddAssign for Dd {
    fn add_assign(&mut self, b: Dd) {
        *self = *self + b;
    }
}

macro_rules! with_f64 {
    ($($tr:ident $f:ident),*) => {$(
        impl $tr<f64> for Dd {
            type Output = Dd;
            fn $f(self, b: f64) -> Dd {
                $tr::$f(self, Dd::from(b))
            }
        }
    )*};
}
with_f64!(Add add, Sub sub, Mul mul, Div div);

const LN_2: Dd = Dd::new(std::f64::consts::LN_2, 2.3190468138462996e-17);
const FRAC_PI_2: Dd = Dd::new(std::f64::consts::FRAC_PI_2, 6.123233995736766e-17);
#[cfg(test)]
const TAU: Dd = Dd::new(std::f64::consts::TAU, 2.4492935982947064e-16);

pub trait Real:
    Copy
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn tanh(self) -> Self;
    fn atan2(self, x: Self) -> Self;
    fn floor(self) -> Self;

    fn abs(self) -> Self {
        if self < Self::from_f64(0.0) {
            -self
        } else {
            self
        }
    }

    fn is_finite(self) -> bool {
        self.to_f64().is_finite()
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
    fn floor(self) -> Self {
        f64::floor(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

fn dd(x: f64) -> Dd {
    Dd::from(x)
}

fn dd_exp(x: Dd) -> Dd {
    let hi = x.hi();
    if hi.is_nan() {
        return x;
    }
    if hi > 709.0 {
        return dd(f64::INFINITY);
    }
    if hi < -745.0 {
        return dd(0.0);
    }
    // x = k ln 2 + r, then exp(r) = exp(r / 256)^256
    let k = (hi / std::f64::consts::LN_2).round();
    let r = (x - LN_2 * k) / 256.0;
    let mut term = dd(1.0);
    let mut sum = dd(1.0);
    for n in 1..14 {
        term = term * r / n as f64;
        sum += term;
    }
    for _ in 0..8 {
        sum = sum * sum;
    }
    sum * 2f64.powi(k as i32)
}

fn dd_ln(x: Dd) -> Dd {
    let hi = x.hi();
    if hi.is_nan() || hi <= 0.0 || hi.is_infinite() {
        return dd(hi.ln());
    }
    let mut y = dd(hi.ln());
    for _ in 0..2 {
        y = y + x * dd_exp(-y) - 1.0;
    }
    y
}

/// `(sin r, cos r)` for `|r| ≤ π/4`.
fn sin_cos_reduced(r: Dd) -> (Dd, Dd) {
    let r2 = r * r;
    let mut s = r;
    let mut c = dd(1.0);
    let mut ts = r;
    let mut tc = dd(1.0);
    for n in 1..16 {
        let m = 2.0 * n as f64;
        tc = -tc * r2 / ((m - 1.0) * m);
        ts = -ts * r2 / (m * (m + 1.0));
        c += tc;
        s += ts;
    }
    (s, c)
}

fn dd_sin_cos(x: Dd) -> (Dd, Dd) {
    let k = (x.hi() / std::f64::consts::FRAC_PI_2).round();
    let r = x - FRAC_PI_2 * k;
    let (s, c) = sin_cos_reduced(r);
    match (k as i64).rem_euclid(4) {
        0 => (s, c),
        1 => (c, -s),
        2 => (-s, -c),
        _ => (-c, s),
    }
}

impl Real for Dd {
    fn from_f64(x: f64) -> Self {
        dd(x)
    }
    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
    fn sin(self) -> Self {
        dd_sin_cos(self).0
    }
    fn cos(self) -> Self {
        dd_sin_cos(self).1
    }
    fn exp(self) -> Self {
        dd_exp(self)
    }
    fn ln_1p(self) -> Self {
        dd_ln(self + 1.0)
    }
    fn tanh(self) -> Self {
        let a = Real::abs(self);
        let t = if a.hi() > 40.0 {
            dd(1.0)
        } else {
            let e = dd_exp(a * 2.0);
            (e - 1.0) / (e + 1.0)
        };
        if self.hi() < 0.0 {
            -t
        } else {
            t
        }
    }
    fn atan2(self, x: Self) -> Self {
        let y = self;
        if y.hi() == 0.0 && x.hi() == 0.0 {
            return dd(y.hi().atan2(x.hi()));
        }
        // one Newton step from the f64 angle; the error is cubic in the
        // f64 error
        let theta = dd(y.hi().atan2(x.hi()));
        let (s, c) = dd_sin_cos(theta);
        theta + (y * c - x * s) / (x * c + y * s)
    }
    fn floor(self) -> Self {
        let h = self.hi.floor();
        if h == self.hi {
            two_sum(h, self.lo.floor())
        } else {
            Dd::from(h)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Dd, b: Dd, tol: f64) -> bool {
        let d = (a - b).hi().abs();
        d <= tol * b.hi().abs().max(1.0)
    }

    #[test]
    fn arithmetic_is_double_double_accurate() {
        let third = dd(1.0) / dd(3.0);
        assert!((third * 3.0 - 1.0).hi().abs() < 1e-31);
        let x = dd(0.1) + dd(1e-18);
        assert!(((x * x) / x - x).hi().abs() < 1e-32);
        assert!(dd(2.0) + dd(-1e-20) < dd(2.0));
        assert_eq!((dd(3.0) - dd(1e-20)).floor(), dd(2.0));
    }

    #[test]
    fn double_double_identities() {
        for i in 0..400 {
            let x = dd(-7.0 + i as f64 * 0.035) + dd(1.3e-19);
            let (s, c) = (Real::sin(x), Real::cos(x));
            assert!(close(s * s + c * c, dd(1.0), 1e-28), "pythagoras at {x:?}");
            assert!(close(Real::ln_1p(Real::exp(x) - 1.0), x, 1e-28), "log of exp at {x:?}");
            assert!(close(Real::exp(x) * Real::exp(-x), dd(1.0), 1e-28), "exp at {x:?}");
            let back = Real::atan2(s, c);
            let wrapped = x - TAU * ((x.hi() + std::f64::consts::PI) / std::f64::consts::TAU).floor();
            if (wrapped.hi().abs() - std::f64::consts::PI).abs() > 1e-9 {
                assert!(close(back, wrapped, 1e-28), "atan2 at {x:?}");
            }
            let e2 = Real::exp(x * 2.0);
            assert!(
                close(Real::tanh(x), (e2 - 1.0) / (e2 + 1.0), 1e-28),
                "tanh at {x:?}: {:?}",
                Real::tanh(x) - (e2 - 1.0) / (e2 + 1.0)
            );
        }
    }

    #[test]
    fn agrees_with_f64_to_f64_precision() {
        for i in 0..200 {
            let x = -5.0 + i as f64 * 0.05;
            let d = dd(x);
            assert!((Real::sin(d).to_f64() - x.sin()).abs() < 1e-15);
            assert!((Real::exp(d).to_f64() - x.exp()).abs() < 1e-15 * x.exp());
            assert!((Real::tanh(d).to_f64() - x.tanh()).abs() < 1e-15);
            assert!((Real::atan2(d, dd(0.7)).to_f64() - x.atan2(0.7)).abs() < 1e-15);
        }
        // a central difference in double-double is accurate far below f64
        // rounding
        let (x, h) = (dd(0.9), 1e-5);
        let fd = (Real::sin(x + h) - Real::sin(x - h)) / (2.0 * h);
        let exact = Real::cos(x) * (dd(1.0) - dd(h) * h / 6.0);
        assert!((fd - exact).hi().abs() < 1e-20, "{:?}", fd - exact);
    }
}
