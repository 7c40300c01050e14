use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;

/// First-order forward-mode number `re + eps * e` with `e^2 = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T> {
    pub re: T,
    pub eps: T,
}

impl<T> Dual<T> {
    #[inline]
    pub fn new(re: T, eps: T) -> Self {
        Dual { re, eps }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let re = self.re / o.re;
        Dual::new(re, (self.eps - re * o.eps) / o.re)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.eps)
    }
}

impl<T: Scalar> Add<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, c: f64) -> Self {
        Dual::new(self.re + c, self.eps)
    }
}

impl<T: Scalar> Sub<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, c: f64) -> Self {
        Dual::new(self.re - c, self.eps)
    }
}

impl<T: Scalar> Mul<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, c: f64) -> Self {
        Dual::new(self.re * c, self.eps * c)
    }
}

impl<T: Scalar> Div<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, c: f64) -> Self {
        Dual::new(self.re / c, self.eps / c)
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    type Base = T::Base;

    #[inline]
    fn constant(c: f64) -> Self {
        Dual::new(T::constant(c), T::zero())
    }

    #[inline]
    fn from_base(b: T::Base) -> Self {
        Dual::new(T::from_base(b), T::zero())
    }

    #[inline]
    fn value(&self) -> f64 {
        self.re.value()
    }

    #[inline]
    fn mul_base(self, b: T::Base) -> Self {
        Dual::new(self.re.mul_base(b), self.eps.mul_base(b))
    }

    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.eps * (-(t * t) + 1.0))
    }

    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        if s.value() == 0.0 {
            Dual::new(s, T::zero())
        } else {
            Dual::new(s, self.eps / (s * 2.0))
        }
    }

    fn abs(self) -> Self {
        let v = self.re.value();
        if v > 0.0 {
            self
        } else if v < 0.0 {
            -self
        } else {
            Dual::new(self.re.abs(), T::zero())
        }
    }

    fn linear(weights: &[T::Base], bias: Option<&[T::Base]>, inputs: &[Self], out_dim: usize, out: &mut Vec<Self>) {
        let re_in: Vec<T> = inputs.iter().map(|d| d.re).collect();
        let eps_in: Vec<T> = inputs.iter().map(|d| d.eps).collect();
        let mut re_out = Vec::with_capacity(out_dim);
        let mut eps_out = Vec::with_capacity(out_dim);
        T::linear(weights, bias, &re_in, out_dim, &mut re_out);
        T::linear(weights, None, &eps_in, out_dim, &mut eps_out);
        out.extend(re_out.into_iter().zip(eps_out).map(|(re, eps)| Dual::new(re, eps)));
    }
}
