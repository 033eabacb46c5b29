//! Scalar abstraction shared by the numerical kernels.

use nalgebra::RealField;
use num_complex::Complex;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating point type usable by the model, norm and solver layers.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Default {
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Complex scalar over a [`Real`].
pub type Cx<T> = Complex<T>;

pub fn cx<T: Real>(re: T, im: T) -> Cx<T> {
    Complex::new(re, im)
}

pub fn cre<T: Real>(re: T) -> Cx<T> {
    Complex::new(re, T::zero())
}

pub fn imag_unit<T: Real>() -> Cx<T> {
    Complex::new(T::zero(), T::one())
}

/// `e^{i theta}` for a real angle.
pub fn cexp_i<T: Real>(theta: T) -> Cx<T> {
    Complex::new(theta.cos(), theta.sin())
}

/// `e^{w}` for a complex argument.
pub fn cexp<T: Real>(w: Cx<T>) -> Cx<T> {
    cexp_i(w.im).scale(w.re.exp())
}

pub fn cabs<T: Real>(z: Cx<T>) -> T {
    z.norm_sqr().sqrt()
}

/// Integer power by repeated squaring.
pub fn cpow<T: Real>(mut base: Cx<T>, mut e: u32) -> Cx<T> {
    let mut acc = cre(T::one());
    while e > 0 {
        if e & 1 == 1 {
            acc *= base;
        }
        base = base * base;
        e >>= 1;
    }
    acc
}
