//! Scalar abstraction for the path-inversion layer.
//!
//! Inversion only needs field arithmetic and ordering, so it runs unchanged on
//! `f64` and on exact rationals. The rational instance is what makes the flat-set
//! and slope invariants checkable bit for bit.

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Num, Signed, ToPrimitive};

pub trait Scalar:
    Num + Signed + Clone + PartialOrd + Debug + FromPrimitive + ToPrimitive + Send + Sync
{
    /// Exact conversion from a finite `f64`.
    fn from_f64_exact(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64")
    }

    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn max_of(a: Self, b: Self) -> Self {
        if a >= b {
            a
        } else {
            b
        }
    }

    fn min_of(a: Self, b: Self) -> Self {
        if a <= b {
            a
        } else {
            b
        }
    }

    fn positive_part(self) -> Self {
        if self > Self::zero() {
            self
        } else {
            Self::zero()
        }
    }
}

impl Scalar for f64 {}

impl Scalar for BigRational {
    fn from_f64_exact(v: f64) -> Self {
        BigRational::from_float(v).expect("finite f64")
    }
}

pub type Exact = BigRational;

pub fn exact_int(n: i64) -> Exact {
    BigRational::from_integer(BigInt::from(n))
}
