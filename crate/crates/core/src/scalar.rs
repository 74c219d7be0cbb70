//! Scalar abstraction shared by every probability computation.
//!
//! Models, verifiers and oracles are generic over [`Scalar`], which is
//! implemented for `f32`, `f64` and exact rationals ([`BigRational`]).
//! Floating types are used for sampling and Monte-Carlo work; rationals let
//! the enumeration oracles check identities with zero rounding error.

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::Ratio;
use num_traits::{FromPrimitive, Num, Signed, ToPrimitive};

/// Exact rational probability.
pub type BigRational = Ratio<BigInt>;

pub trait Scalar:
    Num + Signed + Clone + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    /// Absolute slack allowed when checking that a row sums to one.
    fn norm_tolerance() -> Self;

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(|| panic!("{x} is not representable"))
    }

    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize fits every scalar type")
    }

    /// `(x)_+`
    fn pos_part(self) -> Self {
        if self > Self::zero() {
            self
        } else {
            Self::zero()
        }
    }

    fn min_of(a: Self, b: Self) -> Self {
        if b < a {
            b
        } else {
            a
        }
    }

    fn max_of(a: Self, b: Self) -> Self {
        if b > a {
            b
        } else {
            a
        }
    }

    fn is_exact() -> bool {
        false
    }
}

impl Scalar for f64 {
    fn norm_tolerance() -> Self {
        1e-9
    }
}

impl Scalar for f32 {
    // single precision accumulation over a row cannot hold 1e-9
    fn norm_tolerance() -> Self {
        1e-5
    }
}

impl Scalar for BigRational {
    fn norm_tolerance() -> Self {
        Self::from_integer(BigInt::from(0))
    }

    fn is_exact() -> bool {
        true
    }
}

/// `min{1, num/den}` with `x/0` read as `+inf`.
pub fn clamped_ratio<S: Scalar>(num: &S, den: &S) -> S {
    if *den <= S::zero() || *num >= *den {
        S::one()
    } else {
        num.clone() / den.clone()
    }
}

/// Sum in a fixed left-to-right order.
pub fn ordered_sum<'a, S: Scalar>(xs: impl IntoIterator<Item = &'a S>) -> S {
    xs.into_iter().fold(S::zero(), |acc, x| acc + x.clone())
}
