//! Scalar abstraction shared by the scoring and analysis formulas.
//!
//! Every formula in this crate is written once against [`Scalar`] and can be
//! evaluated in `f32`, `f64`, or exactly in [`Rational64`]. The rational
//! instantiation is what the frozen reference values in the tests use, so
//! that "exactly 0.925" means exactly.

use std::fmt::{Debug, Display};

use num_rational::Rational64;
use num_traits::{Num, Signed};

/// Numeric type the scoring and analysis math is generic over.
pub trait Scalar:
    Num + Signed + Copy + PartialOrd + Debug + Display + Send + Sync + 'static
{
    /// Builds `num / den`. Exact for rationals, correctly rounded for floats.
    fn from_ratio(num: i64, den: i64) -> Self;

    /// Largest integer value not greater than `self`.
    fn floor(self) -> Self;

    fn to_f64(self) -> f64;

    /// Nearest representable value. Rationals use a continued-fraction
    /// approximation; `None` for non-finite input.
    fn from_f64(value: f64) -> Option<Self>;

    fn from_u64(value: u64) -> Self {
        Self::from_ratio(value as i64, 1)
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
}

macro_rules! float_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn from_ratio(num: i64, den: i64) -> Self {
                (num as f64 / den as f64) as $t
            }

            fn floor(self) -> Self {
                <$t>::floor(self)
            }

            fn to_f64(self) -> f64 {
                self as f64
            }

            fn from_f64(value: f64) -> Option<Self> {
                value.is_finite().then_some(value as $t)
            }
        }
    };
}

float_scalar!(f32);
float_scalar!(f64);

impl Scalar for Rational64 {
    fn from_ratio(num: i64, den: i64) -> Self {
        Rational64::new(num, den)
    }

    fn floor(self) -> Self {
        Rational64::floor(&self)
    }

    fn to_f64(self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }

    fn from_f64(value: f64) -> Option<Self> {
        Rational64::approximate_float(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_floor_and_ratio() {
        let x = Rational64::from_ratio(7, 2);
        assert_eq!(Scalar::floor(x), Rational64::from_integer(3));
        assert_eq!(
            Scalar::floor(Rational64::from_ratio(-1, 2)),
            Rational64::from_integer(-1)
        );
        assert_eq!(x.to_f64(), 3.5);
    }

    #[test]
    fn float_conversions() {
        assert_eq!(<f64 as Scalar>::from_ratio(3, 10), 0.3);
        assert_eq!(<f32 as Scalar>::from_u64(5), 5.0f32);
        assert!(<f64 as Scalar>::from_f64(f64::NAN).is_none());
        assert_eq!(
            <Rational64 as Scalar>::from_f64(0.25),
            Some(Rational64::new(1, 4))
        );
    }

    #[test]
    fn min_max() {
        assert_eq!(2.0f64.max_of(3.0), 3.0);
        assert_eq!(2.0f64.min_of(3.0), 2.0);
    }
}
