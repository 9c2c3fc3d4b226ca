//! Float math shims. Everything routes through `libm` so the crate computes
//! the same bits with or without `std`.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn hypot(x: f64, y: f64) -> f64 {
    libm::hypot(x, y)
}

#[inline]
pub fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Integer power by binary exponentiation. Deterministic and exact for the
/// small exponents used by the odd-power couplings.
#[inline]
pub fn powi(x: f64, mut k: u32) -> f64 {
    let mut base = x;
    let mut acc = 1.0;
    while k > 0 {
        if k & 1 == 1 {
            acc *= base;
        }
        base *= base;
        k >>= 1;
    }
    acc
}

/// `x^p` for real `p ≥ 0` (used only where exponents are known nonnegative).
#[inline]
pub fn powf(x: f64, p: f64) -> f64 {
    libm::pow(x, p)
}

#[inline]
pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

#[inline]
pub fn is_finite(x: f64) -> bool {
    x.is_finite()
}

pub fn norm2(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in v {
        s += x * x;
    }
    sqrt(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn powi_matches_repeated_multiplication() {
        assert_eq!(powi(2.0, 0), 1.0);
        assert_eq!(powi(2.0, 3), 8.0);
        assert_eq!(powi(-3.0, 2), 9.0);
        assert_eq!(powi(-3.0, 3), -27.0);
        assert!((powi(1.1, 7) - 1.1f64.powi(7)).abs() < 1e-12);
    }

    #[test]
    fn signum_at_zero_is_zero() {
        assert_eq!(signum0(0.0), 0.0);
        assert_eq!(signum0(-2.0), -1.0);
        assert_eq!(signum0(0.5), 1.0);
    }

    #[test]
    fn norm2_basic() {
        assert!((norm2(&[3.0, 4.0]) - 5.0).abs() < 1e-15);
    }
}
