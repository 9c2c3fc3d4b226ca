//! C¹ scalar functions of time with derivative propagation.
//!
//! Synthesized gains are compositions of closed-form pieces (ramps, powers of
//! the decay profile, envelope values) and cubic interpolants. Both kinds are
//! wrapped behind [`TimeFunction`], which answers value and derivative
//! queries; composition happens through [`Dual`] arithmetic so derivatives
//! stay exact through every formula.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::fmath;

/// Value/derivative pair with forward-mode arithmetic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub const fn new(v: f64, d: f64) -> Self {
        Dual { v, d }
    }

    pub const fn constant(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }

    pub fn powi(self, k: u32) -> Dual {
        if k == 0 {
            return Dual::constant(1.0);
        }
        Dual {
            v: fmath::powi(self.v, k),
            d: k as f64 * fmath::powi(self.v, k - 1) * self.d,
        }
    }

    pub fn exp(self) -> Dual {
        let e = fmath::exp(self.v);
        Dual { v: e, d: e * self.d }
    }

    pub fn sqrt(self) -> Dual {
        let s = fmath::sqrt(self.v);
        Dual { v: s, d: self.d / (2.0 * s) }
    }

    pub fn recip(self) -> Dual {
        Dual { v: 1.0 / self.v, d: -self.d / (self.v * self.v) }
    }

    pub fn is_finite(self) -> bool {
        self.v.is_finite() && self.d.is_finite()
    }
}

impl core::ops::Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}

impl core::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}

impl core::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}

impl core::ops::Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual { v: self.v / o.v, d: (self.d * o.v - self.v * o.d) / (o.v * o.v) }
    }
}

impl core::ops::Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, c: f64) -> Dual {
        Dual { v: self.v * c, d: self.d * c }
    }
}

impl core::ops::Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { v: -self.v, d: -self.d }
    }
}

/// Shareable C¹ scalar function of time.
#[derive(Clone)]
pub struct TimeFunction(Arc<dyn Fn(f64) -> Dual + Send + Sync>);

impl core::fmt::Debug for TimeFunction {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "TimeFunction")
    }
}

impl TimeFunction {
    pub fn new(f: impl Fn(f64) -> Dual + Send + Sync + 'static) -> Self {
        TimeFunction(Arc::new(f))
    }

    pub fn constant(c: f64) -> Self {
        TimeFunction::new(move |_| Dual::constant(c))
    }

    pub fn dual(&self, t: f64) -> Dual {
        (self.0)(t)
    }

    pub fn value(&self, t: f64) -> f64 {
        self.dual(t).v
    }

    pub fn deriv(&self, t: f64) -> f64 {
        self.dual(t).d
    }

    pub fn from_pchip(spline: Pchip) -> Self {
        TimeFunction::new(move |t| spline.dual(t))
    }

    /// Pointwise finite-ness over a validation grid.
    pub fn finite_on(&self, t0: f64, t1: f64, samples: usize) -> bool {
        let n = samples.max(2);
        (0..n).all(|i| {
            let t = t0 + (t1 - t0) * i as f64 / (n - 1) as f64;
            self.dual(t).is_finite()
        })
    }
}

/// C¹ ramp from 0 at `a` to 1 at `b` (cubic `3u² − 2u³`; endpoint slopes 0).
/// Degenerate windows (width at or below time resolution) fall back to a
/// step, which is how sub-resolution transition intervals behave in f64
/// anyway.
pub fn ramp01(a: f64, b: f64) -> TimeFunction {
    TimeFunction::new(move |t| ramp01_dual(a, b, t))
}

pub fn ramp01_dual(a: f64, b: f64, t: f64) -> Dual {
    if t <= a {
        return Dual::constant(0.0);
    }
    if t >= b || b - a <= f64::EPSILON * fmath::abs(a).max(1.0) {
        return Dual::constant(1.0);
    }
    let w = b - a;
    let u = (t - a) / w;
    Dual { v: u * u * (3.0 - 2.0 * u), d: 6.0 * u * (1.0 - u) / w }
}

/// Transition profile that is 0 at `t0` and 1 from `t0 + tau/2` on, with zero
/// slope at both ends.
pub fn smoothstep(t0: f64, tau: f64) -> TimeFunction {
    assert!(tau > 0.0, "transition width must be positive");
    ramp01(t0, t0 + tau / 2.0)
}

/// Monotonicity-preserving cubic Hermite interpolant (Fritsch-Carlson
/// slopes). C¹ on `[knots.first(), knots.last()]`; evaluation clamps to the
/// domain with the boundary value and zero slope outside.
#[derive(Clone, Debug)]
pub struct Pchip {
    knots: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl Pchip {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(knots.len(), values.len());
        assert!(knots.len() >= 2, "need at least two knots");
        assert!(
            knots.windows(2).all(|w| w[1] > w[0]),
            "knots must be strictly increasing"
        );
        let n = knots.len();
        let mut delta = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            delta.push((values[i + 1] - values[i]) / (knots[i + 1] - knots[i]));
        }
        let mut slopes = alloc::vec![0.0; n];
        slopes[0] = delta[0];
        slopes[n - 1] = delta[n - 2];
        for i in 1..n - 1 {
            if delta[i - 1] * delta[i] <= 0.0 {
                slopes[i] = 0.0;
            } else {
                // weighted harmonic mean keeps the interpolant monotone
                let h0 = knots[i] - knots[i - 1];
                let h1 = knots[i + 1] - knots[i];
                let w1 = 2.0 * h1 + h0;
                let w2 = h1 + 2.0 * h0;
                slopes[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        // clamp endpoint slopes (Fritsch-Carlson boundary rule)
        for (i, edge) in [(0usize, 0usize), (n - 1, n - 2)] {
            if delta[edge] == 0.0 {
                slopes[i] = 0.0;
            } else if slopes[i] / delta[edge] < 0.0 {
                slopes[i] = 0.0;
            } else if fmath::abs(slopes[i]) > 3.0 * fmath::abs(delta[edge]) {
                slopes[i] = 3.0 * delta[edge];
            }
        }
        Pchip { knots, values, slopes }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    /// Hermite interpolant with explicitly supplied slopes (used to rebuild a
    /// serialized spline exactly).
    pub fn with_slopes(knots: Vec<f64>, values: Vec<f64>, slopes: Vec<f64>) -> Self {
        assert_eq!(knots.len(), values.len());
        assert_eq!(knots.len(), slopes.len());
        assert!(knots.len() >= 2 && knots.windows(2).all(|w| w[1] > w[0]));
        Pchip { knots, values, slopes }
    }

    pub fn dual(&self, t: f64) -> Dual {
        let n = self.knots.len();
        if t <= self.knots[0] {
            return Dual::new(self.values[0], 0.0);
        }
        if t >= self.knots[n - 1] {
            return Dual::new(self.values[n - 1], 0.0);
        }
        let mut lo = 0;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let h = self.knots[lo + 1] - self.knots[lo];
        let u = (t - self.knots[lo]) / h;
        let (y0, y1) = (self.values[lo], self.values[lo + 1]);
        let (m0, m1) = (self.slopes[lo] * h, self.slopes[lo + 1] * h);
        let u2 = u * u;
        let u3 = u2 * u;
        let v = (2.0 * u3 - 3.0 * u2 + 1.0) * y0
            + (u3 - 2.0 * u2 + u) * m0
            + (-2.0 * u3 + 3.0 * u2) * y1
            + (u3 - u2) * m1;
        let dv = ((6.0 * u2 - 6.0 * u) * y0
            + (3.0 * u2 - 4.0 * u + 1.0) * m0
            + (-6.0 * u2 + 6.0 * u) * y1
            + (3.0 * u2 - 2.0 * u) * m1)
            / h;
        Dual::new(v, dv)
    }
}

/// Uniform grid of `count ≥ 2` points covering `[t0, t1]`.
pub fn linspace(t0: f64, t1: f64, count: usize) -> Vec<f64> {
    let n = count.max(2);
    (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_arithmetic_chain_rule() {
        // f(t) = t² * exp(-t): f'(t) = (2t - t²) e^{-t}
        let t = 1.3;
        let x = Dual::new(t, 1.0);
        let f = x.powi(2) * (-x).exp();
        let expected_v = t * t * fmath::exp(-t);
        let expected_d = (2.0 * t - t * t) * fmath::exp(-t);
        assert!((f.v - expected_v).abs() < 1e-14);
        assert!((f.d - expected_d).abs() < 1e-14);
    }

    #[test]
    fn ramp_endpoints_and_midpoint() {
        let r = ramp01(2.0, 4.0);
        assert_eq!(r.value(2.0), 0.0);
        assert_eq!(r.deriv(2.0), 0.0);
        assert_eq!(r.value(4.0), 1.0);
        assert_eq!(r.deriv(4.0), 0.0);
        assert!((r.value(3.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn smoothstep_reaches_one_at_half_width() {
        let th = smoothstep(1.0, 0.8);
        assert_eq!(th.value(1.0), 0.0);
        assert_eq!(th.deriv(1.0), 0.0);
        assert_eq!(th.value(1.4), 1.0);
        // cubic midpoint symmetry
        assert!((th.value(1.2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sub_resolution_window_degrades_to_step() {
        let r = ramp01(10.0, 10.0 + 1e-30);
        assert_eq!(r.value(10.0), 0.0);
        assert_eq!(r.value(f64::from_bits(10.0f64.to_bits() + 1)), 1.0);
    }

    #[test]
    fn pchip_interpolates_and_is_monotone() {
        let s = Pchip::new(
            alloc::vec![0.0, 1.0, 2.0, 3.0],
            alloc::vec![0.0, 0.2, 0.9, 1.0],
        );
        for (i, &k) in s.knots().iter().enumerate() {
            assert!((s.dual(k).v - s.values()[i]).abs() < 1e-15);
        }
        let mut prev = -1.0;
        for i in 0..=300 {
            let t = 3.0 * i as f64 / 300.0;
            let v = s.dual(t).v;
            assert!(v >= prev - 1e-12, "not monotone at t={t}");
            prev = v;
        }
    }

    #[test]
    fn pchip_derivative_matches_finite_differences() {
        let s = Pchip::new(
            alloc::vec![0.0, 0.7, 1.9, 3.0, 4.5],
            alloc::vec![1.0, 1.4, 0.9, 0.95, 2.0],
        );
        let h = 1e-6;
        for i in 1..40 {
            let t = 0.05 + 4.3 * i as f64 / 40.0;
            let fd = (s.dual(t + h).v - s.dual(t - h).v) / (2.0 * h);
            assert!((s.dual(t).d - fd).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn pchip_no_overshoot_below_data_range() {
        let s = Pchip::new(alloc::vec![0.0, 1.0, 2.0], alloc::vec![1.0, 0.1, 0.5]);
        for i in 0..=200 {
            let t = 2.0 * i as f64 / 200.0;
            assert!(s.dual(t).v >= 0.1 - 1e-12);
        }
    }
}
