//! The triangular plant and its factorization machinery.
//!
//! State equations (`n` states, `y = x1` measured):
//!
//! ```text
//! x1' = f1(t, x1)          + a1(t, x1) x2^m1
//! x2' = f2(t, x1, x2)      + a2(t, x1) x3^m2
//! ...
//! xn' = fn(t, x1, ..., xn)
//! ```
//!
//! with every `m_i` an odd positive integer and every `a_i` strictly
//! positive. `eval_output_form` substitutes the measured output for `x1`
//! in all drift and coupling terms, which makes the field independent of the
//! first state component; the difference of two such evaluations factors as
//! `A(t, q, x, e, y) e` with a lower-triangular `q` part and the
//! divided-difference polynomials `b_m` on the superdiagonal.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::expr::{FieldError, ScalarField};
use crate::fmath;
use crate::linalg::Mat;

#[derive(Clone, Debug, PartialEq)]
pub enum SystemError {
    Dimension(String),
    EvenPower { index: usize, value: u32 },
    Field(FieldError),
    /// A coupling coefficient was non-positive on the sampled range. The
    /// construction assumes strictly positive coefficients; a sign flip of
    /// the corresponding state restores that.
    NonPositiveCoupling { index: usize, t: f64, y: f64, value: f64 },
    CompletenessBoundBelowIdentity { t: f64, s: f64, value: f64 },
    QuadratureDidNotConverge { row: usize, col: usize, residual: f64 },
}

impl core::fmt::Display for SystemError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SystemError::Dimension(msg) => write!(f, "{msg}"),
            SystemError::EvenPower { index, value } => {
                write!(f, "power m{} = {} must be an odd positive integer", index + 1, value)
            }
            SystemError::Field(e) => write!(f, "{e}"),
            SystemError::NonPositiveCoupling { index, t, y, value } => write!(
                f,
                "coupling a{}(t={t}, y={y}) = {value} is not strictly positive; \
                 the design requires a_i > 0 — substitute x{} -> -x{} in the model \
                 to flip the sign and try again",
                index + 1,
                index + 2,
                index + 2
            ),
            SystemError::CompletenessBoundBelowIdentity { t, s, value } => write!(
                f,
                "completeness bound beta(t={t}, s={s}) = {value} is below s; \
                 any valid bound must dominate the initial norm"
            ),
            SystemError::QuadratureDidNotConverge { row, col, residual } => write!(
                f,
                "factor quadrature for q[{row}][{col}] did not converge (residual {residual})"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SystemError {}

impl From<FieldError> for SystemError {
    fn from(e: FieldError) -> Self {
        SystemError::Field(e)
    }
}

/// The plant. Immutable after validation; shareable across workers.
#[derive(Clone, Debug)]
pub struct TriangularSystem {
    n: usize,
    m: Vec<u32>,
    f: Vec<ScalarField>,
    a: Vec<ScalarField>,
    beta: ScalarField,
}

impl TriangularSystem {
    /// Validate shapes, arities and odd powers. Positivity of the couplings
    /// and the completeness bound are range-dependent and checked separately
    /// by [`TriangularSystem::validate_on_range`].
    pub fn new(
        m: Vec<u32>,
        f: Vec<ScalarField>,
        a: Vec<ScalarField>,
        beta: ScalarField,
    ) -> Result<Self, SystemError> {
        let n = f.len();
        if n < 2 {
            return Err(SystemError::Dimension(format!("need at least 2 states, got {n}")));
        }
        if m.len() != n - 1 {
            return Err(SystemError::Dimension(format!(
                "need {} powers for {} states, got {}",
                n - 1,
                n,
                m.len()
            )));
        }
        if a.len() != n - 1 {
            return Err(SystemError::Dimension(format!(
                "need {} coupling coefficients for {} states, got {}",
                n - 1,
                n,
                a.len()
            )));
        }
        for (i, &mi) in m.iter().enumerate() {
            if mi == 0 || mi % 2 == 0 {
                return Err(SystemError::EvenPower { index: i, value: mi });
            }
        }
        for (i, fi) in f.iter().enumerate() {
            if fi.arity() != i + 2 {
                return Err(SystemError::Dimension(format!(
                    "f{} must take (t, x1..x{}), got arity {}",
                    i + 1,
                    i + 1,
                    fi.arity()
                )));
            }
        }
        for (i, ai) in a.iter().enumerate() {
            if ai.arity() != 2 {
                return Err(SystemError::Dimension(format!(
                    "a{} must take (t, x1), got arity {}",
                    i + 1,
                    ai.arity()
                )));
            }
        }
        if beta.arity() != 2 {
            return Err(SystemError::Dimension(format!(
                "beta must take (t, s), got arity {}",
                beta.arity()
            )));
        }
        Ok(TriangularSystem { n, m, f, a, beta })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn powers(&self) -> &[u32] {
        &self.m
    }

    /// `ell = n(n+1)/2`, the length of the packed lower-triangular factor.
    pub fn ell(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    pub fn drift(&self, i: usize) -> &ScalarField {
        &self.f[i]
    }

    pub fn coupling(&self, i: usize) -> &ScalarField {
        &self.a[i]
    }

    pub fn beta_field(&self) -> &ScalarField {
        &self.beta
    }

    pub fn beta(&self, t: f64, s: f64) -> Result<f64, SystemError> {
        Ok(self.beta.eval(&[t, s])?)
    }

    pub fn coupling_at(&self, i: usize, t: f64, y: f64) -> Result<f64, SystemError> {
        Ok(self.a[i].eval(&[t, y])?)
    }

    /// Check coupling positivity and the completeness bound identity
    /// `beta(t, s) >= s` on sampled grids over the scenario's range.
    pub fn validate_on_range(
        &self,
        t_range: (f64, f64),
        y_range: (f64, f64),
        s_max: f64,
        grid: usize,
    ) -> Result<(), SystemError> {
        let g = grid.max(3);
        for gi in 0..g {
            let t = t_range.0 + (t_range.1 - t_range.0) * gi as f64 / (g - 1) as f64;
            for gj in 0..g {
                let y = y_range.0 + (y_range.1 - y_range.0) * gj as f64 / (g - 1) as f64;
                for (i, ai) in self.a.iter().enumerate() {
                    let v = ai.eval(&[t, y])?;
                    if !(v > 0.0) {
                        return Err(SystemError::NonPositiveCoupling { index: i, t, y, value: v });
                    }
                }
                let s = s_max * gj as f64 / (g - 1) as f64;
                let b = self.beta.eval(&[t, s])?;
                if b < s - 1e-12 * (1.0 + s) {
                    return Err(SystemError::CompletenessBoundBelowIdentity { t, s, value: b });
                }
            }
        }
        Ok(())
    }

    /// Plant right-hand side.
    pub fn eval_plant_rhs(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, SystemError> {
        debug_assert_eq!(x.len(), self.n);
        let mut args = Vec::with_capacity(self.n + 1);
        let mut dx = vec![0.0; self.n];
        for i in 0..self.n {
            args.clear();
            args.push(t);
            args.extend_from_slice(&x[..=i]);
            let mut v = self.f[i].eval(&args)?;
            if i + 1 < self.n {
                let ai = self.a[i].eval(&[t, x[0]])?;
                v += ai * fmath::powi(x[i + 1], self.m[i]);
            }
            dx[i] = v;
        }
        Ok(dx)
    }

    /// Output-substituted field: every occurrence of the first state in the
    /// drift and coupling terms is replaced by the measured output `y`, so
    /// the result does not depend on `x[0]`.
    pub fn eval_output_form(&self, t: f64, x: &[f64], y: f64) -> Result<Vec<f64>, SystemError> {
        debug_assert_eq!(x.len(), self.n);
        let mut args = Vec::with_capacity(self.n + 1);
        let mut dx = vec![0.0; self.n];
        for i in 0..self.n {
            args.clear();
            args.push(t);
            args.push(y);
            if i >= 1 {
                args.extend_from_slice(&x[1..=i]);
            }
            let mut v = self.f[i].eval(&args)?;
            if i + 1 < self.n {
                let ai = self.a[i].eval(&[t, y])?;
                v += ai * fmath::powi(x[i + 1], self.m[i]);
            }
            dx[i] = v;
        }
        Ok(dx)
    }
}

/// Divided-difference polynomial of the power map:
/// `b_m(alpha, beta) = sum_{j=0}^{m-1} alpha^{m-1-j} (alpha - beta)^j`,
/// so that `b_m(x, x - z) (x - z) = x^m - z^m`.
pub fn eval_b(m: u32, alpha: f64, beta_arg: f64) -> f64 {
    debug_assert!(m % 2 == 1 && m >= 1);
    let diff = alpha - beta_arg;
    let mut acc = 0.0;
    let mut diff_pow = 1.0;
    for j in 0..m {
        acc += fmath::powi(alpha, m - 1 - j) * diff_pow;
        diff_pow *= diff;
    }
    acc
}

/// Certified positive lower bound for `b_m` on the unit circle.
///
/// A dense angular grid is scanned and the result is reduced by
/// `(arc length) * max |db/dtheta| / grid`, so it stays a valid lower bound
/// for the continuous minimum. Smaller values only enlarge downstream gains,
/// never break them.
pub fn vartheta(m: u32, grid: usize) -> f64 {
    assert!(m % 2 == 1 && m >= 1, "power must be odd");
    assert!(grid >= 10_000, "need at least 1e4 circle samples");
    if m == 1 {
        return 1.0;
    }
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut min_b = f64::INFINITY;
    let mut max_slope = 0.0f64;
    for k in 0..grid {
        let th = two_pi * k as f64 / grid as f64;
        let (s, c) = (fmath::sin(th), fmath::cos(th));
        let b = eval_b(m, c, s);
        if b < min_b {
            min_b = b;
        }
        // db/dtheta = -sin * db/dalpha + cos * db/dbeta
        let (dba, dbb) = b_partials(m, c, s);
        let slope = fmath::abs(-s * dba + c * dbb);
        if slope > max_slope {
            max_slope = slope;
        }
    }
    let margin = two_pi * max_slope / grid as f64;
    let value = min_b - margin;
    assert!(
        value > 0.0,
        "lower bound for b_{m} on the circle came out non-positive ({value}); \
         this contradicts positivity of b for odd powers"
    );
    value
}

fn b_partials(m: u32, alpha: f64, beta_arg: f64) -> (f64, f64) {
    let diff = alpha - beta_arg;
    let mut da = 0.0;
    let mut db = 0.0;
    for j in 0..m {
        let p = m - 1 - j;
        let term_da = if p > 0 {
            p as f64 * fmath::powi(alpha, p - 1) * fmath::powi(diff, j)
        } else {
            0.0
        };
        let chain = if j > 0 {
            j as f64 * fmath::powi(alpha, p) * fmath::powi(diff, j - 1)
        } else {
            0.0
        };
        da += term_da + chain;
        db -= chain;
    }
    (da, db)
}

/// Packed lower-triangular factor coefficients `q[i][j]`, `0 <= j <= i < n`,
/// with the first column identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorCoeffs {
    q: Vec<Vec<f64>>,
}

impl FactorCoeffs {
    pub fn zeros(n: usize) -> Self {
        FactorCoeffs { q: (0..n).map(|i| vec![0.0; i + 1]).collect() }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.q[i][j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(j > 0 || v == 0.0, "first column is identically zero");
        self.q[i][j] = v;
    }

    /// Euclidean norm of the packed coefficients.
    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        for row in &self.q {
            for v in row {
                s += v * v;
            }
        }
        fmath::sqrt(s)
    }
}

/// Assemble the factor matrix: lower triangle from `q`, superdiagonal
/// `a_i(t, y) b_{m_i}(x_{i+1}, e_{i+1})`, zero elsewhere.
pub fn eval_a_matrix(
    sys: &TriangularSystem,
    t: f64,
    q: &FactorCoeffs,
    x: &[f64],
    e: &[f64],
    y: f64,
) -> Result<Mat, SystemError> {
    let n = sys.dim();
    debug_assert_eq!(q.dim(), n);
    debug_assert_eq!(x.len(), n);
    debug_assert_eq!(e.len(), n);
    let mut a = Mat::zeros(n);
    for i in 0..n {
        for j in 0..=i {
            a[(i, j)] = q.get(i, j);
        }
        if i + 1 < n {
            let ai = sys.coupling_at(i, t, y)?;
            a[(i, i + 1)] = ai * eval_b(sys.powers()[i], x[i + 1], e[i + 1]);
        }
    }
    Ok(a)
}

/// Mean-value factor coefficients: for `j >= 1` (0-based),
/// `q[i][j] = ∫_0^1 ∂f_i/∂x_{j+1}(t, y, z + τ(x - z)) dτ`,
/// evaluated by adaptive Simpson quadrature on the exact symbolic partial.
pub fn factor_q(
    sys: &TriangularSystem,
    t: f64,
    x: &[f64],
    z: &[f64],
    y: f64,
) -> Result<FactorCoeffs, SystemError> {
    let n = sys.dim();
    let mut q = FactorCoeffs::zeros(n);
    let mut args = vec![0.0; n + 1];
    for i in 1..n {
        for j in 1..=i {
            let var = format!("x{}", j + 1);
            let partial = sys.drift(i).differentiate(&var)?;
            let mut eval_at = |tau: f64| -> Result<f64, SystemError> {
                args.truncate(0);
                args.push(t);
                args.push(y);
                for k in 1..=i {
                    args.push(z[k] + tau * (x[k] - z[k]));
                }
                Ok(partial.eval(&args[..i + 2])?)
            };
            let value = adaptive_simpson(&mut eval_at, 0.0, 1.0, 1e-10, 24).map_err(
                |residual| SystemError::QuadratureDidNotConverge { row: i, col: j, residual },
            )?;
            q.set(i, j, value);
        }
    }
    Ok(q)
}

/// `max_i |ΔF_i - (A e)_i|` for the factorization produced by [`factor_q`];
/// the verification suite uses this as the independent check of the
/// mean-value identity.
pub fn factorization_residual(
    sys: &TriangularSystem,
    t: f64,
    x: &[f64],
    z: &[f64],
    y: f64,
) -> Result<f64, SystemError> {
    let q = factor_q(sys, t, x, z, y)?;
    let e: Vec<f64> = x.iter().zip(z).map(|(a, b)| a - b).collect();
    let a = eval_a_matrix(sys, t, &q, x, &e, y)?;
    let fx = sys.eval_output_form(t, x, y)?;
    let fz = sys.eval_output_form(t, z, y)?;
    let ae = a.matvec(&e);
    let mut worst = 0.0f64;
    for i in 0..sys.dim() {
        let r = fmath::abs(fx[i] - fz[i] - ae[i]);
        if r > worst {
            worst = r;
        }
    }
    Ok(worst)
}

/// Adaptive Simpson quadrature; returns `Err(worst_panel_error)` if the depth
/// budget runs out before the tolerance is met.
fn adaptive_simpson(
    f: &mut dyn FnMut(f64) -> Result<f64, SystemError>,
    a: f64,
    b: f64,
    tol: f64,
    max_depth: u32,
) -> Result<f64, f64> {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    struct Ctx<'a> {
        f: &'a mut dyn FnMut(f64) -> Result<f64, SystemError>,
        worst: f64,
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        ctx: &mut Ctx<'_>,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Result<f64, ()> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = (ctx.f)(lm).map_err(|_| ())?;
        let frm = (ctx.f)(rm).map_err(|_| ())?;
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if fmath::abs(delta) <= 15.0 * tol {
            return Ok(left + right + delta / 15.0);
        }
        if depth == 0 {
            ctx.worst = ctx.worst.max(fmath::abs(delta));
            return Ok(left + right + delta / 15.0);
        }
        let l = recurse(ctx, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?;
        let r = recurse(ctx, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?;
        Ok(l + r)
    }
    let fa = f(a).map_err(|_| f64::INFINITY)?;
    let m = 0.5 * (a + b);
    let fm = f(m).map_err(|_| f64::INFINITY)?;
    let fb = f(b).map_err(|_| f64::INFINITY)?;
    let whole = simpson(fa, fm, fb, b - a);
    let mut ctx = Ctx { f, worst: 0.0 };
    let out =
        recurse(&mut ctx, a, b, fa, fm, fb, whole, tol, max_depth).map_err(|_| f64::INFINITY)?;
    if ctx.worst > 0.0 && ctx.worst > 15.0 * tol {
        return Err(ctx.worst);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod test_fixtures {
    use super::*;
    use alloc::vec;

    /// `x1' = x2^3, x2' = 0` with the linear-in-time completeness bound.
    pub fn pure_chain2() -> TriangularSystem {
        let f1 = ScalarField::parse("0", &["t", "x1"], "f1").unwrap();
        let f2 = ScalarField::parse("0", &["t", "x1", "x2"], "f2").unwrap();
        let a1 = ScalarField::parse("1", &["t", "x1"], "a1").unwrap();
        let beta = ScalarField::parse("(1+s^3)*(1+t)+s", &["t", "s"], "beta").unwrap();
        TriangularSystem::new(vec![3], vec![f1, f2], vec![a1], beta).unwrap()
    }

    /// Contracting three-state system with cubic couplings.
    pub fn example_3state() -> TriangularSystem {
        let f1 = ScalarField::parse("-x1", &["t", "x1"], "f1").unwrap();
        let f2 = ScalarField::parse("-x2", &["t", "x1", "x2"], "f2").unwrap();
        let f3 = ScalarField::parse("-x3", &["t", "x1", "x2", "x3"], "f3").unwrap();
        let a1 = ScalarField::parse("1", &["t", "x1"], "a1").unwrap();
        let a2 = ScalarField::parse("1/(1+x1^2)", &["t", "x1"], "a2").unwrap();
        let beta = ScalarField::parse("1.5*s + s^3", &["t", "s"], "beta").unwrap();
        TriangularSystem::new(vec![3, 3], vec![f1, f2, f3], vec![a1, a2], beta).unwrap()
    }

    /// Linear chain (`m = 1`): the degenerate-power case where all gains stay
    /// bounded in time.
    pub fn linear_chain2() -> TriangularSystem {
        let f1 = ScalarField::parse("0", &["t", "x1"], "f1").unwrap();
        let f2 = ScalarField::parse("0", &["t", "x1", "x2"], "f2").unwrap();
        let a1 = ScalarField::parse("1", &["t", "x1"], "a1").unwrap();
        let beta = ScalarField::parse("s*(2+t)", &["t", "s"], "beta").unwrap();
        TriangularSystem::new(vec![1], vec![f1, f2], vec![a1], beta).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_fixtures::*;
    use super::*;

    #[test]
    fn rejects_even_powers() {
        let f1 = ScalarField::parse("0", &["t", "x1"], "f1").unwrap();
        let f2 = ScalarField::parse("0", &["t", "x1", "x2"], "f2").unwrap();
        let a1 = ScalarField::parse("1", &["t", "x1"], "a1").unwrap();
        let beta = ScalarField::parse("s+1", &["t", "s"], "beta").unwrap();
        let err = TriangularSystem::new(vec![2], vec![f1, f2], vec![a1], beta).unwrap_err();
        assert_eq!(err, SystemError::EvenPower { index: 0, value: 2 });
    }

    #[test]
    fn rejects_negative_coupling_with_guidance() {
        let f1 = ScalarField::parse("0", &["t", "x1"], "f1").unwrap();
        let f2 = ScalarField::parse("0", &["t", "x1", "x2"], "f2").unwrap();
        let a1 = ScalarField::parse("-1", &["t", "x1"], "a1").unwrap();
        let beta = ScalarField::parse("s+1", &["t", "s"], "beta").unwrap();
        let sys = TriangularSystem::new(vec![3], vec![f1, f2], vec![a1], beta).unwrap();
        let err = sys.validate_on_range((0.0, 1.0), (-1.0, 1.0), 2.0, 5).unwrap_err();
        let msg = alloc::string::ToString::to_string(&err);
        assert!(msg.contains("x2 -> -x2"), "{msg}");
    }

    #[test]
    fn beta_below_identity_rejected() {
        let f1 = ScalarField::parse("0", &["t", "x1"], "f1").unwrap();
        let f2 = ScalarField::parse("0", &["t", "x1", "x2"], "f2").unwrap();
        let a1 = ScalarField::parse("1", &["t", "x1"], "a1").unwrap();
        let beta = ScalarField::parse("s/2", &["t", "s"], "beta").unwrap();
        let sys = TriangularSystem::new(vec![1], vec![f1, f2], vec![a1], beta).unwrap();
        assert!(matches!(
            sys.validate_on_range((0.0, 1.0), (-1.0, 1.0), 2.0, 5),
            Err(SystemError::CompletenessBoundBelowIdentity { .. })
        ));
    }

    #[test]
    fn plant_rhs_pure_power_chain() {
        let sys = pure_chain2();
        let dx = sys.eval_plant_rhs(0.0, &[0.0, 2.0]).unwrap();
        assert_eq!(dx, vec![8.0, 0.0]);
        let dx0 = sys.eval_plant_rhs(1.0, &[0.0, 0.0]).unwrap();
        assert_eq!(dx0, vec![0.0, 0.0]);
    }

    #[test]
    fn plant_rhs_three_state_hand_value() {
        // hand evaluation: component 2 = -1 + (1/(1+1)) * 1 = -0.5
        let sys = example_3state();
        let dx = sys.eval_plant_rhs(0.0, &[1.0, 1.0, 1.0]).unwrap();
        assert!((dx[0] - 0.0).abs() < 1e-15);
        assert!((dx[1] + 0.5).abs() < 1e-15);
        assert!((dx[2] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn output_form_consistent_on_true_trajectory() {
        let sys = example_3state();
        let x = [0.3, -0.7, 1.1];
        let lhs = sys.eval_output_form(2.0, &x, x[0]).unwrap();
        let rhs = sys.eval_plant_rhs(2.0, &x).unwrap();
        for i in 0..3 {
            assert!((lhs[i] - rhs[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn output_form_ignores_first_state() {
        let sys = pure_chain2();
        let v = sys.eval_output_form(0.0, &[999.0, 2.0], 0.0).unwrap();
        assert_eq!(v, vec![8.0, 0.0]);
        // with the output substituted for x1 everywhere:
        // (f1(t,y) + a1(t,y) x2^3, f2(t,y,x2) + a2(t,y) x3^3, f3(t,y,x2,x3))
        // at x=(0,1,1), y=1: (-1+1, -1+0.5, -1)
        let sys3 = example_3state();
        let w = sys3.eval_output_form(0.0, &[0.0, 1.0, 1.0], 1.0).unwrap();
        assert!((w[0] - 0.0).abs() < 1e-15);
        assert!((w[1] + 0.5).abs() < 1e-15);
        assert!((w[2] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn b_telescoping_examples() {
        // 7 * (2 - 1) = 2^3 - 1^3
        assert_eq!(eval_b(3, 2.0, 1.0), 7.0);
        // beta = 0 collapses to m alpha^{m-1}
        assert_eq!(eval_b(3, 2.0, 0.0), 12.0);
        // m = 1 is the constant 1
        assert_eq!(eval_b(1, -4.2, 17.0), 1.0);
    }

    #[test]
    fn b_telescoping_identity_sampled() {
        let mut rng = crate::rng::seeded(11);
        for &m in &[1u32, 3, 5, 7] {
            for _ in 0..500 {
                let x = crate::rng::uniform_in(&mut rng, -10.0, 10.0);
                let z = crate::rng::uniform_in(&mut rng, -10.0, 10.0);
                let lhs = eval_b(m, x, x - z) * (x - z);
                let rhs = fmath::powi(x, m) - fmath::powi(z, m);
                assert!(
                    (lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()),
                    "m={m} x={x} z={z}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn vartheta_m1_is_one() {
        assert_eq!(vartheta(1, 10_000), 1.0);
    }

    #[test]
    fn vartheta_m3_matches_closed_form() {
        // On the circle b_3 reduces to 2 + cos(2θ) - 1.5 sin(2θ), minimum
        // 2 - sqrt(3.25); the dense-grid oracle confirms the reduction before
        // the certified bound is compared against it.
        let closed = 2.0 - fmath::sqrt(3.25);
        let grid = 1_000_000usize;
        let mut oracle = f64::INFINITY;
        for k in 0..grid {
            let th = 2.0 * core::f64::consts::PI * k as f64 / grid as f64;
            oracle = oracle.min(eval_b(3, fmath::cos(th), fmath::sin(th)));
        }
        assert!((oracle - closed).abs() < 1e-9);
        let v = vartheta(3, 100_000);
        assert!(v <= closed);
        assert!(v >= closed - 1e-3, "margin too conservative: {v} vs {closed}");
    }

    #[test]
    fn vartheta_m5_against_dense_grid_oracle() {
        let grid = 1_000_000usize;
        let mut oracle = f64::INFINITY;
        for k in 0..grid {
            let th = 2.0 * core::f64::consts::PI * k as f64 / grid as f64;
            oracle = oracle.min(eval_b(5, fmath::cos(th), fmath::sin(th)));
        }
        assert!(oracle > 0.0);
        let v = vartheta(5, 100_000);
        assert!(v <= oracle);
        assert!(v >= oracle - 1e-3);
    }

    #[test]
    fn a_matrix_shapes_and_values() {
        let sys = pure_chain2();
        // q[1][1] = -1, coupling b(2, 1) = 7 by hand
        let mut q = FactorCoeffs::zeros(2);
        q.set(1, 1, -1.0);
        let a = eval_a_matrix(&sys, 0.0, &q, &[0.0, 2.0], &[0.0, 1.0], 0.0).unwrap();
        assert_eq!(a[(0, 0)], 0.0);
        assert_eq!(a[(0, 1)], 7.0);
        assert_eq!(a[(1, 0)], 0.0);
        assert_eq!(a[(1, 1)], -1.0);
    }

    #[test]
    fn a_matrix_zero_error_equals_jacobian_superdiagonal() {
        // b(alpha, 0) = m alpha^{m-1}
        let sys = example_3state();
        let q = FactorCoeffs::zeros(3);
        let x = [0.4, -1.2, 0.9];
        let a = eval_a_matrix(&sys, 0.0, &q, &x, &[0.0; 3], 0.4).unwrap();
        assert!((a[(0, 1)] - 3.0 * x[1] * x[1]).abs() < 1e-14);
        let a2 = 1.0 / (1.0 + 0.4f64 * 0.4);
        assert!((a[(1, 2)] - a2 * 3.0 * x[2] * x[2]).abs() < 1e-14);
    }

    #[test]
    fn factor_q_linear_drift_is_exact() {
        let sys = example_3state();
        let q = factor_q(&sys, 0.0, &[0.5, 1.0, -0.5], &[0.1, 0.2, 0.3], 0.5).unwrap();
        assert!((q.get(1, 1) + 1.0).abs() < 1e-12);
        assert!((q.get(2, 2) + 1.0).abs() < 1e-12);
        assert_eq!(q.get(1, 0), 0.0);
        assert_eq!(q.get(2, 0), 0.0);
        assert_eq!(q.get(2, 1), 0.0);
    }

    #[test]
    fn factor_q_quadratic_drift_hand_integral() {
        // f2 = x2^2: q[1][1] = ∫ 2(z + τ(x-z)) dτ = x + z = 4 at x=3, z=1,
        // and ΔF = 9 - 1 = 8 = 4 * 2
        let f1 = ScalarField::parse("0", &["t", "x1"], "f1").unwrap();
        let f2 = ScalarField::parse("x2^2", &["t", "x1", "x2"], "f2").unwrap();
        let a1 = ScalarField::parse("1", &["t", "x1"], "a1").unwrap();
        let beta = ScalarField::parse("s+1+t", &["t", "s"], "beta").unwrap();
        let sys = TriangularSystem::new(vec![1], vec![f1, f2], vec![a1], beta).unwrap();
        let q = factor_q(&sys, 0.0, &[0.0, 3.0], &[0.0, 1.0], 0.0).unwrap();
        assert!((q.get(1, 1) - 4.0).abs() < 1e-10);
        let res = factorization_residual(&sys, 0.0, &[0.0, 3.0], &[0.0, 1.0], 0.0).unwrap();
        assert!(res < 1e-9, "residual {res}");
    }

    #[test]
    fn factor_q_at_coincident_points_is_pointwise_jacobian() {
        let sys = example_3state();
        let x = [0.3, 0.7, -0.2];
        let q = factor_q(&sys, 1.0, &x, &x, 0.3).unwrap();
        assert!((q.get(1, 1) + 1.0).abs() < 1e-12);
        let res = factorization_residual(&sys, 1.0, &x, &x, 0.3).unwrap();
        assert!(res == 0.0, "residual {res}");
    }

    #[test]
    fn factorization_residual_sampled() {
        let sys = example_3state();
        let mut rng = crate::rng::seeded(5);
        for _ in 0..50 {
            let t = crate::rng::uniform_in(&mut rng, 0.0, 5.0);
            let x: Vec<f64> =
                (0..3).map(|_| crate::rng::uniform_in(&mut rng, -2.0, 2.0)).collect();
            let z: Vec<f64> =
                (0..3).map(|_| crate::rng::uniform_in(&mut rng, -2.0, 2.0)).collect();
            let y = crate::rng::uniform_in(&mut rng, -2.0, 2.0);
            let e_norm =
                fmath::norm2(&x.iter().zip(&z).map(|(a, b)| a - b).collect::<Vec<_>>());
            let res = factorization_residual(&sys, t, &x, &z, y).unwrap();
            assert!(res <= 1e-7 * (1.0 + e_norm), "residual {res}");
        }
    }

    #[test]
    fn b_homogeneity_sampled() {
        // b(λα, λβ) = λ^{m-1} b(α, β)
        let mut rng = crate::rng::seeded(13);
        for &m in &[1u32, 3, 5, 7] {
            for _ in 0..200 {
                let a = crate::rng::uniform_in(&mut rng, -3.0, 3.0);
                let b = crate::rng::uniform_in(&mut rng, -3.0, 3.0);
                let l = crate::rng::uniform_in(&mut rng, -3.0, 3.0);
                let lhs = eval_b(m, l * a, l * b);
                let rhs = fmath::powi(l, m - 1) * eval_b(m, a, b);
                assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
            }
        }
    }

    #[test]
    fn b_bar_nonnegative_sampled() {
        // b(α, β) - ϑ β^{m-1} >= 0
        let mut rng = crate::rng::seeded(17);
        for &m in &[3u32, 5, 7] {
            let th = vartheta(m, 100_000);
            for _ in 0..2000 {
                let a = crate::rng::uniform_in(&mut rng, -5.0, 5.0);
                let b = crate::rng::uniform_in(&mut rng, -5.0, 5.0);
                let bb = eval_b(m, a, b) - th * fmath::powi(b, m - 1);
                assert!(bb >= -1e-9, "m={m} a={a} b={b}: {bb}");
            }
        }
    }
}
