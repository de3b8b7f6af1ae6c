//! Directed-rounding interval arithmetic.
//!
//! Every operation returns an interval guaranteed to contain the exact real
//! result for any choice of points in the operands. Directed rounding is
//! emulated on top of round-to-nearest: error-free transformations (TwoSum,
//! FMA residuals) detect whether the rounded result is below or above the
//! exact value, and the endpoint is nudged by [`ULP_SLACK`] ulps only when
//! needed. Exact operations therefore keep exact endpoints.

use std::fmt;

use thiserror::Error;

/// Number of ulps an endpoint is nudged outward when a computation is inexact.
pub const ULP_SLACK: u32 = 1;

/// Magnitudes below this are treated as potentially affected by underflow;
/// residual-based exactness detection is skipped and endpoints are always
/// nudged outward.
const SAFE_MIN: f64 = 1e-290;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum IntervalError {
    #[error("division by an interval containing zero")]
    DivisionByZeroInterval,
    #[error("cannot split a degenerate (zero-width) dimension `{0}`")]
    DegenerateDimension(String),
    #[error("dimension `{0}` not present in box")]
    MissingDimension(String),
    #[error("invalid interval bounds: lo={lo}, hi={hi}")]
    InvalidBounds { lo: f64, hi: f64 },
}

fn next_up_n(x: f64, n: u32) -> f64 {
    let mut v = x;
    for _ in 0..n {
        v = v.next_up();
    }
    v
}

fn next_down_n(x: f64, n: u32) -> f64 {
    let mut v = x;
    for _ in 0..n {
        v = v.next_down();
    }
    v
}

/// TwoSum error-free transformation: returns the exact rounding error of `a + b`.
fn two_sum_err(a: f64, b: f64, s: f64) -> f64 {
    let bv = s - a;
    let av = s - bv;
    (a - av) + (b - bv)
}

fn add_down(a: f64, b: f64) -> f64 {
    let s = a + b;
    if s.is_infinite() {
        return if s > 0.0 { f64::MAX } else { s };
    }
    let e = two_sum_err(a, b, s);
    if e < 0.0 {
        s.next_down()
    } else {
        s
    }
}

fn add_up(a: f64, b: f64) -> f64 {
    let s = a + b;
    if s.is_infinite() {
        return if s < 0.0 { f64::MIN } else { s };
    }
    let e = two_sum_err(a, b, s);
    if e > 0.0 {
        s.next_up()
    } else {
        s
    }
}

fn mul_down(a: f64, b: f64) -> f64 {
    let p = a * b;
    if p.is_infinite() {
        return if p > 0.0 { f64::MAX } else { p };
    }
    if p != 0.0 && p.abs() < SAFE_MIN {
        return next_down_n(p, ULP_SLACK);
    }
    let e = a.mul_add(b, -p);
    if e < 0.0 {
        p.next_down()
    } else {
        p
    }
}

fn mul_up(a: f64, b: f64) -> f64 {
    let p = a * b;
    if p.is_infinite() {
        return if p < 0.0 { f64::MIN } else { p };
    }
    if p != 0.0 && p.abs() < SAFE_MIN {
        return next_up_n(p, ULP_SLACK);
    }
    let e = a.mul_add(b, -p);
    if e > 0.0 {
        p.next_up()
    } else {
        p
    }
}

fn div_down(a: f64, b: f64) -> f64 {
    let q = a / b;
    if q.is_infinite() {
        return if q > 0.0 { f64::MAX } else { q };
    }
    if q != 0.0 && q.abs() < SAFE_MIN {
        return next_down_n(q, ULP_SLACK);
    }
    // Residual r = q*b - a decides which side of the true quotient q lies on.
    let r = q.mul_add(b, -a);
    if r == 0.0 {
        q
    } else if (r > 0.0) == (b > 0.0) {
        q.next_down()
    } else {
        q
    }
}

fn div_up(a: f64, b: f64) -> f64 {
    let q = a / b;
    if q.is_infinite() {
        return if q < 0.0 { f64::MIN } else { q };
    }
    if q != 0.0 && q.abs() < SAFE_MIN {
        return next_up_n(q, ULP_SLACK);
    }
    let r = q.mul_add(b, -a);
    if r == 0.0 {
        q
    } else if (r > 0.0) == (b > 0.0) {
        q
    } else {
        q.next_up()
    }
}

/// A closed real interval `[lo, hi]` with `lo <= hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self, IntervalError> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(IntervalError::InvalidBounds { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    /// Point interval `[x, x]`.
    pub fn point(x: f64) -> Self {
        debug_assert!(!x.is_nan());
        Self { lo: x, hi: x }
    }

    /// Panicking constructor for literals known to be ordered.
    pub fn of(lo: f64, hi: f64) -> Self {
        Self::new(lo, hi).expect("interval bounds out of order")
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        let m = 0.5 * self.lo + 0.5 * self.hi;
        m.clamp(self.lo, self.hi)
    }

    pub fn is_finite(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        if lo <= hi {
            Some(Interval { lo, hi })
        } else {
            None
        }
    }

    /// Widen by `delta` on both sides (absolute inflation).
    pub fn inflate(&self, delta: f64) -> Interval {
        debug_assert!(delta >= 0.0);
        Interval {
            lo: add_down(self.lo, -delta),
            hi: add_up(self.hi, delta),
        }
    }

    pub fn add(&self, other: &Interval) -> Interval {
        Interval {
            lo: add_down(self.lo, other.lo),
            hi: add_up(self.hi, other.hi),
        }
    }

    pub fn sub(&self, other: &Interval) -> Interval {
        Interval {
            lo: add_down(self.lo, -other.hi),
            hi: add_up(self.hi, -other.lo),
        }
    }

    pub fn neg(&self) -> Interval {
        Interval {
            lo: -self.hi,
            hi: -self.lo,
        }
    }

    pub fn mul(&self, other: &Interval) -> Interval {
        let candidates_lo = [
            mul_down(self.lo, other.lo),
            mul_down(self.lo, other.hi),
            mul_down(self.hi, other.lo),
            mul_down(self.hi, other.hi),
        ];
        let candidates_hi = [
            mul_up(self.lo, other.lo),
            mul_up(self.lo, other.hi),
            mul_up(self.hi, other.lo),
            mul_up(self.hi, other.hi),
        ];
        Interval {
            lo: candidates_lo.iter().cloned().fold(f64::INFINITY, f64::min),
            hi: candidates_hi
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn div(&self, other: &Interval) -> Result<Interval, IntervalError> {
        if other.contains(0.0) {
            return Err(IntervalError::DivisionByZeroInterval);
        }
        let candidates_lo = [
            div_down(self.lo, other.lo),
            div_down(self.lo, other.hi),
            div_down(self.hi, other.lo),
            div_down(self.hi, other.hi),
        ];
        let candidates_hi = [
            div_up(self.lo, other.lo),
            div_up(self.lo, other.hi),
            div_up(self.hi, other.lo),
            div_up(self.hi, other.hi),
        ];
        Ok(Interval {
            lo: candidates_lo.iter().cloned().fold(f64::INFINITY, f64::min),
            hi: candidates_hi
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max),
        })
    }

    /// `exp` is monotone; endpoints are evaluated and nudged outward to cover
    /// the libm faithful-rounding error.
    pub fn exp(&self) -> Interval {
        Interval {
            lo: next_down_n(self.lo.exp(), ULP_SLACK).max(0.0),
            hi: next_up_n(self.hi.exp(), ULP_SLACK),
        }
    }

    /// Square with the dependency handled: result is `[0, max]` when 0 is inside.
    pub fn sqr(&self) -> Interval {
        let a = mul_down(self.lo, self.lo);
        let b = mul_down(self.hi, self.hi);
        let a_up = mul_up(self.lo, self.lo);
        let b_up = mul_up(self.hi, self.hi);
        if self.contains(0.0) {
            Interval {
                lo: 0.0,
                hi: a_up.max(b_up),
            }
        } else {
            Interval {
                lo: a.min(b),
                hi: a_up.max(b_up),
            }
        }
    }

    /// Integer power by sign-case analysis with per-step directed rounding.
    pub fn pow_int(&self, n: i32) -> Result<Interval, IntervalError> {
        if n == 0 {
            return Ok(Interval::point(1.0));
        }
        if n < 0 {
            let p = self.pow_int(-n)?;
            return Interval::point(1.0).div(&p);
        }
        let n = n as u32;
        if n % 2 == 1 {
            // Odd power: monotone over the whole line.
            Ok(Interval {
                lo: pow_down(self.lo, n),
                hi: pow_up(self.hi, n),
            })
        } else if self.lo >= 0.0 {
            Ok(Interval {
                lo: pow_down(self.lo, n),
                hi: pow_up(self.hi, n),
            })
        } else if self.hi <= 0.0 {
            Ok(Interval {
                lo: pow_down(self.hi.abs(), n),
                hi: pow_up(self.lo.abs(), n),
            })
        } else {
            Ok(Interval {
                lo: 0.0,
                hi: pow_up(self.lo.abs().max(self.hi.abs()), n),
            })
        }
    }

    /// Gauss error function via the Abramowitz–Stegun 7.1.26 rational
    /// approximation (|error| <= 1.5e-7), inflated into the result.
    pub fn erf(&self) -> Interval {
        let lo = next_down_n(erf_point(self.lo) - ERF_APPROX_ERR, 4).max(-1.0);
        let hi = next_up_n(erf_point(self.hi) + ERF_APPROX_ERR, 4).min(1.0);
        Interval { lo, hi }
    }

    /// Clamp below at zero: `[max(0, lo), max(0, hi)]`.
    pub fn max0(&self) -> Interval {
        Interval {
            lo: self.lo.max(0.0),
            hi: self.hi.max(0.0),
        }
    }

    /// Multiply by a point scalar.
    pub fn scale(&self, c: f64) -> Interval {
        self.mul(&Interval::point(c))
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

// Scalar powers nudge through interval multiplication so that rounding
// direction stays correct when the accumulator changes sign.
fn pow_scalar(x: f64, n: u32) -> Interval {
    let xi = Interval::point(x);
    let mut acc = Interval::point(1.0);
    for _ in 0..n {
        acc = acc.mul(&xi);
    }
    acc
}

fn pow_down(x: f64, n: u32) -> f64 {
    pow_scalar(x, n).lo()
}

fn pow_up(x: f64, n: u32) -> f64 {
    pow_scalar(x, n).hi()
}

/// Maximum absolute error of [`erf_point`].
pub const ERF_APPROX_ERR: f64 = 1.5e-7;

/// Point evaluation of erf via Abramowitz–Stegun 7.1.26.
pub fn erf_point(x: f64) -> f64 {
    const P: f64 = 0.3275911;
    const A1: f64 = 0.254829592;
    const A2: f64 = -0.284496736;
    const A3: f64 = 1.421413741;
    const A4: f64 = -1.453152027;
    const A5: f64 = 1.061405429;
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + P * x);
    let poly = ((((A5 * t + A4) * t + A3) * t + A2) * t + A1) * t;
    sign * (1.0 - poly * (-x * x).exp())
}

/// An axis-aligned box: an ordered map from dimension names to intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBox {
    dims: indexmap::IndexMap<String, Interval>,
}

impl IntervalBox {
    pub fn new() -> Self {
        Self {
            dims: indexmap::IndexMap::new(),
        }
    }

    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, Interval)>,
        S: Into<String>,
    {
        Self {
            dims: pairs.into_iter().map(|(n, iv)| (n.into(), iv)).collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, iv: Interval) {
        self.dims.insert(name.into(), iv);
    }

    pub fn get(&self, name: &str) -> Option<&Interval> {
        self.dims.get(name)
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.dims.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Interval)> {
        self.dims.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn widths(&self) -> Vec<(String, f64)> {
        self.dims
            .iter()
            .map(|(k, v)| (k.clone(), v.width()))
            .collect()
    }

    pub fn midpoint(&self) -> Vec<(String, f64)> {
        self.dims
            .iter()
            .map(|(k, v)| (k.clone(), v.midpoint()))
            .collect()
    }

    pub fn contains_point(&self, point: &[(String, f64)]) -> bool {
        point.iter().all(|(n, x)| {
            self.dims
                .get(n)
                .map(|iv| iv.contains(*x))
                .unwrap_or(false)
        })
    }

    pub fn contains_box(&self, other: &IntervalBox) -> bool {
        other.iter().all(|(n, iv)| {
            self.dims
                .get(n)
                .map(|mine| mine.contains_interval(iv))
                .unwrap_or(false)
        })
    }

    pub fn hull(&self, other: &IntervalBox) -> IntervalBox {
        debug_assert_eq!(self.len(), other.len());
        let mut out = IntervalBox::new();
        for (name, iv) in self.iter() {
            let o = other.get(name).expect("hull over mismatched boxes");
            out.insert(name, iv.hull(o));
        }
        out
    }

    /// Bisect at the midpoint along `dim`. The two halves tile the original.
    pub fn split(&self, dim: &str) -> Result<(IntervalBox, IntervalBox), IntervalError> {
        let iv = self
            .dims
            .get(dim)
            .ok_or_else(|| IntervalError::MissingDimension(dim.to_string()))?;
        if iv.width() <= 0.0 {
            return Err(IntervalError::DegenerateDimension(dim.to_string()));
        }
        let mid = iv.midpoint();
        let mut left = self.clone();
        let mut right = self.clone();
        left.dims[dim] = Interval::of(iv.lo(), mid);
        right.dims[dim] = Interval::of(mid, iv.hi());
        Ok((left, right))
    }
}

impl Default for IntervalBox {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Display for IntervalBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (name, iv)) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{name}: {iv}")?;
        }
        write!(f, "}}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::SmallRng;
    use rand::{Rng, SeedableRng};

    fn iv(lo: f64, hi: f64) -> Interval {
        Interval::of(lo, hi)
    }

    #[test]
    fn add_exact_endpoints() {
        let r = iv(1.0, 2.0).add(&iv(3.0, 4.0));
        assert_eq!(r, iv(4.0, 6.0));
    }

    #[test]
    fn mul_sign_cases() {
        let r = iv(-1.0, 2.0).mul(&iv(3.0, 4.0));
        assert_eq!(r, iv(-4.0, 8.0));
    }

    #[test]
    fn div_by_zero_interval_rejected() {
        let r = iv(1.0, 1.0).div(&iv(0.0, 1.0));
        assert_eq!(r, Err(IntervalError::DivisionByZeroInterval));
    }

    #[test]
    fn exp_of_zero_tight() {
        let r = Interval::point(0.0).exp();
        assert!(r.contains(1.0));
        assert!(r.width() <= 2.0 * (1.0_f64.next_up() - 1.0));
    }

    #[test]
    fn sqr_through_zero() {
        let r = iv(-2.0, 1.0).sqr();
        assert_eq!(r.lo(), 0.0);
        assert!(r.contains(4.0) && r.hi() <= 4.0_f64.next_up());
    }

    #[test]
    fn erf_zero_contains_zero() {
        let r = Interval::point(0.0).erf();
        assert!(r.contains(0.0));
        assert!(r.width() < 1e-6);
    }

    #[test]
    fn erf_known_value() {
        // erf(1) = 0.8427007929497149
        let r = Interval::point(1.0).erf();
        assert!(r.contains(0.8427007929497149));
        assert!(r.width() < 1e-6);
    }

    #[test]
    fn pow_int_cases() {
        assert!(iv(-2.0, 1.0).pow_int(2).unwrap().contains_interval(&iv(0.0, 4.0)));
        assert!(iv(-2.0, 1.0).pow_int(3).unwrap().contains_interval(&iv(-8.0, 1.0)));
        assert_eq!(iv(-2.0, 1.0).pow_int(0).unwrap(), Interval::point(1.0));
        // Width stays tight: at most a few ulps beyond exact.
        let p = iv(-2.0, 1.0).pow_int(3).unwrap();
        assert!(p.lo() >= -8.0 - 1e-12 && p.hi() <= 1.0 + 1e-12);
    }

    #[test]
    fn box_split_midpoint() {
        let b = IntervalBox::from_pairs([("k", iv(0.0, 2.0))]);
        let (l, r) = b.split("k").unwrap();
        assert_eq!(l.get("k").unwrap(), &iv(0.0, 1.0));
        assert_eq!(r.get("k").unwrap(), &iv(1.0, 2.0));
    }

    #[test]
    fn box_split_degenerate_rejected() {
        let b = IntervalBox::from_pairs([("k", iv(0.0, 2.0)), ("d", iv(5.0, 5.0))]);
        assert_eq!(
            b.split("d"),
            Err(IntervalError::DegenerateDimension("d".into()))
        );
    }

    #[test]
    fn box_split_negative_span() {
        let b = IntervalBox::from_pairs([("k", iv(-1.0, 3.0))]);
        let (l, r) = b.split("k").unwrap();
        assert_eq!(l.get("k").unwrap(), &iv(-1.0, 1.0));
        assert_eq!(r.get("k").unwrap(), &iv(1.0, 3.0));
    }

    /// Containment fuzz: exact op result on random member points lies in the
    /// interval result. 100_000 cases across the four binary ops.
    #[test]
    fn containment_fuzz() {
        let mut rng = SmallRng::seed_from_u64(0x1DEA);
        for case in 0..100_000u32 {
            let a = random_interval(&mut rng);
            let b = random_interval(&mut rng);
            let x = sample_in(&mut rng, &a);
            let y = sample_in(&mut rng, &b);
            let op = case % 4;
            let (r, exact) = match op {
                0 => (a.add(&b), x + y),
                1 => (a.sub(&b), x - y),
                2 => (a.mul(&b), x * y),
                _ => {
                    if b.contains(0.0) {
                        continue;
                    }
                    (a.div(&b).unwrap(), x / y)
                }
            };
            assert!(
                r.contains(exact),
                "case {case}: op {op} on {a} and {b}: {exact} not in {r}"
            );
        }
    }

    /// Inclusion monotonicity: wider operands give wider (containing) results.
    #[test]
    fn inclusion_monotonicity() {
        let mut rng = SmallRng::seed_from_u64(0xBEEF);
        for _ in 0..20_000 {
            let a = random_interval(&mut rng);
            let b = random_interval(&mut rng);
            let a_wide = a.inflate(rng.gen_range(0.0..1.0));
            let b_wide = b.inflate(rng.gen_range(0.0..1.0));
            assert!(a_wide.add(&b_wide).contains_interval(&a.add(&b)));
            assert!(a_wide.sub(&b_wide).contains_interval(&a.sub(&b)));
            assert!(a_wide.mul(&b_wide).contains_interval(&a.mul(&b)));
            if !b_wide.contains(0.0) {
                assert!(a_wide
                    .div(&b_wide)
                    .unwrap()
                    .contains_interval(&a.div(&b).unwrap()));
            }
            assert!(a_wide.exp().contains_interval(&a.exp()));
            assert!(a_wide.sqr().contains_interval(&a.sqr()));
            assert!(a_wide.erf().contains_interval(&a.erf()));
        }
    }

    #[test]
    fn erf_matches_reference_cdf() {
        // Oracle: statrs' independent erf path through the normal CDF.
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = Normal::new(0.0, 1.0).unwrap();
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let reference = 2.0 * n.cdf(x * std::f64::consts::SQRT_2) - 1.0;
            let r = Interval::point(x).erf();
            assert!(
                r.contains(reference),
                "erf({x}): reference {reference} not in {r}"
            );
        }
    }

    fn random_interval(rng: &mut SmallRng) -> Interval {
        let a: f64 = rng.gen_range(-1e3..1e3);
        let w: f64 = rng.gen_range(0.0..10.0);
        Interval::of(a, a + w)
    }

    fn sample_in(rng: &mut SmallRng, iv: &Interval) -> f64 {
        if iv.width() == 0.0 {
            iv.lo()
        } else {
            rng.gen_range(iv.lo()..=iv.hi())
        }
    }
}
