//! Prime-field arithmetic, polynomials, Lagrange interpolation and
//! Berlekamp–Welch decoding of Reed–Solomon codewords.
//!
//! The field is generic over its modulus so small fields can be enumerated
//! exhaustively in tests; the deployment field is [`Fe`] = GF(65537), which
//! holds any 16-bit word injectively.

use std::collections::BTreeSet;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;
use thiserror::Error;

/// Modulus of the deployment field (the Fermat prime 2^16 + 1).
pub const MODULUS: u32 = 65537;

/// Element of the deployment field.
pub type Fe = Fp<MODULUS>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GaloisError {
    #[error("inverse of zero")]
    ZeroInverse,
    #[error("duplicate evaluation point x = {0}")]
    DuplicateAbscissa(u32),
    #[error("need at least {need} points, have {have}")]
    InsufficientPoints { have: usize, need: usize },
    #[error("no polynomial of degree <= {degree} agrees with all but {e_max} points")]
    DecodeFailure { degree: usize, e_max: usize },
}

/// Element of GF(P). `P` must be an odd prime below 2^31.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Fp<const P: u32>(u32);

impl<const P: u32> Fp<P> {
    pub const ZERO: Self = Self(0);
    pub const ONE: Self = Self(1);

    pub fn new(v: u64) -> Self {
        Self((v % P as u64) as u32)
    }

    /// Maps a signed integer into the field.
    pub fn from_i64(v: i64) -> Self {
        Self(v.rem_euclid(P as i64) as u32)
    }

    pub fn value(self) -> u32 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self(rng.random_range(0..P))
    }

    pub fn pow(self, mut e: u64) -> Self {
        let mut base = self;
        let mut acc = Self::ONE;
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base *= base;
            e >>= 1;
        }
        acc
    }

    /// Multiplicative inverse via Fermat's little theorem.
    pub fn inv(self) -> Result<Self, GaloisError> {
        if self.is_zero() {
            return Err(GaloisError::ZeroInverse);
        }
        Ok(self.pow(P as u64 - 2))
    }
}

impl<const P: u32> fmt::Debug for Fp<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl<const P: u32> From<u32> for Fp<P> {
    fn from(v: u32) -> Self {
        Self::new(v as u64)
    }
}

impl<const P: u32> Add for Fp<P> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let s = self.0 as u64 + rhs.0 as u64;
        Self(if s >= P as u64 { s - P as u64 } else { s } as u32)
    }
}

impl<const P: u32> Sub for Fp<P> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        if self.0 >= rhs.0 {
            Self(self.0 - rhs.0)
        } else {
            Self(P - (rhs.0 - self.0))
        }
    }
}

impl<const P: u32> Mul for Fp<P> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Self(((self.0 as u64 * rhs.0 as u64) % P as u64) as u32)
    }
}

impl<const P: u32> Neg for Fp<P> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::ZERO - self
    }
}

impl<const P: u32> AddAssign for Fp<P> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<const P: u32> SubAssign for Fp<P> {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<const P: u32> MulAssign for Fp<P> {
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<const P: u32> Sum for Fp<P> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::ZERO, Add::add)
    }
}

/// Dense polynomial, lowest-degree coefficient first. Always normalized: no
/// trailing zero coefficients, so the zero polynomial has no coefficients.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Polynomial<const P: u32> {
    coeffs: Vec<Fp<P>>,
}

impl<const P: u32> Polynomial<P> {
    pub fn new(mut coeffs: Vec<Fp<P>>) -> Self {
        while coeffs.last().is_some_and(|c| c.is_zero()) {
            coeffs.pop();
        }
        Self { coeffs }
    }

    pub fn zero() -> Self {
        Self { coeffs: Vec::new() }
    }

    /// Random polynomial of degree at most `degree` with the given constant term.
    pub fn random_with_constant<R: Rng + ?Sized>(constant: Fp<P>, degree: usize, rng: &mut R) -> Self {
        let mut coeffs = Vec::with_capacity(degree + 1);
        coeffs.push(constant);
        coeffs.extend((0..degree).map(|_| Fp::random(rng)));
        Self::new(coeffs)
    }

    pub fn coeffs(&self) -> &[Fp<P>] {
        &self.coeffs
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Degree; the zero polynomial reports 0.
    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn eval(&self, x: Fp<P>) -> Fp<P> {
        self.coeffs.iter().rev().fold(Fp::ZERO, |acc, &c| acc * x + c)
    }

    /// Polynomial long division: returns `(quotient, remainder)`.
    pub fn div_rem(&self, divisor: &Self) -> Result<(Self, Self), GaloisError> {
        let lead = *divisor.coeffs.last().ok_or(GaloisError::ZeroInverse)?;
        let lead_inv = lead.inv()?;
        let mut rem = self.coeffs.clone();
        let dd = divisor.degree();
        if rem.len() <= dd {
            return Ok((Self::zero(), self.clone()));
        }
        let mut quot = vec![Fp::ZERO; rem.len() - dd];
        for i in (0..quot.len()).rev() {
            let c = rem[i + dd] * lead_inv;
            quot[i] = c;
            if c.is_zero() {
                continue;
            }
            for (j, &d) in divisor.coeffs.iter().enumerate() {
                rem[i + j] -= c * d;
            }
        }
        rem.truncate(dd);
        Ok((Self::new(quot), Self::new(rem)))
    }
}

impl<const P: u32> Mul for &Polynomial<P> {
    type Output = Polynomial<P>;
    fn mul(self, rhs: Self) -> Polynomial<P> {
        if self.is_zero() || rhs.is_zero() {
            return Polynomial::zero();
        }
        let mut out = vec![Fp::ZERO; self.coeffs.len() + rhs.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            for (j, &b) in rhs.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Polynomial::new(out)
    }
}

impl<const P: u32> Add for &Polynomial<P> {
    type Output = Polynomial<P>;
    fn add(self, rhs: Self) -> Polynomial<P> {
        let n = self.coeffs.len().max(rhs.coeffs.len());
        let get = |p: &Polynomial<P>, i: usize| p.coeffs.get(i).copied().unwrap_or(Fp::ZERO);
        Polynomial::new((0..n).map(|i| get(self, i) + get(rhs, i)).collect())
    }
}

/// A sample `(x, y)` of some polynomial.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvaluationPoint<const P: u32> {
    pub x: Fp<P>,
    pub y: Fp<P>,
}

impl<const P: u32> EvaluationPoint<P> {
    pub fn new(x: impl Into<Fp<P>>, y: impl Into<Fp<P>>) -> Self {
        Self { x: x.into(), y: y.into() }
    }
}

fn check_distinct<const P: u32>(points: &[EvaluationPoint<P>]) -> Result<(), GaloisError> {
    let mut seen = BTreeSet::new();
    for p in points {
        if !seen.insert(p.x) {
            return Err(GaloisError::DuplicateAbscissa(p.x.value()));
        }
    }
    Ok(())
}

/// Lagrange coefficients `λ_i` such that `f(0) = Σ λ_i · f(x_i)` for every
/// polynomial of degree below `xs.len()`.
pub fn lagrange_weights_at_zero<const P: u32>(xs: &[Fp<P>]) -> Result<Vec<Fp<P>>, GaloisError> {
    let mut out = Vec::with_capacity(xs.len());
    for (i, &xi) in xs.iter().enumerate() {
        let mut num = Fp::ONE;
        let mut den = Fp::ONE;
        for (j, &xj) in xs.iter().enumerate() {
            if i == j {
                continue;
            }
            if xi == xj {
                return Err(GaloisError::DuplicateAbscissa(xi.value()));
            }
            num *= xj;
            den *= xj - xi;
        }
        out.push(num * den.inv()?);
    }
    Ok(out)
}

/// Value at zero of the unique polynomial of degree `< points.len()` through `points`.
pub fn lagrange_eval_at_zero<const P: u32>(points: &[EvaluationPoint<P>]) -> Result<Fp<P>, GaloisError> {
    if points.is_empty() {
        return Err(GaloisError::InsufficientPoints { have: 0, need: 1 });
    }
    let xs: Vec<_> = points.iter().map(|p| p.x).collect();
    let w = lagrange_weights_at_zero(&xs)?;
    Ok(points.iter().zip(w).map(|(p, l)| p.y * l).sum())
}

/// Outcome of a successful Berlekamp–Welch decode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded<const P: u32> {
    pub poly: Polynomial<P>,
    /// Indexes into the input slice of the points that disagree with `poly`.
    pub error_positions: BTreeSet<usize>,
}

/// Recovers the degree-`≤ t` polynomial through all but at most `e_max` of `points`.
///
/// Solves the key equation `Q(x_i) = y_i · E(x_i)` with monic error locator `E`
/// of degree `e_max` and `deg Q ≤ t + e_max`, then divides. Any solution yields
/// the same quotient when the error bound holds, so free variables are zeroed.
pub fn berlekamp_welch_decode<const P: u32>(
    points: &[EvaluationPoint<P>],
    t: usize,
    e_max: usize,
) -> Result<Decoded<P>, GaloisError> {
    let need = t + 2 * e_max + 1;
    if points.len() < need {
        return Err(GaloisError::InsufficientPoints { have: points.len(), need });
    }
    check_distinct(points)?;
    let failure = GaloisError::DecodeFailure { degree: t, e_max };

    let q_len = t + e_max + 1;
    let cols = q_len + e_max;
    // Augmented matrix rows: [1, x, .., x^{t+e}, -y, -y x, .., -y x^{e-1} | y x^e]
    let mut rows: Vec<Vec<Fp<P>>> = points
        .iter()
        .map(|p| {
            let mut row = Vec::with_capacity(cols + 1);
            let mut xp = Fp::ONE;
            for _ in 0..q_len {
                row.push(xp);
                xp *= p.x;
            }
            let mut xp = Fp::ONE;
            for _ in 0..e_max {
                row.push(-(p.y * xp));
                xp *= p.x;
            }
            row.push(p.y * xp);
            row
        })
        .collect();

    let solution = solve(&mut rows, cols).ok_or(failure.clone())?;
    let q = Polynomial::new(solution[..q_len].to_vec());
    let mut e_coeffs = solution[q_len..].to_vec();
    e_coeffs.push(Fp::ONE);
    let e = Polynomial::new(e_coeffs);

    let (f, rem) = q.div_rem(&e)?;
    if !rem.is_zero() || (!f.is_zero() && f.degree() > t) {
        return Err(failure);
    }
    let error_positions: BTreeSet<usize> =
        points.iter().enumerate().filter(|(_, p)| f.eval(p.x) != p.y).map(|(i, _)| i).collect();
    if error_positions.len() > e_max {
        return Err(failure);
    }
    Ok(Decoded { poly: f, error_positions })
}

/// Gauss–Jordan elimination on an augmented matrix with `cols` unknowns.
/// Returns one solution (free variables set to zero) or `None` if inconsistent.
fn solve<const P: u32>(rows: &mut [Vec<Fp<P>>], cols: usize) -> Option<Vec<Fp<P>>> {
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..cols {
        let Some(pr) = (r..rows.len()).find(|&i| !rows[i][c].is_zero()) else {
            continue;
        };
        rows.swap(r, pr);
        let inv = rows[r][c].inv().expect("pivot is nonzero");
        for v in rows[r].iter_mut() {
            *v *= inv;
        }
        let pivot_row = rows[r].clone();
        for (i, row) in rows.iter_mut().enumerate() {
            if i == r || row[c].is_zero() {
                continue;
            }
            let factor = row[c];
            for (v, &pv) in row.iter_mut().zip(&pivot_row) {
                *v -= factor * pv;
            }
        }
        pivots.push(c);
        r += 1;
        if r == rows.len() {
            break;
        }
    }
    if rows[r..].iter().any(|row| !row[cols].is_zero()) {
        return None;
    }
    let mut x = vec![Fp::ZERO; cols];
    for (i, &c) in pivots.iter().enumerate() {
        x[c] = rows[i][cols];
    }
    Some(x)
}
