//! Transport costs `c(s1, s2)` with analytic gradients in `s2`, the
//! concavity shift `U(s2)` and finite-difference checks of the twist
//! conditions.
//!
//! All costs here are separable over coordinates: `c(s1, s2) = sum_k
//! f(s1_k, s2_k)`. Problems are stated as maximizations, so the squared
//! Euclidean distance enters with a minus sign.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::measures::SampleSet;

/// `coef * s1^p1 * s2^p2`, summed over coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Monomial {
    pub coef: f64,
    pub p1: u32,
    pub p2: u32,
}

/// Sum of separable monomials, e.g. `-1*s1*s2^3 + 2*s2^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    fn eval1(&self, x: f64, y: f64) -> f64 {
        self.terms
            .iter()
            .map(|m| m.coef * x.powi(m.p1 as i32) * y.powi(m.p2 as i32))
            .sum()
    }

    fn d2(&self, x: f64, y: f64) -> f64 {
        self.terms
            .iter()
            .filter(|m| m.p2 > 0)
            .map(|m| m.coef * m.p2 as f64 * x.powi(m.p1 as i32) * y.powi(m.p2 as i32 - 1))
            .sum()
    }
}

impl FromStr for Polynomial {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::param(format!("polynomial `{s}`: {why}"));
        let normalized = s.replace(' ', "").replace("+-", "-").replace('-', "+-");
        let mut terms = Vec::new();
        for raw in normalized.split('+').filter(|t| !t.is_empty()) {
            let mut m = Monomial {
                coef: 1.0,
                p1: 0,
                p2: 0,
            };
            let (sign, body) = match raw.strip_prefix('-') {
                Some(rest) => (-1.0, rest),
                None => (1.0, raw),
            };
            for factor in body.split('*') {
                let (base, pow) = match factor.split_once('^') {
                    Some((b, p)) => (b, p.parse::<u32>().map_err(|_| bad("bad exponent"))?),
                    None => (factor, 1),
                };
                match base {
                    "s1" => m.p1 += pow,
                    "s2" => m.p2 += pow,
                    num => {
                        let v: f64 = num.parse().map_err(|_| bad("bad factor"))?;
                        m.coef *= v.powi(pow as i32);
                    }
                }
            }
            m.coef *= sign;
            terms.push(m);
        }
        if terms.is_empty() {
            return Err(bad("no terms"));
        }
        Ok(Polynomial { terms })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseCost {
    /// `(s1 + s2)^2`
    SumSquared,
    /// `-(s1 - s2)^2`
    NegDiffSquared,
    /// `-|s1 - s2|^2`, the sign-flipped squared 2-Wasserstein cost in R^d.
    NegL2Sq,
    /// `(s1 + s2)^3`
    CubicSum,
    Polynomial(Polynomial),
}

impl BaseCost {
    #[inline]
    fn eval1(&self, x: f64, y: f64) -> f64 {
        match self {
            BaseCost::SumSquared => (x + y) * (x + y),
            BaseCost::NegDiffSquared | BaseCost::NegL2Sq => -(x - y) * (x - y),
            BaseCost::CubicSum => {
                let s = x + y;
                s * s * s
            }
            BaseCost::Polynomial(p) => p.eval1(x, y),
        }
    }

    #[inline]
    fn d2(&self, x: f64, y: f64) -> f64 {
        match self {
            BaseCost::SumSquared => 2.0 * (x + y),
            BaseCost::NegDiffSquared | BaseCost::NegL2Sq => 2.0 * (x - y),
            BaseCost::CubicSum => 3.0 * (x + y) * (x + y),
            BaseCost::Polynomial(p) => p.d2(x, y),
        }
    }
}

/// `U(y) = sum_k cubic * y_k^3 + quadratic * y_k^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftU {
    pub cubic: f64,
    pub quadratic: f64,
}

impl ShiftU {
    pub const ZERO: ShiftU = ShiftU {
        cubic: 0.0,
        quadratic: 0.0,
    };

    #[inline]
    pub fn eval(&self, y: &[f64]) -> f64 {
        y.iter()
            .map(|&v| (self.cubic * v + self.quadratic) * v * v)
            .sum()
    }

    #[inline]
    fn d1(&self, v: f64) -> f64 {
        (3.0 * self.cubic * v + 2.0 * self.quadratic) * v
    }
}

/// How a cost picks its concavity shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShiftRule {
    Fixed(ShiftU),
    /// `U(y) = y^3 + beta y^2` with `beta = 3 max s1` over the first
    /// marginal's samples, which makes `d2/ds2^2 [(s1+s2)^3 - U] = 6 s1 - 2 beta <= 0`.
    CubicOverDomain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostFn {
    name: String,
    base: BaseCost,
    shift_rule: Option<ShiftRule>,
    applied: Option<ShiftU>,
}

impl fmt::Display for CostFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.applied {
            Some(u) => write!(
                f,
                "{} - U (U = {}*y^3 + {}*y^2)",
                self.name, u.cubic, u.quadratic
            ),
            None => f.write_str(&self.name),
        }
    }
}

pub const BUILTIN_COSTS: [&str; 4] = ["sum_squared", "neg_diff_squared", "neg_l2sq_d", "cubic_sum"];

pub fn builtin_cost(name: &str) -> Result<CostFn> {
    let (base, rule) = match name {
        "sum_squared" => (
            BaseCost::SumSquared,
            ShiftRule::Fixed(ShiftU {
                cubic: 0.0,
                quadratic: 2.0,
            }),
        ),
        "neg_diff_squared" => (BaseCost::NegDiffSquared, ShiftRule::Fixed(ShiftU::ZERO)),
        "neg_l2sq_d" => (BaseCost::NegL2Sq, ShiftRule::Fixed(ShiftU::ZERO)),
        "cubic_sum" => (BaseCost::CubicSum, ShiftRule::CubicOverDomain),
        other => return Err(Error::Lookup(other.to_string())),
    };
    Ok(CostFn {
        name: name.to_string(),
        base,
        shift_rule: Some(rule),
        applied: None,
    })
}

impl CostFn {
    /// Custom polynomial cost without a known shift.
    pub fn polynomial(poly: Polynomial) -> Self {
        CostFn {
            name: "polynomial".into(),
            base: BaseCost::Polynomial(poly),
            shift_rule: None,
            applied: None,
        }
    }

    /// Looks up a builtin by name, otherwise parses a polynomial.
    pub fn parse(text: &str) -> Result<Self> {
        match builtin_cost(text) {
            Ok(c) => Ok(c),
            Err(Error::Lookup(_)) if text.contains("s1") || text.contains("s2") => {
                Ok(Self::polynomial(text.parse()?))
            }
            Err(e) => Err(e),
        }
    }

    pub fn with_shift_rule(mut self, rule: ShiftRule) -> Self {
        self.shift_rule = Some(rule);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base(&self) -> &BaseCost {
        &self.base
    }

    pub fn shift_rule(&self) -> Option<ShiftRule> {
        self.shift_rule
    }

    /// The shift subtracted from this cost, if it is a shifted cost.
    pub fn applied_shift(&self) -> Option<ShiftU> {
        self.applied
    }

    #[inline]
    pub fn eval(&self, s1: &[f64], s2: &[f64]) -> f64 {
        let mut v: f64 = s1
            .iter()
            .zip(s2)
            .map(|(&x, &y)| self.base.eval1(x, y))
            .sum();
        if let Some(u) = &self.applied {
            v -= u.eval(s2);
        }
        v
    }

    /// Writes the gradient with respect to `s2` into `out`.
    #[inline]
    pub fn grad_s2(&self, s1: &[f64], s2: &[f64], out: &mut [f64]) {
        for ((o, &x), &y) in out.iter_mut().zip(s1).zip(s2) {
            *o = self.base.d2(x, y);
            if let Some(u) = &self.applied {
                *o -= u.d1(y);
            }
        }
    }

    pub fn grad_s2_vec(&self, s1: &[f64], s2: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; s2.len()];
        self.grad_s2(s1, s2, &mut g);
        g
    }

    /// `E[U(S2)]` over the samples for a shifted cost, zero otherwise. Adding
    /// it to the value of the shifted problem recovers the original value.
    pub fn value_correction(&self, mu2: &SampleSet) -> f64 {
        match &self.applied {
            Some(u) => mu2.rows().map(|r| u.eval(r)).sum::<f64>() / mu2.len() as f64,
            None => 0.0,
        }
    }

    /// Same correction for a weighted list of atoms.
    pub fn value_correction_atoms(&self, atoms: &[f64], weights: &[f64], dim: usize) -> f64 {
        match &self.applied {
            Some(u) => atoms
                .chunks(dim)
                .zip(weights)
                .map(|(r, w)| w * u.eval(r))
                .sum(),
            None => 0.0,
        }
    }
}

/// `c - U` for the cost's shift rule. The domain samples only matter for
/// shifts that depend on where the first marginal lives.
pub fn shifted_cost(c: &CostFn, mu1: &SampleSet) -> Result<CostFn> {
    if c.applied.is_some() {
        return Err(Error::Unsupported(format!("cost `{}` is already shifted", c.name)));
    }
    let u = match c.shift_rule {
        None => {
            return Err(Error::Unsupported(format!(
                "cost `{}` has no concavity shift",
                c.name
            )))
        }
        Some(ShiftRule::Fixed(u)) => u,
        Some(ShiftRule::CubicOverDomain) => {
            let max_s1 = mu1
                .points
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            ShiftU {
                cubic: 1.0,
                quadratic: 3.0 * max_s1,
            }
        }
    };
    let mut out = c.clone();
    out.applied = Some(u);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwistStatus {
    Holds,
    Fails,
    /// No cheap certificate exists in d > 1.
    Unchecked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwistReport {
    pub status: TwistStatus,
    pub probes: usize,
}

impl TwistReport {
    pub fn ok(&self) -> bool {
        self.status == TwistStatus::Holds
    }
}

const FD_STEP: f64 = 1e-5;

fn d_s1(c: &CostFn, x: f64, y: f64) -> f64 {
    (c.eval(&[x + FD_STEP], &[y]) - c.eval(&[x - FD_STEP], &[y])) / (2.0 * FD_STEP)
}

/// Finite-difference `d^2 c / ds1 ds2` in d = 1.
pub fn mixed_derivative(c: &CostFn, x: f64, y: f64) -> f64 {
    let h = 1e-4;
    (c.eval(&[x + h], &[y + h]) - c.eval(&[x + h], &[y - h]) - c.eval(&[x - h], &[y + h])
        + c.eval(&[x - h], &[y - h]))
        / (4.0 * h * h)
}

/// Finite-difference `d/ds1 d^2/ds2^2 c` in d = 1.
pub fn martingale_twist_derivative(c: &CostFn, x: f64, y: f64) -> f64 {
    let h = 1e-2;
    let second = |x: f64| {
        (c.eval(&[x], &[y + h]) - 2.0 * c.eval(&[x], &[y]) + c.eval(&[x], &[y - h])) / (h * h)
    };
    (second(x + h) - second(x - h)) / (2.0 * h)
}

/// Checks that `s2 -> dc/ds1(s1, s2)` is strictly monotone for each probe
/// `s1`, which in d = 1 is injectivity.
pub fn check_twist(c: &CostFn, probe_s1: &[Vec<f64>], probe_s2: &[Vec<f64>]) -> TwistReport {
    let probes = probe_s1.len() * probe_s2.len();
    if probe_s1.is_empty() || probe_s2.is_empty() {
        return TwistReport {
            status: TwistStatus::Unchecked,
            probes,
        };
    }
    if probe_s1.iter().chain(probe_s2).any(|p| p.len() != 1) {
        return TwistReport {
            status: TwistStatus::Unchecked,
            probes,
        };
    }
    let mut ys: Vec<f64> = probe_s2.iter().map(|p| p[0]).collect();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut holds = true;
    for p in probe_s1 {
        let x = p[0];
        let g: Vec<f64> = ys.iter().map(|&y| d_s1(c, x, y)).collect();
        let mut sign = 0.0;
        for w in g.windows(2) {
            let diff = w[1] - w[0];
            if diff.abs() <= 1e-8 * (1.0 + w[0].abs()) {
                holds = false;
                break;
            }
            if sign == 0.0 {
                sign = diff.signum();
            } else if diff.signum() != sign {
                holds = false;
                break;
            }
        }
        if !holds {
            break;
        }
    }
    TwistReport {
        status: if holds {
            TwistStatus::Holds
        } else {
            TwistStatus::Fails
        },
        probes,
    }
}

/// Checks `d/ds1 d^2/ds2^2 c >= -1e-8` on every probe pair (d = 1 only).
pub fn check_martingale_twist(
    c: &CostFn,
    probe_s1: &[Vec<f64>],
    probe_s2: &[Vec<f64>],
) -> TwistReport {
    let probes = probe_s1.len() * probe_s2.len();
    if probes == 0 || probe_s1.iter().chain(probe_s2).any(|p| p.len() != 1) {
        return TwistReport {
            status: TwistStatus::Unchecked,
            probes,
        };
    }
    let holds = probe_s1.iter().all(|x| {
        probe_s2
            .iter()
            .all(|y| martingale_twist_derivative(c, x[0], y[0]) >= -1e-8)
    });
    TwistReport {
        status: if holds {
            TwistStatus::Holds
        } else {
            TwistStatus::Fails
        },
        probes,
    }
}

/// Largest eigenvalue of the finite-difference Hessian of `c(s1, .)` at `s2`.
pub fn max_hessian_eigenvalue_s2(c: &CostFn, s1: &[f64], s2: &[f64]) -> f64 {
    let d = s2.len();
    let h = 1e-4;
    let mut hess = DMatrix::<f64>::zeros(d, d);
    let mut y = s2.to_vec();
    let f0 = c.eval(s1, &y);
    for i in 0..d {
        for j in i..d {
            let v = if i == j {
                y[i] = s2[i] + h;
                let fp = c.eval(s1, &y);
                y[i] = s2[i] - h;
                let fm = c.eval(s1, &y);
                y[i] = s2[i];
                (fp - 2.0 * f0 + fm) / (h * h)
            } else {
                let mut corner = |si: f64, sj: f64| {
                    y[i] = s2[i] + si * h;
                    y[j] = s2[j] + sj * h;
                    let f = c.eval(s1, &y);
                    y[i] = s2[i];
                    y[j] = s2[j];
                    f
                };
                (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                    / (4.0 * h * h)
            };
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    SymmetricEigen::new(hess)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{sample, Measure};
    use rand::Rng as _;

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64])
            .collect()
    }

    #[test]
    fn builtin_values() {
        let c = builtin_cost("sum_squared").unwrap();
        assert_eq!(c.eval(&[1.0], &[1.0]), 4.0);
        assert_eq!(c.grad_s2_vec(&[1.0], &[1.0]), vec![4.0]);
        let c = builtin_cost("neg_diff_squared").unwrap();
        assert_eq!(c.eval(&[0.7], &[0.7]), 0.0);
        assert_eq!(c.grad_s2_vec(&[0.7], &[0.7]), vec![0.0]);
        let c = builtin_cost("cubic_sum").unwrap();
        assert_eq!(c.eval(&[1.0], &[2.0]), 27.0);
        let c = builtin_cost("neg_l2sq_d").unwrap();
        assert_eq!(c.eval(&[1.0, 2.0], &[0.0, 0.0]), -5.0);
    }

    #[test]
    fn unknown_name_is_a_lookup_error() {
        assert!(matches!(builtin_cost("nope"), Err(Error::Lookup(_))));
    }

    #[test]
    fn polynomial_grammar() {
        let p: Polynomial = "-1*s1*s2^3 + 2*s2^2 - 0.5".parse().unwrap();
        assert_eq!(p.terms.len(), 3);
        let c = CostFn::polynomial(p);
        assert!((c.eval(&[2.0], &[1.5]) - (-2.0 * 3.375 + 4.5 - 0.5)).abs() < 1e-12);
        assert!("s1^x".parse::<Polynomial>().is_err());
        assert!(CostFn::parse("(s1+s2)").is_err());
        assert!(CostFn::parse("s1*s2").is_ok());
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = crate::measures::seeded_rng(4);
        let costs = [
            builtin_cost("sum_squared").unwrap(),
            builtin_cost("neg_diff_squared").unwrap(),
            builtin_cost("neg_l2sq_d").unwrap(),
            builtin_cost("cubic_sum").unwrap(),
            CostFn::parse("3*s1^2*s2^3 - s2^2").unwrap(),
        ];
        let mu = sample(&Measure::normal(1.0, 0.3).unwrap(), 100, 5).unwrap();
        for base in costs {
            let shifted = shifted_cost(&base, &mu).ok();
            for c in std::iter::once(base).chain(shifted) {
                for _ in 0..100 {
                    let x = vec![rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)];
                    let y = vec![rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)];
                    let g = c.grad_s2_vec(&x, &y);
                    for k in 0..2 {
                        let h = 1e-5;
                        let mut yp = y.clone();
                        let mut ym = y.clone();
                        yp[k] += h;
                        ym[k] -= h;
                        let fd = (c.eval(&x, &yp) - c.eval(&x, &ym)) / (2.0 * h);
                        let rel = (fd - g[k]).abs() / g[k].abs().max(1.0);
                        assert!(rel < 1e-6, "{c}: {fd} vs {}", g[k]);
                    }
                }
            }
        }
    }

    #[test]
    fn twist_reports() {
        let p1 = grid(0.5, 2.0, 7);
        let p2 = grid(0.3, 2.5, 11);
        assert!(check_twist(&builtin_cost("sum_squared").unwrap(), &p1, &p2).ok());
        assert!(check_twist(&builtin_cost("neg_diff_squared").unwrap(), &p1, &p2).ok());
        let constant = CostFn::parse("1*s1^0*s2^0").unwrap();
        assert_eq!(
            check_twist(&constant, &p1, &p2).status,
            TwistStatus::Fails
        );
        let d2 = vec![vec![0.0, 1.0]];
        assert_eq!(
            check_twist(&builtin_cost("neg_l2sq_d").unwrap(), &d2, &d2).status,
            TwistStatus::Unchecked
        );
    }

    #[test]
    fn twist_derivative_matches_analytic_value() {
        // d/ds1 (s1 + s2)^2 = 2 (s1 + s2); mixed derivative 2
        let c = builtin_cost("sum_squared").unwrap();
        assert!((d_s1(&c, 0.4, 1.1) - 3.0).abs() < 1e-8);
        assert!((mixed_derivative(&c, 0.4, 1.1) - 2.0).abs() < 1e-6);
        let c = builtin_cost("neg_diff_squared").unwrap();
        assert!((d_s1(&c, 0.4, 1.1) - 1.4).abs() < 1e-8);
    }

    #[test]
    fn martingale_twist_reports() {
        let p1 = grid(0.5, 2.0, 7);
        let p2 = grid(0.3, 2.5, 11);
        let cubic = builtin_cost("cubic_sum").unwrap();
        assert!(check_martingale_twist(&cubic, &p1, &p2).ok());
        assert!((martingale_twist_derivative(&cubic, 1.0, 1.0) - 6.0).abs() < 1e-6);
        assert!(check_martingale_twist(&builtin_cost("neg_diff_squared").unwrap(), &p1, &p2).ok());
        let bad = CostFn::parse("-1*s1*s2^3").unwrap();
        assert!(!check_martingale_twist(&bad, &p1, &p2).ok());
    }

    #[test]
    fn shifted_costs_are_concave_in_s2() {
        let mu = sample(&Measure::lognormal(1.0, 0.04).unwrap(), 2000, 1).unwrap();
        let mu2 = sample(&Measure::lognormal(1.0, 0.06).unwrap(), 2000, 2).unwrap();
        for name in BUILTIN_COSTS {
            let c = shifted_cost(&builtin_cost(name).unwrap(), &mu).unwrap();
            for i in (0..2000).step_by(37) {
                let e = max_hessian_eigenvalue_s2(&c, mu.row(i), mu2.row(i));
                assert!(e <= 1e-6, "{name}: eigenvalue {e}");
            }
        }
        let sq = shifted_cost(&builtin_cost("sum_squared").unwrap(), &mu).unwrap();
        // (x + y)^2 - 2 y^2
        assert!((sq.eval(&[1.0], &[2.0]) - 1.0).abs() < 1e-12);
        assert!((max_hessian_eigenvalue_s2(&sq, &[0.3], &[1.2]) + 2.0).abs() < 1e-5);
        let nd = builtin_cost("neg_diff_squared").unwrap();
        let nd_shifted = shifted_cost(&nd, &mu).unwrap();
        assert_eq!(nd.eval(&[0.3], &[1.7]), nd_shifted.eval(&[0.3], &[1.7]));
        assert_eq!(nd_shifted.value_correction(&mu2), 0.0);
    }

    #[test]
    fn shift_keeps_the_twist_verdict() {
        let mu = sample(&Measure::lognormal(1.0, 0.04).unwrap(), 500, 1).unwrap();
        let p1 = grid(0.5, 2.0, 7);
        let p2 = grid(0.3, 2.5, 11);
        for name in ["sum_squared", "neg_diff_squared", "cubic_sum"] {
            let c = builtin_cost(name).unwrap();
            let s = shifted_cost(&c, &mu).unwrap();
            assert_eq!(check_twist(&c, &p1, &p2), check_twist(&s, &p1, &p2), "{name}");
        }
    }

    #[test]
    fn missing_shift_is_unsupported() {
        let mu = sample(&Measure::normal(0.0, 1.0).unwrap(), 10, 1).unwrap();
        let c = CostFn::parse("s1*s2").unwrap();
        assert!(matches!(shifted_cost(&c, &mu), Err(Error::Unsupported(_))));
        let s = shifted_cost(&builtin_cost("sum_squared").unwrap(), &mu).unwrap();
        assert!(matches!(shifted_cost(&s, &mu), Err(Error::Unsupported(_))));
    }
}
