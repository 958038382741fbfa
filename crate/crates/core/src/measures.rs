//! Probability measures on R^d: normal and log-normal product laws,
//! weighted empirical atoms, sampling, quantiles and a Monte-Carlo
//! convex-order check.
//!
//! Log-normal marginals are parametrized by a `center` and a log-variance
//! `v`: `X = center * exp(-v/2 + sqrt(v) G)` with `G ~ N(0,1)`. The mean of
//! `X` is exactly `center`, so two log-normals with the same center and
//! increasing `v` are in convex order.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Portable seeded generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One-dimensional analytic family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Normal { mean: f64, variance: f64 },
    LogNormal { center: f64, log_variance: f64 },
}

impl Family {
    fn validate(&self) -> Result<()> {
        match *self {
            Family::Normal { mean, variance } => {
                if !mean.is_finite() || !(variance > 0.0) || !variance.is_finite() {
                    return Err(Error::param(format!(
                        "normal needs finite mean and variance > 0 (got {mean}, {variance})"
                    )));
                }
            }
            Family::LogNormal {
                center,
                log_variance,
            } => {
                if !(center > 0.0) || !center.is_finite() {
                    return Err(Error::param(format!(
                        "log-normal center must be > 0 (got {center})"
                    )));
                }
                if !(log_variance > 0.0) || !log_variance.is_finite() {
                    return Err(Error::param(format!(
                        "log-normal variance must be > 0 (got {log_variance})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Maps a standard normal draw to this family.
    #[inline]
    pub fn from_gaussian(&self, g: f64) -> f64 {
        match *self {
            Family::Normal { mean, variance } => mean + variance.sqrt() * g,
            Family::LogNormal {
                center,
                log_variance,
            } => center * (-0.5 * log_variance + log_variance.sqrt() * g).exp(),
        }
    }

    /// Inverse of [`Family::from_gaussian`]; `None` outside the support.
    fn to_gaussian(&self, x: f64) -> Option<f64> {
        match *self {
            Family::Normal { mean, variance } => Some((x - mean) / variance.sqrt()),
            Family::LogNormal {
                center,
                log_variance,
            } => {
                if x <= 0.0 {
                    None
                } else {
                    Some(((x / center).ln() + 0.5 * log_variance) / log_variance.sqrt())
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Family::Normal { mean, .. } => mean,
            Family::LogNormal { center, .. } => center,
        }
    }

    pub fn quantile(&self, u: f64) -> f64 {
        self.from_gaussian(std_normal().inverse_cdf(u))
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self.to_gaussian(x) {
            Some(g) => std_normal().cdf(g),
            None => 0.0,
        }
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeasureKind {
    /// Product law with one family per coordinate.
    Analytic(Vec<Family>),
    /// Weighted atoms; `points` is row-major with `dim` columns.
    Empirical { points: Vec<f64>, weights: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measure {
    kind: MeasureKind,
    dim: usize,
}

impl Measure {
    pub fn analytic(families: Vec<Family>) -> Result<Self> {
        if families.is_empty() {
            return Err(Error::param("analytic measure needs at least one dimension"));
        }
        for f in &families {
            f.validate()?;
        }
        let dim = families.len();
        Ok(Measure {
            kind: MeasureKind::Analytic(families),
            dim,
        })
    }

    pub fn normal(mean: f64, variance: f64) -> Result<Self> {
        Self::analytic(vec![Family::Normal { mean, variance }])
    }

    pub fn lognormal(center: f64, log_variance: f64) -> Result<Self> {
        Self::analytic(vec![Family::LogNormal {
            center,
            log_variance,
        }])
    }

    /// Uncorrelated product of `dim` copies of the same family.
    pub fn iid(family: Family, dim: usize) -> Result<Self> {
        Self::analytic(vec![family; dim])
    }

    pub fn empirical(points: Vec<f64>, weights: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dimension must be positive"));
        }
        if weights.is_empty() || points.len() != weights.len() * dim {
            return Err(Error::param(format!(
                "{} coordinates do not match {} atoms of dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::param("empirical weights must be positive and finite"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::param(format!(
                "empirical weights sum to {total}, expected 1"
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::param("empirical atoms must be finite"));
        }
        Ok(Measure {
            kind: MeasureKind::Empirical { points, weights },
            dim,
        })
    }

    /// Equal-weight empirical measure on the points of a sample set.
    pub fn from_samples(samples: &SampleSet) -> Result<Self> {
        let n = samples.len();
        let w = 1.0 / n as f64;
        let mut weights = vec![w; n];
        // absorb rounding so the sum is 1 to the last ulp we can manage
        let excess: f64 = weights.iter().sum::<f64>() - 1.0;
        weights[0] -= excess;
        Self::empirical(samples.points.clone(), weights, samples.dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &MeasureKind {
        &self.kind
    }

    /// Per-coordinate mean.
    pub fn mean(&self) -> Vec<f64> {
        match &self.kind {
            MeasureKind::Analytic(fams) => fams.iter().map(Family::mean).collect(),
            MeasureKind::Empirical { points, weights } => {
                let mut m = vec![0.0; self.dim];
                for (row, w) in points.chunks(self.dim).zip(weights) {
                    for (mk, x) in m.iter_mut().zip(row) {
                        *mk += w * x;
                    }
                }
                m
            }
        }
    }

    /// Inverse CDF of a one-dimensional measure. For empirical measures this
    /// is the left-continuous generalized inverse; equal atoms are ordered by
    /// their index.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Domain(format!("quantile level {u} not in (0,1)")));
        }
        self.require_1d("quantile")?;
        match &self.kind {
            MeasureKind::Analytic(fams) => Ok(fams[0].quantile(u)),
            MeasureKind::Empirical { points, weights } => {
                let order = sorted_order(points);
                let mut cum = 0.0;
                for &i in &order {
                    cum += weights[i];
                    if cum >= u - 1e-14 {
                        return Ok(points[i]);
                    }
                }
                Ok(points[*order.last().expect("non-empty")])
            }
        }
    }

    pub fn cdf(&self, x: f64) -> Result<f64> {
        self.require_1d("cdf")?;
        match &self.kind {
            MeasureKind::Analytic(fams) => Ok(fams[0].cdf(x)),
            MeasureKind::Empirical { points, weights } => Ok(points
                .iter()
                .zip(weights)
                .filter(|(p, _)| **p <= x)
                .map(|(_, w)| w)
                .sum()),
        }
    }

    fn require_1d(&self, what: &str) -> Result<()> {
        if self.dim != 1 {
            return Err(Error::Unsupported(format!(
                "{what} needs a one-dimensional measure (dim = {})",
                self.dim
            )));
        }
        Ok(())
    }

    /// `n` equal-weight atoms at the quantiles `(i + 1/2) / n`.
    pub fn quantile_atoms(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::param("need at least one atom"));
        }
        (0..n)
            .map(|i| self.quantile((i as f64 + 0.5) / n as f64))
            .collect()
    }
}

fn sorted_order(points: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    // stable sort keeps the lowest index first among ties
    order.sort_by(|&a, &b| points[a].total_cmp(&points[b]));
    order
}

/// Draws from a measure, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub points: Vec<f64>,
    pub dim: usize,
    pub seed: u64,
}

impl SampleSet {
    pub fn new(points: Vec<f64>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::param(format!(
                "{} coordinates cannot form rows of dimension {dim}",
                points.len()
            )));
        }
        Ok(SampleSet { points, dim, seed })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.points.chunks_exact(self.dim)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for row in self.rows() {
            for (mk, x) in m.iter_mut().zip(row) {
                *mk += x;
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|x| *x /= n);
        m
    }

    /// Bounding box `(min, max)` per coordinate.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); self.dim];
        for row in self.rows() {
            for (bk, &x) in b.iter_mut().zip(row) {
                bk.0 = bk.0.min(x);
                bk.1 = bk.1.max(x);
            }
        }
        b
    }
}

/// `n` i.i.d. draws. Empirical measures are resampled with replacement
/// according to their weights.
pub fn sample(m: &Measure, n: usize, seed: u64) -> Result<SampleSet> {
    let mut rng = seeded_rng(seed);
    let points = sample_with(m, n, &mut rng)?;
    SampleSet::new(points, m.dim, seed)
}

/// Same as [`sample`] but drawing from a caller-owned generator.
pub fn sample_with(m: &Measure, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let d = m.dim;
    let mut points = Vec::with_capacity(n * d);
    match &m.kind {
        MeasureKind::Analytic(fams) => {
            for f in fams {
                f.validate()?;
            }
            for _ in 0..n {
                for f in fams {
                    let g: f64 = StandardNormal.sample(rng);
                    points.push(f.from_gaussian(g));
                }
            }
        }
        MeasureKind::Empirical {
            points: atoms,
            weights,
        } => {
            let idx = WeightedIndex::new(weights.iter().copied())
                .map_err(|e| Error::param(format!("empirical weights: {e}")))?;
            for _ in 0..n {
                let i = idx.sample(rng);
                points.extend_from_slice(&atoms[i * d..(i + 1) * d]);
            }
        }
    }
    Ok(points)
}

/// Joint law of the Gaussian drivers when two analytic marginals are
/// simulated together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathCoupling {
    /// Separate streams for the two marginals.
    Independent,
    /// One Brownian path read at two times: per coordinate the drivers
    /// have correlation `sqrt(v1 / v2)`, with `v` the (log-)variance.
    Brownian,
    /// The same Gaussian draws feed both marginals.
    Common,
}

impl PathCoupling {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "independent" => Ok(PathCoupling::Independent),
            "brownian" => Ok(PathCoupling::Brownian),
            "common" => Ok(PathCoupling::Common),
            other => Err(Error::Lookup(other.to_string())),
        }
    }
}

fn driver_variance(f: &Family) -> f64 {
    match *f {
        Family::Normal { variance, .. } => variance,
        Family::LogNormal { log_variance, .. } => log_variance,
    }
}

/// `n` draws of each marginal. Each marginal on its own is an i.i.d.
/// sample of its law; `coupling` only fixes how the two sets relate.
/// Non-independent couplings need analytic marginals of equal dimension.
pub fn sample_pair(
    m1: &Measure,
    m2: &Measure,
    n: usize,
    coupling: PathCoupling,
    seed: u64,
) -> Result<(SampleSet, SampleSet)> {
    if coupling == PathCoupling::Independent {
        return Ok((sample(m1, n, seed)?, sample(m2, n, seed.wrapping_add(1))?));
    }
    let (f1, f2) = match (&m1.kind, &m2.kind) {
        (MeasureKind::Analytic(a), MeasureKind::Analytic(b)) if a.len() == b.len() => (a, b),
        _ => {
            return Err(Error::Unsupported(
                "coupled sampling needs two analytic marginals of equal dimension".into(),
            ))
        }
    };
    for f in f1.iter().chain(f2) {
        f.validate()?;
    }
    let rho: Vec<f64> = f1
        .iter()
        .zip(f2)
        .map(|(a, b)| match coupling {
            PathCoupling::Common => 1.0,
            _ => {
                let (va, vb) = (driver_variance(a), driver_variance(b));
                (va.min(vb) / va.max(vb)).sqrt()
            }
        })
        .collect();
    let mut rng = seeded_rng(seed);
    let d = f1.len();
    let mut p1 = Vec::with_capacity(n * d);
    let mut p2 = Vec::with_capacity(n * d);
    for _ in 0..n {
        for k in 0..d {
            let g1: f64 = StandardNormal.sample(&mut rng);
            let g2 = if rho[k] < 1.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                rho[k] * g1 + (1.0 - rho[k] * rho[k]).sqrt() * z
            } else {
                g1
            };
            // the driver of the smaller variance is read first in time
            let (ga, gb) = if driver_variance(&f1[k]) <= driver_variance(&f2[k]) {
                (g1, g2)
            } else {
                (g2, g1)
            };
            p1.push(f1[k].from_gaussian(ga));
            p2.push(f2[k].from_gaussian(gb));
        }
    }
    Ok((SampleSet::new(p1, d, seed)?, SampleSet::new(p2, d, seed)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexOrderReport {
    pub ok: bool,
    /// Largest `E1[(S-K)+] - E2[(S-K)+]` over the strikes; positive values
    /// contradict the convex order.
    pub worst_violation: f64,
    /// Statistical tolerance at the worst strike.
    pub tolerance: f64,
    pub mean_gap: f64,
    pub mean_tolerance: f64,
}

/// Monte-Carlo test of `m1 <= m2` in the convex order through call prices
/// and means. Each comparison passes when the gap is below three standard
/// errors of the difference of the two independent estimates.
pub fn check_convex_order(
    m1: &Measure,
    m2: &Measure,
    strikes: &[f64],
    n: usize,
    seed: u64,
) -> Result<ConvexOrderReport> {
    if m1.dim != 1 || m2.dim != 1 {
        return Err(Error::Unsupported("convex order check needs d = 1".into()));
    }
    if strikes.is_empty() {
        return Err(Error::param("need at least one strike"));
    }
    if n < 2 {
        return Err(Error::param("need at least two draws"));
    }
    let s1 = sample(m1, n, seed)?;
    let s2 = sample(m2, n, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
    convex_order_on(&s1.points, &s2.points, strikes)
}

/// Same test on two given one-dimensional sample sets, with `n_strikes`
/// strikes at evenly spaced quantiles of the pooled draws.
pub fn check_convex_order_samples(
    s1: &SampleSet,
    s2: &SampleSet,
    n_strikes: usize,
) -> Result<ConvexOrderReport> {
    if s1.dim != 1 || s2.dim != 1 {
        return Err(Error::Unsupported("convex order check needs d = 1".into()));
    }
    if s1.len() < 2 || s2.len() < 2 || n_strikes == 0 {
        return Err(Error::param("need at least two draws per side and one strike"));
    }
    let mut pooled: Vec<f64> = s1.points.iter().chain(&s2.points).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let strikes: Vec<f64> = (0..n_strikes)
        .map(|i| {
            let u = (i as f64 + 0.5) / n_strikes as f64;
            pooled[((u * pooled.len() as f64) as usize).min(pooled.len() - 1)]
        })
        .collect();
    convex_order_on(&s1.points, &s2.points, &strikes)
}

fn convex_order_on(x1: &[f64], x2: &[f64], strikes: &[f64]) -> Result<ConvexOrderReport> {
    let mean_sd = |xs: &[f64]| {
        let nf = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / nf;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (nf - 1.0);
        (m, v.sqrt() / nf.sqrt())
    };
    let three_se = |se1: f64, se2: f64| 3.0 * (se1 * se1 + se2 * se2).sqrt();

    let (mean1, se1) = mean_sd(x1);
    let (mean2, se2) = mean_sd(x2);
    let mean_gap = mean1 - mean2;
    let mean_tolerance = three_se(se1, se2);
    let mut ok = mean_gap.abs() <= mean_tolerance;

    let mut worst_violation = f64::NEG_INFINITY;
    let mut tol_at_worst = 0.0;
    let mut pay1 = vec![0.0; x1.len()];
    let mut pay2 = vec![0.0; x2.len()];
    for &k in strikes {
        pay1.iter_mut()
            .zip(x1)
            .for_each(|(p, x)| *p = (x - k).max(0.0));
        let (c1, e1) = mean_sd(&pay1);
        pay2.iter_mut()
            .zip(x2)
            .for_each(|(p, x)| *p = (x - k).max(0.0));
        let (c2, e2) = mean_sd(&pay2);
        let gap = c1 - c2;
        let tol = three_se(e1, e2);
        if gap > tol {
            ok = false;
        }
        if gap > worst_violation {
            worst_violation = gap;
            tol_at_worst = tol;
        }
    }
    Ok(ConvexOrderReport {
        ok,
        worst_violation,
        tolerance: tol_at_worst,
        mean_gap,
        mean_tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coupled_marginals_keep_their_laws() {
        let m1 = Measure::lognormal(1.0, 0.04).unwrap();
        let m2 = Measure::lognormal(1.0, 0.06).unwrap();
        for c in [PathCoupling::Independent, PathCoupling::Brownian, PathCoupling::Common] {
            let (a, b) = sample_pair(&m1, &m2, 200_000, c, 5).unwrap();
            for (s, v) in [(&a, 0.04f64), (&b, 0.06)] {
                let logs: Vec<f64> = s.points.iter().map(|x| x.ln()).collect();
                let m = logs.iter().sum::<f64>() / logs.len() as f64;
                let var = logs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / logs.len() as f64;
                assert!((m + v / 2.0).abs() < 0.003, "{c:?} mean {m}");
                assert!((var / v - 1.0).abs() < 0.02, "{c:?} var {var}");
            }
        }
    }

    #[test]
    fn brownian_coupling_correlates_log_increments() {
        let m1 = Measure::lognormal(1.0, 0.04).unwrap();
        let m2 = Measure::lognormal(1.0, 0.06).unwrap();
        let (a, b) = sample_pair(&m1, &m2, 200_000, PathCoupling::Brownian, 8).unwrap();
        let la: Vec<f64> = a.points.iter().map(|x| x.ln()).collect();
        let lb: Vec<f64> = b.points.iter().map(|x| x.ln()).collect();
        let n = la.len() as f64;
        let (ma, mb) = (la.iter().sum::<f64>() / n, lb.iter().sum::<f64>() / n);
        let cov = la.iter().zip(&lb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        // Cov(W_1, W_1.5) = 0.04 for a Brownian path
        assert!((cov - 0.04).abs() < 0.002, "{cov}");
        let (c1, c2) = sample_pair(&m1, &m2, 10, PathCoupling::Common, 8).unwrap();
        for (x, y) in c1.points.iter().zip(&c2.points) {
            assert!(m1.cdf(*x).unwrap() - m2.cdf(*y).unwrap() < 1e-12);
        }
        let e = Measure::empirical(vec![1.0], vec![1.0], 1).unwrap();
        assert!(sample_pair(&e, &m2, 10, PathCoupling::Common, 1).is_err());
    }

    #[test]
    fn single_atom_sampling_repeats_the_atom() {
        let m = Measure::empirical(vec![2.5], vec![1.0], 1).unwrap();
        let s = sample(&m, 5, 11).unwrap();
        assert_eq!(s.points, vec![2.5; 5]);
    }

    #[test]
    fn lognormal_draws_are_positive() {
        let m = Measure::lognormal(1.0, 0.04).unwrap();
        let s = sample(&m, 1 << 13, 3).unwrap();
        assert_eq!(s.len(), 8192);
        assert!(s.points.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn normal_sample_mean_is_near_zero() {
        let m = Measure::normal(0.0, 1.0).unwrap();
        let s = sample(&m, 1_000_000, 5).unwrap();
        assert!(s.mean()[0].abs() < 0.01);
    }

    #[test]
    fn sampling_is_deterministic_in_the_seed() {
        let m = Measure::iid(
            Family::LogNormal {
                center: 1.0,
                log_variance: 0.04,
            },
            3,
        )
        .unwrap();
        assert_eq!(sample(&m, 100, 9).unwrap(), sample(&m, 100, 9).unwrap());
        assert_ne!(sample(&m, 100, 9).unwrap(), sample(&m, 100, 10).unwrap());
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(matches!(Measure::normal(0.0, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(
            Measure::lognormal(1.0, -1.0),
            Err(Error::Parameter(_))
        ));
        assert!(Measure::empirical(vec![1.0, 2.0], vec![0.5, 0.4], 1).is_err());
        assert!(Measure::empirical(vec![1.0, 2.0], vec![1.0, 0.0], 1).is_err());
    }

    #[test]
    fn quantile_simple_cases() {
        let n = Measure::normal(0.0, 1.0).unwrap();
        assert!(n.quantile(0.5).unwrap().abs() < 1e-12);
        let e = Measure::empirical(vec![1.0, 2.0], vec![0.5, 0.5], 1).unwrap();
        assert_eq!(e.quantile(0.25).unwrap(), 1.0);
        assert_eq!(e.quantile(0.5).unwrap(), 1.0);
        assert_eq!(e.quantile(0.75).unwrap(), 2.0);
    }

    #[test]
    fn lognormal_median_matches_bisection_on_cdf() {
        let m = Measure::lognormal(1.0, 0.04).unwrap();
        // closed form median of exp(-v/2 + sqrt(v) G)
        let closed = (-0.02f64).exp();
        let (mut lo, mut hi) = (0.1, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if m.cdf(mid).unwrap() < 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let q = m.quantile(0.5).unwrap();
        assert!((q - closed).abs() < 1e-12);
        assert!((q - 0.5 * (lo + hi)).abs() < 1e-10);
    }

    #[test]
    fn quantile_rejects_bad_levels_and_dims() {
        let m = Measure::normal(0.0, 1.0).unwrap();
        assert!(matches!(m.quantile(0.0), Err(Error::Domain(_))));
        assert!(matches!(m.quantile(1.0), Err(Error::Domain(_))));
        let m2 = Measure::iid(
            Family::Normal {
                mean: 0.0,
                variance: 1.0,
            },
            2,
        )
        .unwrap();
        assert!(matches!(m2.quantile(0.3), Err(Error::Unsupported(_))));
    }

    #[test]
    fn empirical_ties_resolve_to_lowest_index() {
        let e = Measure::empirical(vec![3.0, 1.0, 1.0], vec![0.2, 0.4, 0.4], 1).unwrap();
        assert_eq!(e.quantile(0.3).unwrap(), 1.0);
        assert_eq!(e.quantile(0.9).unwrap(), 3.0);
    }

    #[test]
    fn quantile_inverts_cdf_on_a_grid() {
        for m in [
            Measure::normal(0.3, 2.0).unwrap(),
            Measure::lognormal(1.0, 0.06).unwrap(),
        ] {
            for k in 1..100 {
                let u = k as f64 / 100.0;
                let x = m.quantile(u).unwrap();
                assert!((m.cdf(x).unwrap() - u).abs() < 1e-9, "u = {u}");
            }
        }
    }

    #[test]
    fn empirical_quantiles_converge() {
        let m = Measure::lognormal(1.0, 0.04).unwrap();
        let n = 100_000;
        let s = sample(&m, n, 21).unwrap();
        let e = Measure::from_samples(&s).unwrap();
        let bound = 5.0 / (n as f64).sqrt();
        for k in 1..=9 {
            let u = k as f64 / 10.0;
            let gap = (e.quantile(u).unwrap() - m.quantile(u).unwrap()).abs();
            assert!(gap <= bound, "u = {u}, gap = {gap}");
        }
    }

    #[test]
    fn convex_order_detects_ordering() {
        let strikes: Vec<f64> = (0..21).map(|i| 0.6 + 0.04 * i as f64).collect();
        let a = Measure::lognormal(1.0, 0.04).unwrap();
        let b = Measure::lognormal(1.0, 0.06).unwrap();
        let same = check_convex_order(&a, &a, &strikes, 100_000, 1).unwrap();
        assert!(same.ok);
        assert!(same.worst_violation <= same.tolerance);
        assert!(check_convex_order(&a, &b, &strikes, 100_000, 2).unwrap().ok);
        let rev = check_convex_order(&b, &a, &strikes, 100_000, 3).unwrap();
        assert!(!rev.ok);
        assert!(rev.worst_violation > rev.tolerance);
    }
}
