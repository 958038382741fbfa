//! Exact references: closed-form values and a revised simplex for
//! discretized transport and martingale transport.
//!
//! The discrete primal is
//!
//! ```text
//! max (or min)  sum_ij C_ij p_ij
//! s.t.          sum_j p_ij = a_i,  sum_i p_ij = b_j,  [sum_j p_ij (y_j - x_i) = 0],  p >= 0
//! ```
//!
//! and its dual potentials `(u1, u2, h)` satisfy `u1_i + u2_j + h_i (y_j -
//! x_i) >= C_ij` in the max sense.

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;

use crate::costs::{check_twist, mixed_derivative, CostFn, TwistStatus};
use crate::error::{Error, Result};
use crate::measures::{seeded_rng, Measure};

/// `int_0^1 c(F1^-1(u), F2^-1(u)) du` by midpoint quadrature: the value of
/// the comonotone coupling, optimal for the sup problem when `d^2 c / ds1
/// ds2 >= 0`.
pub fn frechet_hoeffding_value(c: &CostFn, mu1: &Measure, mu2: &Measure, n_quad: usize) -> Result<f64> {
    if mu1.dim() != 1 || mu2.dim() != 1 {
        return Err(Error::Unsupported("comonotone value needs d = 1".into()));
    }
    if n_quad == 0 {
        return Err(Error::param("need at least one quadrature node"));
    }
    let probes: Vec<f64> = [0.02, 0.1, 0.3, 0.5, 0.7, 0.9, 0.98]
        .iter()
        .map(|&u| mu1.quantile(u))
        .chain([0.02, 0.1, 0.3, 0.5, 0.7, 0.9, 0.98].iter().map(|&u| mu2.quantile(u)))
        .collect::<Result<_>>()?;
    let (p1, p2) = probes.split_at(7);
    let twist = check_twist(
        c,
        &p1.iter().map(|&x| vec![x]).collect::<Vec<_>>(),
        &p2.iter().map(|&y| vec![y]).collect::<Vec<_>>(),
    );
    let increasing = p1
        .iter()
        .all(|&x| p2.iter().all(|&y| mixed_derivative(c, x, y) >= -1e-8));
    if twist.status != TwistStatus::Holds || !increasing {
        return Err(Error::Unsupported(format!(
            "the comonotone coupling is not certified optimal for cost `{}`",
            c.name()
        )));
    }
    let mut total = 0.0;
    for k in 0..n_quad {
        let u = (k as f64 + 0.5) / n_quad as f64;
        total += c.eval(&[mu1.quantile(u)?], &[mu2.quantile(u)?]);
    }
    Ok(total / n_quad as f64)
}

/// Squared 2-Wasserstein distance between centered isotropic normals with
/// variances `var1` and `var2` in dimension `d`: `d (sqrt(var2) -
/// sqrt(var1))^2`.
pub fn gaussian_w2_value(d: usize, var1: f64, var2: f64) -> Result<f64> {
    if d == 0 {
        return Err(Error::param("dimension must be positive"));
    }
    if !(var1 >= 0.0) || !(var2 >= 0.0) || !var1.is_finite() || !var2.is_finite() {
        return Err(Error::param(format!(
            "variances must be non-negative (got {var1}, {var2})"
        )));
    }
    Ok(d as f64 * (var2.sqrt() - var1.sqrt()).powi(2))
}

/// Equal-weight quantile atoms of two one-dimensional measures.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    pub atoms1: Vec<f64>,
    pub atoms2: Vec<f64>,
    /// Translation applied to `atoms2` to equalize the means.
    pub shift: f64,
}

impl Discretization {
    pub fn weights1(&self) -> Vec<f64> {
        vec![1.0 / self.atoms1.len() as f64; self.atoms1.len()]
    }

    pub fn weights2(&self) -> Vec<f64> {
        vec![1.0 / self.atoms2.len() as f64; self.atoms2.len()]
    }
}

/// Atoms at `F^-1((i + 1/2) / n)`. With `mean_match` the second list is
/// translated so both have the same mean, as the martingale constraints
/// require.
pub fn discretize_quantile(
    mu1: &Measure,
    mu2: &Measure,
    n1: usize,
    n2: usize,
    mean_match: bool,
) -> Result<Discretization> {
    let atoms1 = mu1.quantile_atoms(n1)?;
    let mut atoms2 = mu2.quantile_atoms(n2)?;
    let mut shift = 0.0;
    if mean_match {
        let m1 = atoms1.iter().sum::<f64>() / n1 as f64;
        let m2 = atoms2.iter().sum::<f64>() / n2 as f64;
        shift = m1 - m2;
        atoms2.iter_mut().for_each(|y| *y += shift);
    }
    Ok(Discretization {
        atoms1,
        atoms2,
        shift,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Max,
    Min,
}

/// A discretized (martingale) transport problem in d = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LpInstance {
    pub atoms1: Vec<f64>,
    pub w1: Vec<f64>,
    pub atoms2: Vec<f64>,
    pub w2: Vec<f64>,
    /// Row-major `n1 x n2`.
    pub cost: Vec<f64>,
    pub martingale: bool,
    pub sense: Sense,
}

impl LpInstance {
    pub fn new(
        atoms1: Vec<f64>,
        w1: Vec<f64>,
        atoms2: Vec<f64>,
        w2: Vec<f64>,
        cost: &CostFn,
        martingale: bool,
        sense: Sense,
    ) -> Result<Self> {
        let c: Vec<f64> = atoms1
            .iter()
            .flat_map(|&x| atoms2.iter().map(move |&y| cost.eval(&[x], &[y])))
            .collect();
        Self::from_matrix(atoms1, w1, atoms2, w2, c, martingale, sense)
    }

    pub fn from_matrix(
        atoms1: Vec<f64>,
        w1: Vec<f64>,
        atoms2: Vec<f64>,
        w2: Vec<f64>,
        cost: Vec<f64>,
        martingale: bool,
        sense: Sense,
    ) -> Result<Self> {
        if atoms1.len() != w1.len() || atoms2.len() != w2.len() || w1.is_empty() || w2.is_empty() {
            return Err(Error::param("atom lists do not match their weights"));
        }
        if cost.len() != w1.len() * w2.len() {
            return Err(Error::Shape {
                expected: w1.len() * w2.len(),
                got: cost.len(),
            });
        }
        for (w, what) in [(&w1, "first"), (&w2, "second")] {
            if w.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::param(format!("{what} marginal has a negative weight")));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::param(format!("{what} marginal sums to {s}")));
            }
        }
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::param("cost matrix must be finite"));
        }
        Ok(LpInstance {
            atoms1,
            w1,
            atoms2,
            w2,
            cost,
            martingale,
            sense,
        })
    }

    /// Quantile discretization of two measures with `n` atoms each; MOT
    /// instances are mean-matched.
    pub fn from_measures(
        mu1: &Measure,
        mu2: &Measure,
        n: usize,
        cost: &CostFn,
        martingale: bool,
        sense: Sense,
    ) -> Result<(Self, Discretization)> {
        let disc = discretize_quantile(mu1, mu2, n, n, martingale)?;
        let inst = Self::new(
            disc.atoms1.clone(),
            disc.weights1(),
            disc.atoms2.clone(),
            disc.weights2(),
            cost,
            martingale,
            sense,
        )?;
        Ok((inst, disc))
    }

    pub fn n1(&self) -> usize {
        self.w1.len()
    }

    pub fn n2(&self) -> usize {
        self.w2.len()
    }

    fn rows(&self) -> usize {
        self.n1() + self.n2() + if self.martingale { self.n1() } else { 0 }
    }

    /// Sparse constraint column of the pair `(i, j)`.
    fn column(&self, i: usize, j: usize) -> Vec<(usize, f64)> {
        let mut col = vec![(i, 1.0), (self.n1() + j, 1.0)];
        if self.martingale {
            let d = self.atoms2[j] - self.atoms1[i];
            if d != 0.0 {
                col.push((self.n1() + self.n2() + i, d));
            }
        }
        col
    }

    fn rhs(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.rows());
        b.extend_from_slice(&self.w1);
        b.extend_from_slice(&self.w2);
        if self.martingale {
            b.extend(std::iter::repeat_n(0.0, self.n1()));
        }
        b
    }

    /// Objective coefficient of `(i, j)` in the internal max form.
    fn max_cost(&self, k: usize) -> f64 {
        match self.sense {
            Sense::Max => self.cost[k],
            Sense::Min => -self.cost[k],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpMethod {
    DenseSimplex,
    CuttingPlane,
}

impl LpMethod {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "dense_simplex" => Ok(LpMethod::DenseSimplex),
            "cutting_plane" => Ok(LpMethod::CuttingPlane),
            other => Err(Error::Lookup(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LpResult {
    /// `sum C p` of the returned coupling.
    pub value: f64,
    /// `sum a u1 + sum b u2` of the returned potentials.
    pub dual_value: f64,
    /// Row-major `n1 x n2`.
    pub coupling: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub h: Option<Vec<f64>>,
    pub pivots: usize,
    /// Rank of the equality system found by the phase-one cleanup.
    pub rank: usize,
    /// Constraint rows implied by the others.
    pub redundant_rows: Vec<usize>,
    /// Restricted values after each cutting-plane round (one entry for the
    /// dense solve).
    pub history: Vec<f64>,
}

/// Simplex tolerances.
const PIVOT_TOL: f64 = 1e-10;
const FEAS_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 100;

/// `max c.x  s.t.  A x = b, x >= 0` with sparse columns and `b >= 0`.
struct Tableau {
    m: usize,
    cols: Vec<Vec<(usize, f64)>>,
    cost: Vec<f64>,
    b: Vec<f64>,
    /// Column-major dense basis inverse.
    binv: Vec<f64>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    /// Columns that may never enter (artificials after phase one).
    barred: Vec<bool>,
    xb: Vec<f64>,
    pivots: usize,
    since_refactor: usize,
    /// Smallest reduced cost that lets a column enter.
    price_tol: f64,
}

enum Outcome {
    Optimal,
    Unbounded,
}

impl Tableau {
    /// Starts from the slack basis formed by the first `m` columns, which
    /// must be the unit vectors `e_0 .. e_{m-1}`.
    fn new(
        m: usize,
        cols: Vec<Vec<(usize, f64)>>,
        cost: Vec<f64>,
        b: Vec<f64>,
        cost_scale: f64,
    ) -> Self {
        let n = cols.len();
        let mut binv = vec![0.0; m * m];
        for r in 0..m {
            binv[r * m + r] = 1.0;
        }
        let mut in_basis = vec![false; n];
        in_basis[..m].iter_mut().for_each(|x| *x = true);
        Tableau {
            m,
            cols,
            cost,
            xb: b.clone(),
            b,
            binv,
            basis: (0..m).collect(),
            in_basis,
            barred: vec![false; n],
            pivots: 0,
            since_refactor: 0,
            price_tol: FEAS_TOL * (1.0 + cost_scale),
        }
    }

    fn add_column(&mut self, col: Vec<(usize, f64)>, cost: f64) {
        self.cols.push(col);
        self.cost.push(cost);
        self.in_basis.push(false);
        self.barred.push(false);
    }

    /// `B^-1 A_j`.
    fn ftran(&self, j: usize) -> Vec<f64> {
        let m = self.m;
        let mut alpha = vec![0.0; m];
        for &(k, v) in &self.cols[j] {
            let col = &self.binv[k * m..(k + 1) * m];
            alpha.iter_mut().zip(col).for_each(|(a, c)| *a += v * c);
        }
        alpha
    }

    /// Simplex multipliers `c_B B^-1`.
    fn duals(&self) -> Vec<f64> {
        let m = self.m;
        let cb: Vec<f64> = self.basis.iter().map(|&j| self.cost[j]).collect();
        (0..m)
            .map(|k| {
                self.binv[k * m..(k + 1) * m]
                    .iter()
                    .zip(&cb)
                    .map(|(a, c)| a * c)
                    .sum()
            })
            .collect()
    }

    fn reduced_cost(&self, y: &[f64], j: usize) -> f64 {
        self.cost[j] - self.cols[j].iter().map(|&(k, v)| y[k] * v).sum::<f64>()
    }

    fn pivot(&mut self, r: usize, j: usize, alpha: &[f64]) {
        let m = self.m;
        let ar = alpha[r];
        for c in 0..m {
            let col = &mut self.binv[c * m..(c + 1) * m];
            let p = col[r];
            if p == 0.0 {
                continue;
            }
            let f = p / ar;
            for (i, v) in col.iter_mut().enumerate() {
                if i != r {
                    *v -= alpha[i] * f;
                }
            }
            col[r] = f;
        }
        let theta = self.xb[r] / ar;
        for (i, x) in self.xb.iter_mut().enumerate() {
            if i != r {
                *x -= alpha[i] * theta;
            }
        }
        self.xb[r] = theta;
        self.in_basis[self.basis[r]] = false;
        self.basis[r] = j;
        self.in_basis[j] = true;
        self.pivots += 1;
        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_EVERY {
            self.refactor();
        }
    }

    /// Recomputes `B^-1` and the basic solution from scratch.
    fn refactor(&mut self) {
        let m = self.m;
        let mut bmat = DMatrix::<f64>::zeros(m, m);
        for (c, &j) in self.basis.iter().enumerate() {
            for &(k, v) in &self.cols[j] {
                bmat[(k, c)] = v;
            }
        }
        if let Some(inv) = bmat.try_inverse() {
            for c in 0..m {
                for r in 0..m {
                    self.binv[c * m + r] = inv[(r, c)];
                }
            }
            let mut xb = vec![0.0; m];
            for (k, &bk) in self.b.iter().enumerate() {
                if bk != 0.0 {
                    let col = &self.binv[k * m..(k + 1) * m];
                    xb.iter_mut().zip(col).for_each(|(x, c)| *x += bk * c);
                }
            }
            for x in xb.iter_mut() {
                if *x < 0.0 && *x > -FEAS_TOL {
                    *x = 0.0;
                }
            }
            self.xb = xb;
        }
        self.since_refactor = 0;
    }

    /// Primal simplex from a feasible basis. Dantzig pricing, switching to
    /// Bland's rule after `10 m` consecutive degenerate pivots.
    fn optimize(&mut self, max_pivots: usize) -> Result<Outcome> {
        let m = self.m;
        let mut degenerate_run = 0usize;
        let tol = self.price_tol;
        loop {
            if self.pivots >= max_pivots {
                return Err(Error::Numerical(format!(
                    "simplex pivot limit {max_pivots} reached"
                )));
            }
            let y = self.duals();
            let bland = degenerate_run >= 10 * m;
            let mut enter = None;
            let mut best = tol;
            for j in 0..self.cols.len() {
                if self.in_basis[j] || self.barred[j] {
                    continue;
                }
                let d = self.reduced_cost(&y, j);
                if d > best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(j) = enter else {
                return Ok(Outcome::Optimal);
            };
            let alpha = self.ftran(j);
            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for (r, &a) in alpha.iter().enumerate() {
                if a <= PIVOT_TOL {
                    continue;
                }
                let ratio = self.xb[r].max(0.0) / a;
                let better = match leave {
                    None => true,
                    Some(l) => {
                        if ratio < best_ratio - 1e-12 {
                            true
                        } else if ratio <= best_ratio + 1e-12 {
                            if bland {
                                self.basis[r] < self.basis[l]
                            } else {
                                a > alpha[l]
                            }
                        } else {
                            false
                        }
                    }
                };
                if better {
                    leave = Some(r);
                    best_ratio = best_ratio.min(ratio);
                }
            }
            let Some(r) = leave else {
                return Ok(Outcome::Unbounded);
            };
            if best_ratio <= 1e-12 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(r, j, &alpha);
        }
    }
}

fn pivot_limit(m: usize, n: usize) -> usize {
    50 * (m + n) + 10_000
}

/// Builds the result from an optimal tableau whose columns after the first
/// `m` map to `pairs`.
fn extract(
    inst: &LpInstance,
    tab: &Tableau,
    pairs: &[usize],
    redundant_rows: Vec<usize>,
    history: Vec<f64>,
) -> LpResult {
    let n1 = inst.n1();
    let n2 = inst.n2();
    let m = tab.m;
    let mut coupling = vec![0.0; n1 * n2];
    for (r, &j) in tab.basis.iter().enumerate() {
        if j >= m {
            coupling[pairs[j - m]] = tab.xb[r].max(0.0);
        }
    }
    let mut y = tab.duals();
    if inst.sense == Sense::Min {
        y.iter_mut().for_each(|v| *v = -*v);
    }
    let u1 = y[..n1].to_vec();
    let u2 = y[n1..n1 + n2].to_vec();
    let h = inst.martingale.then(|| y[n1 + n2..].to_vec());
    let value = coupling.iter().zip(&inst.cost).map(|(p, c)| p * c).sum();
    let dual_value = inst.w1.iter().zip(&u1).map(|(w, u)| w * u).sum::<f64>()
        + inst.w2.iter().zip(&u2).map(|(w, u)| w * u).sum::<f64>();
    LpResult {
        value,
        dual_value,
        coupling,
        u1,
        u2,
        h,
        pivots: tab.pivots,
        rank: m - redundant_rows.len(),
        redundant_rows,
        history,
    }
}

fn dense_simplex(inst: &LpInstance) -> Result<LpResult> {
    let n1 = inst.n1();
    let n2 = inst.n2();
    if n1 * n2 > 4_000_000 {
        return Err(Error::param(format!(
            "dense simplex limited to 4e6 variables, got {}",
            n1 * n2
        )));
    }
    let m = inst.rows();
    let b = inst.rhs();
    let mut cols: Vec<Vec<(usize, f64)>> = (0..m).map(|r| vec![(r, 1.0)]).collect();
    let mut phase1 = vec![-1.0; m];
    let pairs: Vec<usize> = (0..n1 * n2).collect();
    for &k in &pairs {
        cols.push(inst.column(k / n2, k % n2));
        phase1.push(0.0);
    }
    let limit = pivot_limit(m, pairs.len());
    let cmax = inst.cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let mut tab = Tableau::new(m, cols, phase1, b, cmax);
    match tab.optimize(limit)? {
        Outcome::Optimal => {}
        Outcome::Unbounded => return Err(Error::Numerical("phase one reported unbounded".into())),
    }
    tab.refactor();
    let infeasibility: f64 = tab
        .basis
        .iter()
        .zip(&tab.xb)
        .filter(|(&j, _)| j < m)
        .map(|(_, &x)| x)
        .sum();
    if infeasibility > FEAS_TOL {
        return Err(Error::Infeasible(format!(
            "phase one left {infeasibility:.3e} of artificial mass{}",
            if inst.martingale {
                "; the marginals may not be in convex order"
            } else {
                ""
            }
        )));
    }
    // drive the remaining artificials out of the basis
    let mut redundant = Vec::new();
    for r in 0..m {
        if tab.basis[r] >= m {
            continue;
        }
        let m_ = tab.m;
        let row: Vec<f64> = (0..m_).map(|k| tab.binv[k * m_ + r]).collect();
        let mut replaced = false;
        for j in m..tab.cols.len() {
            if tab.in_basis[j] {
                continue;
            }
            let a: f64 = tab.cols[j].iter().map(|&(k, v)| row[k] * v).sum();
            if a.abs() > 1e-7 {
                let alpha = tab.ftran(j);
                tab.pivot(r, j, &alpha);
                replaced = true;
                break;
            }
        }
        if !replaced {
            redundant.push(r);
        }
    }
    for j in 0..m {
        tab.barred[j] = true;
    }
    for (j, c) in tab.cost.iter_mut().enumerate() {
        *c = if j < m { 0.0 } else { inst.max_cost(pairs[j - m]) };
    }
    tab.refactor();
    match tab.optimize(limit)? {
        Outcome::Optimal => {}
        Outcome::Unbounded => return Err(Error::Unbounded),
    }
    tab.refactor();
    let mut res = extract(inst, &tab, &pairs, redundant, Vec::new());
    res.history.push(res.value);
    Ok(res)
}

/// Violation `C_ij - u1_i - u2_j - h_i (y_j - x_i)` of the dual constraint
/// in the internal max form.
fn dual_violation(inst: &LpInstance, y: &[f64], i: usize, j: usize) -> f64 {
    let n1 = inst.n1();
    let n2 = inst.n2();
    let mut v = inst.max_cost(i * n2 + j) - y[i] - y[n1 + j];
    if inst.martingale {
        v -= y[n1 + n2 + i] * (inst.atoms2[j] - inst.atoms1[i]);
    }
    v
}

/// Constraint generation on the dual: solve over a subset of pairs, add
/// every pair whose dual constraint is violated by more than `1e-9`, and
/// repeat. Each restricted problem carries one penalized slack per
/// constraint row so it is always feasible.
fn cutting_plane(inst: &LpInstance, seed: u64) -> Result<LpResult> {
    let n1 = inst.n1();
    let n2 = inst.n2();
    let m = inst.rows();
    let total = n1 * n2;
    let cmax = inst.cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let penalty = 1e4 * (1.0 + cmax);
    let mut rng = seeded_rng(seed);
    let initial = (total / 20).max(1).min(total);
    let mut pairs: Vec<usize> = sample_indices(&mut rng, total, initial).into_vec();
    pairs.sort_unstable();
    let mut active = vec![false; total];
    pairs.iter().for_each(|&k| active[k] = true);

    let mut cols: Vec<Vec<(usize, f64)>> = (0..m).map(|r| vec![(r, 1.0)]).collect();
    let mut cost = vec![-penalty; m];
    for &k in &pairs {
        cols.push(inst.column(k / n2, k % n2));
        cost.push(inst.max_cost(k));
    }
    let mut tab = Tableau::new(m, cols, cost, inst.rhs(), cmax);
    let mut history = Vec::new();
    let limit = pivot_limit(m, total);
    loop {
        match tab.optimize(limit)? {
            Outcome::Optimal => {}
            Outcome::Unbounded => return Err(Error::Unbounded),
        }
        tab.refactor();
        let restricted: f64 = tab
            .basis
            .iter()
            .zip(&tab.xb)
            .filter(|(&j, _)| j >= m)
            .map(|(&j, &x)| x * inst.cost[pairs[j - m]])
            .sum();
        history.push(restricted);
        let y = tab.duals();
        let mut added = 0;
        for k in 0..total {
            if !active[k] && dual_violation(inst, &y, k / n2, k % n2) > FEAS_TOL {
                active[k] = true;
                pairs.push(k);
                tab.add_column(inst.column(k / n2, k % n2), inst.max_cost(k));
                added += 1;
            }
        }
        if added == 0 {
            break;
        }
    }
    let slack: f64 = tab
        .basis
        .iter()
        .zip(&tab.xb)
        .filter(|(&j, _)| j < m)
        .map(|(_, &x)| x)
        .sum();
    if slack > FEAS_TOL {
        return Err(Error::Infeasible(format!(
            "penalized slacks carry {slack:.3e} at termination{}",
            if inst.martingale {
                "; the marginals may not be in convex order"
            } else {
                ""
            }
        )));
    }
    let redundant = Vec::new();
    let mut res = extract(inst, &tab, &pairs, redundant, history);
    res.rank = m;
    Ok(res)
}

/// Solves a discretized instance. `seed` drives the initial pair subset of
/// the cutting-plane method.
pub fn solve_lp(inst: &LpInstance, method: LpMethod, seed: u64) -> Result<LpResult> {
    match method {
        LpMethod::DenseSimplex => dense_simplex(inst),
        LpMethod::CuttingPlane => cutting_plane(inst, seed),
    }
}

/// Optimality certificates of a solution.
#[derive(Debug, Clone, PartialEq)]
pub struct LpCheck {
    /// `|primal - dual| / (1 + |primal|)`.
    pub duality_gap: f64,
    /// Largest dual constraint violation over the full grid.
    pub dual_violation: f64,
    /// Largest `|u1 + u2 + h Delta - C|` over pairs with `p > 1e-9`.
    pub slackness: f64,
    /// Largest absolute row, column and martingale residual of the coupling.
    pub primal_residual: f64,
}

pub fn check_solution(inst: &LpInstance, res: &LpResult) -> LpCheck {
    let n1 = inst.n1();
    let n2 = inst.n2();
    let sign = match inst.sense {
        Sense::Max => 1.0,
        Sense::Min => -1.0,
    };
    let mut dual_violation: f64 = 0.0;
    let mut slackness: f64 = 0.0;
    let mut rows = vec![0.0; n1];
    let mut cols = vec![0.0; n2];
    let mut drift = vec![0.0; n1];
    for i in 0..n1 {
        for j in 0..n2 {
            let k = i * n2 + j;
            let d = inst.atoms2[j] - inst.atoms1[i];
            let pot = res.u1[i] + res.u2[j] + res.h.as_ref().map_or(0.0, |h| h[i] * d);
            let gap = sign * (inst.cost[k] - pot);
            dual_violation = dual_violation.max(gap);
            let p = res.coupling[k];
            if p > 1e-9 {
                slackness = slackness.max(gap.abs());
            }
            rows[i] += p;
            cols[j] += p;
            drift[i] += p * d;
        }
    }
    let mut primal_residual: f64 = 0.0;
    for (r, w) in rows.iter().zip(&inst.w1) {
        primal_residual = primal_residual.max((r - w).abs());
    }
    for (c, w) in cols.iter().zip(&inst.w2) {
        primal_residual = primal_residual.max((c - w).abs());
    }
    if inst.martingale {
        for d in &drift {
            primal_residual = primal_residual.max(d.abs());
        }
    }
    LpCheck {
        duality_gap: (res.value - res.dual_value).abs() / (1.0 + res.value.abs()),
        dual_violation: dual_violation.max(0.0),
        slackness,
        primal_residual,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::builtin_cost;

    fn tiny(cost: Vec<f64>, sense: Sense) -> LpInstance {
        LpInstance::from_matrix(
            vec![0.0, 1.0],
            vec![0.5, 0.5],
            vec![0.0, 1.0],
            vec![0.5, 0.5],
            cost,
            false,
            sense,
        )
        .unwrap()
    }

    #[test]
    fn two_by_two_matches_enumeration() {
        // extreme couplings of uniform 2x2 marginals are the two matchings
        let c: Vec<f64> = vec![3.0, 1.0, 0.5, 2.0];
        let best = (0.5 * (c[0] + c[3])).max(0.5 * (c[1] + c[2]));
        let worst = (0.5 * (c[0] + c[3])).min(0.5 * (c[1] + c[2]));
        for method in [LpMethod::DenseSimplex, LpMethod::CuttingPlane] {
            let r = solve_lp(&tiny(c.clone(), Sense::Max), method, 1).unwrap();
            assert!((r.value - best).abs() < 1e-12);
            let r = solve_lp(&tiny(c.clone(), Sense::Min), method, 1).unwrap();
            assert!((r.value - worst).abs() < 1e-12);
        }
    }

    #[test]
    fn transport_rank_is_one_short() {
        let r = solve_lp(&tiny(vec![1.0, 0.0, 0.0, 1.0], Sense::Max), LpMethod::DenseSimplex, 0).unwrap();
        assert_eq!(r.rank, 3);
        assert_eq!(r.redundant_rows.len(), 1);
    }

    #[test]
    fn certificates_hold_on_small_mot() {
        let c = builtin_cost("cubic_sum").unwrap();
        let mu1 = Measure::lognormal(1.0, 0.04).unwrap();
        let mu2 = Measure::lognormal(1.0, 0.06).unwrap();
        let (inst, disc) = LpInstance::from_measures(&mu1, &mu2, 20, &c, true, Sense::Max).unwrap();
        assert!(disc.shift.abs() < 1e-3);
        let dense = solve_lp(&inst, LpMethod::DenseSimplex, 0).unwrap();
        let chk = check_solution(&inst, &dense);
        assert!(chk.duality_gap <= 1e-7, "{chk:?}");
        assert!(chk.dual_violation <= 1e-9, "{chk:?}");
        assert!(chk.slackness <= 1e-7, "{chk:?}");
        assert!(chk.primal_residual <= 1e-9, "{chk:?}");
        let cut = solve_lp(&inst, LpMethod::CuttingPlane, 3).unwrap();
        assert!((cut.value - dense.value).abs() <= 1e-7 * (1.0 + dense.value.abs()));
        for w in cut.history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn reversed_convex_order_is_infeasible() {
        let c = builtin_cost("cubic_sum").unwrap();
        let mu1 = Measure::lognormal(1.0, 0.06).unwrap();
        let mu2 = Measure::lognormal(1.0, 0.04).unwrap();
        let (inst, _) = LpInstance::from_measures(&mu1, &mu2, 10, &c, true, Sense::Max).unwrap();
        for method in [LpMethod::DenseSimplex, LpMethod::CuttingPlane] {
            assert!(matches!(solve_lp(&inst, method, 0), Err(Error::Infeasible(_))));
        }
    }

    #[test]
    fn gaussian_values() {
        let v2 = gaussian_w2_value(2, 1.0, 2.0).unwrap();
        assert!((v2 - 2.0 * (2f64.sqrt() - 1.0).powi(2)).abs() < 1e-15);
        assert!((v2 - 0.3431).abs() < 1e-4);
        assert_eq!(gaussian_w2_value(3, 1.5, 1.5).unwrap(), 0.0);
        assert!((gaussian_w2_value(20, 1.0, 2.0).unwrap() - 10.0 * v2).abs() < 1e-12);
        assert!(gaussian_w2_value(2, -1.0, 2.0).is_err());
    }

    #[test]
    fn comonotone_value_of_identical_marginals() {
        let c = builtin_cost("neg_diff_squared").unwrap();
        let mu = Measure::lognormal(1.0, 0.04).unwrap();
        assert_eq!(frechet_hoeffding_value(&c, &mu, &mu, 1000).unwrap(), 0.0);
    }

    #[test]
    fn anti_twisted_cost_is_refused() {
        let c = CostFn::parse("-1*s1*s2").unwrap();
        let mu = Measure::normal(0.0, 1.0).unwrap();
        assert!(matches!(
            frechet_hoeffding_value(&c, &mu, &mu, 10),
            Err(Error::Unsupported(_))
        ));
    }
}
