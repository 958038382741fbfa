//! Entropic and penalized baselines.
//!
//! The entropic dual of the (martingale) transport problem in the max
//! convention is
//!
//! ```text
//! inf_{u1,u2,h}  E_mu1[u1] + E_mu2[u2] + eps E_P0[ exp((c - u1 - u2 - h.(s2 - s1)) / eps) ]
//! ```
//!
//! and its optimal coupling is `pi = p0 exp((C - u1 - u2 - h.Delta) / eps)`.
//! Sinkhorn minimizes this dual exactly one block at a time on discretized
//! marginals, so the dual objective never increases. The neural variants
//! minimize the same dual (or its quadratic penalization) by stochastic
//! gradients on sampled marginals.

use rand::Rng as _;
use rayon::prelude::*;

use crate::costs::CostFn;
use crate::error::{Error, Result};
use crate::measures::{seeded_rng, SampleSet};
use crate::neuralnet::{Direction, Mlp, Optimizer, Workspace};
use crate::saddle::{NetArch, SolverConfig, Trace};

/// Two weighted atom lists with the cost matrix, the log prior and `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteProblem {
    pub atoms1: Vec<f64>,
    pub w1: Vec<f64>,
    pub atoms2: Vec<f64>,
    pub w2: Vec<f64>,
    pub dim: usize,
    /// Row-major `n1 x n2`.
    pub cost: Vec<f64>,
    /// Row-major `n1 x n2`; the product of the marginals unless replaced.
    pub log_p0: Vec<f64>,
    pub eps: f64,
}

fn check_weights(w: &[f64], what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::param(format!("{what}: no atoms")));
    }
    if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::param(format!("{what}: weights must be positive")));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::param(format!("{what}: weights sum to {total}, not 1")));
    }
    Ok(())
}

impl DiscreteProblem {
    pub fn new(
        atoms1: Vec<f64>,
        w1: Vec<f64>,
        atoms2: Vec<f64>,
        w2: Vec<f64>,
        dim: usize,
        cost: &CostFn,
        eps: f64,
    ) -> Result<Self> {
        if dim == 0 || atoms1.len() != w1.len() * dim || atoms2.len() != w2.len() * dim {
            return Err(Error::param("atom lists do not match weights and dimension"));
        }
        check_weights(&w1, "first marginal")?;
        check_weights(&w2, "second marginal")?;
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::param(format!("eps must be positive, got {eps}")));
        }
        let n1 = w1.len();
        let n2 = w2.len();
        let mut c = Vec::with_capacity(n1 * n2);
        let mut log_p0 = Vec::with_capacity(n1 * n2);
        for i in 0..n1 {
            let x = &atoms1[i * dim..(i + 1) * dim];
            for j in 0..n2 {
                let v = cost.eval(x, &atoms2[j * dim..(j + 1) * dim]);
                if !v.is_finite() {
                    return Err(Error::Numerical(format!("cost is not finite at ({i}, {j})")));
                }
                c.push(v);
                log_p0.push(w1[i].ln() + w2[j].ln());
            }
        }
        Ok(DiscreteProblem {
            atoms1,
            w1,
            atoms2,
            w2,
            dim,
            cost: c,
            log_p0,
            eps,
        })
    }

    /// Replaces the product prior by `exp(log_p0)`.
    pub fn with_prior(mut self, log_p0: Vec<f64>) -> Result<Self> {
        if log_p0.len() != self.cost.len() {
            return Err(Error::Shape {
                expected: self.cost.len(),
                got: log_p0.len(),
            });
        }
        if log_p0.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::param("log prior must be finite or -inf"));
        }
        self.log_p0 = log_p0;
        Ok(self)
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::param(format!("eps must be positive, got {eps}")));
        }
        Ok(DiscreteProblem { eps, ..self.clone() })
    }

    pub fn n1(&self) -> usize {
        self.w1.len()
    }

    pub fn n2(&self) -> usize {
        self.w2.len()
    }

    #[inline]
    fn delta(&self, i: usize, j: usize) -> f64 {
        self.atoms2[j] - self.atoms1[i]
    }
}

/// Dual potentials and residuals of a Sinkhorn run.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornState {
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    /// Martingale multipliers, one per first-marginal atom (d = 1).
    pub h: Option<Vec<f64>>,
    pub iteration: usize,
    pub row_residual: f64,
    pub col_residual: f64,
    pub martingale_residual: f64,
    /// Dual objective after each full iteration.
    pub dual_history: Vec<f64>,
}

impl SinkhornState {
    pub fn new(prob: &DiscreteProblem, martingale: bool) -> Self {
        SinkhornState {
            u1: vec![0.0; prob.n1()],
            u2: vec![0.0; prob.n2()],
            h: martingale.then(|| vec![0.0; prob.n1()]),
            iteration: 0,
            row_residual: f64::INFINITY,
            col_residual: f64::INFINITY,
            martingale_residual: f64::INFINITY,
            dual_history: Vec::new(),
        }
    }

    #[inline]
    fn h_at(&self, i: usize) -> f64 {
        self.h.as_ref().map_or(0.0, |h| h[i])
    }
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log of the unnormalized coupling entry.
#[inline]
fn log_pi(prob: &DiscreteProblem, st: &SinkhornState, i: usize, j: usize) -> f64 {
    let k = i * prob.n2() + j;
    let mut z = prob.cost[k] - st.u1[i] - st.u2[j];
    if st.h.is_some() {
        z -= st.h_at(i) * prob.delta(i, j);
    }
    prob.log_p0[k] + z / prob.eps
}

/// Row update: afterwards every row of the coupling sums to its weight.
pub fn update_u1(prob: &DiscreteProblem, st: &mut SinkhornState) {
    let n2 = prob.n2();
    let eps = prob.eps;
    let snapshot = &*st;
    let new: Vec<f64> = (0..prob.n1())
        .into_par_iter()
        .map(|i| {
            let lse = log_sum_exp((0..n2).map(|j| log_pi(prob, snapshot, i, j)));
            snapshot.u1[i] + eps * (lse - prob.w1[i].ln())
        })
        .collect();
    st.u1 = new;
}

/// Column update: afterwards every column of the coupling sums to its weight.
pub fn update_u2(prob: &DiscreteProblem, st: &mut SinkhornState) {
    let n1 = prob.n1();
    let eps = prob.eps;
    let snapshot = &*st;
    let new: Vec<f64> = (0..prob.n2())
        .into_par_iter()
        .map(|j| {
            let lse = log_sum_exp((0..n1).map(|i| log_pi(prob, snapshot, i, j)));
            snapshot.u2[j] + eps * (lse - prob.w2[j].ln())
        })
        .collect();
    st.u2 = new;
}

/// Initial bracket half-width in units of `1 / span`.
const BRACKET: f64 = 50.0;
const MAX_EXPANSIONS: usize = 60;
const ROOT_TOL: f64 = 1e-12;

/// Tilted mean `sum_j softmax(l_j - theta Delta_j / eps) Delta_j` and its
/// derivative `-Var / eps`.
fn tilted_moments(l: &[f64], delta: &[f64], theta: f64, eps: f64) -> (f64, f64) {
    let m = l
        .iter()
        .zip(delta)
        .map(|(l, d)| l - theta * d / eps)
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (l, d) in l.iter().zip(delta) {
        let w = (l - theta * d / eps - m).exp();
        s0 += w;
        s1 += w * d;
        s2 += w * d * d;
    }
    let mean = s1 / s0;
    let var = (s2 / s0 - mean * mean).max(0.0);
    (mean, -var / eps)
}

/// Solves the martingale condition of row `i` for its multiplier by
/// Newton's method inside a bisection bracket.
fn solve_row_h(prob: &DiscreteProblem, st: &SinkhornState, i: usize) -> Result<f64> {
    let n2 = prob.n2();
    let eps = prob.eps;
    let h0 = st.h_at(i);
    let mut l = Vec::with_capacity(n2);
    let mut delta = Vec::with_capacity(n2);
    for j in 0..n2 {
        let k = i * n2 + j;
        let lp = prob.log_p0[k];
        if lp == f64::NEG_INFINITY {
            continue;
        }
        l.push(lp + (prob.cost[k] - st.u2[j]) / eps);
        delta.push(prob.delta(i, j));
    }
    let span = delta.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    let has_pos = delta.iter().any(|&d| d > 0.0);
    let has_neg = delta.iter().any(|&d| d < 0.0);
    if span == 0.0 {
        return Ok(h0);
    }
    if !(has_pos && has_neg) {
        return Err(Error::Numerical(format!(
            "martingale condition at atom {i} has no root: all displacements share a sign"
        )));
    }
    let g = |theta: f64| tilted_moments(&l, &delta, theta, eps);
    // g is decreasing: positive to the left of the root
    let mut lo = h0 - BRACKET / span;
    let mut hi = h0 + BRACKET / span;
    let mut found = false;
    for _ in 0..MAX_EXPANSIONS {
        let (glo, _) = g(lo);
        let (ghi, _) = g(hi);
        if glo >= 0.0 && ghi <= 0.0 {
            found = true;
            break;
        }
        let w = hi - lo;
        if glo < 0.0 {
            lo -= w;
        }
        if ghi > 0.0 {
            hi += w;
        }
    }
    if !found {
        return Err(Error::Numerical(format!(
            "no sign change for the martingale multiplier at atom {i}"
        )));
    }
    let mut theta = h0.clamp(lo, hi);
    for _ in 0..500 {
        let (gv, dg) = g(theta);
        if (gv / span).abs() <= ROOT_TOL {
            return Ok(theta);
        }
        if gv > 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        let newton = if dg < 0.0 { theta - gv / dg } else { f64::NAN };
        theta = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 4.0 * f64::EPSILON * theta.abs().max(1.0) {
            return Ok(theta);
        }
    }
    Err(Error::Numerical(format!(
        "martingale root finder did not converge at atom {i}"
    )))
}

/// Martingale update: afterwards every row satisfies `sum_j pi_ij Delta_ij = 0`.
pub fn update_h(prob: &DiscreteProblem, st: &mut SinkhornState) -> Result<()> {
    if st.h.is_none() {
        return Ok(());
    }
    if prob.dim != 1 {
        return Err(Error::Unsupported("martingale Sinkhorn needs d = 1".into()));
    }
    let snapshot = &*st;
    let new = (0..prob.n1())
        .into_par_iter()
        .map(|i| solve_row_h(prob, snapshot, i))
        .collect::<Result<Vec<f64>>>()?;
    st.h = Some(new);
    Ok(())
}

/// Current coupling, row-major.
pub fn coupling(prob: &DiscreteProblem, st: &SinkhornState) -> Vec<f64> {
    let n2 = prob.n2();
    (0..prob.n1())
        .into_par_iter()
        .flat_map_iter(|i| (0..n2).map(move |j| log_pi(prob, st, i, j).exp()))
        .collect()
}

/// L1 distances of the coupling's row and column sums to the weights.
pub fn marginal_residuals(prob: &DiscreteProblem, pi: &[f64]) -> (f64, f64) {
    let n2 = prob.n2();
    let mut cols = vec![0.0; n2];
    let mut row_res = 0.0;
    for (i, row) in pi.chunks_exact(n2).enumerate() {
        row_res += (row.iter().sum::<f64>() - prob.w1[i]).abs();
        cols.iter_mut().zip(row).for_each(|(c, p)| *c += p);
    }
    let col_res = cols.iter().zip(&prob.w2).map(|(c, w)| (c - w).abs()).sum();
    (row_res, col_res)
}

/// `max_i |sum_j pi_ij (s2_j - s1_i)| / E_pi|S2 - S1|`.
pub fn martingale_residual(prob: &DiscreteProblem, pi: &[f64]) -> f64 {
    let n2 = prob.n2();
    let mut worst: f64 = 0.0;
    let mut scale = 0.0;
    for (i, row) in pi.chunks_exact(n2).enumerate() {
        let mut drift = 0.0;
        for (j, p) in row.iter().enumerate() {
            let d = prob.delta(i, j);
            drift += p * d;
            scale += p * d.abs();
        }
        worst = worst.max(drift.abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        worst / scale
    }
}

/// `sum a u1 + sum b u2 + eps sum pi`.
pub fn dual_objective(prob: &DiscreteProblem, st: &SinkhornState) -> f64 {
    let mass: f64 = coupling(prob, st).iter().sum();
    let a: f64 = prob.w1.iter().zip(&st.u1).map(|(w, u)| w * u).sum();
    let b: f64 = prob.w2.iter().zip(&st.u2).map(|(w, u)| w * u).sum();
    a + b + prob.eps * mass
}

#[derive(Debug, Clone)]
pub struct SinkhornResult {
    /// `sum_ij pi_ij C_ij`.
    pub value: f64,
    pub coupling: Vec<f64>,
    pub state: SinkhornState,
    pub converged: bool,
}

fn sinkhorn(
    prob: &DiscreteProblem,
    mut st: SinkhornState,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornResult> {
    let martingale = st.h.is_some();
    let mut pi = Vec::new();
    let mut converged = false;
    while st.iteration < max_iter {
        update_u1(prob, &mut st);
        update_h(prob, &mut st)?;
        update_u2(prob, &mut st);
        st.iteration += 1;
        pi = coupling(prob, &st);
        let (r, c) = marginal_residuals(prob, &pi);
        st.row_residual = r;
        st.col_residual = c;
        st.martingale_residual = if martingale {
            martingale_residual(prob, &pi)
        } else {
            0.0
        };
        let a: f64 = prob.w1.iter().zip(&st.u1).map(|(w, u)| w * u).sum();
        let b: f64 = prob.w2.iter().zip(&st.u2).map(|(w, u)| w * u).sum();
        st.dual_history.push(a + b + prob.eps * pi.iter().sum::<f64>());
        if !st.u1.iter().chain(&st.u2).all(|x| x.is_finite()) {
            return Err(Error::Numerical("Sinkhorn potentials are not finite".into()));
        }
        if r <= tol && c <= tol && st.martingale_residual <= tol {
            converged = true;
            break;
        }
    }
    if pi.is_empty() {
        pi = coupling(prob, &st);
    }
    let value = pi.iter().zip(&prob.cost).map(|(p, c)| p * c).sum();
    Ok(SinkhornResult {
        value,
        coupling: pi,
        state: st,
        converged,
    })
}

/// Entropic OT by alternating row and column updates until both marginal
/// residuals are at most `tol`. A run that hits `max_iter` comes back with
/// `converged = false`.
pub fn sinkhorn_ot(prob: &DiscreteProblem, max_iter: usize, tol: f64) -> Result<SinkhornResult> {
    sinkhorn(prob, SinkhornState::new(prob, false), max_iter, tol)
}

/// Entropic MOT: row update, per-atom martingale root, column update.
pub fn sinkhorn_mot(prob: &DiscreteProblem, max_iter: usize, tol: f64) -> Result<SinkhornResult> {
    if prob.dim != 1 {
        return Err(Error::Unsupported("martingale Sinkhorn needs d = 1".into()));
    }
    sinkhorn(prob, SinkhornState::new(prob, true), max_iter, tol)
}

/// Runs the same iteration on a decreasing sequence `eps_start, eps_start
/// * factor, ...` down to `prob.eps`, warm-starting each stage from the
/// previous potentials. `max_iter` bounds every stage.
pub fn sinkhorn_annealed(
    prob: &DiscreteProblem,
    martingale: bool,
    eps_start: f64,
    factor: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornResult> {
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::param("annealing factor must lie in (0, 1)"));
    }
    if martingale && prob.dim != 1 {
        return Err(Error::Unsupported("martingale Sinkhorn needs d = 1".into()));
    }
    let mut st = SinkhornState::new(prob, martingale);
    let mut eps = eps_start.max(prob.eps);
    loop {
        let stage = prob.with_eps(eps)?;
        st.iteration = 0;
        let res = sinkhorn(&stage, st, max_iter, tol)?;
        if eps <= prob.eps {
            return Ok(res);
        }
        st = res.state;
        eps = (eps * factor).max(prob.eps);
    }
}

/// Entries of a row-major coupling above `1e-12` as `(i, j, pi_ij)`.
pub fn sparse_coupling(pi: &[f64], n2: usize) -> Vec<(usize, usize, f64)> {
    pi.iter()
        .enumerate()
        .filter(|(_, &p)| p > 1e-12)
        .map(|(k, &p)| (k / n2, k % n2, p))
        .collect()
}

/// Potentials of the neural dual formulations.
#[derive(Debug, Clone, PartialEq)]
pub struct DualNets {
    pub u1: Mlp,
    pub u2: Mlp,
    pub h: Option<Mlp>,
}

impl DualNets {
    pub fn init(dim: usize, martingale: bool, arch: &NetArch, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        Ok(DualNets {
            u1: arch.build(dim, 1, &mut rng)?,
            u2: arch.build(dim, 1, &mut rng)?,
            h: if martingale {
                Some(arch.build(dim, dim, &mut rng)?)
            } else {
                None
            },
        })
    }

    fn validate(&self, dim: usize, martingale: bool) -> Result<()> {
        let shape = |net: &Mlp, d_out: usize| net.input_dim() == dim && net.output_dim() == d_out;
        if !shape(&self.u1, 1) || !shape(&self.u2, 1) {
            return Err(Error::param(format!("potentials must map R^{dim} to R")));
        }
        match (&self.h, martingale) {
            (Some(h), true) if shape(h, dim) => Ok(()),
            (None, false) => Ok(()),
            _ => Err(Error::param("martingale multiplier does not match the problem")),
        }
    }

    fn all_finite(&self) -> bool {
        self.u1
            .params()
            .iter()
            .chain(self.u2.params())
            .chain(self.h.iter().flat_map(|h| h.params()))
            .all(|p| p.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct BaselineReport {
    pub value: f64,
    /// `E_mu2[U]` already added to `value` when the cost is shifted.
    pub correction: f64,
    /// Final minimized objective on the grid, shift included.
    pub objective: f64,
    pub trace: Trace,
    /// Exponents clipped at the entropic clamp over the whole run.
    pub clip_count: u64,
    pub steps: u64,
    pub warnings: Vec<String>,
    pub nets: DualNets,
}

/// Largest exponent passed to `exp` in the neural entropic dual.
pub const EXP_CLIP: f64 = 30.0;
/// Side of the pair grid on which traces are evaluated.
pub const EVAL_GRID: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Loss {
    Entropic { eps: f64 },
    Penalty { gamma: f64 },
}

struct Buffers {
    ws1: Workspace,
    ws2: Workspace,
    wsh: Workspace,
    hv: Vec<f64>,
    up: Vec<f64>,
}

/// Potentials evaluated on the first `EVAL_GRID` draws of each marginal.
struct GridEval {
    idx1: Vec<usize>,
    idx2: Vec<usize>,
    u1: Vec<f64>,
    u2: Vec<f64>,
    h: Vec<Vec<f64>>,
}

fn grid_eval(mu1: &SampleSet, mu2: &SampleSet, nets: &DualNets) -> GridEval {
    let idx1: Vec<usize> = (0..mu1.len().min(EVAL_GRID)).collect();
    let idx2: Vec<usize> = (0..mu2.len().min(EVAL_GRID)).collect();
    let mut ws = Workspace::default();
    let u1 = idx1.iter().map(|&i| nets.u1.forward_ws(mu1.row(i), &mut ws)[0]).collect();
    let u2 = idx2.iter().map(|&j| nets.u2.forward_ws(mu2.row(j), &mut ws)[0]).collect();
    let h = match &nets.h {
        Some(h) => idx1
            .iter()
            .map(|&i| h.forward_ws(mu1.row(i), &mut ws).to_vec())
            .collect(),
        None => Vec::new(),
    };
    GridEval {
        idx1,
        idx2,
        u1,
        u2,
        h,
    }
}

fn slack(cost: &CostFn, x: &[f64], y: &[f64], u1: f64, u2: f64, h: Option<&[f64]>) -> f64 {
    let mut z = cost.eval(x, y) - u1 - u2;
    if let Some(h) = h {
        z -= h.iter().zip(y.iter().zip(x)).map(|(h, (y, x))| h * (y - x)).sum::<f64>();
    }
    z
}

fn max_slack(cost: &CostFn, mu1: &SampleSet, mu2: &SampleSet, nets: &DualNets) -> f64 {
    let mut ws = Workspace::default();
    let u2: Vec<f64> = mu2.rows().map(|y| nets.u2.forward_ws(y, &mut ws)[0]).collect();
    (0..mu1.len())
        .into_par_iter()
        .map_init(Workspace::default, |ws, i| {
            let x = mu1.row(i);
            let u1 = nets.u1.forward_ws(x, ws)[0];
            let h = nets.h.as_ref().map(|h| h.forward_ws(x, ws).to_vec());
            u2.iter().enumerate().fold(f64::NEG_INFINITY, |m, (j, &v)| {
                m.max(slack(cost, x, mu2.row(j), u1, v, h.as_deref()))
            })
        })
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

/// `E_pi[c]` over the evaluation grid for `pi ~ exp((c - u1 - u2 -
/// h.Delta) / eps)`, each row rescaled to its `mu1` weight. This is the
/// coupling after one exact `u1` half-step on the grid, so a few pairs with
/// large slack cannot take over the whole estimate.
fn entropic_value(cost: &CostFn, mu1: &SampleSet, mu2: &SampleSet, g: &GridEval, eps: f64) -> f64 {
    let rows: Vec<f64> = g
        .idx1
        .par_iter()
        .enumerate()
        .map(|(a, &i)| {
            let x = mu1.row(i);
            let h = g.h.get(a).map(Vec::as_slice);
            let mut m = f64::NEG_INFINITY;
            let (mut s, mut sc) = (0.0, 0.0);
            for (b, &j) in g.idx2.iter().enumerate() {
                let y = mu2.row(j);
                let c = cost.eval(x, y);
                let l = slack(cost, x, y, 0.0, g.u2[b], h) / eps;
                if l > m {
                    let r = (m - l).exp();
                    s *= r;
                    sc *= r;
                    m = l;
                }
                let w = (l - m).exp();
                s += w;
                sc += w * c;
            }
            sc / s
        })
        .collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

/// `E[u1] + E[u2] + eps E_P0[exp(slack / eps)]` over the evaluation grid,
/// with the exponential summed in log-domain.
fn entropic_objective(cost: &CostFn, mu1: &SampleSet, mu2: &SampleSet, g: &GridEval, eps: f64) -> f64 {
    let rows: Vec<(f64, f64)> = g
        .idx1
        .par_iter()
        .enumerate()
        .map(|(a, &i)| {
            let x = mu1.row(i);
            let h = g.h.get(a).map(Vec::as_slice);
            let mut m = f64::NEG_INFINITY;
            let mut s = 0.0;
            for (b, &j) in g.idx2.iter().enumerate() {
                let l = slack(cost, x, mu2.row(j), g.u1[a], g.u2[b], h) / eps;
                if l > m {
                    s *= (m - l).exp();
                    m = l;
                }
                s += (l - m).exp();
            }
            (m, s)
        })
        .collect();
    let m = rows.iter().fold(f64::NEG_INFINITY, |a, r| a.max(r.0));
    let s: f64 = rows.iter().map(|&(rm, rs)| rs * (rm - m).exp()).sum();
    let n = (g.idx1.len() * g.idx2.len()) as f64;
    let m1 = g.u1.iter().sum::<f64>() / g.u1.len() as f64;
    let m2 = g.u2.iter().sum::<f64>() / g.u2.len() as f64;
    m1 + m2 + eps * (m + (s / n).ln()).exp()
}

/// `E[u1] + E[u2] + gamma E_P0[(slack)_+^2]` over the evaluation grid.
fn penalty_objective(cost: &CostFn, mu1: &SampleSet, mu2: &SampleSet, g: &GridEval, gamma: f64) -> f64 {
    let pen: f64 = g
        .idx1
        .par_iter()
        .enumerate()
        .map(|(a, &i)| {
            let x = mu1.row(i);
            let h = g.h.get(a).map(Vec::as_slice);
            g.idx2
                .iter()
                .enumerate()
                .map(|(b, &j)| {
                    let z = slack(cost, x, mu2.row(j), g.u1[a], g.u2[b], h).max(0.0);
                    z * z
                })
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum();
    let n = (g.idx1.len() * g.idx2.len()) as f64;
    let m1 = g.u1.iter().sum::<f64>() / g.u1.len() as f64;
    let m2 = g.u2.iter().sum::<f64>() / g.u2.len() as f64;
    m1 + m2 + gamma * pen / n
}

/// Evaluations inspected by the runaway detector.
const RUNAWAY_WINDOW: usize = 10;

/// The penalized objective has no lower bound when the penalty cannot
/// hold the potentials. Flags a trace that fell at every one of the last
/// evaluations by more than ten times the spread of the cost on the grid.
fn runaway(trace: &Trace, cost_spread: f64) -> bool {
    let n = trace.points.len();
    if n < RUNAWAY_WINDOW {
        return false;
    }
    let tail = &trace.points[n - RUNAWAY_WINDOW..];
    let falling = tail.windows(2).all(|w| w[1].1 < w[0].1);
    falling && tail[0].1 - tail[RUNAWAY_WINDOW - 1].1 > 10.0 * cost_spread.max(1e-12)
}

fn cost_spread(cost: &CostFn, mu1: &SampleSet, mu2: &SampleSet) -> f64 {
    let n = mu1.len().min(mu2.len()).min(EVAL_GRID);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..n {
            let c = cost.eval(mu1.row(i), mu2.row(j));
            lo = lo.min(c);
            hi = hi.max(c);
        }
    }
    hi - lo
}

fn train_dual(
    cost: &CostFn,
    mu1: &SampleSet,
    mu2: &SampleSet,
    martingale: bool,
    loss: Loss,
    init: Option<DualNets>,
    config: &SolverConfig,
) -> Result<BaselineReport> {
    if mu1.dim != mu2.dim {
        return Err(Error::param("marginal dimensions differ"));
    }
    if mu1.is_empty() || mu2.is_empty() {
        return Err(Error::param("marginal sample sets must be non-empty"));
    }
    if config.minibatch == 0 {
        return Err(Error::param("minibatch must be at least 1"));
    }
    let d = mu1.dim;
    let mut nets = match init {
        Some(nets) => {
            nets.validate(d, martingale)?;
            nets
        }
        None => {
            let mut nets = DualNets::init(d, martingale, &config.arch, config.seed)?;
            // Start dual-feasible on every sample pair so that no exponent
            // is clipped early.
            let lift = max_slack(cost, mu1, mu2, &nets);
            if lift > 0.0 {
                nets.u1.output_bias_mut()[0] += lift;
            }
            nets
        }
    };
    let mut opt1 = Optimizer::new(config.optimizer, nets.u1.param_count());
    let mut opt2 = Optimizer::new(config.optimizer, nets.u2.param_count());
    let mut opth = nets.h.as_ref().map(|h| Optimizer::new(config.optimizer, h.param_count()));
    let mut rng = seeded_rng(config.seed ^ 0x0e17_09c1_5eed_0002);
    let mut buf = Buffers {
        ws1: nets.u1.workspace(),
        ws2: nets.u2.workspace(),
        wsh: Workspace::default(),
        hv: vec![0.0; d],
        up: vec![0.0; d],
    };
    let spread = match loss {
        Loss::Penalty { .. } => cost_spread(cost, mu1, mu2),
        Loss::Entropic { .. } => 0.0,
    };
    let mut trace = Trace::default();
    let mut clip_count = 0u64;
    let eval_every = config.eval_every.max(1);
    let scale = 1.0 / config.minibatch as f64;
    let evaluate = |nets: &DualNets| {
        let g = grid_eval(mu1, mu2, nets);
        match loss {
            Loss::Entropic { eps } => entropic_value(cost, mu1, mu2, &g, eps),
            Loss::Penalty { gamma } => penalty_objective(cost, mu1, mu2, &g, gamma),
        }
    };
    let diverged = |step: u64, trace: &Trace| Error::Diverged {
        step,
        partial_trace: trace.clone(),
    };

    let mut g1 = vec![0.0; nets.u1.param_count()];
    let mut g2 = vec![0.0; nets.u2.param_count()];
    let mut gh = vec![0.0; nets.h.as_ref().map_or(0, Mlp::param_count)];
    for step in 1..=config.steps {
        let lr = config.schedule.rate(config.lr, step);
        g1.iter_mut().for_each(|x| *x = 0.0);
        g2.iter_mut().for_each(|x| *x = 0.0);
        gh.iter_mut().for_each(|x| *x = 0.0);
        for _ in 0..config.minibatch {
            let x = mu1.row(rng.random_range(0..mu1.len()));
            let y = mu2.row(rng.random_range(0..mu2.len()));
            let u1 = nets.u1.forward_ws(x, &mut buf.ws1)[0];
            let u2 = nets.u2.forward_ws(y, &mut buf.ws2)[0];
            if let Some(h) = &nets.h {
                let hv = h.forward_ws(x, &mut buf.wsh);
                buf.hv.copy_from_slice(hv);
            }
            let z = slack(cost, x, y, u1, u2, nets.h.as_ref().map(|_| buf.hv.as_slice()));
            // derivative of the loss with respect to the slack
            let dz = match loss {
                Loss::Entropic { eps } => {
                    let e = z / eps;
                    if e > EXP_CLIP {
                        clip_count += 1;
                    }
                    e.min(EXP_CLIP).exp()
                }
                Loss::Penalty { gamma } => 2.0 * gamma * z.max(0.0),
            };
            let g_pot = (1.0 - dz) * scale;
            nets.u1.backward_ws(&mut buf.ws1, &[g_pot], Some(&mut g1), None);
            nets.u2.backward_ws(&mut buf.ws2, &[g_pot], Some(&mut g2), None);
            if let Some(h) = &nets.h {
                for ((up, yk), xk) in buf.up.iter_mut().zip(y).zip(x) {
                    *up = -dz * (yk - xk) * scale;
                }
                h.backward_ws(&mut buf.wsh, &buf.up, Some(&mut gh), None);
            }
        }
        if !(g1.iter().chain(&g2).chain(&gh).all(|g| g.is_finite())) {
            return Err(diverged(step, &trace));
        }
        opt1.step(nets.u1.params_mut(), &g1, Direction::Descend, lr);
        opt2.step(nets.u2.params_mut(), &g2, Direction::Descend, lr);
        if let (Some(h), Some(o)) = (nets.h.as_mut(), opth.as_mut()) {
            o.step(h.params_mut(), &gh, Direction::Descend, lr);
        }
        if !nets.all_finite() {
            return Err(diverged(step, &trace));
        }
        if step % eval_every == 0 || step == config.steps {
            let v = evaluate(&nets);
            if !v.is_finite() || v.abs() > 1e8 {
                return Err(diverged(step, &trace));
            }
            trace.push(step, v);
            if let Loss::Penalty { .. } = loss {
                if runaway(&trace, spread) {
                    return Err(diverged(step, &trace));
                }
            }
        }
    }
    if trace.is_empty() {
        trace.push(0, evaluate(&nets));
    }
    let mut warnings = Vec::new();
    if clip_count > 0 {
        warnings.push(format!(
            "{clip_count} exponents clipped at {EXP_CLIP} in the entropic dual"
        ));
    }
    let correction = cost.value_correction(mu2);
    let g = grid_eval(mu1, mu2, &nets);
    let objective = correction
        + match loss {
            Loss::Entropic { eps } => entropic_objective(cost, mu1, mu2, &g, eps),
            Loss::Penalty { gamma } => penalty_objective(cost, mu1, mu2, &g, gamma),
        };
    Ok(BaselineReport {
        objective,
        value: trace.tail_mean(crate::saddle::VALUE_WINDOW).expect("trace non-empty") + correction,
        correction,
        trace,
        clip_count,
        steps: config.steps,
        warnings,
        nets,
    })
}

/// Stochastic minimization of the entropic dual with the product of the
/// sampled marginals as prior. The trace and the reported value are the
/// self-normalized `E_pi[c]` on a grid of sample pairs; the final dual
/// objective is reported separately.
pub fn neural_entropic(
    cost: &CostFn,
    mu1: &SampleSet,
    mu2: &SampleSet,
    eps: f64,
    martingale: bool,
    config: &SolverConfig,
) -> Result<BaselineReport> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::param(format!("eps must be positive, got {eps}")));
    }
    train_dual(cost, mu1, mu2, martingale, Loss::Entropic { eps }, None, config)
}

/// `neural_entropic` started from given potentials, e.g. the result of a
/// run at a larger `eps`.
pub fn neural_entropic_from(
    cost: &CostFn,
    mu1: &SampleSet,
    mu2: &SampleSet,
    eps: f64,
    nets: DualNets,
    config: &SolverConfig,
) -> Result<BaselineReport> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::param(format!("eps must be positive, got {eps}")));
    }
    let martingale = nets.h.is_some();
    train_dual(cost, mu1, mu2, martingale, Loss::Entropic { eps }, Some(nets), config)
}

/// Stochastic minimization of `E[u1] + E[u2] + gamma E_P0[(c - u1 - u2 -
/// h.Delta)_+^2]`. The reported value is that objective on a grid of
/// sample pairs.
pub fn penalization(
    cost: &CostFn,
    mu1: &SampleSet,
    mu2: &SampleSet,
    gamma: f64,
    martingale: bool,
    config: &SolverConfig,
) -> Result<BaselineReport> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::param(format!("gamma must be non-negative, got {gamma}")));
    }
    train_dual(cost, mu1, mu2, martingale, Loss::Penalty { gamma }, None, config)
}
