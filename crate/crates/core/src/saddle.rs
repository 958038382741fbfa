//! Stochastic Arrow-Hurwicz solver for the map-based saddle-point form of
//! optimal transport and martingale optimal transport.
//!
//! For OT the potential `u` (infimum player) and the map `T` (supremum
//! player) optimize
//!
//! ```text
//! min_u max_T  E_mu1[ c(S1, T(S1)) - u(T(S1)) ] + E_mu2[ u(S2) ]
//! ```
//!
//! For MOT the supremum player holds `n` maps `T_k` and mixture weights
//! `q_k`, and the infimum player holds `u` plus the martingale multiplier
//! `h`:
//!
//! ```text
//! min_{u,h} max_{T,q}  E_mu1[ sum_k q_k(S1) ( c(S1,T_k) - u(T_k) - h(S1).(T_k - S1) ) ] + E_mu2[ u(S2) ]
//! ```
//!
//! The weights come from `n - 1` sigmoid networks through stick-breaking,
//! `q_1 = s_1`, `q_k = s_k prod_{j<k} (1 - s_j)`, `q_n = 1 - sum_{k<n} q_k`.

use rand::Rng as _;

use crate::costs::CostFn;
use crate::error::{Error, Result};
use crate::measures::{seeded_rng, Rng, SampleSet};
use crate::neuralnet::{
    Activation, AdamConfig, Direction, Mlp, Optimizer, OptimizerKind, Workspace,
};

/// Full-sample objective values recorded during a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub points: Vec<(u64, f64)>,
}

impl Trace {
    pub fn push(&mut self, step: u64, value: f64) {
        debug_assert!(self.points.last().is_none_or(|&(s, _)| s < step));
        self.points.push((step, value));
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    /// Mean of the last `k` recorded values (fewer if the trace is short).
    pub fn tail_mean(&self, k: usize) -> Option<f64> {
        let tail = self.tail(k);
        if tail.is_empty() {
            None
        } else {
            Some(tail.iter().sum::<f64>() / tail.len() as f64)
        }
    }

    /// Sample standard deviation of the last `k` values.
    pub fn tail_std(&self, k: usize) -> Option<f64> {
        let tail = self.tail(k);
        if tail.len() < 2 {
            return None;
        }
        let m = tail.iter().sum::<f64>() / tail.len() as f64;
        let v = tail.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (tail.len() - 1) as f64;
        Some(v.sqrt())
    }

    fn tail(&self, k: usize) -> Vec<f64> {
        let start = self.points.len().saturating_sub(k);
        self.points[start..].iter().map(|p| p.1).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Ot,
    Mot { n_maps: usize },
}

#[derive(Debug, Clone)]
pub struct SaddleProblem {
    pub cost: CostFn,
    pub mu1: SampleSet,
    pub mu2: SampleSet,
    pub mode: Mode,
}

impl SaddleProblem {
    pub fn new(cost: CostFn, mu1: SampleSet, mu2: SampleSet, mode: Mode) -> Result<Self> {
        if mu1.dim != mu2.dim {
            return Err(Error::param(format!(
                "marginal dimensions differ ({} vs {})",
                mu1.dim, mu2.dim
            )));
        }
        if mu1.is_empty() || mu2.is_empty() {
            return Err(Error::param("marginal sample sets must be non-empty"));
        }
        if let Mode::Mot { n_maps } = mode {
            if n_maps < 2 {
                return Err(Error::param("MOT needs at least two maps"));
            }
        }
        Ok(SaddleProblem {
            cost,
            mu1,
            mu2,
            mode,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu1.dim
    }
}

/// Hidden widths and activation shared by every network of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct NetArch {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetArch {
    fn default() -> Self {
        NetArch {
            hidden: vec![4, 4],
            activation: Activation::Tanh,
        }
    }
}

impl NetArch {
    fn sizes(&self, d_in: usize, d_out: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(d_in);
        s.extend_from_slice(&self.hidden);
        s.push(d_out);
        s
    }

    pub fn build(&self, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Mlp> {
        Mlp::new(&self.sizes(d_in, d_out), self.activation, rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleNets {
    pub u: Mlp,
    pub maps: Vec<Mlp>,
    pub h: Option<Mlp>,
    /// Logit networks for the first `n_maps - 1` weights.
    pub q: Vec<Mlp>,
}

impl SaddleNets {
    pub fn init(dim: usize, mode: Mode, arch: &NetArch, rng: &mut Rng) -> Result<Self> {
        let u = arch.build(dim, 1, rng)?;
        match mode {
            Mode::Ot => Ok(SaddleNets {
                u,
                maps: vec![arch.build(dim, dim, rng)?],
                h: None,
                q: Vec::new(),
            }),
            Mode::Mot { n_maps } => {
                let maps = (0..n_maps)
                    .map(|_| arch.build(dim, dim, rng))
                    .collect::<Result<Vec<_>>>()?;
                let h = Some(arch.build(dim, dim, rng)?);
                let q = (0..n_maps - 1)
                    .map(|_| arch.build(dim, 1, rng))
                    .collect::<Result<Vec<_>>>()?;
                Ok(SaddleNets { u, maps, h, q })
            }
        }
    }

    /// Checks the network layout against the mode and dimension.
    pub fn validate(&self, mode: Mode, dim: usize) -> Result<()> {
        let shape = |net: &Mlp, i: usize, o: usize, what: &str| -> Result<()> {
            if net.input_dim() != i || net.output_dim() != o {
                return Err(Error::param(format!(
                    "{what} network maps R^{} -> R^{}, expected R^{i} -> R^{o}",
                    net.input_dim(),
                    net.output_dim()
                )));
            }
            Ok(())
        };
        shape(&self.u, dim, 1, "potential")?;
        for m in &self.maps {
            shape(m, dim, dim, "map")?;
        }
        match mode {
            Mode::Ot => {
                if self.maps.len() != 1 || self.h.is_some() || !self.q.is_empty() {
                    return Err(Error::param("OT uses exactly one map and no h or q networks"));
                }
            }
            Mode::Mot { n_maps } => {
                if self.maps.len() != n_maps || n_maps < 2 {
                    return Err(Error::param(format!("MOT expects {n_maps} >= 2 maps")));
                }
                match &self.h {
                    Some(h) => shape(h, dim, dim, "martingale multiplier")?,
                    None => return Err(Error::param("MOT needs an h network")),
                }
                if self.q.len() != n_maps - 1 {
                    return Err(Error::param(format!("MOT needs {} q networks", n_maps - 1)));
                }
                for q in &self.q {
                    shape(q, dim, 1, "weight")?;
                }
            }
        }
        Ok(())
    }

    /// Mixture weights at `x` written into `out` (length `maps.len()`).
    fn weights_into(&self, x: &[f64], ws: &mut Workspace, sig: &mut [f64], out: &mut [f64]) {
        let n = self.maps.len();
        if self.q.is_empty() {
            out[0] = 1.0;
            return;
        }
        let mut remaining = 1.0;
        for j in 0..n - 1 {
            let s = sigmoid(self.q[j].forward_ws(x, ws)[0]);
            sig[j] = s;
            out[j] = s * remaining;
            remaining *= 1.0 - s;
        }
        out[n - 1] = remaining;
    }

    /// Mixture weights at `x`.
    pub fn weights(&self, x: &[f64]) -> Vec<f64> {
        let n = self.maps.len();
        let mut ws = Workspace::default();
        let mut sig = vec![0.0; n];
        let mut out = vec![0.0; n];
        self.weights_into(x, &mut ws, &mut sig, &mut out);
        out
    }

    fn all_params(&self) -> impl Iterator<Item = &f64> {
        self.u
            .params()
            .iter()
            .chain(self.maps.iter().flat_map(|m| m.params()))
            .chain(self.h.iter().flat_map(|m| m.params()))
            .chain(self.q.iter().flat_map(|m| m.params()))
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Scratch buffers for objective and gradient evaluation.
struct Scratch {
    u_ws: Workspace,
    h_ws: Workspace,
    q_ws: Vec<Workspace>,
    map_ws: Vec<Workspace>,
    t: Vec<Vec<f64>>,
    h_val: Vec<f64>,
    sig: Vec<f64>,
    q: Vec<f64>,
    a: Vec<f64>,
    upstream: Vec<f64>,
    du: Vec<f64>,
    dc: Vec<f64>,
}

impl Scratch {
    fn new(nets: &SaddleNets, dim: usize) -> Self {
        let n = nets.maps.len();
        Scratch {
            u_ws: nets.u.workspace(),
            h_ws: Workspace::default(),
            q_ws: vec![Workspace::default(); n.saturating_sub(1)],
            map_ws: nets.maps.iter().map(Mlp::workspace).collect(),
            t: vec![vec![0.0; dim]; n],
            h_val: vec![0.0; dim],
            sig: vec![0.0; n],
            q: vec![0.0; n],
            a: vec![0.0; n],
            upstream: vec![0.0; dim],
            du: vec![0.0; dim],
            dc: vec![0.0; dim],
        }
    }
}

/// Gradients of the infimum block (`u`, and `h` for MOT).
#[derive(Debug, Clone)]
struct InfGrads {
    u: Vec<f64>,
    h: Option<Vec<f64>>,
}

/// Gradients of the supremum block (maps, and `q` logits for MOT).
#[derive(Debug, Clone)]
struct SupGrads {
    maps: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl InfGrads {
    fn finite(&self) -> bool {
        finite(&self.u) && self.h.as_deref().is_none_or(finite)
    }
}

impl SupGrads {
    fn finite(&self) -> bool {
        self.maps.iter().all(|g| finite(g)) && self.q.iter().all(|g| finite(g))
    }
}

/// Per-sample evaluation shared by the objective and both gradients.
/// Returns the sample's objective and leaves maps, weights and bracket
/// terms `A_k = c - u(T_k) - h.(T_k - S1)` in the scratch buffers.
fn eval_sample(
    prob: &SaddleProblem,
    nets: &SaddleNets,
    s1: &[f64],
    s2: &[f64],
    sc: &mut Scratch,
) -> f64 {
    let n = nets.maps.len();
    if let Some(h) = &nets.h {
        let hv = h.forward_ws(s1, &mut sc.h_ws);
        sc.h_val.copy_from_slice(hv);
    }
    if n > 1 {
        let Scratch {
            q_ws, sig, q, ..
        } = sc;
        let mut remaining = 1.0;
        for j in 0..n - 1 {
            let s = sigmoid(nets.q[j].forward_ws(s1, &mut q_ws[j])[0]);
            sig[j] = s;
            q[j] = s * remaining;
            remaining *= 1.0 - s;
        }
        q[n - 1] = remaining;
    } else {
        sc.q[0] = 1.0;
    }
    let mut total = 0.0;
    for k in 0..n {
        let t = nets.maps[k].forward_ws(s1, &mut sc.map_ws[k]);
        sc.t[k].copy_from_slice(t);
        let tk = &sc.t[k];
        let mut a = prob.cost.eval(s1, tk) - nets.u.forward_ws(tk, &mut sc.u_ws)[0];
        if nets.h.is_some() {
            a -= sc
                .h_val
                .iter()
                .zip(tk.iter().zip(s1))
                .map(|(h, (t, s))| h * (t - s))
                .sum::<f64>();
        }
        sc.a[k] = a;
        total += sc.q[k] * a;
    }
    total + nets.u.forward_ws(s2, &mut sc.u_ws)[0]
}

/// Mean objective over index pairs `(i1, i2)`.
fn objective_pairs(
    prob: &SaddleProblem,
    nets: &SaddleNets,
    pairs: impl Iterator<Item = (usize, usize)>,
) -> f64 {
    let mut sc = Scratch::new(nets, prob.dim());
    let mut total = 0.0;
    let mut count = 0usize;
    for (i1, i2) in pairs {
        total += eval_sample(prob, nets, prob.mu1.row(i1), prob.mu2.row(i2), &mut sc);
        count += 1;
    }
    total / count.max(1) as f64
}

/// Mean of `J_i = c(S1, T(S1)) - u(T(S1)) + u(S2)` over the batch. Each
/// index selects the i-th draw of both marginals.
pub fn objective_ot(prob: &SaddleProblem, nets: &SaddleNets, batch: &[usize]) -> Result<f64> {
    if prob.mode != Mode::Ot {
        return Err(Error::Unsupported("objective_ot on an MOT problem".into()));
    }
    nets.validate(prob.mode, prob.dim())?;
    Ok(objective_pairs(prob, nets, batch.iter().map(|&i| (i, i))))
}

/// Mean MOT objective over the batch.
pub fn objective_mot(prob: &SaddleProblem, nets: &SaddleNets, batch: &[usize]) -> Result<f64> {
    if !matches!(prob.mode, Mode::Mot { .. }) {
        return Err(Error::Unsupported("objective_mot on an OT problem".into()));
    }
    nets.validate(prob.mode, prob.dim())?;
    Ok(objective_pairs(prob, nets, batch.iter().map(|&i| (i, i))))
}

/// Objective averaged over every draw. When the two sample sets differ in
/// size the `E_mu2[u]` term is averaged separately.
pub fn full_objective(prob: &SaddleProblem, nets: &SaddleNets) -> f64 {
    let n1 = prob.mu1.len();
    let n2 = prob.mu2.len();
    if n1 == n2 {
        return objective_pairs(prob, nets, (0..n1).map(|i| (i, i)));
    }
    let mut sc = Scratch::new(nets, prob.dim());
    let mut first = 0.0;
    for i in 0..n1 {
        let s1 = prob.mu1.row(i);
        // eval_sample adds u(s2); evaluate with s2 = s1 and remove it again
        let v = eval_sample(prob, nets, s1, s1, &mut sc);
        first += v - nets.u.forward_ws(s1, &mut sc.u_ws)[0];
    }
    let second: f64 = prob
        .mu2
        .rows()
        .map(|r| nets.u.forward_ws(r, &mut sc.u_ws)[0])
        .sum();
    first / n1 as f64 + second / n2 as f64
}

fn grad_inf(
    prob: &SaddleProblem,
    nets: &SaddleNets,
    batch: &[(usize, usize)],
    sc: &mut Scratch,
) -> InfGrads {
    let mut gu = vec![0.0; nets.u.param_count()];
    let mut gh = nets.h.as_ref().map(|h| vec![0.0; h.param_count()]);
    let scale = 1.0 / batch.len() as f64;
    let n = nets.maps.len();
    for &(i1, i2) in batch {
        let s1 = prob.mu1.row(i1);
        let s2 = prob.mu2.row(i2);
        eval_sample(prob, nets, s1, s2, sc);
        for k in 0..n {
            nets.u.forward_ws(&sc.t[k], &mut sc.u_ws);
            nets.u
                .backward_ws(&mut sc.u_ws, &[-sc.q[k] * scale], Some(&mut gu), None);
        }
        nets.u.forward_ws(s2, &mut sc.u_ws);
        nets.u.backward_ws(&mut sc.u_ws, &[scale], Some(&mut gu), None);
        if let (Some(h), Some(gh)) = (&nets.h, gh.as_mut()) {
            sc.upstream.iter_mut().for_each(|x| *x = 0.0);
            for k in 0..n {
                for ((up, t), s) in sc.upstream.iter_mut().zip(&sc.t[k]).zip(s1) {
                    *up -= sc.q[k] * (t - s) * scale;
                }
            }
            h.forward_ws(s1, &mut sc.h_ws);
            h.backward_ws(&mut sc.h_ws, &sc.upstream, Some(gh), None);
        }
    }
    InfGrads { u: gu, h: gh }
}

fn grad_sup(
    prob: &SaddleProblem,
    nets: &SaddleNets,
    batch: &[(usize, usize)],
    sc: &mut Scratch,
) -> SupGrads {
    let n = nets.maps.len();
    let mut gmaps: Vec<Vec<f64>> = nets.maps.iter().map(|m| vec![0.0; m.param_count()]).collect();
    let mut gq: Vec<Vec<f64>> = nets.q.iter().map(|m| vec![0.0; m.param_count()]).collect();
    let scale = 1.0 / batch.len() as f64;
    for &(i1, i2) in batch {
        let s1 = prob.mu1.row(i1);
        let s2 = prob.mu2.row(i2);
        eval_sample(prob, nets, s1, s2, sc);
        for k in 0..n {
            let tk = &sc.t[k];
            nets.u.forward_ws(tk, &mut sc.u_ws);
            nets.u
                .backward_ws(&mut sc.u_ws, &[1.0], None, Some(&mut sc.du));
            prob.cost.grad_s2(s1, tk, &mut sc.dc);
            let has_h = nets.h.is_some();
            for (idx, up) in sc.upstream.iter_mut().enumerate() {
                let mut g = sc.dc[idx] - sc.du[idx];
                if has_h {
                    g -= sc.h_val[idx];
                }
                *up = sc.q[k] * g * scale;
            }
            nets.maps[k].backward_ws(&mut sc.map_ws[k], &sc.upstream, Some(&mut gmaps[k]), None);
        }
        if n > 1 {
            // R_j = s_j A_j + (1 - s_j) R_{j+1}, R_{n-1} = A_{n-1};
            // dJ/ds_j = P_j (A_j - R_{j+1}) with P_j = prod_{i<j} (1 - s_i).
            let mut r_next = sc.a[n - 1];
            let mut dsig = vec![0.0; n - 1];
            for j in (0..n - 1).rev() {
                dsig[j] = sc.a[j] - r_next;
                r_next = sc.sig[j] * sc.a[j] + (1.0 - sc.sig[j]) * r_next;
            }
            let mut p = 1.0;
            for j in 0..n - 1 {
                let s = sc.sig[j];
                let up = p * dsig[j] * s * (1.0 - s) * scale;
                p *= 1.0 - s;
                nets.q[j].forward_ws(s1, &mut sc.q_ws[j]);
                nets.q[j].backward_ws(&mut sc.q_ws[j], &[up], Some(&mut gq[j]), None);
            }
        }
    }
    SupGrads { maps: gmaps, q: gq }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every` steps.
    StepDecay { factor: f64, every: u64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { factor, every } => {
                base * factor.powi((step / every.max(1)).min(i32::MAX as u64) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    ArrowHurwicz,
    PredictorCorrector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub steps: u64,
    pub eval_every: u64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    /// Draws per stochastic gradient; 1 reproduces the single-draw update.
    pub minibatch: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub arch: NetArch,
    /// Points on the first marginal's quantile grid written to the map output.
    pub map_grid: usize,
    /// Learning rate of the supremum block relative to the infimum block.
    pub sup_lr_ratio: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            steps: 1_000_000,
            eval_every: 10_000,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam(AdamConfig::default()),
            schedule: LrSchedule::Constant,
            minibatch: 64,
            seed: 0,
            scheme: Scheme::ArrowHurwicz,
            arch: NetArch::default(),
            map_grid: 200,
            sup_lr_ratio: 1.0,
        }
    }
}

/// Complete optimizer state of one run.
#[derive(Debug, Clone)]
pub struct SaddleState {
    pub nets: SaddleNets,
    opt_u: Optimizer,
    opt_h: Option<Optimizer>,
    opt_maps: Vec<Optimizer>,
    opt_q: Vec<Optimizer>,
    pub step: u64,
    pub lr: f64,
    pub sup_lr_ratio: f64,
    pub schedule: LrSchedule,
    pub minibatch: usize,
    pub seed: u64,
    rng: Rng,
    pub trace: Trace,
    batch: Vec<(usize, usize)>,
}

impl SaddleState {
    /// Fresh networks drawn from `config.seed`.
    pub fn new(prob: &SaddleProblem, config: &SolverConfig) -> Result<Self> {
        let mut init_rng = seeded_rng(config.seed);
        let nets = SaddleNets::init(prob.dim(), prob.mode, &config.arch, &mut init_rng)?;
        Self::with_nets(prob, nets, config)
    }

    pub fn with_nets(prob: &SaddleProblem, nets: SaddleNets, config: &SolverConfig) -> Result<Self> {
        nets.validate(prob.mode, prob.dim())?;
        if config.minibatch == 0 {
            return Err(Error::param("minibatch must be at least 1"));
        }
        let kind = config.optimizer;
        Ok(SaddleState {
            opt_u: Optimizer::new(kind, nets.u.param_count()),
            opt_h: nets.h.as_ref().map(|h| Optimizer::new(kind, h.param_count())),
            opt_maps: nets
                .maps
                .iter()
                .map(|m| Optimizer::new(kind, m.param_count()))
                .collect(),
            opt_q: nets
                .q
                .iter()
                .map(|m| Optimizer::new(kind, m.param_count()))
                .collect(),
            nets,
            step: 0,
            lr: config.lr,
            sup_lr_ratio: config.sup_lr_ratio,
            schedule: config.schedule,
            minibatch: config.minibatch,
            seed: config.seed,
            rng: seeded_rng(config.seed ^ 0x5eed_ba7c_4000_0001),
            trace: Trace::default(),
            batch: Vec::with_capacity(config.minibatch),
        })
    }

    fn draw_batch(&mut self, prob: &SaddleProblem) {
        let n1 = prob.mu1.len();
        let n2 = prob.mu2.len();
        self.batch.clear();
        for _ in 0..self.minibatch {
            let i = self.rng.random_range(0..n1);
            let j = if n1 == n2 {
                i
            } else {
                self.rng.random_range(0..n2)
            };
            self.batch.push((i, j));
        }
    }

    fn diverged(&self) -> Error {
        Error::Diverged {
            step: self.step,
            partial_trace: self.trace.clone(),
        }
    }

    fn apply_inf(&mut self, g: &InfGrads, lr: f64) {
        self.opt_u
            .step(self.nets.u.params_mut(), &g.u, Direction::Descend, lr);
        if let (Some(h), Some(opt), Some(gh)) = (self.nets.h.as_mut(), self.opt_h.as_mut(), &g.h) {
            opt.step(h.params_mut(), gh, Direction::Descend, lr);
        }
    }

    fn apply_sup(&mut self, g: &SupGrads, lr: f64) {
        let lr = lr * self.sup_lr_ratio;
        for ((net, opt), gm) in self.nets.maps.iter_mut().zip(&mut self.opt_maps).zip(&g.maps) {
            opt.step(net.params_mut(), gm, Direction::Ascend, lr);
        }
        for ((net, opt), gq) in self.nets.q.iter_mut().zip(&mut self.opt_q).zip(&g.q) {
            opt.step(net.params_mut(), gq, Direction::Ascend, lr);
        }
    }

    /// One Arrow-Hurwicz step: descend the infimum block at the current
    /// point, then ascend the supremum block at the updated infimum block,
    /// both on the same minibatch.
    pub fn ah_step(&mut self, prob: &SaddleProblem) -> Result<()> {
        self.step += 1;
        let lr = self.schedule.rate(self.lr, self.step);
        self.draw_batch(prob);
        let batch = std::mem::take(&mut self.batch);
        let mut sc = Scratch::new(&self.nets, prob.dim());

        let gi = grad_inf(prob, &self.nets, &batch, &mut sc);
        if !gi.finite() {
            self.batch = batch;
            return Err(self.diverged());
        }
        self.apply_inf(&gi, lr);

        let gs = grad_sup(prob, &self.nets, &batch, &mut sc);
        self.batch = batch;
        if !gs.finite() {
            return Err(self.diverged());
        }
        self.apply_sup(&gs, lr);
        self.check_params()
    }

    /// Predictor-corrector variant: each block takes a trial half step and
    /// then a full step from its starting point using the gradient at the
    /// trial point.
    pub fn ah_step_predictor_corrector(&mut self, prob: &SaddleProblem) -> Result<()> {
        self.step += 1;
        let lr = self.schedule.rate(self.lr, self.step);
        self.draw_batch(prob);
        let batch = std::mem::take(&mut self.batch);
        let mut sc = Scratch::new(&self.nets, prob.dim());
        let result = (|| {
            // infimum block
            let g0 = grad_inf(prob, &self.nets, &batch, &mut sc);
            if !g0.finite() {
                return Err(self.diverged());
            }
            let mut trial = self.clone_without_trace();
            trial.apply_inf(&g0, lr);
            let g_half = grad_inf(prob, &trial.nets, &batch, &mut sc);
            if !g_half.finite() {
                return Err(self.diverged());
            }
            self.apply_inf(&g_half, lr);

            // supremum block, evaluated at the updated infimum block
            let g0 = grad_sup(prob, &self.nets, &batch, &mut sc);
            if !g0.finite() {
                return Err(self.diverged());
            }
            let mut trial = self.clone_without_trace();
            trial.apply_sup(&g0, lr);
            let g_half = grad_sup(prob, &trial.nets, &batch, &mut sc);
            if !g_half.finite() {
                return Err(self.diverged());
            }
            self.apply_sup(&g_half, lr);
            Ok(())
        })();
        self.batch = batch;
        result?;
        self.check_params()
    }

    fn clone_without_trace(&self) -> SaddleState {
        SaddleState {
            nets: self.nets.clone(),
            opt_u: self.opt_u.clone(),
            opt_h: self.opt_h.clone(),
            opt_maps: self.opt_maps.clone(),
            opt_q: self.opt_q.clone(),
            step: self.step,
            lr: self.lr,
            sup_lr_ratio: self.sup_lr_ratio,
            schedule: self.schedule,
            minibatch: self.minibatch,
            seed: self.seed,
            rng: self.rng.clone(),
            trace: Trace::default(),
            batch: Vec::new(),
        }
    }

    fn check_params(&self) -> Result<()> {
        if self.nets.all_params().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(self.diverged())
        }
    }

    /// Records the full-sample objective at the current step.
    pub fn record(&mut self, prob: &SaddleProblem) -> Result<f64> {
        let v = full_objective(prob, &self.nets);
        if !v.is_finite() {
            return Err(self.diverged());
        }
        self.trace.push(self.step, v);
        Ok(v)
    }
}

/// One row of the map output.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSample {
    pub s1: Vec<f64>,
    /// Image under each map, ordered by mean displacement (largest first),
    /// so for two maps in d = 1 this is `[T_u, T_d]`.
    pub images: Vec<Vec<f64>>,
    /// Mixture weight of each image; `[1]` for OT.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotDiagnostics {
    /// `E_mu1 |sum_k q_k (T_k(S1) - S1)|`.
    pub martingale_residual: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Fraction of the map grid with `min_k T_k <= s1 <= max_k T_k`
    /// (coordinate-wise in d > 1).
    pub order_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct TransportReport {
    /// Estimate of the transport value, including the shift correction.
    pub value: f64,
    /// `E_mu2[U]` added back for shifted costs.
    pub correction: f64,
    pub trace: Trace,
    pub map_samples: Vec<MapSample>,
    pub diagnostics: Option<MotDiagnostics>,
    pub warnings: Vec<String>,
    pub steps: u64,
    pub nets: SaddleNets,
}

/// Trace entries averaged into the reported value.
pub const VALUE_WINDOW: usize = 5;

/// Runs `config.steps` updates, recording the full-sample objective every
/// `eval_every` steps. On divergence the error carries the trace so far.
pub fn solve(prob: &SaddleProblem, config: &SolverConfig) -> Result<TransportReport> {
    let state = SaddleState::new(prob, config)?;
    solve_from(prob, state, config)
}

pub fn solve_from(
    prob: &SaddleProblem,
    mut state: SaddleState,
    config: &SolverConfig,
) -> Result<TransportReport> {
    let mut warnings = Vec::new();
    if matches!(prob.mode, Mode::Mot { .. }) && prob.dim() == 1 {
        let report = crate::measures::check_convex_order_samples(&prob.mu1, &prob.mu2, 25)?;
        if !report.ok {
            warnings.push(format!(
                "marginal samples may not be in convex order (worst call-price gap {:.3e}, tolerance {:.3e})",
                report.worst_violation, report.tolerance
            ));
        }
    }
    let eval_every = config.eval_every.max(1);
    for _ in 0..config.steps {
        match config.scheme {
            Scheme::ArrowHurwicz => state.ah_step(prob)?,
            Scheme::PredictorCorrector => state.ah_step_predictor_corrector(prob)?,
        }
        if state.step % eval_every == 0 {
            state.record(prob)?;
        }
    }
    if state.trace.is_empty() || state.trace.points.last().map(|p| p.0) != Some(state.step) {
        state.record(prob)?;
    }
    let correction = prob.cost.value_correction(&prob.mu2);
    let value = state.trace.tail_mean(VALUE_WINDOW).expect("trace non-empty") + correction;
    let map_samples = map_samples(prob, &state.nets, config.map_grid);
    let diagnostics = match prob.mode {
        Mode::Mot { .. } => Some(mot_diagnostics(prob, &state.nets, &map_samples)),
        Mode::Ot => None,
    };
    Ok(TransportReport {
        value,
        correction,
        trace: state.trace,
        map_samples,
        diagnostics,
        warnings,
        steps: state.step,
        nets: state.nets,
    })
}

fn grid_points(samples: &SampleSet, n: usize) -> Vec<Vec<f64>> {
    let n = n.min(samples.len()).max(1);
    if samples.dim == 1 {
        let mut xs = samples.points.clone();
        xs.sort_by(f64::total_cmp);
        (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                let idx = ((u * xs.len() as f64).ceil() as usize).clamp(1, xs.len()) - 1;
                vec![xs[idx]]
            })
            .collect()
    } else {
        samples.rows().take(n).map(<[f64]>::to_vec).collect()
    }
}

fn map_samples(prob: &SaddleProblem, nets: &SaddleNets, n: usize) -> Vec<MapSample> {
    let grid = grid_points(&prob.mu1, n);
    // order maps by mean displacement over the grid
    let mut disp: Vec<(usize, f64)> = nets
        .maps
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let mut ws = m.workspace();
            let total: f64 = grid
                .iter()
                .map(|x| {
                    m.forward_ws(x, &mut ws)
                        .iter()
                        .zip(x)
                        .map(|(t, s)| t - s)
                        .sum::<f64>()
                })
                .sum();
            (k, total)
        })
        .collect();
    disp.sort_by(|a, b| b.1.total_cmp(&a.1));
    grid.into_iter()
        .map(|x| {
            let w = nets.weights(&x);
            let images = disp
                .iter()
                .map(|&(k, _)| nets.maps[k].forward(&x).expect("dimension checked"))
                .collect();
            let weights = disp.iter().map(|&(k, _)| w[k]).collect();
            MapSample {
                s1: x,
                images,
                weights,
            }
        })
        .collect()
}

fn mot_diagnostics(prob: &SaddleProblem, nets: &SaddleNets, grid: &[MapSample]) -> MotDiagnostics {
    let n = nets.maps.len();
    let d = prob.dim();
    let mut ws = Workspace::default();
    let mut sig = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut residual = 0.0;
    let mut q_min = f64::INFINITY;
    let mut q_max = f64::NEG_INFINITY;
    let mut drift = vec![0.0; d];
    for s1 in prob.mu1.rows() {
        nets.weights_into(s1, &mut ws, &mut sig, &mut q);
        drift.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..n {
            let t = nets.maps[k].forward_ws(s1, &mut ws);
            for ((dr, tk), s) in drift.iter_mut().zip(t).zip(s1) {
                *dr += q[k] * (tk - s);
            }
            q_min = q_min.min(q[k]);
            q_max = q_max.max(q[k]);
        }
        residual += drift.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    let ordered = grid
        .iter()
        .filter(|m| {
            (0..d).all(|c| {
                let lo = m.images.iter().map(|t| t[c]).fold(f64::INFINITY, f64::min);
                let hi = m.images.iter().map(|t| t[c]).fold(f64::NEG_INFINITY, f64::max);
                lo <= m.s1[c] && m.s1[c] <= hi
            })
        })
        .count();
    MotDiagnostics {
        martingale_residual: residual / prob.mu1.len() as f64,
        q_min,
        q_max,
        order_fraction: ordered as f64 / grid.len().max(1) as f64,
    }
}

/// Sup-distance between the learned OT map and the comonotone map
/// `F2^-1 o F1` over the quantile levels 0.05, 0.06, ..., 0.95.
pub fn map_error_vs_frechet_hoeffding(
    nets: &SaddleNets,
    mu1: &crate::measures::Measure,
    mu2: &crate::measures::Measure,
) -> Result<f64> {
    if nets.maps.len() != 1 || nets.h.is_some() {
        return Err(Error::Unsupported(
            "map error is defined for a single OT map".into(),
        ));
    }
    if mu1.dim() != 1 || mu2.dim() != 1 {
        return Err(Error::Unsupported("map error needs d = 1".into()));
    }
    let mut worst: f64 = 0.0;
    for k in 0..=90 {
        let u = 0.05 + 0.01 * k as f64;
        let x = mu1.quantile(u)?;
        let target = mu2.quantile(mu1.cdf(x)?.clamp(1e-12, 1.0 - 1e-12))?;
        let learned = nets.maps[0].forward(&[x])?[0];
        worst = worst.max((learned - target).abs());
    }
    Ok(worst)
}
