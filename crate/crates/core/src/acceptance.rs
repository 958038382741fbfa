//! Acceptance suite: the figure reproductions and the property checks,
//! each reported as measured value, target, tolerance and verdict.
//!
//! Experiments run from the bundled configs so the suite and `motnet run`
//! share one set of hyperparameters. Runs used by more than one criterion
//! are cached for the life of the process.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng as _;

use crate::anomaly::{flag_rate, generate, train_generator, AnomalyScorer, Threshold};
use crate::config::{ExperimentConfig, Overrides, Plan, Task};
use crate::costs::{builtin_cost, shifted_cost};
use crate::entropic::{
    coupling, marginal_residuals, neural_entropic, neural_entropic_from, penalization, sinkhorn_annealed,
    update_h, update_u1, update_u2, DiscreteProblem, SinkhornResult, SinkhornState,
};
use crate::error::{Error, Result};
use crate::lp::{
    check_solution, frechet_hoeffding_value, gaussian_w2_value, solve_lp, LpInstance, LpMethod, LpResult, Sense,
};
use crate::measures::{sample_pair, seeded_rng, Measure, PathCoupling};
use crate::neuralnet::{Activation, Mlp};
use crate::saddle::{
    full_objective, map_error_vs_frechet_hoeffding, solve, Mode, NetArch, SaddleNets, SaddleProblem, SolverConfig,
    TransportReport,
};

/// Bundled experiment configs by name.
pub const BUNDLED: [(&str, &str); 11] = [
    ("fig1_primal_dual", include_str!("../configs/fig1_primal_dual.toml")),
    ("fig1_neural_entropic", include_str!("../configs/fig1_neural_entropic.toml")),
    ("fig2_primal_dual", include_str!("../configs/fig2_primal_dual.toml")),
    ("fig2_penalization", include_str!("../configs/fig2_penalization.toml")),
    ("fig3_w2_d2", include_str!("../configs/fig3_w2_d2.toml")),
    ("fig3_w2_d10", include_str!("../configs/fig3_w2_d10.toml")),
    ("fig3_w2_d20", include_str!("../configs/fig3_w2_d20.toml")),
    ("fig4_mot", include_str!("../configs/fig4_mot.toml")),
    ("fig4_lp", include_str!("../configs/fig4_lp.toml")),
    ("fig4_sinkhorn", include_str!("../configs/fig4_sinkhorn.toml")),
    ("fig5_6_anomaly", include_str!("../configs/fig5_6_anomaly.toml")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn bundled_config(name: &str) -> Result<ExperimentConfig> {
    let text = bundled(name).ok_or_else(|| Error::Lookup(format!("no bundled config `{name}`")))?;
    ExperimentConfig::from_toml(text)
}

fn bundled_plan(name: &str) -> Result<Plan> {
    bundled_config(name)?.plan(&Overrides::default(), Path::new("."))
}

fn saddle_task(name: &str) -> Result<(SaddleProblem, SolverConfig)> {
    match bundled_plan(name)?.task {
        Task::Saddle { prob, config } => Ok((prob, config)),
        _ => Err(Error::Unsupported(format!("{name} is not a primal-dual config"))),
    }
}

/// One measured quantity of a criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub label: String,
    pub measured: f64,
    pub target: f64,
    pub tolerance: String,
    pub pass: bool,
}

impl Check {
    /// `|measured - target| <= tol`.
    fn abs(label: impl Into<String>, measured: f64, target: f64, tol: f64) -> Self {
        Check {
            label: label.into(),
            measured,
            target,
            tolerance: format!("abs {tol}"),
            pass: (measured - target).abs() <= tol,
        }
    }

    /// `|measured - target| <= rel |target|`.
    fn rel(label: impl Into<String>, measured: f64, target: f64, rel: f64) -> Self {
        Check {
            label: label.into(),
            measured,
            target,
            tolerance: format!("rel {}%", rel * 100.0),
            pass: (measured - target).abs() <= rel * target.abs(),
        }
    }

    /// `measured <= bound`.
    fn at_most(label: impl Into<String>, measured: f64, bound: f64) -> Self {
        Check {
            label: label.into(),
            measured,
            target: bound,
            tolerance: "<= target".into(),
            pass: measured <= bound,
        }
    }

    /// `measured >= bound`.
    fn at_least(label: impl Into<String>, measured: f64, bound: f64) -> Self {
        Check {
            label: label.into(),
            measured,
            target: bound,
            tolerance: ">= target".into(),
            pass: measured >= bound,
        }
    }

    /// `measured < bound`.
    fn below(label: impl Into<String>, measured: f64, bound: f64) -> Self {
        Check {
            label: label.into(),
            measured,
            target: bound,
            tolerance: "< target".into(),
            pass: measured < bound,
        }
    }

    fn failed(label: impl Into<String>, err: &Error) -> Self {
        Check {
            label: format!("{} (error: {err})", label.into()),
            measured: f64::NAN,
            target: f64::NAN,
            tolerance: "-".into(),
            pass: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    pub checks: Vec<Check>,
}

impl Criterion {
    pub fn pass(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "criterion {} [{}] {}",
            self.id,
            if self.pass() { "PASS" } else { "FAIL" },
            self.name
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "    {:<46} measured {:>14.6e}  target {:>14.6e}  tol {:<10}  {}",
                c.label,
                c.measured,
                c.target,
                c.tolerance,
                if c.pass { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn criterion(id: u8, name: &'static str, checks: Vec<Check>) -> Criterion {
    Criterion { id, name, checks }
}

fn or_fail(label: &str, r: Result<Check>) -> Check {
    r.unwrap_or_else(|e| Check::failed(label, &e))
}

fn lognormal_pair() -> (Measure, Measure) {
    (
        Measure::lognormal(1.0, 0.04).expect("valid lognormal"),
        Measure::lognormal(1.0, 0.06).expect("valid lognormal"),
    )
}

/// Quadrature nodes for the comonotone oracle.
const FH_NODES: usize = 10_000;

static FIG1: OnceLock<std::result::Result<TransportReport, String>> = OnceLock::new();

fn fig1_run() -> Result<&'static TransportReport> {
    FIG1.get_or_init(|| {
        let (prob, config) = saddle_task("fig1_primal_dual").map_err(|e| e.to_string())?;
        solve(&prob, &config).map_err(|e| e.to_string())
    })
    .as_ref()
    .map_err(|e| Error::Numerical(e.clone()))
}

static FIG4_LP: OnceLock<std::result::Result<(LpInstance, LpResult), String>> = OnceLock::new();

fn fig4_lp() -> Result<&'static (LpInstance, LpResult)> {
    FIG4_LP
        .get_or_init(|| {
            let plan = bundled_plan("fig4_lp").map_err(|e| e.to_string())?;
            match plan.task {
                Task::Lp { inst, method, .. } => {
                    let r = solve_lp(&inst, method, plan.seed).map_err(|e| e.to_string())?;
                    Ok((inst, r))
                }
                _ => Err("fig4_lp is not an LP config".into()),
            }
        })
        .as_ref()
        .map_err(|e| Error::Numerical(e.clone()))
}

static FIG4_SINKHORN: OnceLock<std::result::Result<(SinkhornResult, f64), String>> = OnceLock::new();

/// The Sinkhorn-MOT result and its tolerance.
fn fig4_sinkhorn() -> Result<&'static (SinkhornResult, f64)> {
    FIG4_SINKHORN
        .get_or_init(|| {
            let plan = bundled_plan("fig4_sinkhorn").map_err(|e| e.to_string())?;
            match plan.task {
                Task::Sinkhorn {
                    prob,
                    martingale,
                    max_iter,
                    tol,
                    anneal,
                    ..
                } => {
                    let (start, factor) = anneal.unwrap_or((prob.eps, 0.5));
                    let r = sinkhorn_annealed(&prob, martingale, start, factor, max_iter, tol)
                        .map_err(|e| e.to_string())?;
                    Ok((r, tol))
                }
                _ => Err("fig4_sinkhorn is not a Sinkhorn config".into()),
            }
        })
        .as_ref()
        .map_err(|e| Error::Numerical(e.clone()))
}

/// Figure 1: comonotone oracle and primal-dual value for `(s1 + s2)^2`.
pub fn criterion_1() -> Criterion {
    let (m1, m2) = lognormal_pair();
    let oracle = or_fail(
        "comonotone oracle",
        builtin_cost("sum_squared")
            .and_then(|c| frechet_hoeffding_value(&c, &m1, &m2, FH_NODES))
            .map(|v| Check::abs("comonotone oracle", v, 4.20, 0.01)),
    );
    let pd = or_fail(
        "primal-dual value",
        fig1_run().map(|r| Check::rel("primal-dual value", r.value, 4.20, 0.02)),
    );
    criterion(1, "figure 1 OT value, c = (s1 + s2)^2", vec![oracle, pd])
}

/// Figure 2: oracle and primal-dual value for `-(s1 - s2)^2`.
pub fn criterion_2() -> Criterion {
    let (m1, m2) = lognormal_pair();
    let oracle = builtin_cost("neg_diff_squared").and_then(|c| frechet_hoeffding_value(&c, &m1, &m2, FH_NODES));
    let mut checks = vec![or_fail(
        "comonotone oracle",
        oracle
            .as_ref()
            .map(|&v| Check::abs("comonotone oracle", v, -0.0022, 0.0002))
            .map_err(|e| Error::Numerical(e.to_string())),
    )];
    let pd = saddle_task("fig2_primal_dual").and_then(|(p, c)| solve(&p, &c));
    checks.push(or_fail(
        "primal-dual value vs oracle",
        match (oracle, pd) {
            (Ok(o), Ok(r)) => Ok(Check::rel("primal-dual value vs oracle", r.value, o, 0.15)),
            (Err(e), _) | (_, Err(e)) => Err(e),
        },
    ));
    criterion(2, "figure 2 OT value, c = -(s1 - s2)^2", checks)
}

/// Figure 3: squared 2-Wasserstein distance between `N(0, I)` and
/// `N(0, 2I)` in d = 2, 10, 20. The objective is `-|s1 - s2|^2`, so the
/// distance is minus the value.
pub fn criterion_3() -> Criterion {
    let checks = [2usize, 10, 20]
        .iter()
        .map(|&d| {
            let label = format!("W2^2 in d = {d}");
            or_fail(
                &label.clone(),
                saddle_task(&format!("fig3_w2_d{d}")).and_then(|(p, c)| {
                    let r = solve(&p, &c)?;
                    let exact = gaussian_w2_value(d, 1.0, 2.0)?;
                    Ok(Check::rel(label, -r.value, exact, 0.05))
                }),
            )
        })
        .collect();
    criterion(3, "figure 3 W2^2 of normals, d = 2, 10, 20", checks)
}

/// Figure 4: simplex reference, MOT primal-dual and Sinkhorn-MOT for
/// `(s1 + s2)^3`.
pub fn criterion_4() -> Criterion {
    let lp = fig4_lp();
    let mut checks = vec![or_fail(
        "LP value, 200 atoms",
        lp.as_ref()
            .map(|(_, r)| Check::rel("LP value, 200 atoms", r.value, 9.19, 0.01))
            .map_err(|e| Error::Numerical(e.to_string())),
    )];
    let lp_value = lp.map(|(_, r)| r.value);
    let pd = saddle_task("fig4_mot").and_then(|(p, c)| solve(&p, &c));
    checks.push(or_fail(
        "MOT primal-dual vs LP",
        match (&lp_value, pd) {
            (Ok(v), Ok(r)) => Ok(Check::rel("MOT primal-dual vs LP", r.value, *v, 0.03)),
            (Err(e), _) => Err(Error::Numerical(e.to_string())),
            (_, Err(e)) => Err(e),
        },
    ));
    checks.push(or_fail(
        "Sinkhorn-MOT eps 1e-3 vs LP",
        match (&lp_value, fig4_sinkhorn()) {
            (Ok(v), Ok((s, _))) => Ok(Check::rel("Sinkhorn-MOT eps 1e-3 vs LP", s.value, *v, 0.03)),
            (Err(e), _) => Err(Error::Numerical(e.to_string())),
            (_, Err(e)) => Err(e),
        },
    ));
    criterion(4, "figure 4 MOT value, c = (s1 + s2)^3", checks)
}

/// Learned Brenier map of the Figure-1 run against `F2^-1 o F1`.
pub fn criterion_5() -> Criterion {
    let (m1, m2) = lognormal_pair();
    let check = or_fail(
        "sup map error on [0.05, 0.95]",
        fig1_run()
            .and_then(|r| map_error_vs_frechet_hoeffding(&r.nets, &m1, &m2))
            .map(|e| Check::at_most("sup map error on [0.05, 0.95]", e, 0.05)),
    );
    criterion(5, "figure 1 map recovery", vec![check])
}

/// Entropic bias on the Figure-1 problem and penalization noise on the
/// Figure-2 problem.
pub fn criterion_6() -> Criterion {
    let entropic = || -> Result<Check> {
        let cfg = bundled_config("fig1_neural_entropic")?;
        let plan = cfg.plan(&Overrides::default(), Path::new("."))?;
        let Task::NeuralEntropic {
            cost, mu1, mu2, config, ..
        } = plan.task
        else {
            return Err(Error::Unsupported("fig1_neural_entropic is not a neural entropic config".into()));
        };
        let coarse = neural_entropic(&cost, &mu1, &mu2, 0.1, false, &config)?;
        let fine = neural_entropic_from(&cost, &mu1, &mu2, 0.01, coarse.nets.clone(), &config)?;
        Ok(Check::below("value at eps 0.1 below value at eps 0.01", coarse.value, fine.value))
    };
    let penalty = || -> Result<Check> {
        let plan = bundled_plan("fig2_penalization")?;
        let Task::Penalization {
            cost, mu1, mu2, config, ..
        } = plan.task
        else {
            return Err(Error::Unsupported("fig2_penalization is not a penalization config".into()));
        };
        let spread = |gamma: f64| -> Result<f64> {
            let r = penalization(&cost, &mu1, &mu2, gamma, false, &config)?;
            r.trace
                .tail_std(10)
                .ok_or_else(|| Error::Numerical("fewer than 10 evaluations".into()))
        };
        let low = spread(1e3)?;
        let high = spread(1e4)?;
        Ok(Check::below("last-10 std, gamma 1e3 below gamma 1e4", low, high))
    };
    criterion(
        6,
        "baseline pathologies",
        vec![
            or_fail("value at eps 0.1 below value at eps 0.01", entropic()),
            or_fail("last-10 std, gamma 1e3 below gamma 1e4", penalty()),
        ],
    )
}

/// Generator training and anomaly flagging.
pub fn criterion_7() -> Criterion {
    let run = || -> Result<Vec<Check>> {
        let plan = bundled_plan("fig5_6_anomaly")?;
        let Task::Anomaly {
            prob,
            config,
            quantile,
            shift,
            n_generate,
        } = plan.task
        else {
            return Err(Error::Unsupported("fig5_6_anomaly is not an anomaly config".into()));
        };
        let r = train_generator(&prob, &config)?;
        let w2 = r
            .w2_trace
            .last()
            .ok_or_else(|| Error::Numerical("empty distance trace".into()))?;
        let seed = plan.seed;
        let reference = generate(&r.generator, &prob.prior, n_generate, seed.wrapping_add(2), 0.0)?;
        let scorer = AnomalyScorer::new(reference, Threshold::Quantile(quantile))?;
        let normal = generate(&r.generator, &prob.prior, n_generate, seed.wrapping_add(3), 0.0)?;
        let abnormal = generate(&r.generator, &prob.prior, n_generate, seed.wrapping_add(4), shift)?;
        let normal_rate = flag_rate(&scorer.score_anomalies(&normal)?);
        let abnormal_rate = flag_rate(&scorer.score_anomalies(&abnormal)?);
        Ok(vec![
            Check::at_most("final W2^2 trace value", w2, 0.01),
            Check::at_least("flagged fraction, shifted points", abnormal_rate, 0.95),
            Check::at_most("flagged fraction, unshifted points", normal_rate, 0.05),
        ])
    };
    let checks = run().unwrap_or_else(|e| vec![Check::failed("anomaly pipeline", &e)]);
    criterion(7, "anomaly pipeline", checks)
}

/// Largest norm-wise relative error between backpropagated and central
/// finite-difference parameter gradients over 20 random networks.
pub fn backprop_fd_error(seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d_in = rng.random_range(1..=4);
        let d_out = rng.random_range(1..=3);
        let mut sizes = vec![d_in];
        for _ in 0..rng.random_range(1..=3) {
            sizes.push(rng.random_range(1..=6));
        }
        sizes.push(d_out);
        let act = if rng.random_bool(0.8) {
            Activation::Tanh
        } else {
            Activation::Linear
        };
        let mut net = Mlp::new(&sizes, act, &mut rng)?;
        let x: Vec<f64> = (0..d_in).map(|_| rng.random_range(-1.5..1.5)).collect();
        let w: Vec<f64> = (0..d_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (grad, _) = net.backward(&x, &w)?;
        let f = |n: &Mlp| -> Result<f64> { Ok(n.forward(&x)?.iter().zip(&w).map(|(a, b)| a * b).sum()) };
        let h = 1e-5;
        let mut diff = 0.0;
        let mut norm = 0.0;
        for k in 0..net.param_count() {
            let orig = net.params()[k];
            net.params_mut()[k] = orig + h;
            let up = f(&net)?;
            net.params_mut()[k] = orig - h;
            let down = f(&net)?;
            net.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            diff += (grad[k] - fd).powi(2);
            norm += grad[k].powi(2);
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-12));
    }
    Ok(worst)
}

/// Largest relative duality gap over small OT and MOT instances.
pub fn lp_duality_gap(seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (n1, n2) = (rng.random_range(3..=9), rng.random_range(3..=9));
        let norm = |v: Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let w1 = norm((0..n1).map(|_| rng.random_range(0.1..1.0)).collect());
        let w2 = norm((0..n2).map(|_| rng.random_range(0.1..1.0)).collect());
        let c: Vec<f64> = (0..n1 * n2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a1: Vec<f64> = (0..n1).map(|i| i as f64).collect();
        let a2: Vec<f64> = (0..n2).map(|j| j as f64).collect();
        for sense in [Sense::Max, Sense::Min] {
            let inst = LpInstance::from_matrix(a1.clone(), w1.clone(), a2.clone(), w2.clone(), c.clone(), false, sense)?;
            let r = solve_lp(&inst, LpMethod::DenseSimplex, seed)?;
            worst = worst.max(check_solution(&inst, &r).duality_gap);
        }
    }
    let (m1, m2) = lognormal_pair();
    for (name, n) in [("sum_squared", 12), ("cubic_sum", 20), ("neg_diff_squared", 16)] {
        let cost = builtin_cost(name)?;
        for method in [LpMethod::DenseSimplex, LpMethod::CuttingPlane] {
            let (inst, _) = LpInstance::from_measures(&m1, &m2, n, &cost, true, Sense::Max)?;
            let r = solve_lp(&inst, method, seed)?;
            worst = worst.max(check_solution(&inst, &r).duality_gap);
        }
    }
    Ok(worst)
}

/// Largest marginal residual right after the half-iteration that fits that
/// marginal, over OT and MOT Sinkhorn runs.
pub fn sinkhorn_half_step_residual() -> Result<f64> {
    let (m1, m2) = lognormal_pair();
    let cost = builtin_cost("sum_squared")?;
    let mut worst: f64 = 0.0;
    for martingale in [false, true] {
        let disc = crate::lp::discretize_quantile(&m1, &m2, 40, 50, martingale)?;
        let prob = DiscreteProblem::new(
            disc.atoms1.clone(),
            disc.weights1(),
            disc.atoms2.clone(),
            disc.weights2(),
            1,
            &cost,
            0.05,
        )?;
        let mut st = SinkhornState::new(&prob, martingale);
        for _ in 0..20 {
            update_u1(&prob, &mut st);
            let (rows, _) = marginal_residuals(&prob, &coupling(&prob, &st));
            update_h(&prob, &mut st)?;
            update_u2(&prob, &mut st);
            let (_, cols) = marginal_residuals(&prob, &coupling(&prob, &st));
            worst = worst.max(rows).max(cols);
        }
    }
    Ok(worst)
}

/// Largest change of the full-sample objective when a constant is added to
/// the output bias of `u`, on random OT and MOT networks.
pub fn gauge_defect(seed: u64) -> Result<f64> {
    let (m1, m2) = lognormal_pair();
    let (s1, s2) = sample_pair(&m1, &m2, 2048, PathCoupling::Common, seed)?;
    let mut worst: f64 = 0.0;
    let mut rng = seeded_rng(seed);
    for (name, mode) in [("sum_squared", Mode::Ot), ("cubic_sum", Mode::Mot { n_maps: 2 }), ("cubic_sum", Mode::Mot { n_maps: 3 })] {
        let cost = shifted_cost(&builtin_cost(name)?, &s1)?;
        let prob = SaddleProblem::new(cost, s1.clone(), s2.clone(), mode)?;
        let mut nets = SaddleNets::init(1, mode, &NetArch::default(), &mut rng)?;
        let base = full_objective(&prob, &nets);
        for k in [-3.7, 0.25, 11.0] {
            nets.u.output_bias_mut()[0] += k;
            worst = worst.max((full_objective(&prob, &nets) - base).abs());
            nets.u.output_bias_mut()[0] -= k;
        }
    }
    Ok(worst)
}

/// Seeds of the one-layer convergence check.
pub const ONE_LAYER_SEEDS: u64 = 20;

/// Worst relative spread, `std(last 10 evaluations) / |value|`, of affine
/// (no hidden layer) networks on the shifted Figure-1 cost, whose second
/// `s2`-derivative is -2. Each seed draws its own sample and initialization.
pub fn one_layer_spread() -> Result<f64> {
    let (m1, m2) = lognormal_pair();
    let mut worst: f64 = 0.0;
    for seed in 0..ONE_LAYER_SEEDS {
        let (s1, s2) = sample_pair(&m1, &m2, 2048, PathCoupling::Common, 100 + seed)?;
        let cost = shifted_cost(&builtin_cost("sum_squared")?, &s1)?;
        let prob = SaddleProblem::new(cost, s1, s2, Mode::Ot)?;
        let config = SolverConfig {
            steps: 20_000,
            eval_every: 1000,
            lr: 1e-3,
            seed,
            arch: NetArch {
                hidden: Vec::new(),
                activation: Activation::Linear,
            },
            ..SolverConfig::default()
        };
        let r = solve(&prob, &config)?;
        let sd = r
            .trace
            .tail_std(10)
            .ok_or_else(|| Error::Numerical("fewer than 10 evaluations".into()))?;
        worst = worst.max(sd / r.value.abs());
    }
    Ok(worst)
}

/// Property suite.
pub fn criterion_8() -> Criterion {
    let mut checks = vec![
        or_fail(
            "backprop vs finite differences, 20 nets",
            backprop_fd_error(8).map(|e| Check::at_most("backprop vs finite differences, 20 nets", e, 1e-5)),
        ),
        or_fail(
            "LP relative duality gap",
            lp_duality_gap(8).map(|g| Check::at_most("LP relative duality gap", g, 1e-7)),
        ),
        or_fail(
            "Sinkhorn marginal after its half-step",
            sinkhorn_half_step_residual().map(|r| Check::at_most("Sinkhorn marginal after its half-step", r, 1e-12)),
        ),
        or_fail(
            "Sinkhorn-MOT martingale residual / tol",
            fig4_sinkhorn().map(|(s, tol)| {
                Check::at_most("Sinkhorn-MOT martingale residual / tol", s.state.martingale_residual / tol, 10.0)
            }),
        ),
        or_fail(
            "gauge invariance of the objective",
            gauge_defect(8).map(|g| Check::at_most("gauge invariance of the objective", g, 1e-12)),
        ),
        or_fail(
            "one-layer trace spread, 20 seeds",
            one_layer_spread().map(|s| Check::at_most("one-layer trace spread, 20 seeds", s, 0.01)),
        ),
    ];
    if let Ok((inst, r)) = fig4_lp() {
        checks.push(Check::at_most(
            "LP relative duality gap, figure 4",
            check_solution(inst, r).duality_gap,
            1e-7,
        ));
    }
    criterion(8, "property suite", checks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Figures,
    Properties,
    All,
}

impl Suite {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "figures" => Ok(Suite::Figures),
            "properties" => Ok(Suite::Properties),
            "all" => Ok(Suite::All),
            other => Err(Error::Lookup(format!("unknown suite `{other}` (expected figures, properties or all)"))),
        }
    }

    pub fn criteria(self) -> Vec<fn() -> Criterion> {
        let figures: [fn() -> Criterion; 7] =
            [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7];
        match self {
            Suite::Figures => figures.to_vec(),
            Suite::Properties => vec![criterion_8],
            Suite::All => figures.into_iter().chain([criterion_8 as fn() -> Criterion]).collect(),
        }
    }
}
