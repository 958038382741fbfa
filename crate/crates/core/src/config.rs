//! Experiment configuration: a TOML file with `[problem]`, `[mu1]`, `[mu2]`,
//! `[prior]`, `[solver]`, `[hyper]` and `[output]` sections, validated into
//! a [`Plan`] that names every missing or malformed field.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::anomaly::{GeneratorConfig, GeneratorProblem};
use crate::costs::{shifted_cost, CostFn};
use crate::entropic::DiscreteProblem;
use crate::error::{Error, Result};
use crate::lp::{discretize_quantile, LpInstance, LpMethod, Sense};
use crate::measures::{sample, sample_pair, Family, Measure, MeasureKind, PathCoupling, SampleSet};
use crate::neuralnet::{Activation, AdamConfig, OptimizerKind};
use crate::saddle::{LrSchedule, Mode, NetArch, SaddleProblem, Scheme, SolverConfig};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    pub mu1: Option<MeasureSection>,
    pub mu2: Option<MeasureSection>,
    pub prior: Option<MeasureSection>,
    pub solver: SolverSection,
    #[serde(default)]
    pub hyper: HyperSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    /// `ot`, `mot` or `anomaly`.
    pub mode: String,
    pub cost: Option<String>,
    /// Subtract the cost's concavity shift in the neural solvers.
    #[serde(default = "yes")]
    pub shift: bool,
    pub n_maps: Option<usize>,
    pub dimension: Option<usize>,
    /// Monte-Carlo draws per marginal for the sample-based solvers.
    pub samples: Option<usize>,
    /// `independent`, `brownian` or `common`.
    pub paths: Option<String>,
    /// Maximize (`max`, default) or minimize the transport cost; LP only.
    pub sense: Option<String>,
}

fn yes() -> bool {
    true
}

/// `family` is `normal` (mean, variance), `lognormal` (center, variance of
/// the log) or `csv` (path to rows `x1,..,xd,weight`). `dim` makes an
/// uncorrelated product of identical coordinates.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSection {
    pub family: String,
    pub mean: Option<f64>,
    pub center: Option<f64>,
    pub variance: Option<f64>,
    pub dim: Option<usize>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    /// `primal_dual`, `predictor_corrector`, `sinkhorn`, `neural_entropic`,
    /// `penalization` or `lp`.
    pub kind: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSection {
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub eval_every: Option<u64>,
    pub lr: Option<f64>,
    pub minibatch: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<String>,
    /// `adam` or `sgd`.
    pub optimizer: Option<String>,
    pub decay_factor: Option<f64>,
    pub decay_every: Option<u64>,
    pub sup_lr_ratio: Option<f64>,
    pub map_grid: Option<usize>,
    pub eps: Option<f64>,
    /// Larger `eps` values solved first, each warm-starting the next.
    pub eps_path: Option<Vec<f64>>,
    pub gamma: Option<f64>,
    pub atoms: Option<usize>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    /// Sinkhorn only: start at this `eps` and divide by `anneal_factor`.
    pub anneal_from: Option<f64>,
    pub anneal_factor: Option<f64>,
    pub lp_method: Option<String>,
    pub inner_steps_per_outer: Option<u64>,
    pub outer_steps: Option<usize>,
    pub outer_lr: Option<f64>,
    pub trace_every: Option<u64>,
    pub generator_hidden: Option<Vec<usize>>,
    pub generator_activation: Option<String>,
    pub n_prior: Option<usize>,
    pub threshold_quantile: Option<f64>,
    pub anomaly_shift: Option<f64>,
    pub n_generate: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// Overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub out: Option<PathBuf>,
}

pub const DEFAULT_SAMPLES: usize = 8192;

/// Fully resolved run.
#[derive(Debug, Clone)]
pub struct Plan {
    pub solver: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: Task,
    /// Analytic marginals when both are analytic and one-dimensional, for
    /// the map comparison.
    pub analytic: Option<(Measure, Measure)>,
}

#[derive(Debug, Clone)]
pub enum Task {
    Saddle {
        prob: SaddleProblem,
        config: SolverConfig,
    },
    Sinkhorn {
        prob: DiscreteProblem,
        martingale: bool,
        max_iter: usize,
        tol: f64,
        anneal: Option<(f64, f64)>,
        mean_shift: f64,
    },
    NeuralEntropic {
        cost: CostFn,
        mu1: SampleSet,
        mu2: SampleSet,
        eps: f64,
        eps_path: Vec<f64>,
        martingale: bool,
        config: SolverConfig,
    },
    Penalization {
        cost: CostFn,
        mu1: SampleSet,
        mu2: SampleSet,
        gamma: f64,
        martingale: bool,
        config: SolverConfig,
    },
    Lp {
        inst: LpInstance,
        method: LpMethod,
        mean_shift: f64,
    },
    Anomaly {
        prob: Box<GeneratorProblem>,
        config: GeneratorConfig,
        quantile: f64,
        shift: f64,
        n_generate: usize,
    },
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".into());
            Error::config(field, msg)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Validates the config and builds everything the run needs. Relative
    /// CSV paths resolve against `base`.
    pub fn plan(&self, overrides: &Overrides, base: &Path) -> Result<Plan> {
        let h = &self.hyper;
        let seed = overrides
            .seed
            .or(h.seed)
            .ok_or_else(|| Error::config("hyper.seed", "missing; every run needs an explicit seed"))?;
        let out_dir = overrides
            .out
            .clone()
            .or_else(|| self.output.dir.clone())
            .ok_or_else(|| Error::config("output.dir", "missing; pass --out or set [output] dir"))?;
        let steps = overrides.steps.or(h.steps);
        let solver = self.solver.kind.as_str();
        let mode = self.problem.mode.as_str();
        let task = match mode {
            "anomaly" => {
                if solver != "primal_dual" {
                    return Err(Error::config("solver.kind", "anomaly mode trains with primal_dual only"));
                }
                self.anomaly_task(seed, steps, base)?
            }
            "ot" | "mot" => self.transport_task(mode == "mot", seed, steps, base)?,
            other => {
                return Err(Error::config(
                    "problem.mode",
                    format!("unknown mode `{other}` (expected ot, mot or anomaly)"),
                ))
            }
        };
        let analytic = match (&self.mu1, &self.mu2) {
            (Some(a), Some(b)) if mode != "anomaly" => {
                let (m1, m2) = (build_measure(a, "mu1", base)?, build_measure(b, "mu2", base)?);
                let is_1d_analytic =
                    |m: &Measure| m.dim() == 1 && matches!(m.kind(), MeasureKind::Analytic(_));
                (is_1d_analytic(&m1) && is_1d_analytic(&m2)).then_some((m1, m2))
            }
            _ => None,
        };
        Ok(Plan {
            solver: solver.to_string(),
            seed,
            out_dir,
            task,
            analytic,
        })
    }

    fn cost(&self) -> Result<CostFn> {
        let name = self
            .problem
            .cost
            .as_deref()
            .ok_or_else(|| Error::config("problem.cost", "missing"))?;
        CostFn::parse(name).map_err(|e| Error::config("problem.cost", e.to_string()))
    }

    fn marginals(&self, base: &Path) -> Result<(Measure, Measure)> {
        let m1 = self
            .mu1
            .as_ref()
            .ok_or_else(|| Error::config("mu1", "missing section"))?;
        let m2 = self
            .mu2
            .as_ref()
            .ok_or_else(|| Error::config("mu2", "missing section"))?;
        let (a, b) = (build_measure(m1, "mu1", base)?, build_measure(m2, "mu2", base)?);
        if a.dim() != b.dim() {
            return Err(Error::config(
                "mu2.dim",
                format!("marginal dimensions differ ({} vs {})", a.dim(), b.dim()),
            ));
        }
        if let Some(d) = self.problem.dimension {
            if d != a.dim() {
                return Err(Error::config(
                    "problem.dimension",
                    format!("{d} does not match the marginals' dimension {}", a.dim()),
                ));
            }
        }
        Ok((a, b))
    }

    fn samples(&self, m1: &Measure, m2: &Measure, seed: u64) -> Result<(SampleSet, SampleSet)> {
        let n = self.problem.samples.unwrap_or(DEFAULT_SAMPLES);
        if n == 0 {
            return Err(Error::config("problem.samples", "must be positive"));
        }
        let coupling = match &self.problem.paths {
            Some(p) => PathCoupling::parse(p).map_err(|e| Error::config("problem.paths", e.to_string()))?,
            None => PathCoupling::Independent,
        };
        sample_pair(m1, m2, n, coupling, seed).map_err(|e| Error::config("problem.paths", e.to_string()))
    }

    fn solver_config(&self, seed: u64, steps: Option<u64>) -> Result<SolverConfig> {
        let h = &self.hyper;
        let d = SolverConfig::default();
        let steps = steps.ok_or_else(|| Error::config("hyper.steps", "missing"))?;
        let lr = h.lr.ok_or_else(|| Error::config("hyper.lr", "missing"))?;
        positive("hyper.lr", lr)?;
        let schedule = match (h.decay_factor, h.decay_every) {
            (None, None) => LrSchedule::Constant,
            (factor, Some(every)) if every > 0 => {
                let factor = factor.unwrap_or(0.5);
                positive("hyper.decay_factor", factor)?;
                LrSchedule::StepDecay { factor, every }
            }
            (Some(_), None) => return Err(Error::config("hyper.decay_every", "missing while decay_factor is set")),
            _ => return Err(Error::config("hyper.decay_every", "must be positive")),
        };
        let optimizer = match h.optimizer.as_deref().unwrap_or("adam") {
            "adam" => OptimizerKind::Adam(AdamConfig { lr, ..AdamConfig::default() }),
            "sgd" => OptimizerKind::Sgd,
            other => return Err(Error::config("hyper.optimizer", format!("unknown optimizer `{other}`"))),
        };
        let minibatch = h.minibatch.unwrap_or(d.minibatch);
        if minibatch == 0 {
            return Err(Error::config("hyper.minibatch", "must be at least 1"));
        }
        let sup_lr_ratio = h.sup_lr_ratio.unwrap_or(1.0);
        positive("hyper.sup_lr_ratio", sup_lr_ratio)?;
        Ok(SolverConfig {
            steps,
            eval_every: h.eval_every.unwrap_or(d.eval_every).max(1),
            lr,
            optimizer,
            schedule,
            minibatch,
            seed,
            scheme: if self.solver.kind == "predictor_corrector" {
                Scheme::PredictorCorrector
            } else {
                Scheme::ArrowHurwicz
            },
            arch: arch(h.hidden.as_ref(), h.activation.as_deref(), "hyper")?,
            map_grid: h.map_grid.unwrap_or(d.map_grid),
            sup_lr_ratio,
        })
    }

    fn transport_task(&self, martingale: bool, seed: u64, steps: Option<u64>, base: &Path) -> Result<Task> {
        let h = &self.hyper;
        let cost = self.cost()?;
        let (m1, m2) = self.marginals(base)?;
        let solver = self.solver.kind.as_str();
        match solver {
            "primal_dual" | "predictor_corrector" => {
                let (s1, s2) = self.samples(&m1, &m2, seed)?;
                let cost = self.maybe_shift(cost, &s1)?;
                let mode = if martingale {
                    let n = self.problem.n_maps.unwrap_or(2);
                    if n < 2 {
                        return Err(Error::config("problem.n_maps", "MOT needs at least 2 maps"));
                    }
                    Mode::Mot { n_maps: n }
                } else {
                    Mode::Ot
                };
                Ok(Task::Saddle {
                    prob: SaddleProblem::new(cost, s1, s2, mode)?,
                    config: self.solver_config(seed, steps)?,
                })
            }
            "neural_entropic" | "penalization" => {
                let (s1, s2) = self.samples(&m1, &m2, seed)?;
                let cost = self.maybe_shift(cost, &s1)?;
                let config = self.solver_config(seed, steps)?;
                if solver == "neural_entropic" {
                    let eps = h.eps.ok_or_else(|| Error::config("hyper.eps", "missing"))?;
                    positive("hyper.eps", eps)?;
                    let eps_path = h.eps_path.clone().unwrap_or_default();
                    for &e in &eps_path {
                        positive("hyper.eps_path", e)?;
                    }
                    Ok(Task::NeuralEntropic {
                        cost,
                        mu1: s1,
                        mu2: s2,
                        eps,
                        eps_path,
                        martingale,
                        config,
                    })
                } else {
                    let gamma = h.gamma.ok_or_else(|| Error::config("hyper.gamma", "missing"))?;
                    if !(gamma >= 0.0) {
                        return Err(Error::config("hyper.gamma", "must be non-negative"));
                    }
                    Ok(Task::Penalization {
                        cost,
                        mu1: s1,
                        mu2: s2,
                        gamma,
                        martingale,
                        config,
                    })
                }
            }
            "sinkhorn" | "lp" => {
                let n = h.atoms.ok_or_else(|| Error::config("hyper.atoms", "missing"))?;
                if n == 0 {
                    return Err(Error::config("hyper.atoms", "must be positive"));
                }
                let (a1, w1, a2, w2, dim, mean_shift) = discretize(&m1, &m2, n, martingale)?;
                if solver == "lp" {
                    if dim != 1 {
                        return Err(Error::config("mu1.dim", "the LP reference is one-dimensional"));
                    }
                    let method = LpMethod::parse(h.lp_method.as_deref().unwrap_or("dense_simplex"))
                        .map_err(|e| Error::config("hyper.lp_method", e.to_string()))?;
                    let sense = match self.problem.sense.as_deref().unwrap_or("max") {
                        "max" => Sense::Max,
                        "min" => Sense::Min,
                        other => return Err(Error::config("problem.sense", format!("unknown sense `{other}`"))),
                    };
                    Ok(Task::Lp {
                        inst: LpInstance::new(a1, w1, a2, w2, &cost, martingale, sense)?,
                        method,
                        mean_shift,
                    })
                } else {
                    let eps = h.eps.ok_or_else(|| Error::config("hyper.eps", "missing"))?;
                    positive("hyper.eps", eps)?;
                    if martingale && dim != 1 {
                        return Err(Error::config("mu1.dim", "Sinkhorn-MOT is one-dimensional"));
                    }
                    let anneal = match h.anneal_from {
                        Some(start) => {
                            positive("hyper.anneal_from", start)?;
                            let factor = h.anneal_factor.unwrap_or(0.5);
                            if !(factor > 0.0 && factor < 1.0) {
                                return Err(Error::config("hyper.anneal_factor", "must lie in (0, 1)"));
                            }
                            Some((start, factor))
                        }
                        None => None,
                    };
                    let tol = h.tol.unwrap_or(1e-6);
                    positive("hyper.tol", tol)?;
                    Ok(Task::Sinkhorn {
                        prob: DiscreteProblem::new(a1, w1, a2, w2, dim, &cost, eps)?,
                        martingale,
                        max_iter: h.max_iter.unwrap_or(20_000),
                        tol,
                        anneal,
                        mean_shift,
                    })
                }
            }
            other => Err(Error::config(
                "solver.kind",
                format!(
                    "unknown solver `{other}` (expected primal_dual, predictor_corrector, sinkhorn, \
                     neural_entropic, penalization or lp)"
                ),
            )),
        }
    }

    fn maybe_shift(&self, cost: CostFn, s1: &SampleSet) -> Result<CostFn> {
        if !self.problem.shift || cost.shift_rule().is_none() {
            return Ok(cost);
        }
        shifted_cost(&cost, s1)
    }

    fn anomaly_task(&self, seed: u64, steps: Option<u64>, base: &Path) -> Result<Task> {
        let h = &self.hyper;
        let real_section = self
            .mu1
            .as_ref()
            .ok_or_else(|| Error::config("mu1", "missing section (the real data)"))?;
        let prior_section = self
            .prior
            .as_ref()
            .ok_or_else(|| Error::config("prior", "missing section"))?;
        let real_m = build_measure(real_section, "mu1", base)?;
        let prior = build_measure(prior_section, "prior", base)?;
        let n = self.problem.samples.unwrap_or(DEFAULT_SAMPLES);
        let real = match real_m.kind() {
            MeasureKind::Empirical { points, weights } if weights.len() == n => {
                SampleSet::new(points.clone(), real_m.dim(), seed)?
            }
            _ => sample(&real_m, n, seed)?,
        };
        let mut inner = self.solver_config(seed, steps)?;
        if h.hidden.is_none() {
            inner.arch.hidden = vec![10, 10];
        }
        let mut garch = arch(h.generator_hidden.as_ref(), h.generator_activation.as_deref(), "hyper.generator")?;
        if h.generator_hidden.is_none() {
            garch.hidden = inner.arch.hidden.clone();
        }
        let n_prior = h.n_prior.unwrap_or(n);
        let prob = GeneratorProblem::with_arch(real, prior, &garch, n_prior, seed.wrapping_add(1))?;
        let d = GeneratorConfig::default();
        let config = GeneratorConfig {
            inner,
            inner_steps_per_outer: h.inner_steps_per_outer.unwrap_or(d.inner_steps_per_outer),
            outer_steps: h.outer_steps.unwrap_or(d.outer_steps),
            outer_lr: h.outer_lr.unwrap_or(d.outer_lr),
            trace_every: h.trace_every.unwrap_or(d.trace_every),
        };
        if config.inner_steps_per_outer == 0 {
            return Err(Error::config("hyper.inner_steps_per_outer", "must be positive"));
        }
        positive("hyper.outer_lr", config.outer_lr)?;
        let quantile = h.threshold_quantile.unwrap_or(0.01);
        if !(quantile > 0.0 && quantile < 1.0) {
            return Err(Error::config("hyper.threshold_quantile", "must lie in (0, 1)"));
        }
        Ok(Task::Anomaly {
            prob: Box::new(prob),
            config,
            quantile,
            shift: h.anomaly_shift.unwrap_or(3.0),
            n_generate: h.n_generate.unwrap_or(10_000),
        })
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive, got {v}")))
    }
}

fn arch(hidden: Option<&Vec<usize>>, activation: Option<&str>, prefix: &str) -> Result<NetArch> {
    let d = NetArch::default();
    let hidden = hidden.cloned().unwrap_or(d.hidden);
    if hidden.contains(&0) {
        return Err(Error::config(format!("{prefix}_hidden"), "layer widths must be positive"));
    }
    let activation = match activation {
        Some(a) => Activation::parse(a).map_err(|e| Error::config(format!("{prefix}_activation"), e.to_string()))?,
        None => d.activation,
    };
    Ok(NetArch { hidden, activation })
}

/// Quantile atoms for analytic one-dimensional marginals, the atoms
/// themselves for empirical ones. Returns `(atoms1, w1, atoms2, w2, dim,
/// mean shift applied to atoms2)`.
#[allow(clippy::type_complexity)]
fn discretize(
    m1: &Measure,
    m2: &Measure,
    n: usize,
    martingale: bool,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, usize, f64)> {
    match (m1.kind(), m2.kind()) {
        (MeasureKind::Empirical { points: p1, weights: w1 }, MeasureKind::Empirical { points: p2, weights: w2 }) => {
            Ok((p1.clone(), w1.clone(), p2.clone(), w2.clone(), m1.dim(), 0.0))
        }
        _ => {
            if m1.dim() != 1 {
                return Err(Error::config(
                    "mu1.dim",
                    "quantile discretization is one-dimensional; give CSV atoms instead",
                ));
            }
            let disc = discretize_quantile(m1, m2, n, n, martingale)?;
            let (w1, w2) = (disc.weights1(), disc.weights2());
            Ok((disc.atoms1, w1, disc.atoms2, w2, 1, disc.shift))
        }
    }
}

pub fn build_measure(s: &MeasureSection, section: &str, base: &Path) -> Result<Measure> {
    let field = |k: &str| format!("{section}.{k}");
    let dim = s.dim.unwrap_or(1);
    if dim == 0 {
        return Err(Error::config(field("dim"), "must be positive"));
    }
    let family = match s.family.as_str() {
        "normal" => Family::Normal {
            mean: s.mean.unwrap_or(0.0),
            variance: s.variance.ok_or_else(|| Error::config(field("variance"), "missing"))?,
        },
        "lognormal" => Family::LogNormal {
            center: s.center.unwrap_or(1.0),
            log_variance: s.variance.ok_or_else(|| Error::config(field("variance"), "missing"))?,
        },
        "csv" => {
            let path = s.path.as_ref().ok_or_else(|| Error::config(field("path"), "missing"))?;
            let path = if path.is_absolute() { path.clone() } else { base.join(path) };
            return read_atoms(&path).map_err(|e| Error::config(field("path"), e.to_string()));
        }
        other => {
            return Err(Error::config(
                field("family"),
                format!("unknown family `{other}` (expected normal, lognormal or csv)"),
            ))
        }
    };
    Measure::iid(family, dim).map_err(|e| Error::config(section.to_string(), e.to_string()))
}

/// Reads rows `x1,..,xd,weight`. A header line is skipped when its first
/// field is not a number; weights are normalized to sum to one.
pub fn read_atoms(path: &Path) -> Result<Measure> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::param(format!("{}: {e}", path.display())))?;
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut dim = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::param(format!("{}: {e}", path.display())))?;
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let vals = match vals {
            Ok(v) => v,
            Err(_) if line == 0 => continue,
            Err(e) => return Err(Error::param(format!("{} line {}: {e}", path.display(), line + 1))),
        };
        if vals.len() < 2 {
            return Err(Error::param(format!(
                "{} line {}: need at least one coordinate and a weight",
                path.display(),
                line + 1
            )));
        }
        let d = vals.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(Error::param(format!("{} line {}: ragged row", path.display(), line + 1)));
        }
        points.extend_from_slice(&vals[..d]);
        weights.push(vals[d]);
    }
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || !(total > 0.0) {
        return Err(Error::param(format!("{}: no atoms with positive mass", path.display())));
    }
    weights.iter_mut().for_each(|w| *w /= total);
    let excess = weights.iter().sum::<f64>() - 1.0;
    weights[0] -= excess;
    Measure::empirical(points, weights, dim.expect("at least one row"))
}
