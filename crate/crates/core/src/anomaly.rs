//! Generator training against a real sample through the OT saddle problem,
//! kernel density scoring of the generated law, and sampling.

use std::f64::consts::PI;

use rand::Rng as _;
use rayon::prelude::*;

use crate::costs::{builtin_cost, CostFn};
use crate::error::{Error, Result};
use crate::measures::{sample, seeded_rng, Measure, SampleSet};
use crate::neuralnet::{Direction, Mlp, Optimizer, Workspace};
use crate::saddle::{full_objective, Mode, NetArch, SaddleProblem, SaddleState, SolverConfig, Trace};

/// Real data, prior and generator `T: R^l -> R^d`.
#[derive(Debug, Clone)]
pub struct GeneratorProblem {
    pub real: SampleSet,
    pub prior: Measure,
    /// Fixed prior draws pushed through the generator to form the second
    /// marginal of the inner problem.
    pub prior_samples: SampleSet,
    pub generator: Mlp,
    cost: CostFn,
}

impl GeneratorProblem {
    pub fn new(real: SampleSet, prior: Measure, generator: Mlp, n_prior: usize, seed: u64) -> Result<Self> {
        if real.is_empty() {
            return Err(Error::param("real sample set is empty"));
        }
        if prior.dim() > real.dim {
            return Err(Error::param(format!(
                "prior dimension {} exceeds data dimension {}",
                prior.dim(),
                real.dim
            )));
        }
        if generator.input_dim() != prior.dim() || generator.output_dim() != real.dim {
            return Err(Error::param(format!(
                "generator maps R^{} -> R^{}, expected R^{} -> R^{}",
                generator.input_dim(),
                generator.output_dim(),
                prior.dim(),
                real.dim
            )));
        }
        if n_prior == 0 {
            return Err(Error::param("n_prior must be positive"));
        }
        Ok(GeneratorProblem {
            prior_samples: sample(&prior, n_prior, seed)?,
            real,
            prior,
            generator,
            cost: builtin_cost("neg_l2sq_d")?,
        })
    }

    /// Generator drawn from `arch`, then fitted by least squares to the
    /// affine map `z -> mean + sd * z` that matches the first two moments of
    /// each real coordinate (prior coordinate `k mod l` feeds output `k`).
    pub fn with_arch(real: SampleSet, prior: Measure, arch: &NetArch, n_prior: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed ^ 0x9e4e_0000_0000_0001);
        let mut generator = arch.build(prior.dim(), real.dim, &mut rng)?;
        let prob = Self::new(real, prior, generator.clone(), n_prior, seed)?;
        fit_moment_map(&mut generator, &prob.real, &prob.prior_samples, &mut rng);
        Ok(GeneratorProblem { generator, ..prob })
    }

    fn generated(&self, generator: &Mlp) -> Result<SampleSet> {
        push_forward(generator, &self.prior_samples, 0.0)
    }

    fn inner(&self, generator: &Mlp) -> Result<SaddleProblem> {
        SaddleProblem::new(self.cost.clone(), self.real.clone(), self.generated(generator)?, Mode::Ot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Inner Arrow-Hurwicz run; `steps` is the total inner step count.
    pub inner: SolverConfig,
    pub inner_steps_per_outer: u64,
    /// Optimizer steps on the generator at each outer update.
    pub outer_steps: usize,
    pub outer_lr: f64,
    /// Inner steps between two entries of the distance trace.
    pub trace_every: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            inner: SolverConfig {
                arch: NetArch {
                    hidden: vec![10, 10],
                    ..NetArch::default()
                },
                ..SolverConfig::default()
            },
            inner_steps_per_outer: 1000,
            outer_steps: 1,
            outer_lr: 1e-3,
            trace_every: 10_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorReport {
    pub generator: Mlp,
    /// Squared 2-Wasserstein estimates between the real sample and the
    /// generated sample, from the full-sample saddle objective.
    pub w2_trace: Trace,
    pub state: SaddleState,
    pub outer_updates: u64,
}

/// Alternates inner Arrow-Hurwicz steps on `(u, T)` with updates of the
/// generator that raise `E[u(G(Z))]`, i.e. lower the estimated distance.
pub fn train_generator(prob: &GeneratorProblem, config: &GeneratorConfig) -> Result<GeneratorReport> {
    if config.inner_steps_per_outer == 0 {
        return Err(Error::param("inner_steps_per_outer must be positive"));
    }
    let mut generator = prob.generator.clone();
    let mut inner = prob.inner(&generator)?;
    let mut state = SaddleState::new(&inner, &config.inner)?;
    let mut opt = Optimizer::new(config.inner.optimizer, generator.param_count());
    let mut rng = seeded_rng(config.inner.seed ^ 0x9e4e_0000_0000_0002);
    let mut trace = Trace::default();
    let trace_every = config.trace_every.max(1);
    let batch = config.inner.minibatch.max(1);
    let mut grad = vec![0.0; generator.param_count()];
    let mut wg = generator.workspace();
    let mut wu = Workspace::default();
    let mut du = vec![0.0; prob.real.dim];
    let mut outer_updates = 0;
    let diverged = |step: u64, trace: &Trace| Error::Diverged {
        step,
        partial_trace: trace.clone(),
    };

    for step in 1..=config.inner.steps {
        state.ah_step(&inner).map_err(|e| match e {
            Error::Diverged { step, .. } => diverged(step, &trace),
            e => e,
        })?;
        if step % config.inner_steps_per_outer == 0 {
            let u = &state.nets.u;
            for _ in 0..config.outer_steps {
                grad.iter_mut().for_each(|g| *g = 0.0);
                for _ in 0..batch {
                    let z = prob.prior_samples.row(rng.random_range(0..prob.prior_samples.len()));
                    let x = generator.forward_ws(z, &mut wg).to_vec();
                    u.forward_ws(&x, &mut wu);
                    u.backward_ws(&mut wu, &[1.0 / batch as f64], None, Some(&mut du));
                    generator.backward_ws(&mut wg, &du, Some(&mut grad), None);
                }
                if !grad.iter().all(|g| g.is_finite()) {
                    return Err(diverged(step, &trace));
                }
                opt.step(generator.params_mut(), &grad, Direction::Ascend, config.outer_lr);
            }
            if !generator.params().iter().all(|p| p.is_finite()) {
                return Err(diverged(step, &trace));
            }
            outer_updates += 1;
            inner.mu2 = prob.generated(&generator)?;
        }
        if step % trace_every == 0 {
            let v = -full_objective(&inner, &state.nets);
            if !v.is_finite() {
                return Err(diverged(step, &trace));
            }
            trace.push(step, v);
        }
    }
    if trace.is_empty() {
        trace.push(state.step, -full_objective(&inner, &state.nets));
    }
    Ok(GeneratorReport {
        generator,
        w2_trace: trace,
        state,
        outer_updates,
    })
}

/// Steps of the least-squares fit in [`GeneratorProblem::with_arch`].
pub const MOMENT_FIT_STEPS: usize = 3000;

fn fit_moment_map(generator: &mut Mlp, real: &SampleSet, z: &SampleSet, rng: &mut crate::measures::Rng) {
    let (d, l) = (real.dim, z.dim);
    let mean = real.mean();
    let sd: Vec<f64> = (0..d)
        .map(|k| (real.rows().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / real.len() as f64).sqrt())
        .collect();
    let batch = 64;
    let mut opt = Optimizer::new(
        crate::neuralnet::OptimizerKind::Adam(crate::neuralnet::AdamConfig::default()),
        generator.param_count(),
    );
    let mut grad = vec![0.0; generator.param_count()];
    let mut ws = generator.workspace();
    let mut up = vec![0.0; d];
    for _ in 0..MOMENT_FIT_STEPS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..batch {
            let zi = z.row(rng.random_range(0..z.len()));
            let out = generator.forward_ws(zi, &mut ws);
            for k in 0..d {
                up[k] = 2.0 * (out[k] - mean[k] - sd[k] * zi[k % l]) / batch as f64;
            }
            generator.backward_ws(&mut ws, &up, Some(&mut grad), None);
        }
        opt.step(generator.params_mut(), &grad, Direction::Descend, 1e-2);
    }
}

/// `G(z + shift * sign(z))` for every row `z`, sign taken per coordinate.
pub fn push_forward(generator: &Mlp, z: &SampleSet, shift: f64) -> Result<SampleSet> {
    if z.dim != generator.input_dim() {
        return Err(Error::Shape {
            expected: generator.input_dim(),
            got: z.dim,
        });
    }
    let mut ws = generator.workspace();
    let mut zs = vec![0.0; z.dim];
    let mut points = Vec::with_capacity(z.len() * generator.output_dim());
    for row in z.rows() {
        for (o, &v) in zs.iter_mut().zip(row) {
            *o = if v == 0.0 { v } else { v + shift * v.signum() };
        }
        points.extend_from_slice(generator.forward_ws(&zs, &mut ws));
    }
    SampleSet::new(points, generator.output_dim(), z.seed)
}

/// `n` draws of the prior pushed through the generator, each prior draw
/// moved by `shift * sign` first.
pub fn generate(generator: &Mlp, prior: &Measure, n: usize, seed: u64, shift: f64) -> Result<SampleSet> {
    if n == 0 {
        return SampleSet::new(Vec::new(), generator.output_dim(), seed);
    }
    push_forward(generator, &sample(prior, n, seed)?, shift)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Value(f64),
    /// Quantile level of the leave-one-out self-densities.
    Quantile(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Quantile(0.01)
    }
}

/// Gaussian product-kernel density of a generated sample.
#[derive(Debug, Clone)]
pub struct AnomalyScorer {
    pub samples: SampleSet,
    pub bandwidth: Vec<f64>,
    pub threshold: f64,
}

pub const MIN_SCORER_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub x: Vec<f64>,
    pub density: f64,
    pub is_anomaly: bool,
}

/// Silverman's rule per coordinate, `sigma_k (4 / ((d + 2) M))^(1 / (d + 4))`.
pub fn silverman_bandwidth(samples: &SampleSet) -> Vec<f64> {
    let d = samples.dim;
    let m = samples.len() as f64;
    let mean = samples.mean();
    let factor = (4.0 / ((d as f64 + 2.0) * m)).powf(1.0 / (d as f64 + 4.0));
    (0..d)
        .map(|k| {
            let var = samples.rows().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / (m - 1.0);
            var.sqrt() * factor
        })
        .collect()
}

impl AnomalyScorer {
    pub fn new(samples: SampleSet, threshold: Threshold) -> Result<Self> {
        let bandwidth = silverman_bandwidth(&samples);
        Self::with_bandwidth(samples, bandwidth, threshold)
    }

    pub fn with_bandwidth(samples: SampleSet, bandwidth: Vec<f64>, threshold: Threshold) -> Result<Self> {
        if samples.len() < MIN_SCORER_SAMPLES {
            return Err(Error::param(format!(
                "density estimate needs at least {MIN_SCORER_SAMPLES} samples, got {}",
                samples.len()
            )));
        }
        if bandwidth.len() != samples.dim || !bandwidth.iter().all(|h| *h > 0.0 && h.is_finite()) {
            return Err(Error::param(format!("bandwidth must be {} positive values", samples.dim)));
        }
        let mut scorer = AnomalyScorer {
            samples,
            bandwidth,
            threshold: 0.0,
        };
        scorer.threshold = match threshold {
            Threshold::Value(v) if v > 0.0 => v,
            Threshold::Value(v) => return Err(Error::param(format!("threshold must be positive, got {v}"))),
            Threshold::Quantile(p) if (0.0..=1.0).contains(&p) => {
                let mut dens = scorer.self_densities();
                dens.sort_by(f64::total_cmp);
                let idx = ((p * dens.len() as f64).ceil() as usize).clamp(1, dens.len()) - 1;
                dens[idx]
            }
            Threshold::Quantile(p) => return Err(Error::param(format!("quantile level {p} outside [0, 1]"))),
        };
        Ok(scorer)
    }

    fn log_norm(&self) -> f64 {
        let d = self.samples.dim as f64;
        -0.5 * d * (2.0 * PI).ln() - self.bandwidth.iter().map(|h| h.ln()).sum::<f64>()
    }

    fn kernel_sum(&self, x: &[f64], skip: Option<usize>) -> f64 {
        self.samples
            .rows()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(_, r)| {
                let q: f64 = r
                    .iter()
                    .zip(x)
                    .zip(&self.bandwidth)
                    .map(|((a, b), h)| ((a - b) / h).powi(2))
                    .sum();
                (-0.5 * q).exp()
            })
            .sum()
    }

    pub fn density_estimate(&self, x: &[f64]) -> f64 {
        self.kernel_sum(x, None) * self.log_norm().exp() / self.samples.len() as f64
    }

    /// Density of each generated point under the other `M - 1` points.
    pub fn self_densities(&self) -> Vec<f64> {
        let scale = self.log_norm().exp() / (self.samples.len() - 1) as f64;
        (0..self.samples.len())
            .into_par_iter()
            .map(|i| self.kernel_sum(self.samples.row(i), Some(i)) * scale)
            .collect()
    }

    pub fn score_anomalies(&self, xs: &SampleSet) -> Result<Vec<Score>> {
        if xs.dim != self.samples.dim {
            return Err(Error::Shape {
                expected: self.samples.dim,
                got: xs.dim,
            });
        }
        Ok((0..xs.len())
            .into_par_iter()
            .map(|i| {
                let x = xs.row(i);
                let density = self.density_estimate(x);
                Score {
                    x: x.to_vec(),
                    density,
                    is_anomaly: density <= self.threshold,
                }
            })
            .collect())
    }
}

/// Fraction of `scores` flagged.
pub fn flag_rate(scores: &[Score]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|s| s.is_anomaly).count() as f64 / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::Family;

    fn normal2() -> Measure {
        Measure::iid(
            Family::Normal {
                mean: 0.0,
                variance: 1.0,
            },
            2,
        )
        .unwrap()
    }

    #[test]
    fn linear_generator_moments() {
        let mut g = Mlp::zeros(&[2, 2], crate::neuralnet::Activation::Linear).unwrap();
        g.params_mut()[..4].copy_from_slice(&[1.0, 0.5, 0.0, 2.0]);
        let s = generate(&g, &normal2(), 100_000, 3, 0.0).unwrap();
        // A A^T = [[1.25, 1], [1, 4]]
        let n = s.len() as f64;
        let cov = |a: usize, b: usize| s.rows().map(|r| r[a] * r[b]).sum::<f64>() / n;
        assert!((cov(0, 0) - 1.25).abs() < 0.03, "{}", cov(0, 0));
        assert!((cov(0, 1) - 1.0).abs() < 0.03, "{}", cov(0, 1));
        assert!((cov(1, 1) - 4.0).abs() < 0.08, "{}", cov(1, 1));
    }

    #[test]
    fn generate_edge_cases() {
        let g = Mlp::identity(2).unwrap();
        assert!(generate(&g, &normal2(), 0, 1, 0.0).unwrap().is_empty());
        let a = generate(&g, &normal2(), 50, 9, 3.0).unwrap();
        assert_eq!(a, generate(&g, &normal2(), 50, 9, 3.0).unwrap());
        // shifted draws leave the band |z| < 3
        assert!(a.points.iter().all(|v| v.abs() >= 3.0));
    }

    #[test]
    fn kde_mode_and_tail() {
        let s = sample(&normal2(), 100_000, 4).unwrap();
        let sc = AnomalyScorer::new(s, Threshold::default()).unwrap();
        let peak = 1.0 / (2.0 * PI);
        let d0 = sc.density_estimate(&[0.0, 0.0]);
        assert!((d0 - peak).abs() < 0.1 * peak, "{d0}");
        assert!(sc.density_estimate(&[50.0, -50.0]) < 1e-12);
    }

    #[test]
    fn self_scoring_flags_about_the_quantile() {
        let s = sample(&normal2(), 2000, 5).unwrap();
        let sc = AnomalyScorer::new(s.clone(), Threshold::Quantile(0.05)).unwrap();
        let rate = flag_rate(&sc.score_anomalies(&s).unwrap());
        assert!(rate > 0.02 && rate <= 0.05, "{rate}");
    }

    #[test]
    fn scorer_rejects_small_or_degenerate_samples() {
        let s = sample(&normal2(), 50, 5).unwrap();
        assert!(AnomalyScorer::new(s, Threshold::default()).is_err());
        let flat = SampleSet::new(vec![1.0; 400], 2, 0).unwrap();
        assert!(AnomalyScorer::new(flat, Threshold::default()).is_err());
    }

    #[test]
    fn generator_dimension_checks() {
        let real = sample(&normal2(), 200, 1).unwrap();
        let prior = Measure::normal(0.0, 1.0).unwrap();
        let g = Mlp::identity(2).unwrap();
        assert!(GeneratorProblem::new(real.clone(), prior.clone(), g, 100, 0).is_err());
        let wide = Measure::iid(Family::Normal { mean: 0.0, variance: 1.0 }, 3).unwrap();
        assert!(GeneratorProblem::with_arch(real, wide, &NetArch::default(), 100, 0).is_err());
    }
}
