use motnet::anomaly::{flag_rate, generate, train_generator, AnomalyScorer, GeneratorConfig, GeneratorProblem, Threshold};
use motnet::costs::{builtin_cost, shifted_cost, CostFn};
use motnet::entropic::{neural_entropic, sinkhorn_annealed, DiscreteProblem};
use motnet::lp::{discretize_quantile, solve_lp, LpInstance, LpMethod, Sense};
use motnet::measures::{sample, sample_pair, Family, Measure, PathCoupling, SampleSet};
use motnet::neuralnet::{Activation, Mlp, OptimizerKind};
use motnet::saddle::{solve, LrSchedule, Mode, NetArch, SaddleProblem, SaddleState, Scheme, SolverConfig};
use motnet::Error;

fn lognormals() -> (Measure, Measure) {
    (Measure::lognormal(1.0, 0.04).unwrap(), Measure::lognormal(1.0, 0.06).unwrap())
}

fn affine() -> NetArch {
    NetArch {
        hidden: Vec::new(),
        activation: Activation::Linear,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// With affine `u` and `T` the inner infimum only matches means, and the
/// shifted cost `x^2 + 2xT - T^2` is maximized by `T = m2 + (x - m1)`.
/// Adding back `E[2 y^2]` gives `E x^2 + 2 m1 m2 + var1 - m2^2 + 2 E y^2`.
#[test]
fn affine_nets_reach_the_restricted_optimum() {
    let (m1, m2) = lognormals();
    for seed in 0..3 {
        let (s1, s2) = sample_pair(&m1, &m2, 2048, PathCoupling::Common, 40 + seed).unwrap();
        let x = &s1.points;
        let y = &s2.points;
        let (mx, my) = (mean(x), mean(y));
        let ex2 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let ey2 = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        let exact = ex2 + 2.0 * mx * my + (ex2 - mx * mx) - my * my + 2.0 * ey2;
        let cost = shifted_cost(&builtin_cost("sum_squared").unwrap(), &s1).unwrap();
        let prob = SaddleProblem::new(cost, s1, s2, Mode::Ot).unwrap();
        let config = SolverConfig {
            steps: 30_000,
            eval_every: 1000,
            lr: 1e-3,
            seed,
            arch: affine(),
            ..SolverConfig::default()
        };
        let r = solve(&prob, &config).unwrap();
        assert!((r.value - exact).abs() <= 5e-3 * exact, "seed {seed}: {} vs {exact}", r.value);
    }
}

/// Zero cost, point-mass marginals at 1 and affine nets give
/// `J = theta (1 - omega - beta)`. With plain gradient steps the pair
/// `(theta, phi = omega + beta - 1)` follows `theta' = theta + lr phi`,
/// `phi' = phi - 2 lr theta'`, a unit-determinant map with trace in (-2, 2),
/// so orbits stay bounded. Both schemes reduce to this recursion because `J`
/// is linear in each block.
#[test]
fn bilinear_toy_follows_the_closed_form_recursion() {
    let ones = SampleSet::new(vec![1.0; 16], 1, 0).unwrap();
    let cost = CostFn::parse("0*s1*s2").unwrap();
    let prob = SaddleProblem::new(cost, ones.clone(), ones, Mode::Ot).unwrap();
    let lr = 0.05;
    for scheme in [Scheme::ArrowHurwicz, Scheme::PredictorCorrector] {
        let config = SolverConfig {
            lr,
            optimizer: OptimizerKind::Sgd,
            arch: affine(),
            minibatch: 4,
            scheme,
            seed: 9,
            ..SolverConfig::default()
        };
        let mut st = SaddleState::new(&prob, &config).unwrap();
        let read = |st: &SaddleState| {
            let u = |x: f64| st.nets.u.forward(&[x]).unwrap()[0];
            (u(1.0) - u(0.0), st.nets.maps[0].forward(&[1.0]).unwrap()[0] - 1.0)
        };
        let (mut theta, mut phi) = read(&st);
        let r0 = (2.0 * theta * theta + phi * phi).sqrt();
        let mut r_max: f64 = 0.0;
        for _ in 0..2000 {
            match scheme {
                Scheme::ArrowHurwicz => st.ah_step(&prob).unwrap(),
                Scheme::PredictorCorrector => st.ah_step_predictor_corrector(&prob).unwrap(),
            }
            theta += lr * phi;
            phi -= 2.0 * lr * theta;
            let (t, p) = read(&st);
            assert!((t - theta).abs() <= 1e-9 && (p - phi).abs() <= 1e-9, "{scheme:?}: ({t}, {p}) vs ({theta}, {phi})");
            r_max = r_max.max((2.0 * t * t + p * p).sqrt());
        }
        assert!(r_max <= 1.2 * r0 + 1e-12, "{scheme:?}: orbit grew from {r0} to {r_max}");
    }
}

#[test]
fn unshifted_convex_cost_with_a_huge_step_reports_divergence() {
    let (m1, m2) = lognormals();
    let (s1, s2) = sample_pair(&m1, &m2, 256, PathCoupling::Common, 1).unwrap();
    let prob = SaddleProblem::new(builtin_cost("sum_squared").unwrap(), s1, s2, Mode::Ot).unwrap();
    let config = SolverConfig {
        steps: 5000,
        eval_every: 10,
        lr: 1e3,
        optimizer: OptimizerKind::Sgd,
        ..SolverConfig::default()
    };
    match solve(&prob, &config) {
        Err(Error::Diverged { step, partial_trace }) => {
            assert!(step >= 1 && step <= 5000);
            assert!(partial_trace.points.iter().all(|&(s, _)| s < step));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn sinkhorn_at_small_eps_matches_the_lp() {
    let (m1, m2) = lognormals();
    for (name, mot) in [("sum_squared", false), ("cubic_sum", true)] {
        let c = builtin_cost(name).unwrap();
        let disc = discretize_quantile(&m1, &m2, 100, 100, mot).unwrap();
        let (w1, w2) = (disc.weights1(), disc.weights2());
        let inst = LpInstance::new(disc.atoms1.clone(), w1.clone(), disc.atoms2.clone(), w2.clone(), &c, mot, Sense::Max).unwrap();
        let lp = solve_lp(&inst, LpMethod::DenseSimplex, 0).unwrap().value;
        let p = DiscreteProblem::new(disc.atoms1, w1, disc.atoms2, w2, 1, &c, 1e-3).unwrap();
        let sk = sinkhorn_annealed(&p, mot, 0.1, 0.5, 20_000, 1e-7).unwrap();
        assert!(sk.converged, "{name}");
        assert!((sk.value - lp).abs() <= 0.01 * lp.abs(), "{name}: {} vs {lp}", sk.value);
    }
}

/// The neural entropic estimate of `E_pi[c]` at `eps = 0.1` against
/// Sinkhorn on 500 quantile atoms at the same `eps`.
#[test]
fn neural_entropic_matches_sinkhorn_at_the_same_eps() {
    let (m1, m2) = lognormals();
    let c = builtin_cost("sum_squared").unwrap();
    let disc = discretize_quantile(&m1, &m2, 500, 500, false).unwrap();
    let p = DiscreteProblem::new(disc.atoms1.clone(), disc.weights1(), disc.atoms2.clone(), disc.weights2(), 1, &c, 0.1)
        .unwrap();
    let reference = sinkhorn_annealed(&p, false, 0.1, 0.5, 20_000, 1e-9).unwrap().value;
    let (s1, s2) = sample_pair(&m1, &m2, 8192, PathCoupling::Common, 1).unwrap();
    let shifted = shifted_cost(&c, &s1).unwrap();
    let config = SolverConfig {
        steps: 100_000,
        eval_every: 5000,
        lr: 1e-3,
        seed: 1,
        ..SolverConfig::default()
    };
    let r = neural_entropic(&shifted, &s1, &s2, 0.1, false, &config).unwrap();
    assert!((r.value - reference).abs() <= 0.01 * reference, "{} vs {reference}", r.value);
}

fn normal2() -> Measure {
    Measure::iid(Family::Normal { mean: 0.0, variance: 1.0 }, 2).unwrap()
}

fn generator_config(steps: u64) -> GeneratorConfig {
    let mut c = GeneratorConfig::default();
    c.inner.steps = steps;
    c.inner.seed = 3;
    c
}

#[test]
fn identical_measures_keep_a_small_distance() {
    let prior = normal2();
    let real = sample(&prior, 8192, 11).unwrap();
    let prob = GeneratorProblem::new(real, prior, Mlp::identity(2).unwrap(), 8192, 12).unwrap();
    let r = train_generator(&prob, &generator_config(100_000)).unwrap();
    let last = r.w2_trace.last().unwrap();
    assert!(last <= 0.005, "final W2^2 estimate {last}");
}

/// A point-mass prior makes the generator a single movable point `b`, and
/// `E|X - b|^2` is smallest at the mean, where it equals the total variance.
#[test]
fn point_mass_prior_reaches_the_total_variance() {
    let real_m = Measure::iid(Family::LogNormal { center: 1.0, log_variance: 0.04 }, 2).unwrap();
    let real = sample(&real_m, 4096, 21).unwrap();
    let mean = real.mean();
    let total_var: f64 = real
        .rows()
        .map(|r| r.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / real.len() as f64;
    let prior = Measure::empirical(vec![0.0, 0.0], vec![1.0], 2).unwrap();
    let arch = NetArch {
        hidden: vec![10, 10],
        ..NetArch::default()
    };
    let prob = GeneratorProblem::with_arch(real, prior, &arch, 4096, 22).unwrap();
    // The collapsed target makes the inner saddle stiff; at lr 1e-3 the
    // trace oscillates and the point drifts, so both rates are smaller here.
    let mut config = generator_config(100_000);
    config.inner.arch = arch;
    config.inner.lr = 3e-4;
    config.inner.schedule = LrSchedule::StepDecay { factor: 0.5, every: 25_000 };
    config.outer_lr = 3e-4;
    let r = train_generator(&prob, &config).unwrap();
    let last = r.w2_trace.last().unwrap();
    assert!((last - total_var).abs() <= 0.05 * total_var, "{last} vs {total_var}");
    let b = r.generator.forward(&[0.0, 0.0]).unwrap();
    let miss: f64 = b.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum();
    assert!(miss <= 0.01 * total_var, "point {b:?} vs mean {mean:?}");
}

#[test]
fn fresh_generated_points_flag_near_the_quantile_level() {
    let g = Mlp::identity(2).unwrap();
    let prior = normal2();
    let reference = generate(&g, &prior, 10_000, 31, 0.0).unwrap();
    let scorer = AnomalyScorer::new(reference, Threshold::Quantile(0.01)).unwrap();
    let fresh = generate(&g, &prior, 10_000, 32, 0.0).unwrap();
    let rate = flag_rate(&scorer.score_anomalies(&fresh).unwrap());
    assert!((rate - 0.01).abs() <= 0.02, "flag rate {rate}");
    let shifted = generate(&g, &prior, 10_000, 33, 3.0).unwrap();
    assert!(flag_rate(&scorer.score_anomalies(&shifted).unwrap()) >= 0.95);
}
