use proptest::prelude::*;

use motnet::anomaly::{AnomalyScorer, Threshold};
use motnet::costs::{builtin_cost, shifted_cost};
use motnet::entropic::{sinkhorn_mot, sinkhorn_ot, DiscreteProblem};
use motnet::experiment::fmt_sig;
use motnet::lp::{check_solution, discretize_quantile, solve_lp, LpInstance, LpMethod, Sense};
use motnet::measures::{sample, sample_pair, seeded_rng, Family, Measure, PathCoupling, SampleSet};
use motnet::neuralnet::{Activation, Mlp};
use motnet::saddle::{full_objective, Mode, NetArch, SaddleNets, SaddleProblem};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 24,
        ..ProptestConfig::default()
    }
}

fn lognormals(v1: f64, v2: f64) -> (Measure, Measure) {
    (Measure::lognormal(1.0, v1).unwrap(), Measure::lognormal(1.0, v2).unwrap())
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn backprop_matches_central_differences(
        seed in 0u64..10_000,
        d_in in 1usize..4,
        d_out in 1usize..3,
        hidden in proptest::collection::vec(1usize..6, 0..3),
        tanh in any::<bool>(),
    ) {
        let mut rng = seeded_rng(seed);
        let mut sizes = vec![d_in];
        sizes.extend(&hidden);
        sizes.push(d_out);
        let act = if tanh { Activation::Tanh } else { Activation::Linear };
        let mut net = Mlp::new(&sizes, act, &mut rng).unwrap();
        let x: Vec<f64> = (0..d_in).map(|k| 0.7 - 0.45 * k as f64).collect();
        let w: Vec<f64> = (0..d_out).map(|k| 1.0 - 0.6 * k as f64).collect();
        let (grad, input_grad) = net.backward(&x, &w).unwrap();
        let f = |n: &Mlp, x: &[f64]| -> f64 { n.forward(x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        for k in 0..net.param_count() {
            let orig = net.params()[k];
            net.params_mut()[k] = orig + h;
            let up = f(&net, &x);
            net.params_mut()[k] = orig - h;
            let down = f(&net, &x);
            net.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            prop_assert!((grad[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "param {k}: {} vs {fd}", grad[k]);
        }
        for k in 0..d_in {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (f(&net, &xp) - f(&net, &xm)) / (2.0 * h);
            prop_assert!((input_grad[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn constant_in_u_leaves_the_objective_unchanged(seed in 0u64..1000, k in -50.0f64..50.0, mot in any::<bool>()) {
        let (m1, m2) = lognormals(0.04, 0.06);
        let (s1, s2) = sample_pair(&m1, &m2, 256, PathCoupling::Common, seed).unwrap();
        let mode = if mot { Mode::Mot { n_maps: 2 } } else { Mode::Ot };
        let prob = SaddleProblem::new(builtin_cost("sum_squared").unwrap(), s1, s2, mode).unwrap();
        let mut nets = SaddleNets::init(1, mode, &NetArch::default(), &mut seeded_rng(seed)).unwrap();
        let before = full_objective(&prob, &nets);
        nets.u.output_bias_mut()[0] += k;
        prop_assert!((full_objective(&prob, &nets) - before).abs() <= 1e-12);
    }

    /// Subtracting `U(s2)` from the cost lowers every coupling's value by the
    /// same `E_mu2[U]`, so the LP optimum moves by exactly that amount.
    #[test]
    fn cost_shift_moves_the_lp_value_by_the_correction(v1 in 0.01f64..0.05, extra in 0.005f64..0.05, mot in any::<bool>(), cubic in any::<bool>()) {
        let (m1, m2) = lognormals(v1, v1 + extra);
        let name = if cubic { "cubic_sum" } else { "sum_squared" };
        let c = builtin_cost(name).unwrap();
        let disc = discretize_quantile(&m1, &m2, 10, 10, mot).unwrap();
        let s1 = SampleSet::new(disc.atoms1.clone(), 1, 0).unwrap();
        let shifted = shifted_cost(&c, &s1).unwrap();
        let (w1, w2) = (disc.weights1(), disc.weights2());
        let lp = |cost| {
            let inst = LpInstance::new(disc.atoms1.clone(), w1.clone(), disc.atoms2.clone(), w2.clone(), cost, mot, Sense::Max).unwrap();
            solve_lp(&inst, LpMethod::DenseSimplex, 0).unwrap().value
        };
        let plain = lp(&c);
        let moved = lp(&shifted) + shifted.value_correction_atoms(&disc.atoms2, &w2, 1);
        prop_assert!((plain - moved).abs() <= 1e-9 * (1.0 + plain.abs()), "{plain} vs {moved}");
    }

    #[test]
    fn lp_certificates_hold(v1 in 0.01f64..0.05, extra in 0.005f64..0.05, n in 4usize..14, min in any::<bool>()) {
        let (m1, m2) = lognormals(v1, v1 + extra);
        let sense = if min { Sense::Min } else { Sense::Max };
        for mot in [false, true] {
            let (inst, _) = LpInstance::from_measures(&m1, &m2, n, &builtin_cost("cubic_sum").unwrap(), mot, sense).unwrap();
            let dense = solve_lp(&inst, LpMethod::DenseSimplex, 0).unwrap();
            let cut = solve_lp(&inst, LpMethod::CuttingPlane, 1).unwrap();
            let chk = check_solution(&inst, &dense);
            prop_assert!(chk.duality_gap <= 1e-7);
            prop_assert!(chk.dual_violation <= 1e-7 && chk.slackness <= 1e-7 && chk.primal_residual <= 1e-9);
            prop_assert!((dense.value - cut.value).abs() <= 1e-7 * (1.0 + dense.value.abs()));
        }
    }

    #[test]
    fn sinkhorn_dual_never_increases(v1 in 0.01f64..0.05, extra in 0.005f64..0.05, eps in 0.01f64..0.5, mot in any::<bool>()) {
        let (m1, m2) = lognormals(v1, v1 + extra);
        let disc = discretize_quantile(&m1, &m2, 30, 30, mot).unwrap();
        let p = DiscreteProblem::new(disc.atoms1.clone(), disc.weights1(), disc.atoms2.clone(), disc.weights2(), 1, &builtin_cost("sum_squared").unwrap(), eps).unwrap();
        let r = if mot { sinkhorn_mot(&p, 300, 1e-10) } else { sinkhorn_ot(&p, 300, 1e-10) }.unwrap();
        for w in r.state.dual_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-10 * (1.0 + w[0].abs()), "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn scores_follow_the_threshold(seed in 0u64..1000, level in 0.005f64..0.2) {
        let m = Measure::iid(Family::Normal { mean: 0.0, variance: 1.0 }, 2).unwrap();
        let scorer = AnomalyScorer::new(sample(&m, 400, seed).unwrap(), Threshold::Quantile(level)).unwrap();
        let probes = sample(&Measure::iid(Family::Normal { mean: 0.0, variance: 4.0 }, 2).unwrap(), 200, seed + 1).unwrap();
        let scores = scorer.score_anomalies(&probes).unwrap();
        for s in &scores {
            prop_assert_eq!(s.is_anomaly, s.density <= scorer.threshold);
            prop_assert!((s.density - scorer.density_estimate(&s.x)).abs() <= 1e-15);
        }
        for a in &scores {
            for b in &scores {
                if a.density <= b.density && b.is_anomaly {
                    prop_assert!(a.is_anomaly);
                }
            }
        }
    }

    #[test]
    fn formatted_numbers_keep_ten_digits(x in proptest::num::f64::NORMAL) {
        let back: f64 = fmt_sig(x).parse().unwrap();
        prop_assert!((back - x).abs() <= 5e-10 * x.abs());
    }
}
