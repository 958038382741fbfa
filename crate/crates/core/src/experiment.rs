//! Runs a [`Plan`] and writes its artifacts: `trace.csv`, `trace_plot.csv`,
//! `report.txt` and the solver-specific CSVs.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::anomaly::{flag_rate, generate, train_generator, AnomalyScorer, Threshold};
use crate::config::{Plan, Task};
use crate::entropic::{
    coupling, marginal_residuals, martingale_residual, neural_entropic, neural_entropic_from, penalization,
    sinkhorn_annealed, sinkhorn_mot, sinkhorn_ot, sparse_coupling, BaselineReport,
};
use crate::error::{Error, Result};
use crate::lp::{check_solution, solve_lp};
use crate::saddle::{map_error_vs_frechet_hoeffding, solve, Mode, TransportReport, Trace};

/// Steps per unit of the plot index.
pub const PLOT_STEP_UNIT: f64 = 1e4;

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub value: f64,
    /// False when the solver flagged non-convergence.
    pub converged: bool,
    pub warnings: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// `x` with ten significant digits, trailing zeros dropped, in plain
/// notation for exponents in `[-4, 10)` and scientific otherwise.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.9e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..10).contains(&exp) {
        let s = format!("{:.*}", (9 - exp).max(0) as usize, x);
        trim_zeros(&s).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mant))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

struct Out {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Out {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        let mut f = fs::File::create(&path)?;
        f.write_all(body.as_bytes())?;
        self.files.push(path);
        Ok(())
    }

    fn trace(&mut self, trace: &Trace) -> Result<()> {
        let mut raw = String::from("step,objective\n");
        let mut plot = String::from("plot_index,objective\n");
        for &(step, v) in &trace.points {
            let _ = writeln!(raw, "{step},{}", fmt_sig(v));
            let _ = writeln!(plot, "{},{}", fmt_sig(step as f64 / PLOT_STEP_UNIT), fmt_sig(v));
        }
        self.write("trace.csv", &raw)?;
        self.write("trace_plot.csv", &plot)
    }
}

/// Ordered `key = value` lines.
#[derive(Default)]
struct Report {
    lines: Vec<(String, String)>,
}

impl Report {
    fn put(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    fn num(&mut self, key: &str, value: f64) {
        self.put(key, fmt_sig(value));
    }

    fn render(&self, warnings: &[String]) -> String {
        let mut s = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "warnings = {}", warnings.len());
        for w in warnings {
            let _ = writeln!(s, "warning = {w}");
        }
        s
    }
}

/// Runs the plan, writing everything under `plan.out_dir`. A diverged run
/// still writes its partial trace and report before the error returns.
pub fn run(plan: &Plan) -> Result<RunSummary> {
    let mut out = Out::new(&plan.out_dir)?;
    let mut rep = Report::default();
    rep.put("solver", &plan.solver);
    rep.put("seed", plan.seed);
    let start = Instant::now();
    let result = dispatch(plan, &mut out, &mut rep);
    let wall = start.elapsed().as_secs_f64();
    match result {
        Ok((value, converged, warnings)) => {
            rep.put("wall_time_s", format!("{wall:.3}"));
            rep.put("converged", converged);
            out.write("report.txt", &rep.render(&warnings))?;
            Ok(RunSummary {
                value,
                converged,
                warnings,
                files: out.files,
            })
        }
        Err(Error::Diverged { step, partial_trace }) => {
            out.trace(&partial_trace)?;
            rep.put("steps", step);
            rep.put("wall_time_s", format!("{wall:.3}"));
            rep.put("converged", false);
            rep.put("diverged_at_step", step);
            out.write("report.txt", &rep.render(&[]))?;
            Err(Error::Diverged { step, partial_trace })
        }
        Err(e) => Err(e),
    }
}

type Dispatched = (f64, bool, Vec<String>);

fn dispatch(plan: &Plan, out: &mut Out, rep: &mut Report) -> Result<Dispatched> {
    match &plan.task {
        Task::Saddle { prob, config } => {
            let r = solve(prob, config)?;
            out.trace(&r.trace)?;
            rep.put("steps", r.steps);
            rep.num("value", r.value);
            rep.num("shift_correction", r.correction);
            rep.put("cost", &prob.cost);
            rep.put("samples", prob.mu1.len());
            if let (Mode::Ot, Some((m1, m2))) = (prob.mode, &plan.analytic) {
                if prob.dim() == 1 {
                    rep.num("map_sup_error_vs_comonotone", map_error_vs_frechet_hoeffding(&r.nets, m1, m2)?);
                }
            }
            if let Some(d) = &r.diagnostics {
                rep.num("martingale_residual", d.martingale_residual);
                rep.num("q_min", d.q_min);
                rep.num("q_max", d.q_max);
                rep.num("order_fraction", d.order_fraction);
            }
            out.write("map.csv", &map_csv(&r, prob.dim()))?;
            Ok((r.value, true, r.warnings))
        }
        Task::Sinkhorn {
            prob,
            martingale,
            max_iter,
            tol,
            anneal,
            mean_shift,
        } => {
            let r = match anneal {
                Some((start, factor)) => sinkhorn_annealed(prob, *martingale, *start, *factor, *max_iter, *tol)?,
                None if *martingale => sinkhorn_mot(prob, *max_iter, *tol)?,
                None => sinkhorn_ot(prob, *max_iter, *tol)?,
            };
            let mut trace = Trace::default();
            for (i, &v) in r.state.dual_history.iter().enumerate() {
                trace.push(i as u64 + 1, v);
            }
            out.trace(&trace)?;
            let pi = coupling(prob, &r.state);
            let (row, col) = marginal_residuals(prob, &pi);
            rep.put("steps", r.state.iteration);
            rep.num("value", r.value);
            rep.num("eps", prob.eps);
            rep.put("atoms", format!("{}x{}", prob.w1.len(), prob.w2.len()));
            rep.num("row_residual", row);
            rep.num("col_residual", col);
            if *martingale {
                rep.num("martingale_residual", martingale_residual(prob, &pi));
            }
            rep.num("mean_match_shift", *mean_shift);
            let mut warnings = Vec::new();
            if *mean_shift != 0.0 {
                warnings.push(format!("second marginal atoms translated by {} to match means", fmt_sig(*mean_shift)));
            }
            if !r.converged {
                warnings.push(format!("Sinkhorn stopped at max_iter = {max_iter} above tolerance {tol}"));
            }
            out.write(
                "coupling.csv",
                &coupling_csv(&pi, &prob.atoms1, &prob.atoms2, prob.dim),
            )?;
            Ok((r.value, r.converged, warnings))
        }
        Task::NeuralEntropic {
            cost,
            mu1,
            mu2,
            eps,
            eps_path,
            martingale,
            config,
        } => {
            let mut stages = eps_path.clone();
            stages.push(*eps);
            let mut trace = Trace::default();
            let mut offset = 0;
            let mut clips = 0;
            let mut warnings = Vec::new();
            let mut last: Option<BaselineReport> = None;
            for &e in &stages {
                let r = match last.take() {
                    None => neural_entropic(cost, mu1, mu2, e, *martingale, config)?,
                    Some(prev) => neural_entropic_from(cost, mu1, mu2, e, prev.nets, config)?,
                };
                for &(s, v) in &r.trace.points {
                    trace.push(offset + s, v);
                }
                offset += r.steps;
                clips += r.clip_count;
                warnings.extend(r.warnings.iter().map(|w| format!("eps {}: {w}", fmt_sig(e))));
                last = Some(r);
            }
            let r = last.expect("at least one stage");
            out.trace(&trace)?;
            rep.put("steps", offset);
            rep.num("value", r.value);
            rep.num("dual_objective", r.objective);
            rep.num("shift_correction", r.correction);
            rep.num("eps", *eps);
            if !eps_path.is_empty() {
                rep.put("eps_path", eps_path.iter().map(|e| fmt_sig(*e)).collect::<Vec<_>>().join(" "));
            }
            rep.put("clip_count", clips);
            if clips > 0 {
                warnings.push(format!("{clips} exponents clipped"));
            }
            Ok((r.value, true, warnings))
        }
        Task::Penalization {
            cost,
            mu1,
            mu2,
            gamma,
            martingale,
            config,
        } => {
            let r = penalization(cost, mu1, mu2, *gamma, *martingale, config)?;
            out.trace(&r.trace)?;
            rep.put("steps", r.steps);
            rep.num("value", r.value);
            rep.num("objective", r.objective);
            rep.num("shift_correction", r.correction);
            rep.num("gamma", *gamma);
            if let Some(sd) = r.trace.tail_std(10) {
                rep.num("last10_std", sd);
            }
            Ok((r.value, true, r.warnings))
        }
        Task::Lp { inst, method, mean_shift } => {
            let r = solve_lp(inst, *method, plan.seed)?;
            let chk = check_solution(inst, &r);
            let mut trace = Trace::default();
            for (i, &v) in r.history.iter().enumerate() {
                trace.push(i as u64 + 1, v);
            }
            out.trace(&trace)?;
            rep.put("steps", r.history.len());
            rep.num("value", r.value);
            rep.num("dual_value", r.dual_value);
            rep.put("pivots", r.pivots);
            rep.put("rank", r.rank);
            rep.put("atoms", format!("{}x{}", inst.w1.len(), inst.w2.len()));
            rep.num("duality_gap", chk.duality_gap);
            rep.num("dual_violation", chk.dual_violation);
            rep.num("slackness", chk.slackness);
            rep.num("primal_residual", chk.primal_residual);
            rep.num("mean_match_shift", *mean_shift);
            let mut warnings = Vec::new();
            if *mean_shift != 0.0 {
                warnings.push(format!("second marginal atoms translated by {} to match means", fmt_sig(*mean_shift)));
            }
            out.write("coupling.csv", &coupling_csv(&r.coupling, &inst.atoms1, &inst.atoms2, 1))?;
            Ok((r.value, true, warnings))
        }
        Task::Anomaly {
            prob,
            config,
            quantile,
            shift,
            n_generate,
        } => {
            let r = train_generator(prob, config)?;
            out.trace(&r.w2_trace)?;
            let final_w2 = r.w2_trace.last().unwrap_or(f64::NAN);
            let scorer_samples = generate(&r.generator, &prob.prior, *n_generate, plan.seed.wrapping_add(2), 0.0)?;
            let scorer = AnomalyScorer::new(scorer_samples.clone(), Threshold::Quantile(*quantile))?;
            let normal = generate(&r.generator, &prob.prior, *n_generate, plan.seed.wrapping_add(3), 0.0)?;
            let abnormal = generate(&r.generator, &prob.prior, *n_generate, plan.seed.wrapping_add(4), *shift)?;
            let normal_scores = scorer.score_anomalies(&normal)?;
            let abnormal_scores = scorer.score_anomalies(&abnormal)?;
            rep.put("steps", r.state.step);
            rep.num("value", final_w2);
            rep.put("outer_updates", r.outer_updates);
            rep.num("threshold_quantile", *quantile);
            rep.num("threshold_density", scorer.threshold);
            rep.num("anomaly_shift", *shift);
            rep.num("normal_flag_rate", flag_rate(&normal_scores));
            rep.num("abnormal_flag_rate", flag_rate(&abnormal_scores));
            rep.put("bandwidth", scorer.bandwidth.iter().map(|b| fmt_sig(*b)).collect::<Vec<_>>().join(" "));
            let mut scatter = String::new();
            let d = prob.real.dim;
            let _ = writeln!(scatter, "label,{}", coords("x", d));
            for (label, set) in [("real", &prob.real), ("normal", &normal), ("abnormal", &abnormal)] {
                for row in set.rows() {
                    let _ = writeln!(scatter, "{label},{}", join(row));
                }
            }
            out.write("scatter.csv", &scatter)?;
            let mut scores = String::new();
            let _ = writeln!(scores, "label,{},density,flag", coords("x", d));
            for (label, set) in [("normal", &normal_scores), ("abnormal", &abnormal_scores)] {
                for s in set.iter() {
                    let _ = writeln!(scores, "{label},{},{},{}", join(&s.x), fmt_sig(s.density), s.is_anomaly as u8);
                }
            }
            out.write("scores.csv", &scores)?;
            Ok((final_w2, true, Vec::new()))
        }
    }
}

fn coords(prefix: &str, d: usize) -> String {
    if d == 1 {
        return prefix.trim_end_matches('_').to_string();
    }
    (1..=d).map(|k| format!("{prefix}{k}")).collect::<Vec<_>>().join(",")
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| fmt_sig(*x)).collect::<Vec<_>>().join(",")
}

fn map_csv(r: &TransportReport, d: usize) -> String {
    let n_maps = r.map_samples.first().map_or(1, |m| m.images.len());
    let mut s = String::new();
    let header = match (d, n_maps) {
        (1, 1) => "s1,T".to_string(),
        (1, 2) => "s1,Tu,Td,q".to_string(),
        _ => {
            let mut cols = vec![coords("s1_", d)];
            for k in 1..=n_maps {
                cols.push(coords(&format!("T{k}_"), d));
            }
            if n_maps > 1 {
                cols.extend((1..=n_maps).map(|k| format!("q{k}")));
            }
            cols.join(",")
        }
    };
    let _ = writeln!(s, "{header}");
    for m in &r.map_samples {
        let mut row = vec![join(&m.s1)];
        row.extend(m.images.iter().map(|t| join(t)));
        if n_maps == 2 && d == 1 {
            row.push(fmt_sig(m.weights[0]));
        } else if n_maps > 1 {
            row.extend(m.weights.iter().map(|w| fmt_sig(*w)));
        }
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

fn coupling_csv(pi: &[f64], atoms1: &[f64], atoms2: &[f64], d: usize) -> String {
    let n2 = atoms2.len() / d;
    let mut s = String::new();
    let _ = writeln!(s, "i,j,{},{},pi", coords("s1_", d), coords("s2_", d));
    for (i, j, p) in sparse_coupling(pi, n2) {
        let _ = writeln!(
            s,
            "{i},{j},{},{},{}",
            join(&atoms1[i * d..(i + 1) * d]),
            join(&atoms2[j * d..(j + 1) * d]),
            fmt_sig(p)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_significant_digits() {
        assert_eq!(fmt_sig(4.2029801234567), "4.202980123");
        assert_eq!(fmt_sig(-0.0022271234567891), "-0.002227123457");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.5e-12), "1.5e-12");
        assert_eq!(fmt_sig(123456789012.0), "1.23456789e11");
        assert_eq!(fmt_sig(9.99999999999), "10");
    }
}
