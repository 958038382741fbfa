use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use motnet::acceptance::{bundled, Suite};
use motnet::config::{ExperimentConfig, Overrides};
use motnet::costs::CostFn;
use motnet::experiment::{fmt_sig, run};
use motnet::lp::{check_solution, frechet_hoeffding_value, gaussian_w2_value, solve_lp, LpInstance, LpMethod, Sense};
use motnet::measures::{Family, Measure};
use motnet::{Error, Result};

#[derive(Parser)]
#[command(name = "motnet", version, about = "Neural primal-dual solvers for OT and martingale OT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config (a path or a bundled name such as fig1_primal_dual).
    Run {
        config: String,
        /// Output directory, overriding [output] dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed, overriding [hyper] seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Step count, overriding [hyper] steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Run the acceptance suite: figures, properties or all.
    Check { suite: String },
    /// Reference values.
    Oracle {
        #[command(subcommand)]
        oracle: Oracle,
    },
}

#[derive(Subcommand)]
enum Oracle {
    /// Comonotone (Frechet-Hoeffding) transport value in d = 1.
    Fh {
        #[arg(long)]
        cost: String,
        /// `normal:MEAN,VAR` or `lognormal:CENTER,LOGVAR`.
        #[arg(long)]
        mu1: String,
        #[arg(long)]
        mu2: String,
        #[arg(long, default_value_t = 10_000)]
        nodes: usize,
    },
    /// Squared 2-Wasserstein distance between N(0, var1 I) and N(0, var2 I).
    Gaussian {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        var1: f64,
        #[arg(long)]
        var2: f64,
    },
    /// Discretized transport LP on quantile atoms.
    Lp {
        #[arg(long)]
        cost: String,
        #[arg(long)]
        mu1: String,
        #[arg(long)]
        mu2: String,
        #[arg(long, default_value_t = 100)]
        atoms: usize,
        /// Add the martingale constraints.
        #[arg(long)]
        martingale: bool,
        /// Minimize instead of maximize.
        #[arg(long)]
        min: bool,
        /// dense_simplex or cutting_plane.
        #[arg(long, default_value = "dense_simplex")]
        method: String,
    },
}

fn parse_measure(text: &str) -> Result<Measure> {
    let (family, args) = text
        .split_once(':')
        .ok_or_else(|| Error::param(format!("measure `{text}`: expected FAMILY:A,B")))?;
    let nums: Vec<f64> = args
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::param(format!("measure `{text}`: {e}")))?;
    let [a, b] = nums[..] else {
        return Err(Error::param(format!("measure `{text}`: expected two numbers")));
    };
    let fam = match family {
        "normal" => Family::Normal { mean: a, variance: b },
        "lognormal" => Family::LogNormal {
            center: a,
            log_variance: b,
        },
        other => return Err(Error::param(format!("unknown family `{other}`"))),
    };
    Measure::iid(fam, 1)
}

fn load_config(arg: &str) -> Result<(ExperimentConfig, PathBuf)> {
    let path = Path::new(arg);
    if path.exists() {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        return Ok((ExperimentConfig::load(path)?, base));
    }
    match bundled(arg) {
        Some(text) => Ok((ExperimentConfig::from_toml(text)?, PathBuf::from("."))),
        None => Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{arg}: no such file or bundled config"),
        ))),
    }
}

fn cmd_run(config: &str, overrides: Overrides) -> Result<ExitCode> {
    let (cfg, base) = load_config(config)?;
    let plan = cfg.plan(&overrides, &base)?;
    eprintln!("running {} (seed {}) into {}", plan.solver, plan.seed, plan.out_dir.display());
    let summary = run(&plan)?;
    println!("value = {}", fmt_sig(summary.value));
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    if summary.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("solver did not converge");
        Ok(ExitCode::from(2))
    }
}

fn cmd_check(suite: &str) -> Result<ExitCode> {
    let suite = Suite::parse(suite)?;
    let mut all = true;
    for f in suite.criteria() {
        let c = f();
        all &= c.pass();
        print!("{c}");
    }
    println!("{}", if all { "all criteria pass" } else { "some criteria FAIL" });
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_oracle(o: Oracle) -> Result<ExitCode> {
    match o {
        Oracle::Fh { cost, mu1, mu2, nodes } => {
            let c = CostFn::parse(&cost)?;
            let v = frechet_hoeffding_value(&c, &parse_measure(&mu1)?, &parse_measure(&mu2)?, nodes)?;
            println!("{}", fmt_sig(v));
        }
        Oracle::Gaussian { dim, var1, var2 } => println!("{}", fmt_sig(gaussian_w2_value(dim, var1, var2)?)),
        Oracle::Lp {
            cost,
            mu1,
            mu2,
            atoms,
            martingale,
            min,
            method,
        } => {
            let c = CostFn::parse(&cost)?;
            let sense = if min { Sense::Min } else { Sense::Max };
            let (inst, disc) =
                LpInstance::from_measures(&parse_measure(&mu1)?, &parse_measure(&mu2)?, atoms, &c, martingale, sense)?;
            let r = solve_lp(&inst, LpMethod::parse(&method)?, 0)?;
            let chk = check_solution(&inst, &r);
            println!("value = {}", fmt_sig(r.value));
            println!("dual_value = {}", fmt_sig(r.dual_value));
            println!("duality_gap = {}", fmt_sig(chk.duality_gap));
            println!("mean_match_shift = {}", fmt_sig(disc.shift));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            steps,
        } => cmd_run(&config, Overrides { seed, steps, out }),
        Command::Check { suite } => cmd_check(&suite),
        Command::Oracle { oracle } => cmd_oracle(oracle),
    };
    match result {
        Ok(code) => code,
        Err(e @ Error::Diverged { .. }) => {
            eprintln!("error: {e}; partial trace written");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
