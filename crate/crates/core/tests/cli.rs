use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_motnet");

fn motnet(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const LOGNORMALS: &str = r#"
[mu1]
family = "lognormal"
variance = 0.04

[mu2]
family = "lognormal"
variance = 0.06
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn small_ot(hyper: &str) -> String {
    format!(
        "[problem]\nmode = \"ot\"\ncost = \"sum_squared\"\nsamples = 512\npaths = \"common\"\n{LOGNORMALS}\n\
         [solver]\nkind = \"primal_dual\"\n\n[hyper]\n{hyper}\nsteps = 400\neval_every = 100\nlr = 1e-3\n"
    )
}

#[test]
fn missing_seed_exits_1_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &small_ot(""));
    let out = dir.path().join("out");
    let o = motnet(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let body = small_ot("seed = 1").replace("lr = 1e-3", "lr = -2.0");
    let cfg = write_config(dir.path(), "c.toml", &body);
    let o = motnet(&["run", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hyper.lr"), "{}", stderr(&o));
    let cfg = write_config(dir.path(), "d.toml", &small_ot("seed = 1\nwidth = 3"));
    let o = motnet(&["run", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("width"), "{}", stderr(&o));
}

#[test]
fn rerun_gives_the_same_trace_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &small_ot("seed = 5"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = motnet(&["run", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let ta = fs::read(a.join("trace.csv")).unwrap();
    assert_eq!(ta, fs::read(b.join("trace.csv")).unwrap());
    let text = String::from_utf8(ta).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,objective"));
    let steps: Vec<u64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![100, 200, 300, 400]);
    let plot = fs::read_to_string(a.join("trace_plot.csv")).unwrap();
    assert!(plot.starts_with("plot_index,objective\n0.01,"));
    let map = fs::read_to_string(a.join("map.csv")).unwrap();
    assert!(map.starts_with("s1,T\n"));
    let report = fs::read_to_string(a.join("report.txt")).unwrap();
    for key in ["solver = primal_dual", "seed = 5", "steps = 400", "wall_time_s = ", "value = ", "warnings = "] {
        assert!(report.contains(key), "report lacks `{key}`:\n{report}");
    }

    let c = motnet(&["run", &cfg, "--out", a.to_str().unwrap(), "--seed", "6"]);
    assert_eq!(c.status.code(), Some(0));
    assert_ne!(fs::read(a.join("trace.csv")).unwrap(), fs::read(b.join("trace.csv")).unwrap());
}

#[test]
fn mot_run_writes_two_maps_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let body = small_ot("seed = 2")
        .replace("mode = \"ot\"", "mode = \"mot\"\nn_maps = 2")
        .replace("\"sum_squared\"", "\"cubic_sum\"");
    let cfg = write_config(dir.path(), "c.toml", &body);
    let out = dir.path().join("o");
    let o = motnet(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(fs::read_to_string(out.join("map.csv")).unwrap().starts_with("s1,Tu,Td,q\n"));
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("martingale_residual = "));
}

#[test]
fn sinkhorn_at_the_iteration_cap_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "[problem]\nmode = \"mot\"\ncost = \"cubic_sum\"\n{LOGNORMALS}\n[solver]\nkind = \"sinkhorn\"\n\n\
         [hyper]\nseed = 1\natoms = 40\neps = 1e-3\nmax_iter = 3\ntol = 1e-12\n"
    );
    let cfg = write_config(dir.path(), "c.toml", &body);
    let out = dir.path().join("o");
    let o = motnet(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("converged = false") && report.contains("mean_match_shift = "));
    assert!(fs::read_to_string(out.join("coupling.csv")).unwrap().starts_with("i,j,s1,s2,pi\n"));
}

#[test]
fn divergence_exits_2_and_keeps_the_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let body = small_ot("seed = 1\noptimizer = \"sgd\"")
        .replace("lr = 1e-3", "lr = 1e3")
        .replace("eval_every = 100", "eval_every = 1")
        .replace("mode = \"ot\"", "mode = \"ot\"\nshift = false");
    let cfg = write_config(dir.path(), "c.toml", &body);
    let out = dir.path().join("o");
    let o = motnet(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(fs::read_to_string(out.join("trace.csv")).unwrap().starts_with("step,objective\n"));
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("diverged_at_step = "));
}

#[test]
fn anomaly_run_writes_scatter_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[problem]\nmode = \"anomaly\"\nsamples = 512\n\n\
                [mu1]\nfamily = \"lognormal\"\nvariance = 0.04\ndim = 2\n\n\
                [prior]\nfamily = \"normal\"\nvariance = 1.0\ndim = 2\n\n\
                [solver]\nkind = \"primal_dual\"\n\n\
                [hyper]\nseed = 4\nsteps = 2000\nlr = 1e-3\ntrace_every = 1000\nn_generate = 300\n";
    let cfg = write_config(dir.path(), "c.toml", body);
    let out = dir.path().join("o");
    let o = motnet(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let scatter = fs::read_to_string(out.join("scatter.csv")).unwrap();
    assert!(scatter.starts_with("label,x1,x2\n"));
    for label in ["real,", "normal,", "abnormal,"] {
        assert!(scatter.lines().any(|l| l.starts_with(label)), "{label}");
    }
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert!(scores.starts_with("label,x1,x2,density,flag\n"));
    assert_eq!(scores.lines().count(), 1 + 600);
    assert_eq!(fs::read_to_string(out.join("trace.csv")).unwrap().lines().count(), 3);
}

#[test]
fn csv_marginals_feed_the_lp() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.csv"), "x,w\n0,1\n2,1\n").unwrap();
    fs::write(dir.path().join("b.csv"), "x,w\n-1,1\n1,2\n3,1\n").unwrap();
    let body = "[problem]\nmode = \"mot\"\ncost = \"s1*s2^2\"\n\n\
                [mu1]\nfamily = \"csv\"\npath = \"a.csv\"\n\n[mu2]\nfamily = \"csv\"\npath = \"b.csv\"\n\n\
                [solver]\nkind = \"lp\"\n\n[hyper]\nseed = 1\natoms = 1\n";
    let cfg = write_config(dir.path(), "c.toml", body);
    let out = dir.path().join("o");
    let o = motnet(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("atoms = 2x3"), "{report}");
}

#[test]
fn oracles_print_reference_values() {
    let o = motnet(&["oracle", "gaussian", "--dim", "2", "--var1", "1", "--var2", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let v: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert!((v - 2.0 * (2f64.sqrt() - 1.0).powi(2)).abs() < 1e-9);
    let o = motnet(&["oracle", "fh", "--cost", "sum_squared", "--mu1", "lognormal:1,0.04", "--mu2", "lognormal:1,0.06"]);
    let v: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert!((v - 4.20).abs() < 0.01);
    let o = motnet(&[
        "oracle", "lp", "--cost", "cubic_sum", "--mu1", "lognormal:1,0.04", "--mu2", "lognormal:1,0.06", "--atoms", "20",
        "--martingale",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("duality_gap = "));
    let o = motnet(&["check", "nonsense"]);
    assert_eq!(o.status.code(), Some(1));
}
