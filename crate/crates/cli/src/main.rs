//! `mvimpulse`: solve, simulate and verify the mean-field optimal dividend problem.
//!
//! Exit codes: 0 ok, 1 configuration or other error, 2 infinite value,
//! 3 verification failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use mvimpulse::dividend::{phi_table, value_phi};
use mvimpulse::fokker_planck::{run_weak_form, WeakFormExperiment};
use mvimpulse::impulse::{estimate_performance, ImpulseError};
use mvimpulse::numfmt::{fmt_num, to_json_string};
use mvimpulse::particles::write_path_csv;
use mvimpulse::qvi::{check_condition_vi, verify, GridSpec, ReducedFunction};
use mvimpulse::{DividendError, DividendSolution, KeyValueConfig, ModelParams, Policy, SimConfig, TestFunction};

#[derive(Parser)]
#[command(name = "mvimpulse", version, about = "Impulse control of conditional McKean-Vlasov jump diffusions")]
struct Cli {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads for path- and particle-level parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form solution: solution.json and phi.csv.
    Solve {
        /// Rows of the value table on (0, 2 u_bar].
        #[arg(long, default_value_t = 200)]
        table_points: usize,
    },
    /// Monte-Carlo estimate of a policy: summary.json, events.csv, payoffs.csv.
    Simulate {
        /// optimal | never | threshold:<u> | liquidate-at:<t>
        #[arg(long, default_value = "optimal")]
        policy: String,
    },
    /// Checks the quasi-variational inequalities for the solved value: qvi_report.json, qvi_points.csv.
    VerifyQvi {
        /// Multiplies C1 before verifying.
        #[arg(long)]
        perturb_c1: Option<f64>,
        #[arg(long, default_value_t = 2000)]
        n_points: usize,
    },
    /// Weak-form residual of the conditional Fokker-Planck equation: residuals.json, paths.csv.
    FpCheck {
        /// q | q2 | bump:<scale>
        #[arg(long, default_value = "q")]
        test_function: String,
    },
}

enum Failure {
    Other(anyhow::Error),
    Infinite,
    Verification(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Other(e.into())
    }
}

fn dividend_failure(e: DividendError) -> Failure {
    match e {
        DividendError::Infinite => Failure::Infinite,
        other => Failure::Other(other.into()),
    }
}

type Outcome = Result<Vec<String>, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Infinite) => {
            eprintln!("{}", DividendError::Infinite);
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let start = Instant::now();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure thread pool")?;
    }
    let path = cli.config.as_ref().ok_or_else(|| anyhow!("--config <path> is required"))?;
    let mut cfg = KeyValueConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.set("seed", seed);
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("cannot create {}", cli.out.display()))?;
    let params = cfg.model_params()?;
    params.validate()?;

    let (name, result) = match &cli.command {
        Command::Solve { table_points } => ("solve", solve(&params, *table_points, &cli.out)),
        Command::Simulate { policy } => ("simulate", simulate(&params, &cfg, policy, &cli.out)),
        Command::VerifyQvi { perturb_c1, n_points } => {
            ("verify-qvi", verify_qvi(&params, *perturb_c1, *n_points, &cli.out))
        }
        Command::FpCheck { test_function } => ("fp-check", fp_check(&params, &cfg, test_function, &cli.out)),
    };
    // The manifest is written for failed verifications too; the report is the evidence.
    let (outputs, failure) = match result {
        Ok(outputs) => (outputs, None),
        Err(Failure::Verification(msg)) => (vec!["qvi_report.json".into(), "qvi_points.csv".into()], Some(msg)),
        Err(e) => return Err(e),
    };
    let manifest = json!({
        "command": name,
        "config": cfg.entries(),
        "seed": cfg.get("seed"),
        "code_version": env!("CARGO_PKG_VERSION"),
        "threads": cli.threads,
        "outputs": outputs,
        "wall_time_seconds": start.elapsed().as_secs_f64(),
    });
    write(&cli.out, "run.json", &to_json_string(&manifest).context("manifest")?)?;
    match failure {
        Some(msg) => Err(Failure::Verification(msg)),
        None => Ok(()),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn json_text(v: &impl serde::Serialize) -> anyhow::Result<String> {
    Ok(to_json_string(v)? + "\n")
}

fn solve(p: &ModelParams, table_points: usize, out: &Path) -> Outcome {
    let sol = DividendSolution::solve(p).map_err(dividend_failure)?;
    let vi = check_condition_vi(&sol, p);
    let report = json!({
        "gamma1": sol.gamma1,
        "gamma2": sol.gamma2,
        "u_bar": sol.u_bar,
        "C1": sol.c1,
        "C2": sol.c2,
        "condition_vi_margin": vi.margin,
        "condition_vi_holds": vi.holds,
    });
    let text = json_text(&report)?;
    print!("{text}");
    write(out, "solution.json", &text)?;
    let mut csv = String::from("u,phi,branch\n");
    for (u, phi, branch) in phi_table(&sol, 2.0 * sol.u_bar, table_points.max(1)) {
        csv += &format!("{},{},{branch}\n", fmt_num(u), fmt_num(phi));
    }
    write(out, "phi.csv", &csv)?;
    Ok(vec!["solution.json".into(), "phi.csv".into()])
}

fn simulate(p: &ModelParams, cfg: &KeyValueConfig, policy_spec: &str, out: &Path) -> Outcome {
    let sim: SimConfig = cfg.sim_config()?;
    let policy = match Policy::parse(policy_spec, p) {
        Ok(policy) => policy,
        Err(ImpulseError::Dividend(e)) => return Err(dividend_failure(e)),
        Err(e) => return Err(Failure::Other(e.into())),
    };
    let model = p.validate()?;
    let est = estimate_performance(&model, &policy, &sim, sim.n_paths)?;

    let mut summary = est.summary();
    summary["policy"] = Value::from(policy_spec.trim());
    if policy_spec.trim() == "optimal" {
        let sol = DividendSolution::solve(p).map_err(dividend_failure)?;
        let phi = value_phi(sim.start_time, sim.x0, &sol);
        summary["phi"] = json!(phi);
        summary["abs_error"] = json!((est.mean - phi).abs());
    }
    let text = json_text(&summary)?;
    print!("{text}");
    write(out, "summary.json", &text)?;

    let mut events = Vec::new();
    est.write_events_csv(&mut events).context("events csv")?;
    fs::write(out.join("events.csv"), events).context("cannot write events.csv")?;
    let mut payoffs = String::from("path_index,payoff,tau_s\n");
    for (i, (x, t)) in est.payoffs.iter().zip(&est.tau_s).enumerate() {
        payoffs += &format!("{i},{},{}\n", fmt_num(*x), fmt_num(*t));
    }
    write(out, "payoffs.csv", &payoffs)?;
    Ok(vec!["summary.json".into(), "events.csv".into(), "payoffs.csv".into()])
}

fn verify_qvi(p: &ModelParams, perturb_c1: Option<f64>, n_points: usize, out: &Path) -> Outcome {
    let sol = DividendSolution::solve(p).map_err(dividend_failure)?;
    let candidate = match perturb_c1 {
        Some(f) => sol.with_scaled_c1(f),
        None => sol,
    };
    let spec = GridSpec { n_points: n_points.max(1), ..GridSpec::default() };
    let report = verify(&ReducedFunction::dividend(&candidate), &sol, p, &spec);
    write(out, "qvi_report.json", &json_text(&report)?)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).context("qvi csv")?;
    fs::write(out.join("qvi_points.csv"), csv).context("cannot write qvi_points.csv")?;

    let flags = json_text(&json!({ "passed": report.passed, "flags": report.flags, "smooth_fit": report.smooth_fit }))?;
    print!("{flags}");
    if report.passed {
        Ok(vec!["qvi_report.json".into(), "qvi_points.csv".into()])
    } else {
        let failed: Vec<String> = serde_json::to_value(report.flags)
            .context("flags")?
            .as_object()
            .map(|m| m.iter().filter(|(_, v)| **v == Value::Bool(false)).map(|(k, _)| k.clone()).collect())
            .unwrap_or_default();
        Err(Failure::Verification(failed.join(", ")))
    }
}

fn fp_check(p: &ModelParams, cfg: &KeyValueConfig, test_function: &str, out: &Path) -> Outcome {
    let sim = cfg.sim_config()?;
    let g = TestFunction::parse(test_function)?;
    let model = p.validate()?;
    // Simulate on dt/2 and observe on both dt and dt/2 to show the step dependence.
    let exp = WeakFormExperiment {
        n_particles: sim.n_particles,
        n_paths: sim.n_paths,
        x0: sim.x0,
        fine_dt: sim.dt / 2.0,
        n_fine_steps: 2 * sim.n_steps(),
        strides: vec![2, 1],
        seed: sim.seed,
    };
    let outcome = run_weak_form(&model, &exp, &[g])?;
    let text = json_text(&json!({ "test_function": g.to_string(), "by_step": outcome.stats }))?;
    print!("{text}");
    write(out, "residuals.json", &text)?;
    let mut paths = Vec::new();
    write_path_csv(&mut paths, &outcome.mean_paths).context("paths csv")?;
    fs::write(out.join("paths.csv"), paths).context("cannot write paths.csv")?;
    Ok(vec!["residuals.json".into(), "paths.csv".into()])
}
