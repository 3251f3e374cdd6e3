//! Command-line front-end: build a central session, localize subsidiary
//! sessions against it, evaluate trajectories, and run the propagation
//! A/B comparison. Log level comes from the LILOC_LOG env var.
//!
//! Exit codes: 0 success, 2 input error, 3 initialization failure,
//! 4 solver failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use liloc::config::RunConfig;
use liloc::eval::{evaluate, read_tum_file, write_tum_file};
use liloc::factorgraph::{GraphError, SessionTag};
use liloc::pipeline::{
    build_central, localize_sim, write_run_outputs, LocalizeOptions, PipelineError,
};
use liloc::session::{Mode, SessionError, SessionStore};
use liloc::simulator::Scenario;

const EXIT_INPUT: u8 = 2;
const EXIT_INIT: u8 = 3;
const EXIT_SOLVER: u8 = 4;

#[derive(Parser)]
#[command(name = "liloc", version, about = "multi-session LiDAR-inertial localization")]
struct Cli {
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed override for simulator-backed commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Map a central session (from the simulator or an existing session
    /// directory) and write its session layout.
    BuildCentral {
        /// Simulator scenario: corridor | campus-loop | two-session-overlap.
        #[arg(long)]
        sim: Option<String>,
        /// Existing session directory to re-index instead of simulating.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize a subsidiary simulator session against a central session.
    Localize {
        /// Central session directory (from build-central).
        #[arg(long)]
        central: PathBuf,
        /// Simulator scenario for the subsidiary session.
        #[arg(long)]
        sim: String,
        /// Coarse initial-guess offsets from the true start pose.
        #[arg(long, default_value_t = 0.3)]
        init_x: f64,
        #[arg(long, default_value_t = 0.2)]
        init_y: f64,
        #[arg(long, default_value_t = 0.05)]
        init_yaw: f64,
        /// auto switches on overlap; rlm / ilm pin the mode.
        #[arg(long, default_value = "auto")]
        mode: String,
        /// Commit ILM submap updates immediately instead of staging.
        #[arg(long)]
        immediate_update: bool,
        /// Use the direct single-edge scan-match baseline instead of the
        /// multi-edge propagation model.
        #[arg(long)]
        ab_baseline: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Timestamp-matched ATE between two TUM trajectories.
    Evaluate {
        est: PathBuf,
        gt: PathBuf,
        /// Rigidly align the estimate to the ground truth first.
        #[arg(long)]
        align: bool,
    },
    /// Run the subsidiary pipeline twice (propagation vs single-edge
    /// baseline) and report both ATEs and timings.
    AbPropagation {
        #[arg(long, default_value = "two-session-overlap")]
        sim: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, String> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse::<Scenario>().map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<Option<Mode>, String> {
    match s {
        "auto" => Ok(None),
        "rlm" => Ok(Some(Mode::Rlm)),
        "ilm" => Ok(Some(Mode::Ilm)),
        other => Err(format!("unknown mode '{other}' (expected auto|rlm|ilm)")),
    }
}

fn input_err(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_INPUT)
}

fn pipeline_exit(err: PipelineError) -> ExitCode {
    let code = match &err {
        PipelineError::Initialization(_) => EXIT_INIT,
        PipelineError::Session(SessionError::Graph(GraphError::SolverFailure { .. })) => {
            EXIT_SOLVER
        }
        PipelineError::Session(SessionError::Graph(_)) => EXIT_SOLVER,
        _ => EXIT_INPUT,
    };
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn cmd_build_central(
    config: &RunConfig,
    sim: Option<String>,
    input: Option<PathBuf>,
    out: PathBuf,
) -> ExitCode {
    let (store, gt) = match (&sim, &input) {
        (Some(name), None) => {
            let scenario = match parse_scenario(name) {
                Ok(s) => s,
                Err(e) => return input_err(e),
            };
            match build_central(config, scenario) {
                Ok(r) => r,
                Err(e) => return pipeline_exit(e),
            }
        }
        (None, Some(dir)) => {
            let store = match SessionStore::load(dir, SessionTag::Central, config) {
                Ok(s) => s,
                Err(e) => return input_err(e),
            };
            if store.is_empty() {
                return input_err(format!("input session {} has no keyframes", dir.display()));
            }
            let gt = store.keyframes().iter().map(|k| k.pose).collect();
            (store, gt)
        }
        _ => return input_err("build-central needs exactly one of --sim or --input"),
    };
    if let Err(e) = store.save(&out) {
        return input_err(e);
    }
    if let Err(e) = write_tum_file(&out.join("ground_truth.tum"), &gt) {
        return input_err(e);
    }
    if let Err(e) = config.save(&out.join("config.txt")) {
        return input_err(e);
    }
    if let Some(name) = &sim {
        let meta = format!("scenario = {name}\nseed = {}\n", config.seed);
        if let Err(e) = std::fs::write(out.join("scenario.txt"), meta) {
            return input_err(e);
        }
    }
    println!(
        "central session: {} keyframes, {} submaps -> {}",
        store.len(),
        store.submaps().len(),
        out.display()
    );
    ExitCode::SUCCESS
}

#[allow(clippy::too_many_arguments)]
fn cmd_localize(
    config: &mut RunConfig,
    central_dir: PathBuf,
    sim: String,
    init: (f64, f64, f64),
    mode: String,
    immediate_update: bool,
    ab_baseline: bool,
    out: PathBuf,
) -> ExitCode {
    let scenario = match parse_scenario(&sim) {
        Ok(s) => s,
        Err(e) => return input_err(e),
    };
    let force_mode = match parse_mode(&mode) {
        Ok(m) => m,
        Err(e) => return input_err(e),
    };
    if immediate_update {
        config.immediate_update = true;
    }
    let central = match SessionStore::load(&central_dir, SessionTag::Central, config) {
        Ok(s) => s,
        Err(e) => return input_err(e),
    };
    let opts = LocalizeOptions {
        init_offset: init,
        force_mode,
        propagation: !ab_baseline,
        ..LocalizeOptions::default()
    };
    let artifacts = match localize_sim(config, scenario, central, &opts) {
        Ok(a) => a,
        Err(e) => return pipeline_exit(e),
    };
    if let Err(e) = write_run_outputs(&out, &artifacts) {
        return pipeline_exit(e);
    }
    if let Err(e) = write_tum_file(&out.join("ground_truth.tum"), &artifacts.gt) {
        return input_err(e);
    }
    println!("{}", artifacts.ate);
    println!("outputs -> {}", out.display());
    ExitCode::SUCCESS
}

fn cmd_evaluate(est: PathBuf, gt: PathBuf, align: bool) -> ExitCode {
    let est_traj = match read_tum_file(&est) {
        Ok(t) => t,
        Err(e) => return input_err(e),
    };
    let gt_traj = match read_tum_file(&gt) {
        Ok(t) => t,
        Err(e) => return input_err(e),
    };
    match evaluate(&est_traj, &gt_traj, align) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => input_err(e),
    }
}

fn cmd_ab_propagation(config: &RunConfig, sim: String, out: PathBuf) -> ExitCode {
    let scenario = match parse_scenario(&sim) {
        Ok(s) => s,
        Err(e) => return input_err(e),
    };
    let (central, _) = match build_central(config, scenario) {
        Ok(r) => r,
        Err(e) => return pipeline_exit(e),
    };
    let mut report = String::new();
    let mut rmse = Vec::new();
    for (label, propagation) in [("propagation", true), ("single-edge-baseline", false)] {
        let opts = LocalizeOptions {
            propagation,
            ..LocalizeOptions::default()
        };
        let artifacts = match localize_sim(config, scenario, central.clone(), &opts) {
            Ok(a) => a,
            Err(e) => return pipeline_exit(e),
        };
        let jfgo = artifacts.timings.mean("jfgo-step").unwrap_or(0.0);
        report.push_str(&format!(
            "variant={label} xyz_rmse={:.4} m rot_rmse={:.4} rad jfgo_mean={jfgo:.2} ms\n",
            artifacts.ate.xyz_rmse, artifacts.ate.rot_rmse
        ));
        rmse.push(artifacts.ate.xyz_rmse);
        let variant_dir = out.join(label);
        if let Err(e) = write_run_outputs(&variant_dir, &artifacts) {
            return pipeline_exit(e);
        }
        if let Err(e) = write_tum_file(&variant_dir.join("ground_truth.tum"), &artifacts.gt) {
            return input_err(e);
        }
    }
    report.push_str(&format!(
        "propagation_beats_or_ties_baseline = {}\n",
        rmse[0] <= rmse[1]
    ));
    if let Err(e) = std::fs::create_dir_all(&out)
        .and_then(|_| std::fs::write(out.join("ab_report.txt"), &report))
    {
        return input_err(e);
    }
    print!("{report}");
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LILOC_LOG", "error")).init();
    let cli = Cli::parse();
    let mut config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => return input_err(e),
    };
    match cli.cmd {
        Cmd::BuildCentral { sim, input, out } => cmd_build_central(&config, sim, input, out),
        Cmd::Localize {
            central,
            sim,
            init_x,
            init_y,
            init_yaw,
            mode,
            immediate_update,
            ab_baseline,
            out,
        } => cmd_localize(
            &mut config,
            central,
            sim,
            (init_x, init_y, init_yaw),
            mode,
            immediate_update,
            ab_baseline,
            out,
        ),
        Cmd::Evaluate { est, gt, align } => cmd_evaluate(est, gt, align),
        Cmd::AbPropagation { sim, out } => cmd_ab_propagation(&config, sim, out),
    }
}
